//! Deterministic two-domain synthetic dataset: colored shapes (disc, square,
//! triangle) on a gray background, with an appearance-only shift (blur,
//! brightness/contrast, noise) defining the target domain.
//!
//! On-disk layout:
//!
//! ```text
//! dir/
//!   manifest.tsv       training view: source rows carry annotations,
//!                      target rows have an empty annotation field
//!   eval_labels.tsv    held-out ground truth for every target image;
//!                      the trainer never opens this file
//!   images/*.png       8-bit RGB, lossless
//! ```
//!
//! Manifest records are one per line: `relpath<TAB>domain<TAB>anns` with
//! `anns = class:x1,y1,x2,y2[;class:...]`. The first line is a version
//! header. Pixels are quantized to the 8-bit grid at generation time, so a
//! disk round-trip reproduces in-memory pixels exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxF};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#crossdet-dataset\t1";

/// Domain of an image: 0 = source, 1 = target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn value(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_value(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            _ => Err(Error::Format(format!("domain label must be 0 or 1, got {v}"))),
        }
    }
}

/// Appearance-only shift applied to target-domain scenes.
#[derive(Clone, Copy, Debug)]
pub struct ShiftParams {
    pub blur_sigma: f64,
    pub brightness_delta: f64,
    pub contrast_gain: f64,
    pub noise_std: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.3,
            brightness_delta: -0.12,
            contrast_gain: 0.75,
            noise_std: 0.06,
        }
    }
}

impl ShiftParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            brightness_delta: 0.0,
            contrast_gain: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma < 0.0 || self.noise_std < 0.0 || self.contrast_gain <= 0.0 {
            return Err(Error::Contract(format!("invalid shift params {self:?}")));
        }
        Ok(())
    }
}

/// Scene generator settings.
#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub image_size: usize,
    pub class_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub max_overlap_iou: f64,
    pub placement_retries: usize,
    pub shift: ShiftParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            class_count: 3,
            min_objects: 1,
            max_objects: 5,
            min_object_size: 10.0,
            max_object_size: 28.0,
            max_overlap_iou: 0.1,
            placement_retries: 100,
            shift: ShiftParams::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Contract("image_size must be at least 8".into()));
        }
        if self.class_count == 0 || self.class_count > 3 {
            return Err(Error::Contract(
                "class_count must be 1..=3 (disc, square, triangle)".into(),
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Contract("bad object count range".into()));
        }
        if !(self.min_object_size >= 2.0 && self.min_object_size <= self.max_object_size) {
            return Err(Error::Contract("bad object size range".into()));
        }
        if self.max_object_size + 2.0 > self.image_size as f64 {
            return Err(Error::Contract("objects larger than image".into()));
        }
        self.shift.validate()
    }
}

/// An image with ground truth. `pixels` is `3 x H x W` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub pixels: Tensor<f32>,
    pub boxes: Vec<BoxF>,
    pub classes: Vec<usize>,
    pub domain: Domain,
}

impl AnnotatedImage {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        let s = self.pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("pixels must be 3 x H x W, got {s:?}")));
        }
        let (h, w) = (s[1] as f64, s[2] as f64);
        if self.boxes.len() != self.classes.len() {
            return Err(Error::Contract("boxes/classes length mismatch".into()));
        }
        for b in &self.boxes {
            if !(b.x1 < b.x2 && b.y1 < b.y2 && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h)
            {
                return Err(Error::Contract(format!("box {b:?} outside image bounds")));
            }
        }
        if self.classes.iter().any(|&c| c >= class_count) {
            return Err(Error::Contract("class index out of range".into()));
        }
        Ok(())
    }
}

/// Target image as the trainer sees it: pixels only, no label fields.
#[derive(Clone, Debug)]
pub struct UnlabeledImage {
    pub pixels: Tensor<f32>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

fn raster(shape: Shape, cx: f64, cy: f64, size: f64, img: &mut [f64], w: usize, color: [f64; 3]) {
    let half = size / 2.0;
    let plane = img.len() / 3;
    let h = plane / w;
    let y_lo = ((cy - half).floor().max(0.0)) as usize;
    let y_hi = ((cy + half).ceil() as usize).min(h);
    let x_lo = ((cx - half).floor().max(0.0)) as usize;
    let x_hi = ((cx + half).ceil() as usize).min(w);
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let (fx, fy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            let inside = match shape {
                Shape::Disc => fx * fx + fy * fy <= half * half,
                Shape::Square => fx.abs() <= half && fy.abs() <= half,
                Shape::Triangle => {
                    // isoceles, apex up: row width grows linearly toward the base
                    let t = (fy + half) / size;
                    (0.0..=1.0).contains(&t) && fx.abs() <= t * half
                }
            };
            if inside {
                for (c, &col) in color.iter().enumerate() {
                    img[c * plane + py * w + px] = col;
                }
            }
        }
    }
}

/// Quantize to the 8-bit grid the PNG codec stores.
fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Deterministic scene generation. Target scenes are the same-seed source
/// scene with the configured appearance shift applied; ground truth is
/// identical across domains.
pub fn generate_scene(seed: u64, domain: Domain, cfg: &SceneConfig) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 1);
    let n = cfg.image_size;
    let bg = rng.gen_range(0.12..0.30);
    let mut img = vec![bg; 3 * n * n];

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BoxF> = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for obj in 0..count {
        let mut placed = false;
        for _ in 0..cfg.placement_retries {
            let class = rng.gen_range(0..cfg.class_count);
            let size = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
            let half = size / 2.0;
            let cx = rng.gen_range(half + 1.0..n as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..n as f64 - half - 1.0);
            let cand = BoxF::new(cx - half, cy - half, cx + half, cy + half);
            if boxes.iter().any(|b| iou(b, &cand) > cfg.max_overlap_iou) {
                continue;
            }
            // bright foreground over the dark background
            let color = [
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.45..0.95),
            ];
            let shape = match class {
                0 => Shape::Disc,
                1 => Shape::Square,
                _ => Shape::Triangle,
            };
            raster(shape, cx, cy, size, &mut img, n, color);
            boxes.push(cand);
            classes.push(class);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {obj} after {} retries (seed {seed})",
                cfg.placement_retries
            )));
        }
    }

    let mut pixels = Tensor::<f32>::from_vec(
        &[3, n, n],
        img.iter().map(|&v| v as f32).collect(),
    )?;
    if domain == Domain::Target {
        pixels = apply_domain_shift(&pixels, &cfg.shift, seed)?;
    }
    let quantized = pixels.map(|v| quantize(v as f64));
    let out = AnnotatedImage {
        pixels: quantized,
        boxes,
        classes,
        domain,
    };
    out.validate(cfg.class_count)?;
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Appearance shift: Gaussian blur, then `v -> (v - 0.5) * gain + 0.5 + delta`,
/// then additive Gaussian noise, then clamp to `[0, 1]`. Steps at their
/// identity settings are skipped exactly, so the all-identity shift is a
/// bitwise no-op. Deterministic in `seed`.
pub fn apply_domain_shift(img: &Tensor<f32>, p: &ShiftParams, seed: u64) -> Result<Tensor<f32>> {
    p.validate()?;
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected C x H x W image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut buf: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();

    if p.blur_sigma > 0.0 {
        let k = gaussian_kernel(p.blur_sigma);
        let radius = k.len() / 2;
        let mut tmp = vec![0.0f64; buf.len()];
        // horizontal pass, replicate edges
        for ch in 0..c {
            for y in 0..h {
                let row = ch * h * w + y * w;
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let xx = (x as isize + i as isize - radius as isize)
                            .clamp(0, w as isize - 1) as usize;
                        acc += kv * buf[row + xx];
                    }
                    tmp[row + x] = acc;
                }
            }
        }
        // vertical pass
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, &kv) in k.iter().enumerate() {
                        let yy = (y as isize + i as isize - radius as isize)
                            .clamp(0, h as isize - 1) as usize;
                        acc += kv * tmp[ch * h * w + yy * w + x];
                    }
                    buf[ch * h * w + y * w + x] = acc;
                }
            }
        }
    }

    if p.contrast_gain != 1.0 || p.brightness_delta != 0.0 {
        for v in &mut buf {
            *v = (*v - 0.5) * p.contrast_gain + 0.5 + p.brightness_delta;
        }
    }

    if p.noise_std > 0.0 {
        let mut rng = rng_for(seed, 2);
        for v in &mut buf {
            let z: f64 = rng.sample(StandardNormal);
            *v += p.noise_std * z;
        }
    }

    Tensor::from_vec(s, buf.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Counts and base seed for a full dataset.
#[derive(Clone, Debug)]
pub struct DataConfig {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_source: 500,
            n_target: 500,
            n_test: 200,
            scene: SceneConfig::default(),
        }
    }
}

/// Fully generated dataset, before the train/eval label split is applied.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub source_train: Vec<AnnotatedImage>,
    pub target_train: Vec<AnnotatedImage>,
    pub target_test: Vec<AnnotatedImage>,
}

const SOURCE_OFFSET: u64 = 0;
const TARGET_OFFSET: u64 = 1_000_003;
const TEST_OFFSET: u64 = 2_000_003;

pub fn generate_dataset(cfg: &DataConfig) -> Result<GeneratedDataset> {
    let gen = |offset: u64, count: usize, domain: Domain| -> Result<Vec<AnnotatedImage>> {
        (0..count)
            .map(|i| generate_scene(cfg.seed.wrapping_add(offset + i as u64), domain, &cfg.scene))
            .collect()
    };
    Ok(GeneratedDataset {
        source_train: gen(SOURCE_OFFSET, cfg.n_source, Domain::Source)?,
        target_train: gen(TARGET_OFFSET, cfg.n_target, Domain::Target)?,
        target_test: gen(TEST_OFFSET, cfg.n_test, Domain::Target)?,
    })
}

/// Training view of a dataset: source images keep labels, target images are
/// pixels only.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub source_train: Vec<AnnotatedImage>,
    pub target_train: Vec<UnlabeledImage>,
    pub target_test: Vec<UnlabeledImage>,
    /// relpaths aligned with `target_test`, for joining eval labels
    pub target_test_paths: Vec<String>,
}

impl GeneratedDataset {
    /// What the trainer is allowed to see.
    pub fn train_view(&self) -> TrainView {
        TrainView {
            source_train: self.source_train.clone(),
            target_train: self
                .target_train
                .iter()
                .map(|a| UnlabeledImage {
                    pixels: a.pixels.clone(),
                })
                .collect(),
            target_test: self
                .target_test
                .iter()
                .map(|a| UnlabeledImage {
                    pixels: a.pixels.clone(),
                })
                .collect(),
            target_test_paths: (0..self.target_test.len())
                .map(|i| format!("images/target_test_{i:04}.png"))
                .collect(),
        }
    }

    /// Eval-only ground truth for target test images.
    pub fn eval_test_labels(&self) -> Vec<(Vec<BoxF>, Vec<usize>)> {
        self.target_test
            .iter()
            .map(|a| (a.boxes.clone(), a.classes.clone()))
            .collect()
    }
}

fn format_anns(boxes: &[BoxF], classes: &[usize]) -> String {
    boxes
        .iter()
        .zip(classes)
        .map(|(b, c)| format!("{c}:{},{},{},{}", b.x1, b.y1, b.x2, b.y2))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_anns(s: &str, line_no: usize) -> Result<(Vec<BoxF>, Vec<usize>)> {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    if s.is_empty() {
        return Ok((boxes, classes));
    }
    for part in s.split(';') {
        let (class_s, coords) = part
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("manifest line {line_no}: missing ':'")))?;
        let class: usize = class_s
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {line_no}: bad class")))?;
        let vals: Vec<f64> = coords
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("manifest line {line_no}: bad coordinate")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {line_no}: expected 4 coordinates"
            )));
        }
        if vals.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Format(format!(
                "manifest line {line_no}: negative or non-finite coordinate"
            )));
        }
        if vals[0] >= vals[2] || vals[1] >= vals[3] {
            return Err(Error::Format(format!(
                "manifest line {line_no}: degenerate box"
            )));
        }
        boxes.push(BoxF::new(vals[0], vals[1], vals[2], vals[3]));
        classes.push(class);
    }
    Ok((boxes, classes))
}

fn save_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let s = pixels.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = pixels.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("buffer size");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Write a generated dataset: images, training manifest, and the held-out
/// eval label file.
pub fn write_dataset(dir: &Path, data: &GeneratedDataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut eval = String::from(MANIFEST_HEADER);
    eval.push('\n');

    let mut emit = |imgs: &[AnnotatedImage], prefix: &str, hide_labels: bool| -> Result<()> {
        for (i, a) in imgs.iter().enumerate() {
            let rel = format!("images/{prefix}_{i:04}.png");
            save_png(&dir.join(&rel), &a.pixels)?;
            let anns = format_anns(&a.boxes, &a.classes);
            if hide_labels {
                manifest.push_str(&format!("{rel}\t{}\t\n", a.domain.value()));
                eval.push_str(&format!("{rel}\t{}\t{anns}\n", a.domain.value()));
            } else {
                manifest.push_str(&format!("{rel}\t{}\t{anns}\n", a.domain.value()));
            }
        }
        Ok(())
    };
    emit(&data.source_train, "source_train", false)?;
    emit(&data.target_train, "target_train", true)?;
    emit(&data.target_test, "target_test", true)?;

    let mut f = std::fs::File::create(dir.join("manifest.tsv"))?;
    f.write_all(manifest.as_bytes())?;
    let mut f = std::fs::File::create(dir.join("eval_labels.tsv"))?;
    f.write_all(eval.as_bytes())?;
    Ok(())
}

fn read_manifest_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Format(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut lines = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::Format(format!(
                    "manifest version mismatch: first line {line:?}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        lines.push((i + 1, line));
    }
    Ok(lines)
}

fn parse_record(line_no: usize, line: &str) -> Result<(String, Domain, Vec<BoxF>, Vec<usize>)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::Format(format!(
            "manifest line {line_no}: expected 3 tab-separated fields, got {}",
            fields.len()
        )));
    }
    let domain = Domain::from_value(
        fields[1]
            .parse::<u8>()
            .map_err(|_| Error::Format(format!("manifest line {line_no}: bad domain")))?,
    )
    .map_err(|_| Error::Format(format!("manifest line {line_no}: bad domain")))?;
    let (boxes, classes) = parse_anns(fields[2], line_no)?;
    Ok((fields[0].to_string(), domain, boxes, classes))
}

/// Read the training view. Never touches `eval_labels.tsv`.
pub fn read_dataset(dir: &Path) -> Result<TrainView> {
    let mut view = TrainView {
        source_train: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
        target_test_paths: Vec::new(),
    };
    for (line_no, line) in read_manifest_lines(&dir.join("manifest.tsv"))? {
        let (rel, domain, boxes, classes) = parse_record(line_no, &line)?;
        let img_path = dir.join(&rel);
        if !img_path.exists() {
            return Err(Error::Format(format!(
                "manifest line {line_no}: missing image file {rel}"
            )));
        }
        let pixels = load_png(&img_path)?;
        match domain {
            Domain::Source => view.source_train.push(AnnotatedImage {
                pixels,
                boxes,
                classes,
                domain,
            }),
            Domain::Target => {
                if rel.contains("target_test") {
                    view.target_test.push(UnlabeledImage { pixels });
                    view.target_test_paths.push(rel);
                } else {
                    view.target_train.push(UnlabeledImage { pixels });
                }
            }
        }
    }
    Ok(view)
}

/// Eval-only accessor for held-out target labels, keyed by relpath.
pub fn read_eval_labels(dir: &Path) -> Result<BTreeMap<String, (Vec<BoxF>, Vec<usize>)>> {
    let mut map = BTreeMap::new();
    for (line_no, line) in read_manifest_lines(&dir.join("eval_labels.tsv"))? {
        let (rel, _, boxes, classes) = parse_record(line_no, &line)?;
        map.insert(rel, (boxes, classes));
    }
    Ok(map)
}

/// Labeled target images (eval-only): joins the training view's target images
/// with held-out labels. Used by `evaluate` and the oracle training mode.
pub fn read_labeled_targets(
    dir: &Path,
    split_test: bool,
) -> Result<Vec<(String, AnnotatedImage)>> {
    let labels = read_eval_labels(dir)?;
    let mut out = Vec::new();
    for (line_no, line) in read_manifest_lines(&dir.join("manifest.tsv"))? {
        let (rel, domain, _, _) = parse_record(line_no, &line)?;
        if domain != Domain::Target {
            continue;
        }
        let is_test = rel.contains("target_test");
        if is_test != split_test {
            continue;
        }
        let (boxes, classes) = labels
            .get(&rel)
            .cloned()
            .ok_or_else(|| Error::Format(format!("no eval labels for {rel}")))?;
        out.push((
            rel.clone(),
            AnnotatedImage {
                pixels: load_png(&dir.join(&rel))?,
                boxes,
                classes,
                domain,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(42, Domain::Source, &cfg).unwrap();
        let b = generate_scene(42, Domain::Source, &cfg).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.classes, b.classes);
    }

    #[test]
    fn forced_object_count() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            ..SceneConfig::default()
        };
        let a = generate_scene(7, Domain::Source, &cfg).unwrap();
        assert_eq!(a.boxes.len(), 1);
    }

    #[test]
    fn min_size_bounds_box_area() {
        let cfg = SceneConfig {
            min_object_size: 4.0,
            ..SceneConfig::default()
        };
        for seed in 0..1000 {
            let a = generate_scene(seed, Domain::Source, &cfg).unwrap();
            for b in &a.boxes {
                assert!(b.area() >= 16.0 - 1e-9, "seed {seed}: area {}", b.area());
            }
        }
    }

    #[test]
    fn shift_identity_is_exact() {
        let cfg = SceneConfig::default();
        let a = generate_scene(3, Domain::Source, &cfg).unwrap();
        let out = apply_domain_shift(&a.pixels, &ShiftParams::identity(), 3).unwrap();
        assert_eq!(out.data(), a.pixels.data());
    }

    #[test]
    fn brightness_shifts_constant_image() {
        let img = Tensor::<f32>::filled(&[3, 8, 8], 0.5);
        let p = ShiftParams {
            blur_sigma: 0.0,
            brightness_delta: 0.1,
            contrast_gain: 1.0,
            noise_std: 0.0,
        };
        let out = apply_domain_shift(&img, &p, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn blur_matches_reference_convolution_and_shrinks_peak() {
        // one white pixel on black; reference = direct 2-d convolution with
        // the same separable kernel, replicate padding
        let n = 15;
        let mut data = vec![0.0f32; 3 * n * n];
        for c in 0..3 {
            data[c * n * n + 7 * n + 7] = 1.0;
        }
        let img = Tensor::from_vec(&[3, n, n], data).unwrap();
        let p = ShiftParams {
            blur_sigma: 2.0,
            brightness_delta: 0.0,
            contrast_gain: 1.0,
            noise_std: 0.0,
        };
        let out = apply_domain_shift(&img, &p, 0).unwrap();
        let max = out.data().iter().cloned().fold(0.0f32, f32::max);
        assert!(max < 1.0, "peak must strictly decrease, got {max}");

        let k = gaussian_kernel(2.0);
        let r = k.len() / 2;
        let refval = |y: usize, x: usize| -> f64 {
            let mut acc = 0.0;
            for (i, &ky) in k.iter().enumerate() {
                for (j, &kx) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r as isize).clamp(0, n as isize - 1);
                    let xx = (x as isize + j as isize - r as isize).clamp(0, n as isize - 1);
                    if yy == 7 && xx == 7 {
                        acc += ky * kx;
                    }
                }
            }
            acc
        };
        for y in [0usize, 5, 7, 9] {
            for x in [0usize, 6, 7, 8] {
                let got = out.data()[y * n + x] as f64;
                assert!((got - refval(y, x)).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn target_shares_ground_truth_with_matched_source() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(seed, Domain::Source, &cfg).unwrap();
            let t = generate_scene(seed, Domain::Target, &cfg).unwrap();
            assert_eq!(s.boxes, t.boxes);
            assert_eq!(s.classes, t.classes);
        }
    }

    #[test]
    fn domains_differ_in_appearance() {
        let cfg = SceneConfig::default();
        let mut mean_abs = 0.0f64;
        let count = 100;
        for seed in 0..count {
            let s = generate_scene(seed, Domain::Source, &cfg).unwrap();
            let t = generate_scene(seed, Domain::Target, &cfg).unwrap();
            let diff: f64 = s
                .pixels
                .data()
                .iter()
                .zip(t.pixels.data())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / s.pixels.numel() as f64;
            mean_abs += diff / count as f64;
        }
        assert!(mean_abs > 0.02, "marginal gap too small: {mean_abs}");
    }

    #[test]
    fn round_trip_preserves_annotations_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DataConfig {
            seed: 5,
            n_source: 4,
            n_target: 4,
            n_test: 2,
            scene: SceneConfig::default(),
        };
        let data = generate_dataset(&cfg).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let view = read_dataset(dir.path()).unwrap();
        assert_eq!(view.source_train.len(), 4);
        assert_eq!(view.target_train.len(), 4);
        assert_eq!(view.target_test.len(), 2);
        for (orig, back) in data.source_train.iter().zip(&view.source_train) {
            assert_eq!(orig.boxes, back.boxes);
            assert_eq!(orig.classes, back.classes);
            for (&a, &b) in orig.pixels.data().iter().zip(back.pixels.data()) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
        let labels = read_eval_labels(dir.path()).unwrap();
        assert_eq!(labels.len(), 6);
        let targets = read_labeled_targets(dir.path(), true).unwrap();
        assert_eq!(targets.len(), 2);
        assert_eq!(targets[0].1.boxes, data.target_test[0].boxes);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = GeneratedDataset {
            source_train: vec![],
            target_train: vec![],
            target_test: vec![],
        };
        write_dataset(dir.path(), &data).unwrap();
        let view = read_dataset(dir.path()).unwrap();
        assert!(view.source_train.is_empty());
        assert!(view.target_train.is_empty());
    }

    #[test]
    fn negative_coordinate_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::write(
            dir.path().join("manifest.tsv"),
            format!("{MANIFEST_HEADER}\nimages/x.png\t0\t1:-3,0,5,5\n"),
        )
        .unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "message was: {msg}");
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "#crossdet-dataset\t9\n").unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn pixels_are_quantized_at_generation() {
        let a = generate_scene(11, Domain::Target, &SceneConfig::default()).unwrap();
        for &v in a.pixels.data() {
            let q = (v * 255.0).round() / 255.0;
            assert!((v - q).abs() < 1e-6);
        }
    }
}
