//! Analysis computations behind the `analyze` and `export-attention`
//! commands: the hardness/recall correlation report, per-anchor score grids,
//! and attention export.

use serde::Serialize;

use crate::backbone::{compute_mua, upsample_attention, EntropyKind};
use crate::data::AnnotatedImage;
use crate::error::Result;
use crate::metrics::{pearson, recall_rate, ImageGt};
use crate::rpn::proposal_transferability;
use crate::tensor::{Element, Tensor};
use crate::trainer::{infer, Detector, InferOptions};

/// One scatter point of the hardness/recall analysis.
#[derive(Clone, Debug, Serialize)]
pub struct CorrelationRow {
    pub image: String,
    pub hardness: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    pub pearson: f64,
}

/// Per-image hardness score versus detection recall over labeled target
/// images, plus the Pearson coefficient of the scatter.
pub fn correlation_report<E: Element>(
    model: &Detector<E>,
    targets: &[(String, AnnotatedImage)],
    opts: InferOptions,
) -> Result<CorrelationReport> {
    let mut rows = Vec::with_capacity(targets.len());
    for (name, img) in targets {
        let pl = model.forward_image(&img.pixels, false, false)?;
        let hardness = crate::head::hardness_score(&pl.fused, &model.d_dis);
        let dets = infer(model, &img.pixels, opts)?;
        let gt = ImageGt {
            boxes: img.boxes.clone(),
            classes: img.classes.clone(),
        };
        rows.push(CorrelationRow {
            image: name.clone(),
            hardness,
            recall: recall_rate(&dets, &gt, 0.5),
        });
    }
    let h: Vec<f64> = rows.iter().map(|r| r.hardness).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.recall).collect();
    Ok(CorrelationReport {
        pearson: pearson(&h, &r),
        rows,
    })
}

/// One grid cell of the per-anchor dump: objectness, transferability and the
/// re-weighted score.
#[derive(Clone, Debug, Serialize)]
pub struct AnchorCell {
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub objectness: f64,
    pub transferability: f64,
    pub reweighted: f64,
}

/// Raw per-anchor score grids for one image (inspection artifact).
pub fn anchor_score_grid<E: Element>(
    model: &Detector<E>,
    pixels: &Tensor<f32>,
) -> Result<Vec<AnchorCell>> {
    let pl = model.forward_image(pixels, true, true)?;
    let p_rpn = model.d_rpn.forward(&pl.rpn.feature.detach());
    let kind = if model.cfg.entropy_full_binary {
        EntropyKind::FullBinary
    } else {
        EntropyKind::PLogP
    };
    let e = proposal_transferability(p_rpn.value(), kind)?;
    let o = pl.rpn.objectness.value();
    let (gh, gw) = (model.anchors.grid_h, model.anchors.grid_w);
    let plane = gh * gw;
    let mut out = Vec::with_capacity(model.anchors.len());
    for a in 0..model.anchors.k {
        for y in 0..gh {
            for x in 0..gw {
                let i = a * plane + y * gw + x;
                let ov = o.data()[i].to64();
                out.push(AnchorCell {
                    anchor: a,
                    cell_y: y,
                    cell_x: x,
                    objectness: ov,
                    transferability: e[i],
                    reweighted: ov * e[i],
                });
            }
        }
    }
    Ok(out)
}

/// Attention map of one image: the raw grid plus an 8-bit grayscale
/// upsampled to image extent (values scaled by `e`, the entropy maximum).
pub struct AttentionExport {
    pub grid: Tensor<f64>,
    pub gray: Vec<u8>,
    pub width: usize,
    pub height: usize,
}

pub fn export_attention<E: Element>(
    model: &Detector<E>,
    pixels: &Tensor<f32>,
) -> Result<AttentionExport> {
    let pl = model.forward_image(pixels, false, false)?;
    let kind = if model.cfg.entropy_full_binary {
        EntropyKind::FullBinary
    } else {
        EntropyKind::PLogP
    };
    let e = compute_mua(&pl.fused, &model.d_fus, kind)?;
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let up = upsample_attention(&e, h, w)?;
    let scale = std::f64::consts::E; // -p ln p peaks at 1/e
    let gray: Vec<u8> = up
        .data()
        .iter()
        .map(|v| ((v.to64() * scale).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(AttentionExport {
        grid: e.data.cast::<f64>(),
        gray,
        width: w,
        height: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::data::{generate_scene, Domain};

    fn tiny() -> (Detector<f32>, AnnotatedImage) {
        let cfg = TrainConfig {
            image_size: 32,
            channels: vec![8, 8, 16],
            disc_hidden: 8,
            head_hidden: 16,
            ins_hidden: 8,
            proposals_n: 16,
            n_min: 4,
            anchor_scales: vec![10.0],
            anchor_ratios: vec![1.0],
            min_object_size: 8.0,
            max_object_size: 14.0,
            max_objects: 2,
            ..TrainConfig::default()
        };
        let img = generate_scene(3, Domain::Target, &cfg.scene_config()).unwrap();
        (Detector::new(&cfg).unwrap(), img)
    }

    #[test]
    fn correlation_report_is_deterministic_with_one_row_per_image() {
        let (model, img) = tiny();
        let targets = vec![
            ("a".to_string(), img.clone()),
            ("b".to_string(), img.clone()),
        ];
        let r1 = correlation_report(&model, &targets, InferOptions::default()).unwrap();
        let r2 = correlation_report(&model, &targets, InferOptions::default()).unwrap();
        assert_eq!(r1.rows.len(), 2);
        assert_eq!(r1.pearson, r2.pearson);
        assert_eq!(r1.rows[0].hardness, r2.rows[0].hardness);
    }

    #[test]
    fn anchor_grid_covers_every_cell() {
        let (model, img) = tiny();
        let grid = anchor_score_grid(&model, &img.pixels).unwrap();
        assert_eq!(grid.len(), model.anchors.len());
        for c in &grid {
            assert!((0.0..=1.0).contains(&c.objectness));
            assert!(c.transferability >= 0.0);
            assert!((c.reweighted - c.objectness * c.transferability).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_export_shapes() {
        let (model, img) = tiny();
        let e = export_attention(&model, &img.pixels).unwrap();
        assert_eq!(e.grid.shape(), &[4, 4]);
        assert_eq!(e.gray.len(), 32 * 32);
        assert_eq!((e.width, e.height), (32, 32));
    }
}
