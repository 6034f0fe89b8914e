//! Image-level feature extraction and alignment: the strided backbone,
//! per-layer pixel-wise domain discriminators, multi-scale fusion, and the
//! entropy attention map applied to the final feature.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_reversal, GrlConfig, Param, Var};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Feature map from backbone layer `layer` (1-based); `data` is `C x H x W`.
#[derive(Clone)]
pub struct FeatureMap<E: Element> {
    pub layer: usize,
    pub data: Var<E>,
}

/// Multi-scale fused feature at the last layer's resolution.
#[derive(Clone)]
pub struct FusedFeature<E: Element> {
    pub data: Var<E>,
}

/// Per-pixel domain uncertainty at the last layer's resolution. Detached:
/// attention is guidance, no gradient flows through it.
#[derive(Clone)]
pub struct AttentionMap<E: Element> {
    pub data: Tensor<E>,
}

impl<E: Element> AttentionMap<E> {
    /// Entries of `-p ln p` live in `[0, 1/e]`.
    pub fn validate(&self) -> Result<()> {
        let limit = E::of((-1.0f64).exp() + 1e-6);
        for &v in self.data.data() {
            if v < E::zero() || v > limit {
                return Err(Error::Contract(format!("attention entry {v} out of range")));
            }
        }
        Ok(())
    }
}

/// How the attention map multiplies the final feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// `f * E` (the literal rule).
    Raw,
    /// `f * (1 + E)`.
    Residual,
}

/// Which entropy the uncertainty map uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyKind {
    /// `-p ln p`, as written.
    PLogP,
    /// Full binary entropy `-p ln p - (1-p) ln (1-p)` (comparison variant).
    FullBinary,
}

/// Strided feature extractor: one 3x3 stride-2 convolution + rectifier per
/// stage, plus a 3x3 refinement at the last stage.
pub struct Backbone<E: Element> {
    stages: Vec<Conv2d<E>>,
    refine: Conv2d<E>,
}

impl<E: Element> Backbone<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: &[usize]) -> Self {
        assert!(!channels.is_empty());
        let mut stages = Vec::with_capacity(channels.len());
        let mut in_ch = 3;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv2d::new(
                &format!("{name}.stage{}", i + 1),
                rng,
                in_ch,
                c,
                3,
                2,
                1,
            ));
            in_ch = c;
        }
        let last = *channels.last().unwrap();
        let refine = Conv2d::new(&format!("{name}.refine"), rng, last, last, 3, 1, 1);
        Self { stages, refine }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Layer-wise features; spatial extents halve per stage.
    pub fn extract_features(&self, image: &Var<E>) -> Result<Vec<FeatureMap<E>>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected 3 x H x W image, got {s:?}")));
        }
        let min = 1usize << self.stages.len();
        if s[1] < min || s[2] < min {
            return Err(Error::Shape(format!(
                "image {}x{} smaller than 2^L = {min}",
                s[1], s[2]
            )));
        }
        if s[1] < 2 * min || s[2] < 2 * min {
            return Err(Error::Shape(format!(
                "image {}x{} leaves the last layer under 2 pixels",
                s[1], s[2]
            )));
        }
        let mut features = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for (i, conv) in self.stages.iter().enumerate() {
            x = ops::relu(&conv.forward(&x));
            if i + 1 == self.stages.len() {
                x = ops::relu(&self.refine.forward(&x));
            }
            features.push(FeatureMap {
                layer: i + 1,
                data: x.clone(),
            });
        }
        Ok(features)
    }

    pub fn params(&self) -> Vec<Param<E>> {
        let mut p: Vec<Param<E>> = self.stages.iter().flat_map(|c| c.params()).collect();
        p.extend(self.refine.params());
        p
    }
}

/// Pixel-wise discriminator: three 1x1 convolutions with a sigmoid map
/// output. The penultimate activation doubles as the image-level context.
pub struct PixelDiscriminator<E: Element> {
    c1: Conv2d<E>,
    c2: Conv2d<E>,
    c3: Conv2d<E>,
}

impl<E: Element> PixelDiscriminator<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, hidden: usize) -> Self {
        Self {
            c1: Conv2d::new(&format!("{name}.c1"), rng, in_ch, hidden, 1, 1, 0),
            c2: Conv2d::new(&format!("{name}.c2"), rng, hidden, hidden, 1, 1, 0),
            c3: Conv2d::new(&format!("{name}.c3"), rng, hidden, 1, 1, 1, 0),
        }
    }

    /// Per-pixel probability map `1 x H x W`.
    pub fn forward(&self, x: &Var<E>) -> Var<E> {
        self.forward_with_hidden(x).0
    }

    pub fn forward_with_hidden(&self, x: &Var<E>) -> (Var<E>, Var<E>) {
        let h1 = ops::relu(&self.c1.forward(x));
        let h2 = ops::relu(&self.c2.forward(&h1));
        (ops::sigmoid(&self.c3.forward(&h2)), h2)
    }

    pub fn params(&self) -> Vec<Param<E>> {
        [&self.c1, &self.c2, &self.c3]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }
}

/// Bilinear-resize every layer's feature to the last layer's extent,
/// concatenate channel-wise and embed with the 1x1 fusion convolution.
pub fn fuse_multiscale<E: Element>(
    features: &[FeatureMap<E>],
    fuse: &Conv2d<E>,
) -> Result<FusedFeature<E>> {
    if features.is_empty() {
        return Err(Error::Contract("fuse_multiscale on empty feature list".into()));
    }
    for (i, f) in features.iter().enumerate() {
        if f.layer != i + 1 {
            return Err(Error::Contract("features must be ordered by layer".into()));
        }
    }
    let last = features.last().unwrap();
    let (h, w) = (last.data.shape()[1], last.data.shape()[2]);
    let mut resized = Vec::with_capacity(features.len());
    for f in features {
        resized.push(ops::bilinear_resize(&f.data, h, w)?);
    }
    let cat = ops::concat_channels(&resized);
    Ok(FusedFeature {
        data: fuse.forward(&cat),
    })
}

/// Elementwise `-p ln p` (natural log) with the probability floor inside the
/// log; the full-binary variant adds the `(1-p)` term. Inputs must be
/// probabilities up to a small slack.
pub fn pixel_entropy<E: Element>(p: &Tensor<E>, kind: EntropyKind) -> Result<Tensor<E>> {
    let slack = 1e-6;
    for &v in p.data() {
        let v = v.to64();
        if !(-slack..=1.0 + slack).contains(&v) {
            return Err(Error::Contract(format!(
                "entropy input {v} outside [0,1] beyond slack"
            )));
        }
    }
    Ok(p.map(|v| {
        let v = v.to64().clamp(0.0, 1.0);
        let h = -v * v.max(ops::PROB_EPS).min(1.0).ln();
        let h = match kind {
            EntropyKind::PLogP => h,
            EntropyKind::FullBinary => {
                h - (1.0 - v) * (1.0 - v).max(ops::PROB_EPS).min(1.0).ln()
            }
        };
        E::of(h)
    }))
}

/// Uncertainty attention: entropy of the fused-feature discriminator output.
/// Computed on detached inputs; neither the discriminator nor the fused
/// feature receives gradient through the attention path.
pub fn compute_mua<E: Element>(
    m: &FusedFeature<E>,
    d_fus: &PixelDiscriminator<E>,
    kind: EntropyKind,
) -> Result<AttentionMap<E>> {
    let prob = d_fus.forward(&m.data.detach());
    let (h, w) = (prob.shape()[1], prob.shape()[2]);
    let e = pixel_entropy(&prob.value().reshaped(&[h, w])?, kind)?;
    Ok(AttentionMap { data: e })
}

/// Multiply the final feature by the attention map (broadcast over channels).
pub fn apply_attention<E: Element>(
    f_last: &Var<E>,
    e: &AttentionMap<E>,
    mode: AttentionMode,
) -> Result<Var<E>> {
    let (h, w) = (f_last.shape()[1], f_last.shape()[2]);
    if e.data.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "attention extent {:?} vs feature {h}x{w}",
            e.data.shape()
        )));
    }
    let m = match mode {
        AttentionMode::Raw => Var::constant(e.data.clone()),
        AttentionMode::Residual => Var::constant(e.data.map(|v| E::one() + v)),
    };
    Ok(ops::mul_spatial(f_last, &m))
}

/// Least-squares pixel-wise adversarial loss on the fused features:
/// `mean(D(M_s)^2) + mean((1 - D(M_t))^2)`, with the GRL between the fusion
/// embedding and the discriminator.
pub fn loss_adv_fus<E: Element>(
    m_src: &FusedFeature<E>,
    m_tgt: &FusedFeature<E>,
    d_fus: &PixelDiscriminator<E>,
    grl: GrlConfig,
) -> Var<E> {
    let p_s = d_fus.forward(&gradient_reversal(&m_src.data, grl));
    let p_t = d_fus.forward(&gradient_reversal(&m_tgt.data, grl));
    let s_term = ops::mean_all(&ops::mul(&p_s, &p_s));
    let one_minus_t = ops::one_minus(&p_t);
    let t_term = ops::mean_all(&ops::mul(&one_minus_t, &one_minus_t));
    ops::add(&s_term, &t_term)
}

/// Layer-wise image-level adversarial loss: binary cross-entropy with
/// domain labels 0 (source) and 1 (target), averaged over pixels, layers
/// and the two images.
pub fn loss_adv_img<E: Element>(
    feats_src: &[FeatureMap<E>],
    feats_tgt: &[FeatureMap<E>],
    d_imgs: &[PixelDiscriminator<E>],
    grl: GrlConfig,
) -> Var<E> {
    assert_eq!(feats_src.len(), d_imgs.len());
    assert_eq!(feats_tgt.len(), d_imgs.len());
    let mut terms: Vec<Var<E>> = Vec::with_capacity(2 * d_imgs.len());
    for (feats, label) in [(feats_src, 0.0f64), (feats_tgt, 1.0f64)] {
        for (f, d) in feats.iter().zip(d_imgs) {
            let p = d.forward(&gradient_reversal(&f.data, grl));
            let labels = Tensor::filled(p.shape(), E::of(label));
            terms.push(ops::bce_mean(&p, &labels));
        }
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = ops::add(&total, t);
    }
    ops::scale(&total, 1.0 / terms.len() as f64)
}

/// Image-level context vector: spatially pooled penultimate activation of
/// the fused-feature discriminator, fully detached.
pub fn context_vector<E: Element>(
    m: &FusedFeature<E>,
    d_fus: &PixelDiscriminator<E>,
) -> Var<E> {
    let (_, hidden) = d_fus.forward_with_hidden(&m.data.detach());
    ops::global_avg_pool(&hidden).detach()
}

/// Upsample an attention map to image extent for export.
pub fn upsample_attention<E: Element>(
    e: &AttentionMap<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let (h, w) = (e.data.shape()[0], e.data.shape()[1]);
    let as_chw = Var::constant(e.data.reshaped(&[1, h, w])?);
    let up = ops::bilinear_resize(&as_chw, out_h, out_w)?;
    up.value().reshaped(&[out_h, out_w])
}
