//! Detection head with ROI feature extraction, dynamic instance sampling,
//! the auxiliary hardness discriminator, and instance-level adversarial
//! alignment.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_reversal, GrlConfig, Param, Var};
use crate::backbone::FusedFeature;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxF};
use crate::layers::Linear;
use crate::ops;
use crate::tensor::{Element, Tensor};

/// ROI labeling and head-batch sampling thresholds.
#[derive(Clone, Debug)]
pub struct HeadConfig {
    pub roi_size: usize,
    pub roi_samples: usize,
    pub theta_h: f64,
    pub theta_l: f64,
    pub batch: usize,
    pub fg_fraction: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            roi_size: 7,
            roi_samples: 2,
            theta_h: 0.5,
            theta_l: 0.1,
            batch: 128,
            fg_fraction: 0.25,
        }
    }
}

/// Dynamic instance sampling state: `n_min <= n_final <= n_max`.
#[derive(Clone, Copy, Debug)]
pub struct DisState {
    pub n_max: usize,
    pub n_min: usize,
    pub n_final: usize,
}

impl Default for DisState {
    fn default() -> Self {
        Self {
            n_max: 300,
            n_min: 16,
            n_final: 300,
        }
    }
}

impl DisState {
    pub fn new(n_max: usize, n_min: usize) -> Result<Self> {
        if n_min == 0 || n_min > n_max {
            return Err(Error::Contract(format!(
                "need 1 <= n_min <= n_max, got {n_min}, {n_max}"
            )));
        }
        Ok(Self {
            n_max,
            n_min,
            n_final: n_max,
        })
    }
}

/// `N_final = clamp(floor(N * 0.5 * (hardness + (1 - kl))), N_min, N)`.
/// Applied to target instance sampling only; disabled at inference.
pub fn dynamic_sample_count(state: &DisState, hardness: f64, kl: f64) -> Result<usize> {
    for (name, v) in [("hardness", hardness), ("kl", kl)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("{name} {v} outside [0,1]")));
        }
    }
    let raw = (state.n_max as f64 * 0.5 * (hardness + (1.0 - kl))).floor() as i64;
    Ok((raw.max(state.n_min as i64) as usize).min(state.n_max))
}

/// Top-N objectness scores as a probability vector: caller-ranked
/// (descending in the pipeline), zero-padded to `n`, floored at `PROB_EPS`,
/// then normalized to sum 1. The comparison is positional, so both sides
/// must be ranked the same way.
#[derive(Clone, Debug)]
pub struct ObjectnessDistribution {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ObjectnessDistribution {
    pub fn from_scores(scores: &[f64], n: usize) -> Self {
        assert!(n >= 1);
        let mut values: Vec<f64> = scores.to_vec();
        values.truncate(n);
        while values.len() < n {
            values.push(0.0);
        }
        let floored: Vec<f64> = values.iter().map(|&v| v.max(ops::PROB_EPS)).collect();
        let sum: f64 = floored.iter().sum();
        let normalized = floored.iter().map(|&v| v / sum).collect();
        Self { values, normalized }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.normalized.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.normalized.iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract(format!(
                "normalized objectness must be a positive simplex point, sum {sum}"
            )));
        }
        Ok(())
    }
}

/// `KL(src || tgt)` over the normalized top-N objectness vectors, clamped to
/// `[0, 1]` (the complement form `1 - KL` requires a bounded divergence).
pub fn kl_objectness(src: &ObjectnessDistribution, tgt: &ObjectnessDistribution) -> f64 {
    assert_eq!(src.normalized.len(), tgt.normalized.len());
    let raw: f64 = src
        .normalized
        .iter()
        .zip(&tgt.normalized)
        .map(|(&s, &t)| s * (s / t).ln())
        .sum();
    raw.clamp(0.0, 1.0)
}

/// Unclamped KL, exposed for the analytic oracle tests.
pub fn kl_objectness_raw(src: &ObjectnessDistribution, tgt: &ObjectnessDistribution) -> f64 {
    src.normalized
        .iter()
        .zip(&tgt.normalized)
        .map(|(&s, &t)| s * (s / t).ln())
        .sum()
}

/// A labeled ROI sample for the head loss.
#[derive(Clone, Debug)]
pub struct LabeledRois {
    pub boxes: Vec<BoxF>,
    /// class index for foreground, `class_count` for background
    pub labels: Vec<usize>,
    /// regression target onto the matched gt, foreground rows only
    pub reg_targets: Vec<Option<[f64; 4]>>,
}

/// Label proposals against ground truth: IoU >= theta_h is foreground with
/// the matched class, [theta_l, theta_h) is background, below theta_l is
/// discarded. Samples a fixed-fraction foreground minibatch.
pub fn label_proposals(
    proposals: &[BoxF],
    gt_boxes: &[BoxF],
    gt_classes: &[usize],
    cfg: &HeadConfig,
    rng: &mut ChaCha8Rng,
) -> LabeledRois {
    assert_eq!(gt_boxes.len(), gt_classes.len());
    let mut fg: Vec<(BoxF, usize, [f64; 4])> = Vec::new();
    let mut bg: Vec<BoxF> = Vec::new();
    for p in proposals {
        let mut best = 0.0f64;
        let mut best_gt = usize::MAX;
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(p, g);
            if v > best {
                best = v;
                best_gt = gi;
            }
        }
        if best >= cfg.theta_h {
            fg.push((
                *p,
                gt_classes[best_gt],
                crate::rpn::encode_box(p, &gt_boxes[best_gt]),
            ));
        } else if best >= cfg.theta_l {
            bg.push(*p);
        }
        // below theta_l: discarded
    }
    let max_fg = ((cfg.batch as f64) * cfg.fg_fraction).round() as usize;
    if fg.len() > max_fg {
        fg.shuffle(rng);
        fg.truncate(max_fg);
    }
    let want_bg = cfg.batch.saturating_sub(fg.len());
    if bg.len() > want_bg {
        bg.shuffle(rng);
        bg.truncate(want_bg);
    }
    let mut out = LabeledRois {
        boxes: Vec::new(),
        labels: Vec::new(),
        reg_targets: Vec::new(),
    };
    for (b, c, t) in fg {
        out.boxes.push(b);
        out.labels.push(c);
        out.reg_targets.push(Some(t));
    }
    let bg_label = usize::MAX; // patched by caller via class_count
    let _ = bg_label;
    for b in bg {
        out.boxes.push(b);
        out.labels.push(usize::MAX);
        out.reg_targets.push(None);
    }
    out
}

/// Classification and class-specific regression head over pooled ROI
/// features. The pooled grid is average-pooled 3x3/2 before the hidden
/// affine layer.
pub struct DetectionHead<E: Element> {
    pub fc1: Linear<E>,
    pub cls: Linear<E>,
    pub reg: Linear<E>,
    channels: usize,
    roi_size: usize,
    pooled: usize,
    class_count: usize,
}

impl<E: Element> DetectionHead<E> {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        channels: usize,
        roi_size: usize,
        hidden: usize,
        class_count: usize,
    ) -> Self {
        assert!(roi_size >= 3, "roi grid too small for the head pool");
        let pooled = (roi_size - 3) / 2 + 1;
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), rng, channels * pooled * pooled, hidden),
            cls: Linear::new(&format!("{name}.cls"), rng, hidden, class_count + 1),
            reg: Linear::new(&format!("{name}.reg"), rng, hidden, 4 * class_count),
            channels,
            roi_size,
            pooled,
            class_count,
        }
    }

    /// `roi_feats` is `N x C x roi x roi`; returns class logits `N x (C+1)`
    /// and regression `N x 4C`.
    pub fn forward(&self, roi_feats: &Var<E>) -> Result<(Var<E>, Var<E>)> {
        let n = roi_feats.shape()[0];
        let flat3 = ops::reshape(roi_feats, &[n * self.channels, self.roi_size, self.roi_size])?;
        let pooled = ops::avg_pool2d(&flat3, 3, 2);
        let rows = ops::reshape(&pooled, &[n, self.channels * self.pooled * self.pooled])?;
        let h = ops::relu(&self.fc1.forward(&rows));
        Ok((self.cls.forward(&h), self.reg.forward(&h)))
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn params(&self) -> Vec<Param<E>> {
        [&self.fc1, &self.cls, &self.reg]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Cross-entropy over `C+1` classes plus smooth-L1 on the matched class's
/// regression slot, foreground rows only.
pub fn detection_losses<E: Element>(
    cls_logits: &Var<E>,
    reg: &Var<E>,
    rois: &LabeledRois,
    class_count: usize,
) -> (Var<E>, Var<E>) {
    let n = rois.boxes.len();
    assert!(n > 0, "detection_losses on empty batch");
    let labels: Vec<usize> = rois
        .labels
        .iter()
        .map(|&l| if l == usize::MAX { class_count } else { l })
        .collect();
    let l_cls = ops::softmax_xent(cls_logits, &labels);

    let fg_count = rois.reg_targets.iter().flatten().count();
    if fg_count == 0 {
        return (l_cls, Var::scalar(E::zero()));
    }
    let width = 4 * class_count;
    let mut target = Tensor::zeros(&[n, width]);
    let mut weight = Tensor::zeros(&[n, width]);
    {
        let td = target.data_mut();
        for (r, t) in rois.reg_targets.iter().enumerate() {
            if let Some(t) = t {
                let c = rois.labels[r];
                for q in 0..4 {
                    td[r * width + c * 4 + q] = E::of(t[q]);
                }
            }
        }
    }
    {
        let wv = E::of(1.0 / (4 * fg_count) as f64);
        let wd = weight.data_mut();
        for (r, t) in rois.reg_targets.iter().enumerate() {
            if t.is_some() {
                let c = rois.labels[r];
                for q in 0..4 {
                    wd[r * width + c * 4 + q] = wv;
                }
            }
        }
    }
    let l_reg = ops::smooth_l1_sum(reg, &target, &weight);
    (l_cls, l_reg)
}

/// Instance-level discriminator: three affine layers over the flattened ROI
/// feature concatenated with the image context vector.
pub struct MlpDiscriminator<E: Element> {
    l1: Linear<E>,
    l2: Linear<E>,
    l3: Linear<E>,
}

impl<E: Element> MlpDiscriminator<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(&format!("{name}.l1"), rng, in_dim, hidden),
            l2: Linear::new(&format!("{name}.l2"), rng, hidden, hidden),
            l3: Linear::new(&format!("{name}.l3"), rng, hidden, 1),
        }
    }

    pub fn forward(&self, x: &Var<E>) -> Var<E> {
        let h1 = ops::relu(&self.l1.forward(x));
        let h2 = ops::relu(&self.l2.forward(&h1));
        ops::sigmoid(&self.l3.forward(&h2))
    }

    pub fn params(&self) -> Vec<Param<E>> {
        [&self.l1, &self.l2, &self.l3]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Mean pixel probability of the auxiliary discriminator on a (detached)
/// fused feature; in `[0, 1]`.
pub fn hardness_score<E: Element>(
    m: &FusedFeature<E>,
    d_dis: &crate::backbone::PixelDiscriminator<E>,
) -> f64 {
    let p = d_dis.forward(&m.data.detach());
    let d = p.value().data();
    d.iter().map(|v| v.to64()).sum::<f64>() / d.len() as f64
}

/// Supervised loss of the auxiliary discriminator. Inputs are detached: the
/// term sits outside the adversarial trade-off, so no gradient reaches the
/// backbone or fusion.
pub fn loss_dis<E: Element>(
    m_src: &FusedFeature<E>,
    m_tgt: &FusedFeature<E>,
    d_dis: &crate::backbone::PixelDiscriminator<E>,
    src_label: f64,
    tgt_label: f64,
) -> Var<E> {
    let p_s = d_dis.forward(&m_src.data.detach());
    let p_t = d_dis.forward(&m_tgt.data.detach());
    let l_s = ops::bce_mean(&p_s, &Tensor::filled(p_s.shape(), E::of(src_label)));
    let l_t = ops::bce_mean(&p_t, &Tensor::filled(p_t.shape(), E::of(tgt_label)));
    ops::scale(&ops::add(&l_s, &l_t), 0.5)
}

/// Instance-level adversarial loss: BCE with d=0 source / 1 target over the
/// union of sampled ROIs, context vectors appended to each flattened ROI
/// feature, GRL in front of the discriminator.
pub fn loss_adv_ins<E: Element>(
    roi_src: &Var<E>,
    roi_tgt: &Var<E>,
    ctx_src: &Var<E>,
    ctx_tgt: &Var<E>,
    d_ins: &MlpDiscriminator<E>,
    grl: GrlConfig,
) -> Var<E> {
    let n_s = roi_src.shape()[0];
    let n_t = roi_tgt.shape()[0];
    let a = ops::concat_cols_broadcast(roi_src, ctx_src);
    let b = ops::concat_cols_broadcast(roi_tgt, ctx_tgt);
    let all = ops::concat_rows(&a, &b);
    let p = d_ins.forward(&gradient_reversal(&all, grl));
    let mut labels = vec![E::zero(); n_s];
    labels.extend(std::iter::repeat(E::one()).take(n_t));
    let labels = Tensor::from_vec(&[n_s + n_t, 1], labels).expect("labels");
    ops::bce_mean(&p, &labels)
}
