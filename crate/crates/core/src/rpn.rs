//! Region proposal network with anchor-wise domain alignment and
//! transferability-re-weighted proposal filtering.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_reversal, GrlConfig, Param, Var};
use crate::backbone::{pixel_entropy, EntropyKind};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxF};
use crate::layers::Conv2d;
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Anchor recipe. For scale `s` and ratio `r`: `w = s*sqrt(r)`, `h = s/sqrt(r)`,
/// so `w/h = r` and `w*h = s^2` exactly (no rounding; anchors are float boxes).
#[derive(Clone, Debug)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![10.0, 18.0, 28.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8,
        }
    }
}

impl AnchorConfig {
    pub fn k(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// All reference boxes for a feature grid; `boxes[a*H*W + y*W + x]` matches
/// head channel `a` at cell `(y, x)`.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub k: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub boxes: Vec<BoxF>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Anchors centered on feature-grid cells mapped to image coordinates by the
/// stride.
pub fn generate_anchors(cfg: &AnchorConfig, grid_h: usize, grid_w: usize) -> AnchorGrid {
    let mut boxes = Vec::with_capacity(cfg.k() * grid_h * grid_w);
    for &scale in &cfg.scales {
        for &ratio in &cfg.ratios {
            let w = scale * ratio.sqrt();
            let h = scale / ratio.sqrt();
            for y in 0..grid_h {
                for x in 0..grid_w {
                    let cx = (x as f64 + 0.5) * cfg.stride as f64;
                    let cy = (y as f64 + 0.5) * cfg.stride as f64;
                    boxes.push(BoxF::new(
                        cx - w / 2.0,
                        cy - h / 2.0,
                        cx + w / 2.0,
                        cy + h / 2.0,
                    ));
                }
            }
        }
    }
    AnchorGrid {
        k: cfg.k(),
        grid_h,
        grid_w,
        boxes,
    }
}

/// RPN heads: a 3x3 feature convolution, a sigmoid objectness head and a
/// linear box head. Delta channels are grouped per anchor:
/// `a*4 + {0:tx, 1:ty, 2:tw, 3:th}`.
pub struct RpnHead<E: Element> {
    pub conv: Conv2d<E>,
    pub cls: Conv2d<E>,
    pub boxr: Conv2d<E>,
}

pub struct RpnOut<E: Element> {
    pub feature: Var<E>,
    pub objectness: Var<E>,
    pub deltas: Var<E>,
}

impl<E: Element> RpnHead<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: usize, k: usize) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), rng, channels, channels, 3, 1, 1),
            cls: Conv2d::new(&format!("{name}.cls"), rng, channels, k, 1, 1, 0),
            boxr: Conv2d::new(&format!("{name}.box"), rng, channels, 4 * k, 1, 1, 0),
        }
    }

    pub fn forward(&self, attended: &Var<E>) -> RpnOut<E> {
        let feature = ops::relu(&self.conv.forward(attended));
        RpnOut {
            objectness: ops::sigmoid(&self.cls.forward(&feature)),
            deltas: self.boxr.forward(&feature),
            feature,
        }
    }

    pub fn params(&self) -> Vec<Param<E>> {
        [&self.conv, &self.cls, &self.boxr]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }
}

/// Anchor-wise domain discriminator: a k-channel 1x1 convolution over the
/// RPN feature with sigmoid, one domain probability per anchor per cell.
pub struct RpnDomainDisc<E: Element> {
    pub conv: Conv2d<E>,
}

impl<E: Element> RpnDomainDisc<E> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: usize, k: usize) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), rng, channels, k, 1, 1, 0),
        }
    }

    pub fn forward(&self, rpn_feature: &Var<E>) -> Var<E> {
        ops::sigmoid(&self.conv.forward(rpn_feature))
    }

    pub fn params(&self) -> Vec<Param<E>> {
        self.conv.params()
    }
}

/// Anchor-wise adversarial loss (binary cross-entropy with d=0 source,
/// 1 target, averaged over every anchor of both images). The GRL sits
/// between the RPN feature and the discriminator.
pub fn loss_adv_rpn<E: Element>(
    rpn_feature_src: &Var<E>,
    rpn_feature_tgt: &Var<E>,
    d_rpn: &RpnDomainDisc<E>,
    grl: GrlConfig,
) -> Var<E> {
    let p_s = d_rpn.forward(&gradient_reversal(rpn_feature_src, grl));
    let p_t = d_rpn.forward(&gradient_reversal(rpn_feature_tgt, grl));
    let l_s = ops::bce_mean(&p_s, &Tensor::filled(p_s.shape(), E::zero()));
    let l_t = ops::bce_mean(&p_t, &Tensor::filled(p_t.shape(), E::one()));
    ops::scale(&ops::add(&l_s, &l_t), 0.5)
}

/// A decoded proposal candidate, remembering which anchor it came from.
#[derive(Clone, Copy, Debug)]
pub struct DecodedBox {
    pub anchor: usize,
    pub boxf: BoxF,
}

const MAX_LOG_SIZE_DELTA: f64 = 4.0;

/// Center-offset / log-size decoding, clipped to the image; boxes thinner
/// than one pixel after clipping are dropped.
pub fn decode_boxes(
    anchors: &AnchorGrid,
    deltas: &[f64],
    img_w: f64,
    img_h: f64,
) -> Vec<DecodedBox> {
    let plane = anchors.grid_h * anchors.grid_w;
    assert_eq!(deltas.len(), 4 * anchors.len(), "delta count mismatch");
    let mut out = Vec::with_capacity(anchors.len());
    for (idx, a) in anchors.boxes.iter().enumerate() {
        let anchor_ch = idx / plane;
        let cell = idx % plane;
        let at = |c: usize| deltas[(anchor_ch * 4 + c) * plane + cell];
        let (ax, ay) = a.center();
        let (aw, ah) = (a.width(), a.height());
        let cx = ax + at(0) * aw;
        let cy = ay + at(1) * ah;
        let w = aw * at(2).clamp(-MAX_LOG_SIZE_DELTA, MAX_LOG_SIZE_DELTA).exp();
        let h = ah * at(3).clamp(-MAX_LOG_SIZE_DELTA, MAX_LOG_SIZE_DELTA).exp();
        let b = BoxF::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .clip(img_w, img_h);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            out.push(DecodedBox { anchor: idx, boxf: b });
        }
    }
    out
}

/// Regression target `(tx, ty, tw, th)` taking `anchor` onto `gt`.
pub fn encode_box(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Greedy non-maximum suppression by descending score; ties broken by lower
/// index. Returns kept indices in rank order.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    assert!(iou_threshold > 0.0 && iou_threshold < 1.0, "iou threshold in (0,1)");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &idx in &order {
        if kept
            .iter()
            .all(|&kidx| iou(&boxes[kidx], &boxes[idx]) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

/// Per-anchor transferability: elementwise entropy of the RPN-level domain
/// probabilities.
pub fn proposal_transferability<E: Element>(
    p_rpn: &Tensor<E>,
    kind: EntropyKind,
) -> Result<Vec<f64>> {
    let e = pixel_entropy(p_rpn, kind)?;
    Ok(e.data().iter().map(|v| v.to64()).collect())
}

/// `o~ = o * E`, elementwise.
pub fn reweight_objectness(objectness: &[f64], transfer: &[f64]) -> Vec<f64> {
    assert_eq!(objectness.len(), transfer.len());
    objectness
        .iter()
        .zip(transfer)
        .map(|(&o, &e)| o * e)
        .collect()
}

/// Decoded candidates with objectness, transferability, re-weighted score and
/// the kept mask after NMS + top-N.
#[derive(Clone, Debug)]
pub struct ProposalSet {
    pub boxes: Vec<BoxF>,
    pub anchors: Vec<usize>,
    pub objectness: Vec<f64>,
    pub transfer: Vec<f64>,
    pub reweighted: Vec<f64>,
    pub kept: Vec<bool>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Kept candidates ranked by the selection key, descending.
    pub fn kept_indices(&self, use_reweighted: bool) -> Vec<usize> {
        let key: &[f64] = if use_reweighted {
            &self.reweighted
        } else {
            &self.objectness
        };
        let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.kept[i]).collect();
        idx.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).unwrap().then(a.cmp(&b)));
        idx
    }

    pub fn kept_boxes(&self, use_reweighted: bool) -> Vec<BoxF> {
        self.kept_indices(use_reweighted)
            .iter()
            .map(|&i| self.boxes[i])
            .collect()
    }

    pub fn kept_objectness(&self, use_reweighted: bool) -> Vec<f64> {
        self.kept_indices(use_reweighted)
            .iter()
            .map(|&i| self.objectness[i])
            .collect()
    }
}

/// Build the candidate set from detached head outputs. `objectness` and
/// `domain_prob` are the raw `k x H x W` maps.
pub fn build_proposals<E: Element>(
    anchors: &AnchorGrid,
    objectness: &Tensor<E>,
    deltas: &Tensor<E>,
    domain_prob: &Tensor<E>,
    img_w: f64,
    img_h: f64,
    kind: EntropyKind,
) -> Result<ProposalSet> {
    let decoded = decode_boxes(
        anchors,
        &deltas.data().iter().map(|v| v.to64()).collect::<Vec<_>>(),
        img_w,
        img_h,
    );
    let o_all: Vec<f64> = objectness.data().iter().map(|v| v.to64()).collect();
    let e_all = proposal_transferability(domain_prob, kind)?;
    for &o in &o_all {
        if !(0.0..=1.0).contains(&o) {
            return Err(Error::Contract(format!("objectness {o} outside [0,1]")));
        }
    }
    let n = decoded.len();
    let mut set = ProposalSet {
        boxes: Vec::with_capacity(n),
        anchors: Vec::with_capacity(n),
        objectness: Vec::with_capacity(n),
        transfer: Vec::with_capacity(n),
        reweighted: Vec::with_capacity(n),
        kept: vec![false; n],
    };
    for d in decoded {
        set.boxes.push(d.boxf);
        set.anchors.push(d.anchor);
        set.objectness.push(o_all[d.anchor]);
        set.transfer.push(e_all[d.anchor]);
    }
    set.reweighted = reweight_objectness(&set.objectness, &set.transfer);
    Ok(set)
}

/// NMS on the ranking key (`o~` when transferable filtering is on, raw `o`
/// otherwise), then keep the best `n` survivors. Marks the `kept` mask.
pub fn select_topn(set: &mut ProposalSet, n: usize, use_reweighted: bool, nms_iou: f64) {
    for k in set.kept.iter_mut() {
        *k = false;
    }
    let key: Vec<f64> = if use_reweighted {
        set.reweighted.clone()
    } else {
        set.objectness.clone()
    };
    let survivors = nms(&set.boxes, &key, nms_iou);
    for &i in survivors.iter().take(n) {
        set.kept[i] = true;
    }
}

/// Per-anchor objectness label and regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Fg(usize),
    Bg,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// sampled anchor indices for the objectness term
    pub sampled: Vec<usize>,
    /// 1.0 for fg among `sampled`, aligned
    pub sampled_labels: Vec<f64>,
    /// fg anchor index -> regression target
    pub fg_regression: Vec<(usize, [f64; 4])>,
}

#[derive(Clone, Debug)]
pub struct RpnTargetConfig {
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub batch: usize,
    pub max_fg_fraction: f64,
}

impl Default for RpnTargetConfig {
    fn default() -> Self {
        Self {
            fg_iou: 0.7,
            bg_iou: 0.3,
            batch: 64,
            max_fg_fraction: 0.5,
        }
    }
}

/// Faster-R-CNN-style assignment: fg at IoU >= fg_iou or best anchor per
/// ground-truth box; bg below bg_iou; the rest ignored. A fixed-size
/// minibatch is sampled with at most `max_fg_fraction` foreground.
pub fn assign_rpn_targets(
    anchors: &AnchorGrid,
    gt_boxes: &[BoxF],
    cfg: &RpnTargetConfig,
    rng: &mut ChaCha8Rng,
) -> RpnTargets {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut best_gt = vec![usize::MAX; n];

    if gt_boxes.is_empty() {
        for l in labels.iter_mut() {
            *l = AnchorLabel::Bg;
        }
    } else {
        let mut best_iou = vec![0.0f64; n];
        let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gt_boxes.len()];
        for (ai, a) in anchors.boxes.iter().enumerate() {
            for (gi, g) in gt_boxes.iter().enumerate() {
                let v = iou(a, g);
                if v > best_iou[ai] {
                    best_iou[ai] = v;
                    best_gt[ai] = gi;
                }
                if v > gt_best[gi].0 {
                    gt_best[gi] = (v, ai);
                }
            }
        }
        for ai in 0..n {
            if best_iou[ai] >= cfg.fg_iou {
                labels[ai] = AnchorLabel::Fg(best_gt[ai]);
            } else if best_iou[ai] < cfg.bg_iou {
                labels[ai] = AnchorLabel::Bg;
            }
        }
        // best anchor per gt is always foreground
        for (gi, &(v, ai)) in gt_best.iter().enumerate() {
            if ai != usize::MAX && v > 0.0 {
                labels[ai] = AnchorLabel::Fg(gi);
            }
        }
    }

    let mut fg: Vec<usize> = (0..n)
        .filter(|&i| matches!(labels[i], AnchorLabel::Fg(_)))
        .collect();
    let mut bg: Vec<usize> = (0..n)
        .filter(|&i| labels[i] == AnchorLabel::Bg)
        .collect();
    let max_fg = ((cfg.batch as f64) * cfg.max_fg_fraction) as usize;
    if fg.len() > max_fg {
        fg.shuffle(rng);
        fg.truncate(max_fg);
        fg.sort_unstable();
    }
    let want_bg = cfg.batch.saturating_sub(fg.len());
    if bg.len() > want_bg {
        bg.shuffle(rng);
        bg.truncate(want_bg);
        bg.sort_unstable();
    }

    let mut sampled = Vec::with_capacity(fg.len() + bg.len());
    let mut sampled_labels = Vec::with_capacity(fg.len() + bg.len());
    for &i in &fg {
        sampled.push(i);
        sampled_labels.push(1.0);
    }
    for &i in &bg {
        sampled.push(i);
        sampled_labels.push(0.0);
    }
    let fg_regression = fg
        .iter()
        .map(|&i| {
            let gi = match labels[i] {
                AnchorLabel::Fg(g) => g,
                _ => unreachable!(),
            };
            (i, encode_box(&anchors.boxes[i], &gt_boxes[gi]))
        })
        .collect();
    RpnTargets {
        labels,
        sampled,
        sampled_labels,
        fg_regression,
    }
}

/// Region proposal loss: BCE on the sampled objectness plus smooth-L1 on
/// foreground regression, each averaged over its own elements.
pub fn rpn_loss<E: Element>(
    objectness: &Var<E>,
    deltas: &Var<E>,
    targets: &RpnTargets,
    anchors: &AnchorGrid,
) -> Var<E> {
    assert!(!targets.sampled.is_empty(), "empty RPN minibatch");
    let o_sample = ops::gather(objectness, &targets.sampled);
    let labels = Tensor::from_vec(
        &[targets.sampled.len()],
        targets.sampled_labels.iter().map(|&v| E::of(v)).collect(),
    )
    .expect("labels");
    let cls = ops::bce_mean(&o_sample, &labels);

    if targets.fg_regression.is_empty() {
        return cls;
    }
    let plane = anchors.grid_h * anchors.grid_w;
    let mut idx = Vec::with_capacity(4 * targets.fg_regression.len());
    let mut tgt = Vec::with_capacity(4 * targets.fg_regression.len());
    for (ai, t) in &targets.fg_regression {
        let anchor_ch = ai / plane;
        let cell = ai % plane;
        for c in 0..4 {
            idx.push((anchor_ch * 4 + c) * plane + cell);
            tgt.push(E::of(t[c]));
        }
    }
    let pred = ops::gather(deltas, &idx);
    let target = Tensor::from_vec(&[idx.len()], tgt).expect("reg target");
    let weight = Tensor::filled(&[idx.len()], E::of(1.0 / idx.len() as f64));
    let reg = ops::smooth_l1_sum(&pred, &target, &weight);
    ops::add(&cls, &reg)
}
