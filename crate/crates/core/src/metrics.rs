//! Evaluation metrics: IoU matching, 11-point interpolated average
//! precision, recall, and Pearson correlation for the analysis reports.

use serde::Serialize;

pub use crate::geometry::iou;
use crate::geometry::BoxF;

/// One scored detection on one image.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub boxf: BoxF,
    pub class: usize,
    pub score: f64,
}

/// Ground truth for one image.
#[derive(Clone, Debug, Default)]
pub struct ImageGt {
    pub boxes: Vec<BoxF>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub per_image_recall: Vec<f64>,
    pub mean_recall: f64,
    pub detections: usize,
    pub ground_truths: usize,
}

/// Deterministic ranking: score descending, then box lexicographic, so the
/// result never depends on detection input order. Exact duplicates fall back
/// to input order via the stable sort.
fn ranked_indices(dets: &[(usize, Detection)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (&dets[a].1, &dets[b].1);
        db.score
            .partial_cmp(&da.score)
            .expect("finite scores")
            .then(da.boxf.x1.partial_cmp(&db.boxf.x1).unwrap())
            .then(da.boxf.y1.partial_cmp(&db.boxf.y1).unwrap())
            .then(da.boxf.x2.partial_cmp(&db.boxf.x2).unwrap())
            .then(da.boxf.y2.partial_cmp(&db.boxf.y2).unwrap())
    });
    idx
}

/// Greedy matching of one class: walks detections in rank order, matching
/// each to the unmatched same-image ground truth with the highest IoU at or
/// above the threshold (ties to the lower index). Returns a true/false flag
/// per ranked detection.
fn match_class(
    dets: &[(usize, Detection)],
    gts: &[ImageGt],
    class: usize,
    iou_thresh: f64,
) -> (Vec<bool>, usize) {
    let mut used: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| vec![false; g.boxes.len()])
        .collect();
    let n_gt = gts
        .iter()
        .map(|g| g.classes.iter().filter(|&&c| c == class).count())
        .sum();
    let order = ranked_indices(dets);
    let mut flags = Vec::with_capacity(order.len());
    for &i in &order {
        let (img, det) = &dets[i];
        let gt = &gts[*img];
        let mut best = iou_thresh;
        let mut best_j = usize::MAX;
        for (j, gb) in gt.boxes.iter().enumerate() {
            if gt.classes[j] != class || used[*img][j] {
                continue;
            }
            let v = iou(&det.boxf, gb);
            if v > best || (v == best && best_j == usize::MAX && v >= iou_thresh) {
                best = v;
                best_j = j;
            }
        }
        if best_j != usize::MAX {
            used[*img][best_j] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    (flags, n_gt)
}

/// 11-point interpolated AP (VOC-2007): mean over recall levels
/// {0, 0.1, ..., 1} of the maximum precision at recall >= level.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    // monotone precision envelope from the right
    let mut envelope = prec.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    for level in 0..=10 {
        let r = level as f64 / 10.0;
        let p = rec
            .iter()
            .position(|&rv| rv >= r - 1e-12)
            .map(|i| envelope[i])
            .unwrap_or(0.0);
        ap += p / 11.0;
    }
    ap
}

/// Per-class AP at the given IoU threshold. `detections[i]` are the
/// detections for image `i`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    gts: &[ImageGt],
    class: usize,
    iou_thresh: f64,
) -> f64 {
    let flat: Vec<(usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| {
            dets.iter()
                .filter(|d| d.class == class)
                .map(move |&d| (img, d))
        })
        .collect();
    let (flags, n_gt) = match_class(&flat, gts, class, iou_thresh);
    ap_from_flags(&flags, n_gt)
}

/// Full evaluation: per-class AP, their unweighted mean over classes that
/// have ground truth, and per-image recall at the same threshold.
pub fn evaluate(
    detections: &[Vec<Detection>],
    gts: &[ImageGt],
    class_count: usize,
    iou_thresh: f64,
) -> EvalResult {
    assert_eq!(detections.len(), gts.len());
    let mut per_class_ap = Vec::with_capacity(class_count);
    let mut present = 0usize;
    let mut map = 0.0;
    for c in 0..class_count {
        let n_gt: usize = gts.iter().map(|g| g.classes.iter().filter(|&&x| x == c).count()).sum();
        let ap = average_precision(detections, gts, c, iou_thresh);
        per_class_ap.push(ap);
        if n_gt > 0 {
            present += 1;
            map += ap;
        }
    }
    let map = if present > 0 { map / present as f64 } else { 0.0 };
    let per_image_recall: Vec<f64> = detections
        .iter()
        .zip(gts)
        .map(|(d, g)| recall_rate(d, g, iou_thresh))
        .collect();
    let with_gt: Vec<f64> = gts
        .iter()
        .zip(&per_image_recall)
        .filter(|(g, _)| !g.boxes.is_empty())
        .map(|(_, &r)| r)
        .collect();
    let mean_recall = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    EvalResult {
        per_class_ap,
        map,
        mean_recall,
        detections: detections.iter().map(|d| d.len()).sum(),
        ground_truths: gts.iter().map(|g| g.boxes.len()).sum(),
        per_image_recall,
    }
}

/// Fraction of ground-truth boxes matched by any detection under the same
/// greedy class-aware protocol.
pub fn recall_rate(detections: &[Detection], gt: &ImageGt, iou_thresh: f64) -> f64 {
    if gt.boxes.is_empty() {
        return 0.0;
    }
    let mut matched = 0usize;
    let classes: std::collections::BTreeSet<usize> = gt.classes.iter().copied().collect();
    for class in classes {
        let flat: Vec<(usize, Detection)> = detections
            .iter()
            .filter(|d| d.class == class)
            .map(|&d| (0usize, d))
            .collect();
        let single = std::slice::from_ref(gt);
        let (flags, _) = match_class(&flat, single, class, iou_thresh);
        matched += flags.iter().filter(|&&f| f).count();
    }
    matched as f64 / gt.boxes.len() as f64
}

/// Pearson correlation coefficient; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson length mismatch");
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
