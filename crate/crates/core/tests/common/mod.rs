//! Shared test oracles: a central-finite-difference gradient checker that is
//! independent of the reverse-mode implementation, plus the composed loss
//! paths it is run against. Used by the gradcheck suite and the acceptance
//! suite.

use crossdet_core::autodiff::{backprop, Param, Var};
use crossdet_core::backbone::{
    fuse_multiscale, loss_adv_fus, loss_adv_img, Backbone, FeatureMap, FusedFeature,
    PixelDiscriminator,
};
use crossdet_core::config::TrainConfig;
use crossdet_core::geometry::BoxF;
use crossdet_core::head::{
    detection_losses, label_proposals, loss_adv_ins, loss_dis, LabeledRois,
};
use crossdet_core::layers::Conv2d;
use crossdet_core::ops::{self, RoiBox};
use crossdet_core::rpn::{assign_rpn_targets, generate_anchors, loss_adv_rpn, rpn_loss};
use crossdet_core::tensor::Tensor;
use crossdet_core::trainer::Detector;
use crossdet_core::GrlConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_TOL: f64 = 1e-4;

/// Expected relation between the applied gradient and the true loss slope.
#[derive(Clone, Copy, PartialEq)]
pub enum Sign {
    /// Plain path: applied gradient equals the finite-difference slope.
    Direct,
    /// Behind a gradient reversal: applied gradient is the negated slope.
    Reversed,
}

pub struct PathReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check the analytic gradient of `loss_fn` against central differences for
/// a sample of coordinates of each parameter. `loss_fn` must be a pure
/// function of the parameter values.
pub fn check_gradients(
    name: &str,
    loss_fn: &dyn Fn() -> Var<f64>,
    params: &[(Param<f64>, Sign)],
    coords_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> PathReport {
    // analytic pass
    for (p, _) in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    backprop(&loss).expect("backprop");
    let analytic: Vec<Tensor<f64>> = params.iter().map(|(p, _)| p.grad()).collect();
    for (p, _) in params {
        p.zero_grad();
    }

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, (p, sign)) in params.iter().enumerate() {
        let base = p.value();
        let n = base.numel();
        let count = coords_per_param.min(n);
        // deterministic coordinate sample
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        for &j in idx.iter().take(count) {
            let x = base.data()[j];
            let h = 1e-5 * (1.0 + x.abs());
            let mut plus = base.clone();
            plus.data_mut()[j] = x + h;
            p.set_value(plus);
            let lp = loss_fn().value().item();
            let mut minus = base.clone();
            minus.data_mut()[j] = x - h;
            p.set_value(minus);
            let lm = loss_fn().value().item();
            p.set_value(base.clone());

            let numeric = (lp - lm) / (2.0 * h);
            let expected = match sign {
                Sign::Direct => numeric,
                Sign::Reversed => -numeric,
            };
            let got = analytic[pi].data()[j];
            let e = rel_err(got, expected);
            if e > max_rel {
                max_rel = e;
            }
            checked += 1;
            assert!(
                e <= FD_TOL,
                "{name}: param {} coord {j}: analytic {got}, expected {expected} (rel {e:.2e})",
                p.name()
            );
        }
    }
    PathReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rand_param(rng: &mut ChaCha8Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> Param<f64> {
    Param::new(name, rand_tensor(rng, shape, lo, hi))
}

/// Tiny double-precision detector plus a fixed source/target scene pair and
/// frozen selection state, for checking the composed loss paths.
pub struct LossPathRig {
    pub model: Detector<f64>,
    pub src_pixels: Tensor<f32>,
    pub tgt_pixels: Tensor<f32>,
    pub gt_boxes: Vec<BoxF>,
    pub gt_classes: Vec<usize>,
    pub rois: LabeledRois,
    pub adv_boxes_src: Vec<BoxF>,
    pub adv_boxes_tgt: Vec<BoxF>,
    pub ctx_src: Tensor<f64>,
    pub ctx_tgt: Tensor<f64>,
}

pub fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        channels: vec![4, 6, 8],
        disc_hidden: 6,
        head_hidden: 8,
        ins_hidden: 6,
        proposals_n: 8,
        n_min: 2,
        head_batch: 8,
        rpn_batch: 16,
        anchor_scales: vec![6.0],
        anchor_ratios: vec![1.0, 2.0],
        roi_size: 3,
        min_objects: 1,
        max_objects: 2,
        min_object_size: 4.0,
        max_object_size: 8.0,
        ..TrainConfig::default()
    }
}

impl LossPathRig {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_cfg();
        let model = Detector::<f64>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // nudge every parameter (zero biases included) so no rectifier sits
        // exactly on its kink during the finite-difference probes
        for p in model.params() {
            let mut v = p.value();
            for x in v.data_mut() {
                *x += rng.gen_range(-0.05..0.05);
            }
            p.set_value(v);
        }
        let n = cfg.image_size;
        let mk_img = |rng: &mut ChaCha8Rng| {
            let t = rand_tensor(rng, &[3, n, n], 0.05, 0.95);
            t.cast::<f32>()
        };
        let src_pixels = mk_img(&mut rng);
        let tgt_pixels = mk_img(&mut rng);
        let gt_boxes = vec![BoxF::new(2.0, 3.0, 9.0, 10.0), BoxF::new(9.5, 9.0, 15.0, 14.0)];
        let gt_classes = vec![0usize, 2];

        // freeze the detached pipeline state once
        let pl_s = model.forward_image(&src_pixels, false, false).unwrap();
        let pl_t = model.forward_image(&tgt_pixels, false, false).unwrap();
        let mut candidates = pl_s.proposals.kept_boxes(false);
        candidates.extend_from_slice(&gt_boxes);
        let mut roi_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let rois = label_proposals(
            &candidates,
            &gt_boxes,
            &gt_classes,
            &cfg.head_config(),
            &mut roi_rng,
        );
        let mut adv_boxes_src = pl_s.proposals.kept_boxes(false);
        adv_boxes_src.truncate(4);
        let mut adv_boxes_tgt = pl_t.proposals.kept_boxes(false);
        adv_boxes_tgt.truncate(4);
        let ctx_src = crossdet_core::backbone::context_vector(&pl_s.fused, &model.d_fus)
            .value()
            .clone();
        let ctx_tgt = crossdet_core::backbone::context_vector(&pl_t.fused, &model.d_fus)
            .value()
            .clone();
        Self {
            model,
            src_pixels,
            tgt_pixels,
            gt_boxes,
            gt_classes,
            rois,
            adv_boxes_src,
            adv_boxes_tgt,
            ctx_src,
            ctx_tgt,
        }
    }

    pub fn features(&self, pixels: &Tensor<f32>) -> Vec<FeatureMap<f64>> {
        let img = Var::constant(pixels.cast::<f64>());
        self.model.backbone.extract_features(&img).unwrap()
    }

    pub fn fused(&self, pixels: &Tensor<f32>) -> FusedFeature<f64> {
        fuse_multiscale(&self.features(pixels), &self.model.fuse).unwrap()
    }

    fn roi_rows(&self, pixels: &Tensor<f32>, boxes: &[BoxF]) -> Var<f64> {
        let feats = self.features(pixels);
        let last = feats.last().unwrap().data.clone();
        let rois: Vec<RoiBox> = boxes
            .iter()
            .map(|b| RoiBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            })
            .collect();
        let cfg = &self.model.cfg;
        let pooled = ops::roi_align(
            &last,
            &rois,
            cfg.roi_size,
            cfg.roi_samples,
            1.0 / cfg.stride() as f64,
        );
        let c = *cfg.channels.last().unwrap();
        ops::reshape(&pooled, &[boxes.len(), c * cfg.roi_size * cfg.roi_size]).unwrap()
    }

    /// Eq. 5 path: fused-feature least-squares adversarial loss.
    pub fn loss_fus(&self) -> Var<f64> {
        loss_adv_fus(
            &self.fused(&self.src_pixels),
            &self.fused(&self.tgt_pixels),
            &self.model.d_fus,
            GrlConfig::default(),
        )
    }

    /// Eq. 6 path: layer-wise image-level BCE.
    pub fn loss_img(&self) -> Var<f64> {
        loss_adv_img(
            &self.features(&self.src_pixels),
            &self.features(&self.tgt_pixels),
            &self.model.d_img,
            GrlConfig::default(),
        )
    }

    /// Eq. 7 path: anchor-wise BCE on RPN features.
    pub fn loss_rpn_adv(&self) -> Var<f64> {
        let fs = self.features(&self.src_pixels);
        let ft = self.features(&self.tgt_pixels);
        let rs = self.model.rpn.forward(&fs.last().unwrap().data);
        let rt = self.model.rpn.forward(&ft.last().unwrap().data);
        loss_adv_rpn(&rs.feature, &rt.feature, &self.model.d_rpn, GrlConfig::default())
    }

    /// Eq. 9 path: instance-level BCE with frozen ROIs and context vectors.
    pub fn loss_ins(&self) -> Var<f64> {
        let rs = self.roi_rows(&self.src_pixels, &self.adv_boxes_src);
        let rt = self.roi_rows(&self.tgt_pixels, &self.adv_boxes_tgt);
        loss_adv_ins(
            &rs,
            &rt,
            &Var::constant(self.ctx_src.clone()),
            &Var::constant(self.ctx_tgt.clone()),
            &self.model.d_ins,
            GrlConfig::default(),
        )
    }

    /// Auxiliary discriminator loss (detached trunk).
    pub fn loss_aux(&self) -> Var<f64> {
        loss_dis(
            &self.fused(&self.src_pixels),
            &self.fused(&self.tgt_pixels),
            &self.model.d_dis,
            0.0,
            1.0,
        )
    }

    /// Region proposal loss with a frozen anchor minibatch.
    pub fn loss_rpn_det(&self) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let targets = assign_rpn_targets(
            &self.model.anchors,
            &self.gt_boxes,
            &self.model.cfg.rpn_target_config(),
            &mut rng,
        );
        let fs = self.features(&self.src_pixels);
        let out = self.model.rpn.forward(&fs.last().unwrap().data);
        rpn_loss(&out.objectness, &out.deltas, &targets, &self.model.anchors)
    }

    /// Head classification + regression with a frozen ROI batch.
    pub fn loss_head(&self) -> Var<f64> {
        let rows = self.roi_boxes();
        let feats = self.features(&self.src_pixels);
        let last = feats.last().unwrap().data.clone();
        let cfg = &self.model.cfg;
        let pooled = ops::roi_align(
            &last,
            &rows,
            cfg.roi_size,
            cfg.roi_samples,
            1.0 / cfg.stride() as f64,
        );
        let (cls, reg) = self.model.head.forward(&pooled).unwrap();
        let (l_cls, l_reg) = detection_losses(&cls, &reg, &self.rois, cfg.class_count);
        ops::add(&l_cls, &l_reg)
    }

    fn roi_boxes(&self) -> Vec<RoiBox> {
        self.rois
            .boxes
            .iter()
            .map(|b| RoiBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            })
            .collect()
    }

    pub fn backbone_params(&self) -> Vec<Param<f64>> {
        self.model.backbone.params()
    }
}

/// Sample a few parameters from each group to keep runtime bounded.
pub fn sample_params(params: &[Param<f64>], take: usize) -> Vec<Param<f64>> {
    params.iter().take(take).cloned().collect()
}

/// All composed loss paths with their parameter partitions; returns reports.
pub fn run_loss_path_checks(coords: usize) -> Vec<PathReport> {
    let rig = LossPathRig::new(11);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut reports = Vec::new();

    let with_sign = |ps: Vec<Param<f64>>, s: Sign| -> Vec<(Param<f64>, Sign)> {
        ps.into_iter().map(|p| (p, s)).collect()
    };

    // Eq. 5: embedding ascends (reversed), discriminator descends
    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Reversed);
    params.extend(with_sign(rig.model.fuse.params(), Sign::Reversed));
    params.extend(with_sign(rig.model.d_fus.params(), Sign::Direct));
    reports.push(check_gradients("loss_adv_fus", &|| rig.loss_fus(), &params, coords, &mut rng));

    // Eq. 6
    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Reversed);
    for d in &rig.model.d_img {
        params.extend(with_sign(sample_params(&d.params(), 4), Sign::Direct));
    }
    reports.push(check_gradients("loss_adv_img", &|| rig.loss_img(), &params, coords, &mut rng));

    // Eq. 7
    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Reversed);
    params.extend(with_sign(rig.model.rpn.conv.params(), Sign::Reversed));
    params.extend(with_sign(rig.model.d_rpn.params(), Sign::Direct));
    reports.push(check_gradients(
        "loss_adv_rpn",
        &|| rig.loss_rpn_adv(),
        &params,
        coords,
        &mut rng,
    ));

    // Eq. 9
    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Reversed);
    params.extend(with_sign(sample_params(&rig.model.d_ins.params(), 6), Sign::Direct));
    reports.push(check_gradients("loss_adv_ins", &|| rig.loss_ins(), &params, coords, &mut rng));

    // auxiliary discriminator: plain supervised loss
    let params = with_sign(sample_params(&rig.model.d_dis.params(), 6), Sign::Direct);
    reports.push(check_gradients("loss_dis", &|| rig.loss_aux(), &params, coords, &mut rng));

    // detection losses: no reversal anywhere
    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Direct);
    params.extend(with_sign(sample_params(&rig.model.rpn.params(), 6), Sign::Direct));
    reports.push(check_gradients("l_rpn", &|| rig.loss_rpn_det(), &params, coords, &mut rng));

    let mut params = with_sign(sample_params(&rig.backbone_params(), 4), Sign::Direct);
    params.extend(with_sign(sample_params(&rig.model.head.params(), 6), Sign::Direct));
    reports.push(check_gradients(
        "l_cls_plus_l_reg",
        &|| rig.loss_head(),
        &params,
        coords,
        &mut rng,
    ));

    reports
}

/// Per-op finite-difference checks over random small shapes.
pub fn run_op_checks(coords: usize) -> Vec<PathReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut reports = Vec::new();

    // weight tensor turning any output into a generic scalar readout
    fn readout(rng: &mut ChaCha8Rng, y: &Var<f64>) -> Var<f64> {
        let w = Var::constant(rand_tensor(rng, y.shape(), -1.0, 1.0));
        ops::sum_all(&ops::mul(y, &w))
    }

    macro_rules! check_op {
        ($name:literal, $rng:ident, [$($p:ident = $shape:expr, ($lo:expr, $hi:expr));+], $body:expr, $coords:expr, $out:expr) => {{
            $(let $p = rand_param(&mut $rng, stringify!($p), &$shape, $lo, $hi);)+
            let params: Vec<(Param<f64>, Sign)> =
                vec![$(($p.clone(), Sign::Direct)),+];
            let mut w_rng = ChaCha8Rng::seed_from_u64(1234);
            let f = move || -> Var<f64> {
                let y = $body(&[$($p.var()),+]);
                readout(&mut w_rng.clone(), &y)
            };
            $out.push(check_gradients($name, &f, &params, $coords, &mut $rng));
        }};
    }

    check_op!("add", rng, [a = [3, 4], (-1.0, 1.0); b = [3, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::add(&v[0], &v[1]), coords, reports);
    check_op!("sub", rng, [a = [3, 4], (-1.0, 1.0); b = [3, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::sub(&v[0], &v[1]), coords, reports);
    check_op!("mul", rng, [a = [3, 4], (-1.0, 1.0); b = [3, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::mul(&v[0], &v[1]), coords, reports);
    check_op!("neg_scale_shift", rng, [a = [6], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::add_scalar(&ops::scale(&ops::neg(&v[0]), 1.7), 0.3), coords, reports);
    check_op!("one_minus", rng, [a = [5], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::one_minus(&v[0]), coords, reports);
    check_op!("ln", rng, [a = [5], (0.2, 3.0)],
        |v: &[Var<f64>]| ops::ln(&v[0]), coords, reports);
    check_op!("clamp_interior", rng, [a = [5], (0.2, 0.8)],
        |v: &[Var<f64>]| ops::clamp(&v[0], 0.0, 1.0), coords, reports);
    check_op!("relu", rng, [a = [8], (0.2, 1.0)],
        |v: &[Var<f64>]| ops::relu(&v[0]), coords, reports);
    check_op!("sigmoid", rng, [a = [8], (-2.0, 2.0)],
        |v: &[Var<f64>]| ops::sigmoid(&v[0]), coords, reports);
    check_op!("softmax", rng, [a = [3, 5], (-2.0, 2.0)],
        |v: &[Var<f64>]| ops::softmax(&v[0]), coords, reports);
    check_op!("mean_all", rng, [a = [4, 3], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::mean_all(&v[0]), coords, reports);
    check_op!("reshape", rng, [a = [4, 6], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::reshape(&v[0], &[2, 12]).unwrap(), coords, reports);
    check_op!("concat_channels", rng, [a = [2, 3, 3], (-1.0, 1.0); b = [4, 3, 3], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::concat_channels(v), coords, reports);
    check_op!("concat_rows", rng, [a = [2, 5], (-1.0, 1.0); b = [3, 5], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::concat_rows(&v[0], &v[1]), coords, reports);
    check_op!("concat_cols_broadcast", rng, [a = [4, 3], (-1.0, 1.0); b = [2], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::concat_cols_broadcast(&v[0], &v[1]), coords, reports);
    check_op!("gather", rng, [a = [3, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::gather(&v[0], &[0, 5, 5, 11, 3]), coords, reports);
    check_op!("mul_spatial", rng, [a = [3, 4, 4], (-1.0, 1.0); m = [4, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::mul_spatial(&v[0], &v[1]), coords, reports);
    check_op!("bilinear_resize_up", rng, [a = [2, 3, 4], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::bilinear_resize(&v[0], 7, 9).unwrap(), coords, reports);
    check_op!("bilinear_resize_down", rng, [a = [2, 8, 8], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::bilinear_resize(&v[0], 3, 5).unwrap(), coords, reports);
    check_op!("conv2d_s1", rng,
        [x = [3, 6, 6], (-1.0, 1.0); w = [4, 3, 3, 3], (-0.5, 0.5); b = [4], (-0.2, 0.2)],
        |v: &[Var<f64>]| ops::conv2d(&v[0], &v[1], &v[2], 1, 1), coords, reports);
    check_op!("conv2d_s2", rng,
        [x = [2, 9, 9], (-1.0, 1.0); w = [3, 2, 3, 3], (-0.5, 0.5); b = [3], (-0.2, 0.2)],
        |v: &[Var<f64>]| ops::conv2d(&v[0], &v[1], &v[2], 2, 1), coords, reports);
    check_op!("avg_pool2d", rng, [a = [2, 7, 7], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::avg_pool2d(&v[0], 3, 2), coords, reports);
    check_op!("global_avg_pool", rng, [a = [3, 5, 5], (-1.0, 1.0)],
        |v: &[Var<f64>]| ops::global_avg_pool(&v[0]), coords, reports);
    check_op!("affine", rng,
        [x = [4, 6], (-1.0, 1.0); w = [3, 6], (-0.5, 0.5); b = [3], (-0.2, 0.2)],
        |v: &[Var<f64>]| ops::affine(&v[0], &v[1], &v[2]), coords, reports);

    // fused loss kernels directly produce scalars
    {
        let logits = rand_param(&mut rng, "logits", &[4, 5], -2.0, 2.0);
        let params = vec![(logits.clone(), Sign::Direct)];
        let f = move || ops::softmax_xent(&logits.var(), &[1, 0, 4, 2]);
        reports.push(check_gradients("softmax_xent", &f, &params, coords, &mut rng));
    }
    {
        let p = rand_param(&mut rng, "p", &[8], 0.1, 0.9);
        let labels = Tensor::from_vec(&[8], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = vec![(p.clone(), Sign::Direct)];
        let f = move || ops::bce_mean(&p.var(), &labels);
        reports.push(check_gradients("bce_mean", &f, &params, coords, &mut rng));
    }
    {
        let x = rand_param(&mut rng, "x", &[6], -2.0, 2.0);
        let target = rand_tensor(&mut rng, &[6], -0.4, 0.4);
        let weight = rand_tensor(&mut rng, &[6], 0.1, 1.0);
        let params = vec![(x.clone(), Sign::Direct)];
        let f = move || ops::smooth_l1_sum(&x.var(), &target, &weight);
        reports.push(check_gradients("smooth_l1_sum", &f, &params, coords, &mut rng));
    }
    {
        let feat = rand_param(&mut rng, "feat", &[2, 8, 8], -1.0, 1.0);
        let rois = vec![
            RoiBox { x1: 4.0, y1: 6.0, x2: 30.0, y2: 28.0 },
            RoiBox { x1: 10.0, y1: 2.0, x2: 20.0, y2: 60.0 },
        ];
        let params = vec![(feat.clone(), Sign::Direct)];
        let mut w_rng = ChaCha8Rng::seed_from_u64(77);
        let w = Var::constant(rand_tensor(&mut w_rng, &[2, 2, 3, 3], -1.0, 1.0));
        let f = move || {
            let y = ops::roi_align(&feat.var(), &rois, 3, 2, 1.0 / 8.0);
            ops::sum_all(&ops::mul(&y, &w))
        };
        reports.push(check_gradients("roi_align", &f, &params, coords, &mut rng));
    }
    {
        // gradient reversal: forward identity, applied gradient is -slope
        let x = rand_param(&mut rng, "x", &[5], -1.0, 1.0);
        let mut w_rng = ChaCha8Rng::seed_from_u64(5);
        let w = Var::constant(rand_tensor(&mut w_rng, &[5], -1.0, 1.0));
        let params = vec![(x.clone(), Sign::Reversed)];
        let f = move || {
            let y = crossdet_core::gradient_reversal(&x.var(), GrlConfig::default());
            ops::sum_all(&ops::mul(&ops::sigmoid(&y), &w))
        };
        reports.push(check_gradients("gradient_reversal", &f, &params, coords, &mut rng));
    }
    {
        // entropy attention application with a frozen map
        let x = rand_param(&mut rng, "x", &[2, 4, 4], -1.0, 1.0);
        let e = rand_tensor(&mut rng, &[4, 4], 0.0, 0.36);
        let params = vec![(x.clone(), Sign::Direct)];
        let mut w_rng = ChaCha8Rng::seed_from_u64(21);
        let w = Var::constant(rand_tensor(&mut w_rng, &[2, 4, 4], -1.0, 1.0));
        let f = move || {
            let att = crossdet_core::backbone::AttentionMap { data: e.clone() };
            let y = crossdet_core::backbone::apply_attention(
                &x.var(),
                &att,
                crossdet_core::backbone::AttentionMode::Raw,
            )
            .unwrap();
            ops::sum_all(&ops::mul(&y, &w))
        };
        reports.push(check_gradients("apply_attention", &f, &params, coords, &mut rng));
    }

    reports
}

// referenced by both test binaries; silence per-binary dead-code analysis
#[allow(dead_code)]
fn _used(_: &Backbone<f64>, _: &PixelDiscriminator<f64>, _: &Conv2d<f64>) {}
#[allow(dead_code)]
pub fn anchors_sanity() -> usize {
    generate_anchors(&crossdet_core::rpn::AnchorConfig::default(), 2, 2).len()
}
