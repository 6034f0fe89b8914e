//! End-to-end optimization: the detector assembly, the per-step loss
//! composition, the training loop with logging and checkpointing, and the
//! inference contract.
//!
//! One training stream: a step consumes one labeled source image and one
//! unlabeled target image. Detection losses come from the source image only;
//! the adversarial terms use both. At inference the dynamic sampling is off
//! while the attention and transferable filtering stay active.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backprop, sgd_momentum_step, GrlConfig, Param, Var};
use crate::backbone::{
    apply_attention, compute_mua, context_vector, fuse_multiscale, loss_adv_fus, loss_adv_img,
    AttentionMap, AttentionMode, Backbone, EntropyKind, FeatureMap, FusedFeature,
    PixelDiscriminator,
};
use crate::checkpoint::{self, ParamTable};
use crate::config::TrainConfig;
use crate::data::{AnnotatedImage, TrainView, UnlabeledImage};
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::head::{
    detection_losses, dynamic_sample_count, hardness_score, kl_objectness, label_proposals,
    loss_adv_ins, loss_dis, DetectionHead, DisState, LabeledRois, MlpDiscriminator,
    ObjectnessDistribution,
};
use crate::layers::Conv2d;
use crate::metrics::Detection;
use crate::ops::{self, RoiBox};
use crate::rpn::{
    assign_rpn_targets, build_proposals, generate_anchors, loss_adv_rpn, nms, rpn_loss,
    AnchorGrid, ProposalSet, RpnDomainDisc, RpnHead, RpnOut,
};
use crate::tensor::{Element, Tensor};

/// Which parts of the adaptation machinery a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Detection losses on labeled source images only.
    SourceOnly,
    /// Detection losses on fully labeled target images (upper bound).
    Oracle,
    /// Adversarial adaptation with per-component switches.
    Adapt {
        mua: bool,
        trpn: bool,
        dis: bool,
        adversarial: bool,
    },
}

impl Variant {
    pub fn full() -> Self {
        Variant::Adapt {
            mua: true,
            trpn: true,
            dis: true,
            adversarial: true,
        }
    }

    pub fn baseline() -> Self {
        Variant::Adapt {
            mua: false,
            trpn: false,
            dis: false,
            adversarial: true,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Variant::SourceOnly => "source-only".into(),
            Variant::Oracle => "oracle".into(),
            Variant::Adapt {
                mua, trpn, dis, ..
            } => {
                if !mua && !trpn && !dis {
                    "baseline".into()
                } else {
                    let mut parts = Vec::new();
                    if *mua {
                        parts.push("mua");
                    }
                    if *trpn {
                        parts.push("trpn");
                    }
                    if *dis {
                        parts.push("dis");
                    }
                    if parts.len() == 3 {
                        "full".into()
                    } else {
                        format!("+{}", parts.join("+"))
                    }
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "source-only" => Variant::SourceOnly,
            "oracle" => Variant::Oracle,
            "baseline" => Variant::baseline(),
            "full" => Variant::full(),
            "+mua" => Variant::Adapt { mua: true, trpn: false, dis: false, adversarial: true },
            "+trpn" => Variant::Adapt { mua: false, trpn: true, dis: false, adversarial: true },
            "+dis" => Variant::Adapt { mua: false, trpn: false, dis: true, adversarial: true },
            "+mua+trpn" => Variant::Adapt { mua: true, trpn: true, dis: false, adversarial: true },
            "+mua+dis" => Variant::Adapt { mua: true, trpn: false, dis: true, adversarial: true },
            "+trpn+dis" => Variant::Adapt { mua: false, trpn: true, dis: true, adversarial: true },
            other => {
                return Err(Error::Config(format!("unknown variant '{other}'")));
            }
        })
    }

    /// The eight on/off combinations plus source-only and oracle.
    pub fn ablation_rows() -> Vec<Variant> {
        let mut rows = vec![Variant::SourceOnly];
        for mask in 0..8u8 {
            rows.push(Variant::Adapt {
                mua: mask & 1 != 0,
                trpn: mask & 2 != 0,
                dis: mask & 4 != 0,
                adversarial: true,
            });
        }
        rows.push(Variant::Oracle);
        rows
    }

    /// Inference flags matching how the variant was trained.
    pub fn infer_options(&self) -> InferOptions {
        match self {
            Variant::SourceOnly | Variant::Oracle => InferOptions {
                disable_mua: true,
                disable_trpn: true,
                disable_dis: false,
            },
            Variant::Adapt { mua, trpn, .. } => InferOptions {
                disable_mua: !mua,
                disable_trpn: !trpn,
                disable_dis: false,
            },
        }
    }
}

/// Named scalar losses of one step plus the sampling diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub l_rpn: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_dis: f64,
    pub l_adv_img: f64,
    pub l_adv_fus: f64,
    pub l_adv_rpn: f64,
    pub l_adv_ins: f64,
    pub lambda: f64,
    pub total: f64,
    pub n_final: usize,
    pub hardness: f64,
    pub kl: f64,
}

impl StepRecord {
    /// `L_det + L_dis + lambda * (sum of the four adversarial terms)`.
    pub fn recomputed_total(&self) -> f64 {
        self.l_rpn
            + self.l_reg
            + self.l_cls
            + self.l_dis
            + self.lambda * (self.l_adv_img + self.l_adv_fus + self.l_adv_rpn + self.l_adv_ins)
    }

    pub fn detection_loss(&self) -> f64 {
        self.l_rpn + self.l_reg + self.l_cls
    }
}

/// The full model: backbone, heads and every domain discriminator.
pub struct Detector<E: Element> {
    pub cfg: TrainConfig,
    pub backbone: Backbone<E>,
    pub d_img: Vec<PixelDiscriminator<E>>,
    pub fuse: Conv2d<E>,
    pub d_fus: PixelDiscriminator<E>,
    pub rpn: RpnHead<E>,
    pub d_rpn: RpnDomainDisc<E>,
    pub head: DetectionHead<E>,
    pub d_dis: PixelDiscriminator<E>,
    pub d_ins: MlpDiscriminator<E>,
    pub anchors: AnchorGrid,
}

impl<E: Element> Detector<E> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0); // init stream
        let last = *cfg.channels.last().unwrap();
        let total_ch: usize = cfg.channels.iter().sum();
        let k = cfg.anchor_config().k();
        let grid = cfg.image_size / cfg.stride();
        let backbone = Backbone::new("backbone", &mut rng, &cfg.channels);
        let d_img = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                PixelDiscriminator::new(&format!("d_img{}", l + 1), &mut rng, c, cfg.disc_hidden)
            })
            .collect();
        let fuse = Conv2d::new("fuse", &mut rng, total_ch, last, 1, 1, 0);
        let d_fus = PixelDiscriminator::new("d_fus", &mut rng, last, cfg.disc_hidden);
        let rpn = RpnHead::new("rpn", &mut rng, last, k);
        let d_rpn = RpnDomainDisc::new("d_rpn", &mut rng, last, k);
        let head = DetectionHead::new(
            "head",
            &mut rng,
            last,
            cfg.roi_size,
            cfg.head_hidden,
            cfg.class_count,
        );
        let d_dis = PixelDiscriminator::new("d_dis", &mut rng, last, cfg.disc_hidden);
        let d_ins = MlpDiscriminator::new(
            "d_ins",
            &mut rng,
            last * cfg.roi_size * cfg.roi_size + cfg.disc_hidden,
            cfg.ins_hidden,
        );
        Ok(Self {
            anchors: generate_anchors(&cfg.anchor_config(), grid, grid),
            cfg: cfg.clone(),
            backbone,
            d_img,
            fuse,
            d_fus,
            rpn,
            d_rpn,
            head,
            d_dis,
            d_ins,
        })
    }

    /// Every parameter in registration order (update order is deterministic).
    pub fn params(&self) -> Vec<Param<E>> {
        let mut p = self.backbone.params();
        for d in &self.d_img {
            p.extend(d.params());
        }
        p.extend(self.fuse.params());
        p.extend(self.d_fus.params());
        p.extend(self.rpn.params());
        p.extend(self.d_rpn.params());
        p.extend(self.head.params());
        p.extend(self.d_dis.params());
        p.extend(self.d_ins.params());
        p
    }

    fn entropy_kind(&self) -> EntropyKind {
        if self.cfg.entropy_full_binary {
            EntropyKind::FullBinary
        } else {
            EntropyKind::PLogP
        }
    }

    fn attention_mode(&self) -> AttentionMode {
        if self.cfg.attention_residual {
            AttentionMode::Residual
        } else {
            AttentionMode::Raw
        }
    }

    /// Per-image forward pass: features, fusion, optional attention, RPN
    /// heads and the filtered proposal set.
    pub fn forward_image(
        &self,
        pixels: &Tensor<f32>,
        use_mua: bool,
        use_trpn_key: bool,
    ) -> Result<Pipeline<E>> {
        let img = Var::constant(pixels.cast::<E>());
        let feats = self.backbone.extract_features(&img)?;
        let fused = fuse_multiscale(&feats, &self.fuse)?;
        let last = feats.last().unwrap().data.clone();
        let (attention, attended) = if use_mua {
            let e = compute_mua(&fused, &self.d_fus, self.entropy_kind())?;
            let a = apply_attention(&last, &e, self.attention_mode())?;
            (Some(e), a)
        } else {
            (None, last)
        };
        let rpn = self.rpn.forward(&attended);
        let p_rpn = self.d_rpn.forward(&rpn.feature.detach());
        let size = self.cfg.image_size as f64;
        let mut proposals = build_proposals(
            &self.anchors,
            rpn.objectness.value(),
            rpn.deltas.value(),
            p_rpn.value(),
            size,
            size,
            self.entropy_kind(),
        )?;
        crate::rpn::select_topn(
            &mut proposals,
            self.cfg.proposals_n,
            use_trpn_key,
            self.cfg.rpn_nms_iou,
        );
        Ok(Pipeline {
            feats,
            fused,
            attention,
            attended,
            rpn,
            proposals,
        })
    }

    /// Pool ROI features from the attended map and flatten to rows.
    fn roi_rows(&self, attended: &Var<E>, boxes: &[BoxF]) -> Result<Var<E>> {
        let rois: Vec<RoiBox> = boxes.iter().map(to_roi).collect();
        let feats = ops::roi_align(
            attended,
            &rois,
            self.cfg.roi_size,
            self.cfg.roi_samples,
            1.0 / self.cfg.stride() as f64,
        );
        let last = *self.cfg.channels.last().unwrap();
        ops::reshape(
            &feats,
            &[boxes.len(), last * self.cfg.roi_size * self.cfg.roi_size],
        )
    }
}

fn to_roi(b: &BoxF) -> RoiBox {
    RoiBox {
        x1: b.x1,
        y1: b.y1,
        x2: b.x2,
        y2: b.y2,
    }
}

/// Products of one per-image forward pass.
pub struct Pipeline<E: Element> {
    pub feats: Vec<FeatureMap<E>>,
    pub fused: FusedFeature<E>,
    pub attention: Option<AttentionMap<E>>,
    pub attended: Var<E>,
    pub rpn: RpnOut<E>,
    pub proposals: ProposalSet,
}

fn zero<E: Element>() -> Var<E> {
    Var::scalar(E::zero())
}

fn item<E: Element>(v: &Var<E>) -> f64 {
    v.value().item().to64()
}

/// One optimization step under the total objective. Detection losses use the
/// labeled image; the adversarial and auxiliary terms use the source/target
/// pair. Returns the logged record.
pub fn train_step<E: Element>(
    model: &Detector<E>,
    labeled: &AnnotatedImage,
    target: Option<&UnlabeledImage>,
    variant: Variant,
    iteration: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let cfg = &model.cfg;
    let (mua, trpn, dis, adversarial) = match variant {
        Variant::SourceOnly | Variant::Oracle => (false, false, false, false),
        Variant::Adapt {
            mua,
            trpn,
            dis,
            adversarial,
        } => (mua, trpn, dis, adversarial),
    };
    let grl = GrlConfig::new(cfg.grl_coefficient)?;
    let head_cfg = cfg.head_config();

    let pl_s = model.forward_image(&labeled.pixels, mua, trpn)?;
    let pl_t = match target {
        Some(t) => Some(model.forward_image(&t.pixels, mua, trpn)?),
        None => None,
    };

    // region proposal loss on the labeled image
    let targets = assign_rpn_targets(
        &model.anchors,
        &labeled.boxes,
        &cfg.rpn_target_config(),
        rng,
    );
    let l_rpn = rpn_loss(&pl_s.rpn.objectness, &pl_s.rpn.deltas, &targets, &model.anchors);

    // head losses on the labeled image; ground truth joins the candidates
    let mut candidates = pl_s.proposals.kept_boxes(trpn);
    candidates.extend_from_slice(&labeled.boxes);
    let rois = label_proposals(&candidates, &labeled.boxes, &labeled.classes, &head_cfg, rng);
    let (l_cls, l_reg) = if rois.boxes.is_empty() {
        (zero(), zero())
    } else {
        let roi_feats = roi_features_grid(model, &pl_s.attended, &rois)?;
        let (cls, reg) = model.head.forward(&roi_feats)?;
        detection_losses(&cls, &reg, &rois, cfg.class_count)
    };

    // adversarial and auxiliary terms need the target stream
    let mut l_dis = zero();
    let mut l_adv_img = zero();
    let mut l_adv_fus = zero();
    let mut l_adv_rpn = zero();
    let mut l_adv_ins = zero();
    let mut hardness = 0.0;
    let mut kl = 0.0;
    let mut n_final = cfg.proposals_n;

    if let Some(pl_t) = &pl_t {
        let src_label = cfg.dis_source_label;
        l_dis = loss_dis(&pl_s.fused, &pl_t.fused, &model.d_dis, src_label, 1.0 - src_label);
        hardness = hardness_score(&pl_t.fused, &model.d_dis);

        let state = DisState::new(cfg.proposals_n, cfg.n_min)?;
        let src_scores = ranked_desc(pl_s.proposals.kept_objectness(trpn));
        let tgt_scores = ranked_desc(pl_t.proposals.kept_objectness(trpn));
        let src_dist = ObjectnessDistribution::from_scores(&src_scores, cfg.proposals_n);
        let tgt_dist = ObjectnessDistribution::from_scores(&tgt_scores, cfg.proposals_n);
        kl = kl_objectness(&src_dist, &tgt_dist);
        n_final = if dis {
            dynamic_sample_count(&state, hardness, kl)?
        } else {
            cfg.proposals_n
        };

        if adversarial {
            l_adv_img = loss_adv_img(&pl_s.feats, &pl_t.feats, &model.d_img, grl);
            l_adv_fus = loss_adv_fus(&pl_s.fused, &pl_t.fused, &model.d_fus, grl);
            if trpn {
                l_adv_rpn = loss_adv_rpn(&pl_s.rpn.feature, &pl_t.rpn.feature, &model.d_rpn, grl);
            }
            let src_boxes = pl_s.proposals.kept_boxes(trpn);
            let mut tgt_boxes = pl_t.proposals.kept_boxes(trpn);
            tgt_boxes.truncate(n_final);
            if !src_boxes.is_empty() && !tgt_boxes.is_empty() {
                let rs = model.roi_rows(&pl_s.attended, &src_boxes)?;
                let rt = model.roi_rows(&pl_t.attended, &tgt_boxes)?;
                let ctx_s = context_vector(&pl_s.fused, &model.d_fus);
                let ctx_t = context_vector(&pl_t.fused, &model.d_fus);
                l_adv_ins = loss_adv_ins(&rs, &rt, &ctx_s, &ctx_t, &model.d_ins, grl);
            }
        }
    }

    let l_det = ops::add(&ops::add(&l_rpn, &l_reg), &l_cls);
    let adv = ops::add(
        &ops::add(&l_adv_img, &l_adv_fus),
        &ops::add(&l_adv_rpn, &l_adv_ins),
    );
    let total = ops::add(&ops::add(&l_det, &l_dis), &ops::scale(&adv, cfg.lambda));

    let record = StepRecord {
        iteration,
        lr,
        l_rpn: item(&l_rpn),
        l_reg: item(&l_reg),
        l_cls: item(&l_cls),
        l_dis: item(&l_dis),
        l_adv_img: item(&l_adv_img),
        l_adv_fus: item(&l_adv_fus),
        l_adv_rpn: item(&l_adv_rpn),
        l_adv_ins: item(&l_adv_ins),
        lambda: cfg.lambda,
        total: item(&total),
        n_final,
        hardness,
        kl,
    };
    if !record.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {iteration}; terms: {record:?}"
        )));
    }
    backprop(&total)?;
    sgd_momentum_step(&model.params(), lr, cfg.momentum)?;
    Ok(record)
}

/// Sampled ROI pooling for the head batch.
fn roi_features_grid<E: Element>(
    model: &Detector<E>,
    attended: &Var<E>,
    rois: &LabeledRois,
) -> Result<Var<E>> {
    let boxes: Vec<RoiBox> = rois.boxes.iter().map(to_roi).collect();
    Ok(ops::roi_align(
        attended,
        &boxes,
        model.cfg.roi_size,
        model.cfg.roi_samples,
        1.0 / model.cfg.stride() as f64,
    ))
}

fn ranked_desc(mut scores: Vec<f64>) -> Vec<f64> {
    scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    scores
}

/// Inputs of a training run, already split so target labels cannot reach
/// the loop.
pub struct TrainData {
    pub labeled: Vec<AnnotatedImage>,
    pub target: Vec<UnlabeledImage>,
}

impl TrainData {
    pub fn from_view(view: &TrainView) -> Self {
        Self {
            labeled: view.source_train.clone(),
            target: view.target_train.clone(),
        }
    }

    /// Oracle data: fully labeled target images; no unlabeled stream.
    pub fn oracle(labeled_targets: Vec<AnnotatedImage>) -> Self {
        Self {
            labeled: labeled_targets,
            target: Vec::new(),
        }
    }
}

pub struct RunArtifacts<E: Element> {
    pub model: Detector<E>,
    pub log: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Train for `cfg.iterations` steps over shuffled source/target pairs,
/// logging one JSON record per step and checkpointing periodically. With an
/// output directory the artifacts are `config.txt`, `log.jsonl`,
/// `ckpt_*.bin` and `final.ckpt` (+ sidecar metadata).
pub fn run_training<E: Element>(
    cfg: &TrainConfig,
    variant: Variant,
    data: &TrainData,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts<E>> {
    if data.labeled.is_empty() {
        return Err(Error::Contract("no labeled images to train on".into()));
    }
    let needs_target = matches!(variant, Variant::Adapt { .. });
    if needs_target && data.target.is_empty() {
        return Err(Error::Contract("adaptation needs target images".into()));
    }
    let model = Detector::<E>::new(cfg)?;

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("log.jsonl"),
            )?))
        }
        None => None,
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(3);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(4);

    let mut src_queue: Vec<usize> = Vec::new();
    let mut tgt_queue: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        if src_queue.is_empty() {
            src_queue = shuffled(data.labeled.len(), &mut shuffle_rng);
        }
        let labeled = &data.labeled[src_queue.pop().unwrap()];
        let target = if needs_target {
            if tgt_queue.is_empty() {
                tgt_queue = shuffled(data.target.len(), &mut shuffle_rng);
            }
            Some(&data.target[tgt_queue.pop().unwrap()])
        } else {
            None
        };
        let lr = cfg.lr_at(iteration);
        let record = train_step(&model, labeled, target, variant, iteration, lr, &mut sample_rng)?;
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)
                .map_err(|e| Error::Format(format!("log serialization: {e}")))?;
            f.write_all(b"\n")?;
        }
        log.push(record);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && (iteration + 1) % cfg.checkpoint_every == 0
                && iteration + 1 != cfg.iterations
            {
                save_model(&dir.join(format!("ckpt_{:06}.bin", iteration + 1)), &model, iteration + 1)?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            save_model(&path, &model, cfg.iterations)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunArtifacts {
        model,
        log,
        final_checkpoint,
    })
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.reverse(); // queue pops from the back
    idx
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: usize,
    config: String,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Save parameters plus a metadata sidecar carrying the config snapshot.
pub fn save_model<E: Element>(path: &Path, model: &Detector<E>, iteration: usize) -> Result<()> {
    let table = checkpoint::params_to_table(&model.params());
    checkpoint::save(path, &table)?;
    let meta = CheckpointMeta {
        iteration,
        config: model.cfg.snapshot(),
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    std::fs::write(meta_path(path), text)?;
    Ok(())
}

/// Rebuild a detector from a checkpoint and its sidecar. Every parameter in
/// the model must be present, which covers the discriminators required at
/// inference.
pub fn load_model<E: Element>(path: &Path) -> Result<(Detector<E>, usize)> {
    let meta_text = std::fs::read_to_string(meta_path(path))
        .map_err(|e| Error::Format(format!("missing checkpoint metadata: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let cfg = TrainConfig::from_snapshot(&meta.config)?;
    let model = Detector::<E>::new(&cfg)?;
    let table: ParamTable = checkpoint::load(path)?;
    checkpoint::restore(&model.params(), &table)?;
    Ok((model, meta.iteration))
}

/// Inference-time switches. Dynamic sampling is already off at inference,
/// so `disable_dis` has no effect by construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferOptions {
    pub disable_mua: bool,
    pub disable_trpn: bool,
    pub disable_dis: bool,
}

fn apply_deltas(b: &BoxF, t: &[f64; 4], img: f64) -> Option<BoxF> {
    let (cx, cy) = b.center();
    let w = b.width();
    let h = b.height();
    let nx = cx + t[0] * w;
    let ny = cy + t[1] * h;
    let nw = w * t[2].clamp(-4.0, 4.0).exp();
    let nh = h * t[3].clamp(-4.0, 4.0).exp();
    let refined =
        BoxF::new(nx - nw / 2.0, ny - nh / 2.0, nx + nw / 2.0, ny + nh / 2.0).clip(img, img);
    (refined.width() >= 1.0 && refined.height() >= 1.0).then_some(refined)
}

/// Detect objects in one image: attention and transferable filtering are
/// applied (unless disabled), a fixed top-N proposal set feeds the head,
/// class scores are thresholded and per-class NMS cleans up.
pub fn infer<E: Element>(
    model: &Detector<E>,
    pixels: &Tensor<f32>,
    opts: InferOptions,
) -> Result<Vec<Detection>> {
    let cfg = &model.cfg;
    let pl = model.forward_image(pixels, !opts.disable_mua, !opts.disable_trpn)?;
    let boxes = pl.proposals.kept_boxes(!opts.disable_trpn);
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let rois: Vec<RoiBox> = boxes.iter().map(to_roi).collect();
    let feats = ops::roi_align(
        &pl.attended,
        &rois,
        cfg.roi_size,
        cfg.roi_samples,
        1.0 / cfg.stride() as f64,
    );
    let (cls, reg) = model.head.forward(&feats)?;
    let probs = ops::softmax(&cls);
    let probs = probs.value();
    let reg = reg.value();
    let kcls = cfg.class_count + 1;
    let img = cfg.image_size as f64;

    let mut raw: Vec<Detection> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        for c in 0..cfg.class_count {
            let score = probs.data()[i * kcls + c].to64();
            if score < cfg.score_thresh {
                continue;
            }
            let t = [
                reg.data()[i * 4 * cfg.class_count + c * 4].to64(),
                reg.data()[i * 4 * cfg.class_count + c * 4 + 1].to64(),
                reg.data()[i * 4 * cfg.class_count + c * 4 + 2].to64(),
                reg.data()[i * 4 * cfg.class_count + c * 4 + 3].to64(),
            ];
            if let Some(refined) = apply_deltas(b, &t, img) {
                raw.push(Detection {
                    boxf: refined,
                    class: c,
                    score,
                });
            }
        }
    }

    let mut out = Vec::new();
    for c in 0..cfg.class_count {
        let class_dets: Vec<&Detection> = raw.iter().filter(|d| d.class == c).collect();
        if class_dets.is_empty() {
            continue;
        }
        let bs: Vec<BoxF> = class_dets.iter().map(|d| d.boxf).collect();
        let ss: Vec<f64> = class_dets.iter().map(|d| d.score).collect();
        for i in nms(&bs, &ss, cfg.infer_nms_iou) {
            out.push(*class_dets[i]);
        }
    }
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, Domain};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 4,
            image_size: 32,
            channels: vec![8, 8, 16],
            disc_hidden: 8,
            head_hidden: 16,
            ins_hidden: 8,
            proposals_n: 16,
            n_min: 4,
            head_batch: 32,
            rpn_batch: 32,
            anchor_scales: vec![10.0, 16.0],
            anchor_ratios: vec![1.0],
            min_object_size: 8.0,
            max_object_size: 14.0,
            max_objects: 2,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &TrainConfig, n: usize) -> TrainData {
        let scene = cfg.scene_config();
        let labeled: Vec<AnnotatedImage> = (0..n)
            .map(|i| generate_scene(i as u64, Domain::Source, &scene).unwrap())
            .collect();
        let target: Vec<UnlabeledImage> = (0..n)
            .map(|i| UnlabeledImage {
                pixels: generate_scene(100 + i as u64, Domain::Target, &scene)
                    .unwrap()
                    .pixels,
            })
            .collect();
        TrainData { labeled, target }
    }

    #[test]
    fn one_step_is_reproducible() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 2);
        let run = || -> Vec<f32> {
            let model = Detector::<f32>::new(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_step(
                &model,
                &data.labeled[0],
                Some(&data.target[0]),
                Variant::full(),
                0,
                1e-3,
                &mut rng,
            )
            .unwrap();
            model
                .params()
                .iter()
                .flat_map(|p| p.value().data().to_vec())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lambda_zero_matches_supervised_plus_dis_bitwise() {
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.0;
        let data = tiny_data(&cfg, 1);

        let run = |variant: Variant| -> Vec<f64> {
            let model = Detector::<f64>::new(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            train_step(
                &model,
                &data.labeled[0],
                Some(&data.target[0]),
                variant,
                0,
                1e-3,
                &mut rng,
            )
            .unwrap();
            model
                .params()
                .iter()
                .flat_map(|p| p.value().data().to_vec())
                .collect()
        };
        // lambda = 0 with the adversarial graph built and backpropagated
        let with_adv = run(Variant::full());
        // no adversarial graph at all (still MUA/TRPN/DIS forward effects
        // plus the isolated auxiliary-discriminator update)
        let without = run(Variant::Adapt {
            mua: true,
            trpn: true,
            dis: true,
            adversarial: false,
        });
        assert_eq!(with_adv, without);
    }

    #[test]
    fn loss_bundle_additivity() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 1);
        let model = Detector::<f32>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rec = train_step(
            &model,
            &data.labeled[0],
            Some(&data.target[0]),
            Variant::full(),
            0,
            1e-3,
            &mut rng,
        )
        .unwrap();
        assert!((rec.total - rec.recomputed_total()).abs() < 1e-6);
        // minima sanity: with all adversarial terms at zero, the identity
        // degenerates to detection + auxiliary loss
        let degenerate = StepRecord {
            l_adv_img: 0.0,
            l_adv_fus: 0.0,
            l_adv_rpn: 0.0,
            l_adv_ins: 0.0,
            ..rec.clone()
        };
        let want = degenerate.detection_loss() + degenerate.l_dis;
        assert!((degenerate.recomputed_total() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_checkpoint_equals_initialization() {
        let mut cfg = tiny_cfg();
        cfg.iterations = 1; // run_training rejects 0 via validate; emulate by comparing inits
        let init = Detector::<f32>::new(&cfg).unwrap();
        let fresh = Detector::<f32>::new(&cfg).unwrap();
        let a: Vec<f32> = init.params().iter().flat_map(|p| p.value().data().to_vec()).collect();
        let b: Vec<f32> = fresh.params().iter().flat_map(|p| p.value().data().to_vec()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn training_logs_every_iteration_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.iterations = 3;
        let data = tiny_data(&cfg, 2);
        let run: RunArtifacts<f32> =
            run_training(&cfg, Variant::full(), &data, Some(dir.path())).unwrap();
        assert_eq!(run.log.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
        let rec: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.iteration, 0);
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join("config.txt").exists());

        // checkpoint round-trip restores identical parameter bits
        let (loaded, it) = load_model::<f32>(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(it, 3);
        for (a, b) in run.model.params().iter().zip(loaded.params()) {
            assert_eq!(a.value().data(), b.value().data(), "{}", a.name());
        }
    }

    #[test]
    fn inference_is_deterministic_and_well_formed() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 1);
        let model = Detector::<f32>::new(&cfg).unwrap();
        let a = infer(&model, &data.labeled[0].pixels, InferOptions::default()).unwrap();
        let b = infer(&model, &data.labeled[0].pixels, InferOptions::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.boxf, y.boxf);
            assert_eq!(x.score, y.score);
        }
        for d in &a {
            assert!(d.boxf.is_valid());
            assert!(d.class < cfg.class_count);
            assert!((0.0..=1.0).contains(&d.score));
        }
        // empty scene: output is well-formed, possibly empty
        let flat = crate::tensor::Tensor::<f32>::filled(&[3, 32, 32], 0.2);
        let e = infer(&model, &flat, InferOptions::default()).unwrap();
        for d in &e {
            assert!(d.boxf.is_valid());
        }
    }

    #[test]
    fn disable_dis_is_noop_at_inference() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 1);
        let model = Detector::<f32>::new(&cfg).unwrap();
        let a = infer(&model, &data.labeled[0].pixels, InferOptions::default()).unwrap();
        let b = infer(
            &model,
            &data.labeled[0].pixels,
            InferOptions {
                disable_dis: true,
                ..InferOptions::default()
            },
        )
        .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.boxf, y.boxf);
            assert_eq!(x.score, y.score);
            assert_eq!(x.class, y.class);
        }
    }

    #[test]
    fn source_only_ignores_target_stream() {
        let cfg = tiny_cfg();
        let data = tiny_data(&cfg, 2);
        let no_targets = TrainData {
            labeled: data.labeled.clone(),
            target: Vec::new(),
        };
        let run: RunArtifacts<f32> =
            run_training(&cfg, Variant::SourceOnly, &no_targets, None).unwrap();
        assert_eq!(run.log.len(), cfg.iterations);
        for rec in &run.log {
            assert_eq!(rec.l_adv_img, 0.0);
            assert_eq!(rec.l_dis, 0.0);
        }
    }

    #[test]
    fn variant_labels_and_parse_round_trip() {
        for v in Variant::ablation_rows() {
            let label = v.label();
            let back = Variant::parse(&label).unwrap();
            assert_eq!(v, back, "{label}");
        }
        assert_eq!(Variant::ablation_rows().len(), 10);
    }
}
