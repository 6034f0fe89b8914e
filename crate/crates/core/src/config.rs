//! Flat `key = value` configuration covering data generation, the model and
//! the training schedule. Every key can be overridden from the command line;
//! unknown keys are errors. `snapshot()` serializes the full state back into
//! the same format, and that text rides along with checkpoints.

use std::path::Path;

use crate::data::{DataConfig, SceneConfig, ShiftParams};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::rpn::{AnchorConfig, RpnTargetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // schedule
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub seed: u64,
    pub grl_coefficient: f64,
    pub checkpoint_every: usize,
    // model
    pub image_size: usize,
    pub class_count: usize,
    pub channels: Vec<usize>,
    pub disc_hidden: usize,
    pub head_hidden: usize,
    pub ins_hidden: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_nms_iou: f64,
    pub proposals_n: usize,
    pub n_min: usize,
    pub roi_size: usize,
    pub roi_samples: usize,
    pub theta_h: f64,
    pub theta_l: f64,
    pub head_batch: usize,
    pub fg_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch: usize,
    pub attention_residual: bool,
    pub entropy_full_binary: bool,
    pub dis_source_label: f64,
    pub score_thresh: f64,
    pub infer_nms_iou: f64,
    // data
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub blur_sigma: f64,
    pub brightness_delta: f64,
    pub contrast_gain: f64,
    pub noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let shift = ShiftParams::default();
        Self {
            iterations: 2000,
            lr: 1e-3,
            momentum: 0.9,
            lambda: 1.0,
            seed: 0,
            grl_coefficient: 1.0,
            checkpoint_every: 500,
            image_size: scene.image_size,
            class_count: scene.class_count,
            channels: vec![16, 32, 64],
            disc_hidden: 32,
            head_hidden: 64,
            ins_hidden: 32,
            anchor_scales: vec![10.0, 18.0, 28.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_nms_iou: 0.7,
            proposals_n: 64,
            n_min: 16,
            roi_size: 7,
            roi_samples: 2,
            theta_h: 0.5,
            theta_l: 0.1,
            head_batch: 128,
            fg_fraction: 0.25,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch: 64,
            attention_residual: false,
            entropy_full_binary: false,
            dis_source_label: 0.0,
            score_thresh: 0.05,
            infer_nms_iou: 0.5,
            n_source: 500,
            n_target: 500,
            n_test: 200,
            min_objects: scene.min_objects,
            max_objects: scene.max_objects,
            min_object_size: scene.min_object_size,
            max_object_size: scene.max_object_size,
            blur_sigma: shift.blur_sigma,
            brightness_delta: shift.brightness_delta,
            contrast_gain: shift.contrast_gain,
            noise_std: shift.noise_std,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().ok())
        .collect::<Option<Vec<T>>>()
        .filter(|l| !l.is_empty())
}

macro_rules! config_keys {
    ($cfg:ident, $key:ident, $value:ident, $err:expr, {
        $($name:literal => $field:ident : $kind:tt),* $(,)?
    }) => {
        match $key {
            $($name => config_keys!(@set $cfg, $field, $value, $kind, $err),)*
            _ => return Err(Error::Config(format!("{}: unknown key '{}'", $err, $key))),
        }
    };
    (@set $cfg:ident, $field:ident, $value:ident, scalar, $err:expr) => {
        $cfg.$field = $value
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad value for key", $err)))?
    };
    (@set $cfg:ident, $field:ident, $value:ident, list, $err:expr) => {
        $cfg.$field = parse_list($value)
            .ok_or_else(|| Error::Config(format!("{}: bad list value", $err)))?
    };
}

impl TrainConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, context: &str) -> Result<()> {
        let value = value.trim();
        config_keys!(self, key, value, context, {
            "iterations" => iterations: scalar,
            "lr" => lr: scalar,
            "momentum" => momentum: scalar,
            "lambda" => lambda: scalar,
            "seed" => seed: scalar,
            "grl_coefficient" => grl_coefficient: scalar,
            "checkpoint_every" => checkpoint_every: scalar,
            "image_size" => image_size: scalar,
            "class_count" => class_count: scalar,
            "channels" => channels: list,
            "disc_hidden" => disc_hidden: scalar,
            "head_hidden" => head_hidden: scalar,
            "ins_hidden" => ins_hidden: scalar,
            "anchor_scales" => anchor_scales: list,
            "anchor_ratios" => anchor_ratios: list,
            "rpn_nms_iou" => rpn_nms_iou: scalar,
            "proposals_n" => proposals_n: scalar,
            "n_min" => n_min: scalar,
            "roi_size" => roi_size: scalar,
            "roi_samples" => roi_samples: scalar,
            "theta_h" => theta_h: scalar,
            "theta_l" => theta_l: scalar,
            "head_batch" => head_batch: scalar,
            "fg_fraction" => fg_fraction: scalar,
            "rpn_fg_iou" => rpn_fg_iou: scalar,
            "rpn_bg_iou" => rpn_bg_iou: scalar,
            "rpn_batch" => rpn_batch: scalar,
            "attention_residual" => attention_residual: scalar,
            "entropy_full_binary" => entropy_full_binary: scalar,
            "dis_source_label" => dis_source_label: scalar,
            "score_thresh" => score_thresh: scalar,
            "infer_nms_iou" => infer_nms_iou: scalar,
            "n_source" => n_source: scalar,
            "n_target" => n_target: scalar,
            "n_test" => n_test: scalar,
            "min_objects" => min_objects: scalar,
            "max_objects" => max_objects: scalar,
            "min_object_size" => min_object_size: scalar,
            "max_object_size" => max_object_size: scalar,
            "blur_sigma" => blur_sigma: scalar,
            "brightness_delta" => brightness_delta: scalar,
            "contrast_gain" => contrast_gain: scalar,
            "noise_std" => noise_std: scalar,
        });
        Ok(())
    }

    /// Parse a config file, then apply flag overrides in order. Empty file
    /// (or no file) means all defaults.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v, "override")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", i + 1))
            })?;
            self.set(key.trim(), value, &format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.grl_coefficient < 0.0 {
            return Err(Error::Config("grl_coefficient must be nonnegative".into()));
        }
        if self.n_min == 0 || self.n_min > self.proposals_n {
            return Err(Error::Config("need 1 <= n_min <= proposals_n".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("channels must not be empty".into()));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::Config("anchor lists must not be empty".into()));
        }
        self.scene_config().validate()?;
        Ok(())
    }

    /// Learning rate at an iteration: drops by 10x at 5/7 of the schedule.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drop_at = self.iterations * 5 / 7;
        if iteration >= drop_at {
            self.lr / 10.0
        } else {
            self.lr
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn shift_params(&self) -> ShiftParams {
        ShiftParams {
            blur_sigma: self.blur_sigma,
            brightness_delta: self.brightness_delta,
            contrast_gain: self.contrast_gain,
            noise_std: self.noise_std,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            class_count: self.class_count,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_object_size: self.min_object_size,
            max_object_size: self.max_object_size,
            shift: self.shift_params(),
            ..SceneConfig::default()
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            n_source: self.n_source,
            n_target: self.n_target,
            n_test: self.n_test,
            scene: self.scene_config(),
        }
    }

    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            scales: self.anchor_scales.clone(),
            ratios: self.anchor_ratios.clone(),
            stride: self.stride(),
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            roi_size: self.roi_size,
            roi_samples: self.roi_samples,
            theta_h: self.theta_h,
            theta_l: self.theta_l,
            batch: self.head_batch,
            fg_fraction: self.fg_fraction,
        }
    }

    pub fn rpn_target_config(&self) -> RpnTargetConfig {
        RpnTargetConfig {
            fg_iou: self.rpn_fg_iou,
            bg_iou: self.rpn_bg_iou,
            batch: self.rpn_batch,
            max_fg_fraction: 0.5,
        }
    }

    /// Canonical `key = value` text with every key present.
    pub fn snapshot(&self) -> String {
        let list_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let list_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("iterations", self.iterations.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("lambda", self.lambda.to_string());
        kv("seed", self.seed.to_string());
        kv("grl_coefficient", self.grl_coefficient.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("image_size", self.image_size.to_string());
        kv("class_count", self.class_count.to_string());
        kv("channels", list_u(&self.channels));
        kv("disc_hidden", self.disc_hidden.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("ins_hidden", self.ins_hidden.to_string());
        kv("anchor_scales", list_f(&self.anchor_scales));
        kv("anchor_ratios", list_f(&self.anchor_ratios));
        kv("rpn_nms_iou", self.rpn_nms_iou.to_string());
        kv("proposals_n", self.proposals_n.to_string());
        kv("n_min", self.n_min.to_string());
        kv("roi_size", self.roi_size.to_string());
        kv("roi_samples", self.roi_samples.to_string());
        kv("theta_h", self.theta_h.to_string());
        kv("theta_l", self.theta_l.to_string());
        kv("head_batch", self.head_batch.to_string());
        kv("fg_fraction", self.fg_fraction.to_string());
        kv("rpn_fg_iou", self.rpn_fg_iou.to_string());
        kv("rpn_bg_iou", self.rpn_bg_iou.to_string());
        kv("rpn_batch", self.rpn_batch.to_string());
        kv("attention_residual", self.attention_residual.to_string());
        kv("entropy_full_binary", self.entropy_full_binary.to_string());
        kv("dis_source_label", self.dis_source_label.to_string());
        kv("score_thresh", self.score_thresh.to_string());
        kv("infer_nms_iou", self.infer_nms_iou.to_string());
        kv("n_source", self.n_source.to_string());
        kv("n_target", self.n_target.to_string());
        kv("n_test", self.n_test.to_string());
        kv("min_objects", self.min_objects.to_string());
        kv("max_objects", self.max_objects.to_string());
        kv("min_object_size", self.min_object_size.to_string());
        kv("max_object_size", self.max_object_size.to_string());
        kv("blur_sigma", self.blur_sigma.to_string());
        kv("brightness_delta", self.brightness_delta.to_string());
        kv("contrast_gain", self.contrast_gain.to_string());
        kv("noise_std", self.noise_std.to_string());
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
