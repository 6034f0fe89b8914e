//! Ablation driver: trains the requested variants over a shared seed set on
//! per-seed generated datasets and reports target-domain mAP per run.
//!
//! Runs are independent; with `jobs > 1` they execute on worker threads.
//! Each run is single-threaded and fully determined by (config, variant,
//! seed), so the schedule cannot change any result.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;

use crate::checkpoint::ParamTable;
use crate::config::TrainConfig;
use crate::data::{generate_dataset, GeneratedDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult, ImageGt};
use crate::tensor::Element;
use crate::trainer::{infer, run_training, Detector, StepRecord, TrainData, Variant};

/// One (variant, seed) training outcome. The trained parameters come back as
/// a checkpoint table so results can cross threads.
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub map: f64,
    pub eval: EvalResult,
    pub log: Vec<StepRecord>,
    pub params: ParamTable,
    pub config: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunResult {
    /// Rebuild the trained detector from the stored parameters.
    pub fn model<E: Element>(&self) -> Result<Detector<E>> {
        let model = Detector::new(&self.config)?;
        crate::checkpoint::restore(&model.params(), &self.params)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub map: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub mean_map: f64,
    pub maps: Vec<f64>,
}

/// Evaluate a trained model on a generated dataset's target test split.
pub fn evaluate_on_target<E: Element>(
    model: &Detector<E>,
    data: &GeneratedDataset,
    opts: crate::trainer::InferOptions,
) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(data.target_test.len());
    let mut gts = Vec::with_capacity(data.target_test.len());
    for img in &data.target_test {
        dets.push(infer(model, &img.pixels, opts)?);
        gts.push(ImageGt {
            boxes: img.boxes.clone(),
            classes: img.classes.clone(),
        });
    }
    Ok(evaluate(&dets, &gts, model.cfg.class_count, 0.5))
}

fn single_run(
    cfg: &TrainConfig,
    variant: Variant,
    seed: u64,
    data: &GeneratedDataset,
    out_root: Option<&Path>,
) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let train_data = match variant {
        Variant::Oracle => TrainData::oracle(data.target_train.clone()),
        _ => TrainData::from_view(&data.train_view()),
    };
    let out_dir = out_root.map(|root| root.join(format!("{}_seed{}", variant.label(), seed)));
    let run = run_training::<f32>(&cfg, variant, &train_data, out_dir.as_deref())?;
    let eval = evaluate_on_target(&run.model, data, variant.infer_options())?;
    Ok(RunResult {
        variant,
        seed,
        map: eval.map,
        eval,
        log: run.log,
        params: crate::checkpoint::params_to_table(&run.model.params()),
        config: cfg,
        out_dir,
    })
}

/// Train `variants x seeds` runs (dataset generated once per seed) and
/// return per-run results ordered by (variant, seed).
pub fn run_ablation(
    cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    jobs: usize,
    out_root: Option<&Path>,
) -> Result<Vec<RunResult>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("ablation needs variants and seeds".into()));
    }
    let datasets: Vec<GeneratedDataset> = seeds
        .iter()
        .map(|&s| {
            let mut dc = cfg.data_config();
            dc.seed = s;
            generate_dataset(&dc)
        })
        .collect::<Result<_>>()?;

    let mut tasks: VecDeque<(usize, Variant, usize)> = VecDeque::new();
    let mut id = 0usize;
    for &variant in variants {
        for (si, _) in seeds.iter().enumerate() {
            tasks.push_back((id, variant, si));
            id += 1;
        }
    }
    let total = tasks.len();
    let queue = Mutex::new(tasks);
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..total).map(|_| None).collect());

    let workers = jobs.max(1).min(total);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = queue.lock().unwrap().pop_front();
                let Some((id, variant, si)) = task else {
                    break;
                };
                let out = single_run(cfg, variant, seeds[si], &datasets[si], out_root);
                results.lock().unwrap()[id] = Some(out);
            });
        }
    });

    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker finished"))
        .collect()
}

/// Per-variant means over the seed set.
pub fn summarize(results: &[RunResult]) -> (Vec<AblationRow>, Vec<AblationSummary>) {
    let rows: Vec<AblationRow> = results
        .iter()
        .map(|r| AblationRow {
            variant: r.variant.label(),
            seed: r.seed,
            map: r.map,
        })
        .collect();
    let mut summaries: Vec<AblationSummary> = Vec::new();
    for r in results {
        let label = r.variant.label();
        match summaries.iter_mut().find(|s| s.variant == label) {
            Some(s) => s.maps.push(r.map),
            None => summaries.push(AblationSummary {
                variant: label,
                mean_map: 0.0,
                maps: vec![r.map],
            }),
        }
    }
    for s in &mut summaries {
        s.mean_map = s.maps.iter().sum::<f64>() / s.maps.len() as f64;
    }
    (rows, summaries)
}
