use crossdet_core::backbone::{compute_mua, EntropyKind};
use crossdet_core::config::TrainConfig;
use crossdet_core::data::generate_dataset;
use crossdet_core::metrics::{evaluate, ImageGt};
use crossdet_core::trainer::{infer, run_training, Detector, TrainData, Variant};
use std::time::Instant;

fn eval_map(model: &Detector<f32>, data: &crossdet_core::data::GeneratedDataset, opts: crossdet_core::trainer::InferOptions) -> (f64, f64) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in &data.target_test {
        dets.push(infer(model, &img.pixels, opts).unwrap());
        gts.push(ImageGt { boxes: img.boxes.clone(), classes: img.classes.clone() });
    }
    let r = evaluate(&dets, &gts, model.cfg.class_count, 0.5);
    (r.map, r.mean_recall)
}

fn mean_attention(model: &Detector<f32>, px: &crossdet_core::tensor::Tensor<f32>) -> f64 {
    let pl = model.forward_image(px, false, false).unwrap();
    let kind = if model.cfg.entropy_full_binary { EntropyKind::FullBinary } else { EntropyKind::PLogP };
    let e = compute_mua(&pl.fused, &model.d_fus, kind).unwrap();
    let d = e.data.data();
    d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let residual: bool = args.get(3).map(|s| s == "res").unwrap_or(false);
    let variants: Vec<String> = args.get(4).map(|s| s.split(',').map(String::from).collect())
        .unwrap_or_else(|| vec!["source-only".into(), "baseline".into(), "+mua".into(), "+trpn".into(), "+dis".into(), "full".into()]);
    let mut cfg = TrainConfig {
        iterations: iters, seed, checkpoint_every: 0,
        n_source: 200, n_target: 200, n_test: 100,
        attention_residual: residual,
        ..TrainConfig::default()
    };
    for kv in std::env::var("CFG").unwrap_or_default().split(';').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v, "env").unwrap();
    }
    eprintln!("cfg: grl {} lambda {} shift {}/{}/{}/{} dis_src {}", cfg.grl_coefficient, cfg.lambda, cfg.blur_sigma, cfg.brightness_delta, cfg.contrast_gain, cfg.noise_std, cfg.dis_source_label);
    let data = generate_dataset(&cfg.data_config()).unwrap();
    let view = data.train_view();

    for name in &variants {
        let variant = Variant::parse(name).unwrap();
        let td = TrainData::from_view(&view);
        let t = Instant::now();
        let run = run_training::<f32>(&cfg, variant, &td, None).unwrap();
        let w = iters / 10;
        let avg = |f: &dyn Fn(&crossdet_core::trainer::StepRecord) -> f64, range: std::ops::Range<usize>| -> f64 {
            run.log[range.clone()].iter().map(|r| f(r)).sum::<f64>() / range.len() as f64
        };
        let (map, rec) = eval_map(&run.model, &data, variant.infer_options());
        let e_src = mean_attention(&run.model, &view.source_train[0].pixels);
        let e_tgt = mean_attention(&run.model, &view.target_train[0].pixels);
        println!(
            "{name:12} {:5.0}s L_det {:.2}->{:.2} l_dis {:.3}->{:.3} h {:.2}->{:.2} kl {:.3}->{:.3} nf {:.0}->{:.0} | mAP {:.3} rec {:.3} | Eس {:.3} Eт {:.3}",
            t.elapsed().as_secs_f64(),
            avg(&|r| r.detection_loss(), 0..w), avg(&|r| r.detection_loss(), iters - w..iters),
            avg(&|r| r.l_dis, 0..w), avg(&|r| r.l_dis, iters - w..iters),
            avg(&|r| r.hardness, 0..w), avg(&|r| r.hardness, iters - w..iters),
            avg(&|r| r.kl, 0..w), avg(&|r| r.kl, iters - w..iters),
            avg(&|r| r.n_final as f64, 0..w), avg(&|r| r.n_final as f64, iters - w..iters),
            map, rec, e_src, e_tgt
        );
    }
}
