use crossdet_core::autodiff::{backprop, Var};
use crossdet_core::config::TrainConfig;
use crossdet_core::data::{generate_scene, Domain, UnlabeledImage};
use crossdet_core::ops;
use crossdet_core::tensor::Tensor;
use crossdet_core::trainer::{run_training, Detector, TrainData, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut(), iters: usize) {
    let t = Instant::now();
    for _ in 0..iters {
        f();
    }
    println!("{name}: {:.2} ms", 1000.0 * t.elapsed().as_secs_f64() / iters as f64);
}

fn main() {
    let cfg = TrainConfig { iterations: 40, checkpoint_every: 0, ..TrainConfig::default() };
    let scene = cfg.scene_config();
    let img = generate_scene(0, Domain::Source, &scene).unwrap();
    let model = Detector::<f32>::new(&cfg).unwrap();

    timeit("forward_image", || { let _ = model.forward_image(&img.pixels, true, true).unwrap(); }, 50);
    timeit("backbone only", || {
        let v = Var::constant(img.pixels.cast::<f32>());
        let _ = model.backbone.extract_features(&v).unwrap();
    }, 50);
    timeit("forward+full backward (sum attended)", || {
        let pl = model.forward_image(&img.pixels, true, true).unwrap();
        let loss = ops::mean_all(&pl.attended);
        backprop(&loss).unwrap();
        for p in model.params() { p.zero_grad(); }
    }, 50);

    // roi rows: 64 rois of 64x7x7 then 3168->32 mlp
    let pl = model.forward_image(&img.pixels, true, true).unwrap();
    let boxes = pl.proposals.kept_boxes(true);
    println!("kept: {}", boxes.len());
    let rois: Vec<ops::RoiBox> = boxes.iter().map(|b| ops::RoiBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }).collect();
    timeit("roi_align 64", || { let _ = ops::roi_align(&pl.attended, &rois, 7, 2, 0.125); }, 50);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..64 * 3168).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..32 * 3168).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xv = Var::constant(Tensor::from_vec(&[64, 3168], x).unwrap());
    let wv = Var::constant(Tensor::from_vec(&[32, 3168], w).unwrap());
    let bv = Var::constant(Tensor::zeros(&[32]));
    timeit("affine 64x3168x32 fwd", || { let _ = ops::affine(&xv, &wv, &bv); }, 200);

    let t = Instant::now();
    let labeled: Vec<_> = (0..8).map(|i| generate_scene(i, Domain::Source, &scene).unwrap()).collect();
    let target: Vec<_> = (0..8).map(|i| UnlabeledImage { pixels: generate_scene(100 + i, Domain::Target, &scene).unwrap().pixels }).collect();
    println!("datagen 16 imgs: {:.1} ms", 1000.0 * t.elapsed().as_secs_f64());
    let data = TrainData { labeled, target };
    for (name, variant) in [("full", Variant::full())] {
        let t = Instant::now();
        let _ = run_training::<f32>(&cfg, variant, &data, None).unwrap();
        println!("{name}: {:.1} ms/step", 1000.0 * t.elapsed().as_secs_f64() / cfg.iterations as f64);
    }
}
