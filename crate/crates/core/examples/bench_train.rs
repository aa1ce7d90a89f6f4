//! Scratch benchmark: training-step throughput and small-corpus learning
//! behavior for the desk-scale model. Run with --release for honest numbers.

use echoid_core::instances::{Instance, InstanceLabel, InstanceMeta};
use echoid_core::model::{
    network_from_params, pretrain_base, to_eval_batch, ChannelSet, Head, ModelConfig, TrainConfig,
};
use echoid_core::simchan::SessionMeta;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn synthetic_instance(seed: u64, class: usize, id: &str) -> Instance {
    // Identity lives in shift-invariant structure: the spacing between two
    // row peaks and the per-channel gain tilt, so random vertical shifts
    // (the training augmentation) do not erase it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array3::<f32>::zeros((4, 5, 110));
    let gap = 6 + 5 * class;
    for ((c, _, r), v) in values.indexed_iter_mut() {
        let tilt = 1.0 + 0.25 * (((class + c) % 4) as f32);
        let d1 = (r as f32 - 45.0).abs();
        let d2 = (r as f32 - 45.0 - gap as f32).abs();
        *v = tilt * ((-d1 * d1 / 6.0).exp() + 0.8 * (-d2 * d2 / 6.0).exp())
            + rng.gen_range(-0.02f32..0.02);
    }
    Instance {
        values,
        label: Some(InstanceLabel::Identity(id.into())),
        meta: InstanceMeta {
            session: SessionMeta::new(id, 1, 0),
            position: 0,
        },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let per_class: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);

    let classes = 4usize;
    let corpus: Vec<Instance> = (0..classes * per_class)
        .map(|i| {
            let class = i % classes;
            synthetic_instance(i as u64, class, &format!("u{class}"))
        })
        .collect();

    let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(classes));
    let mut tc = TrainConfig::with_seed(3);
    tc.epochs_base = epochs;
    tc.initial_lr = lr;

    let t0 = Instant::now();
    let model = pretrain_base(&corpus, &cfg, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let steps = epochs * corpus.len().div_ceil(tc.batch_size);
    println!(
        "trained {} instances × {epochs} epochs in {dt:.2}s ({:.1} ms/step, {steps} steps)",
        corpus.len(),
        1e3 * dt / steps as f64
    );
    println!("loss curve: {:?}", model.loss_curve);

    let net = network_from_params::<f32>(&cfg, &model.params).unwrap();
    let refs: Vec<&Instance> = corpus.iter().collect();
    let batch = to_eval_batch(&refs, &cfg.channels);
    // Train-mode (batch statistics) comparison on the same inputs.
    let (logits_tm, _) = net.forward_train(&batch).unwrap();
    let mut correct_tm = 0usize;
    for (i, row) in logits_tm.rows().into_iter().enumerate() {
        let pred = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let want = match &corpus[i].label {
            Some(InstanceLabel::Identity(id)) => model.class_map.iter().position(|x| x == id).unwrap(),
            _ => unreachable!(),
        };
        if pred == want { correct_tm += 1; }
    }
    println!("train-mode (batch-stat) accuracy {:.4}", correct_tm as f64 / corpus.len() as f64);
    let t1 = Instant::now();
    let logits = net.forward_eval(&batch).unwrap();
    let dt_inf = t1.elapsed().as_secs_f64();
    let mut correct = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let pred = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let want = match &corpus[i].label {
            Some(InstanceLabel::Identity(id)) => model.class_map.iter().position(|x| x == id).unwrap(),
            _ => unreachable!(),
        };
        if pred == want {
            correct += 1;
        }
    }
    println!(
        "eval-mode train accuracy {:.4} | inference {:.2} ms/instance",
        correct as f64 / corpus.len() as f64,
        1e3 * dt_inf / corpus.len() as f64
    );
}
