//! Scratch micro-benchmark of one training step's phases.

use echoid_core::model::nn::Network;
use echoid_core::model::train::{softmax_cross_entropy, Adam};
use echoid_core::model::{ChannelSet, Head, ModelConfig};
use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(20));
    let mut net = Network::<f32>::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = Array4::from_shape_fn((32, 5, 70, 4), |_| rng.gen_range(-1.0f32..1.0));
    let labels: Vec<usize> = (0..32).map(|i| i % 20).collect();
    let weights = vec![1.0; 20];

    let reps = 30;
    // Warm up.
    let (logits, cache) = net.forward_train(&batch).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels, &weights);
    let grads = net.backward(&cache, &dlogits);
    let mut adam = Adam::new(&net.trainable_views_mut());

    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.forward_train(&batch).unwrap();
    }
    println!("forward_train: {:.1} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.backward(&cache, &dlogits);
    }
    println!("backward:      {:.1} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        adam.step(&mut net.trainable_views_mut(), &grads, 1e-4);
    }
    println!("adam:          {:.1} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);

    let t = Instant::now();
    for _ in 0..reps {
        let _ = net.forward_eval(&batch).unwrap();
    }
    println!("forward_eval:  {:.1} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);
}
