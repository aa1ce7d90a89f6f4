//! Scratch: conv fwd/bwd scaling.
use echoid_core::model::nn::{Conv2d, Network};
use echoid_core::model::{ChannelSet, Head, ModelConfig};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // block-1-sized conv: the fattest layer
    let x = Array4::from_shape_fn((32, 5, 35, 16), |_| rng.gen_range(-1.0f32..1.0));
    let conv = Conv2d {
        weight: Array4::from_shape_fn((3, 3, 16, 16), |_| rng.gen_range(-1.0f32..1.0)),
        stride: (1, 2),
        padding: (1, 1),
    };
    let reps = 200;
    let (_, cache) = conv.forward(&x, true);
    let cache = cache.unwrap();
    let (dout, _) = conv.forward(&x, false);

    let t = Instant::now();
    for _ in 0..reps { let _ = conv.forward(&x, true); }
    println!("conv fwd(cache): {:.2} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);
    let t = Instant::now();
    for _ in 0..reps { let _ = conv.forward(&x, false); }
    println!("conv fwd(plain): {:.2} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);
    let t = Instant::now();
    for _ in 0..reps { let _ = conv.backward(&cache, &dout); }
    println!("conv bwd:        {:.2} ms", 1e3 * t.elapsed().as_secs_f64() / reps as f64);

    // whole net fwd_train for reference
    let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(20));
    let net = Network::<f32>::init(&cfg, 1).unwrap();
    let xb = Array4::from_shape_fn((32, 5, 70, 4), |_| rng.gen_range(-1.0f32..1.0));
    let t = Instant::now();
    for _ in 0..50 { let _ = net.forward_train(&xb).unwrap(); }
    println!("net fwd_train:   {:.2} ms", 1e3 * t.elapsed().as_secs_f64() / 50 as f64);
}
