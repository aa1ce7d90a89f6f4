//! Scratch: finite-difference gradient check, layer-by-layer isolation.
use echoid_core::model::nn::Network;
use echoid_core::model::{grad_check, BlockSpec, ChannelSet, Head, ModelConfig, ParameterSet};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check(label: &str, cfg: &ModelConfig) {
    let params = ParameterSet::from_network(&Network::<f32>::init(cfg, 42).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let batch = Array4::from_shape_fn((4, 5, 70, 4), |_| rng.gen_range(-1.0..1.0));
    let err = grad_check(&params, cfg, &batch, &[0, 1, 1, 0], 150, 5).unwrap();
    println!("{label}: {err:.3e}");
}

fn main() {
    let base = ModelConfig::desk(ChannelSet::All, Head::Binary);
    check("linear-only", &ModelConfig::linear_head(ChannelSet::All, Head::Binary));
    let mut stem_only = base.clone();
    stem_only.blocks = vec![];
    check("stem-only", &stem_only);
    let mut one_plain = base.clone();
    one_plain.blocks = vec![BlockSpec { out_channels: 16, stride: (1, 1) }];
    check("stem+block(no shortcut)", &one_plain);
    let mut one_sc = base.clone();
    one_sc.blocks = vec![BlockSpec { out_channels: 32, stride: (2, 2) }];
    check("stem+block(shortcut)", &one_sc);
    check("full desk", &base);
}
