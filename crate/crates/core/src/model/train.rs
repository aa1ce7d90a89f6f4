//! Optimizer, loss, and the shared training loop.

use super::nn::{Elem, Network};
use super::ChannelSet;
use crate::error::Result;
use crate::instances::augment_view;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Adam with bias correction; state lives in the network element type.
pub struct Adam<E> {
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<E: Elem> Adam<E> {
    pub fn new(shapes: &[ArrayViewMutD<'_, E>]) -> Self {
        Adam {
            m: shapes.iter().map(|s| ArrayD::zeros(s.raw_dim())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, E>], grads: &[ArrayD<E>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let scale = E::from_f64(lr / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let eps = E::from_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, g, m, v| {
                    *m = b1 * *m + (one - b1) * *g;
                    *v = b2 * *v + (one - b2) * *g * *g;
                    let vhat = (*v * inv_bc2).sqrt() + eps;
                    *p = *p - scale * *m / vhat;
                });
        }
    }
}

/// Cosine-annealed learning rate over `total` steps, starting at `initial`.
pub fn cosine_lr(initial: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return initial;
    }
    initial * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Weighted softmax cross-entropy. Returns the mean loss (weighted, in f64)
/// and d(loss)/d(logits). `class_weights` has one entry per class.
pub fn softmax_cross_entropy<E: Elem>(
    logits: &Array2<E>,
    labels: &[usize],
    class_weights: &[f64],
) -> (f64, Array2<E>) {
    let (n, k) = logits.dim();
    assert_eq!(labels.len(), n);
    let mut dlogits = Array2::<E>::zeros((n, k));
    let mut loss = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..n {
        weight_sum += class_weights[labels[i]];
    }
    let norm = if weight_sum > 0.0 { weight_sum } else { 1.0 };
    for i in 0..n {
        let row = logits.row(i);
        let w = class_weights[labels[i]];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
        let mut sum = 0.0;
        for &z in row.iter() {
            sum += (z.to_f64() - max).exp();
        }
        let lse = max + sum.ln();
        loss += w * (lse - row[labels[i]].to_f64());
        for j in 0..k {
            let p = (row[j].to_f64() - lse).exp();
            let ind = if j == labels[i] { 1.0 } else { 0.0 };
            dlogits[(i, j)] = E::from_f64(w * (p - ind) / norm);
        }
    }
    (loss / norm, dlogits)
}

/// Row-wise softmax in f64.
pub fn softmax_rows<E: Elem>(logits: &Array2<E>) -> Array2<f64> {
    let (n, k) = logits.dim();
    let mut out = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
        let mut sum = 0.0;
        for &z in row.iter() {
            sum += (z.to_f64() - max).exp();
        }
        for j in 0..k {
            out[(i, j)] = (row[j].to_f64() - max).exp() / sum;
        }
    }
    out
}

/// One training sample: the channel-sliced stored tensor plus its class.
pub type LabeledTensor = (Array3<f32>, usize);

/// Slice an instance's stored tensor down to the configured channels.
pub fn slice_channels(values: &Array3<f32>, channels: &ChannelSet) -> Array3<f32> {
    match channels {
        ChannelSet::All => values.clone(),
        _ => values.select(ndarray::Axis(0), channels.indices()),
    }
}

/// Assemble an NHWC training batch (samples × frames × rows × channels):
/// augment each stored tensor and convert.
fn assemble_batch<E: Elem>(
    data: &[LabeledTensor],
    picks: &[usize],
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> (Array4<E>, Vec<usize>) {
    let (c, f, _) = data[picks[0]].0.dim();
    let rows = crate::echo::EVAL_ROWS;
    let mut batch = Array4::<E>::zeros((picks.len(), f, rows, c));
    let mut labels = Vec::with_capacity(picks.len());
    for (bi, &ix) in picks.iter().enumerate() {
        let (values, label) = &data[ix];
        let view = if augment {
            augment_view(&values.view(), rng)
        } else {
            crate::instances::evaluation_input(&values.view())
        };
        for ((ci, fi, ri), v) in view.indexed_iter() {
            batch[(bi, fi, ri, ci)] = E::from_f64(*v as f64);
        }
        labels.push(*label);
    }
    (batch, labels)
}

/// Shared epoch loop: shuffle, assemble, forward, backprop, Adam with a
/// cosine schedule, then batch-norm running-stat updates. `epoch_indices`
/// yields the sample indices visited in each epoch. Returns per-epoch mean
/// losses.
pub fn run_training<E: Elem>(
    net: &mut Network<E>,
    data: &[LabeledTensor],
    epoch_indices: &[Vec<usize>],
    class_weights: &[f64],
    initial_lr: f64,
    batch_size: usize,
    augment: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let total_steps: usize = epoch_indices
        .iter()
        .map(|e| e.len().div_ceil(batch_size))
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x74_72_61_69_6e_00_00_01);
    let mut adam = Adam::new(&net.trainable_views_mut());
    let mut curve = Vec::with_capacity(epoch_indices.len());
    let mut step = 0usize;
    for indices in epoch_indices {
        let mut order = indices.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = assemble_batch::<E>(data, chunk, augment, &mut rng);
            let (logits, cache) = net.forward_train(&batch)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels, class_weights);
            let grads = net.backward(&cache, &dlogits);
            let lr = cosine_lr(initial_lr, step, total_steps);
            adam.step(&mut net.trainable_views_mut(), &grads, lr);
            net.update_running_stats(&cache);
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        curve.push(epoch_loss / seen.max(1) as f64);
    }
    Ok(curve)
}

/// Inverse-frequency class weights, normalized so the weighted count matches
/// the raw count: w_c = total / (classes × count_c).
pub fn inverse_count_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let k = counts.len();
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                total as f64 / (k as f64 * c as f64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 100), 2e-4);
        let mid = cosine_lr(2e-4, 50, 100);
        assert!((mid - 1e-4).abs() < 1e-12);
        let end = cosine_lr(2e-4, 99, 100);
        assert!(end < 2e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = arr2(&[[0.0f64, 0.0], [0.0, 0.0]]);
        let (loss, d) = softmax_cross_entropy(&logits, &[0, 1], &[1.0, 1.0]);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert!((d[(0, 0)] - (0.5 - 1.0) / 2.0).abs() < 1e-12);
        assert!((d[(0, 1)] - 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_balance_loss_gradient() {
        let logits = arr2(&[[0.0f64, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        // Two negatives, one positive, weighted 1:2.
        let (_, d) = softmax_cross_entropy(&logits, &[0, 0, 1], &[1.0, 2.0]);
        let neg_pull: f64 = d[(0, 0)] + d[(1, 0)];
        let pos_pull: f64 = d[(2, 0)];
        assert!((neg_pull + pos_pull).abs() < 1e-12, "balanced gradients");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = arr2(&[[3.0f32, -1.0, 0.5], [100.0, 100.0, 100.0]]);
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_weights_match_definition() {
        let w = inverse_count_weights(&[3000, 240]);
        assert!((w[0] * 3000.0 + w[1] * 240.0 - 3240.0).abs() < 1e-9);
        assert!(w[1] > w[0]);
    }
}
