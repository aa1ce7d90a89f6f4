//! Residual-CNN feature extractor with a classifier head, two-stage training
//! (multi-class pretraining → per-user binary enrollment → optional two-epoch
//! fine-tune), inference, and a finite-difference gradient check.

pub mod nn;
pub mod train;

use crate::error::{Error, Result};
use crate::instances::{evaluation_input, Instance, InstanceLabel};
use ndarray::{Array3, Array4, ArrayD};
use nn::{Elem, Network};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use train::{inverse_count_weights, run_training, slice_channels, softmax_rows, LabeledTensor};

/// Which stored channels a model consumes. `Right`/`Left` are the single
/// speaker–microphone pairs of one glasses side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSet {
    All,
    Right,
    Left,
}

impl ChannelSet {
    pub fn count(&self) -> usize {
        match self {
            ChannelSet::All => 4,
            _ => 1,
        }
    }

    /// Indices into the stored channel order (right-mic×right-band first).
    pub fn indices(&self) -> &'static [usize] {
        match self {
            ChannelSet::All => &[0, 1, 2, 3],
            ChannelSet::Right => &[0],
            ChannelSet::Left => &[3],
        }
    }
}

impl std::str::FromStr for ChannelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ChannelSet::All),
            "right" => Ok(ChannelSet::Right),
            "left" => Ok(ChannelSet::Left),
            other => Err(Error::Config(format!("unknown channel set '{other}'"))),
        }
    }
}

/// Classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    MultiClass(usize),
    Binary,
}

impl Head {
    pub fn dim(&self) -> usize {
        match self {
            Head::MultiClass(k) => *k,
            Head::Binary => 2,
        }
    }
}

/// One residual block: 3×3 convolutions at `out_channels`, the first with
/// `stride`; a projection shortcut is added automatically when the shape
/// changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: (usize, usize),
}

/// Full architecture descriptor; nothing about the graph is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: ChannelSet,
    pub input_frames: usize,
    pub input_rows: usize,
    /// Width of the stem convolution; 0 removes the stem entirely.
    pub stem_width: usize,
    pub stem_stride: (usize, usize),
    pub blocks: Vec<BlockSpec>,
    pub head: Head,
}

impl ModelConfig {
    /// Reduced architecture used throughout: four residual blocks at widths
    /// 16/32/64/64 over the 5×70 instance image.
    pub fn desk(channels: ChannelSet, head: Head) -> Self {
        ModelConfig {
            channels,
            input_frames: 5,
            input_rows: crate::echo::EVAL_ROWS,
            stem_width: 16,
            stem_stride: (1, 2),
            blocks: vec![
                BlockSpec { out_channels: 16, stride: (1, 2) },
                BlockSpec { out_channels: 32, stride: (2, 2) },
                BlockSpec { out_channels: 64, stride: (1, 2) },
                BlockSpec { out_channels: 64, stride: (1, 1) },
            ],
            head,
        }
    }

    /// ResNet-18-shaped descriptor: eight blocks, two per stage, at widths
    /// 64/128/256/512.
    pub fn paper(channels: ChannelSet, head: Head) -> Self {
        ModelConfig {
            channels,
            input_frames: 5,
            input_rows: crate::echo::EVAL_ROWS,
            stem_width: 64,
            stem_stride: (1, 2),
            blocks: vec![
                BlockSpec { out_channels: 64, stride: (1, 1) },
                BlockSpec { out_channels: 64, stride: (1, 1) },
                BlockSpec { out_channels: 128, stride: (1, 2) },
                BlockSpec { out_channels: 128, stride: (1, 1) },
                BlockSpec { out_channels: 256, stride: (2, 2) },
                BlockSpec { out_channels: 256, stride: (1, 1) },
                BlockSpec { out_channels: 512, stride: (1, 2) },
                BlockSpec { out_channels: 512, stride: (1, 1) },
            ],
            head,
        }
    }

    /// Global-average-pool straight into the classifier; used for the linear
    /// gradient-check case and smoke tests.
    pub fn linear_head(channels: ChannelSet, head: Head) -> Self {
        ModelConfig {
            channels,
            input_frames: 5,
            input_rows: crate::echo::EVAL_ROWS,
            stem_width: 0,
            stem_stride: (1, 1),
            blocks: vec![],
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames == 0 || self.input_rows == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.stem_width == 0 && !self.blocks.is_empty() {
            return Err(Error::Config("residual blocks require a stem".into()));
        }
        if self.head.dim() < 2 {
            return Err(Error::Config("head needs at least two outputs".into()));
        }
        for b in &self.blocks {
            if b.out_channels == 0 || b.stride.0 == 0 || b.stride.1 == 0 {
                return Err(Error::Config("invalid block spec".into()));
            }
        }
        Ok(())
    }
}

/// Training hyperparameters. Optimizer is Adam, the schedule is cosine, and
/// the loss is (class-weighted) cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub epochs_base: usize,
    pub epochs_enroll: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Enrollment negatives visited per epoch. The shuffled negative corpus
    /// rotates through this window across epochs so every negative is still
    /// seen; `None` uses the full corpus every epoch.
    pub negatives_per_epoch: Option<usize>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 2e-4,
            epochs_base: 20,
            epochs_enroll: 10,
            epochs_finetune: 2,
            batch_size: 32,
            seed: 0,
            negatives_per_epoch: Some(6144),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig { seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 || !self.initial_lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs_base == 0 || self.epochs_enroll == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        Ok(())
    }
}

/// Named tensors of a trained model (weights, biases, batch-norm statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub version: String,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

pub const PARAMETER_SET_VERSION: &str = "pset-v1";

impl ParameterSet {
    pub fn from_network(net: &Network<f32>) -> Self {
        ParameterSet {
            version: PARAMETER_SET_VERSION.into(),
            tensors: net.named_tensors().into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PARAMETER_SET_VERSION {
            return Err(Error::Format(format!(
                "parameter set version '{}' unsupported (expected '{PARAMETER_SET_VERSION}')",
                self.version
            )));
        }
        for (name, t) in &self.tensors {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("tensor '{name}' holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn total_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Build a typed network from stored parameters.
pub fn network_from_params<E: Elem>(cfg: &ModelConfig, params: &ParameterSet) -> Result<Network<E>> {
    params.validate()?;
    let mut net = Network::<E>::init(cfg, 0)?;
    net.load_named(
        |name| {
            params
                .tensors
                .get(name)
                .map(|t| t.mapv(|v| E::from_f64(v as f64)))
        },
        false,
    )?;
    Ok(net)
}

/// Training output: final parameters, the per-epoch loss curve, and (for the
/// multi-class stage) the identity → class-index table.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParameterSet,
    pub loss_curve: Vec<f64>,
    pub class_map: Vec<String>,
}

/// Run a batch of instances through a model (inference mode).
pub fn forward(params: &ParameterSet, cfg: &ModelConfig, batch: &Array4<f32>) -> Result<Array2f> {
    let net = network_from_params::<f32>(cfg, params)?;
    net.forward_eval(batch)
}

pub type Array2f = ndarray::Array2<f32>;

fn eval_tensor(inst: &Instance, channels: &ChannelSet) -> Array3<f32> {
    let sliced = slice_channels(&inst.values, channels);
    evaluation_input(&sliced.view())
}

/// Deterministic evaluation-path batch in NHWC layout (samples × frames ×
/// rows × channels): fixed window, always z-scored.
pub fn to_eval_batch(instances: &[&Instance], channels: &ChannelSet) -> Array4<f32> {
    let c = channels.count();
    let frames = instances[0].frames();
    let rows = crate::echo::EVAL_ROWS;
    let mut batch = Array4::<f32>::zeros((instances.len(), frames, rows, c));
    for (i, inst) in instances.iter().enumerate() {
        let t = eval_tensor(inst, channels);
        for ((ci, fi, ri), v) in t.indexed_iter() {
            batch[(i, fi, ri, ci)] = *v;
        }
    }
    batch
}

/// Pretrain the shared extractor plus multi-class head on a labeled corpus.
/// Labels come from `InstanceLabel::Identity`; classes are the sorted
/// distinct identities and must match the head dimension.
pub fn pretrain_base(
    corpus: &[Instance],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    model_cfg.validate()?;
    let k = match model_cfg.head {
        Head::MultiClass(k) => k,
        Head::Binary => {
            return Err(Error::Config("pretraining needs a multi-class head".into()))
        }
    };
    let mut ids: Vec<String> = Vec::new();
    for inst in corpus {
        match &inst.label {
            Some(InstanceLabel::Identity(id)) => {
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
            _ => return Err(Error::Data("pretraining corpus needs identity labels".into())),
        }
    }
    ids.sort();
    if ids.len() < 2 {
        return Err(Error::Data("pretraining needs at least two identities".into()));
    }
    if ids.len() != k {
        return Err(Error::Config(format!(
            "head expects {k} classes but the corpus holds {}",
            ids.len()
        )));
    }
    let mut counts = vec![0usize; k];
    let data: Vec<LabeledTensor> = corpus
        .iter()
        .map(|inst| {
            let id = match &inst.label {
                Some(InstanceLabel::Identity(id)) => id,
                _ => unreachable!(),
            };
            let class = ids.binary_search(id).expect("listed identity");
            counts[class] += 1;
            (slice_channels(&inst.values, &model_cfg.channels), class)
        })
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Data("every class needs at least one instance".into()));
    }

    let mut net = Network::<f32>::init(model_cfg, cfg.seed)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let epochs: Vec<Vec<usize>> = (0..cfg.epochs_base).map(|_| all.clone()).collect();
    let weights = vec![1.0; k];
    let curve = run_training(
        &mut net,
        &data,
        &epochs,
        &weights,
        cfg.initial_lr,
        cfg.batch_size,
        cfg.augment,
        cfg.seed,
    )?;
    Ok(TrainedModel {
        params: ParameterSet::from_network(&net),
        loss_curve: curve,
        class_map: ids,
    })
}

/// Per-epoch index plans for a binary task: all positives every epoch, plus
/// either the whole negative corpus or a rotating window through its shuffled
/// order so every negative still appears during training.
fn binary_epoch_plan(
    n_pos: usize,
    n_neg: usize,
    epochs: usize,
    cap: Option<usize>,
    seed: u64,
) -> (Vec<Vec<usize>>, usize) {
    // Data layout: positives first (indices 0..n_pos), then negatives.
    let mut neg_order: Vec<usize> = (n_pos..n_pos + n_neg).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e_65_67_72_6f_74_00_01);
    use rand::seq::SliceRandom;
    neg_order.shuffle(&mut rng);
    let per_epoch = cap.map(|c| c.min(n_neg)).unwrap_or(n_neg);
    let mut plans = Vec::with_capacity(epochs);
    let mut cursor = 0usize;
    for _ in 0..epochs {
        let mut ix: Vec<usize> = (0..n_pos).collect();
        for i in 0..per_epoch {
            ix.push(neg_order[(cursor + i) % n_neg]);
        }
        cursor = (cursor + per_epoch) % n_neg.max(1);
        plans.push(ix);
    }
    (plans, per_epoch)
}

fn binary_training(
    init: Network<f32>,
    positives: &[Instance],
    negatives: &[Instance],
    channels: &ChannelSet,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut data: Vec<LabeledTensor> = Vec::with_capacity(positives.len() + negatives.len());
    for inst in positives {
        data.push((slice_channels(&inst.values, channels), 1));
    }
    for inst in negatives {
        data.push((slice_channels(&inst.values, channels), 0));
    }
    let (plan, neg_per_epoch) = binary_epoch_plan(
        positives.len(),
        negatives.len(),
        epochs,
        cfg.negatives_per_epoch,
        cfg.seed,
    );
    // Weight classes inversely to their per-epoch counts.
    let weights = inverse_count_weights(&[neg_per_epoch, positives.len()]);
    let mut net = init;
    let curve = run_training(
        &mut net,
        &data,
        &plan,
        &weights,
        cfg.initial_lr,
        cfg.batch_size,
        cfg.augment,
        cfg.seed,
    )?;
    Ok(TrainedModel {
        params: ParameterSet::from_network(&net),
        loss_curve: curve,
        class_map: vec!["negative".into(), "positive".into()],
    })
}

/// Enroll one user: keep the pretrained feature extractor, replace the head
/// with a binary classifier, and train for `epochs_enroll` epochs on the
/// user's positives against the pretraining corpus as negatives, with the
/// loss weighted inversely to class counts. `base` of `None` trains from
/// random initialization (the no-pretraining ablation).
pub fn enroll_user(
    base: Option<(&ModelConfig, &ParameterSet)>,
    positives: &[Instance],
    negatives: &[Instance],
    enroll_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    enroll_cfg.validate()?;
    if enroll_cfg.head != Head::Binary {
        return Err(Error::Config("enrollment needs a binary head".into()));
    }
    if positives.is_empty() {
        return Err(Error::Data("enrollment needs positive instances".into()));
    }
    let mut net = Network::<f32>::init(enroll_cfg, cfg.seed)?;
    if let Some((base_cfg, base_params)) = base {
        if base_cfg.channels != enroll_cfg.channels
            || base_cfg.stem_width != enroll_cfg.stem_width
            || base_cfg.blocks != enroll_cfg.blocks
        {
            return Err(Error::Config(
                "base model architecture does not match the enrollment model".into(),
            ));
        }
        base_params.validate()?;
        net.load_named(
            |name| {
                base_params
                    .tensors
                    .get(name)
                    .map(|t| t.mapv(|v| v))
            },
            true, // keep the fresh binary head
        )?;
    }
    binary_training(net, positives, negatives, &enroll_cfg.channels, cfg.epochs_enroll, cfg)
}

/// Fine-tune an enrolled binary model on newly collected positives for
/// `epochs_finetune` epochs (0 epochs returns the parameters unchanged).
pub fn fine_tune(
    model_cfg: &ModelConfig,
    params: &ParameterSet,
    new_positives: &[Instance],
    negatives: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    model_cfg.validate()?;
    if model_cfg.head != Head::Binary {
        return Err(Error::Config("fine-tuning needs a binary model".into()));
    }
    if new_positives.is_empty() {
        return Err(Error::Data("fine-tuning needs positive instances".into()));
    }
    if cfg.epochs_finetune == 0 {
        return Ok(TrainedModel {
            params: params.clone(),
            loss_curve: vec![],
            class_map: vec!["negative".into(), "positive".into()],
        });
    }
    let net = network_from_params::<f32>(model_cfg, params)?;
    binary_training(
        net,
        new_positives,
        negatives,
        &model_cfg.channels,
        cfg.epochs_finetune,
        cfg,
    )
}

/// Authentication decision for one instance: the softmax probability of the
/// positive class, accepted at score ≥ 0.5 (boundary inclusive).
pub fn authenticate(
    model_cfg: &ModelConfig,
    params: &ParameterSet,
    inst: &Instance,
) -> Result<(f64, bool)> {
    Ok(authenticate_batch(model_cfg, params, &[inst])?[0])
}

/// Batched [`authenticate`]; builds the network once. Scoring is pure, so
/// fixed-size slices run in parallel and results are collected in order.
pub fn authenticate_batch(
    model_cfg: &ModelConfig,
    params: &ParameterSet,
    instances: &[&Instance],
) -> Result<Vec<(f64, bool)>> {
    if model_cfg.head != Head::Binary {
        return Err(Error::Config("authentication needs a binary model".into()));
    }
    if instances.is_empty() {
        return Ok(vec![]);
    }
    let net = network_from_params::<f32>(model_cfg, params)?;
    let chunks: Vec<Result<Vec<(f64, bool)>>> = instances
        .par_chunks(256)
        .map(|chunk| {
            let batch = to_eval_batch(chunk, &model_cfg.channels);
            let logits = net.forward_eval(&batch)?;
            let probs = softmax_rows(&logits);
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let score = probs[(i, 1)];
                    (score, score >= 0.5)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(instances.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Finite-difference gradient check in f64.
///
/// Samples at least `min_samples` coordinates across every trainable tensor,
/// compares analytic gradients against central differences with step `h`,
/// and returns the largest deviation normalized by the largest sampled
/// gradient magnitude.
pub fn grad_check(
    params: &ParameterSet,
    model_cfg: &ModelConfig,
    batch: &Array4<f64>,
    labels: &[usize],
    min_samples: usize,
    seed: u64,
) -> Result<f64> {
    grad_check_inner(params, model_cfg, batch, labels, min_samples, seed, None)
}

/// Test hook: scales one analytic-gradient tensor to verify the checker
/// catches broken gradients.
pub fn grad_check_with_corruption(
    params: &ParameterSet,
    model_cfg: &ModelConfig,
    batch: &Array4<f64>,
    labels: &[usize],
    min_samples: usize,
    seed: u64,
    corrupt_tensor: &str,
) -> Result<f64> {
    grad_check_inner(
        params,
        model_cfg,
        batch,
        labels,
        min_samples,
        seed,
        Some(corrupt_tensor),
    )
}

fn grad_check_inner(
    params: &ParameterSet,
    model_cfg: &ModelConfig,
    batch: &Array4<f64>,
    labels: &[usize],
    min_samples: usize,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<f64> {
    let mut net = network_from_params::<f64>(model_cfg, params)?;
    let weights = vec![1.0; model_cfg.head.dim()];

    // Analytic gradients.
    let (logits, cache) = net.forward_train(batch)?;
    let (_, dlogits) = train::softmax_cross_entropy(&logits, labels, &weights);
    let mut grads = net.backward(&cache, &dlogits);
    let names = net.trainable_names();
    if let Some(target) = corrupt {
        let ix = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| Error::Config(format!("no tensor named '{target}'")))?;
        grads[ix].mapv_inplace(|v| v * 2.0);
    }

    // Sample coordinates uniformly over the flattened parameter space.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67_72_61_64_63_68_6b_00);
    let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();

    let h = 1e-3;
    let loss_and_signature = |net: &Network<f64>| -> Result<(f64, u64)> {
        let (logits, cache) = net.forward_train(batch)?;
        let (loss, _) = train::softmax_cross_entropy(&logits, labels, &weights);
        Ok((loss, cache.relu_signature()))
    };
    let base_signature = cache.relu_signature();

    // Central differences are only meaningful where the loss is smooth on
    // [θ−h, θ+h]; coordinates whose perturbation flips any ReLU activation
    // sign are resampled.
    let mut checked = 0usize;
    let mut samples: Vec<(f64, f64)> = Vec::with_capacity(min_samples);
    let budget = 40 * min_samples;
    let mut attempts = 0usize;
    while checked < min_samples && attempts < budget {
        attempts += 1;
        let ti = rng.gen_range(0..sizes.len());
        let ci = rng.gen_range(0..sizes[ti]);
        let analytic = grads[ti].as_slice().expect("contiguous")[ci];
        let original = {
            let mut views = net.trainable_views_mut();
            let slot = views[ti].as_slice_mut().expect("contiguous");
            let orig = slot[ci];
            slot[ci] = orig + h;
            orig
        };
        let (plus, sig_plus) = loss_and_signature(&net)?;
        {
            let mut views = net.trainable_views_mut();
            views[ti].as_slice_mut().expect("contiguous")[ci] = original - h;
        }
        let (minus, sig_minus) = loss_and_signature(&net)?;
        {
            let mut views = net.trainable_views_mut();
            views[ti].as_slice_mut().expect("contiguous")[ci] = original;
        }
        if sig_plus != base_signature || sig_minus != base_signature {
            continue;
        }
        let fd = (plus - minus) / (2.0 * h);
        samples.push((analytic, fd));
        checked += 1;
    }
    if checked < min_samples {
        return Err(Error::Data(format!(
            "only {checked} of {min_samples} sampled coordinates were smooth at step {h}"
        )));
    }

    let denom = samples
        .iter()
        .fold(0.0f64, |m, (a, f)| m.max(a.abs()).max(f.abs()))
        .max(1e-12);
    Ok(samples
        .iter()
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
        / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::InstanceMeta;
    use crate::simchan::SessionMeta;
    use ndarray::Array3;

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


    fn binary_instance(seed: u64, positive: bool) -> Instance {
        let mut inst = synthetic_instance(seed, if positive { 1 } else { 0 }, "u");
        inst.label = Some(InstanceLabel::Binary(positive));
        inst
    }

    #[test]
    fn desk_config_validates() {
        ModelConfig::desk(ChannelSet::All, Head::MultiClass(20))
            .validate()
            .unwrap();
        ModelConfig::paper(ChannelSet::All, Head::Binary).validate().unwrap();
        ModelConfig::linear_head(ChannelSet::All, Head::Binary)
            .validate()
            .unwrap();
    }

    #[test]
    fn zero_weight_head_gives_uniform_softmax() {
        let cfg = ModelConfig::linear_head(ChannelSet::All, Head::MultiClass(4));
        let mut net = Network::<f32>::init(&cfg, 3).unwrap();
        net.fc.weight.fill(0.0);
        net.fc.bias.fill(0.0);
        let x = Array4::<f32>::from_elem((2, 5, 70, 4), 0.3);
        let logits = net.forward_eval(&x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let p = softmax_rows(&logits);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn binary_head_emits_two_logits() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::Binary);
        let net = Network::<f32>::init(&cfg, 1).unwrap();
        let x = Array4::<f32>::zeros((1, 5, 70, 4));
        assert_eq!(net.forward_eval(&x).unwrap().dim(), (1, 2));
    }

    #[test]
    fn pretrain_accepts_21_identities() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(21));
        cfg.validate().unwrap();
        assert_eq!(cfg.head.dim(), 21);
    }

    #[test]
    fn pretrain_rejects_missing_class() {
        let corpus: Vec<Instance> = (0..8).map(|i| synthetic_instance(i, 0, "only")).collect();
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(2));
        assert!(pretrain_base(&corpus, &cfg, &TrainConfig::default()).is_err());
    }

    #[test]
    fn enroll_rejects_empty_positives() {
        let negs: Vec<Instance> = (0..4).map(|i| binary_instance(i, false)).collect();
        let cfg = ModelConfig::desk(ChannelSet::All, Head::Binary);
        assert!(matches!(
            enroll_user(None, &[], &negs, &cfg, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::Binary);
        let net = Network::<f32>::init(&cfg, 5).unwrap();
        let params = ParameterSet::from_network(&net);
        let pos: Vec<Instance> = (0..3).map(|i| binary_instance(i, true)).collect();
        let negs: Vec<Instance> = (0..3).map(|i| binary_instance(10 + i, false)).collect();
        let mut tc = TrainConfig::default();
        tc.epochs_finetune = 0;
        let out = fine_tune(&cfg, &params, &pos, &negs, &tc).unwrap();
        assert_eq!(out.params, params);
    }

    #[test]
    fn authenticate_requires_binary_head() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(3));
        let net = Network::<f32>::init(&cfg, 5).unwrap();
        let params = ParameterSet::from_network(&net);
        let inst = binary_instance(0, true);
        assert!(matches!(
            authenticate(&cfg, &params, &inst),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn authenticate_extreme_logits() {
        // Linear-head model rigged so the positive logit dominates.
        let cfg = ModelConfig::linear_head(ChannelSet::All, Head::Binary);
        let mut net = Network::<f32>::init(&cfg, 2).unwrap();
        net.fc.weight.fill(0.0);
        net.fc.bias[0] = -10.0;
        net.fc.bias[1] = 10.0;
        let params = ParameterSet::from_network(&net);
        let inst = binary_instance(1, true);
        let (score, accept) = authenticate(&cfg, &params, &inst).unwrap();
        assert!(score > 0.999);
        assert!(accept);
        // Equal logits sit exactly on the inclusive boundary.
        net.fc.bias[0] = 0.0;
        net.fc.bias[1] = 0.0;
        let params = ParameterSet::from_network(&net);
        let (score, accept) = authenticate(&cfg, &params, &inst).unwrap();
        assert!((score - 0.5).abs() < 1e-6);
        assert!(accept);
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(2));
        let corpus: Vec<Instance> = (0..24)
            .map(|i| synthetic_instance(i, (i % 2) as usize, if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let mut tc = TrainConfig::with_seed(9);
        tc.epochs_base = 2;
        tc.batch_size = 8;
        let m1 = pretrain_base(&corpus, &cfg, &tc).unwrap();
        let m2 = pretrain_base(&corpus, &cfg, &tc).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(m1.loss_curve, m2.loss_curve);
    }

    #[test]
    fn pretrain_separable_corpus_reaches_99_percent() {
        let cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(4));
        let corpus: Vec<Instance> = (0..800)
            .map(|i| {
                let class = (i % 4) as usize;
                synthetic_instance(i, class, &format!("u{class}"))
            })
            .collect();
        let mut tc = TrainConfig::with_seed(3);
        tc.epochs_base = 8;
        tc.initial_lr = 5e-4;
        let model = pretrain_base(&corpus, &cfg, &tc).unwrap();
        let first = model.loss_curve[0];
        let last = *model.loss_curve.last().unwrap();
        assert!(last < first, "loss {first} → {last}");

        // Train accuracy on the separable-by-construction corpus.
        let net = network_from_params::<f32>(&cfg, &model.params).unwrap();
        let refs: Vec<&Instance> = corpus.iter().collect();
        let batch = to_eval_batch(&refs, &cfg.channels);
        let logits = net.forward_eval(&batch).unwrap();
        let mut correct = 0usize;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let pred = (0..4)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            let want = model
                .class_map
                .iter()
                .position(|id| {
                    matches!(&corpus[i].label, Some(InstanceLabel::Identity(x)) if x == id)
                })
                .unwrap();
            if pred == want {
                correct += 1;
            }
        }
        let acc = correct as f64 / corpus.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn grad_check_linear_head() {
        let cfg = ModelConfig::linear_head(ChannelSet::All, Head::Binary);
        let params = ParameterSet::from_network(&Network::<f32>::init(&cfg, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = Array4::from_shape_fn((4, 5, 70, 4), |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(&params, &cfg, &batch, &[0, 1, 1, 0], 100, 1).unwrap();
        assert!(err <= 1e-6, "linear-head gradient error {err}");
    }

    #[test]
    fn grad_check_detects_corruption() {
        let cfg = ModelConfig::linear_head(ChannelSet::All, Head::Binary);
        let params = ParameterSet::from_network(&Network::<f32>::init(&cfg, 4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = Array4::from_shape_fn((4, 5, 70, 4), |_| rng.gen_range(-1.0..1.0));
        let err =
            grad_check_with_corruption(&params, &cfg, &batch, &[0, 1, 1, 0], 100, 1, "fc.weight")
                .unwrap();
        assert!(err > 0.1, "corrupted gradient error only {err}");
    }
}
