//! Instance extraction and augmentation.
//!
//! A session's echo profile is cut into non-overlapping 5-frame blocks
//! (0.06 s each); the blocks with the smallest frame-to-frame energy change
//! are the "static" instances used for training and authentication.
//! Instances keep the wide 110-row crop so training-time vertical shifts
//! always fit; the evaluation window is the 70 rows −15…54.

use crate::echo::{EchoProfile, EVAL_OFFSET, EVAL_ROWS};
use crate::error::{Error, Result};
use crate::simchan::SessionMeta;
use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How instances are segmented and selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Frames per instance (5 frames = 0.06 s).
    pub instance_frames: usize,
    /// Static instances kept per session.
    pub instances_per_session: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            instance_frames: 5,
            instances_per_session: 10,
        }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.instance_frames == 0 || self.instances_per_session == 0 {
            return Err(Error::Config("selection policy counts must be positive".into()));
        }
        Ok(())
    }
}

/// Class label attached to an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InstanceLabel {
    Identity(String),
    Binary(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub session: SessionMeta,
    /// Block index inside the session; used as the selection tie-break.
    pub position: usize,
}

/// One instance: channels × frames × stored rows (wide crop).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub values: Array3<f32>,
    pub label: Option<InstanceLabel>,
    pub meta: InstanceMeta,
}

impl Instance {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// The raw evaluation window (rows −15…54), without normalization.
    pub fn eval_window(&self) -> Array3<f32> {
        self.values
            .slice(ndarray::s![.., .., EVAL_OFFSET..EVAL_OFFSET + EVAL_ROWS])
            .to_owned()
    }
}

/// Correlation counts scale with the matched-filter gain N·A²/2 (≈192 for
/// the standard sweep). Instances are divided by this nominal gain so the
/// raw and z-scored augmentation branches share one dynamic range.
pub const INSTANCE_SCALE: f32 = (crate::signal::SAMPLES_PER_SWEEP as f32)
    * (crate::signal::DEFAULT_AMPLITUDE as f32)
    * (crate::signal::DEFAULT_AMPLITUDE as f32)
    / 2.0;

/// Cut a profile into consecutive non-overlapping blocks of
/// `policy.instance_frames` frames; remainder frames are dropped. Values are
/// rescaled by [`INSTANCE_SCALE`]; the profile itself stays raw.
pub fn segment(profile: &EchoProfile, policy: &SelectionPolicy) -> Result<Vec<Instance>> {
    policy.validate()?;
    let frames = profile.frames();
    if frames < policy.instance_frames {
        return Err(Error::Data(format!(
            "profile of {frames} frames is shorter than one instance ({})",
            policy.instance_frames
        )));
    }
    let count = frames / policy.instance_frames;
    let mut out = Vec::with_capacity(count);
    for b in 0..count {
        let lo = b * policy.instance_frames;
        let hi = lo + policy.instance_frames;
        let mut values = profile.values.slice(ndarray::s![.., lo..hi, ..]).to_owned();
        values.mapv_inplace(|v| v / INSTANCE_SCALE);
        out.push(Instance {
            values,
            label: None,
            meta: InstanceMeta {
                session: profile.meta.clone(),
                position: b,
            },
        });
    }
    Ok(out)
}

/// Frame-to-frame energy change over the evaluation window:
/// Σ over channels and rows of Σ_{f≥1} (v[f] − v[f−1])².
pub fn motion_score(inst: &Instance) -> f64 {
    let w = inst
        .values
        .slice(ndarray::s![.., .., EVAL_OFFSET..EVAL_OFFSET + EVAL_ROWS]);
    let mut acc = 0.0f64;
    for f in 1..inst.frames() {
        let cur = w.index_axis(Axis(1), f);
        let prev = w.index_axis(Axis(1), f - 1);
        for (a, b) in cur.iter().zip(prev.iter()) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
    }
    acc
}

/// Keep the `k` instances with the smallest motion score; ties break toward
/// the earlier session position. Returns min(k, available) instances, in
/// score order. The result does not depend on the input ordering.
pub fn select_static(mut instances: Vec<Instance>, k: usize) -> Vec<Instance> {
    let mut scored: Vec<(f64, usize, usize)> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (motion_score(inst), inst.meta.position, i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    // Extract in selection order without cloning tensor payloads.
    let mut picked: Vec<Option<Instance>> = instances.drain(..).map(Some).collect();
    scored
        .into_iter()
        .map(|(_, _, i)| picked[i].take().expect("unique index"))
        .collect()
}

/// Deterministic core of the training-time augmentation. `start_row` selects
/// 70 consecutive stored rows; `noise` multiplies every element by its own
/// factor; `zscore` normalizes the instance to zero mean, unit variance
/// (skipped when the spread is degenerate).
pub fn augment_with(
    values: &ArrayView3<f32>,
    start_row: usize,
    noise: Option<&[f32]>,
    zscore: bool,
) -> Array3<f32> {
    assert!(start_row + EVAL_ROWS <= values.shape()[2], "crop out of range");
    let mut out = values
        .slice(ndarray::s![.., .., start_row..start_row + EVAL_ROWS])
        .to_owned();
    if let Some(factors) = noise {
        assert_eq!(factors.len(), out.len(), "one factor per element");
        for (v, f) in out.iter_mut().zip(factors) {
            *v *= *f;
        }
    }
    if zscore {
        zscore_in_place(&mut out);
    }
    out
}

/// Training-time augmentation: uniform vertical shift over the stored rows,
/// per-element noise factors in [0.9, 1.1] with probability 0.8, and z-score
/// normalization with probability 0.5.
pub fn augment<R: Rng>(inst: &Instance, rng: &mut R) -> Array3<f32> {
    augment_view(&inst.values.view(), rng)
}

/// [`augment`] over a raw (possibly channel-sliced) stored tensor.
pub fn augment_view<R: Rng>(values: &ArrayView3<f32>, rng: &mut R) -> Array3<f32> {
    let max_start = values.shape()[2] - EVAL_ROWS;
    let start = rng.gen_range(0..=max_start);
    let noise = if rng.gen_bool(0.8) {
        Some(
            (0..values.shape()[0] * values.shape()[1] * EVAL_ROWS)
                .map(|_| rng.gen_range(0.9f32..=1.1f32))
                .collect::<Vec<f32>>(),
        )
    } else {
        None
    };
    let zscore = rng.gen_bool(0.5);
    augment_with(values, start, noise.as_deref(), zscore)
}

/// Evaluation-time input: fixed window, no noise, always z-scored.
pub fn evaluation_input(values: &ArrayView3<f32>) -> Array3<f32> {
    augment_with(values, EVAL_OFFSET, None, true)
}

/// Z-score over all elements; skipped when the standard deviation is zero.
pub fn zscore_in_place(values: &mut Array3<f32>) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return;
    }
    let inv = 1.0 / var.sqrt();
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) * inv) as f32;
    }
}
