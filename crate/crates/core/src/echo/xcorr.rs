//! Sliding cross-correlation between a transmit frame and a received stream,
//! and direct-path synchronization.
//!
//! `cross_correlate` computes C(n) = Σ_{m=0}^{N−1} Tx(m)·Rx(m+n) for every
//! lag, including the partially-overlapping edges (missing samples count as
//! zero). It runs as an overlap-save FFT convolution against the reversed
//! transmit frame and matches the direct double-loop sum to fine precision.

use crate::error::{Error, Result};
use crate::signal::ChirpFrame;
use num_complex::Complex64;
use rustfft::FftPlanner;

/// Correlation values over all lags. `values[zero_index + n]` is C(n); lags
/// run from −(N−1) through rx_len−1.
#[derive(Debug, Clone)]
pub struct CorrelationSeries {
    pub values: Vec<f64>,
    pub zero_index: usize,
}

impl CorrelationSeries {
    /// C(n) for a signed lag; zero outside the computed range.
    pub fn lag(&self, n: isize) -> f64 {
        let idx = self.zero_index as isize + n;
        if idx < 0 || idx as usize >= self.values.len() {
            0.0
        } else {
            self.values[idx as usize]
        }
    }

    /// Largest non-negative lag (rx_len − 1).
    pub fn max_lag(&self) -> usize {
        self.values.len() - 1 - self.zero_index
    }

    /// Number of complete `frame_len` frames on the non-negative lag side.
    pub fn frame_count(&self, frame_len: usize) -> usize {
        (self.max_lag() + 1) / frame_len
    }
}

/// Cross-correlate one transmit frame against a received stream.
pub fn cross_correlate(tx: &ChirpFrame, rx: &[f64]) -> Result<CorrelationSeries> {
    let n = tx.len();
    if n == 0 {
        return Err(Error::Config("empty transmit frame".into()));
    }
    if rx.len() < n {
        return Err(Error::Data(format!(
            "rx of {} samples is shorter than one frame ({n})",
            rx.len()
        )));
    }
    let l = rx.len();
    let out_len = l + n - 1;

    let fft_len = (4 * n).next_power_of_two().max(4096);
    let valid = fft_len - n + 1;
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    // Kernel: time-reversed transmit frame, so convolution realizes the
    // correlation sum.
    let mut kernel = vec![Complex64::new(0.0, 0.0); fft_len];
    for (i, &t) in tx.samples.iter().rev().enumerate() {
        kernel[i].re = t;
    }
    fwd.process(&mut kernel);

    let scale = 1.0 / fft_len as f64;
    let mut out = vec![0.0f64; out_len];
    let mut offset = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    while offset < out_len {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = offset as isize - (n as isize - 1);
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < l {
                slot.re = rx[idx as usize];
            }
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kernel) {
            *b *= *k;
        }
        inv.process(&mut buf);
        let take = valid.min(out_len - offset);
        for i in 0..take {
            out[offset + i] = buf[n - 1 + i].re * scale;
        }
        offset += take;
    }

    Ok(CorrelationSeries {
        values: out,
        zero_index: n - 1,
    })
}

/// Locate the direct path: the per-frame |C| argmax, then the mode of those
/// argmax rows across frames. Ties break toward the smaller offset. Fails if
/// no row repeats (mode count < 2) or fewer than 3 frames are available.
pub fn sync_direct_path(corr: &CorrelationSeries, frame_len: usize) -> Result<usize> {
    let frames = corr.frame_count(frame_len);
    if frames < 3 {
        return Err(Error::Data(format!(
            "direct-path sync needs at least 3 frames, got {frames}"
        )));
    }
    let mut counts = vec![0u32; frame_len];
    for f in 0..frames {
        let base = corr.zero_index + f * frame_len;
        let mut best = 0usize;
        let mut best_val = corr.values[base].abs();
        for r in 1..frame_len {
            let v = corr.values[base + r].abs();
            if v > best_val {
                best_val = v;
                best = r;
            }
        }
        counts[best] += 1;
    }
    let mut offset = 0usize;
    let mut best_count = 0u32;
    for (r, &c) in counts.iter().enumerate() {
        if c > best_count {
            best_count = c;
            offset = r;
        }
    }
    if best_count < 2 {
        return Err(Error::SyncFailure(
            "no stable per-frame peak; recording looks like noise".into(),
        ));
    }
    Ok(offset)
}
