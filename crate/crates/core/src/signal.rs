//! FMCW transmit-signal generation.
//!
//! Two speakers emit linear sweeps in disjoint ultrasonic bands
//! (right side 18–21 kHz, left side 21.5–24.5 kHz) so the receive chain can
//! separate them with band-pass filters. Sweeps repeat back to back with no
//! gap; both standard bands complete an integer number of carrier cycles per
//! frame, so the repeated stream is phase-continuous.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// System sampling rate in Hz.
pub const SAMPLE_RATE: f64 = 50_000.0;
/// Sweep duration in seconds.
pub const SWEEP_DURATION: f64 = 0.012;
/// Samples per sweep frame at the default rate/duration.
pub const SAMPLES_PER_SWEEP: usize = 600;
/// Default transmit amplitude; leaves headroom in the simulated channel.
pub const DEFAULT_AMPLITUDE: f64 = 0.8;

/// Right-side sweep band in Hz.
pub const RIGHT_BAND: (f64, f64) = (18_000.0, 21_000.0);
/// Left-side sweep band in Hz.
pub const LEFT_BAND: (f64, f64) = (21_500.0, 24_500.0);

/// Parameters of one linear frequency sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub f_lo: f64,
    pub f_hi: f64,
    pub sweep_duration: f64,
    pub sample_rate: f64,
    pub amplitude: f64,
}

impl SweepConfig {
    pub fn new(f_lo: f64, f_hi: f64) -> Self {
        SweepConfig {
            f_lo,
            f_hi,
            sweep_duration: SWEEP_DURATION,
            sample_rate: SAMPLE_RATE,
            amplitude: DEFAULT_AMPLITUDE,
        }
    }

    /// 18–21 kHz preset (right-side speaker).
    pub fn right_band() -> Self {
        Self::new(RIGHT_BAND.0, RIGHT_BAND.1)
    }

    /// 21.5–24.5 kHz preset (left-side speaker).
    pub fn left_band() -> Self {
        Self::new(LEFT_BAND.0, LEFT_BAND.1)
    }

    /// Frame length N = round(sample_rate × sweep_duration).
    pub fn samples_per_sweep(&self) -> usize {
        (self.sample_rate * self.sweep_duration).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_lo.is_finite() && self.f_hi.is_finite()) {
            return Err(Error::Config("sweep frequencies must be finite".into()));
        }
        if self.f_lo >= self.f_hi {
            return Err(Error::Config(format!(
                "f_lo ({}) must be below f_hi ({})",
                self.f_lo, self.f_hi
            )));
        }
        if self.f_lo <= 0.0 {
            return Err(Error::Config("f_lo must be positive".into()));
        }
        if self.f_hi >= self.sample_rate / 2.0 {
            return Err(Error::Config(format!(
                "f_hi ({}) must stay below the Nyquist frequency ({})",
                self.f_hi,
                self.sample_rate / 2.0
            )));
        }
        if self.sweep_duration <= 0.0 || self.sample_rate <= 0.0 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::Config("amplitude must lie in (0, 1]".into()));
        }
        if self.samples_per_sweep() < 2 {
            return Err(Error::Config("sweep too short for the sample rate".into()));
        }
        Ok(())
    }
}

/// One generated sweep frame.
#[derive(Debug, Clone)]
pub struct ChirpFrame {
    pub samples: Vec<f64>,
    pub config: SweepConfig,
}

impl ChirpFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate one linear sweep frame.
///
/// Uses the closed form s[n] = A·sin(2π·(f_lo·n/fs + (f_hi−f_lo)·n²/(2·N·fs))),
/// which starts at zero phase and whose instantaneous frequency rises linearly
/// from f_lo at n = 0 to f_hi at n = N.
pub fn generate_chirp(cfg: &SweepConfig) -> Result<ChirpFrame> {
    cfg.validate()?;
    let n = cfg.samples_per_sweep();
    let fs = cfg.sample_rate;
    let rate = (cfg.f_hi - cfg.f_lo) / (2.0 * n as f64 * fs);
    let samples = (0..n)
        .map(|i| {
            let i = i as f64;
            let phase = 2.0 * PI * (cfg.f_lo * i / fs + rate * i * i);
            cfg.amplitude * phase.sin()
        })
        .collect();
    Ok(ChirpFrame {
        samples,
        config: cfg.clone(),
    })
}

/// Concatenate `frame_count` identical sweep frames into one transmit stream.
pub fn tx_stream(cfg: &SweepConfig, frame_count: usize) -> Result<Vec<f64>> {
    if frame_count == 0 {
        return Err(Error::Config("transmit stream needs at least one frame".into()));
    }
    let frame = generate_chirp(cfg)?;
    let mut out = Vec::with_capacity(frame.len() * frame_count);
    for _ in 0..frame_count {
        out.extend_from_slice(&frame.samples);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rustfft::FftPlanner;

    /// Spectrum-based estimate of instantaneous frequency: short Hann-windowed
    /// DFTs at several centers, parabolic peak interpolation, then a least
    /// squares line over (center, frequency) evaluated at the frame edges.
    fn fitted_edge_freqs(samples: &[f64], fs: f64) -> (f64, f64) {
        let win = 150usize;
        let hop = 25usize;
        let pad = 4096usize;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(pad);
        let mut points = Vec::new();
        let mut start = 0usize;
        while start + win <= samples.len() {
            let mut buf = vec![Complex64::new(0.0, 0.0); pad];
            for i in 0..win {
                let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (win - 1) as f64).cos();
                buf[i] = Complex64::new(samples[start + i] * w, 0.0);
            }
            fft.process(&mut buf);
            let half = pad / 2;
            let mags: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
            let mut peak = 1usize;
            for (i, m) in mags.iter().enumerate().skip(1).take(half - 2) {
                if *m > mags[peak] {
                    peak = i;
                }
            }
            // Parabolic interpolation around the peak bin.
            let (a, b, c) = (mags[peak - 1].ln(), mags[peak].ln(), mags[peak + 1].ln());
            let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
            let freq = (peak as f64 + delta) * fs / pad as f64;
            points.push((start as f64 + (win - 1) as f64 / 2.0, freq));
            start += hop;
        }
        // Least squares line freq = m*center + q.
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let m = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let q = (sy - m * sx) / n;
        let last = (samples.len() - 1) as f64;
        (q, m * last + q)
    }

    /// Fraction of spectral energy inside [lo, hi].
    fn band_energy_fraction(samples: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        let n = samples.len().next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex64> = samples
            .iter()
            .map(|&s| Complex64::new(s, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(n)
            .collect();
        fft.process(&mut buf);
        let mut total = 0.0;
        let mut in_band = 0.0;
        for (i, c) in buf.iter().enumerate().take(n / 2 + 1) {
            let f = i as f64 * fs / n as f64;
            let e = c.norm_sqr();
            total += e;
            if f >= lo && f <= hi {
                in_band += e;
            }
        }
        in_band / total
    }

    #[test]
    fn frame_has_600_samples() {
        let frame = generate_chirp(&SweepConfig::right_band()).unwrap();
        assert_eq!(frame.len(), 600);
        assert_eq!(SweepConfig::right_band().samples_per_sweep(), SAMPLES_PER_SWEEP);
    }

    #[test]
    fn initial_phase_is_zero() {
        for cfg in [SweepConfig::right_band(), SweepConfig::left_band()] {
            let frame = generate_chirp(&cfg).unwrap();
            assert_eq!(frame.samples[0], 0.0);
        }
    }

    #[test]
    fn amplitude_bounds_hold() {
        let frame = generate_chirp(&SweepConfig::right_band()).unwrap();
        let max = frame.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!(max <= DEFAULT_AMPLITUDE + 1e-12);
        assert!(max > 0.5 * DEFAULT_AMPLITUDE);
    }

    #[test]
    fn instantaneous_frequency_sweeps_lo_to_hi() {
        let cfg = SweepConfig::right_band();
        let frame = generate_chirp(&cfg).unwrap();
        let (f_start, f_end) = fitted_edge_freqs(&frame.samples, cfg.sample_rate);
        assert!(
            (f_start - cfg.f_lo).abs() <= 100.0,
            "start frequency {f_start} off from {}",
            cfg.f_lo
        );
        assert!(
            (f_end - cfg.f_hi).abs() <= 100.0,
            "end frequency {f_end} off from {}",
            cfg.f_hi
        );
    }

    #[test]
    fn nyquist_violation_rejected() {
        let cfg = SweepConfig::new(18_000.0, 26_000.0);
        assert!(matches!(generate_chirp(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn stream_concatenates_frames() {
        let cfg = SweepConfig::right_band();
        let stream = tx_stream(&cfg, 5).unwrap();
        assert_eq!(stream.len(), 3000);
    }

    #[test]
    fn stream_is_periodic() {
        let cfg = SweepConfig::left_band();
        let stream = tx_stream(&cfg, 3).unwrap();
        let n = cfg.samples_per_sweep();
        for i in 0..stream.len() - n {
            assert_eq!(stream[i], stream[i + n]);
        }
    }

    #[test]
    fn empty_stream_rejected() {
        assert!(matches!(
            tx_stream(&SweepConfig::right_band(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stream_energy_stays_in_band() {
        for cfg in [SweepConfig::right_band(), SweepConfig::left_band()] {
            let stream = tx_stream(&cfg, 20).unwrap();
            let frac =
                band_energy_fraction(&stream, cfg.sample_rate, cfg.f_lo - 250.0, cfg.f_hi + 250.0);
            assert!(frac >= 0.95, "in-band fraction {frac} for {:?}", (cfg.f_lo, cfg.f_hi));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SweepConfig::right_band();
        let a = generate_chirp(&cfg).unwrap();
        let b = generate_chirp(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
