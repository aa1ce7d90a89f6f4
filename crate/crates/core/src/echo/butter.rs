//! Butterworth band-pass design and zero-phase filtering.
//!
//! Design follows the usual analog-prototype route: Butterworth poles,
//! low-pass → band-pass transform at the prewarped edges, bilinear transform,
//! then second-order sections. Band-pass sections all carry the zero pair
//! {+1, −1}, so pairing reduces to sorting the pole pairs.

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Band-pass filter request. `order` is the analog prototype order, so the
/// digital filter has 2×order poles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPassSpec {
    pub low_cut: f64,
    pub high_cut: f64,
    pub order: usize,
}

impl BandPassSpec {
    pub fn new(low_cut: f64, high_cut: f64) -> Self {
        BandPassSpec {
            low_cut,
            high_cut,
            order: 4,
        }
    }

    /// 18–21 kHz band (right-side speaker).
    pub fn right_band() -> Self {
        Self::new(crate::signal::RIGHT_BAND.0, crate::signal::RIGHT_BAND.1)
    }

    /// 21.5–24.5 kHz band (left-side speaker).
    pub fn left_band() -> Self {
        Self::new(crate::signal::LEFT_BAND.0, crate::signal::LEFT_BAND.1)
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("filter order must be positive".into()));
        }
        if !(self.low_cut > 0.0 && self.low_cut < self.high_cut) {
            return Err(Error::Config("band edges must satisfy 0 < low < high".into()));
        }
        if self.high_cut >= sample_rate / 2.0 {
            return Err(Error::Config(format!(
                "high cut {} must stay below Nyquist {}",
                self.high_cut,
                sample_rate / 2.0
            )));
        }
        Ok(())
    }
}

/// One biquad in direct form II transposed; a0 normalized to 1.
#[derive(Debug, Clone)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Steady-state DF2T state for a unit-step input.
    fn step_state(&self) -> [f64; 2] {
        let h = self.dc_gain();
        let s2 = self.b[2] - self.a[1] * h;
        let s1 = self.b[1] - self.a[0] * h + s2;
        [s1, s2]
    }
}

/// Cascaded second-order sections.
#[derive(Debug, Clone)]
pub struct SosFilter {
    sections: Vec<Biquad>,
}

impl SosFilter {
    pub fn num_sections(&self) -> usize {
        self.sections.len()
    }

    /// Complex frequency response at `freq` Hz.
    pub fn response(&self, freq: f64, sample_rate: f64) -> Complex64 {
        let w = 2.0 * PI * freq / sample_rate;
        let z1 = Complex64::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        let mut h = Complex64::new(1.0, 0.0);
        for s in &self.sections {
            let num = s.b[0] + s.b[1] * z1 + s.b[2] * z2;
            let den = 1.0 + s.a[0] * z1 + s.a[1] * z2;
            h *= num / den;
        }
        h
    }

    /// Single-direction pass. Each section starts in its steady state for a
    /// step of the first sample it actually sees, i.e. the original first
    /// sample scaled by the DC gain of the preceding sections.
    fn filter_once(&self, x: &mut [f64]) {
        let mut scale = x[0];
        for s in &self.sections {
            let zi = s.step_state();
            let mut s1 = zi[0] * scale;
            let mut s2 = zi[1] * scale;
            scale *= s.dc_gain();
            for v in x.iter_mut() {
                let input = *v;
                let y = s.b[0] * input + s1;
                s1 = s.b[1] * input - s.a[0] * y + s2;
                s2 = s.b[2] * input - s.a[1] * y;
                *v = y;
            }
        }
    }
}

/// Design a digital Butterworth band-pass filter.
pub fn design_bandpass(spec: &BandPassSpec, sample_rate: f64) -> Result<SosFilter> {
    spec.validate(sample_rate)?;
    let order = spec.order;

    // Analog prototype poles on the unit circle, left half-plane.
    let mut proto: Vec<Complex64> = Vec::with_capacity(order);
    let mut m = -(order as i64) + 1;
    while m < order as i64 {
        let theta = PI * m as f64 / (2.0 * order as f64);
        proto.push(-(Complex64::new(0.0, theta).exp()));
        m += 2;
    }

    // Prewarped edges (internal fs = 2 convention).
    let fs2 = 2.0;
    let warp = |f: f64| 2.0 * fs2 * (PI * (2.0 * f / sample_rate) / fs2).tan();
    let w1 = warp(spec.low_cut);
    let w2 = warp(spec.high_cut);
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    // Low-pass → band-pass: each prototype pole splits into a pair.
    let mut poles: Vec<Complex64> = Vec::with_capacity(2 * order);
    for p in &proto {
        let scaled = p * (bw / 2.0);
        let disc = (scaled * scaled - Complex64::new(w0 * w0, 0.0)).sqrt();
        poles.push(scaled + disc);
        poles.push(scaled - disc);
    }
    // `order` zeros at the origin; gain k = bw^order (prototype k = 1).
    let mut k = bw.powi(order as i32);

    // Bilinear transform. Analog zeros at origin → digital zeros at +1; the
    // `order` zeros at infinity map to −1.
    let fs2x2 = 2.0 * fs2;
    let mut num = Complex64::new(1.0, 0.0);
    let mut den = Complex64::new(1.0, 0.0);
    for _ in 0..order {
        num *= Complex64::new(fs2x2, 0.0); // (fs2x2 - 0)
    }
    let mut zpoles: Vec<Complex64> = Vec::with_capacity(poles.len());
    for p in &poles {
        den *= fs2x2 - p;
        zpoles.push((fs2x2 + p) / (fs2x2 - p));
    }
    k *= (num / den).re;

    // Group digital poles into conjugate pairs.
    let mut upper: Vec<Complex64> = zpoles.iter().copied().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(Error::Config("band-pass pole pairing failed".into()));
    }
    upper.sort_by(|a, b| {
        a.norm()
            .partial_cmp(&b.norm())
            .unwrap()
            .then(a.re.partial_cmp(&b.re).unwrap())
    });

    // Every section gets the zero pair {+1, −1}: b = g·[1, 0, −1].
    let gain_per_section = if k >= 0.0 {
        k.powf(1.0 / order as f64)
    } else {
        return Err(Error::Config("unexpected negative band-pass gain".into()));
    };
    let sections = upper
        .iter()
        .map(|p| Biquad {
            b: [gain_per_section, 0.0, -gain_per_section],
            a: [-2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    Ok(SosFilter { sections })
}

/// Zero-phase filtering: forward pass, backward pass, with odd extension at
/// both ends so edge transients settle outside the kept region.
pub fn filtfilt(filter: &SosFilter, x: &[f64]) -> Result<Vec<f64>> {
    let padlen = 3 * (2 * filter.num_sections() + 1);
    if x.len() <= padlen {
        return Err(Error::Data(format!(
            "signal of {} samples is shorter than the filter warm-up ({})",
            x.len(),
            padlen + 1
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    let first = x[0];
    let last = x[n - 1];
    for i in (1..=padlen).rev() {
        ext.push(2.0 * first - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (n - padlen - 1..n - 1).rev() {
        ext.push(2.0 * last - x[i]);
    }

    filter.filter_once(&mut ext);
    ext.reverse();
    filter.filter_once(&mut ext);
    ext.reverse();

    Ok(ext[padlen..padlen + n].to_vec())
}

/// Convenience: design the filter for `spec` and run [`filtfilt`].
pub fn bandpass(signal: &[f64], spec: &BandPassSpec, sample_rate: f64) -> Result<Vec<f64>> {
    let f = design_bandpass(spec, sample_rate)?;
    filtfilt(&f, signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SAMPLE_RATE;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn tone(freq: f64, secs: f64) -> Vec<f64> {
        let n = (secs * SAMPLE_RATE) as usize;
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE).sin())
            .collect()
    }

    #[test]
    fn stopband_tone_attenuated_40db() {
        let x = tone(10_000.0, 0.5);
        let y = bandpass(&x, &BandPassSpec::right_band(), SAMPLE_RATE).unwrap();
        let ratio_db = 20.0 * (rms(&y) / rms(&x)).log10();
        assert!(ratio_db <= -40.0, "stopband attenuation only {ratio_db} dB");
    }

    #[test]
    fn passband_tone_preserved() {
        let x = tone(19_500.0, 0.5);
        let y = bandpass(&x, &BandPassSpec::right_band(), SAMPLE_RATE).unwrap();
        let ratio_db = 20.0 * (rms(&y) / rms(&x)).log10();
        assert!(ratio_db.abs() <= 3.0, "passband deviation {ratio_db} dB");
    }

    #[test]
    fn dc_input_removed() {
        let x = vec![1.0; 4000];
        let y = bandpass(&x, &BandPassSpec::right_band(), SAMPLE_RATE).unwrap();
        let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-6, "dc leak {max}");
    }

    #[test]
    fn band_edges_sit_near_3db() {
        let f = design_bandpass(&BandPassSpec::right_band(), SAMPLE_RATE).unwrap();
        for edge in [18_000.0, 21_000.0] {
            let h = f.response(edge, SAMPLE_RATE).norm();
            assert!(
                (h - 1.0 / 2.0f64.sqrt()).abs() < 0.02,
                "edge gain {h} at {edge}"
            );
        }
        let mid = f.response(19_500.0, SAMPLE_RATE).norm();
        assert!((mid - 1.0).abs() < 0.01, "midband gain {mid}");
    }

    #[test]
    fn invalid_band_rejected() {
        let spec = BandPassSpec::new(18_000.0, 26_000.0);
        assert!(matches!(
            design_bandpass(&spec, SAMPLE_RATE),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_signal_rejected() {
        let spec = BandPassSpec::right_band();
        let x = vec![0.0; 10];
        assert!(matches!(bandpass(&x, &spec, SAMPLE_RATE), Err(Error::Data(_))));
    }

    #[test]
    fn output_length_matches_input() {
        let x = tone(19_000.0, 0.01);
        let y = bandpass(&x, &BandPassSpec::right_band(), SAMPLE_RATE).unwrap();
        assert_eq!(y.len(), x.len());
    }
}
