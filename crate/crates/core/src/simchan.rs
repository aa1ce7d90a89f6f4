//! Synthetic multipath channel: parametric "faces" stand in for human
//! subjects so the whole pipeline can be exercised and verified at desk scale.
//!
//! A face is a small set of reflectors, each with a round-trip delay (in
//! samples), a gain, and a per-band gain pair. Received audio is the
//! direct path plus the delayed reflections of both transmit streams;
//! cross-face paths are attenuated by a fixed factor.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Gain applied to paths that cross the face from one side to the other,
/// relative to same-side paths.
pub const CROSS_FACE_GAIN: f64 = 0.5;

/// Upper bound on reflector delays, in samples.
pub const MAX_REFLECTOR_DELAY: f64 = 120.0;

/// One acoustic reflector: delay in samples (may be fractional), scalar gain,
/// and a per-band multiplier pair `[right_band, left_band]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub delay_samples: f64,
    pub gain: f64,
    pub band_tilt: [f64; 2],
}

/// Parametric reflector geometry for one synthetic identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceProfile {
    pub reflectors: Vec<Reflector>,
    pub direct_path_gain: f64,
    pub id: String,
}

impl FaceProfile {
    /// A face with no reflectors is degenerate but legal (direct path only);
    /// corpus generation always produces several reflectors.
    pub fn validate(&self) -> Result<()> {
        for r in &self.reflectors {
            if !(r.delay_samples >= 0.0 && r.delay_samples < MAX_REFLECTOR_DELAY) {
                return Err(Error::Config(format!(
                    "reflector delay {} outside [0, {MAX_REFLECTOR_DELAY})",
                    r.delay_samples
                )));
            }
            if !r.gain.is_finite() || !r.band_tilt.iter().all(|t| t.is_finite()) {
                return Err(Error::Config("reflector gains must be finite".into()));
            }
        }
        if !self.direct_path_gain.is_finite() {
            return Err(Error::Config("direct path gain must be finite".into()));
        }
        Ok(())
    }
}

/// Remounting variability: one shared delay draw, per-reflector delay noise,
/// and a shared gain rescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountJitter {
    /// Bound on the shared delay draw, in samples (|draw| ≤ delay_shift ≤ 6).
    pub delay_shift: f64,
    /// Gains are scaled by one draw from U(1−gain_scale, 1+gain_scale).
    pub gain_scale: f64,
    /// Std-dev of per-reflector delay noise, in samples.
    pub per_reflector_sigma: f64,
}

impl Default for MountJitter {
    fn default() -> Self {
        MountJitter {
            delay_shift: 1.5,
            gain_scale: 0.06,
            per_reflector_sigma: 0.15,
        }
    }
}

impl MountJitter {
    pub fn zero() -> Self {
        MountJitter {
            delay_shift: 0.0,
            gain_scale: 0.0,
            per_reflector_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay_shift.abs() <= 6.0) {
            return Err(Error::Config("delay_shift must stay within ±6 samples".into()));
        }
        if self.gain_scale < 0.0 || self.gain_scale >= 1.0 || self.per_reflector_sigma < 0.0 {
            return Err(Error::Config("invalid jitter magnitudes".into()));
        }
        Ok(())
    }
}

/// Session condition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Sitting,
    Talking,
    Standing,
    LyingDown,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Sitting => "sitting",
            Condition::Talking => "talking",
            Condition::Standing => "standing",
            Condition::LyingDown => "lying_down",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sitting" => Ok(Condition::Sitting),
            "talking" => Ok(Condition::Talking),
            "standing" => Ok(Condition::Standing),
            "lying_down" => Ok(Condition::LyingDown),
            other => Err(Error::Config(format!("unknown condition tag '{other}'"))),
        }
    }
}

/// Who/when/how a recording was captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub user_id: String,
    pub day: u16,
    pub session: u16,
    pub condition: Condition,
}

impl SessionMeta {
    pub fn new(user_id: impl Into<String>, day: u16, session: u16) -> Self {
        SessionMeta {
            user_id: user_id.into(),
            day,
            session,
            condition: Condition::Sitting,
        }
    }

    /// Globally unique session identifier string.
    pub fn session_id(&self) -> String {
        format!("{}_d{}_s{:03}", self.user_id, self.day, self.session)
    }
}

/// Two-channel capture from the left and right microphones.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub sample_rate: f64,
    pub meta: SessionMeta,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn validate(&self, frame_len: usize) -> Result<()> {
        if self.left.len() != self.right.len() {
            return Err(Error::Data(format!(
                "mic channel lengths differ: {} vs {}",
                self.left.len(),
                self.right.len()
            )));
        }
        if self.left.is_empty() || self.left.len() % frame_len != 0 {
            return Err(Error::Data(format!(
                "recording length {} is not a positive multiple of the frame size {frame_len}",
                self.left.len()
            )));
        }
        Ok(())
    }
}

/// Face presets for corpus generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaceTemplate {
    Default,
    LongHairVariant,
}

impl std::str::FromStr for FaceTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(FaceTemplate::Default),
            "long_hair_variant" => Ok(FaceTemplate::LongHairVariant),
            other => Err(Error::Config(format!("unknown face template '{other}'"))),
        }
    }
}

/// Deterministically draw a face from a seed.
///
/// Both templates consume the same random stream, so the long-hair variant of
/// a seed shares its geometry with the default variant but spreads the
/// reflector gains over a much wider range.
pub fn make_face(seed: u64, template: FaceTemplate) -> FaceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface_0000_0000_0000);
    let count = rng.gen_range(4..=8usize);
    let mut reflectors = Vec::with_capacity(count);
    for _ in 0..count {
        let delay = rng.gen_range(5.0..=55.0);
        let unit: f64 = rng.gen_range(0.0..=1.0);
        let gain = match template {
            FaceTemplate::Default => 0.12 + 0.43 * unit,
            FaceTemplate::LongHairVariant => 0.06 + 0.66 * unit,
        };
        let tilt_r = rng.gen_range(0.35..=1.65);
        let tilt_l = rng.gen_range(0.35..=1.65);
        reflectors.push(Reflector {
            delay_samples: delay,
            gain,
            band_tilt: [tilt_r, tilt_l],
        });
    }
    let direct_path_gain = rng.gen_range(0.95..=1.05);
    FaceProfile {
        reflectors,
        direct_path_gain,
        id: format!("face-{seed:016x}"),
    }
}

fn normal_draw<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        let n: f64 = StandardNormal.sample(rng);
        n * sigma
    } else {
        0.0
    }
}

/// Apply remount jitter: one shared delay draw within ±delay_shift, per
/// reflector delay noise, and a shared gain rescale. Zero jitter returns the
/// face unchanged.
pub fn remount(face: &FaceProfile, jitter: &MountJitter, seed: u64) -> FaceProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e_4d_6f_75_6e_74_00_01);
    let shared = if jitter.delay_shift > 0.0 {
        rng.gen_range(-jitter.delay_shift..=jitter.delay_shift)
    } else {
        0.0
    };
    let scale = if jitter.gain_scale > 0.0 {
        rng.gen_range(1.0 - jitter.gain_scale..=1.0 + jitter.gain_scale)
    } else {
        1.0
    };
    let reflectors = face
        .reflectors
        .iter()
        .map(|r| {
            let noise = normal_draw(&mut rng, jitter.per_reflector_sigma);
            Reflector {
                delay_samples: (r.delay_samples + shared + noise)
                    .clamp(0.0, MAX_REFLECTOR_DELAY - 1e-9),
                gain: r.gain * scale,
                band_tilt: r.band_tilt,
            }
        })
        .collect();
    FaceProfile {
        reflectors,
        direct_path_gain: face.direct_path_gain,
        id: face.id.clone(),
    }
}

/// Apply persistent day-to-day drift: permanent delay offsets plus gain and
/// band-tilt re-tilts, all scaled by `magnitude`. Magnitude 0 is the identity;
/// magnitude ≥ 1 produces changes larger than typical remount jitter.
pub fn day_drift(face: &FaceProfile, magnitude: f64, seed: u64) -> FaceProfile {
    assert!(magnitude >= 0.0, "drift magnitude must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44_61_79_44_72_69_66_74);
    let shared = normal_draw(&mut rng, 0.6 * magnitude);
    let reflectors = face
        .reflectors
        .iter()
        .map(|r| {
            let d_noise = normal_draw(&mut rng, 0.5 * magnitude);
            let g_tilt = normal_draw(&mut rng, 0.18 * magnitude).exp();
            let t_r = normal_draw(&mut rng, 0.15 * magnitude).exp();
            let t_l = normal_draw(&mut rng, 0.15 * magnitude).exp();
            Reflector {
                delay_samples: (r.delay_samples + shared + d_noise)
                    .clamp(0.0, MAX_REFLECTOR_DELAY - 1e-9),
                gain: r.gain * g_tilt,
                band_tilt: [r.band_tilt[0] * t_r, r.band_tilt[1] * t_l],
            }
        })
        .collect();
    FaceProfile {
        reflectors,
        direct_path_gain: face.direct_path_gain,
        id: face.id.clone(),
    }
}

/// Delay `x` by a possibly fractional number of samples using linear
/// interpolation, accumulating `gain ×` the result into `out`.
fn add_delayed(out: &mut [f64], x: &[f64], delay: f64, gain: f64) {
    let k = delay.floor() as usize;
    let frac = delay - delay.floor();
    let w0 = gain * (1.0 - frac);
    let w1 = gain * frac;
    for i in k..out.len() {
        out[i] += w0 * x[i - k];
    }
    if w1 != 0.0 {
        for i in (k + 1)..out.len() {
            out[i] += w1 * x[i - k - 1];
        }
    }
}

/// Noiseless channel math: the exact (f64) left and right microphone signals
/// for a face. Each microphone hears the direct path and the reflections of
/// its own side's transmit stream, plus the cross-face contribution of the
/// opposite stream attenuated by [`CROSS_FACE_GAIN`]. `band_tilt[0]` applies
/// to reflections of the right-band stream, `band_tilt[1]` to the left-band
/// stream.
pub fn face_channel_response(
    tx_left: &[f64],
    tx_right: &[f64],
    face: &FaceProfile,
) -> Result<(Vec<f64>, Vec<f64>)> {
    face.validate()?;
    if tx_left.len() != tx_right.len() || tx_left.is_empty() {
        return Err(Error::Data("transmit streams must be equal nonzero length".into()));
    }
    let n = tx_left.len();

    // Response of one source stream as heard through the face.
    let respond = |tx: &[f64], band: usize| -> Vec<f64> {
        let mut out = vec![0.0f64; n];
        for i in 0..n {
            out[i] = face.direct_path_gain * tx[i];
        }
        for r in &face.reflectors {
            add_delayed(&mut out, tx, r.delay_samples, r.gain * r.band_tilt[band]);
        }
        out
    };
    let right_resp = respond(tx_right, 0);
    let left_resp = respond(tx_left, 1);

    let mut mic_right = vec![0.0f64; n];
    let mut mic_left = vec![0.0f64; n];
    for i in 0..n {
        mic_right[i] = right_resp[i] + CROSS_FACE_GAIN * left_resp[i];
        mic_left[i] = left_resp[i] + CROSS_FACE_GAIN * right_resp[i];
    }
    Ok((mic_left, mic_right))
}

/// Synthesize the two microphone channels for a face (see
/// [`face_channel_response`]), add white Gaussian noise at `noise_snr_db`
/// relative to the clean channel power (`None` disables noise), and quantize
/// to the 32-bit capture format.
pub fn simulate_rx(
    tx_left: &[f64],
    tx_right: &[f64],
    face: &FaceProfile,
    noise_snr_db: Option<f64>,
    seed: u64,
    meta: SessionMeta,
) -> Result<Recording> {
    if let Some(snr) = noise_snr_db {
        if !snr.is_finite() {
            return Err(Error::Config("noise SNR must be finite".into()));
        }
    }
    let (mut mic_left, mut mic_right) = face_channel_response(tx_left, tx_right, face)?;

    if let Some(snr) = noise_snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x52_78_4e_6f_69_73_65_00);
        let mut add_noise = |ch: &mut [f64]| {
            let power = ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64;
            let sigma = power.sqrt() * 10f64.powf(-snr / 20.0);
            if sigma > 0.0 {
                let dist = Normal::new(0.0, sigma).expect("valid sigma");
                for v in ch.iter_mut() {
                    *v += dist.sample(&mut rng);
                }
            }
        };
        add_noise(&mut mic_left);
        add_noise(&mut mic_right);
    }

    Ok(Recording {
        left: mic_left.iter().map(|&v| v as f32).collect(),
        right: mic_right.iter().map(|&v| v as f32).collect(),
        sample_rate: crate::signal::SAMPLE_RATE,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{tx_stream, SweepConfig};

    fn meta() -> SessionMeta {
        SessionMeta::new("u00", 1, 0)
    }

    #[test]
    fn make_face_is_deterministic() {
        let a = make_face(7, FaceTemplate::Default);
        let b = make_face(7, FaceTemplate::Default);
        assert_eq!(a, b);
    }

    #[test]
    fn face_counts_and_ranges() {
        for seed in 0..50 {
            let f = make_face(seed, FaceTemplate::Default);
            assert!((4..=8).contains(&f.reflectors.len()));
            for r in &f.reflectors {
                assert!((5.0..=55.0).contains(&r.delay_samples));
                assert!(r.gain > 0.0);
            }
            f.validate().unwrap();
        }
    }

    #[test]
    fn long_hair_variant_spreads_gains() {
        for seed in [1u64, 9, 23, 77] {
            let base = make_face(seed, FaceTemplate::Default);
            let hair = make_face(seed, FaceTemplate::LongHairVariant);
            let var = |f: &FaceProfile| {
                let m = f.reflectors.iter().map(|r| r.gain).sum::<f64>() / f.reflectors.len() as f64;
                f.reflectors
                    .iter()
                    .map(|r| (r.gain - m).powi(2))
                    .sum::<f64>()
                    / f.reflectors.len() as f64
            };
            assert_eq!(base.reflectors.len(), hair.reflectors.len());
            assert!(var(&hair) > var(&base));
        }
    }

    #[test]
    fn remount_zero_jitter_is_identity() {
        let face = make_face(3, FaceTemplate::Default);
        let out = remount(&face, &MountJitter::zero(), 99);
        assert_eq!(face, out);
    }

    #[test]
    fn remount_is_deterministic() {
        let face = make_face(3, FaceTemplate::Default);
        let j = MountJitter::default();
        assert_eq!(remount(&face, &j, 5), remount(&face, &j, 5));
    }

    #[test]
    fn remount_shared_shift_bounded() {
        let face = make_face(11, FaceTemplate::Default);
        let j = MountJitter {
            delay_shift: 3.0,
            gain_scale: 0.0,
            per_reflector_sigma: 0.0,
        };
        for seed in 0..20 {
            let out = remount(&face, &j, seed);
            for (a, b) in face.reflectors.iter().zip(&out.reflectors) {
                assert!((a.delay_samples - b.delay_samples).abs() <= 3.0 + 1e-12);
            }
        }
    }

    #[test]
    fn day_drift_zero_is_identity() {
        let face = make_face(5, FaceTemplate::Default);
        assert_eq!(day_drift(&face, 0.0, 42), face);
    }

    #[test]
    fn day_drift_deterministic() {
        let face = make_face(5, FaceTemplate::Default);
        assert_eq!(day_drift(&face, 1.5, 42), day_drift(&face, 1.5, 42));
    }

    #[test]
    fn simulate_rejects_nonfinite_snr() {
        let face = make_face(1, FaceTemplate::Default);
        let tx = tx_stream(&SweepConfig::right_band(), 3).unwrap();
        let err = simulate_rx(&tx, &tx, &face, Some(f64::NAN), 0, meta());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_reflector_face_passes_direct_path_only() {
        let face = FaceProfile {
            reflectors: vec![],
            direct_path_gain: 1.0,
            id: "direct".into(),
        };
        let tx_r = tx_stream(&SweepConfig::right_band(), 2).unwrap();
        let tx_l = tx_stream(&SweepConfig::left_band(), 2).unwrap();
        let rec = simulate_rx(&tx_l, &tx_r, &face, None, 0, meta()).unwrap();
        for (i, &v) in rec.right.iter().enumerate() {
            let expect = (tx_r[i] + CROSS_FACE_GAIN * tx_l[i]) as f32;
            assert!((v - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn channel_is_linear_in_gains() {
        let tx_r = tx_stream(&SweepConfig::right_band(), 2).unwrap();
        let tx_l = tx_stream(&SweepConfig::left_band(), 2).unwrap();
        let mk = |g: f64| FaceProfile {
            reflectors: vec![Reflector {
                delay_samples: 20.5,
                gain: g,
                band_tilt: [1.1, 0.9],
            }],
            direct_path_gain: 0.0,
            id: "lin".into(),
        };
        let (a, _) = face_channel_response(&tx_l, &tx_r, &mk(0.3)).unwrap();
        let (b, _) = face_channel_response(&tx_l, &tx_r, &mk(0.5)).unwrap();
        let (ab, _) = face_channel_response(&tx_l, &tx_r, &mk(0.8)).unwrap();
        for i in 0..a.len() {
            let sum = a[i] + b[i];
            assert!((sum - ab[i]).abs() <= 1e-9 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn simulation_is_deterministic_with_noise() {
        let face = make_face(2, FaceTemplate::Default);
        let tx_r = tx_stream(&SweepConfig::right_band(), 4).unwrap();
        let tx_l = tx_stream(&SweepConfig::left_band(), 4).unwrap();
        let a = simulate_rx(&tx_l, &tx_r, &face, Some(20.0), 77, meta()).unwrap();
        let b = simulate_rx(&tx_l, &tx_r, &face, Some(20.0), 77, meta()).unwrap();
        assert_eq!(a, b);
    }
}
