//! Echo-profile construction: band-pass filtering, cross-correlation,
//! direct-path alignment, reshape by the sweep length, and vertical crop.
//!
//! A profile is stored with a wide 110-row crop (rows −35…74 relative to the
//! direct path) so training-time vertical shifts always have room; evaluation
//! uses the 70-row window −15…54.

mod butter;
mod xcorr;

pub use butter::{bandpass, design_bandpass, filtfilt, BandPassSpec, SosFilter};
pub use xcorr::{cross_correlate, sync_direct_path, CorrelationSeries};

use crate::error::{Error, Result};
use crate::signal::ChirpFrame;
use crate::simchan::{Recording, SessionMeta};
use ndarray::Array3;
use rayon::prelude::*;

/// Speed of sound used for row → distance conversion, m/s.
pub const SOUND_SPEED_M_PER_S: f64 = 340.0;

/// First stored row, relative to the direct path.
pub const WIDE_CROP_LO: i32 = -35;
/// Last stored row (inclusive), relative to the direct path.
pub const WIDE_CROP_HI: i32 = 74;
/// Stored rows per frame.
pub const WIDE_ROWS: usize = 110;

/// First row of the evaluation window, relative to the direct path.
pub const EVAL_CROP_LO: i32 = -15;
/// Last row of the evaluation window (inclusive).
pub const EVAL_CROP_HI: i32 = 54;
/// Rows in the evaluation window.
pub const EVAL_ROWS: usize = 70;

/// Offset of the evaluation window inside the stored rows.
pub const EVAL_OFFSET: usize = (EVAL_CROP_LO - WIDE_CROP_LO) as usize;

/// Number of (microphone, band) channels.
pub const CHANNELS: usize = 4;

/// Fixed channel ordering: right-mic×right-band, right-mic×left-band,
/// left-mic×right-band, left-mic×left-band.
pub const CHANNEL_LABELS: [&str; CHANNELS] = [
    "right_mic.right_band",
    "right_mic.left_band",
    "left_mic.right_band",
    "left_mic.left_band",
];

/// One session's echo profile: channels × frames × stored rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoProfile {
    pub values: Array3<f32>,
    /// Relative row of stored index 0 (always [`WIDE_CROP_LO`]).
    pub row_offset: i32,
    pub meta: SessionMeta,
}

impl EchoProfile {
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// One-way range, in meters, for a round-trip delay of `row` samples.
pub fn row_to_range_m(row: f64, sample_rate: f64) -> f64 {
    (row * SOUND_SPEED_M_PER_S) / (sample_rate * 2.0)
}

/// Build the four-channel echo profile for a recording.
///
/// For each (microphone, band) pair: band-pass filter the microphone signal,
/// correlate against that band's transmit frame, align rows to the direct
/// path found by [`sync_direct_path`], reshape by the sweep length, and keep
/// rows −35…74.
pub fn build_echo_profile(
    rec: &Recording,
    specs: &[BandPassSpec; 2],
    tx: &[ChirpFrame; 2],
) -> Result<EchoProfile> {
    let frame_len = tx[0].len();
    if tx[1].len() != frame_len || frame_len == 0 {
        return Err(Error::Config("transmit frames must share one length".into()));
    }
    rec.validate(frame_len)?;
    let total_frames = rec.len() / frame_len;

    // (mic, band) in the fixed channel order.
    let plan: [(&[f32], usize); CHANNELS] = [
        (&rec.right, 0),
        (&rec.right, 1),
        (&rec.left, 0),
        (&rec.left, 1),
    ];

    let per_channel: Vec<Result<(CorrelationSeries, i64)>> = plan
        .par_iter()
        .map(|&(mic, band)| {
            let samples: Vec<f64> = mic.iter().map(|&v| v as f64).collect();
            let filtered = bandpass(&samples, &specs[band], rec.sample_rate)?;
            let corr = cross_correlate(&tx[band], &filtered)?;
            let offset = sync_direct_path(&corr, frame_len)?;
            // Interference from close reflections can pull the measured peak
            // a sample or two before the frame start; offsets in the top half
            // of the frame are that wrap-around, not a huge positive shift.
            let signed = if offset > frame_len / 2 {
                offset as i64 - frame_len as i64
            } else {
                offset as i64
            };
            Ok((corr, signed))
        })
        .collect();

    let mut channels = Vec::with_capacity(CHANNELS);
    for r in per_channel {
        channels.push(r?);
    }

    // Frames whose full crop window fits in every channel's correlation.
    let mut frames = total_frames;
    let mut first_frame = 0usize;
    for (corr, offset) in &channels {
        let len = corr.values.len() as i64;
        let last = |f: usize| {
            corr.zero_index as i64 + *offset + (f as i64) * frame_len as i64 + WIDE_CROP_HI as i64
        };
        let first = |f: usize| {
            corr.zero_index as i64 + *offset + (f as i64) * frame_len as i64 + WIDE_CROP_LO as i64
        };
        while frames > 0 && last(frames - 1) >= len {
            frames -= 1;
        }
        while first_frame < frames && first(first_frame) < 0 {
            first_frame += 1;
        }
    }
    if first_frame >= frames {
        return Err(Error::Data("no complete frame fits the crop window".into()));
    }
    let frames_kept = frames - first_frame;

    let mut values = Array3::<f32>::zeros((CHANNELS, frames_kept, WIDE_ROWS));
    for (c, (corr, offset)) in channels.iter().enumerate() {
        for f in 0..frames_kept {
            let base = corr.zero_index as i64
                + *offset
                + ((f + first_frame) as i64) * frame_len as i64;
            for r in 0..WIDE_ROWS {
                let idx = base + WIDE_CROP_LO as i64 + r as i64;
                values[(c, f, r)] = corr.values[idx as usize] as f32;
            }
        }
    }

    Ok(EchoProfile {
        values,
        row_offset: WIDE_CROP_LO,
        meta: rec.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{generate_chirp, tx_stream, SweepConfig, SAMPLE_RATE};
    use crate::simchan::{simulate_rx, FaceProfile, Reflector, SessionMeta};

    fn txs() -> [ChirpFrame; 2] {
        [
            generate_chirp(&SweepConfig::right_band()).unwrap(),
            generate_chirp(&SweepConfig::left_band()).unwrap(),
        ]
    }

    fn specs() -> [BandPassSpec; 2] {
        [BandPassSpec::right_band(), BandPassSpec::left_band()]
    }

    fn single_reflector_recording(delay: f64, frames: usize) -> Recording {
        let face = FaceProfile {
            reflectors: vec![Reflector {
                delay_samples: delay,
                gain: 0.35,
                band_tilt: [1.0, 1.0],
            }],
            direct_path_gain: 1.0,
            id: "t".into(),
        };
        let tx_r = tx_stream(&SweepConfig::right_band(), frames).unwrap();
        let tx_l = tx_stream(&SweepConfig::left_band(), frames).unwrap();
        simulate_rx(&tx_l, &tx_r, &face, None, 1, SessionMeta::new("u00", 1, 0)).unwrap()
    }

    #[test]
    fn ten_second_recording_yields_833_frames() {
        // 10 s at 50 kHz is 833 complete sweeps.
        let rec = single_reflector_recording(20.0, 833);
        let profile = build_echo_profile(&rec, &specs(), &txs()).unwrap();
        assert_eq!(profile.frames(), 833);
        assert_eq!(profile.values.shape(), &[4, 833, 110]);
    }

    #[test]
    fn crop_bound_maps_to_18_7_cm() {
        let range = row_to_range_m(55.0, SAMPLE_RATE);
        assert_eq!(range, 0.187);
    }

    #[test]
    fn channel_order_is_stable() {
        assert_eq!(CHANNEL_LABELS[0], "right_mic.right_band");
        assert_eq!(CHANNEL_LABELS[3], "left_mic.left_band");
        assert_eq!(CHANNELS, 4);
    }

    #[test]
    fn reshape_reproduces_correlation_exactly() {
        let rec = single_reflector_recording(14.5, 12);
        let profile = build_echo_profile(&rec, &specs(), &txs()).unwrap();

        // Recompute channel 0 (right mic, right band) through the same public
        // operations and compare bit-for-bit over the cropped region.
        let samples: Vec<f64> = rec.right.iter().map(|&v| v as f64).collect();
        let filtered = bandpass(&samples, &specs()[0], rec.sample_rate).unwrap();
        let corr = cross_correlate(&txs()[0], &filtered).unwrap();
        let offset = sync_direct_path(&corr, 600).unwrap();
        assert_eq!(offset, 0);
        for f in 0..profile.frames() {
            for r in 0..WIDE_ROWS {
                let lag = f as isize * 600 + WIDE_CROP_LO as isize + r as isize;
                assert_eq!(profile.values[(0, f, r)], corr.lag(lag) as f32);
            }
        }
    }

    #[test]
    fn shift_theorem_moves_frame_peaks() {
        let cfg = SweepConfig::right_band();
        let frame = generate_chirp(&cfg).unwrap();
        let base = tx_stream(&cfg, 5).unwrap();
        for k in [1usize, 7, 23, 50] {
            let mut shifted = vec![0.0; k];
            shifted.extend_from_slice(&base);
            shifted.truncate(base.len());
            let corr = cross_correlate(&frame, &shifted).unwrap();
            let offset = sync_direct_path(&corr, frame.len()).unwrap();
            assert_eq!(offset, k, "shift {k} not tracked");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut rec = single_reflector_recording(10.0, 4);
        rec.left.pop();
        assert!(matches!(
            build_echo_profile(&rec, &specs(), &txs()),
            Err(Error::Data(_))
        ));
    }
}
