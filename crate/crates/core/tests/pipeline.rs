//! End-to-end behavior of the simulator → echo-profile pipeline, checked
//! against simulator-based oracles.

mod common;

use common::*;
use echoid_core::echo::{bandpass, cross_correlate, sync_direct_path};
use echoid_core::signal::{tx_stream, SweepConfig, SAMPLE_RATE};
use echoid_core::simchan::{
    day_drift, make_face, remount, simulate_rx, FaceProfile, FaceTemplate, MountJitter, Reflector,
    SessionMeta,
};
use num_complex::Complex64;
use rustfft::FftPlanner;

fn single_reflector(delay: f64, gain: f64) -> FaceProfile {
    FaceProfile {
        reflectors: vec![Reflector {
            delay_samples: delay,
            gain,
            band_tilt: [1.0, 1.0],
        }],
        direct_path_gain: 1.0,
        id: "single".into(),
    }
}

#[test]
fn round_trip_single_reflector_peak() {
    // The isolated reflector response peaks at the reflector delay ±1.
    for (delay, seed) in [(7.0, 1u64), (20.25, 2), (33.0, 3), (51.75, 4)] {
        let row = isolated_peak_row(&single_reflector(delay, 0.35), Some(20.0), seed, 10);
        assert!(
            (row as f64 - delay).abs() <= 1.0,
            "delay {delay} located at row {row}"
        );
    }
    // Exactly half-sample delays are carrier-limited: the 19.5 kHz carrier
    // spans only ~2.6 samples, so a 0.5-sample offset moves the tallest
    // correlation sample a couple of rows under an unchanged envelope.
    let row = isolated_peak_row(&single_reflector(33.5, 0.35), Some(20.0), 5, 10);
    assert!(
        (row as f64 - 33.5).abs() <= 3.0,
        "half-sample delay drifted to row {row}"
    );
}

#[test]
fn per_frame_peaks_hit_at_30db() {
    // At 30 dB SNR, at least 90% of frames locate a delay-20 reflector ±1.
    let rows = isolated_peak_rows_per_frame(&single_reflector(20.0, 0.35), Some(30.0), 7, 20);
    let hits = rows.iter().filter(|&&r| (r - 20).abs() <= 1).count();
    assert!(
        hits * 10 >= rows.len() * 9,
        "{hits}/{} frames within ±1",
        rows.len()
    );
}

#[test]
fn ranging_error_monotone_in_snr() {
    // Monte-Carlo over seeds: the peak-localization error at 0 dB is at
    // least as large as at 40 dB.
    let face = single_reflector(26.0, 0.35);
    let err_at = |snr: f64| -> f64 {
        let mut total = 0.0;
        for seed in 0..20u64 {
            let row = isolated_peak_row(&face, Some(snr), 100 + seed, 6);
            total += (row as f64 - 26.0).abs();
        }
        total / 20.0
    };
    let low = err_at(0.0);
    let high = err_at(40.0);
    assert!(
        low >= high,
        "mean error at 0 dB ({low}) below error at 40 dB ({high})"
    );
}

#[test]
fn remount_moves_peaks_by_at_most_the_shift() {
    let face = single_reflector(30.0, 0.4);
    let jitter = MountJitter {
        delay_shift: 3.0,
        gain_scale: 0.0,
        per_reflector_sigma: 0.0,
    };
    let base_row = isolated_peak_row(&face, None, 0, 8);
    for seed in 0..6u64 {
        let moved = remount(&face, &jitter, seed);
        let row = isolated_peak_row(&moved, None, 0, 8);
        assert!(
            (row - base_row).abs() <= 3,
            "seed {seed}: row moved {base_row} → {row}"
        );
    }
}

#[test]
fn blink_spike_outranks_static_instances() {
    // A one-frame gain spike scores far above every static instance.
    use echoid_core::instances::{motion_score, segment, SelectionPolicy};
    let face = make_face(5, FaceTemplate::Default);
    let (_, mut profile) = face_profile_with_frames(&face, Some(30.0), 3, 30);
    // Inject the "blink": scale frame 12 (inside instance 2) by 1.5.
    let spike_frame = 12;
    for c in 0..4 {
        for r in 0..110 {
            profile.values[(c, spike_frame, r)] *= 1.5;
        }
    }
    let instances = segment(&profile, &SelectionPolicy::default()).unwrap();
    let scores: Vec<f64> = instances.iter().map(motion_score).collect();
    let spiked = scores[spike_frame / 5];
    for (i, s) in scores.iter().enumerate() {
        if i != spike_frame / 5 {
            assert!(
                spiked > *s,
                "spiked instance {spiked} not above instance {i} ({s})"
            );
        }
    }
}

#[test]
fn different_seeds_make_distinct_faces() {
    // Echo profiles of different identities differ; cosine distance of the
    // mean evaluation-window image is well away from zero.
    let f1 = make_face(1, FaceTemplate::Default);
    let f2 = make_face(2, FaceTemplate::Default);
    let (_, p1) = face_profile_with_frames(&f1, Some(30.0), 9, 10);
    let (_, p2) = face_profile_with_frames(&f2, Some(30.0), 9, 10);
    let flat = |p: &echoid_core::echo::EchoProfile| -> Vec<f64> {
        let mut v = Vec::new();
        for c in 0..4 {
            for r in 0..110 {
                let mut acc = 0.0;
                for f in 0..p.frames() {
                    acc += p.values[(c, f, r)] as f64;
                }
                v.push(acc / p.frames() as f64);
            }
        }
        v
    };
    let a = flat(&p1);
    let b = flat(&p2);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine_distance = 1.0 - dot / (na * nb);
    assert!(
        cosine_distance > 0.2,
        "identities too similar: distance {cosine_distance}"
    );
}

#[test]
fn day_drift_magnitude_orders_envelope_change() {
    // Spectral-envelope L2 difference against the base face grows with the
    // drift magnitude.
    let face = make_face(11, FaceTemplate::Default);
    let envelope = |f: &FaceProfile| -> Vec<f64> {
        let frames = 6;
        let tx_l = tx_stream(&SweepConfig::left_band(), frames).unwrap();
        let tx_r = tx_stream(&SweepConfig::right_band(), frames).unwrap();
        let rec =
            simulate_rx(&tx_l, &tx_r, f, None, 0, SessionMeta::new("t", 1, 0)).unwrap();
        let n = 8192;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex64> = rec
            .right
            .iter()
            .take(n)
            .map(|&v| Complex64::new(v as f64, 0.0))
            .collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        fft.process(&mut buf);
        // Smooth the magnitude spectrum into 64 bands over 17–25 kHz.
        let lo = (17_000.0 / SAMPLE_RATE * n as f64) as usize;
        let hi = (25_000.0 / SAMPLE_RATE * n as f64) as usize;
        let band = (hi - lo) / 64;
        (0..64)
            .map(|b| {
                buf[lo + b * band..lo + (b + 1) * band]
                    .iter()
                    .map(|c| c.norm())
                    .sum::<f64>()
                    / band as f64
            })
            .collect()
    };
    let base = envelope(&face);
    let l2 = |e: &[f64]| -> f64 {
        e.iter()
            .zip(&base)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let small = l2(&envelope(&day_drift(&face, 0.2, 77)));
    let large = l2(&envelope(&day_drift(&face, 2.0, 77)));
    assert!(
        large > small,
        "envelope change not ordered: mag 2.0 → {large}, mag 0.2 → {small}"
    );
}

#[test]
fn shift_theorem_on_simulated_recording() {
    // Delaying the received stream moves the sync offset by the same amount.
    let face = single_reflector(18.0, 0.3);
    let frames = 6;
    let tx_l = tx_stream(&SweepConfig::left_band(), frames).unwrap();
    let tx_r = tx_stream(&SweepConfig::right_band(), frames).unwrap();
    let rec = simulate_rx(&tx_l, &tx_r, &face, None, 0, SessionMeta::new("t", 1, 0)).unwrap();
    let samples: Vec<f64> = rec.right.iter().map(|&v| v as f64).collect();
    let filtered = bandpass(&samples, &band_specs()[0], SAMPLE_RATE).unwrap();
    for k in [5usize, 17, 50] {
        let mut shifted = vec![0.0; k];
        shifted.extend_from_slice(&filtered);
        shifted.truncate(filtered.len());
        let corr = cross_correlate(&chirps()[0], &shifted).unwrap();
        let offset = sync_direct_path(&corr, 600).unwrap();
        assert_eq!(offset, k);
    }
}
