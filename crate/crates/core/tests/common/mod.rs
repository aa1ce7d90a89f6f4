//! Shared helpers for integration and acceptance tests: independent oracles
//! and in-memory corpus construction.

#![allow(dead_code)]

use echoid_core::corpus::CorpusConfig;
use echoid_core::echo::{
    build_echo_profile, BandPassSpec, EchoProfile, EVAL_CROP_LO, EVAL_OFFSET, EVAL_ROWS,
};
use echoid_core::eval::MemBankProvider;
use echoid_core::instances::SelectionPolicy;
use echoid_core::signal::{generate_chirp, tx_stream, ChirpFrame, SweepConfig};
use echoid_core::simchan::{simulate_rx, FaceProfile, Recording, SessionMeta};
use echoid_core::store::Manifest;
use rayon::prelude::*;

pub fn band_specs() -> [BandPassSpec; 2] {
    [BandPassSpec::right_band(), BandPassSpec::left_band()]
}

pub fn chirps() -> [ChirpFrame; 2] {
    [
        generate_chirp(&SweepConfig::right_band()).unwrap(),
        generate_chirp(&SweepConfig::left_band()).unwrap(),
    ]
}

/// Independent double-loop evaluation of the correlation sum
/// C(n) = Σ_m tx[m]·rx[m+n] (missing samples are zero).
pub fn direct_correlation(tx: &[f64], rx: &[f64], lag: isize) -> f64 {
    let mut acc = 0.0;
    for (m, &t) in tx.iter().enumerate() {
        let idx = m as isize + lag;
        if idx >= 0 && (idx as usize) < rx.len() {
            acc += t * rx[idx as usize];
        }
    }
    acc
}

/// Simulate a face and build its echo profile.
pub fn face_profile_with_frames(
    face: &FaceProfile,
    snr_db: Option<f64>,
    seed: u64,
    frames: usize,
) -> (Recording, EchoProfile) {
    let tx_l = tx_stream(&SweepConfig::left_band(), frames).unwrap();
    let tx_r = tx_stream(&SweepConfig::right_band(), frames).unwrap();
    let rec = simulate_rx(&tx_l, &tx_r, face, snr_db, seed, SessionMeta::new("t", 1, 0)).unwrap();
    let profile = build_echo_profile(&rec, &band_specs(), &chirps()).unwrap();
    (rec, profile)
}

/// Reflector-response peak row oracle: subtract a zero-reflector reference
/// run (same direct path, no noise), then take the modal per-frame |value|
/// argmax over the evaluation window of the same-side channel.
pub fn isolated_peak_row(face: &FaceProfile, snr_db: Option<f64>, seed: u64, frames: usize) -> i32 {
    let (_, profile) = face_profile_with_frames(face, snr_db, seed, frames);
    let reference = FaceProfile {
        reflectors: vec![],
        direct_path_gain: face.direct_path_gain,
        id: "reference".into(),
    };
    let (_, ref_profile) = face_profile_with_frames(&reference, None, seed, frames);
    let n = profile.frames().min(ref_profile.frames());

    let mut counts = vec![0usize; EVAL_ROWS];
    for f in 0..n {
        let mut best = 0usize;
        let mut best_v = 0.0f32;
        for r in 0..EVAL_ROWS {
            let v = (profile.values[(0, f, EVAL_OFFSET + r)]
                - ref_profile.values[(0, f, EVAL_OFFSET + r)])
                .abs();
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        counts[best] += 1;
    }
    let row = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0;
    row as i32 + EVAL_CROP_LO
}

/// Per-frame peak rows (same oracle, every frame) for hit-rate style checks.
pub fn isolated_peak_rows_per_frame(
    face: &FaceProfile,
    snr_db: Option<f64>,
    seed: u64,
    frames: usize,
) -> Vec<i32> {
    let (_, profile) = face_profile_with_frames(face, snr_db, seed, frames);
    let reference = FaceProfile {
        reflectors: vec![],
        direct_path_gain: face.direct_path_gain,
        id: "reference".into(),
    };
    let (_, ref_profile) = face_profile_with_frames(&reference, None, seed, frames);
    let n = profile.frames().min(ref_profile.frames());
    (0..n)
        .map(|f| {
            let mut best = 0usize;
            let mut best_v = 0.0f32;
            for r in 0..EVAL_ROWS {
                let v = (profile.values[(0, f, EVAL_OFFSET + r)]
                    - ref_profile.values[(0, f, EVAL_OFFSET + r)])
                    .abs();
                if v > best_v {
                    best_v = v;
                    best = r;
                }
            }
            best as i32 + EVAL_CROP_LO
        })
        .collect()
}

/// Synthesize a whole corpus in memory and extract static-instance banks at
/// the given truncation levels (None = full session).
pub fn build_mem_corpus(
    cfg: &CorpusConfig,
    policy: &SelectionPolicy,
    truncations: &[Option<f64>],
) -> (Manifest, MemBankProvider) {
    cfg.validate().unwrap();
    let manifest = cfg.manifest_skeleton("mem", "echo_profile");
    let (tx_l, tx_r) = cfg.tx_streams().unwrap();
    let specs = band_specs();
    let txs = chirps();

    let mut jobs: Vec<(usize, u16, u16)> = Vec::new();
    for u in 0..cfg.users {
        for day in 1..=cfg.days {
            for s in 0..cfg.sessions_per_day {
                jobs.push((u, day, s));
            }
        }
    }
    // Profiles are large; extract instance banks inline and drop each
    // profile before the next one builds.
    let banks: Vec<MemBankProvider> = jobs
        .par_chunks(16)
        .map(|chunk| {
            let mut part = MemBankProvider::new(policy.clone());
            for &(u, day, s) in chunk {
                let rec = cfg.generate_session(&tx_l, &tx_r, u, day, s).unwrap();
                let profile = build_echo_profile(&rec, &specs, &txs).unwrap();
                part.add_profile(&profile, truncations).unwrap();
            }
            part
        })
        .collect();
    let mut provider = MemBankProvider::new(policy.clone());
    for part in banks {
        provider.absorb(part);
    }
    (manifest, provider)
}
