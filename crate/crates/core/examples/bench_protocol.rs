//! Scratch: end-to-end protocol calibration at configurable scale.
//!
//! Usage: bench_protocol [users] [pretrain] [days] [sessions] [secs] [drift] [epochs_base]

use echoid_core::corpus::CorpusConfig;
use echoid_core::echo::build_echo_profile;
use echoid_core::eval::{
    collect_pretrain_corpus, run_protocol, InstanceProvider, MemBankProvider, ModelStack,
    ProtocolKind, ProtocolSpec,
};
use echoid_core::instances::SelectionPolicy;
use echoid_core::model::{pretrain_base, ChannelSet, Head, ModelConfig, TrainConfig};
use echoid_core::signal::{generate_chirp, SweepConfig};
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let users = get(1, 6.0) as usize;
    let pretrain_users = get(2, 3.0) as usize;
    let days = get(3, 2.0) as u16;
    let sessions = get(4, 8.0) as u16;
    let secs = get(5, 3.0);
    let drift = get(6, 1.0);
    let epochs_base = get(7, 10.0) as usize;
    let drop_practice = get(8, 2.0) as usize;
    let lr = get(9, 2e-4);
    let enroll_epochs = get(10, 10.0) as usize;
    let enroll_lr = get(11, lr);
    let neg_cap = get(12, 6144.0) as usize;

    let cfg = CorpusConfig {
        users,
        pretrain_users,
        days,
        sessions_per_day: sessions,
        session_secs: secs,
        drift_base: drift,
        seed: 42,
        ..CorpusConfig::default()
    };
    let policy = SelectionPolicy::default();

    // Synthesize and extract, with an on-disk bank cache keyed by the
    // corpus configuration.
    let t0 = Instant::now();
    let manifest = cfg.manifest_skeleton("mem", "echo_profile");
    let cache_dir = std::path::PathBuf::from(format!(
        "/tmp/echoid-bankcache/{}",
        &echoid_core::store::config_digest(&cfg).unwrap()[..16]
    ));
    let truncs = [None, Some(2.5), Some(7.5)];
    let mut jobs = Vec::new();
    for u in 0..cfg.users {
        for day in 1..=cfg.days {
            for s in 0..cfg.sessions_per_day {
                jobs.push((u, day, s));
            }
        }
    }
    let mut provider = MemBankProvider::new(policy.clone());
    if cache_dir.exists() {
        for &(u, day, s) in &jobs {
            for (ti, t) in truncs.iter().enumerate() {
                let f = cache_dir.join(format!("{}_d{}_s{}_t{}.ipb", cfg.user_id(u), day, s, ti));
                let bank = echoid_core::store::read_instance_bank(&f).unwrap();
                provider.insert(&cfg.user_id(u), day, s, *t, bank);
            }
        }
        println!("corpus: {} sessions from cache in {:.1}s", jobs.len(), t0.elapsed().as_secs_f64());
    } else {
        std::fs::create_dir_all(&cache_dir).unwrap();
        let (tx_l, tx_r) = cfg.tx_streams().unwrap();
        let specs = [
            echoid_core::echo::BandPassSpec::right_band(),
            echoid_core::echo::BandPassSpec::left_band(),
        ];
        let txs = [
            generate_chirp(&SweepConfig::right_band()).unwrap(),
            generate_chirp(&SweepConfig::left_band()).unwrap(),
        ];
        let banks: Vec<MemBankProvider> = jobs
            .par_chunks(16)
            .map(|chunk| {
                let mut part = MemBankProvider::new(policy.clone());
                for &(u, day, s) in chunk {
                    let rec = cfg.generate_session(&tx_l, &tx_r, u, day, s).unwrap();
                    let p = build_echo_profile(&rec, &specs, &txs).unwrap();
                    part.add_profile(&p, &truncs).unwrap();
                    for (ti, t) in truncs.iter().enumerate() {
                        let bank = part
                            .static_instances(&cfg.user_id(u), day, s, &policy, *t)
                            .unwrap();
                        let f = cache_dir
                            .join(format!("{}_d{}_s{}_t{}.ipb", cfg.user_id(u), day, s, ti));
                        echoid_core::store::write_instance_bank(&f, &bank).unwrap();
                    }
                }
                part
            })
            .collect();
        for part in banks {
            provider.absorb(part);
        }
        println!("corpus: {} sessions in {:.1}s", jobs.len(), t0.elapsed().as_secs_f64());
    }

    // Pretrain.
    let t0 = Instant::now();
    let corpus = collect_pretrain_corpus(&provider, &manifest, &policy, drop_practice).unwrap();
    let model_cfg = ModelConfig::desk(ChannelSet::All, Head::MultiClass(pretrain_users));
    let mut tc = TrainConfig::with_seed(7);
    tc.epochs_base = epochs_base;
    tc.initial_lr = lr;
    let base = pretrain_base(&corpus, &model_cfg, &tc).unwrap();
    {
        // Pretrain train-accuracy (eval mode) for calibration.
        use echoid_core::model::{network_from_params, to_eval_batch};
        use echoid_core::instances::{Instance, InstanceLabel};
        let net = network_from_params::<f32>(&model_cfg, &base.params).unwrap();
        let refs: Vec<&Instance> = corpus.iter().collect();
        let batch = to_eval_batch(&refs, &model_cfg.channels);
        let logits = net.forward_eval(&batch).unwrap();
        let mut ok = 0usize;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let pred = (0..pretrain_users).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            let want = match &corpus[i].label { Some(InstanceLabel::Identity(id)) => base.class_map.iter().position(|x| x == id).unwrap(), _ => unreachable!() };
            if pred == want { ok += 1; }
        }
        println!("pretrain train-acc {:.3}", ok as f64 / corpus.len() as f64);
    }
    println!(
        "pretrain: {} instances, loss {:.3} → {:.3}, {:.1}s",
        corpus.len(),
        base.loss_curve[0],
        base.loss_curve.last().unwrap(),
        t0.elapsed().as_secs_f64()
    );

    // Protocol.
    let t0 = Instant::now();
    let spec = ProtocolSpec {
        kind: ProtocolKind::FinetuneTrigger,
        drop_practice_sessions: drop_practice,
        seed: 11,
        ..ProtocolSpec::default()
    };
    let stack = ModelStack {
        base: Some((model_cfg.clone(), base.params.clone())),
        enroll_model: ModelConfig::desk(ChannelSet::All, Head::Binary),
        enroll: TrainConfig { initial_lr: enroll_lr, epochs_enroll: enroll_epochs, negatives_per_epoch: if neg_cap == 0 { None } else { Some(neg_cap) }, ..TrainConfig::with_seed(7) },
        finetune: TrainConfig { initial_lr: enroll_lr, negatives_per_epoch: if neg_cap == 0 { None } else { Some(neg_cap) }, ..TrainConfig::with_seed(7) },
    };
    let report = run_protocol(&provider, &manifest, &spec, &stack).unwrap();
    println!("protocol in {:.1}s; triggered: {:?}", t0.elapsed().as_secs_f64(), report.triggered);
    for cell in &report.cells {
        println!(
            "  {} train d{} test d{}: TPR {:.3} FPR {:.3} BAC {:.3} (std {:.3})",
            cell.phase, cell.train_day, cell.test_day, cell.mean.tpr, cell.mean.fpr, cell.mean.bac, cell.std.bac
        );
        let detail: Vec<String> = cell.per_user.iter().map(|u| format!("{}: {:.2}/{:.2}", u.user, u.metrics.tpr, u.metrics.fpr)).collect();
        println!("      {}", detail.join("  "));
    }
}
