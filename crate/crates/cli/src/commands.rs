use clap::Args;
use echoid_core::corpus::CorpusConfig;
use echoid_core::echo::{build_echo_profile, BandPassSpec};
use echoid_core::error::{Error, Result};
use echoid_core::eval::{
    collect_pretrain_corpus, finetune_positives, run_protocol, user_training_positives,
    Aggregation, DiskEchoProvider, ModelStack, ProtocolKind, ProtocolSpec, Report,
};
use echoid_core::instances::SelectionPolicy;
use echoid_core::model::{
    enroll_user, fine_tune, pretrain_base, ChannelSet, Head, ModelConfig, TrainConfig,
};
use echoid_core::signal::{generate_chirp, SweepConfig};
use echoid_core::simchan::MountJitter;
use echoid_core::store::{self, Checkpoint, Manifest, UserRole};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Record of what produced an artifact, written next to the outputs.
#[derive(Serialize)]
struct RunRecord<T: Serialize> {
    command: &'static str,
    code_version: &'static str,
    seed: u64,
    config: T,
    config_digest: String,
}

fn write_run_record<T: Serialize>(
    dir_or_file: &Path,
    command: &'static str,
    seed: u64,
    config: &T,
) -> Result<()> {
    let digest = store::config_digest(config)?;
    let record = RunRecord {
        command,
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        config: config,
        config_digest: digest,
    };
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("run_digest.json")
    } else {
        let mut os = dir_or_file.as_os_str().to_owned();
        os.push(".run.json");
        PathBuf::from(os)
    };
    fs::write(
        path,
        serde_json::to_string_pretty(&record).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

fn band_specs() -> [BandPassSpec; 2] {
    [BandPassSpec::right_band(), BandPassSpec::left_band()]
}

fn chirps() -> Result<[echoid_core::signal::ChirpFrame; 2]> {
    Ok([
        generate_chirp(&SweepConfig::right_band())?,
        generate_chirp(&SweepConfig::left_band())?,
    ])
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    users: usize,
    /// Users assigned the pretraining role (the rest enroll).
    #[arg(long, default_value_t = 3)]
    pretrain_users: usize,
    #[arg(long, default_value_t = 3)]
    days: u16,
    #[arg(long, default_value_t = 36)]
    sessions: u16,
    #[arg(long, default_value_t = 10.0)]
    session_secs: f64,
    /// White-noise SNR in dB; negative values are allowed.
    #[arg(long, default_value_t = 30.0)]
    snr: f64,
    #[arg(long, default_value_t = 1.5)]
    jitter_delay: f64,
    #[arg(long, default_value_t = 0.06)]
    jitter_gain: f64,
    #[arg(long, default_value_t = 0.15)]
    jitter_sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    drift: f64,
    #[arg(long, default_value_t = 5)]
    hair_every: usize,
    #[arg(long, default_value_t = 3.0)]
    hair_drift_mult: f64,
    #[arg(long, default_value_t = 0)]
    posture_sessions: u16,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let cfg = CorpusConfig {
        users: args.users,
        pretrain_users: args.pretrain_users,
        days: args.days,
        sessions_per_day: args.sessions,
        session_secs: args.session_secs,
        snr_db: Some(args.snr),
        jitter: MountJitter {
            delay_shift: args.jitter_delay,
            gain_scale: args.jitter_gain,
            per_reflector_sigma: args.jitter_sigma,
        },
        drift_base: args.drift,
        hair_every: args.hair_every,
        hair_drift_mult: args.hair_drift_mult,
        posture_sessions: args.posture_sessions,
        seed: args.seed,
    };
    cfg.validate()?;
    prepare_out_dir(&args.out, args.force)?;

    let manifest = cfg.manifest_skeleton("rec", "recording");
    let (tx_l, tx_r) = cfg.tx_streams()?;
    let mut jobs = Vec::new();
    for u in 0..cfg.users {
        for day in 1..=cfg.days {
            for s in 0..cfg.sessions_per_day {
                jobs.push((u, day, s));
            }
        }
    }
    let results: Vec<Result<()>> = jobs
        .par_iter()
        .map(|&(u, day, s)| {
            let rec = cfg.generate_session(&tx_l, &tx_r, u, day, s)?;
            let name = format!("{}.rec", rec.meta.session_id());
            store::write_recording(&args.out.join(name), &rec)
        })
        .collect();
    for r in results {
        r?;
    }
    store::save_manifest(&args.out.join("manifest.json"), &manifest)?;
    write_run_record(&args.out, "synth", args.seed, &cfg)?;
    println!(
        "wrote {} sessions for {} users to {}",
        jobs.len(),
        cfg.users,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// process
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct ProcessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn process(args: ProcessArgs) -> Result<()> {
    let manifest = store::load_manifest(&args.manifest)?;
    if manifest.payload_kind != "recording" {
        return Err(Error::Data(format!(
            "expected a recording manifest, found '{}'",
            manifest.payload_kind
        )));
    }
    prepare_out_dir(&args.out, args.force)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let specs = band_specs();
    let txs = chirps()?;

    let mut echo_manifest = manifest.clone();
    echo_manifest.payload_kind = "echo_profile".into();
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    for user in &mut echo_manifest.users {
        for day in &mut user.days {
            for sess in &mut day.sessions {
                let src = base.join(&sess.path);
                let dst_name = format!("{}.ept", sess.id);
                jobs.push((src, args.out.join(&dst_name)));
                sess.path = dst_name;
            }
        }
    }
    let results: Vec<Result<()>> = jobs
        .par_iter()
        .map(|(src, dst)| {
            let rec = store::read_recording(src)?;
            let profile = build_echo_profile(&rec, &specs, &txs)?;
            store::write_echo_profile(dst, &profile)
        })
        .collect();
    for r in results {
        r?;
    }
    store::save_manifest(&args.out.join("manifest.json"), &echo_manifest)?;
    write_run_record(&args.out, "process", manifest.seed, &args)?;
    println!("processed {} sessions into {}", jobs.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// shared model/protocol argument plumbing
// ---------------------------------------------------------------------------

fn parse_channels(s: &str) -> Result<ChannelSet> {
    s.parse()
}

fn load_echo_provider(manifest_path: &Path) -> Result<(Manifest, DiskEchoProvider)> {
    let manifest = store::load_manifest(manifest_path)?;
    let provider = DiskEchoProvider::new(manifest_path, &manifest)?;
    Ok((manifest, provider))
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "all")]
    channels: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 6)]
    drop_practice: usize,
    /// Static instances kept per session.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Frames per instance.
    #[arg(long, default_value_t = 5)]
    instance_frames: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let (manifest, provider) = load_echo_provider(&args.manifest)?;
    let channels = parse_channels(&args.channels)?;
    let policy = SelectionPolicy {
        instance_frames: args.instance_frames,
        instances_per_session: args.instances,
    };
    let corpus = collect_pretrain_corpus(&provider, &manifest, &policy, args.drop_practice)?;
    let k = manifest.users_with_role(UserRole::Pretrain).len();
    let model_cfg = ModelConfig::desk(channels, Head::MultiClass(k));
    let train_cfg = TrainConfig {
        epochs_base: args.epochs,
        initial_lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let trained = pretrain_base(&corpus, &model_cfg, &train_cfg)?;
    store::write_checkpoint(
        &args.out,
        &Checkpoint {
            model: model_cfg,
            train: train_cfg,
            seed: args.seed,
            params: trained.params,
        },
    )?;
    write_run_record(&args.out, "pretrain", args.seed, &args)?;
    println!(
        "pretrained on {} instances of {k} identities; final epoch loss {:.4}",
        corpus.len(),
        trained.loss_curve.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// enroll
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct EnrollArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained base checkpoint; omit with --scratch.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    user: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    train_minutes: u8,
    #[arg(long, default_value_t = 1)]
    train_day: u16,
    #[arg(long, default_value = "all")]
    channels: String,
    #[arg(long, default_value_t = 6)]
    drop_practice: usize,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    instance_frames: usize,
    /// Train from random initialization instead of a base model.
    #[arg(long)]
    scratch: bool,
    /// Override the enrollment epoch count (defaults to 10, or 30 with
    /// --scratch).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn enroll(args: EnrollArgs) -> Result<()> {
    if args.scratch == args.base.is_some() {
        return Err(Error::Config(
            "provide exactly one of --base or --scratch".into(),
        ));
    }
    if !(1..=4).contains(&args.train_minutes) {
        return Err(Error::Config("--train-minutes must be 1..=4".into()));
    }
    let (manifest, provider) = load_echo_provider(&args.manifest)?;
    let channels = parse_channels(&args.channels)?;
    let policy = SelectionPolicy {
        instance_frames: args.instance_frames,
        instances_per_session: args.instances,
    };
    let base = match &args.base {
        Some(path) => Some(store::read_checkpoint(path)?),
        None => None,
    };
    let positives = user_training_positives(
        &provider,
        &manifest,
        &args.user,
        args.train_day,
        &policy,
        2.5 * args.train_minutes as f64,
        args.drop_practice,
    )?;
    let negatives = collect_pretrain_corpus(&provider, &manifest, &policy, args.drop_practice)?;
    let enroll_model = ModelConfig::desk(channels, Head::Binary);
    let train_cfg = TrainConfig {
        epochs_enroll: args.epochs.unwrap_or(if args.scratch { 30 } else { 10 }),
        seed: args.seed,
        ..TrainConfig::default()
    };
    let trained = enroll_user(
        base.as_ref().map(|c| (&c.model, &c.params)),
        &positives,
        &negatives,
        &enroll_model,
        &train_cfg,
    )?;
    store::write_checkpoint(
        &args.out,
        &Checkpoint {
            model: enroll_model,
            train: train_cfg,
            seed: args.seed,
            params: trained.params,
        },
    )?;
    write_run_record(&args.out, "enroll", args.seed, &args)?;
    println!(
        "enrolled '{}' with {} positives vs {} negatives",
        args.user,
        positives.len(),
        negatives.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-cell CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// cross_session | cross_day | leave_one_day_out | channel_ablation |
    /// instance_ablation | finetune_trigger | condition_generalization
    #[arg(long, default_value = "cross_day")]
    protocol: String,
    #[arg(long, default_value_t = 1)]
    train_minutes: u8,
    #[arg(long, default_value_t = 1)]
    train_day: u16,
    #[arg(long, default_value = "all")]
    channels: String,
    #[arg(long, default_value_t = 6)]
    drop_practice: usize,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    instance_frames: usize,
    /// per_instance | majority_per_session
    #[arg(long, default_value = "per_instance")]
    aggregate: String,
    /// Train the per-user models from scratch (pretraining ablation).
    #[arg(long)]
    scratch: bool,
    #[arg(long)]
    enroll_epochs: Option<usize>,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.scratch == args.base.is_some() {
        return Err(Error::Config(
            "provide exactly one of --base or --scratch".into(),
        ));
    }
    let (manifest, provider) = load_echo_provider(&args.manifest)?;
    let channels = parse_channels(&args.channels)?;
    let kind: ProtocolKind = args.protocol.parse()?;
    let aggregate = match args.aggregate.as_str() {
        "per_instance" => Aggregation::PerInstance,
        "majority_per_session" => Aggregation::MajorityPerSession,
        other => return Err(Error::Config(format!("unknown aggregation '{other}'"))),
    };
    let spec = ProtocolSpec {
        kind,
        train_minutes: args.train_minutes,
        drop_practice_sessions: args.drop_practice,
        channels,
        policy: SelectionPolicy {
            instance_frames: args.instance_frames,
            instances_per_session: args.instances,
        },
        aggregate,
        train_day: args.train_day,
        seed: args.seed,
    };
    let base = match &args.base {
        Some(path) => {
            let ckpt = store::read_checkpoint(path)?;
            if ckpt.model.channels != channels {
                return Err(Error::Config(
                    "base checkpoint channels do not match --channels".into(),
                ));
            }
            Some((ckpt.model, ckpt.params))
        }
        None => None,
    };
    let stack = ModelStack {
        base,
        enroll_model: ModelConfig::desk(channels, Head::Binary),
        enroll: TrainConfig {
            epochs_enroll: args.enroll_epochs.unwrap_or(if args.scratch { 30 } else { 10 }),
            seed: args.seed,
            ..TrainConfig::default()
        },
        finetune: TrainConfig {
            seed: args.seed,
            ..TrainConfig::default()
        },
    };
    let report = run_protocol(&provider, &manifest, &spec, &stack)?;
    fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv())?;
    }
    write_run_record(&args.out, "eval", args.seed, &args)?;
    println!("report digest {}", report.digest());
    for cell in &report.cells {
        if cell.condition.is_none() {
            println!(
                "  {} train d{} test d{}: TPR {:.3} FPR {:.3} BAC {:.3}",
                cell.phase, cell.train_day, cell.test_day, cell.mean.tpr, cell.mean.fpr, cell.mean.bac
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Enrolled per-user checkpoint to update.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    user: String,
    /// Day whose first 15 seconds feed the update.
    #[arg(long)]
    day: u16,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    drop_practice: usize,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 5)]
    instance_frames: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let (manifest, provider) = load_echo_provider(&args.manifest)?;
    let ckpt = store::read_checkpoint(&args.model)?;
    let policy = SelectionPolicy {
        instance_frames: args.instance_frames,
        instances_per_session: args.instances,
    };
    let (positives, consumed) = finetune_positives(
        &provider,
        &manifest,
        &args.user,
        args.day,
        &policy,
        args.drop_practice,
    )?;
    let negatives = collect_pretrain_corpus(&provider, &manifest, &policy, args.drop_practice)?;
    let train_cfg = TrainConfig {
        seed: args.seed,
        ..ckpt.train.clone()
    };
    let tuned = fine_tune(&ckpt.model, &ckpt.params, &positives, &negatives, &train_cfg)?;
    store::write_checkpoint(
        &args.out,
        &Checkpoint {
            model: ckpt.model,
            train: train_cfg,
            seed: args.seed,
            params: tuned.params,
        },
    )?;
    write_run_record(&args.out, "finetune", args.seed, &args)?;
    println!(
        "fine-tuned '{}' on {} instances from sessions {:?} (exclude these from tests)",
        args.user,
        positives.len(),
        consumed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Report JSON files to merge.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut csv = String::from(
        "report,phase,train_day,test_day,condition,user,tpr,fpr,bac\n",
    );
    for path in &args.reports {
        let json = fs::read_to_string(path)?;
        let report: Report =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "report".into());
        for line in report.to_csv().lines().skip(1) {
            csv.push_str(&label);
            csv.push(',');
            csv.push_str(line);
            csv.push('\n');
        }
    }
    fs::write(&args.out, csv)?;
    println!("merged {} reports into {}", args.reports.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-chirp
// ---------------------------------------------------------------------------

#[derive(Args, Serialize)]
pub struct ExportChirpArgs {
    /// right | left
    #[arg(long, default_value = "right")]
    band: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn export_chirp(args: ExportChirpArgs) -> Result<()> {
    let cfg = match args.band.as_str() {
        "right" => SweepConfig::right_band(),
        "left" => SweepConfig::left_band(),
        other => return Err(Error::Config(format!("unknown band '{other}'"))),
    };
    let frame = generate_chirp(&cfg)?;
    store::write_chirp(&args.out, &frame)?;
    println!("wrote {} samples to {}", frame.len(), args.out.display());
    Ok(())
}
