//! Evaluation protocols over a dataset manifest: per-user enrollment, strict
//! train/test separation, per-day metrics, and the fine-tune trigger flow.

use super::metrics::{finetune_trigger, metrics, ConfusionCounts, MetricSet, TRIGGER_THRESHOLD};
use super::provider::InstanceProvider;
use crate::error::{Error, Result};
use crate::instances::{Instance, InstanceLabel, SelectionPolicy};
use crate::model::{
    authenticate_batch, enroll_user, fine_tune, ChannelSet, ModelConfig, ParameterSet, TrainConfig,
};
use crate::simchan::Condition;
use crate::store::{config_digest, sha256_hex, Manifest, SessionEntry, UserEntry, UserRole};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Which evaluation protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Train and test on the same day's disjoint sessions.
    CrossSession,
    /// Train on one day, test on every day.
    CrossDay,
    /// Full train-day × test-day grid.
    LeaveOneDayOut,
    /// Cross-day run with a restricted channel set.
    ChannelAblation,
    /// Cross-day run with a non-default instance policy.
    InstanceAblation,
    /// Cross-day run plus the 15-second fine-tune pass on low-TPR days.
    FinetuneTrigger,
    /// Cross-day run with per-condition test breakdown.
    ConditionGeneralization,
}

impl std::str::FromStr for ProtocolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cross_session" => ProtocolKind::CrossSession,
            "cross_day" => ProtocolKind::CrossDay,
            "leave_one_day_out" => ProtocolKind::LeaveOneDayOut,
            "channel_ablation" => ProtocolKind::ChannelAblation,
            "instance_ablation" => ProtocolKind::InstanceAblation,
            "finetune_trigger" => ProtocolKind::FinetuneTrigger,
            "condition_generalization" => ProtocolKind::ConditionGeneralization,
            other => return Err(Error::Config(format!("unknown protocol '{other}'"))),
        })
    }
}

/// How instance decisions aggregate into confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerInstance,
    MajorityPerSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Minutes of enrollment data: m minutes keeps the first 2.5·m seconds
    /// of each training session before static-instance selection.
    pub train_minutes: u8,
    pub drop_practice_sessions: usize,
    pub channels: ChannelSet,
    pub policy: SelectionPolicy,
    pub aggregate: Aggregation,
    pub train_day: u16,
    pub seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            kind: ProtocolKind::CrossDay,
            train_minutes: 1,
            drop_practice_sessions: 6,
            channels: ChannelSet::All,
            policy: SelectionPolicy::default(),
            aggregate: Aggregation::PerInstance,
            train_day: 1,
            seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.train_minutes) {
            return Err(Error::Config("train_minutes must be 1..=4".into()));
        }
        self.policy.validate()
    }

    /// Seconds of each training session kept for this budget.
    pub fn keep_secs(&self) -> f64 {
        2.5 * self.train_minutes as f64
    }
}

/// Models and training configurations driving a protocol run.
#[derive(Debug, Clone)]
pub struct ModelStack {
    /// Pretrained extractor; `None` trains each user from scratch.
    pub base: Option<(ModelConfig, ParameterSet)>,
    /// Binary per-user architecture.
    pub enroll_model: ModelConfig,
    pub enroll: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    /// "pre" for the base evaluation, "post" after fine-tuning.
    pub phase: String,
    pub train_day: u16,
    pub test_day: u16,
    pub condition: Option<Condition>,
    pub per_user: Vec<UserMetrics>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub protocol: ProtocolSpec,
    pub seed: u64,
    pub config_digest: String,
    pub split_digest: String,
    pub code_version: String,
    /// (user, day) pairs whose TPR fell below the trigger threshold.
    pub triggered: Vec<(String, u16)>,
    pub cells: Vec<ReportCell>,
}

impl Report {
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("report serializes"))
    }

    pub fn cell(&self, phase: &str, train_day: u16, test_day: u16) -> Option<&ReportCell> {
        self.cells.iter().find(|c| {
            c.phase == phase
                && c.train_day == train_day
                && c.test_day == test_day
                && c.condition.is_none()
        })
    }

    /// CSV rows: phase, train day, test day, condition, user, tpr, fpr, bac.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,train_day,test_day,condition,user,tpr,fpr,bac\n");
        for cell in &self.cells {
            let cond = cell
                .condition
                .map(|c| c.as_str().to_string())
                .unwrap_or_else(|| "all".into());
            for um in &cell.per_user {
                out.push_str(&format!(
                    "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                    cell.phase,
                    cell.train_day,
                    cell.test_day,
                    cond,
                    um.user,
                    um.metrics.tpr,
                    um.metrics.fpr,
                    um.metrics.bac
                ));
            }
            out.push_str(&format!(
                "{},{},{},{},mean,{:.6},{:.6},{:.6}\n",
                cell.phase, cell.train_day, cell.test_day, cond, cell.mean.tpr, cell.mean.fpr, cell.mean.bac
            ));
        }
        out
    }
}

fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sessions of one user-day split into practice / train / same-day holdout.
struct DaySplit<'a> {
    train: Vec<&'a SessionEntry>,
    holdout: Vec<&'a SessionEntry>,
    non_practice: Vec<&'a SessionEntry>,
}

fn day_sessions<'a>(user: &'a UserEntry, day: u16) -> Result<Vec<&'a SessionEntry>> {
    let entry = user
        .days
        .iter()
        .find(|d| d.day == day)
        .ok_or_else(|| Error::Data(format!("user '{}' has no day {day}", user.id)))?;
    let mut sessions: Vec<&SessionEntry> = entry.sessions.iter().collect();
    sessions.sort_by_key(|s| s.session);
    Ok(sessions)
}

fn day_split<'a>(user: &'a UserEntry, day: u16, drop_practice: usize) -> Result<DaySplit<'a>> {
    let sessions = day_sessions(user, day)?;
    if sessions.len() <= drop_practice + 1 {
        return Err(Error::Data(format!(
            "user '{}' day {day}: {} sessions cannot cover practice ({drop_practice}) plus train and test",
            user.id,
            sessions.len()
        )));
    }
    let non_practice: Vec<&SessionEntry> = sessions[drop_practice..].to_vec();
    let usable = non_practice.len();
    let train_count = ((usable * 4) / 5).max(1);
    Ok(DaySplit {
        train: non_practice[..train_count].to_vec(),
        holdout: non_practice[train_count..].to_vec(),
        non_practice,
    })
}

/// Identity-labeled pretraining corpus: every non-practice session of every
/// pretraining-role user, full duration, static instances only.
pub fn collect_pretrain_corpus<P: InstanceProvider>(
    provider: &P,
    manifest: &Manifest,
    policy: &SelectionPolicy,
    drop_practice: usize,
) -> Result<Vec<Instance>> {
    let mut jobs: Vec<(String, u16, u16)> = Vec::new();
    for user in manifest.users_with_role(UserRole::Pretrain) {
        for day in &user.days {
            let split = day_split(user, day.day, drop_practice)?;
            for sess in split.non_practice {
                jobs.push((user.id.clone(), day.day, sess.session));
            }
        }
    }
    let banks: Vec<Result<Vec<Instance>>> = jobs
        .par_iter()
        .map(|(user, day, session)| {
            let mut bank = provider.static_instances(user, *day, *session, policy, None)?;
            for inst in &mut bank {
                inst.label = Some(InstanceLabel::Identity(user.clone()));
            }
            Ok(bank)
        })
        .collect();
    let mut out = Vec::new();
    for b in banks {
        out.extend(b?);
    }
    Ok(out)
}

/// Time-truncated static positives from a user's training sessions on one
/// day: the paper's enrollment-budget construction (m minutes keeps the
/// first 2.5·m seconds of each training session).
pub fn user_training_positives<P: InstanceProvider>(
    provider: &P,
    manifest: &Manifest,
    user_id: &str,
    train_day: u16,
    policy: &SelectionPolicy,
    keep_secs: f64,
    drop_practice: usize,
) -> Result<Vec<Instance>> {
    let user = manifest
        .user(user_id)
        .ok_or_else(|| Error::Data(format!("no user '{user_id}' in the manifest")))?;
    let split = day_split(user, train_day, drop_practice)?;
    let mut out = Vec::new();
    for sess in &split.train {
        out.extend(provider.static_instances(
            user_id,
            train_day,
            sess.session,
            policy,
            Some(keep_secs),
        )?);
    }
    Ok(out)
}

/// The 15-second fine-tuning set for one day: the first two non-practice
/// sessions, 7.5 seconds each, static instances only. Returns the instances
/// and the consumed session ids (which must leave the test set).
pub fn finetune_positives<P: InstanceProvider>(
    provider: &P,
    manifest: &Manifest,
    user_id: &str,
    day: u16,
    policy: &SelectionPolicy,
    drop_practice: usize,
) -> Result<(Vec<Instance>, Vec<String>)> {
    let user = manifest
        .user(user_id)
        .ok_or_else(|| Error::Data(format!("no user '{user_id}' in the manifest")))?;
    let split = day_split(user, day, drop_practice)?;
    let sessions: Vec<&SessionEntry> = split.non_practice.iter().take(2).copied().collect();
    let mut out = Vec::new();
    for sess in &sessions {
        out.extend(provider.static_instances(user_id, day, sess.session, policy, Some(7.5))?);
    }
    Ok((out, sessions.iter().map(|s| s.id.clone()).collect()))
}

/// Session ids of every pretraining-role user (these appear in each
/// enrollment's training negatives).
fn pretrain_session_ids(manifest: &Manifest, drop_practice: usize) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for user in manifest.users_with_role(UserRole::Pretrain) {
        for day in &user.days {
            let split = day_split(user, day.day, drop_practice)?;
            for sess in split.non_practice {
                ids.insert(sess.id.clone());
            }
        }
    }
    Ok(ids)
}

/// One scored test cell before aggregation.
struct CellCounts {
    test_day: u16,
    condition: Option<Condition>,
    counts: ConfusionCounts,
}

struct UserRun {
    user: String,
    train_day: u16,
    params: ParameterSet,
    train_ids: BTreeSet<String>,
    cells: Vec<CellCounts>,
}

/// Pre-extracted full-session banks for one enrollee day.
type TestBank = Vec<(SessionEntry, Vec<Instance>)>;

fn count_decisions(
    aggregate: Aggregation,
    per_session: &[(String, Vec<bool>)],
    positive: bool,
    counts: &mut ConfusionCounts,
) {
    match aggregate {
        Aggregation::PerInstance => {
            for (_, accepts) in per_session {
                for &a in accepts {
                    if positive {
                        counts.add_positive(a);
                    } else {
                        counts.add_negative(a);
                    }
                }
            }
        }
        Aggregation::MajorityPerSession => {
            for (_, accepts) in per_session {
                if accepts.is_empty() {
                    continue;
                }
                let yes = accepts.iter().filter(|&&a| a).count();
                let accepted = 2 * yes >= accepts.len();
                if positive {
                    counts.add_positive(accepted);
                } else {
                    counts.add_negative(accepted);
                }
            }
        }
    }
}

fn score_sessions(
    model_cfg: &ModelConfig,
    params: &ParameterSet,
    sessions: &[(SessionEntry, Vec<Instance>)],
) -> Result<Vec<(String, Vec<bool>)>> {
    let refs: Vec<&Instance> = sessions.iter().flat_map(|(_, b)| b.iter()).collect();
    let decisions = authenticate_batch(model_cfg, params, &refs)?;
    let mut out = Vec::with_capacity(sessions.len());
    let mut ix = 0usize;
    for (entry, bank) in sessions {
        let accepts = decisions[ix..ix + bank.len()].iter().map(|d| d.1).collect();
        ix += bank.len();
        out.push((entry.id.clone(), accepts));
    }
    Ok(out)
}

/// Run an evaluation protocol. Enrollment and scoring are per-user
/// independent and run in parallel; results are combined in user order.
pub fn run_protocol<P: InstanceProvider>(
    provider: &P,
    manifest: &Manifest,
    spec: &ProtocolSpec,
    stack: &ModelStack,
) -> Result<Report> {
    spec.validate()?;
    stack.enroll.validate()?;
    if stack.enroll_model.channels != spec.channels {
        return Err(Error::Config(
            "protocol channel set does not match the enrollment model".into(),
        ));
    }
    if manifest.users.len() < 3 {
        return Err(Error::Data("protocol needs at least 3 users".into()));
    }
    let enrollees = manifest.users_with_role(UserRole::Enrollee);
    if enrollees.len() < 2 {
        return Err(Error::Data(
            "protocol needs at least 2 enrollees (targets need attackers)".into(),
        ));
    }
    if manifest.users_with_role(UserRole::Pretrain).is_empty() {
        return Err(Error::Data("protocol needs pretraining-role users".into()));
    }

    let mut days: Vec<u16> = manifest
        .users
        .iter()
        .flat_map(|u| u.days.iter().map(|d| d.day))
        .collect::<BTreeSet<u16>>()
        .into_iter()
        .collect();
    days.sort_unstable();
    if !days.contains(&spec.train_day) {
        return Err(Error::Data(format!("no day {} in the manifest", spec.train_day)));
    }

    let train_days: Vec<u16> = match spec.kind {
        ProtocolKind::LeaveOneDayOut => days.clone(),
        _ => vec![spec.train_day],
    };
    let test_days: Vec<u16> = match spec.kind {
        ProtocolKind::CrossSession => vec![spec.train_day],
        _ => days.clone(),
    };

    // Training negatives: the pretraining corpus (identity labels dropped).
    let negatives_train: Vec<Instance> =
        collect_pretrain_corpus(provider, manifest, &spec.policy, spec.drop_practice_sessions)?;
    if negatives_train.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    let pretrain_ids = pretrain_session_ids(manifest, spec.drop_practice_sessions)?;

    // Full-session test banks for every enrollee day.
    let mut bank_jobs: Vec<(String, u16, SessionEntry)> = Vec::new();
    for user in &enrollees {
        for day in &user.days {
            let split = day_split(user, day.day, spec.drop_practice_sessions)?;
            for sess in split.non_practice {
                bank_jobs.push((user.id.clone(), day.day, sess.clone()));
            }
        }
    }
    let bank_results: Vec<Result<Vec<Instance>>> = bank_jobs
        .par_iter()
        .map(|(user, day, sess)| {
            provider.static_instances(user, *day, sess.session, &spec.policy, None)
        })
        .collect();
    let mut test_banks: HashMap<(String, u16), TestBank> = HashMap::new();
    for ((user, day, sess), bank) in bank_jobs.into_iter().zip(bank_results) {
        test_banks
            .entry((user, day))
            .or_default()
            .push((sess, bank?));
    }
    for bank in test_banks.values_mut() {
        bank.sort_by_key(|(s, _)| s.session);
    }

    let mut enrollee_ids: Vec<String> = enrollees.iter().map(|u| u.id.clone()).collect();
    enrollee_ids.sort();

    // Evaluate one enrolled model over the test grid.
    let evaluate = |user_id: &str,
                    params: &ParameterSet,
                    train_day: u16,
                    holdout: &[&SessionEntry],
                    exclude: &BTreeSet<String>|
     -> Result<Vec<CellCounts>> {
        let mut cells = Vec::new();
        for &test_day in &test_days {
            // Positives: same-day holdout, or the whole non-practice day.
            let own = test_banks
                .get(&(user_id.to_string(), test_day))
                .ok_or_else(|| Error::Data(format!("no test bank for {user_id} day {test_day}")))?;
            let pos_sessions: Vec<(SessionEntry, Vec<Instance>)> = own
                .iter()
                .filter(|(s, _)| {
                    !exclude.contains(&s.id)
                        && (test_day != train_day || holdout.iter().any(|h| h.id == s.id))
                })
                .cloned()
                .collect();
            let mut neg_sessions: Vec<(SessionEntry, Vec<Instance>)> = Vec::new();
            for other in &enrollee_ids {
                if other == user_id {
                    continue;
                }
                if let Some(bank) = test_banks.get(&(other.clone(), test_day)) {
                    neg_sessions.extend(bank.iter().cloned());
                }
            }

            if pos_sessions.is_empty() || neg_sessions.is_empty() {
                return Err(Error::Data(format!(
                    "empty test set for {user_id} on day {test_day}"
                )));
            }

            // No-leakage assertion: train sessions never appear in test.
            let mut train_ids: BTreeSet<String> = pretrain_ids.clone();
            for h in holdout {
                let _ = h; // holdouts are test-side
            }
            train_ids.extend(exclude.iter().cloned());
            for (s, _) in pos_sessions.iter().chain(neg_sessions.iter()) {
                if train_ids.contains(&s.id) {
                    return Err(Error::Leakage(format!(
                        "session '{}' appears in both train and test for {user_id}",
                        s.id
                    )));
                }
            }

            let pos_scored = score_sessions(&stack.enroll_model, params, &pos_sessions)?;
            let neg_scored = score_sessions(&stack.enroll_model, params, &neg_sessions)?;

            let conditions: Vec<Option<Condition>> = match spec.kind {
                ProtocolKind::ConditionGeneralization => {
                    let mut set: Vec<Condition> =
                        pos_sessions.iter().map(|(s, _)| s.condition).collect();
                    set.sort_by_key(|c| c.as_str());
                    set.dedup();
                    set.into_iter().map(Some).collect()
                }
                _ => vec![None],
            };
            for condition in conditions {
                let mut counts = ConfusionCounts::default();
                let pos_subset: Vec<(String, Vec<bool>)> = match condition {
                    Some(cond) => pos_scored
                        .iter()
                        .zip(&pos_sessions)
                        .filter(|(_, (s, _))| s.condition == cond)
                        .map(|(scored, _)| scored.clone())
                        .collect(),
                    None => pos_scored.clone(),
                };
                count_decisions(spec.aggregate, &pos_subset, true, &mut counts);
                count_decisions(spec.aggregate, &neg_scored, false, &mut counts);
                cells.push(CellCounts {
                    test_day,
                    condition,
                    counts,
                });
            }
        }
        Ok(cells)
    };

    // Phase 1: enroll and evaluate every target user.
    let mut runs: Vec<UserRun> = Vec::new();
    for &train_day in &train_days {
        let day_runs: Vec<Result<UserRun>> = enrollee_ids
            .par_iter()
            .map(|user_id| {
                let user = manifest.user(user_id).expect("listed enrollee");
                let split = day_split(user, train_day, spec.drop_practice_sessions)?;
                let positives = user_training_positives(
                    provider,
                    manifest,
                    user_id,
                    train_day,
                    &spec.policy,
                    spec.keep_secs(),
                    spec.drop_practice_sessions,
                )?;
                let train_ids: BTreeSet<String> =
                    split.train.iter().map(|s| s.id.clone()).collect();
                let cfg = TrainConfig {
                    seed: spec.seed ^ fnv64(user_id) ^ u64::from(train_day) << 32,
                    ..stack.enroll.clone()
                };
                let trained = enroll_user(
                    stack.base.as_ref().map(|(c, p)| (c, p)),
                    &positives,
                    &negatives_train,
                    &stack.enroll_model,
                    &cfg,
                )?;
                let cells = evaluate(
                    user_id,
                    &trained.params,
                    train_day,
                    &split.holdout,
                    &train_ids,
                )?;
                Ok(UserRun {
                    user: user_id.clone(),
                    train_day,
                    params: trained.params,
                    train_ids,
                    cells,
                })
            })
            .collect();
        for r in day_runs {
            runs.push(r?);
        }
    }

    let mut cells = assemble_cells("pre", &runs, &enrollee_ids)?;

    // Phase 2: fine-tune triggered users and re-evaluate.
    let mut triggered: Vec<(String, u16)> = Vec::new();
    if spec.kind == ProtocolKind::FinetuneTrigger {
        let finetune_jobs: Vec<(usize, u16)> = runs
            .iter()
            .enumerate()
            .filter_map(|(ix, run)| {
                for cell in &run.cells {
                    if cell.test_day == run.train_day || cell.condition.is_some() {
                        continue;
                    }
                    let m = metrics(&cell.counts).ok()?;
                    if finetune_trigger(m.tpr, TRIGGER_THRESHOLD) {
                        return Some((ix, cell.test_day));
                    }
                }
                None
            })
            .collect();

        let updates: Vec<Result<(usize, u16, UserRun)>> = finetune_jobs
            .par_iter()
            .map(|&(ix, trigger_day)| {
                let run = &runs[ix];
                let (ft_positives, ft_ids) = finetune_positives(
                    provider,
                    manifest,
                    &run.user,
                    trigger_day,
                    &spec.policy,
                    spec.drop_practice_sessions,
                )?;
                let cfg = TrainConfig {
                    seed: spec.seed ^ fnv64(&run.user) ^ 0xf1_4e_7 ,
                    ..stack.finetune.clone()
                };
                let tuned = fine_tune(
                    &stack.enroll_model,
                    &run.params,
                    &ft_positives,
                    &negatives_train,
                    &cfg,
                )?;
                let mut train_ids = run.train_ids.clone();
                train_ids.extend(ft_ids);
                let user_entry = manifest.user(&run.user).expect("listed enrollee");
                let base_split = day_split(user_entry, run.train_day, spec.drop_practice_sessions)?;
                let cells = evaluate(
                    &run.user,
                    &tuned.params,
                    run.train_day,
                    &base_split.holdout,
                    &train_ids,
                )?;
                Ok((
                    ix,
                    trigger_day,
                    UserRun {
                        user: run.user.clone(),
                        train_day: run.train_day,
                        params: tuned.params,
                        train_ids,
                        cells,
                    },
                ))
            })
            .collect();

        let mut post_runs: Vec<UserRun> = Vec::new();
        let mut updated: HashMap<usize, UserRun> = HashMap::new();
        for u in updates {
            let (ix, day, run) = u?;
            triggered.push((run.user.clone(), day));
            updated.insert(ix, run);
        }
        triggered.sort();
        for (ix, run) in runs.iter().enumerate() {
            match updated.remove(&ix) {
                Some(new_run) => post_runs.push(new_run),
                None => post_runs.push(UserRun {
                    user: run.user.clone(),
                    train_day: run.train_day,
                    params: run.params.clone(),
                    train_ids: run.train_ids.clone(),
                    cells: run
                        .cells
                        .iter()
                        .map(|c| CellCounts {
                            test_day: c.test_day,
                            condition: c.condition,
                            counts: c.counts,
                        })
                        .collect(),
                }),
            }
        }
        cells.extend(assemble_cells("post", &post_runs, &enrollee_ids)?);
    }

    // Split digest: the train/test session partition per user, independent of
    // model configuration.
    let mut split_lines: Vec<String> = Vec::new();
    for run in &runs {
        let train: Vec<String> = run.train_ids.iter().cloned().collect();
        split_lines.push(format!(
            "{}@d{}|train:{}",
            run.user,
            run.train_day,
            train.join(",")
        ));
    }
    split_lines.sort();
    let split_digest = sha256_hex(split_lines.join("\n").as_bytes());

    #[derive(Serialize)]
    struct DigestView<'a> {
        spec: &'a ProtocolSpec,
        enroll_model: &'a ModelConfig,
        enroll: &'a TrainConfig,
        finetune: &'a TrainConfig,
        pretrained: bool,
    }
    let config_digest = config_digest(&DigestView {
        spec,
        enroll_model: &stack.enroll_model,
        enroll: &stack.enroll,
        finetune: &stack.finetune,
        pretrained: stack.base.is_some(),
    })?;

    Ok(Report {
        protocol: spec.clone(),
        seed: spec.seed,
        config_digest,
        split_digest,
        code_version: env!("CARGO_PKG_VERSION").into(),
        triggered,
        cells,
    })
}

fn assemble_cells(
    phase: &str,
    runs: &[UserRun],
    enrollee_ids: &[String],
) -> Result<Vec<ReportCell>> {
    // Group by (train_day, test_day, condition) in deterministic order.
    let mut keys: BTreeMap<(u16, u16, String), Vec<(String, ConfusionCounts)>> = BTreeMap::new();
    for run in runs {
        for cell in &run.cells {
            let cond_key = cell
                .condition
                .map(|c| c.as_str().to_string())
                .unwrap_or_default();
            keys.entry((run.train_day, cell.test_day, cond_key.clone()))
                .or_default()
                .push((run.user.clone(), cell.counts));
        }
    }
    let mut out = Vec::new();
    for ((train_day, test_day, cond_key), mut users) in keys {
        users.sort_by(|a, b| a.0.cmp(&b.0));
        let mut per_user = Vec::new();
        for (user, counts) in users {
            per_user.push(UserMetrics {
                user,
                counts,
                metrics: metrics(&counts)?,
            });
        }
        if per_user.len() != enrollee_ids.len() && cond_key.is_empty() {
            return Err(Error::Data(format!(
                "cell ({train_day},{test_day}) is missing users"
            )));
        }
        let n = per_user.len() as f64;
        let mean_of = |f: fn(&MetricSet) -> f64| per_user.iter().map(|u| f(&u.metrics)).sum::<f64>() / n;
        let std_of = |f: fn(&MetricSet) -> f64, mu: f64| {
            (per_user
                .iter()
                .map(|u| (f(&u.metrics) - mu).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        };
        let mean = MetricSet {
            tpr: mean_of(|m| m.tpr),
            fpr: mean_of(|m| m.fpr),
            bac: mean_of(|m| m.bac),
        };
        let std = MetricSet {
            tpr: std_of(|m| m.tpr, mean.tpr),
            fpr: std_of(|m| m.fpr, mean.fpr),
            bac: std_of(|m| m.bac, mean.bac),
        };
        let condition = if cond_key.is_empty() {
            None
        } else {
            Some(cond_key.parse::<Condition>()?)
        };
        out.push(ReportCell {
            phase: phase.to_string(),
            train_day,
            test_day,
            condition,
            per_user,
            mean,
            std,
        });
    }
    Ok(out)
}
