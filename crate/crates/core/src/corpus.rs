//! Synthetic corpus generation: users → faces, days → drift, sessions →
//! remounts, all deterministic in the corpus seed.

use crate::error::Result;
use crate::signal::{tx_stream, SweepConfig, SAMPLES_PER_SWEEP, SAMPLE_RATE};
use crate::simchan::{
    day_drift, make_face, remount, simulate_rx, Condition, FaceProfile, FaceTemplate, MountJitter,
    Recording, SessionMeta,
};
use crate::store::{DayEntry, Manifest, SessionEntry, UserEntry, UserRole};
use serde::{Deserialize, Serialize};

/// Everything that defines a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub users: usize,
    /// The first `pretrain_users` users form the pretraining/negative corpus;
    /// the rest are enrollees.
    pub pretrain_users: usize,
    pub days: u16,
    pub sessions_per_day: u16,
    pub session_secs: f64,
    pub snr_db: Option<f64>,
    pub jitter: MountJitter,
    /// Day-to-day drift magnitude applied from day 2 on.
    pub drift_base: f64,
    /// Every n-th user gets the long-hair face variant and stronger drift;
    /// 0 disables the variant.
    pub hair_every: usize,
    pub hair_drift_mult: f64,
    /// The last `posture_sessions` sessions of each day cycle through the
    /// talking/standing/lying-down condition tags.
    pub posture_sessions: u16,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            users: 6,
            pretrain_users: 3,
            days: 3,
            sessions_per_day: 36,
            session_secs: 10.0,
            snr_db: Some(30.0),
            jitter: MountJitter::default(),
            drift_base: 1.0,
            hair_every: 5,
            hair_drift_mult: 3.0,
            posture_sessions: 0,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.users == 0 || self.days == 0 || self.sessions_per_day == 0 {
            return Err(Error::Config("corpus counts must be at least 1".into()));
        }
        if self.pretrain_users >= self.users {
            return Err(Error::Config(
                "need at least one enrollee beyond the pretraining users".into(),
            ));
        }
        if self.session_secs <= 0.0 {
            return Err(Error::Config("session duration must be positive".into()));
        }
        self.jitter.validate()?;
        if self.drift_base < 0.0 {
            return Err(Error::Config("drift must be non-negative".into()));
        }
        Ok(())
    }

    pub fn user_id(&self, ix: usize) -> String {
        format!("u{ix:02}")
    }

    pub fn user_role(&self, ix: usize) -> UserRole {
        if ix < self.pretrain_users {
            UserRole::Pretrain
        } else {
            UserRole::Enrollee
        }
    }

    pub fn frames_per_session(&self) -> usize {
        ((self.session_secs * SAMPLE_RATE) / SAMPLES_PER_SWEEP as f64).floor() as usize
    }

    fn has_long_hair(&self, user_ix: usize) -> bool {
        self.hair_every > 0 && (user_ix + 1) % self.hair_every == 0
    }

    fn session_seed(&self, user_ix: usize, day: u16, session: u16) -> u64 {
        // FNV-style mix of the corpus seed with the session coordinates.
        let mut h = self.seed ^ 0x9e3779b97f4a7c15;
        for v in [user_ix as u64 + 1, day as u64 + 1, session as u64 + 1] {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn base_face(&self, user_ix: usize) -> FaceProfile {
        let template = if self.has_long_hair(user_ix) {
            FaceTemplate::LongHairVariant
        } else {
            FaceTemplate::Default
        };
        let mut face = make_face(self.seed.wrapping_add(user_ix as u64 * 7919), template);
        face.id = self.user_id(user_ix);
        face
    }

    /// The face as worn in one specific session: base face, plus persistent
    /// day drift (day 2 onward), plus per-session remount jitter.
    pub fn session_face(&self, user_ix: usize, day: u16, session: u16) -> FaceProfile {
        let base = self.base_face(user_ix);
        let drifted = if day <= 1 || self.drift_base == 0.0 {
            base
        } else {
            let mult = if self.has_long_hair(user_ix) {
                self.hair_drift_mult
            } else {
                1.0
            };
            day_drift(
                &base,
                self.drift_base * mult,
                self.session_seed(user_ix, day, u16::MAX),
            )
        };
        let condition = self.session_condition(session);
        let jitter = match condition {
            Condition::Sitting => self.jitter.clone(),
            // Non-sitting postures wobble more.
            _ => MountJitter {
                per_reflector_sigma: self.jitter.per_reflector_sigma * 2.0,
                ..self.jitter.clone()
            },
        };
        remount(&drifted, &jitter, self.session_seed(user_ix, day, session))
    }

    pub fn session_condition(&self, session: u16) -> Condition {
        if self.posture_sessions == 0 || session < self.sessions_per_day - self.posture_sessions {
            Condition::Sitting
        } else {
            match (session - (self.sessions_per_day - self.posture_sessions)) % 3 {
                0 => Condition::Talking,
                1 => Condition::Standing,
                _ => Condition::LyingDown,
            }
        }
    }

    /// Synthesize one session's two-channel recording.
    pub fn generate_session(
        &self,
        tx_left: &[f64],
        tx_right: &[f64],
        user_ix: usize,
        day: u16,
        session: u16,
    ) -> Result<Recording> {
        let face = self.session_face(user_ix, day, session);
        let meta = SessionMeta {
            user_id: self.user_id(user_ix),
            day,
            session,
            condition: self.session_condition(session),
        };
        simulate_rx(
            tx_left,
            tx_right,
            &face,
            self.snr_db,
            self.session_seed(user_ix, day, session) ^ 0x6e6f697365,
            meta,
        )
    }

    /// Precompute the two transmit streams for this session length.
    pub fn tx_streams(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let frames = self.frames_per_session();
        let left = tx_stream(&SweepConfig::left_band(), frames)?;
        let right = tx_stream(&SweepConfig::right_band(), frames)?;
        Ok((left, right))
    }

    /// Manifest skeleton (session metadata and relative payload paths) for
    /// this corpus, with `ext` as the payload extension.
    pub fn manifest_skeleton(&self, ext: &str, payload_kind: &str) -> Manifest {
        let mut manifest = Manifest::new(SAMPLE_RATE, self.seed, payload_kind);
        for u in 0..self.users {
            let id = self.user_id(u);
            let mut days = Vec::new();
            for day in 1..=self.days {
                let sessions = (0..self.sessions_per_day)
                    .map(|s| {
                        let meta = SessionMeta {
                            user_id: id.clone(),
                            day,
                            session: s,
                            condition: self.session_condition(s),
                        };
                        SessionEntry {
                            id: meta.session_id(),
                            session: s,
                            condition: meta.condition,
                            path: format!("{}.{ext}", meta.session_id()),
                            duration_secs: self.frames_per_session() as f64
                                * SAMPLES_PER_SWEEP as f64
                                / SAMPLE_RATE,
                        }
                    })
                    .collect();
                days.push(DayEntry { day, sessions });
            }
            manifest.users.push(UserEntry {
                id,
                role: self.user_role(u),
                days,
            });
        }
        manifest
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_faces_are_deterministic() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.session_face(2, 2, 5), cfg.session_face(2, 2, 5));
        assert_ne!(cfg.session_face(2, 2, 5), cfg.session_face(2, 2, 6));
        assert_ne!(cfg.session_face(2, 2, 5), cfg.session_face(3, 2, 5));
    }

    #[test]
    fn day_one_has_no_drift() {
        let cfg = CorpusConfig {
            jitter: MountJitter::zero(),
            ..CorpusConfig::default()
        };
        assert_eq!(cfg.session_face(0, 1, 0), cfg.base_face(0));
    }

    #[test]
    fn ten_second_sessions_have_833_frames() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.frames_per_session(), 833);
    }

    #[test]
    fn hair_users_follow_policy() {
        let cfg = CorpusConfig::default();
        assert!(!cfg.has_long_hair(0));
        assert!(cfg.has_long_hair(4));
        assert!(cfg.has_long_hair(9));
    }

    #[test]
    fn posture_tags_cycle_at_day_end() {
        let cfg = CorpusConfig {
            posture_sessions: 3,
            sessions_per_day: 8,
            ..CorpusConfig::default()
        };
        assert_eq!(cfg.session_condition(4), Condition::Sitting);
        assert_eq!(cfg.session_condition(5), Condition::Talking);
        assert_eq!(cfg.session_condition(6), Condition::Standing);
        assert_eq!(cfg.session_condition(7), Condition::LyingDown);
    }

    #[test]
    fn manifest_skeleton_counts() {
        let cfg = CorpusConfig {
            users: 4,
            pretrain_users: 2,
            days: 2,
            sessions_per_day: 3,
            ..CorpusConfig::default()
        };
        let m = cfg.manifest_skeleton("rec", "recording");
        assert_eq!(m.users.len(), 4);
        let total: usize = m
            .users
            .iter()
            .flat_map(|u| &u.days)
            .map(|d| d.sessions.len())
            .sum();
        assert_eq!(total, 24);
        m.validate(std::path::Path::new("."), false).unwrap();
    }
}
