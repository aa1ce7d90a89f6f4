//! Sources of static instances for protocol runs.

use crate::echo::EchoProfile;
use crate::error::{Error, Result};
use crate::instances::{segment, select_static, Instance, SelectionPolicy};
use crate::signal::{SAMPLES_PER_SWEEP, SAMPLE_RATE};
use crate::store::{self, Manifest};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

/// Static-instance extraction from a session profile, optionally truncated to
/// the first `truncate_secs` seconds of audio before selection.
pub fn static_from_profile(
    profile: &EchoProfile,
    policy: &SelectionPolicy,
    truncate_secs: Option<f64>,
) -> Result<Vec<Instance>> {
    let keep = match truncate_secs {
        Some(secs) => {
            let frames = ((secs * SAMPLE_RATE) / SAMPLES_PER_SWEEP as f64).floor() as usize;
            frames.min(profile.frames())
        }
        None => profile.frames(),
    };
    let truncated;
    let view = if keep == profile.frames() {
        profile
    } else {
        truncated = EchoProfile {
            values: profile.values.slice(ndarray::s![.., ..keep, ..]).to_owned(),
            row_offset: profile.row_offset,
            meta: profile.meta.clone(),
        };
        &truncated
    };
    let instances = segment(view, policy)?;
    Ok(select_static(instances, policy.instances_per_session))
}

/// Source of per-session static instances for the evaluation protocols.
pub trait InstanceProvider: Sync {
    fn static_instances(
        &self,
        user: &str,
        day: u16,
        session: u16,
        policy: &SelectionPolicy,
        truncate_secs: Option<f64>,
    ) -> Result<Vec<Instance>>;
}

type CacheKey = (String, u16, u16, usize, usize, Option<u64>);

/// Reads echo-profile tensors referenced by a manifest, caching extracted
/// instances. Extraction is pure, so the cache only saves work.
pub struct DiskEchoProvider {
    base: PathBuf,
    paths: HashMap<(String, u16, u16), PathBuf>,
    cache: Mutex<HashMap<CacheKey, Vec<Instance>>>,
}

impl DiskEchoProvider {
    pub fn new(manifest_path: &std::path::Path, manifest: &Manifest) -> Result<Self> {
        if manifest.payload_kind != "echo_profile" {
            return Err(Error::Data(format!(
                "expected an echo-profile manifest, found payload kind '{}'",
                manifest.payload_kind
            )));
        }
        let base = manifest_path
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .to_path_buf();
        let mut paths = HashMap::new();
        for user in &manifest.users {
            for day in &user.days {
                for sess in &day.sessions {
                    paths.insert(
                        (user.id.clone(), day.day, sess.session),
                        base.join(&sess.path),
                    );
                }
            }
        }
        Ok(DiskEchoProvider {
            base,
            paths,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn base(&self) -> &std::path::Path {
        &self.base
    }
}

impl InstanceProvider for DiskEchoProvider {
    fn static_instances(
        &self,
        user: &str,
        day: u16,
        session: u16,
        policy: &SelectionPolicy,
        truncate_secs: Option<f64>,
    ) -> Result<Vec<Instance>> {
        let key: CacheKey = (
            user.to_string(),
            day,
            session,
            policy.instance_frames,
            policy.instances_per_session,
            truncate_secs.map(f64::to_bits),
        );
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let path = self
            .paths
            .get(&(user.to_string(), day, session))
            .ok_or_else(|| {
                Error::Data(format!("no session {session} for user '{user}' on day {day}"))
            })?;
        let profile = store::read_echo_profile(path)?;
        let out = static_from_profile(&profile, policy, truncate_secs)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, out.clone());
        Ok(out)
    }
}

/// Precomputed in-memory banks, keyed by session and truncation.
pub struct MemBankProvider {
    banks: HashMap<(String, u16, u16, Option<u64>), Vec<Instance>>,
    policy: SelectionPolicy,
}

impl MemBankProvider {
    pub fn new(policy: SelectionPolicy) -> Self {
        MemBankProvider {
            banks: HashMap::new(),
            policy,
        }
    }

    pub fn insert(
        &mut self,
        user: &str,
        day: u16,
        session: u16,
        truncate_secs: Option<f64>,
        instances: Vec<Instance>,
    ) {
        self.banks.insert(
            (user.to_string(), day, session, truncate_secs.map(f64::to_bits)),
            instances,
        );
    }

    /// Merge another provider's banks (same policy) into this one.
    pub fn absorb(&mut self, other: MemBankProvider) {
        self.banks.extend(other.banks);
    }

    /// Extract and store the banks for one session profile at the given
    /// truncation levels.
    pub fn add_profile(
        &mut self,
        profile: &EchoProfile,
        truncations: &[Option<f64>],
    ) -> Result<()> {
        for t in truncations {
            let bank = static_from_profile(profile, &self.policy, *t)?;
            self.insert(
                &profile.meta.user_id,
                profile.meta.day,
                profile.meta.session,
                *t,
                bank,
            );
        }
        Ok(())
    }
}

impl InstanceProvider for MemBankProvider {
    fn static_instances(
        &self,
        user: &str,
        day: u16,
        session: u16,
        policy: &SelectionPolicy,
        truncate_secs: Option<f64>,
    ) -> Result<Vec<Instance>> {
        if *policy != self.policy {
            return Err(Error::Config(
                "in-memory banks were extracted under a different selection policy".into(),
            ));
        }
        self.banks
            .get(&(user.to_string(), day, session, truncate_secs.map(f64::to_bits)))
            .cloned()
            .ok_or_else(|| {
                Error::Data(format!(
                    "no precomputed bank for {user} day {day} session {session} truncate {truncate_secs:?}"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echo::{WIDE_CROP_LO, WIDE_ROWS};
    use crate::simchan::SessionMeta;
    use ndarray::Array3;

    fn profile(frames: usize) -> EchoProfile {
        EchoProfile {
            values: Array3::from_shape_fn((4, frames, WIDE_ROWS), |(c, f, r)| {
                ((c + 2 * f + 3 * r) % 17) as f32
            }),
            row_offset: WIDE_CROP_LO,
            meta: SessionMeta::new("u00", 1, 0),
        }
    }

    #[test]
    fn truncation_limits_selection_pool() {
        let p = profile(833);
        let policy = SelectionPolicy::default();
        // 2.5 s → 208 frames → 41 instances; positions must stay below 41.
        let picked = static_from_profile(&p, &policy, Some(2.5)).unwrap();
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|i| i.meta.position < 41));
        let full = static_from_profile(&p, &policy, None).unwrap();
        assert!(full.iter().any(|i| i.meta.position >= 41) || full.len() == 10);
    }

    #[test]
    fn membank_roundtrip() {
        let mut bank = MemBankProvider::new(SelectionPolicy::default());
        bank.add_profile(&profile(50), &[None, Some(0.3)]).unwrap();
        let full = bank
            .static_instances("u00", 1, 0, &SelectionPolicy::default(), None)
            .unwrap();
        assert_eq!(full.len(), 10);
        let trunc = bank
            .static_instances("u00", 1, 0, &SelectionPolicy::default(), Some(0.3))
            .unwrap();
        // 0.3 s → 25 frames → 5 instances.
        assert_eq!(trunc.len(), 5);
        assert!(bank
            .static_instances("u00", 1, 0, &SelectionPolicy::default(), Some(0.4))
            .is_err());
    }
}
