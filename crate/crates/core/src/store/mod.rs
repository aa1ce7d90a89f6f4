//! On-disk formats: recordings, echo-profile tensors, instance banks, model
//! checkpoints, chirp exports, and the dataset manifest.
//!
//! Binary formats are little-endian with explicit magic, version, and
//! dimension fields; payload lengths are validated so truncation is always
//! detected. Round-trips are bit-exact.

mod wire;

use crate::echo::EchoProfile;
use crate::error::{Error, Result};
use crate::instances::{Instance, InstanceLabel, InstanceMeta};
use crate::model::{ModelConfig, ParameterSet, TrainConfig, PARAMETER_SET_VERSION};
use crate::signal::{ChirpFrame, SweepConfig};
use crate::simchan::{Condition, Recording, SessionMeta};
use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const RECORDING_MAGIC: &[u8; 4] = b"EIRC";
const RECORDING_VERSION: u16 = 1;
const PROFILE_MAGIC: &[u8; 4] = b"EIEP";
const PROFILE_VERSION: u16 = 1;
const BANK_MAGIC: &[u8; 4] = b"EIIB";
const BANK_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"EICK";
const CHECKPOINT_VERSION: u16 = 1;

fn condition_code(c: Condition) -> u8 {
    match c {
        Condition::Sitting => 0,
        Condition::Talking => 1,
        Condition::Standing => 2,
        Condition::LyingDown => 3,
    }
}

fn condition_from_code(code: u8) -> Result<Condition> {
    Ok(match code {
        0 => Condition::Sitting,
        1 => Condition::Talking,
        2 => Condition::Standing,
        3 => Condition::LyingDown,
        other => return Err(Error::Format(format!("unknown condition code {other}"))),
    })
}

fn write_session_meta<W: Write>(w: &mut W, meta: &SessionMeta) -> Result<()> {
    wire::write_str(w, &meta.user_id)?;
    wire::write_u16(w, meta.day)?;
    wire::write_u16(w, meta.session)?;
    wire::write_u8(w, condition_code(meta.condition))
}

fn read_session_meta<R: Read>(r: &mut R) -> Result<SessionMeta> {
    let user_id = wire::read_str(r)?;
    let day = wire::read_u16(r)?;
    let session = wire::read_u16(r)?;
    let condition = condition_from_code(wire::read_u8(r)?)?;
    Ok(SessionMeta {
        user_id,
        day,
        session,
        condition,
    })
}

// ---------------------------------------------------------------------------
// Recordings
// ---------------------------------------------------------------------------

pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(RECORDING_MAGIC)?;
    wire::write_u16(&mut w, RECORDING_VERSION)?;
    wire::write_f64(&mut w, rec.sample_rate)?;
    wire::write_u16(&mut w, 2)?;
    write_session_meta(&mut w, &rec.meta)?;
    wire::write_u64(&mut w, rec.left.len() as u64)?;
    wire::write_f32_slice(&mut w, &rec.left)?;
    wire::write_f32_slice(&mut w, &rec.right)?;
    w.flush()?;
    Ok(())
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let mut r = BufReader::new(fs::File::open(path)?);
    wire::expect_magic(&mut r, RECORDING_MAGIC, "recording")?;
    wire::expect_version(&mut r, RECORDING_VERSION, "recording")?;
    let sample_rate = wire::read_f64(&mut r)?;
    let channels = wire::read_u16(&mut r)?;
    if channels != 2 {
        return Err(Error::Format(format!("expected 2 channels, found {channels}")));
    }
    let meta = read_session_meta(&mut r)?;
    let n = wire::read_u64(&mut r)? as usize;
    let left = wire::read_f32_vec(&mut r, n)?;
    let right = wire::read_f32_vec(&mut r, n)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after recording payload".into()));
    }
    Ok(Recording {
        left,
        right,
        sample_rate,
        meta,
    })
}

// ---------------------------------------------------------------------------
// Echo-profile tensors
// ---------------------------------------------------------------------------

pub fn write_echo_profile(path: &Path, profile: &EchoProfile) -> Result<()> {
    let (channels, frames, rows) = profile.values.dim();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PROFILE_MAGIC)?;
    wire::write_u16(&mut w, PROFILE_VERSION)?;
    wire::write_u8(&mut w, 0)?; // dtype 0 = f32
    wire::write_u16(&mut w, channels as u16)?;
    for c in 0..channels {
        wire::write_u8(&mut w, c as u8)?; // stored in canonical channel order
    }
    wire::write_u64(&mut w, frames as u64)?;
    wire::write_u16(&mut w, rows as u16)?;
    wire::write_i16(&mut w, profile.row_offset as i16)?;
    write_session_meta(&mut w, &profile.meta)?;
    wire::write_f32_slice(&mut w, profile.values.as_slice().expect("standard layout"))?;
    w.flush()?;
    Ok(())
}

pub fn read_echo_profile(path: &Path) -> Result<EchoProfile> {
    let mut r = BufReader::new(fs::File::open(path)?);
    wire::expect_magic(&mut r, PROFILE_MAGIC, "echo profile")?;
    wire::expect_version(&mut r, PROFILE_VERSION, "echo profile")?;
    let dtype = wire::read_u8(&mut r)?;
    if dtype != 0 {
        return Err(Error::Format(format!("unsupported dtype code {dtype}")));
    }
    let channels = wire::read_u16(&mut r)? as usize;
    for c in 0..channels {
        let code = wire::read_u8(&mut r)?;
        if code != c as u8 {
            return Err(Error::Format("unexpected channel order".into()));
        }
    }
    let frames = wire::read_u64(&mut r)? as usize;
    let rows = wire::read_u16(&mut r)? as usize;
    let row_offset = wire::read_i16(&mut r)? as i32;
    let meta = read_session_meta(&mut r)?;
    let payload = wire::read_f32_vec(&mut r, channels * frames * rows)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after profile payload".into()));
    }
    let values = Array3::from_shape_vec((channels, frames, rows), payload)
        .map_err(|e| Error::Format(format!("bad tensor shape: {e}")))?;
    Ok(EchoProfile {
        values,
        row_offset,
        meta,
    })
}

// ---------------------------------------------------------------------------
// Instance banks
// ---------------------------------------------------------------------------

/// Serialize instances (stored wide form) with a shared label table.
pub fn write_instance_bank(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut labels: Vec<String> = Vec::new();
    let mut label_code = |label: &Option<InstanceLabel>| -> (u8, u16) {
        match label {
            None => (0, 0),
            Some(InstanceLabel::Identity(id)) => {
                let ix = match labels.iter().position(|l| l == id) {
                    Some(ix) => ix,
                    None => {
                        labels.push(id.clone());
                        labels.len() - 1
                    }
                };
                (1, ix as u16)
            }
            Some(InstanceLabel::Binary(b)) => (2, u16::from(*b)),
        }
    };
    let coded: Vec<(u8, u16)> = instances.iter().map(|i| label_code(&i.label)).collect();

    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    wire::write_u16(&mut w, BANK_VERSION)?;
    wire::write_u64(&mut w, instances.len() as u64)?;
    if let Some(first) = instances.first() {
        let (c, f, r) = first.values.dim();
        wire::write_u16(&mut w, c as u16)?;
        wire::write_u16(&mut w, f as u16)?;
        wire::write_u16(&mut w, r as u16)?;
    } else {
        wire::write_u16(&mut w, 0)?;
        wire::write_u16(&mut w, 0)?;
        wire::write_u16(&mut w, 0)?;
    }
    wire::write_u16(&mut w, labels.len() as u16)?;
    for l in &labels {
        wire::write_str(&mut w, l)?;
    }
    for (inst, (kind, code)) in instances.iter().zip(&coded) {
        wire::write_u8(&mut w, *kind)?;
        wire::write_u16(&mut w, *code)?;
        write_session_meta(&mut w, &inst.meta.session)?;
        wire::write_u32(&mut w, inst.meta.position as u32)?;
        wire::write_f32_slice(&mut w, inst.values.as_slice().expect("standard layout"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instance_bank(path: &Path) -> Result<Vec<Instance>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    wire::expect_magic(&mut r, BANK_MAGIC, "instance bank")?;
    wire::expect_version(&mut r, BANK_VERSION, "instance bank")?;
    let count = wire::read_u64(&mut r)? as usize;
    let c = wire::read_u16(&mut r)? as usize;
    let f = wire::read_u16(&mut r)? as usize;
    let rows = wire::read_u16(&mut r)? as usize;
    let n_labels = wire::read_u16(&mut r)? as usize;
    let mut labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        labels.push(wire::read_str(&mut r)?);
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = wire::read_u8(&mut r)?;
        let code = wire::read_u16(&mut r)?;
        let session = read_session_meta(&mut r)?;
        let position = wire::read_u32(&mut r)? as usize;
        let payload = wire::read_f32_vec(&mut r, c * f * rows)?;
        let label = match kind {
            0 => None,
            1 => Some(InstanceLabel::Identity(
                labels
                    .get(code as usize)
                    .ok_or_else(|| Error::Format("label index out of range".into()))?
                    .clone(),
            )),
            2 => Some(InstanceLabel::Binary(code != 0)),
            other => return Err(Error::Format(format!("unknown label kind {other}"))),
        };
        let values = Array3::from_shape_vec((c, f, rows), payload)
            .map_err(|e| Error::Format(format!("bad instance shape: {e}")))?;
        out.push(Instance {
            values,
            label,
            meta: InstanceMeta { session, position },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A trained model with everything needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub params: ParameterSet,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    params_version: String,
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        params_version: ckpt.params.version.clone(),
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        seed: ckpt.seed,
        tensors: ckpt
            .params
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    wire::write_u16(&mut w, CHECKPOINT_VERSION)?;
    wire::write_u32(&mut w, header_json.len() as u32)?;
    w.write_all(&header_json)?;
    for t in ckpt.params.tensors.values() {
        let flat: Vec<f32> = t.iter().copied().collect();
        wire::write_f32_slice(&mut w, &flat)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(fs::File::open(path)?);
    wire::expect_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    wire::expect_version(&mut r, CHECKPOINT_VERSION, "checkpoint")?;
    let header_len = wire::read_u32(&mut r)? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    if header.params_version != PARAMETER_SET_VERSION {
        return Err(Error::Format(format!(
            "parameter version '{}' unsupported",
            header.params_version
        )));
    }
    let mut tensors = std::collections::BTreeMap::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let data = wire::read_f32_vec(&mut r, len)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Format(format!("tensor '{}': {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), arr);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let ckpt = Checkpoint {
        model: header.model,
        train: header.train,
        seed: header.seed,
        params: ParameterSet {
            version: header.params_version,
            tensors,
        },
    };
    // Reject checkpoints whose tensors do not fit their own model config.
    crate::model::network_from_params::<f32>(&ckpt.model, &ckpt.params)?;
    Ok(ckpt)
}

/// Load a checkpoint and require it to match an expected architecture.
pub fn read_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    if &ckpt.model != expected {
        return Err(Error::Config(
            "checkpoint was trained with a different model configuration".into(),
        ));
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Chirp export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ChirpSidecar {
    format: String,
    samples: usize,
    config: SweepConfig,
}

/// Raw 32-bit little-endian float file plus a JSON sidecar at `<path>.json`.
pub fn write_chirp(path: &Path, frame: &ChirpFrame) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let flat: Vec<f32> = frame.samples.iter().map(|&v| v as f32).collect();
    wire::write_f32_slice(&mut w, &flat)?;
    w.flush()?;
    let sidecar = ChirpSidecar {
        format: "f32le".into(),
        samples: frame.len(),
        config: frame.config.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_chirp(path: &Path) -> Result<(Vec<f32>, SweepConfig)> {
    let json = fs::read_to_string(sidecar_path(path))?;
    let sidecar: ChirpSidecar =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("sidecar decode: {e}")))?;
    if sidecar.format != "f32le" {
        return Err(Error::Format(format!("unknown chirp format '{}'", sidecar.format)));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != sidecar.samples * 4 {
        return Err(Error::Format(format!(
            "chirp payload is {} bytes, sidecar says {}",
            bytes.len(),
            sidecar.samples * 4
        )));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((samples, sidecar.config))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Role of a user inside the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserRole {
    Pretrain,
    Enrollee,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionEntry {
    pub id: String,
    pub session: u16,
    pub condition: Condition,
    pub path: String,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DayEntry {
    pub day: u16,
    pub sessions: Vec<SessionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEntry {
    pub id: String,
    pub role: UserRole,
    pub days: Vec<DayEntry>,
}

/// Dataset manifest: session metadata plus relative payload paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub sample_rate: f64,
    pub seed: u64,
    pub payload_kind: String,
    pub users: Vec<UserEntry>,
}

pub const MANIFEST_FORMAT: &str = "echoid-manifest-v1";

impl Manifest {
    pub fn new(sample_rate: f64, seed: u64, payload_kind: &str) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            sample_rate,
            seed,
            payload_kind: payload_kind.into(),
            users: Vec::new(),
        }
    }

    pub fn user(&self, id: &str) -> Option<&UserEntry> {
        self.users.iter().find(|u| u.id == id)
    }

    pub fn users_with_role(&self, role: UserRole) -> Vec<&UserEntry> {
        self.users.iter().filter(|u| u.role == role).collect()
    }

    /// Structural checks. Duplicate session identifiers are classified as
    /// leakage: one identifier feeding two different recordings makes
    /// train/test separation meaningless.
    pub fn validate(&self, base: &Path, check_paths: bool) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "manifest format '{}' unsupported",
                self.format
            )));
        }
        let mut seen = BTreeSet::new();
        for user in &self.users {
            for day in &user.days {
                for sess in &day.sessions {
                    if !seen.insert(sess.id.clone()) {
                        return Err(Error::Leakage(format!(
                            "session id '{}' appears more than once in the manifest",
                            sess.id
                        )));
                    }
                    if check_paths && !base.join(&sess.path).exists() {
                        return Err(Error::Data(format!(
                            "payload for session '{}' missing at {}",
                            sess.id, sess.path
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let json = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.validate(base, true)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Digest of any serializable configuration.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Format(format!("digest encode: {e}")))?;
    Ok(sha256_hex(&json))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
