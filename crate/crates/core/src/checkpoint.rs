//! Checkpoint container.
//!
//! ```text
//! "SSPCKPT\0"            8 bytes
//! version                u32 LE
//! header length          u64 LE
//! header                 UTF-8 JSON (see `Header`)
//! tensor data            f64 LE, row-major, at the offsets the header names
//! digest                 SHA-256 of every preceding byte
//! ```
//!
//! Student and teacher tensors are stored in separate sections. The rng
//! state is the run seed plus the progress counters: every stream the
//! trainer uses is derived from those, so nothing else needs saving.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, Model, Teacher};
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::tape::{Matrix, ParamSet};
use crate::trainer::{Adam, Phase, Progress, StepLog, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"SSPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    /// Mean loss report over the steps run so far, if any.
    pub metrics: Option<LossReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab_hash: String,
    pub train_config: Option<TrainConfig>,
    pub rng: Option<RngState>,
    pub student: Option<Model>,
    pub teacher: Option<Teacher>,
    pub optimizer: Option<OptimizerState>,
    pub log: Vec<StepLog>,
}

#[derive(Serialize, Deserialize)]
struct Section {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    config: EncoderConfig,
    with_heads: bool,
    #[serde(default)]
    max_len: Option<usize>,
    tensors: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
struct StoredOptimizer {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Section>,
    v: Vec<Section>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    vocab_hash: String,
    train_config: Option<TrainConfig>,
    rng: Option<RngState>,
    student: Option<StoredModel>,
    teacher: Option<StoredModel>,
    optimizer: Option<StoredOptimizer>,
    log: Vec<StepLog>,
    data_len: usize,
}

fn push_tensors(params: &ParamSet, data: &mut Vec<u8>) -> Vec<Section> {
    params
        .iter()
        .map(|(name, t)| {
            let offset = data.len();
            for v in t.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            Section {
                name: name.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
                offset,
            }
        })
        .collect()
}

fn read_tensors(sections: &[Section], data: &[u8]) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for s in sections {
        let n = s.rows.checked_mul(s.cols).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let bytes = s
            .offset
            .checked_add(n * 8)
            .and_then(|end| data.get(s.offset..end))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} lies outside the data section", s.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_shape_vec((s.rows, s.cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.add(s.name.clone(), m);
    }
    Ok(params)
}

fn store_model(model: &Model, max_len: Option<usize>, data: &mut Vec<u8>) -> StoredModel {
    StoredModel {
        config: model.config().clone(),
        with_heads: model.has_heads(),
        max_len,
        tensors: push_tensors(model.params(), data),
    }
}

fn restore_model(stored: &StoredModel, data: &[u8]) -> Result<Model> {
    let params = read_tensors(&stored.tensors, data)?;
    Model::from_params(stored.config.clone(), stored.with_heads, params)
        .map_err(|e| Error::Checkpoint(format!("stored tensors do not fit the encoder: {e}")))
}

fn adam_as_paramset(like: &ParamSet, tensors: &[Matrix]) -> ParamSet {
    let mut p = ParamSet::new();
    for ((name, _), t) in like.iter().zip(tensors) {
        p.add(name, t.clone());
    }
    p
}

impl Checkpoint {
    /// A checkpoint holding only model weights.
    pub fn weights(phase: Phase, vocab_hash: String, student: Option<Model>, teacher: Option<Teacher>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                phase,
                step: 0,
                epoch: 0,
                config_hash: String::new(),
                metrics: None,
            },
            vocab_hash,
            train_config: None,
            rng: None,
            student,
            teacher,
            optimizer: None,
            log: Vec::new(),
        }
    }

    /// Snapshot of a trainer in flight, resumable with `into_trainer`.
    pub fn from_trainer(trainer: &Trainer, vocab_hash: String, teacher: Option<Teacher>) -> Self {
        let params = trainer.model.params();
        let adam = &trainer.optimizer;
        Checkpoint {
            meta: CheckpointMeta {
                phase: trainer.phase,
                step: trainer.progress.step,
                epoch: trainer.progress.epoch,
                config_hash: trainer.config.hash(),
                metrics: (!trainer.log.is_empty()).then(|| crate::trainer::mean_report(&trainer.log)),
            },
            vocab_hash,
            train_config: Some(trainer.config.clone()),
            rng: Some(RngState {
                seed: trainer.config.seed,
                progress: trainer.progress,
            }),
            student: Some(trainer.model.clone()),
            teacher,
            optimizer: Some(OptimizerState {
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                t: adam.t,
                m: adam_as_paramset(params, &adam.m),
                v: adam_as_paramset(params, &adam.v),
            }),
            log: trainer.log.clone(),
        }
    }

    /// Rebuilds the trainer; absent optimizer state means a fresh optimizer.
    pub fn into_trainer(self, config: Option<TrainConfig>) -> Result<(Trainer, Option<Teacher>)> {
        let model = self
            .student
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no student model".into()))?;
        let config = config
            .or(self.train_config)
            .ok_or_else(|| Error::Checkpoint("no training configuration given or stored".into()))?;
        let mut trainer = Trainer::new(model, config, self.meta.phase)?;
        if let (Some(opt), Some(rng)) = (self.optimizer, self.rng) {
            trainer.optimizer = Adam {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                t: opt.t,
                m: opt.m.tensors().to_vec(),
                v: opt.v.tensors().to_vec(),
            };
            trainer.progress = rng.progress;
            trainer.log = self.log;
        }
        Ok((trainer, self.teacher))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let student = self.student.as_ref().map(|m| store_model(m, None, &mut data));
        let teacher = self
            .teacher
            .as_ref()
            .map(|t| store_model(t.model(), Some(t.max_len()), &mut data));
        let optimizer = self.optimizer.as_ref().map(|o| StoredOptimizer {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            m: push_tensors(&o.m, &mut data),
            v: push_tensors(&o.v, &mut data),
        });
        let header = Header {
            meta: self.meta.clone(),
            vocab_hash: self.vocab_hash.clone(),
            train_config: self.train_config.clone(),
            rng: self.rng,
            student,
            teacher,
            optimizer,
            log: self.log.clone(),
            data_len: data.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; file is corrupt or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &body[20 + header_len..];
        if data.len() != header.data_len {
            return Err(bad("data section length disagrees with header"));
        }
        let student = header.student.as_ref().map(|s| restore_model(s, data)).transpose()?;
        let teacher = header
            .teacher
            .as_ref()
            .map(|s| {
                let max_len = s.max_len.ok_or_else(|| bad("teacher section lacks max_len"))?;
                Ok::<_, Error>(Teacher::freeze(restore_model(s, data)?, max_len))
            })
            .transpose()?;
        let optimizer = header
            .optimizer
            .as_ref()
            .map(|o| {
                Ok::<_, Error>(OptimizerState {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    t: o.t,
                    m: read_tensors(&o.m, data)?,
                    v: read_tensors(&o.v, data)?,
                })
            })
            .transpose()?;
        if let (Some(o), Some(s)) = (&optimizer, &student) {
            let shapes = |p: &ParamSet| p.tensors().iter().map(|t| t.dim()).collect::<Vec<_>>();
            if shapes(&o.m) != shapes(s.params()) || shapes(&o.v) != shapes(s.params()) {
                return Err(bad("optimizer moments do not match the student parameters"));
            }
        }
        Ok(Checkpoint {
            meta: header.meta,
            vocab_hash: header.vocab_hash,
            train_config: header.train_config,
            rng: header.rng,
            student,
            teacher,
            optimizer,
            log: header.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads and, when `expected_vocab_hash` is given, refuses a checkpoint
    /// built against another vocabulary.
    pub fn load(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(expected) = expected_vocab_hash {
            if ckpt.vocab_hash != expected {
                return Err(Error::VocabMismatch {
                    expected: expected.to_string(),
                    found: ckpt.vocab_hash,
                });
            }
        }
        Ok(ckpt)
    }

    /// Checksum of the student's parameters, if present.
    pub fn student_checksum(&self) -> Option<String> {
        self.student.as_ref().map(|m| m.params().checksum())
    }
}
