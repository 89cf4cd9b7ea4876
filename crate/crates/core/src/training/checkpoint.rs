//! Binary checkpoint format.
//!
//! ```text
//! "DUNW" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
//! record*: u16 name length | name | u8 rank | rank x u64 extent | f32 payload
//! ```
//!
//! Integers and floats are little-endian. Checkpoints hold one record per
//! model parameter and one per momentum buffer, the latter named with
//! [`MOMENTUM_PREFIX`].

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DUNW";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "momentum/";

/// One named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serialise `metadata` and `records`.
pub fn write_records(metadata: &str, records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_len = u32::try_from(metadata.len()).map_err(|_| Error::Checkpoint("metadata too long".into()))?;
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    for r in records {
        let name_len =
            u16::try_from(r.name.len()).map_err(|_| Error::Checkpoint(format!("record name `{}` too long", r.name)))?;
        let rank =
            u8::try_from(r.dims.len()).map_err(|_| Error::Checkpoint(format!("record `{}` rank too high", r.name)))?;
        if r.dims.iter().product::<usize>() != r.data.len() {
            return Err(Error::Checkpoint(format!(
                "record `{}` has {} values for extents {:?}",
                r.name,
                r.data.len(),
                r.dims
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(rank);
        for &d in &r.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(4 * r.data.len());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: {what} needs {n} bytes at offset {} but the file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parse a record file into its metadata string and records.
pub fn read_records(bytes: &[u8]) -> Result<(String, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {:?}", MAGIC)));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = u32::from_le_bytes(r.array("metadata length")?) as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata is not UTF-8: {e}")))?
        .to_string();
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = u16::from_le_bytes(r.array("record name length")?) as usize;
        let name = String::from_utf8(r.take(name_len, "record name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        let rank = r.take(1, "record rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(r.array("record extent")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes_needed = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}` extents {dims:?} overflow")))?;
        let payload = r.take(bytes_needed, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok((meta, records))
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
}

/// Model, optimiser state and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    /// Number of completed optimisation steps.
    pub step: u64,
}

fn expected_names(config: &ModelConfig) -> BTreeSet<String> {
    param_specs(config)
        .into_iter()
        .flat_map(|s| [format!("{MOMENTUM_PREFIX}{}", s.name), s.name])
        .collect()
}

fn name_set_error(expected: &BTreeSet<String>, found: &BTreeSet<String>) -> Error {
    let missing: Vec<_> = expected.difference(found).take(5).cloned().collect();
    let unexpected: Vec<_> = found.difference(expected).take(5).cloned().collect();
    Error::Checkpoint(format!(
        "name-set mismatch: missing {missing:?}, unexpected {unexpected:?}"
    ))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&Metadata {
            model: self.model.config().clone(),
            train: self.train.clone(),
            step: self.step,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let specs = self.model.specs();
        let mut records = Vec::with_capacity(2 * specs.len());
        for (spec, p) in specs.iter().zip(self.model.params()) {
            records.push(Record {
                name: spec.name.clone(),
                dims: spec.dims.clone(),
                data: p.data().to_vec(),
            });
        }
        for (spec, v) in specs.iter().zip(&self.optimizer.velocities) {
            records.push(Record {
                name: format!("{MOMENTUM_PREFIX}{}", spec.name),
                dims: spec.dims.clone(),
                data: v.data().to_vec(),
            });
        }
        write_records(&meta, &records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, records) = read_records(bytes)?;
        let meta: Metadata =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        meta.model.validate()?;
        let found: BTreeSet<String> = records.iter().map(|r| r.name.clone()).collect();
        let expected = expected_names(&meta.model);
        if found != expected || found.len() != records.len() {
            return Err(name_set_error(&expected, &found));
        }
        let mut by_name: HashMap<String, Record> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
        let specs = param_specs(&meta.model);
        let mut take = |name: &str, spec: &crate::model::ParamSpec| -> Result<Tensor<f32>> {
            let r = by_name.remove(name).expect("name set verified");
            if r.dims != spec.dims {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` has extents {:?}, expected {:?}",
                    r.dims, spec.dims
                )));
            }
            Tensor::from_vec(spec.shape, r.data)
        };
        let params = specs.iter().map(|s| take(&s.name, s)).collect::<Result<Vec<_>>>()?;
        let velocities = specs
            .iter()
            .map(|s| take(&format!("{MOMENTUM_PREFIX}{}", s.name), s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model: Model::from_parameters(meta.model, params)?,
            optimizer: OptimizerState { velocities },
            train: meta.train,
            step: meta.step,
        })
    }

    /// Check that this checkpoint fits a model built from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let have = self.model.config();
        let (want_names, have_names) = (expected_names(expected), expected_names(have));
        if want_names != have_names {
            return Err(name_set_error(&want_names, &have_names));
        }
        if have != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {have:?}, but {expected:?} was requested"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    optimizer: &OptimizerState,
    train: &TrainConfig,
    step: u64,
) -> Result<()> {
    let ckpt = Checkpoint {
        model: model.clone(),
        optimizer: optimizer.clone(),
        train: train.clone(),
        step,
    };
    let bytes = ckpt.to_bytes()?;
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
