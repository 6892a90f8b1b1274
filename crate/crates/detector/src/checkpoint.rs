//! Binary checkpoints of a training run.
//!
//! Layout: the magic `AQUACKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, the parameter tensors
//! followed by the momentum buffers as little-endian `f64`, and finally the
//! SHA-256 of everything before it.

use std::path::Path;

use aqua_autodiff::{ParamStore, Sgd, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DetectorConfig, DgConfig, TrainConfig, TrainMode};
use crate::detector::Detector;
use crate::error::{DetectorError, Result};
use crate::train::{TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"AQUACKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
/// Header sizes beyond this are rejected before allocation.
const MAX_HEADER: u64 = 1 << 24;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    detector: DetectorConfig,
    dg: DgConfig,
    train: TrainConfig,
    mode: TrainMode,
    state: TrainState,
    tensors: Vec<TensorEntry>,
}

/// Serialise a trainer, weights and optimiser state included.
pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let params = trainer.detector.params();
    let header = Header {
        detector: trainer.detector.config().clone(),
        dg: trainer.dg.clone(),
        train: trainer.train.clone(),
        mode: trainer.mode,
        state: trainer.state.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + json.len() + 16 * params.num_scalars() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors().iter().chain(trainer.sgd.velocity()) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 of an encoded checkpoint.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DetectorError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DetectorError::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DetectorError::Checkpoint("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Tensor::new(shape, data))
    }
}

/// Parse and verify a checkpoint. The configured architecture must match
/// the stored tensors exactly.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
        return Err(DetectorError::Checkpoint("too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(DetectorError::Checkpoint("bad magic".into()));
    }
    let mut r = Reader {
        bytes: &bytes[..bytes.len() - DIGEST_LEN],
        pos: MAGIC.len(),
    };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DetectorError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_len = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(DetectorError::Checkpoint("checksum mismatch".into()));
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if header_len > MAX_HEADER {
        return Err(DetectorError::Checkpoint(format!("header of {header_len} bytes")));
    }
    let header: Header = serde_json::from_slice(r.take(header_len as usize)?)
        .map_err(|e| DetectorError::Checkpoint(format!("header: {e}")))?;

    // Nothing is allocated from header sizes until the payload length agrees.
    header.detector.validate()?;
    header.dg.validate()?;
    header.train.validate()?;
    let payload = header
        .tensors
        .iter()
        .try_fold(0usize, |acc, e| {
            e.shape.iter().try_fold(1usize, |n, &d| n.checked_mul(d)).and_then(|n| acc.checked_add(n))
        })
        .and_then(|n| n.checked_mul(16));
    if payload != Some(r.bytes.len() - r.pos) {
        return Err(DetectorError::Checkpoint("payload size does not match the tensor table".into()));
    }
    let reference = crate::model::param_shapes(&header.detector);
    if reference.len() != header.tensors.len()
        || reference
            .iter()
            .zip(&header.tensors)
            .any(|((name, shape), e)| *name != e.name || *shape != e.shape)
    {
        return Err(DetectorError::Checkpoint("tensor table does not match the configured architecture".into()));
    }

    let mut params = ParamStore::new();
    for e in &header.tensors {
        params.add(e.name.clone(), r.tensor(&e.shape)?);
    }
    let velocity = header.tensors.iter().map(|e| r.tensor(&e.shape)).collect::<Result<Vec<_>>>()?;
    if r.pos != r.bytes.len() {
        return Err(DetectorError::Checkpoint("trailing bytes".into()));
    }
    if velocity.iter().any(|t| !t.all_finite()) {
        return Err(DetectorError::Checkpoint("momentum is not finite".into()));
    }
    let detector = Detector::from_params(header.detector, params)?;
    let mut state = header.state;
    state.parent_hash = Some(digest_hex(bytes));
    Ok(Trainer {
        sgd: Sgd::from_velocity(header.train.sgd(), velocity),
        detector,
        state,
        train: header.train,
        dg: header.dg,
        mode: header.mode,
    })
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<String> {
    let bytes = encode(trainer);
    std::fs::write(path, &bytes)?;
    Ok(digest_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Trainer> {
    decode(&std::fs::read(path)?)
}
