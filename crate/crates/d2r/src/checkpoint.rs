//! Versioned binary checkpoints of a [`ModelState`].
//!
//! ```text
//! magic        4 bytes  "D2RC"
//! version      u16 LE
//! role         u8       0 = guide, 1 = target
//! activation   u8       0 = relu
//! init_seed    u64 LE
//! layer count  u32 LE   number of widths
//! widths       u64 LE each
//! payload      f64 LE each, w0 b0 w1 b1 … in row-major order
//! crc32        u32 LE   over every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use d2r_core::model::Layer;
use d2r_core::{Activation, ModelSpec, ModelState, Role, Tensor};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"D2RC";
pub const FORMAT_VERSION: u16 = 1;

const FIXED_HEADER: usize = 4 + 2 + 1 + 1 + 8 + 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn encode(state: &ModelState) -> Vec<u8> {
    let spec = state.spec();
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * spec.layer_widths.len() + 8 * spec.parameter_count() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match state.role() {
        Role::Guide => 0,
        Role::Target => 1,
    });
    out.push(match spec.activation {
        Activation::Relu => 0,
    });
    out.extend_from_slice(&spec.init_seed.to_le_bytes());
    out.extend_from_slice(&(spec.layer_widths.len() as u32).to_le_bytes());
    for &w in &spec.layer_widths {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    for p in state.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        out
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(CheckpointError::Truncated {
            expected: FIXED_HEADER,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    if bytes.len() < FIXED_HEADER {
        return Err(CheckpointError::Truncated {
            expected: FIXED_HEADER,
            found: bytes.len(),
        });
    }
    let mut r = Reader { bytes, at: 6 };
    let [role] = r.take::<1>();
    let [activation] = r.take::<1>();
    let init_seed = u64::from_le_bytes(r.take());
    let n_widths = u32::from_le_bytes(r.take()) as usize;

    // Sizes are computed with checked arithmetic so a corrupted header
    // cannot overflow before the checksum has had its say.
    let widths_end = n_widths.checked_mul(8).and_then(|w| w.checked_add(FIXED_HEADER));
    let expected = widths_end.and_then(|end| {
        if bytes.len() < end {
            return Some(end);
        }
        let widths: Vec<usize> = (0..n_widths)
            .map(|i| u64::from_le_bytes(bytes[FIXED_HEADER + 8 * i..FIXED_HEADER + 8 * i + 8].try_into().unwrap()) as usize)
            .collect();
        let params = widths
            .windows(2)
            .try_fold(0usize, |acc, w| w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc))?;
        params.checked_mul(8)?.checked_add(end)?.checked_add(4)
    });
    let stored = bytes.len().checked_sub(4).map(|n| u32::from_le_bytes(bytes[n..].try_into().unwrap()));
    let computed = crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)]);
    if stored != Some(computed) {
        if let Some(expected) = expected.filter(|&e| bytes.len() < e) {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        return Err(CheckpointError::Checksum {
            stored: stored.unwrap_or(0),
            computed,
        });
    }
    let expected = expected.ok_or_else(|| CheckpointError::Malformed("layer widths overflow".into()))?;
    if expected != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "header describes {expected} bytes, file has {}",
            bytes.len()
        )));
    }

    let role = match role {
        0 => Role::Guide,
        1 => Role::Target,
        other => return Err(CheckpointError::Malformed(format!("unknown role tag {other}"))),
    };
    let activation = match activation {
        0 => Activation::Relu,
        other => return Err(CheckpointError::Malformed(format!("unknown activation tag {other}"))),
    };
    let widths: Vec<usize> = (0..n_widths).map(|_| u64::from_le_bytes(r.take()) as usize).collect();
    let spec = ModelSpec {
        layer_widths: widths,
        activation,
        init_seed,
    };
    spec.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut read_tensor = |shape: Vec<usize>| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| f64::from_le_bytes(r.take())).collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    };
    let mut layers = Vec::with_capacity(spec.layer_widths.len() - 1);
    for w in spec.layer_widths.windows(2) {
        let weight = read_tensor(vec![w[0], w[1]])?;
        let bias = read_tensor(vec![w[1]])?;
        layers.push(Layer { weight, bias });
    }
    ModelState::from_layers(spec, role, layers).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
