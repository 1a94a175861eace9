//! Binary checkpoint of named tensors with freeze masks.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MDUCKPT1"  u32 version  u32 count
//! count × { u16 name_len, name, u8 rank, rank × u64 dim,
//!           len × f32, u8 has_mask, [ceil(len/8) bytes, LSB first] }
//! u32 crc32 of everything before it
//! ```

use std::path::Path;

use mdunet::ModelGraph;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MDUCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unknown checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has {found} values, model expects {expected}")]
    ShapeMismatch { name: String, expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

/// Tensors kept sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    tensors: Vec<NamedTensor>,
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

impl Checkpoint {
    pub fn new(mut tensors: Vec<NamedTensor>) -> Self {
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { tensors }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }

    /// Parameters (with masks when any element is frozen) and BN running
    /// statistics.
    pub fn from_model(model: &ModelGraph) -> Self {
        let mut tensors = Vec::new();
        for p in model.params() {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                dims: p.tensor.shape().0.to_vec(),
                values: p.values().to_vec(),
                mask: (p.frozen_count() > 0).then(|| p.frozen_mask.clone()),
            });
        }
        for (name, st) in model.bn_states() {
            for (suffix, v) in [(RUNNING_MEAN, &st.running_mean), (RUNNING_VAR, &st.running_var)] {
                tensors.push(NamedTensor {
                    name: format!("{name}{suffix}"),
                    dims: vec![v.len()],
                    values: v.clone(),
                    mask: None,
                });
            }
        }
        Self::new(tensors)
    }

    /// Overwrites every parameter, mask and running statistic of `model`.
    pub fn apply_to(&self, model: &mut ModelGraph) -> Result<(), CheckpointError> {
        let fetch = |name: &str, expected: usize| -> Result<&NamedTensor, CheckpointError> {
            let t = self.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
            if t.values.len() != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.into(),
                    expected,
                    found: t.values.len(),
                });
            }
            Ok(t)
        };
        for p in model.params() {
            fetch(&p.name, p.len())?;
        }
        for (name, st) in model.bn_states() {
            fetch(&format!("{name}{RUNNING_MEAN}"), st.running_mean.len())?;
            fetch(&format!("{name}{RUNNING_VAR}"), st.running_var.len())?;
        }
        for p in model.params_mut() {
            let t = fetch(&p.name, p.len())?;
            p.tensor.data_mut().copy_from_slice(&t.values);
            p.frozen_mask = t.mask.clone().unwrap_or_else(|| vec![false; t.values.len()]);
        }
        for (name, st) in model.bn_states_mut() {
            st.running_mean = fetch(&format!("{name}{RUNNING_MEAN}"), st.running_mean.len())?.values.clone();
            st.running_var = fetch(&format!("{name}{RUNNING_VAR}"), st.running_var.len())?.values.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &t.mask {
                None => out.push(0),
                Some(mask) => {
                    out.push(1);
                    let mut bits = vec![0u8; mask.len().div_ceil(8)];
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                    out.extend_from_slice(&bits);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 12 {
            return Err(CheckpointError::Truncated);
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader {
            buf: payload,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            if rank > 4 {
                return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= payload.len())
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` has implausible dims {dims:?}")))?;
            let values = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let mask = match r.u8()? {
                0 => None,
                1 => {
                    let bits = r.take(len.div_ceil(8))?;
                    Some((0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
                }
                f => return Err(CheckpointError::Malformed(format!("`{name}` has mask flag {f}"))),
            };
            tensors.push(NamedTensor {
                name,
                dims,
                values,
                mask,
            });
        }
        if r.pos != payload.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        if tensors.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(CheckpointError::Malformed("tensors not sorted by unique name".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(vec![
            NamedTensor {
                name: "b".into(),
                dims: vec![1, 1, 1, 3],
                values: vec![1.0, -0.0, f32::MIN_POSITIVE],
                mask: Some(vec![true, false, true]),
            },
            NamedTensor {
                name: "a".into(),
                dims: vec![2],
                values: vec![0.5, 2.0],
                mask: None,
            },
        ])
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(c.tensors()[0].name, "a");
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("b").unwrap().values[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Crc { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT...."), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn unknown_version() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
    }
}
