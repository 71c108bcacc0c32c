//! Sparse on-disk parameter format.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! header   "SPRS" | version u32 | spec hash u64 | tensor count u32
//! tensor   name_len u32 | flags u8 | ndim u8 | reserved u16 | nnz u32
//!          name bytes | dims u64 × ndim
//!          sparse: indices u32 × nnz, then values f32 × nnz
//!          dense:  values f32 × size
//! ```
//!
//! Flag bit 0 marks a dense tensor, bit 1 a prunable one. A prunable tensor
//! is written dense exactly when its mask is all ones.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::model::{Mask, ModelError, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPRS";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;
/// Fixed per-tensor bytes before the name.
pub const TENSOR_FIXED_BYTES: usize = 12;

const FLAG_DENSE: u8 = 1;
const FLAG_PRUNABLE: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a sparse checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("model spec hash {found:016x} does not match expected {expected:016x}")]
    SpecHash { expected: u64, found: u64 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// Serializes `store` in canonical form.
pub fn encode(store: &ParamStore, spec_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * store.remaining() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    out.extend_from_slice(&spec_hash.to_be_bytes());
    out.extend_from_slice(&(store.len() as u32).to_be_bytes());
    for (name, entry) in store.iter() {
        let dense = entry.mask().all_ones();
        let mut flags = 0;
        if dense {
            flags |= FLAG_DENSE;
        }
        if entry.prunable() {
            flags |= FLAG_PRUNABLE;
        }
        let shape = entry.value().shape();
        out.extend_from_slice(&(name.len() as u32).to_be_bytes());
        out.push(flags);
        out.push(shape.len() as u8);
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&(entry.remaining() as u32).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_be_bytes());
        }
        let values = entry.value().data();
        if dense {
            for v in values {
                out.extend_from_slice(&v.to_bits().to_be_bytes());
            }
        } else {
            let live: Vec<usize> = (0..values.len()).filter(|&i| entry.mask().get(i)).collect();
            for &i in &live {
                out.extend_from_slice(&(i as u32).to_be_bytes());
            }
            for &i in &live {
                out.extend_from_slice(&values[i].to_bits().to_be_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_bits(self.u32()?))
    }
}

/// Reads the spec hash stored in a checkpoint header.
pub fn decode_header(bytes: &[u8]) -> Result<u64, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.u64()
}

/// Parses a checkpoint, optionally requiring a particular spec hash.
pub fn decode(bytes: &[u8], expected_hash: Option<u64>) -> Result<(u64, ParamStore), CheckpointError> {
    let hash = decode_header(bytes)?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(CheckpointError::SpecHash { expected, found: hash });
        }
    }
    let mut r = Reader {
        bytes,
        pos: HEADER_BYTES - 4,
    };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let flags = r.u8()?;
        let ndim = r.u8()? as usize;
        if r.u16()? != 0 || flags & !(FLAG_DENSE | FLAG_PRUNABLE) != 0 {
            return Err(corrupt("reserved bits set"));
        }
        let nnz = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let size = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("shape overflows"))?;
        let dense = flags & FLAG_DENSE != 0;
        let prunable = flags & FLAG_PRUNABLE != 0;
        if nnz > size {
            return Err(corrupt(format!("{name}: nnz {nnz} exceeds size {size}")));
        }
        let (values, mask) = if dense {
            if nnz != size {
                return Err(corrupt(format!("{name}: dense tensor with nnz {nnz} != size {size}")));
            }
            let values = (0..size).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            (values, Mask::ones(size))
        } else {
            if !prunable {
                return Err(corrupt(format!("{name}: sparse tensor is not prunable")));
            }
            let indices = (0..nnz)
                .map(|_| r.u32().map(|i| i as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i >= size) {
                return Err(corrupt(format!(
                    "{name}: indices not strictly increasing within bounds"
                )));
            }
            let mut values = vec![0.0f32; size];
            let mut bits = vec![false; size];
            for &i in &indices {
                values[i] = r.f32()?;
                bits[i] = true;
            }
            (values, Mask::from_bits(bits))
        };
        let tensor = Tensor::new(shape, values).map_err(|e| corrupt(format!("{name}: {e}")))?;
        store.insert_masked(&name, tensor, mask, prunable)?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((hash, store))
}

/// Writes `store` atomically (temp file, then rename). Returns bytes written.
pub fn save_sparse(store: &ParamStore, spec_hash: u64, path: &Path) -> Result<usize, CheckpointError> {
    let bytes = encode(store, spec_hash);
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(bytes.len())
}

pub fn load_sparse(path: &Path, expected_hash: Option<u64>) -> Result<(u64, ParamStore), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, expected_hash)
}

/// File size predicted by the layout for `store`.
pub fn expected_size(store: &ParamStore) -> usize {
    HEADER_BYTES
        + store
            .iter()
            .map(|(name, e)| {
                let payload = if e.mask().all_ones() {
                    4 * e.value().len()
                } else {
                    8 * e.remaining()
                };
                TENSOR_FIXED_BYTES + name.len() + 8 * e.value().ndim() + payload
            })
            .sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lenet, LenetVariant};

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("A", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5), true)
            .unwrap();
        s.insert("A.bias", Tensor::from_fn(&[3], |i| -(i as f32)), false)
            .unwrap();
        s.insert("B", Tensor::from_fn(&[4, 2], |i| 0.1 * i as f32), true)
            .unwrap();
        s.prune_at("A", 1).unwrap();
        s.prune_at("A", 4).unwrap();
        s
    }

    fn bit_equal(a: &ParamStore, b: &ParamStore) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|((na, ea), (nb, eb))| {
                na == nb
                    && ea.prunable() == eb.prunable()
                    && ea.mask() == eb.mask()
                    && ea.value().shape() == eb.value().shape()
                    && ea
                        .value()
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                        .eq(eb.value().data().iter().map(|v| v.to_bits()))
            })
    }

    #[test]
    fn roundtrip_and_resave_are_identical() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sprs");
        let n = save_sparse(&s, 7, &p).unwrap();
        assert_eq!(n, fs::metadata(&p).unwrap().len() as usize);
        let (hash, back) = load_sparse(&p, Some(7)).unwrap();
        assert_eq!(hash, 7);
        assert!(bit_equal(&s, &back));
        let q = dir.path().join("b.sprs");
        save_sparse(&back, 7, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }

    #[test]
    fn hand_laid_out_bytes() {
        let mut s = ParamStore::new();
        s.insert("W", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), true)
            .unwrap();
        s.prune_at("W", 1).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"SPRS");
        want.extend_from_slice(&[0, 0, 0, 1]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 9]);
        want.extend_from_slice(&[0, 0, 0, 1]);
        want.extend_from_slice(&[0, 0, 0, 1, 2, 2, 0, 0, 0, 0, 0, 2]);
        want.push(b'W');
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 1]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 3]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 2]);
        want.extend_from_slice(&[0x3f, 0x80, 0, 0, 0x40, 0x40, 0, 0]);
        assert_eq!(encode(&s, 9), want);
    }

    #[test]
    fn all_masked_tensor_has_no_payload() {
        let mut s = ParamStore::new();
        s.insert("W", Tensor::ones(&[2, 2]), true).unwrap();
        for i in 0..4 {
            s.prune_at("W", i).unwrap();
        }
        let bytes = encode(&s, 0);
        assert_eq!(bytes.len(), HEADER_BYTES + TENSOR_FIXED_BYTES + 1 + 16);
        let (_, back) = decode(&bytes, None).unwrap();
        assert_eq!(back.get("W").unwrap().remaining(), 0);
    }

    #[test]
    fn size_law_holds_for_dense_and_pruned_lenet() {
        let (spec, mut s) = build_lenet(LenetVariant::Caffe431k, 1);
        let dense = encode(&s, spec.fingerprint());
        assert_eq!(dense.len(), expected_size(&s));
        assert!(dense.len() >= 4 * s.total_params());
        for name in ["Conv2", "FC1"] {
            for i in (0..s.get(name).unwrap().value().len()).step_by(3) {
                s.prune_at(name, i).unwrap();
            }
        }
        assert_eq!(encode(&s, spec.fingerprint()).len(), expected_size(&s));
    }

    #[test]
    fn rejects_bad_magic_version_hash_and_truncation() {
        let good = encode(&sample(), 5);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, None), Err(CheckpointError::BadMagic)));
        let mut bad = good.clone();
        bad[7] = 2;
        assert!(matches!(decode(&bad, None), Err(CheckpointError::Version(2))));
        assert!(matches!(
            decode(&good, Some(6)),
            Err(CheckpointError::SpecHash { expected: 6, found: 5 })
        ));
        for cut in [3, 19, 30, good.len() - 1] {
            assert!(
                matches!(decode(&good[..cut], None), Err(CheckpointError::Truncated(_))),
                "{cut}"
            );
        }
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long, None), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn tampered_index_order_is_corrupt() {
        let mut s = ParamStore::new();
        s.insert("W", Tensor::from_fn(&[1, 4], |i| i as f32 + 1.0), true)
            .unwrap();
        s.prune_at("W", 0).unwrap();
        let mut bytes = encode(&s, 0);
        // indices 1,2,3 start right after header, fixed part, name and one dim pair
        let at = HEADER_BYTES + TENSOR_FIXED_BYTES + 1 + 16;
        assert_eq!(&bytes[at..at + 8], &[0, 0, 0, 1, 0, 0, 0, 2]);
        bytes[at + 3] = 2;
        bytes[at + 7] = 1;
        assert!(matches!(decode(&bytes, None), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn failed_save_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.sprs");
        assert!(save_sparse(&sample(), 0, &p).is_err());
        assert!(!p.exists());
    }
}
