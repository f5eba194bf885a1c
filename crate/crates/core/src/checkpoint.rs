//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field          | bytes                                   |
//! |----------------|-----------------------------------------|
//! | magic          | `S4FM`                                  |
//! | format version | u32                                     |
//! | config digest  | 32 (SHA-256, see [`RunConfig::digest`]) |
//!
//! followed, until the end of the file, by one record per tensor: `u32`
//! name length, UTF-8 name, `u8` dtype tag (`1` = f64), `u32` rank, one
//! `u64` per dimension and the raw f64 data.
//!
//! [`RunConfig::digest`]: crate::config::RunConfig::digest

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"S4FM";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; DIGEST_LEN],
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot of every tensor in the store, in registration order.
    pub fn from_store(digest: [u8; DIGEST_LEN], store: &ParamStore) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        Self { digest, tensors }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. The error message locates the first problem.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err("not a checkpoint (bad magic bytes)".into());
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            ));
        }
        let digest: [u8; DIGEST_LEN] = r.take(DIGEST_LEN, "config digest")?.try_into().unwrap();
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let i = tensors.len();
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| format!("tensor {i} has a non-UTF-8 name"))?
                .to_string();
            let dtype = r.u8("dtype tag")?;
            if dtype != DTYPE_F64 {
                return Err(format!("tensor {name}: unknown dtype tag {dtype}"));
            }
            let rank = r.u32("rank")?;
            let mut shape = Vec::new();
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64("dimension")?)
                    .map_err(|_| format!("tensor {name}: dimension too large"))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| format!("tensor {name}: size overflows"))?;
                shape.push(d);
            }
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| format!("tensor {name}: size overflows"))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
            tensors.push((name, t));
        }
        Ok(Self { digest, tensors })
    }

    /// Copies the tensors into a store built for the same configuration.
    /// Names, order and shapes must match exactly.
    pub fn apply(&self, expected_digest: &[u8; DIGEST_LEN], store: &mut ParamStore) -> Result<()> {
        if &self.digest != expected_digest {
            return Err(Error::DigestMismatch);
        }
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                ids.len()
            )));
        }
        for (id, (name, t)) in ids.into_iter().zip(&self.tensors) {
            if store.name(id) != name {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} found where {} was expected",
                    store.name(id)
                )));
            }
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

fn checkpoint_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes the store to `path` through a temporary file in the same
/// directory, so readers never see a partial checkpoint.
pub fn save(path: &Path, digest: [u8; DIGEST_LEN], store: &ParamStore) -> Result<()> {
    let bytes = Checkpoint::from_store(digest, store).encode();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| checkpoint_error(path, e.to_string()))?;
    Checkpoint::decode(&bytes).map_err(|m| checkpoint_error(path, m))
}

/// Loads `path` into `store`, failing on a digest mismatch.
pub fn load_into(path: &Path, digest: &[u8; DIGEST_LEN], store: &mut ParamStore) -> Result<()> {
    load(path)?.apply(digest, store).map_err(|e| match e {
        Error::InvalidArgument(m) => checkpoint_error(path, m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        s.add(
            "m",
            Tensor::matrix(2, 3, vec![0.5, -0.0, f64::MIN_POSITIVE, 3.0, 4.0, 1e300]).unwrap(),
            false,
        );
        s.add("e", Tensor::zeros(vec![0, 4]), true);
        s
    }

    #[test]
    fn layout_of_a_single_tensor() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let bytes = Checkpoint::from_store([7; 32], &s).encode();
        let mut expect = b"S4FM".to_vec();
        expect.extend([1, 0, 0, 0]);
        expect.extend([7; 32]);
        expect.extend([1, 0, 0, 0, b'w', 1]);
        expect.extend([1, 0, 0, 0]);
        expect.extend([2, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.s4fm"), dir.path().join("b.s4fm"));
        let src = store();
        save(&a, [3; 32], &src).unwrap();
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 9.0);
        }
        load_into(&a, &[3; 32], &mut dst).unwrap();
        save(&b, [3; 32], &dst).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let negative_zero = dst.get(dst.id("m").unwrap()).data()[1];
        assert!(negative_zero == 0.0 && negative_zero.is_sign_negative());
    }

    #[test]
    fn digest_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.s4fm");
        save(&p, [1; 32], &store()).unwrap();
        assert!(matches!(
            load_into(&p, &[2; 32], &mut store()),
            Err(Error::DigestMismatch)
        ));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let full = Checkpoint::from_store([0; 32], &store());
        let bytes = full.encode();
        for n in 0..bytes.len() {
            // a cut on a tensor boundary decodes, but then lacks tensors
            match Checkpoint::decode(&bytes[..n]) {
                Err(_) => {}
                Ok(ck) => assert!(ck.apply(&[0; 32], &mut store()).is_err(), "prefix {n}"),
            }
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).unwrap_err().contains("truncated"));
    }

    #[test]
    fn header_corruption_is_rejected() {
        let bytes = Checkpoint::from_store([0; 32], &store()).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("version"));
        let mut bad = bytes;
        // dtype tag of the first tensor
        bad[4 + 4 + 32 + 4 + 1] = 2;
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("dtype"));
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let ck = Checkpoint::from_store([0; 32], &store());
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(vec![2]), true);
        assert!(ck.apply(&[0; 32], &mut other).is_err());
        let mut renamed = ParamStore::new();
        renamed.add("v", Tensor::zeros(vec![2]), true);
        renamed.add("m", Tensor::zeros(vec![2, 3]), false);
        renamed.add("e", Tensor::zeros(vec![0, 4]), true);
        assert!(ck.apply(&[0; 32], &mut renamed).is_err());
        let mut reshaped = store();
        let id = reshaped.id("m").unwrap();
        let wrong = Tensor::zeros(vec![3, 2]);
        let ck2 = Checkpoint {
            tensors: vec![
                ck.tensors[0].clone(),
                ("m".into(), wrong),
                ck.tensors[2].clone(),
            ],
            ..ck.clone()
        };
        assert!(ck2.apply(&[0; 32], &mut reshaped).is_err());
        assert_eq!(reshaped.get(id).shape(), &[2, 3]);
    }
}
