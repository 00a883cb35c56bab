//! Single-file parameter archives.
//!
//! All integers are little-endian `u32`. Byte layout:
//!
//! | offset          | size  | content                              |
//! |-----------------|-------|--------------------------------------|
//! | 0               | 8     | magic `CMMLCKPT`                     |
//! | 8               | 4     | format version                       |
//! | 12              | 4     | stage tag length `S`                 |
//! | 16              | `S`   | stage tag, UTF-8                     |
//! | 16 + S          | 4     | config hash length `H`               |
//! | 20 + S          | `H`   | config hash, UTF-8                   |
//! | 20 + S + H      | 4     | tensor count `T`                     |
//! | 24 + S + H      | ...   | `T` tensor blocks                    |
//!
//! A tensor block is a name length `N`, `N` bytes of UTF-8 name, the row
//! and column counts, then `rows·cols` row-major `f32` values.
//!
//! Values are stored as `f32`. Round a [`ParamStore`] with
//! [`ParamStore::round_to_f32`] before saving and the reloaded model
//! computes bit-identical outputs.

use std::path::Path;

use crate::autodiff::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const MAGIC: &[u8; 8] = b"CMMLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config_hash: String,
    pub tensors: Vec<(String, Mat)>,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_params(stage: &str, config_hash: &str, params: &ParamStore) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            tensors: params
                .ids()
                .map(|id| (params.name(id).to_string(), params.get(id).clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.stage);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for &x in m.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let stage = r.string()?;
        let config_hash = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let m = Mat::from_shape_vec((rows, cols), values).expect("length checked");
            tensors.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            stage,
            config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Reads a checkpoint, failing with [`Error::MissingArtifact`] when the
    /// file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the header names `stage` and `config_hash`.
    pub fn expect(&self, stage: &str, config_hash: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Checkpoint(format!("expected stage {stage:?}, found {:?}", self.stage)));
        }
        if self.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match {config_hash}",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Copies every tensor into the same-named parameter of `params`. The
    /// name sets and shapes must match exactly.
    pub fn restore(&self, params: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for {} parameters",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, m) in &self.tensors {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            let dst = params.get_mut(id);
            if dst.dim() != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    m.dim(),
                    dst.dim()
                )));
            }
            dst.assign(m);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("a.weight", ndarray::array![[0.1, -2.5], [3.0, 1e-3]]);
        ps.add("b", ndarray::array![[7.0]]);
        ps
    }

    #[test]
    fn header_offsets_match_the_layout() {
        let ck = Checkpoint::from_params("coarse", "abcd", &store());
        let b = ck.to_bytes();
        assert_eq!(&b[0..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 6);
        assert_eq!(&b[16..22], b"coarse");
        assert_eq!(u32::from_le_bytes(b[22..26].try_into().unwrap()), 4);
        assert_eq!(&b[26..30], b"abcd");
        assert_eq!(u32::from_le_bytes(b[30..34].try_into().unwrap()), 2);
        let total = 34 + (4 + 8 + 8 + 16) + (4 + 1 + 8 + 4);
        assert_eq!(b.len(), total);
    }

    #[test]
    fn rounded_params_survive_exactly() {
        let mut ps = store();
        ps.round_to_f32();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_params("fine", "h", &ps).to_bytes()).unwrap();
        let mut other = store();
        for id in other.ids() {
            other.get_mut(id).fill(0.0);
        }
        ck.restore(&mut other).unwrap();
        for id in ps.ids() {
            assert_eq!(ps.get(id), other.get(id));
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let b = Checkpoint::from_params("fine", "h", &store()).to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut longer = b;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = Checkpoint::from_params("fine", "h", &store());
        let mut ps = ParamStore::new();
        ps.add("a.weight", Mat::zeros((2, 2)));
        assert!(ck.restore(&mut ps).is_err());
        ps.add("b", Mat::zeros((1, 2)));
        assert!(ck.restore(&mut ps).is_err());
        assert!(ck.expect("coarse", "h").is_err());
        assert!(ck.expect("fine", "x").is_err());
        ck.expect("fine", "h").unwrap();
    }
}
