//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "VLTB" | version u32 | count u32
//! count × { name_len u16 | name (UTF-8) | rank u8 | dims u32×rank | data f64×numel }
//! checksum u64 = sum of all tensor data bytes mod 2^64
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLTB";
pub const CHECKPOINT_VERSION: u32 = 1;

const VIT_META: &str = "meta.vit";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Checkpoint { params }
    }

    /// Record the encoder architecture so loaders can reject mismatches.
    pub fn tag_encoder(&mut self, cfg: &ViTConfig) {
        self.params.insert(VIT_META, Tensor::from_vec(cfg.fingerprint()));
    }

    pub fn check_encoder(&self, cfg: &ViTConfig) -> Result<()> {
        match self.params.get(VIT_META) {
            Some(t) if t.data() == cfg.fingerprint().as_slice() => Ok(()),
            Some(t) => Err(Error::Config(format!(
                "checkpoint encoder {:?} does not match configured encoder {:?}",
                t.data(),
                cfg.fingerprint()
            ))),
            None => Err(Error::Config("checkpoint carries no encoder description".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut checksum = 0u64;
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                let bytes = v.to_le_bytes();
                checksum = bytes.iter().fold(checksum, |s, &b| s.wrapping_add(b as u64));
                out.extend_from_slice(&bytes);
            }
        }
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic, expected VLTB"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut checksum = 0u64;
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.err(at + 2, "tensor name is not UTF-8"))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err(at, "tensor too large"))?)?;
            checksum = raw.iter().fold(checksum, |s, &b| s.wrapping_add(b as u64));
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if params.contains(&name) {
                return Err(r.err(at, format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let at = r.pos;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if stored != checksum {
            return Err(r.err(at, format!("checksum mismatch: stored {stored}, computed {checksum}")));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after checksum"));
        }
        Ok(Checkpoint { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            file: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
