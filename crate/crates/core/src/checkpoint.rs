//! Named-tensor checkpoint container shared by the encoder (`GSLE`) and
//! GNN (`GSLG`) models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! n_entries    u32
//!   key        u32 length + UTF-8
//!   value      u32 length + UTF-8
//! n_tensors    u32
//!   name       u32 length + UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   values     product(dims) × f64
//! ```

use std::path::Path;

use gnnsl_tensor::{ParamSet, Tensor};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const ENCODER_MAGIC: [u8; 4] = *b"GSLE";
pub const GNN_MAGIC: [u8; 4] = *b"GSLG";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(magic: [u8; 4]) -> Self {
        Self {
            magic,
            config: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint config lacks `{key}`"),
            })
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("checkpoint config `{key}` has unparsable value `{raw}`"),
        })
    }

    pub fn with_params(mut self, params: &ParamSet) -> Self {
        self.tensors
            .extend(params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
        self
    }

    /// Copies stored tensors into `params` by name; every parameter must be
    /// present with a matching shape.
    pub fn load_params(&self, params: &mut ParamSet) -> Result<()> {
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let (_, t) = self.tensors.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint lacks tensor `{name}`"),
            })?;
            if t.shape() != params.value(id).shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        params.value(id).shape()
                    ),
                });
            }
            *params.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.magic);
        w.u32(FORMAT_VERSION);
        w.u32(self.config.len() as u32);
        for (k, v) in &self.config {
            w.str32(k);
            w.str32(v);
        }
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str32(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let got = r.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(&magic)
                ),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("config count")?;
        let mut config = Vec::new();
        for _ in 0..n {
            let k = r.str32("config key")?;
            let v = r.str32("config value")?;
            config.push((k, v));
        }
        let n = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.str32("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(r.error(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u64("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error("tensor size overflows"))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| r.error("tensor size overflows"))?, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if !r.at_end() {
            return Err(r.error("trailing bytes after last tensor"));
        }
        Ok(Self { magic, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes to a sibling temporary file and renames it into place, so
/// concurrent readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ENCODER_MAGIC);
        c.set("d", 8);
        c.set("lr", 0.1);
        c.tensors.push(("w".into(), Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        c.tensors.push(("b".into(), Tensor::vector(vec![0.25])));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), ENCODER_MAGIC).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.parse::<usize>("d").unwrap(), 8);
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes, GNN_MAGIC), Err(Error::Format { offset: 0, .. })));
        for cut in [2, 6, 20, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut], ENCODER_MAGIC) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }
}
