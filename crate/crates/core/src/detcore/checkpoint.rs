//! Binary checkpoint: magic, format version, a JSON header, then named
//! little-endian `f64` blobs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::autograd::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STRMADPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Number of completed training iterations.
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params,
    /// Momentum buffers, same names and shapes as `params`; empty before training.
    pub momentum: Params,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blobs(out: &mut Vec<u8>, params: &Params) {
    put_u64(out, params.len() as u64);
    for (_, name, t) in params.iter() {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_blobs(&mut out, &self.params);
        put_blobs(&mut out, &self.momentum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = r.blobs()?;
        let momentum = r.blobs()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameter blobs".into()));
        }
        Ok(Self {
            header,
            params,
            momentum,
        })
    }

    /// Writes to a sibling temporary file first so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::decode(path, msg),
            other => other,
        })
    }
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blobs(&mut self) -> Result<Params> {
        let count = self.u64()?;
        let mut params = Params::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
            params.add(name, Tensor::new(&shape, data)?);
        }
        Ok(params)
    }
}

/// Copies every parameter of `src` into the same-named slot of `dst`,
/// checking that the names and shapes line up exactly.
pub fn restore_into(dst: &mut Params, src: &Params) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (_, name, t) in src.iter() {
        let id = dst
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if dst.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                dst.get(id).shape()
            )));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detcore::model::Detector;
    use crate::seeds::rng_for;

    fn sample() -> Checkpoint {
        let (_, params) = Detector::new(ModelConfig::default(), &mut rng_for(1, &[])).unwrap();
        let mut momentum = Params::new();
        momentum.add("backbone.0.weight", Tensor::full(&[2, 2], 0.25));
        Checkpoint {
            header: CheckpointHeader {
                model: ModelConfig::default(),
                iteration: 17,
                seed: 4,
            },
            params,
            momentum,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut future = bytes;
        future[8] = 99;
        let err = Checkpoint::from_bytes(&future).unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = sample();
        let (_, mut fresh) = Detector::new(ModelConfig::default(), &mut rng_for(2, &[])).unwrap();
        restore_into(&mut fresh, &ck.params).unwrap();
        assert_eq!(fresh, ck.params);
        let mut wrong = Params::new();
        wrong.add("x", Tensor::zeros(&[1]));
        assert!(restore_into(&mut fresh, &wrong).is_err());
    }
}
