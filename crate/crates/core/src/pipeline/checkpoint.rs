//! Self-describing binary checkpoints.
//!
//! Layout (little-endian): magic `VXCK`, version `u32`, 32-byte config
//! fingerprint, phase `u8`, completed epochs `u32`, optimizer step `u64`,
//! `beta1, beta2, eps, weight_decay` as `f64`, the canonical config text
//! (`u32` length + UTF-8), then the parameter count `u32` and per parameter:
//! name (`u16` length + UTF-8), rank `u8`, dims `u32 x rank`, values `f64`,
//! a moments flag `u8` and, when set, both Adam moments.

use std::path::Path;

use voxtrack_tape::{AdamW, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 4] = b"VXCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Detection,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub phase: Phase,
    /// Epochs completed.
    pub epoch: usize,
    pub config_text: String,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 in checkpoint"))
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.push(match self.phase {
            Phase::Detection => 1,
            Phase::Joint => 2,
        });
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        let o = &self.optimizer;
        out.extend_from_slice(&o.step.to_le_bytes());
        put_f64s(&mut out, &[o.beta1, o.beta2, o.eps, o.weight_decay]);
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
            match (o.first_moment.get(name), o.second_moment.get(name)) {
                (Some(m), Some(v)) => {
                    out.push(1);
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
                _ => out.push(0),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let phase = match r.u8()? {
            1 => Phase::Detection,
            2 => Phase::Joint,
            p => return Err(Error::format(path, format!("unknown training phase {p}"))),
        };
        let epoch = r.u32()? as usize;
        let step = r.u64()?;
        let h = r.f64s(4)?;
        let mut optimizer = AdamW { beta1: h[0], beta2: h[1], eps: h[2], step, ..AdamW::new(h[3]) };
        let n = r.u32()? as usize;
        let config_text = r.string(n)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.f64s(len)?;
            if r.u8()? == 1 {
                optimizer.first_moment.insert(name.clone(), r.f64s(len)?);
                optimizer.second_moment.insert(name.clone(), r.f64s(len)?);
            }
            params.insert(name, Tensor::new(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { fingerprint, phase, epoch, config_text, params, optimizer })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Fails unless the checkpoint was written under the same architecture
    /// settings; with `allow_mismatch` a mismatch is only logged.
    pub fn check_fingerprint(&self, expected: &[u8; 32], path: &Path, allow_mismatch: bool) -> Result<()> {
        if &self.fingerprint == expected {
            return Ok(());
        }
        let msg = format!(
            "{}: config fingerprint {} differs from the current configuration's {}",
            path.display(),
            hex(&self.fingerprint[..8]),
            hex(&expected[..8])
        );
        log::warn!("{msg}");
        if allow_mismatch {
            Ok(())
        } else {
            Err(Error::Config(format!("{msg}; pass --ignore-fingerprint to load it anyway")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]));
        params.insert("b", Tensor::new(vec![1], vec![0.25]));
        let mut optimizer = AdamW::new(0.01);
        let grads: BTreeMap<String, Vec<f64>> = [("a.w".to_string(), vec![0.1; 6])].into();
        optimizer.update(&mut params.clone(), &grads, 1e-3);
        Checkpoint { fingerprint: [7; 32], phase: Phase::Detection, epoch: 3, config_text: "train.lr=0.0001\n".into(), params, optimizer }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode(), Path::new("c")).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        c.write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = sample().encode();
        let p = Path::new("c");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::decode(b"NOPE", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, p).is_err());
    }

    #[test]
    fn fingerprint_guard() {
        let c = sample();
        let p = Path::new("c");
        assert!(c.check_fingerprint(&[7; 32], p, false).is_ok());
        let err = c.check_fingerprint(&[8; 32], p, false).unwrap_err();
        assert!(err.is_config());
        assert!(c.check_fingerprint(&[8; 32], p, true).is_ok());
    }
}
