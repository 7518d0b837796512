//! Binary checkpoints: magic, format version, model kind, architecture and run-config
//! snapshots, named little-endian f32 arrays with shapes, and the RNG state.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Param, Real};
use crate::policy::{Policy, PolicyArch};
use crate::rng::{seeded, Rng};
use crate::vqvae::{Vqvae, VqvaeArch};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OREOCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `policy` or `vqvae`.
    pub kind: String,
    /// Architecture as JSON.
    pub arch: String,
    /// Run configuration text the model was trained with.
    pub config: String,
    pub arrays: Vec<Array>,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new<T: Real>(kind: &str, arch: &impl Serialize, config: &str, params: &[&Param<T>], rng: &Rng) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.into(),
            arch: serde_json::to_string(arch)?,
            config: config.into(),
            arrays: params
                .iter()
                .map(|p| Array {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|v| v.to_f32().unwrap()).collect(),
                })
                .collect(),
            rng_state: crate::rng::state_bytes(rng),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend(CHECKPOINT_VERSION.to_le_bytes());
        for s in [&self.kind, &self.arch, &self.config] {
            put_bytes(&mut b, s.as_bytes());
        }
        b.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_bytes(&mut b, a.name.as_bytes());
            b.extend((a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                b.extend((d as u64).to_le_bytes());
            }
            for v in &a.data {
                b.extend(v.to_le_bytes());
            }
        }
        put_bytes(&mut b, &self.rng_state);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let kind = r.string()?;
        let arch = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(corrupt("implausible rank"));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push(Array { name, shape, data });
        }
        let rng_state = r.bytes()?.to_vec();
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { kind, arch, config, arrays, rng_state })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn rng(&self) -> Result<Rng> {
        crate::rng::from_state_bytes(&self.rng_state).ok_or_else(|| corrupt("bad rng state"))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ArchitectureMismatch(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn arch_as<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_str(&self.arch).map_err(|e| corrupt(&format!("architecture: {e}")))
    }

    /// Copies arrays into `params`, matching by position, name and shape.
    pub fn restore<T: Real>(&self, params: Vec<&mut Param<T>>) -> Result<()> {
        if params.len() != self.arrays.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "model has {} tensors, checkpoint has {}",
                params.len(),
                self.arrays.len()
            )));
        }
        for (p, a) in params.into_iter().zip(&self.arrays) {
            if p.name != a.name || p.shape != a.shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "{} {:?} vs checkpoint {} {:?}",
                    p.name, p.shape, a.name, a.shape
                )));
            }
            p.value = a.data.iter().map(|&v| T::lit(v as f64)).collect();
        }
        Ok(())
    }

    pub fn from_policy(policy: &Policy<f32>, config: &str, rng: &Rng) -> Result<Self> {
        Self::new("policy", &policy.arch, config, &policy.params(), rng)
    }

    pub fn to_policy(&self) -> Result<Policy<f32>> {
        self.expect_kind("policy")?;
        let arch: PolicyArch = self.arch_as()?;
        let mut p = Policy::new(&arch, &mut seeded(0))?;
        self.restore(p.params_mut())?;
        Ok(p)
    }

    pub fn from_vqvae(model: &Vqvae<f32>, config: &str, rng: &Rng) -> Result<Self> {
        Self::new("vqvae", &model.arch, config, &model.params(), rng)
    }

    pub fn to_vqvae(&self) -> Result<Vqvae<f32>> {
        self.expect_kind("vqvae")?;
        let arch: VqvaeArch = self.arch_as()?;
        let mut m = Vqvae::new(&arch, &mut seeded(0))?;
        self.restore(m.params_mut())?;
        Ok(m)
    }
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    b.extend((s.len() as u32).to_le_bytes());
    b.extend(s);
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }
}
