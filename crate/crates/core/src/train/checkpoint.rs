//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! `SLFE`, version u32, step u64, seed u64, rng counter u64, digest and
//! metadata strings (u32 length + UTF-8), entry count u32, then per entry
//! name, role tag, ndim u32, dims u32…, payload byte offset u64, and finally
//! the f32 payload. Optimizer velocities are entries named `vel/<param>`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;
use crate::train::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"SLFE";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "vel/";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    /// Position of the step-indexed random streams; equals `step` for
    /// checkpoints written by the training loops.
    pub rng_counter: u64,
    /// Hash of the architecture the parameters belong to.
    pub digest: String,
    /// Serialized model description (TOML).
    pub meta: String,
    pub params: ParamStore,
    pub velocity: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64, digest: String, meta: String, params: ParamStore) -> Self {
        Self {
            step,
            seed,
            rng_counter: step,
            digest,
            meta,
            params,
            velocity: Vec::new(),
        }
    }

    pub fn with_optimizer(mut self, state: &OptimizerState) -> Result<Self> {
        if state.velocity.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        self.velocity = self
            .params
            .iter()
            .filter(|(id, _)| !state.velocity[id.index()].is_empty())
            .map(|(id, p)| {
                let v = Tensor::new(p.tensor.shape().to_vec(), state.velocity[id.index()].clone())?;
                Ok((p.name.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Rebuild optimizer state for `store`, matching velocities by name.
    /// Missing velocities start at zero.
    pub fn optimizer_state(&self, store: &ParamStore) -> Result<OptimizerState> {
        let mut state = OptimizerState::new(store);
        for (name, v) in &self.velocity {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("velocity for unknown parameter `{name}`")))?;
            if state.velocity[id.index()].len() != v.len() {
                return Err(Error::Param {
                    name: name.clone(),
                    msg: "velocity shape differs from the parameter".into(),
                });
            }
            state.velocity[id.index()].copy_from_slice(v.data());
        }
        state.step = self.step;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Role, &Tensor)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.role, &p.tensor))
            .collect();
        for (name, v) in &self.velocity {
            let role = self.params.by_name(name).map_or(Role::Head, |p| p.role);
            entries.push((format!("{VELOCITY_PREFIX}{name}"), role, v));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.step, self.seed, self.rng_counter] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_str(&mut out, &self.digest);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, role, t) in &entries {
            put_str(&mut out, name);
            put_str(&mut out, &role.tag());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, _, t) in &entries {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let (step, seed, rng_counter) = (r.u64()?, r.u64()?, r.u64()?);
        let digest = r.string()?;
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let role = Role::parse(&r.string()?)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            headers.push((name, role, shape, offset));
        }
        let payload = &bytes[r.at..];
        let mut expected = 0u64;
        let mut params = ParamStore::new();
        let mut velocity = Vec::new();
        for (name, role, shape, offset) in headers {
            if offset != expected {
                return Err(Error::Checkpoint(format!("entry `{name}` has offset {offset}, expected {expected}")));
            }
            let len: usize = shape.iter().product();
            let end = offset as usize + 4 * len;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("truncated payload in entry `{name}`")));
            }
            let data = payload[offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            expected = end as u64;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(target) => velocity.push((target.to_string(), t)),
                None => {
                    params.insert(name, role, t)?;
                }
            }
        }
        if expected as usize != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - expected as usize
            )));
        }
        Ok(Self {
            step,
            seed,
            rng_counter,
            digest,
            meta,
            params,
            velocity,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

/// Write to `<path>.partial`, then rename into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, optionally requiring a specific architecture digest.
pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::format(path, msg),
        other => other,
    })?;
    if let Some(want) = expected_digest {
        if want != ckpt.digest {
            return Err(Error::Checkpoint(format!(
                "{}: config digest mismatch (checkpoint {}, expected {want})",
                path.display(),
                ckpt.digest
            )));
        }
    }
    Ok(ckpt)
}
