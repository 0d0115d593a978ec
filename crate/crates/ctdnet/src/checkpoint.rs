//! Binary checkpoints: magic `CTDK`, version, tensor count, then per tensor
//! the UTF-8 name, rank, extents and a little-endian f32 payload. All
//! integers are little-endian u32.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctdnet_core::optim::OptimState;
use ctdnet_core::params::ParamSet;
use ctdnet_core::Tensor;

pub const MAGIC: &[u8; 4] = b"CTDK";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "velocity/";
pub const STEP_NAME: &str = "meta/step";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).context("value does not fit in u32")?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            bail!("truncated checkpoint at byte {}", self.pos);
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Parameters plus optimizer velocities and the step counter.
    pub fn from_training(params: &ParamSet, optim: &OptimState, step: usize) -> Self {
        let mut c = Self::from_params(params);
        for ((n, _), v) in params.iter().zip(&optim.velocity) {
            c.tensors.push((format!("{VELOCITY_PREFIX}{n}"), v.clone()));
        }
        c.tensors
            .push((STEP_NAME.to_string(), Tensor::from_vec(vec![step as f64])));
        c
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn step(&self) -> Option<usize> {
        self.get(STEP_NAME).map(|t| t.data()[0] as usize)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        ensure!(r.take(4)? == MAGIC, "not a checkpoint (bad magic)");
        let version = r.u32()?;
        ensure!(version == VERSION as usize, "unsupported checkpoint version {version}");
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .context("tensor name is not UTF-8")?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(n) = n else {
                bail!("tensor `{name}` is too large");
            };
            let bytes = r.take(n.checked_mul(4).context("tensor too large")?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).with_context(|| format!("tensor `{name}`"))?;
            tensors.push((name, t));
        }
        ensure!(r.pos == buf.len(), "{} trailing bytes after checkpoint", buf.len() - r.pos);
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))?
            .read_to_end(&mut buf)?;
        Self::decode(&buf).with_context(|| format!("reading {}", path.display()))
    }

    /// Copies every parameter of `params` from the checkpoint. Missing,
    /// unexpected or reshaped tensors are all reported together.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        let mut diffs = Vec::new();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let want = params.get(params.find(name).expect("own name")).shape().to_vec();
            match self.get(name) {
                None => diffs.push(format!("missing `{name}` {want:?}")),
                Some(t) if t.shape() != want.as_slice() => {
                    diffs.push(format!("`{name}`: checkpoint {:?}, config {want:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        for (n, t) in &self.tensors {
            if !n.starts_with(VELOCITY_PREFIX) && n != STEP_NAME && !names.contains(n) {
                diffs.push(format!("unexpected `{n}` {:?}", t.shape()));
            }
        }
        if !diffs.is_empty() {
            bail!("checkpoint does not match the configured model:\n  {}", diffs.join("\n  "));
        }
        for name in &names {
            params
                .assign(name, self.get(name).expect("checked").clone())
                .map_err(anyhow::Error::msg)?;
        }
        Ok(())
    }

    /// Velocities for `params`, if the checkpoint carries a complete set.
    pub fn velocities(&self, params: &ParamSet) -> Option<Vec<Tensor>> {
        params
            .iter()
            .map(|(n, t)| {
                self.get(&format!("{VELOCITY_PREFIX}{n}"))
                    .filter(|v| v.shape() == t.shape())
                    .cloned()
            })
            .collect()
    }
}
