//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `DPNCKPT\0`, `u32` version, `u32` manifest length + manifest JSON, `u32`
//! parameter count, then per parameter `u32` name length + name, `u8` owner
//! code, `u32` rank, `u32` dims, `f32` data; finally `u8` optimizer flag and,
//! when set, `u64` step count and one `f32` accumulator buffer per parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Owner, ParamSet, Value};
use crate::error::{Error, Result};

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DPNCKPT\0";
pub const VERSION: u32 = 1;

/// Run state that is not a tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// The full configuration as TOML.
    pub config: String,
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub skipped_updates: u64,
    pub transition_calls: u64,
    /// Per worker, episodes begun so far.
    pub episodes_started: Vec<u64>,
    /// Most recent completed episode rewards, oldest first.
    pub recent_rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub square_avg: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml_str(&self.manifest.config, &[])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        put_u32(&mut b, manifest.len() as u32);
        b.extend_from_slice(&manifest);
        put_u32(&mut b, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_u32(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            b.push(p.owner.code());
            put_u32(&mut b, p.value.shape().len() as u32);
            for d in p.value.shape() {
                put_u32(&mut b, *d as u32);
            }
            put_f32s(&mut b, p.value.data());
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.extend_from_slice(&o.steps.to_le_bytes());
                for buf in &o.square_avg {
                    put_f32s(&mut b, buf);
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let manifest: Manifest =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1)?[0];
            let owner = Owner::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown owner code {code}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            if params.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            params.insert(name, owner, Value::new(shape, data));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let steps = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let square_avg = params
                    .iter()
                    .map(|(_, p)| r.f32s(p.value.len()))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { steps, square_avg })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses parameters whose names, owners or shapes differ from
    /// `expected`, listing every difference.
    pub fn check_against(&self, expected: &ParamSet) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, p) in expected.iter() {
            match self.params.get(name) {
                None => diffs.push(format!("missing {name} {:?}", p.value.shape())),
                Some(q) if q.value.shape() != p.value.shape() => {
                    diffs.push(format!("{name}: checkpoint {:?}, config {:?}", q.value.shape(), p.value.shape()))
                }
                Some(q) if q.owner != p.owner => {
                    diffs.push(format!("{name}: owner {} vs {}", q.owner.as_str(), p.owner.as_str()))
                }
                _ => {}
            }
        }
        for (name, _) in self.params.iter() {
            if expected.get(name).is_none() {
                diffs.push(format!("unexpected {name}"));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("shape mismatch: {}", diffs.join("; "))))
        }
    }
}

fn put_u32(b: &mut Vec<u8>, x: u32) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(b: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        b.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Agent;
    use crate::rng::stream_rng;

    fn sample() -> (Checkpoint, ParamSet) {
        let cfg = TrainConfig::from_toml_str("env_size = 5\nenv_goals = 1\nconv_channels = 2\nz_dim = 3\nh_outer = 3\nh_inner = 2\n", &[]).unwrap();
        let agent = Agent::from_config(&cfg);
        let params = agent.init_params(&mut stream_rng(1, 0));
        let ckpt = Checkpoint {
            manifest: Manifest {
                config: cfg.to_toml_string(),
                iteration: 7,
                env_steps: 560,
                episodes: 9,
                skipped_updates: 0,
                transition_calls: 1680,
                episodes_started: vec![3, 4],
                recent_rewards: vec![0.1, -1.01, 1.0 / 3.0],
            },
            optimizer: Some(OptimizerState {
                steps: 7,
                square_avg: params.iter().map(|(_, p)| vec![0.25; p.value.len()]).collect(),
            }),
            params: params.clone(),
        };
        (ckpt, agent.zero_params())
    }

    #[test]
    fn save_load_save_is_idempotent() {
        let (c, _) = sample();
        let first = c.to_bytes();
        let loaded = Checkpoint::from_bytes(&first).unwrap();
        assert_eq!(loaded.to_bytes(), first);
        assert_eq!(loaded.manifest, c.manifest);
        // Values come back rounded to single precision.
        for ((_, a), (_, b)) in loaded.params.iter().zip(c.params.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn shape_check_lists_differences() {
        let (c, expected) = sample();
        c.check_against(&expected).unwrap();
        let other = Agent::from_config(
            &TrainConfig::from_toml_str("env_size = 5\nenv_goals = 1\nconv_channels = 2\nz_dim = 4\nh_outer = 3\nh_inner = 2\n", &[]).unwrap(),
        )
        .zero_params();
        let e = c.check_against(&other).unwrap_err().to_string();
        assert!(e.contains("encoder.fc.weight"), "{e}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (c, _) = sample();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
