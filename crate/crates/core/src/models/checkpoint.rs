//! Checkpoint container.
//!
//! Layout: `MTLC`, u16 format version, u32 header length, UTF-8 JSON header
//! (model spec, role, distillation config, optimizer config, epoch, best score,
//! parameter count), then little-endian f32 parameters, then a one-byte optimizer
//! flag optionally followed by u64 step count and the two moment vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AdamState};
use super::{FrameModelSpec, Role, TemporalModelSpec};
use crate::error::{Error, Result};
use crate::losses::DistillationConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Frame(FrameModelSpec),
    Temporal(TemporalModelSpec),
}

impl ModelSpec {
    pub fn num_bins(&self) -> usize {
        match self {
            ModelSpec::Frame(s) => s.num_bins,
            ModelSpec::Temporal(s) => s.num_bins,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    role: Role,
    distillation: DistillationConfig,
    optimizer: Option<AdamConfig>,
    epoch: usize,
    best_score: Option<f64>,
    num_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub role: Role,
    pub distillation: DistillationConfig,
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub params: Vec<f32>,
    pub optimizer: Option<(AdamConfig, AdamState)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated checkpoint: missing {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| format_err("implausible length"))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            role: self.role,
            distillation: self.distillation.clone(),
            optimizer: self.optimizer.as_ref().map(|(c, _)| c.clone()),
            epoch: self.epoch,
            best_score: self.best_score,
            num_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 12 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        self.params.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        match &self.optimizer {
            None => out.push(0),
            Some((_, st)) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                st.m.iter().chain(&st.v).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = c.array("magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err(format!("not a checkpoint (magic {:?})", String::from_utf8_lossy(&magic))));
        }
        let version = u16::from_le_bytes(c.array("version")?);
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "unsupported checkpoint format version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(c.array("header length")?) as usize;
        let header: Header = serde_json::from_slice(c.take(hlen, "header")?)
            .map_err(|e| format_err(format!("corrupt checkpoint header: {e}")))?;
        let params = c.f32s(header.num_params, "parameters")?;
        let flag = c.array::<1>("optimizer flag")?[0];
        let optimizer = match (flag, header.optimizer) {
            (0, None) => None,
            (1, Some(cfg)) => {
                let step = u64::from_le_bytes(c.array("optimizer step")?);
                let m = c.f32s(header.num_params, "first moments")?;
                let v = c.f32s(header.num_params, "second moments")?;
                Some((cfg, AdamState { step, m, v }))
            }
            _ => return Err(format_err("optimizer flag disagrees with header")),
        };
        if c.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
        }
        Ok(Checkpoint {
            spec: header.spec,
            role: header.role,
            distillation: header.distillation,
            epoch: header.epoch,
            best_score: header.best_score,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_frame_model;

    fn sample() -> Checkpoint {
        let m = build_frame_model(&FrameModelSpec { image_height: 16, image_width: 16, ..Default::default() }, 1).unwrap();
        let n = m.num_params();
        Checkpoint {
            spec: ModelSpec::Frame(m.spec.clone()),
            role: Role::Student,
            distillation: DistillationConfig::default(),
            epoch: 3,
            best_score: Some(1.234_567_890_123),
            params: m.params.values.clone(),
            optimizer: Some((
                AdamConfig::with_learning_rate(1e-4),
                AdamState { step: 17, m: vec![0.25; n], v: vec![1e-7; n] },
            )),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = sample();
        let a = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn version_and_corruption_errors() {
        let mut bytes = sample().to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert_eq!(Checkpoint::from_bytes(truncated).unwrap_err().class(), "format");
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("version 9"));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }
}
