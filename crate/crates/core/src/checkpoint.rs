//! Binary checkpoint codec.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DRNETCKP" | u32 version | str variant | u32 height | u32 width
//! u32 n_channels | u32 channels... | u32 feature_dim | u32 diff_hidden
//! u32 ad_hidden | u32 fuse_hidden | str ad_input | u64 seed | f64 alpha | f64 beta
//! u32 n_arrays | per array: str name | u8 trainable | u32 rank | u32 dims... | f64 data...
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::backbone::BackboneConfig;
use crate::losses::LossWeights;
use crate::models::{AdInput, GazeModel, ModelConfig, ModelError, ModelVariant};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"DRNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    Malformed(String),
    VariantMismatch {
        expected: ModelVariant,
        found: ModelVariant,
    },
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => f.write_str("not a checkpoint file"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "checkpoint version {v} is not supported (expected {VERSION})")
            }
            CheckpointError::Truncated => f.write_str("checkpoint is truncated"),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::VariantMismatch { expected, found } => {
                write!(f, "checkpoint holds variant {found}, expected {expected}")
            }
            CheckpointError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for CheckpointError {}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GazeModel,
    pub seed: u64,
    pub weights: LossWeights,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        core::str::from_utf8(bytes)
            .map(String::from)
            .map_err(|_| CheckpointError::Malformed(String::from("invalid UTF-8 string")))
    }
}

pub fn encode(model: &GazeModel, seed: u64, weights: LossWeights) -> Vec<u8> {
    let cfg = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.str(cfg.variant.name());
    w.u32(cfg.backbone.height);
    w.u32(cfg.backbone.width);
    w.u32(cfg.backbone.channels.len());
    for &c in &cfg.backbone.channels {
        w.u32(c);
    }
    w.u32(cfg.backbone.feature_dim);
    w.u32(cfg.diff_hidden);
    w.u32(cfg.ad_hidden);
    w.u32(cfg.fuse_hidden);
    w.str(cfg.ad_input.name());
    w.0.extend_from_slice(&seed.to_le_bytes());
    w.f64(weights.alpha());
    w.f64(weights.beta());
    let entries = model.params().entries();
    w.u32(entries.len());
    for e in entries {
        w.str(&e.name);
        w.0.push(e.trainable as u8);
        w.u32(e.shape.len());
        for &d in &e.shape {
            w.u32(d);
        }
        for &v in &e.data {
            w.f64(v);
        }
    }
    w.0
}

/// Decodes a checkpoint. With `expected` set, a different stored variant is an error.
pub fn decode(bytes: &[u8], expected: Option<ModelVariant>) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let name = r.str()?;
    let variant = ModelVariant::parse(&name)
        .ok_or_else(|| CheckpointError::Malformed(alloc::format!("unknown variant {name:?}")))?;
    if let Some(e) = expected {
        if e != variant {
            return Err(CheckpointError::VariantMismatch {
                expected: e,
                found: variant,
            });
        }
    }
    let height = r.usize()?;
    let width = r.usize()?;
    let n_channels = r.usize()?;
    let channels = (0..n_channels).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
    let backbone = BackboneConfig {
        height,
        width,
        channels,
        feature_dim: r.usize()?,
    };
    let diff_hidden = r.usize()?;
    let ad_hidden = r.usize()?;
    let fuse_hidden = r.usize()?;
    let ad_name = r.str()?;
    let ad_input = AdInput::parse(&ad_name)
        .ok_or_else(|| CheckpointError::Malformed(alloc::format!("unknown ad input {ad_name:?}")))?;
    let seed = r.u64()?;
    let (alpha, beta) = (r.f64()?, r.f64()?);
    let weights = LossWeights::new(alpha, beta).map_err(|e| CheckpointError::Malformed(alloc::format!("{e}")))?;
    let n_arrays = r.usize()?;
    let mut params = ParamStore::new();
    for _ in 0..n_arrays {
        let name = r.str()?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Malformed(alloc::format!("bad trainable flag {b}"))),
        };
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        if r.buf.len() / 8 < len {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        params.add(&name, &shape, data, trainable);
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(alloc::format!(
            "{} trailing bytes",
            r.buf.len()
        )));
    }
    let config = ModelConfig {
        variant,
        backbone,
        diff_hidden,
        ad_hidden,
        fuse_hidden,
        ad_input,
    };
    let model = GazeModel::from_params(config, params)?;
    Ok(Checkpoint { model, seed, weights })
}
