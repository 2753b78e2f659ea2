//! Dual-stream encoder with skipped three-level fusion.
//!
//! ```text
//! original ─ affine+relu ─┐
//!                         ├─ concat ─ level 1 ─ level 2 ─ level 3
//! masked   ─ affine+relu ─┘              │         │         │
//!                                     mean-pool mean-pool mean-pool
//!                                        └──── concat (fuse) ─┘
//!                                                  │
//!                                     affine → d ─ l2-normalize
//! ```
//!
//! Stream and level blocks act per pixel (a pixel is a row of the `HW × C`
//! input matrix), so every level sees the whole image and mean pooling turns
//! its per-pixel responses into one descriptor.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, ParamId, Tape, Var};
use crate::data::{apply_mask, Raster};
use crate::error::{Error, Result};
use crate::sampler::seeded_rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRCKPT01";

pub const PARAM_NAMES: [&str; 12] = [
    "stream_original.weight",
    "stream_original.bias",
    "stream_masked.weight",
    "stream_masked.bias",
    "level_low.weight",
    "level_low.bias",
    "level_mid.weight",
    "level_mid.bias",
    "level_high.weight",
    "level_high.bias",
    "fusion.weight",
    "fusion.bias",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output width of each separate input stream.
    pub stream_width: usize,
    /// Widths of the low, mid and high trunk levels.
    pub level_widths: [usize; 3],
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            height: 16,
            width: 8,
            channels: 3,
            stream_width: 8,
            level_widths: [16, 16, 16],
            output_dim: 256,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.height, self.width, self.channels, self.stream_width];
        if dims.contains(&0) || self.level_widths.contains(&0) {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if self.output_dim < 8 {
            return Err(Error::Config(format!(
                "output dimension must be >= 8, got {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    pub fn fused_width(&self) -> usize {
        self.level_widths.iter().sum()
    }

    /// Parameter shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (c, s) = (self.channels, self.stream_width);
        let [l1, l2, l3] = self.level_widths;
        vec![
            vec![c, s],
            vec![s],
            vec![c, s],
            vec![s],
            vec![2 * s, l1],
            vec![l1],
            vec![l1, l2],
            vec![l2],
            vec![l2, l3],
            vec![l3],
            vec![self.fused_width(), self.output_dim],
            vec![self.output_dim],
        ]
    }
}

/// Original image and its masked counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub original: Raster,
    pub masked: Raster,
}

impl ImagePair {
    pub fn new(original: Raster, masked: Raster) -> Result<Self> {
        if original.shape() != masked.shape() {
            return Err(Error::Shape(format!(
                "original {:?} vs masked {:?}",
                original.shape(),
                masked.shape()
            )));
        }
        Ok(ImagePair { original, masked })
    }

    pub fn with_mask(original: Raster, mask: &Raster) -> Result<Self> {
        let masked = apply_mask(&original, mask)?;
        Ok(ImagePair { original, masked })
    }

    /// Pair whose masked stream is all zeros.
    pub fn without_mask(original: Raster) -> Self {
        let (h, w, c) = original.shape();
        ImagePair {
            original,
            masked: Raster::zeros(h, w, c),
        }
    }

    /// Same images with the streams swapped.
    pub fn swapped(&self) -> ImagePair {
        ImagePair {
            original: self.masked.clone(),
            masked: self.original.clone(),
        }
    }
}

/// Trainable weights, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(EncoderParams { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(8 + 72 + 8 * self.param_count());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let header = [
            c.height as u64,
            c.width as u64,
            c.channels as u64,
            c.stream_width as u64,
            c.level_widths[0] as u64,
            c.level_widths[1] as u64,
            c.level_widths[2] as u64,
            c.output_dim as u64,
            c.seed,
        ];
        for v in header {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad checkpoint magic".into()));
        }
        if bytes.len() < 80 {
            return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
        }
        let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let config = EncoderConfig {
            height: field(0) as usize,
            width: field(1) as usize,
            channels: field(2) as usize,
            stream_width: field(3) as usize,
            level_widths: [field(4) as usize, field(5) as usize, field(6) as usize],
            output_dim: field(7) as usize,
            seed: field(8),
        };
        config.validate().map_err(|e| fmt(8, e.to_string()))?;
        let mut pos = 80;
        let mut tensors = Vec::new();
        for (shape, name) in config.param_shapes().into_iter().zip(PARAM_NAMES) {
            let n: usize = shape.iter().product();
            if bytes.len() - pos < 8 * n {
                return Err(fmt(pos, format!("truncated parameter {name}")));
            }
            let data = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * n;
            tensors.push(Tensor::new(shape, data)?);
        }
        if pos != bytes.len() {
            return Err(fmt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        EncoderParams::from_tensors(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        EncoderParams::from_bytes(&bytes)
    }
}

/// Fan-based uniform initialization: weights in `(−s, s)` with
/// `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<EncoderParams> {
    config.validate()?;
    let tensors = config
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let s = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let data = (0..shape[0] * shape[1])
                .map(|_| rng.random_range(-s..s))
                .collect();
            Tensor::new(shape, data).expect("weight shape")
        })
        .collect();
    EncoderParams::from_tensors(config.clone(), tensors)
}

impl EncoderParams {
    /// [`init_params`] seeded from `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        init_params(config, &mut seeded_rng(config.seed))
    }
}

/// Skipped fusion: concatenation `[low ‖ mid ‖ high]`.
pub fn fuse_levels(tape: &mut Tape, low: Var, mid: Var, high: Var) -> Var {
    tape.concat(&[low, mid, high])
}

/// Untaped [`fuse_levels`].
pub fn fuse_level_values(low: &[f64], mid: &[f64], high: &[f64]) -> Vec<f64> {
    [low, mid, high].concat()
}

fn pixel_matrix(r: &Raster) -> Tensor {
    Tensor::matrix(r.pixels(), r.channels(), r.data().to_vec()).expect("raster shape")
}

fn check_pair(config: &EncoderConfig, pair: &ImagePair) -> Result<()> {
    let want = (config.height, config.width, config.channels);
    for r in [&pair.original, &pair.masked] {
        if r.shape() != want {
            return Err(Error::Shape(format!(
                "encoder expects {want:?} images, got {:?}",
                r.shape()
            )));
        }
    }
    Ok(())
}

/// Records the forward pass of `pair` using parameter leaves `vars`
/// previously created by [`EncoderParams::record`].
pub fn encode_with(
    tape: &mut Tape,
    config: &EncoderConfig,
    vars: &[Var],
    pair: &ImagePair,
) -> Result<Var> {
    check_pair(config, pair)?;
    let xo = tape.constant(pixel_matrix(&pair.original));
    let xm = tape.constant(pixel_matrix(&pair.masked));
    let so = tape.affine(xo, vars[0], vars[1]);
    let so = tape.relu(so);
    let sm = tape.affine(xm, vars[2], vars[3]);
    let sm = tape.relu(sm);
    let mut h = tape.concat(&[so, sm]);
    let mut pooled = [h; 3];
    for (level, slot) in pooled.iter_mut().enumerate() {
        let a = tape.affine(h, vars[4 + 2 * level], vars[5 + 2 * level]);
        h = tape.relu(a);
        *slot = tape.mean_rows(h);
    }
    let fused = fuse_levels(tape, pooled[0], pooled[1], pooled[2]);
    let proj = tape.affine(fused, vars[10], vars[11]);
    tape.l2_normalize(proj)
}

/// Records parameters and the forward pass of `pair` on `tape`.
pub fn encode_graph(tape: &mut Tape, params: &EncoderParams, pair: &ImagePair) -> Result<Var> {
    let vars = params.record(tape);
    encode_with(tape, &params.config, &vars, pair)
}

/// Unit-norm feature of `pair`.
pub fn encode(params: &EncoderParams, pair: &ImagePair) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = encode_graph(&mut tape, params, pair)?;
    Ok(tape.value(out).data().to_vec())
}

/// `params ← params − lr · grads`. Parameters absent from `grads` are left
/// unchanged.
pub fn sgd_step(params: &mut EncoderParams, grads: &GradientSet, lr: f64) -> Result<()> {
    for (id, g) in grads.iter() {
        let Some(p) = params.tensors.get(id.0) else {
            return Err(Error::Shape(format!(
                "no encoder parameter with id {}",
                id.0
            )));
        };
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "{}: parameter {:?} vs gradient {:?}",
                PARAM_NAMES[id.0],
                p.shape(),
                g.shape()
            )));
        }
    }
    for (id, g) in grads.iter() {
        for (w, d) in params.tensors[id.0].data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
