//! Alias-free style-modulated generator `G(w, c, noise)`.
//!
//! A learned 4×4 constant is upsampled block by block to the output size. Each
//! block modulates a 3×3 convolution with the style code, adds per-block noise,
//! applies a filtered leaky rectifier and, from a configurable resolution on,
//! appends the constraint image as one more channel. With `antialias` off the
//! same layers run with nearest-neighbour upsampling and plain rectifiers.

use std::path::Path;

use didigan_tensor::{no_grad, LinearMap1d, PadMode, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, antialias_kernel, linear_map, nearest_upsample_operator, resample_operator, Constraint};
use crate::io::{self, IoError};
use crate::manifold::{ClassLabel, MappingNetwork, NoiseVector, StyleCode};
use crate::nn::{randn, Bound, Conv, Dense, ParamId, ParamSet};

pub const DEMOD_EPS: f64 = 1e-8;
const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("generator configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub start_resolution: usize,
    pub output_resolution: usize,
    pub n_blocks: usize,
    /// Block channels are `min(channel_max, channel_base · output / block_resolution)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub constraint_resolution: usize,
    /// Blocks at or above this resolution receive the constraint channel.
    pub inject_from_resolution: usize,
    pub antialias: bool,
    pub style_dim: usize,
    pub mapping_lr_mul: f64,
    pub filter_attenuation_db: f64,
    pub oversample: usize,
}

impl GeneratorConfig {
    /// 64×64 output from eight blocks, sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            start_resolution: 4,
            output_resolution: 64,
            n_blocks: 8,
            channel_base: 8,
            channel_max: 32,
            constraint_resolution: 16,
            inject_from_resolution: 16,
            antialias: true,
            style_dim: 512,
            mapping_lr_mul: 0.01,
            filter_attenuation_db: dsp::DEFAULT_ATTENUATION_DB,
            oversample: 2,
        }
    }

    /// 256×256 output from twelve blocks with the wide channel schedule.
    pub fn full() -> Self {
        Self {
            output_resolution: 256,
            n_blocks: 12,
            channel_base: 32,
            channel_max: 512,
            constraint_resolution: 64,
            inject_from_resolution: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let err = |m: String| Err(SynthesisError::Config(m));
        if self.start_resolution == 0 || self.start_resolution >= self.output_resolution {
            return err(format!("start resolution {} must be below output {}", self.start_resolution, self.output_resolution));
        }
        let ratio = self.output_resolution / self.start_resolution;
        if ratio * self.start_resolution != self.output_resolution || !ratio.is_power_of_two() {
            return err(format!("output {} is not start {} times a power of two", self.output_resolution, self.start_resolution));
        }
        let n_up = ratio.trailing_zeros() as usize;
        if self.n_blocks < n_up || self.n_blocks % n_up != 0 {
            return err(format!("{} blocks cannot share {n_up} doublings evenly", self.n_blocks));
        }
        if self.constraint_resolution > self.output_resolution || self.output_resolution % self.constraint_resolution != 0 {
            return err(format!("constraint resolution {} must divide output {}", self.constraint_resolution, self.output_resolution));
        }
        if self.inject_from_resolution > self.output_resolution {
            return err(format!("injection floor {} above output resolution", self.inject_from_resolution));
        }
        if self.oversample != 2 && self.oversample != 4 {
            return err(format!("oversample {} (use 2 or 4)", self.oversample));
        }
        if self.channel_base == 0 || self.channel_max == 0 || self.style_dim == 0 {
            return err("channel counts and style_dim must be positive".into());
        }
        Ok(())
    }

    /// `(resolution, upsamples_first)` per block.
    pub fn block_schedule(&self) -> Vec<(usize, bool)> {
        let n_up = (self.output_resolution / self.start_resolution).trailing_zeros() as usize;
        let per = self.n_blocks / n_up;
        (0..self.n_blocks).map(|b| (self.start_resolution << (b / per + 1), b % per == 0)).collect()
    }

    pub fn channels(&self, res: usize) -> usize {
        self.channel_max.min(self.channel_base * self.output_resolution / res).max(1)
    }

    pub fn injects_at(&self, res: usize) -> bool {
        res >= self.inject_from_resolution
    }
}

/// One standard-normal map per block, `[N, 1, res, res]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNoise {
    pub maps: Vec<Tensor>,
}

impl SynthesisNoise {
    pub fn sample(rng: &mut impl Rng, cfg: &GeneratorConfig, batch: usize) -> Self {
        Self { maps: cfg.block_schedule().iter().map(|&(r, _)| randn(rng, &[batch, 1, r, r])).collect() }
    }

    pub fn zeros(cfg: &GeneratorConfig, batch: usize) -> Self {
        Self { maps: cfg.block_schedule().iter().map(|&(r, _)| Tensor::zeros(&[batch, 1, r, r])).collect() }
    }

    pub fn batch(&self) -> usize {
        self.maps.first().map_or(0, |m| m.shape()[0])
    }

    /// Stack the batches of several noise sets.
    pub fn concat(parts: &[&SynthesisNoise]) -> Self {
        let n = parts[0].maps.len();
        Self { maps: (0..n).map(|i| Tensor::concat(&parts.iter().map(|p| &p.maps[i]).collect::<Vec<_>>(), 0)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub label: ClassLabel,
    pub constraint_id: String,
    pub mapping_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub data: Array2<f64>,
    pub provenance: Provenance,
}

impl GeneratedImage {
    /// 16-bit PNG at `stem.png` plus the provenance at `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<(), SynthesisError> {
        io::write_png16(&stem.with_extension("png"), &self.data, -1.0, 1.0)?;
        io::write_json(&stem.with_extension("json"), &self.provenance)?;
        Ok(())
    }
}

/// Style-modulated, optionally demodulated convolution with reflect padding.
///
/// `x: [N, Ci, H, W]`, `weight: [1, Co, Ci, k, k]`, `scales: [N, Ci]`.
pub fn modulated_conv(x: &Var, weight: &Var, scales: &Var, demodulate: bool) -> Result<Var, SynthesisError> {
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let ws = weight.shape();
    if ws.len() != 5 || ws[0] != 1 || ws[2] != ci || scales.shape() != [n, ci] || ws[3] != ws[4] || ws[3] % 2 == 0 {
        return Err(SynthesisError::Shape(format!("x {:?}, weight {:?}, scales {:?}", x.shape(), ws, scales.shape())));
    }
    let (co, k) = (ws[1], ws[3]);
    let mut w = weight.mul(&scales.reshape(&[n, 1, ci, 1, 1]));
    if demodulate {
        let d = w.square().sum_axes(&[2, 3, 4], true).add_scalar(DEMOD_EPS).sqrt();
        w = w.div(&d);
    }
    debug_assert_eq!(w.shape(), [n, co, ci, k, k]);
    Ok(x.pad2d(k / 2, PadMode::Reflect).conv2d(&w))
}

/// Linear map taking a `from`-sided grid to a `to`-sided one.
pub fn rescale_map(from: usize, to: usize, antialias: bool, attenuation_db: f64) -> Result<LinearMap1d, SynthesisError> {
    if from == to {
        return Ok(LinearMap1d::identity(from));
    }
    let op = if to > from {
        if to % from != 0 {
            return Err(SynthesisError::Shape(format!("cannot rescale {from} to {to}")));
        }
        let up = to / from;
        if antialias {
            resample_operator(from, up, 1, &antialias_kernel(up, 1, attenuation_db))?
        } else {
            nearest_upsample_operator(from, up)
        }
    } else {
        if from % to != 0 {
            return Err(SynthesisError::Shape(format!("cannot rescale {from} to {to}")));
        }
        let down = from / to;
        if antialias {
            resample_operator(from, 1, down, &antialias_kernel(1, down, attenuation_db))?
        } else {
            dsp::strided_decimation_operator(from, down)
        }
    };
    Ok(linear_map(op))
}

/// Append `c: [N, 1, s, s]`, rescaled to `target`, as the last channel of `features`.
pub fn inject_constraint(features: &Var, c: &Var, target: usize, antialias: bool, attenuation_db: f64) -> Result<Var, SynthesisError> {
    let fs = features.shape();
    if fs.len() != 4 || fs[2] != target || fs[3] != target {
        return Err(SynthesisError::Shape(format!("features {fs:?} are not at resolution {target}")));
    }
    let cs = c.shape();
    if cs.len() != 4 || cs[0] != fs[0] || cs[1] != 1 || cs[2] != cs[3] {
        return Err(SynthesisError::Shape(format!("constraint {cs:?} for features {fs:?}")));
    }
    let m = rescale_map(cs[2], target, antialias, attenuation_db)?;
    Ok(Var::concat(&[features.clone(), c.sep_linear(&m, &m)], 1))
}

/// Leaky rectifier, alias-suppressed when `ops` is given as `(up, down)`.
fn activation(x: &Var, ops: Option<&(LinearMap1d, LinearMap1d)>) -> Var {
    match ops {
        Some((up, down)) => x.sep_linear(up, up).leaky_relu(LRELU_SLOPE).sep_linear(down, down).scale(LRELU_GAIN),
        None => x.leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN),
    }
}

fn filtered_activation_ops(res: usize, oversample: usize, attenuation_db: f64) -> Result<(LinearMap1d, LinearMap1d), SynthesisError> {
    let ops = dsp::FilteredNonlinearity::new(res, oversample, attenuation_db)?;
    Ok((linear_map(ops.up), linear_map(ops.down)))
}

#[derive(Clone, Debug)]
struct Block {
    res: usize,
    c_in: usize,
    affine: Dense,
    weight: ParamId,
    noise_strength: ParamId,
    bias: ParamId,
    upsample: Option<LinearMap1d>,
    act: Option<(LinearMap1d, LinearMap1d)>,
    inject: Option<LinearMap1d>,
}

/// Mapping and synthesis networks sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub mapping: MappingNetwork,
    constant: ParamId,
    blocks: Vec<Block>,
    to_image: Conv,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, ps: &mut ParamSet, rng: &mut impl Rng) -> Result<Self, SynthesisError> {
        cfg.validate()?;
        let mapping = MappingNetwork::new(ps, rng, cfg.style_dim, cfg.mapping_lr_mul);
        let sched = cfg.block_schedule();
        let c0 = cfg.channels(cfg.start_resolution);
        let constant = ps.add("synthesis.const", randn(rng, &[1, c0, cfg.start_resolution, cfg.start_resolution]));
        let mut blocks = Vec::with_capacity(sched.len());
        let mut c_in = c0;
        let mut prev_res = cfg.start_resolution;
        for (b, &(res, up)) in sched.iter().enumerate() {
            let c_out = cfg.channels(res);
            let name = format!("synthesis.b{b}");
            let affine = Dense::new(ps, rng, &format!("{name}.affine"), cfg.style_dim, c_in, 1.0, 1.0);
            let weight = ps.add(format!("{name}.weight"), randn(rng, &[1, c_out, c_in, 3, 3]));
            let noise_strength = ps.add(format!("{name}.noise_strength"), Tensor::zeros(&[1]));
            let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[1, c_out, 1, 1]));
            let upsample = if up { Some(rescale_map(prev_res, res, cfg.antialias, cfg.filter_attenuation_db)?) } else { None };
            let act = if cfg.antialias { Some(filtered_activation_ops(res, cfg.oversample, cfg.filter_attenuation_db)?) } else { None };
            let inject = if cfg.injects_at(res) {
                Some(rescale_map(cfg.constraint_resolution, res, cfg.antialias, cfg.filter_attenuation_db)?)
            } else {
                None
            };
            blocks.push(Block { res, c_in, affine, weight, noise_strength, bias, upsample, act, inject: inject.clone() });
            c_in = c_out + usize::from(inject.is_some());
            prev_res = res;
        }
        let to_image = Conv::new(ps, rng, "synthesis.to_image", c_in, 1, 1);
        Ok(Self { cfg: cfg.clone(), mapping, constant, blocks, to_image })
    }

    /// Fresh generator and its parameters from a seed.
    pub fn init(cfg: &GeneratorConfig, seed: u64) -> Result<(Self, ParamSet), SynthesisError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let g = Self::new(cfg, &mut ps, &mut rng)?;
        Ok((g, ps))
    }

    /// Style codes `[N, dim]` for labels and mapping noise `z: [N, dim]`.
    pub fn map(&self, p: &Bound, labels: &[ClassLabel], z: &Var) -> Var {
        self.mapping.forward(p, labels, z)
    }

    /// Images `[N, 1, out, out]` in `[−1, 1]` from `w: [N, dim]` and `c: [N, 1, s, s]`.
    pub fn synthesize(&self, p: &Bound, w: &Var, c: &Var, noise: &SynthesisNoise) -> Result<Var, SynthesisError> {
        let n = w.shape()[0];
        let cr = self.cfg.constraint_resolution;
        if w.shape() != [n, self.cfg.style_dim] {
            return Err(SynthesisError::Shape(format!("style batch {:?}", w.shape())));
        }
        if c.shape() != [n, 1, cr, cr] {
            return Err(SynthesisError::Shape(format!("constraint batch {:?}, expected [{n}, 1, {cr}, {cr}]", c.shape())));
        }
        if noise.maps.len() != self.blocks.len() || noise.batch() != n {
            return Err(SynthesisError::Shape("noise maps do not match the block schedule".into()));
        }
        let c0 = p.get(self.constant);
        let mut x = c0.broadcast_to(&[n, c0.shape()[1], c0.shape()[2], c0.shape()[3]]);
        for (blk, nz) in self.blocks.iter().zip(&noise.maps) {
            if nz.shape() != [n, 1, blk.res, blk.res] {
                return Err(SynthesisError::Shape(format!("noise map {:?} at block resolution {}", nz.shape(), blk.res)));
            }
            debug_assert_eq!(x.shape()[1], blk.c_in);
            if let Some(m) = &blk.upsample {
                x = x.sep_linear(m, m);
            }
            let s = blk.affine.forward(p, w);
            let k = p.get(blk.weight);
            x = modulated_conv(&x, k, &s, true)?;
            x = x.add(&Var::constant(nz.clone()).mul(p.get(blk.noise_strength)));
            x = activation(&x.add(p.get(blk.bias)), blk.act.as_ref());
            if let Some(m) = &blk.inject {
                x = Var::concat(&[x, c.sep_linear(m, m)], 1);
            }
        }
        Ok(self.to_image.forward(p, &x).tanh())
    }

    /// Convenience: map then synthesize.
    pub fn forward(&self, p: &Bound, labels: &[ClassLabel], z: &Var, c: &Var, noise: &SynthesisNoise) -> Result<Var, SynthesisError> {
        let w = self.map(p, labels, z);
        self.synthesize(p, &w, c, noise)
    }
}

/// Single-image inference with the generator's own constraint id and seeds.
pub fn generate(
    w: &StyleCode,
    c: &Constraint,
    noise: &SynthesisNoise,
    gen: &Generator,
    params: &ParamSet,
    provenance: Provenance,
) -> Result<GeneratedImage, SynthesisError> {
    let n = gen.cfg.output_resolution;
    let wv = Var::constant(Tensor::new(&[1, w.dim()], w.0.clone()));
    let cv = constraint_var(&[c]);
    let out = no_grad(|| gen.synthesize(&params.bind(false), &wv, &cv, noise))?;
    Ok(GeneratedImage { data: Array2::from_shape_vec((n, n), out.value().data().to_vec()).unwrap(), provenance })
}

/// AD and CN images sharing the constraint, mapping noise and synthesis noise.
pub fn generate_pair(
    c: &Constraint,
    z: &NoiseVector,
    noise: &SynthesisNoise,
    gen: &Generator,
    params: &ParamSet,
    provenance: (String, u64, u64),
) -> Result<(GeneratedImage, GeneratedImage), SynthesisError> {
    let n = gen.cfg.output_resolution;
    let dim = gen.cfg.style_dim;
    if z.0.len() != dim {
        return Err(SynthesisError::Shape(format!("mapping noise has {} entries, expected {dim}", z.0.len())));
    }
    let zv = Var::constant(Tensor::new(&[2, dim], z.0.iter().chain(&z.0).copied().collect()));
    let cv = constraint_var(&[c, c]);
    let noise2 = SynthesisNoise::concat(&[noise, noise]);
    let out = no_grad(|| gen.forward(&params.bind(false), &[ClassLabel::AD, ClassLabel::CN], &zv, &cv, &noise2))?;
    let data = out.value().data();
    let (cid, ms, ns) = provenance;
    let mk = |i: usize, label| GeneratedImage {
        data: Array2::from_shape_vec((n, n), data[i * n * n..(i + 1) * n * n].to_vec()).unwrap(),
        provenance: Provenance { label, constraint_id: cid.clone(), mapping_seed: ms, noise_seed: ns },
    };
    Ok((mk(0, ClassLabel::AD), mk(1, ClassLabel::CN)))
}

/// Stack constraints into a `[N, 1, s, s]` variable.
pub fn constraint_var(cs: &[&Constraint]) -> Var {
    let s = cs[0].side();
    let data: Vec<f64> = cs.iter().flat_map(|c| c.data().iter().copied()).collect();
    Var::constant(Tensor::new(&[cs.len(), 1, s, s], data))
}
