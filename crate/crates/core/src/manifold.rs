//! Class-conditional mapping from (label, noise) to style codes.

use std::fmt;
use std::path::Path;

use didigan_tensor::{no_grad, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::nn::{randn, Bound, Dense, ParamId, ParamSet};

pub const STYLE_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("noise vector has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("noise vector contains non-finite values")]
    NonFinite,
    #[error("style file: {0}")]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    AD,
    CN,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::AD, ClassLabel::CN];

    /// Row in the embedding table and column in the classifier logits.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::AD => 0,
            ClassLabel::CN => 1,
        }
    }

    pub fn other(self) -> ClassLabel {
        match self {
            ClassLabel::AD => ClassLabel::CN,
            ClassLabel::CN => ClassLabel::AD,
        }
    }

    pub fn parse(s: &str) -> Option<ClassLabel> {
        match s.to_ascii_uppercase().as_str() {
            "AD" => Some(ClassLabel::AD),
            "CN" => Some(ClassLabel::CN),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::AD => "AD",
            ClassLabel::CN => "CN",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(pub Vec<f64>);

impl NoiseVector {
    pub fn sample(rng: &mut impl Rng, dim: usize) -> Self {
        NoiseVector((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Vec<f64>);

impl StyleCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Embedding table plus three fully connected layers.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub dim: usize,
    embed: ParamId,
    layers: Vec<Dense>,
}

impl MappingNetwork {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, dim: usize, lr_mul: f64) -> Self {
        let embed = ps.add("mapping.embed", randn(rng, &[2, dim]));
        let layers = (0..3)
            .map(|i| Dense::new(ps, rng, &format!("mapping.fc{i}"), if i == 0 { 2 * dim } else { dim }, dim, lr_mul, 0.0))
            .collect();
        Self { dim, embed, layers }
    }

    pub fn embeddings(&self, p: &Bound, labels: &[ClassLabel]) -> Var {
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        p.get(self.embed).gather_rows(&idx)
    }

    /// `z: [N, dim] -> w: [N, dim]`.
    pub fn forward(&self, p: &Bound, labels: &[ClassLabel], z: &Var) -> Var {
        assert_eq!(z.shape(), [labels.len(), self.dim]);
        let e = normalize_2nd_moment(&self.embeddings(p, labels));
        let mut x = Var::concat(&[e, normalize_2nd_moment(z)], 1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(p, &x);
            if i + 1 < self.layers.len() {
                x = x.leaky_relu(0.2);
            }
        }
        x
    }
}

fn normalize_2nd_moment(x: &Var) -> Var {
    let d = x.shape()[1] as f64;
    x.div(&x.square().sum_axes(&[1], true).scale(1.0 / d).add_scalar(1e-8).sqrt())
}

/// A mapping network with its own parameters, for standalone use.
#[derive(Clone, Debug)]
pub struct MappingParams {
    pub net: MappingNetwork,
    pub params: ParamSet,
}

impl MappingParams {
    pub fn init(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = MappingNetwork::new(&mut params, &mut rng, dim, 0.01);
        Self { net, params }
    }
}

pub fn embed_class(label: ClassLabel, net: &MappingNetwork, params: &ParamSet) -> Vec<f64> {
    net.embeddings(&params.bind(false), &[label]).value().data().to_vec()
}

pub fn map_to_style(label: ClassLabel, z: &NoiseVector, net: &MappingNetwork, params: &ParamSet) -> Result<StyleCode, ManifoldError> {
    if z.0.len() != net.dim {
        return Err(ManifoldError::Dimension { got: z.0.len(), expected: net.dim });
    }
    if !z.0.iter().all(|v| v.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let zt = Var::constant(Tensor::new(&[1, net.dim], z.0.clone()));
    let w = no_grad(|| net.forward(&params.bind(false), &[label], &zt));
    Ok(StyleCode(w.value().data().to_vec()))
}

/// `n` codes from i.i.d. mapping noise drawn in order from a ChaCha8 stream seeded with `seed`.
pub fn sample_styles(label: ClassLabel, n: usize, seed: u64, net: &MappingNetwork, params: &ParamSet) -> Vec<StyleCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = params.bind(false);
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 256;
    while out.len() < n {
        let m = CHUNK.min(n - out.len());
        let z = Var::constant(randn(&mut rng, &[m, net.dim]));
        let w = no_grad(|| net.forward(&bound, &vec![label; m], &z));
        out.extend(w.value().data().chunks(net.dim).map(|c| StyleCode(c.to_vec())));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSidecar {
    pub n: usize,
    pub dim: usize,
    pub class: ClassLabel,
    pub seed: u64,
}

/// Flat row-major f64 array at `stem.bin` with a JSON sidecar at `stem.json`.
pub fn export_styles(stem: &Path, codes: &[StyleCode], class: ClassLabel, seed: u64) -> Result<(), ManifoldError> {
    let dim = codes.first().map_or(0, StyleCode::dim);
    let flat: Vec<f64> = codes.iter().flat_map(|c| c.0.iter().copied()).collect();
    io::write_f64s(&stem.with_extension("bin"), &flat)?;
    io::write_json(&stem.with_extension("json"), &StyleSidecar { n: codes.len(), dim, class, seed })?;
    Ok(())
}

pub fn import_styles(stem: &Path) -> Result<(StyleSidecar, Vec<StyleCode>), ManifoldError> {
    let meta: StyleSidecar = io::read_json(&stem.with_extension("json"))?;
    let flat = io::read_f64s(&stem.with_extension("bin"))?;
    if flat.len() != meta.n * meta.dim {
        return Err(ManifoldError::Dimension { got: flat.len(), expected: meta.n * meta.dim });
    }
    let codes = flat.chunks(meta.dim.max(1)).map(|c| StyleCode(c.to_vec())).collect();
    Ok((meta, codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn embedding_rows() {
        let m = MappingParams::init(3, STYLE_DIM);
        let a1 = embed_class(ClassLabel::AD, &m.net, &m.params);
        let a2 = embed_class(ClassLabel::AD, &m.net, &m.params);
        let c = embed_class(ClassLabel::CN, &m.net, &m.params);
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 512);
        assert!(dist(&a1, &c) > 0.0);
    }

    #[test]
    fn style_codes_are_deterministic_and_class_dependent() {
        let m = MappingParams::init(4, STYLE_DIM);
        let z = NoiseVector::sample(&mut ChaCha8Rng::seed_from_u64(9), STYLE_DIM);
        let w1 = map_to_style(ClassLabel::AD, &z, &m.net, &m.params).unwrap();
        let w2 = map_to_style(ClassLabel::AD, &z, &m.net, &m.params).unwrap();
        let wc = map_to_style(ClassLabel::CN, &z, &m.net, &m.params).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(w1.dim(), 512);
        assert!(dist(&w1.0, &wc.0) > 0.0);
    }

    #[test]
    fn rejects_bad_noise() {
        let m = MappingParams::init(4, 8);
        assert!(matches!(map_to_style(ClassLabel::AD, &NoiseVector(vec![0.0; 7]), &m.net, &m.params), Err(ManifoldError::Dimension { .. })));
        let mut z = vec![0.0; 8];
        z[3] = f64::NAN;
        assert!(matches!(map_to_style(ClassLabel::AD, &NoiseVector(z), &m.net, &m.params), Err(ManifoldError::NonFinite)));
    }

    #[test]
    fn sample_styles_matches_single_draw() {
        let m = MappingParams::init(5, 16);
        let s = sample_styles(ClassLabel::CN, 1, 77, &m.net, &m.params);
        let z = NoiseVector(randn(&mut ChaCha8Rng::seed_from_u64(77), &[1, 16]).into_data());
        assert_eq!(s, vec![map_to_style(ClassLabel::CN, &z, &m.net, &m.params).unwrap()]);
        assert_eq!(sample_styles(ClassLabel::CN, 300, 1, &m.net, &m.params), sample_styles(ClassLabel::CN, 300, 1, &m.net, &m.params));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MappingParams::init(5, 8);
        let codes = sample_styles(ClassLabel::AD, 5, 2, &m.net, &m.params);
        let stem = dir.path().join("styles_ad");
        export_styles(&stem, &codes, ClassLabel::AD, 2).unwrap();
        let (meta, back) = import_styles(&stem).unwrap();
        assert_eq!(meta, StyleSidecar { n: 5, dim: 8, class: ClassLabel::AD, seed: 2 });
        assert_eq!(back, codes);
    }
}
