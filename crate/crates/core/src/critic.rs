//! Three-headed convolutional critic: realness logit, constraint reconstruction
//! and AD/CN/FAKE classification.

use didigan_tensor::{no_grad, LinearMap1d, Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp;
use crate::nn::{Bound, Conv, Dense, ParamSet};
use crate::synthesis::rescale_map;

const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("critic configuration: {0}")]
    Config(String),
    #[error("input {got:?} does not match the critic resolution {expected}")]
    Resolution { got: Vec<usize>, expected: usize },
    #[error("resampling: {0}")]
    Resample(String),
}

/// Targets of the classification head, in logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CriticClass {
    AD,
    CN,
    FAKE,
}

impl CriticClass {
    pub const ALL: [CriticClass; 3] = [CriticClass::AD, CriticClass::CN, CriticClass::FAKE];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> CriticClass {
        Self::ALL[i]
    }
}

impl From<crate::manifold::ClassLabel> for CriticClass {
    fn from(l: crate::manifold::ClassLabel) -> Self {
        match l {
            crate::manifold::ClassLabel::AD => CriticClass::AD,
            crate::manifold::ClassLabel::CN => CriticClass::CN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub resolution: usize,
    pub constraint_resolution: usize,
    /// Channels at resolution `r` are `min(channel_max, channel_base · resolution / r)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub hidden: usize,
    /// Anti-aliased trunk downsampling; strided decimation when off.
    pub antialias: bool,
    pub filter_attenuation_db: f64,
}

impl CriticConfig {
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            constraint_resolution: 16,
            channel_base: 8,
            channel_max: 32,
            hidden: 64,
            antialias: true,
            filter_attenuation_db: dsp::DEFAULT_ATTENUATION_DB,
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        self.channel_max.min(self.channel_base * self.resolution / res).max(1)
    }

    pub fn validate(&self) -> Result<(), CriticError> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(CriticError::Config(format!("resolution {r} must be a power of two ≥ 8")));
        }
        let c = self.constraint_resolution;
        if c < 4 || c > r || !c.is_power_of_two() {
            return Err(CriticError::Config(format!("constraint resolution {c} must be a power of two in [4, {r}]")));
        }
        Ok(())
    }
}

/// Raw head outputs for a batch.
#[derive(Clone, Debug)]
pub struct CriticVars {
    /// `[N, 1]`
    pub adv: Var,
    /// `[N, 1, s, s]`
    pub c_hat: Var,
    /// `[N, 3]` ordered AD, CN, FAKE.
    pub logits: Var,
}

/// Head outputs for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutputs {
    pub adv_logit: f64,
    pub c_hat: Array2<f64>,
    pub class_logits: [f64; 3],
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv,
    down: LinearMap1d,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub cfg: CriticConfig,
    from_image: Conv,
    levels: Vec<Level>,
    c_head: (Conv, Conv),
    c_level: usize,
    fc: Dense,
    adv_head: Dense,
    class_head: Dense,
}

impl Critic {
    pub fn new(cfg: &CriticConfig, ps: &mut ParamSet, rng: &mut impl Rng) -> Result<Self, CriticError> {
        cfg.validate()?;
        let r = cfg.resolution;
        let from_image = Conv::new(ps, rng, "critic.from_image", 1, cfg.channels(r), 1);
        let mut levels = Vec::new();
        let mut res = r;
        while res > 4 {
            let conv = Conv::new(ps, rng, &format!("critic.l{res}"), cfg.channels(res), cfg.channels(res / 2), 3);
            let down = rescale_map(res, res / 2, cfg.antialias, cfg.filter_attenuation_db).map_err(|e| CriticError::Resample(e.to_string()))?;
            levels.push(Level { conv, down });
            res /= 2;
        }
        let c_level = (r / cfg.constraint_resolution).trailing_zeros() as usize;
        let cc = cfg.channels(cfg.constraint_resolution);
        let mid = cc.div_ceil(4).max(4);
        let c_head = (Conv::new(ps, rng, "critic.c_head0", cc, mid, 3), Conv::new(ps, rng, "critic.c_head1", mid, 1, 1));
        let flat = cfg.channels(4) * 16;
        let fc = Dense::new(ps, rng, "critic.fc", flat, cfg.hidden, 1.0, 0.0);
        let adv_head = Dense::new(ps, rng, "critic.adv", cfg.hidden, 1, 1.0, 0.0);
        let class_head = Dense::new(ps, rng, "critic.class", cfg.hidden, 3, 1.0, 0.0);
        Ok(Self { cfg: cfg.clone(), from_image, levels, c_head, c_level, fc, adv_head, class_head })
    }

    pub fn init(cfg: &CriticConfig, seed: u64) -> Result<(Self, ParamSet), CriticError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = Self::new(cfg, &mut ps, &mut rng)?;
        Ok((c, ps))
    }

    /// Shared trunk up to the `[N, C·16]` flattened 4×4 features and the
    /// constraint-resolution feature map.
    fn trunk(&self, p: &Bound, x: &Var) -> Result<(Var, Var), CriticError> {
        let r = self.cfg.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != r || s[3] != r {
            return Err(CriticError::Resolution { got: s.to_vec(), expected: r });
        }
        let act = |v: Var| v.leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
        let mut h = act(self.from_image.forward(p, x));
        let mut at_c = if self.c_level == 0 { Some(h.clone()) } else { None };
        for (i, lv) in self.levels.iter().enumerate() {
            h = act(lv.conv.forward(p, &h)).sep_linear(&lv.down, &lv.down);
            if i + 1 == self.c_level {
                at_c = Some(h.clone());
            }
        }
        let n = s[0];
        let flat = h.reshape(&[n, h.value().len() / n]);
        Ok((flat, at_c.expect("constraint level inside the trunk")))
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<CriticVars, CriticError> {
        let (flat, at_c) = self.trunk(p, x)?;
        let hidden = self.fc.forward(p, &flat).leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
        let c_hat = self.c_head.1.forward(p, &self.c_head.0.forward(p, &at_c).leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN));
        Ok(CriticVars { adv: self.adv_head.forward(p, &hidden), c_hat, logits: self.class_head.forward(p, &hidden) })
    }

    /// Realness logits only, `[N, 1]`.
    pub fn adv_logits(&self, p: &Bound, x: &Var) -> Result<Var, CriticError> {
        let (flat, _) = self.trunk(p, x)?;
        let hidden = self.fc.forward(p, &flat).leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
        Ok(self.adv_head.forward(p, &hidden))
    }

    /// Class logits only, `[N, 3]`.
    pub fn class_logits(&self, p: &Bound, x: &Var) -> Result<Var, CriticError> {
        let (flat, _) = self.trunk(p, x)?;
        let hidden = self.fc.forward(p, &flat).leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
        Ok(self.class_head.forward(p, &hidden))
    }

    /// Flattened 4×4 trunk features, `[N, C·16]`.
    pub fn features(&self, p: &Bound, x: &Var) -> Result<Var, CriticError> {
        Ok(self.trunk(p, x)?.0)
    }

    /// Class logits from precomputed [`Critic::features`].
    pub fn class_logits_from_features(&self, p: &Bound, flat: &Var) -> Var {
        let hidden = self.fc.forward(p, flat).leaky_relu(LRELU_SLOPE).scale(LRELU_GAIN);
        self.class_head.forward(p, &hidden)
    }

    /// Names of the parameters on the classification path above the trunk.
    pub fn class_path_param_names(&self, ps: &ParamSet) -> Vec<String> {
        [&self.fc, &self.class_head].iter().flat_map(|d| [ps.names()[d.weight.0].clone(), ps.names()[d.bias.0].clone()]).collect()
    }
}

pub fn image_var(images: &[&Array2<f64>]) -> Var {
    Var::constant(image_tensor(images))
}

pub fn image_tensor(images: &[&Array2<f64>]) -> Tensor {
    let (h, w) = images[0].dim();
    Tensor::new(&[images.len(), 1, h, w], images.iter().flat_map(|a| a.iter().copied()).collect())
}

pub fn discriminate(x: &Array2<f64>, critic: &Critic, params: &ParamSet) -> Result<CriticOutputs, CriticError> {
    let out = no_grad(|| critic.forward(&params.bind(false), &image_var(&[x])))?;
    let s = critic.cfg.constraint_resolution;
    let l = out.logits.value().data();
    Ok(CriticOutputs {
        adv_logit: out.adv.item(),
        c_hat: Array2::from_shape_vec((s, s), out.c_hat.value().data().to_vec()).unwrap(),
        class_logits: [l[0], l[1], l[2]],
    })
}

/// Argmax with ties going to the lower index.
pub fn argmax_class(logits: &[f64]) -> CriticClass {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    CriticClass::from_index(best)
}

pub fn classify(x: &Array2<f64>, critic: &Critic, params: &ParamSet) -> Result<CriticClass, CriticError> {
    Ok(argmax_class(&discriminate(x, critic, params)?.class_logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_class(&[2.0, 0.1, -1.0]), CriticClass::AD);
        assert_eq!(argmax_class(&[1.0, 1.0, 0.0]), CriticClass::AD);
        assert_eq!(argmax_class(&[0.0, 1.0, 1.0]), CriticClass::CN);
        assert_eq!(argmax_class(&[0.0, 0.0, 3.0]), CriticClass::FAKE);
    }
}
