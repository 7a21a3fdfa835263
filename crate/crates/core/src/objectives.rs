//! Training objectives. Each loss is a differentiable scalar [`Var`] so the
//! optimizer can take its gradient; [`LossTerms`] is the logged record.

use didigan_tensor::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::CriticClass;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("non-finite loss term `{term}`")]
    NonFinite { term: &'static str },
}

/// Discriminator side: `softplus(−real) + softplus(fake)`, batch means.
pub fn adv_loss_d(real_logits: &Var, fake_logits: &Var) -> Var {
    real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())
}

/// Generator side, non-saturating: `softplus(−fake)`.
pub fn adv_loss_g(fake_logits: &Var) -> Var {
    fake_logits.neg().softplus().mean()
}

/// Mean squared difference between a constraint and its reconstruction.
pub fn cycle_loss(c: &Var, c_hat: &Var) -> Result<Var, ObjectiveError> {
    if c.shape() != c_hat.shape() {
        return Err(ObjectiveError::Shape(c.shape().to_vec(), c_hat.shape().to_vec()));
    }
    Ok(c.sub(c_hat).square().mean())
}

/// Cross-entropy of `[N, 3]` logits against per-row targets, averaged.
pub fn class_loss(logits: &Var, targets: &[CriticClass]) -> Result<Var, ObjectiveError> {
    let n = targets.len();
    if logits.shape() != [n, 3] {
        return Err(ObjectiveError::Shape(logits.shape().to_vec(), vec![n, 3]));
    }
    let mut onehot = Tensor::zeros(&[n, 3]);
    for (i, t) in targets.iter().enumerate() {
        onehot.data_mut()[i * 3 + t.index()] = 1.0;
    }
    Ok(logits.log_softmax().mul_const(&onehot).sum().scale(-1.0 / n as f64))
}

/// Negative per-pair RMS difference, clamped below at `floor`, averaged over the batch.
pub fn diversity_loss(img1: &Var, img2: &Var, floor: f64) -> Result<Var, ObjectiveError> {
    if img1.shape() != img2.shape() {
        return Err(ObjectiveError::Shape(img1.shape().to_vec(), img2.shape().to_vec()));
    }
    let n = img1.shape()[0];
    let per = img1.value().len() / n;
    let d = img1.sub(img2).reshape(&[n, per]);
    let rms = d.square().sum_axes(&[1], false).scale(1.0 / per as f64).sqrt();
    Ok(rms.neg().maximum_scalar(floor).mean())
}

/// `(γ/2) · mean_n ‖∂adv_n/∂x_n‖²` on a real batch. `adv` maps `[N, …]` images to `[N, 1]` logits.
pub fn r1_penalty(adv: impl Fn(&Var) -> Var, real: &Tensor, gamma: f64) -> Var {
    let x = Var::leaf(real.clone());
    let logits = adv(&x);
    let n = real.shape()[0] as f64;
    let g = grad(&logits.sum(), &[&x], true)[0].clone();
    match g {
        Some(g) => g.square().sum().scale(gamma / (2.0 * n)),
        None => Var::scalar(0.0),
    }
}

/// Running mean of the path-length norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLengthState {
    pub mean: f64,
    pub decay: f64,
}

impl Default for PathLengthState {
    fn default() -> Self {
        Self { mean: 0.0, decay: 0.99 }
    }
}

/// Path-length penalty `mean_n (‖J_nᵀ y_n‖ − a)²` with `J` the Jacobian of the
/// generator output with respect to the style code.
///
/// `gen` maps `w: [N, D]` to images; `y` is image-shaped noise. The penalty
/// uses the incoming running mean; the returned state has absorbed this
/// batch's mean norm.
pub fn path_length_penalty(gen: impl Fn(&Var) -> Var, w: &Tensor, y: &Tensor, state: PathLengthState) -> (Var, PathLengthState) {
    let wv = Var::leaf(w.clone());
    let img = gen(&wv);
    assert_eq!(img.shape(), y.shape(), "path-length noise must match the image batch");
    let n = w.shape()[0];
    let inner = img.mul_const(y).sum();
    let norms = match grad(&inner, &[&wv], true)[0].clone() {
        Some(gw) => gw.square().sum_axes(&[1], false).sqrt(),
        None => Var::constant(Tensor::zeros(&[n])),
    };
    let penalty = norms.add_scalar(-state.mean).square().mean();
    let batch_mean = norms.value().sum() / n as f64;
    let mean = state.mean + (1.0 - state.decay) * (batch_mean - state.mean);
    (penalty, PathLengthState { mean, decay: state.decay })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub cycle: f64,
    pub classify: f64,
    pub diversity: f64,
    pub path_length: f64,
    /// The R1 γ.
    pub r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, cycle: 10.0, classify: 1.0, diversity: 1.0, path_length: 2.0, r1: 1.0 }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        Self { adv: 1.0, cycle: 1.0, classify: 1.0, diversity: 1.0, path_length: 1.0, r1: 1.0 }
    }
}

/// Unweighted term values in the fixed order adv, cycle, classify, diversity,
/// path_length, r1. R1 enters with γ = 1 so the weight supplies γ.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawTerms {
    pub adv: f64,
    pub cycle: f64,
    pub classify: f64,
    pub diversity: f64,
    pub path_length: f64,
    pub r1: f64,
}

/// Weighted loss record. `total` is the left-to-right sum of the six fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub adv: f64,
    pub cycle: f64,
    pub classify: f64,
    pub diversity: f64,
    pub path_length: f64,
    pub r1: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn sum_components(&self) -> f64 {
        self.adv + self.cycle + self.classify + self.diversity + self.path_length + self.r1
    }
}

pub fn total_loss(raw: RawTerms, w: LossWeights) -> Result<LossTerms, ObjectiveError> {
    let named = [
        ("adv", raw.adv),
        ("cycle", raw.cycle),
        ("classify", raw.classify),
        ("diversity", raw.diversity),
        ("path_length", raw.path_length),
        ("r1", raw.r1),
    ];
    for (term, v) in named {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite { term });
        }
    }
    let mut t = LossTerms {
        adv: w.adv * raw.adv,
        cycle: w.cycle * raw.cycle,
        classify: w.classify * raw.classify,
        diversity: w.diversity * raw.diversity,
        path_length: w.path_length * raw.path_length,
        r1: w.r1 * raw.r1,
        total: 0.0,
    };
    t.total = t.sum_components();
    if !t.total.is_finite() {
        return Err(ObjectiveError::NonFinite { term: "total" });
    }
    Ok(t)
}

/// Differentiable weighted sum of whichever terms are present, with its record.
#[derive(Default)]
pub struct LossBuilder {
    raw: RawTerms,
    vars: Vec<(f64, Var)>,
}

impl LossBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn adv(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.adv += v.item();
        self.vars.push((w.adv, v));
        self
    }

    pub fn cycle(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.cycle += v.item();
        self.vars.push((w.cycle, v));
        self
    }

    pub fn classify(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.classify += v.item();
        self.vars.push((w.classify, v));
        self
    }

    pub fn diversity(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.diversity += v.item();
        self.vars.push((w.diversity, v));
        self
    }

    pub fn path_length(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.path_length += v.item();
        self.vars.push((w.path_length, v));
        self
    }

    pub fn r1(&mut self, w: &LossWeights, v: Var) -> &mut Self {
        self.raw.r1 += v.item();
        self.vars.push((w.r1, v));
        self
    }

    pub fn finish(self, w: LossWeights) -> Result<(Var, LossTerms), ObjectiveError> {
        let terms = total_loss(self.raw, w)?;
        let mut total = Var::scalar(0.0);
        for (weight, v) in self.vars {
            if weight != 0.0 {
                total = total.add(&v.scale(weight));
            }
        }
        Ok((total, terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Var {
        Var::constant(Tensor::new(&[data.len(), 1], data.to_vec()))
    }

    #[test]
    fn adversarial_examples() {
        assert!((adv_loss_d(&v(&[0.0]), &v(&[0.0])).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((adv_loss_g(&v(&[0.0])).item() - 2f64.ln()).abs() < 1e-12);
        assert!(adv_loss_g(&v(&[50.0])).item() < 1e-20);
    }

    #[test]
    fn cycle_examples() {
        let c = Var::constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.1));
        let c1 = Var::constant(c.value().map(|x| x + 1.0));
        assert_eq!(cycle_loss(&c, &c).unwrap().item(), 0.0);
        assert!((cycle_loss(&c, &c1).unwrap().item() - 1.0).abs() < 1e-12);
        assert_eq!(cycle_loss(&c, &c1).unwrap().item(), cycle_loss(&c1, &c).unwrap().item());
        assert!(cycle_loss(&c, &Var::constant(Tensor::zeros(&[1, 1, 2, 2]))).is_err());
    }

    #[test]
    fn class_examples() {
        let l = |x: [f64; 3]| Var::constant(Tensor::new(&[1, 3], x.to_vec()));
        assert!((class_loss(&l([0.0; 3]), &[CriticClass::FAKE]).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let expect = -(1.0 / (2.0 + 10f64.exp())).ln();
        assert!((class_loss(&l([0.0, 10.0, 0.0]), &[CriticClass::AD]).unwrap().item() - expect).abs() < 1e-12);
        assert!((expect - 10.0001).abs() < 1e-3);
        assert!(class_loss(&l([60.0, 0.0, 0.0]), &[CriticClass::AD]).unwrap().item() < 1e-20);
    }

    #[test]
    fn diversity_examples() {
        let a = Var::constant(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64).sin()));
        let b = Var::constant(a.value().map(|x| x + 1.0));
        assert_eq!(diversity_loss(&a, &a, -1.0).unwrap().item(), 0.0);
        assert!((diversity_loss(&a, &b, -10.0).unwrap().item() + 1.0).abs() < 1e-12);
        let c = Var::constant(a.value().map(|x| x + 3.0));
        assert_eq!(diversity_loss(&a, &c, -1.0).unwrap().item(), -1.0);
    }

    #[test]
    fn total_examples() {
        let z = total_loss(RawTerms::default(), LossWeights::unit()).unwrap();
        assert_eq!(z.total, 0.0);
        let ones = RawTerms { adv: 1.0, cycle: 1.0, classify: 1.0, diversity: 1.0, path_length: 1.0, r1: 1.0 };
        assert_eq!(total_loss(ones, LossWeights::unit()).unwrap().total, 6.0);
        let w = LossWeights { adv: 1.0, cycle: 10.0, classify: 1.0, diversity: 1.0, path_length: 0.0, r1: 0.0 };
        let raw = RawTerms { adv: 0.5, cycle: 0.2, classify: 1.0, diversity: -0.3, path_length: 0.0, r1: 0.0 };
        let t = total_loss(raw, w).unwrap();
        assert!((t.total - 3.2).abs() < 1e-12);
        assert_eq!(t.total, t.sum_components());
        let bad = RawTerms { cycle: f64::NAN, ..raw };
        assert_eq!(total_loss(bad, w), Err(ObjectiveError::NonFinite { term: "cycle" }));
    }
}
