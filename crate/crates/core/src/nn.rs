//! Parameter storage, equalized-learning-rate layers and the Adam optimizer.
//!
//! Parameters live as plain tensors in a [`ParamSet`]. A forward pass binds
//! them to autodiff variables with [`ParamSet::bind`], runs, and hands the
//! gradients back to [`Adam::step`].

use didigan_tensor::{grad, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Wrap every tensor as a leaf (`trainable`) or a constant.
    pub fn bind(&self, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|t| if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) })
                .collect(),
        )
    }

    /// `self ← decay·self + (1−decay)·other`, used for the generator weight average.
    pub fn lerp_toward(&mut self, other: &ParamSet, decay: f64) {
        assert_eq!(self.names, other.names, "parameter sets do not match");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = decay * *x + (1.0 - decay) * y;
            }
        }
    }
}

/// Parameters bound to autodiff variables for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Bind caller-owned variables, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of `loss` for every bound parameter; zeros where unused.
    pub fn gradients(&self, loss: &Var) -> Vec<Tensor> {
        let inputs: Vec<&Var> = self.0.iter().collect();
        grad(loss, &inputs, false)
            .into_iter()
            .zip(&self.0)
            .map(|(g, v)| g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Fully connected layer with runtime weight scaling `lr_mul / sqrt(fan_in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub lr_mul: f64,
}

impl Dense {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, lr_mul: f64, bias_init: f64) -> Self {
        let w = randn(rng, &[fan_in, fan_out]).map(|v| v / lr_mul);
        let weight = ps.add(format!("{name}.weight"), w);
        let bias = ps.add(format!("{name}.bias"), Tensor::full(&[1, fan_out], bias_init / lr_mul));
        Self { weight, bias, fan_in, lr_mul }
    }

    /// `x: [N, fan_in] -> [N, fan_out]`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let w = p.get(self.weight).scale(self.lr_mul / (self.fan_in as f64).sqrt());
        x.matmul(&w).add(&p.get(self.bias).scale(self.lr_mul))
    }
}

/// Square convolution, equalized, with reflect padding to keep the size.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), randn(rng, &[1, c_out, c_in, k, k]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[1, c_out, 1, 1]));
        Self { weight, bias, k, c_in, c_out }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let w = p.get(self.weight).scale(1.0 / ((self.c_in * self.k * self.k) as f64).sqrt());
        x.pad2d(self.k / 2, didigan_tensor::PadMode::Reflect).conv2d(&w).add(p.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2.5e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.99, eps: 1e-8 }, &ps);
        for _ in 0..600 {
            let b = ps.bind(true);
            let loss = b.get(id).square().sum();
            let g = b.gradients(&loss);
            opt.step(&mut ps, &g);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 0.05), "{:?}", ps.get(id));
    }

    #[test]
    fn dense_uses_equalized_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let d = Dense::new(&mut ps, &mut rng, "fc", 4, 3, 0.01, 0.0);
        let b = ps.bind(false);
        let x = Var::constant(Tensor::ones(&[1, 4]));
        let y = d.forward(&b, &x);
        let w = ps.get(d.weight);
        for o in 0..3 {
            let expect: f64 = (0..4).map(|i| w.data()[i * 3 + o] * 0.01 / 2.0).sum();
            assert!((y.value().data()[o] - expect).abs() < 1e-12);
        }
    }
}
