//! Central finite-difference gradient checking.

use crate::tensor::Tensor;
use crate::var::{grad, Var};

/// Outcome of comparing analytic and numeric gradients over sampled coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
}

/// Check `∂f/∂inputs` for a scalar function `f`.
///
/// `coords` selects `(input index, flat element index)` pairs to probe; pass
/// `None` to probe every element of every input.
pub fn check<F>(f: F, inputs: &[Tensor], eps: f64, coords: Option<&[(usize, usize)]>) -> GradCheck
where
    F: Fn(&[Var]) -> Var,
{
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    let out = f(&leaves);
    let refs: Vec<&Var> = leaves.iter().collect();
    let grads = grad(&out, &refs, false);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let eval = |i: usize, j: usize, delta: f64| -> f64 {
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut t = t.clone();
                if k == i {
                    t.data_mut()[j] += delta;
                }
                Var::leaf(t)
            })
            .collect();
        f(&vars).item()
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(i, j) in coords {
        analytic.push(grads[i].as_ref().map_or(0.0, |g| g.value().data()[j]));
        numeric.push((eval(i, j, eps) - eval(i, j, -eps)) / (2.0 * eps));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    GradCheck { analytic, numeric, rel_error }
}
