//! Differentiable operations on [`Var`].

use crate::sparse::LinearMap1d;
use crate::tensor::{PadMode, Tensor};
use crate::var::Var;

fn unary(x: &Var, value: Tensor, backward: impl Fn(&Var, &Var, &Var) -> Var + 'static) -> Var {
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |p, _needs, out, g| vec![Some(backward(&p[0], out, g))]),
    )
}

impl Var {
    // ---- elementwise binary (broadcasting) ----

    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|p, needs, _out, g| {
                vec![
                    needs[0].then(|| g.sum_to(p[0].shape())),
                    needs[1].then(|| g.sum_to(p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|p, needs, _out, g| {
                vec![
                    needs[0].then(|| g.sum_to(p[0].shape())),
                    needs[1].then(|| g.neg().sum_to(p[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|p, needs, _out, g| {
                vec![
                    needs[0].then(|| g.mul(&p[1]).sum_to(p[0].shape())),
                    needs[1].then(|| g.mul(&p[0]).sum_to(p[1].shape())),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a / b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|p, needs, out, g| {
                vec![
                    needs[0].then(|| g.div(&p[1]).sum_to(p[0].shape())),
                    needs[1].then(|| g.mul(out).div(&p[1]).neg().sum_to(p[1].shape())),
                ]
            }),
        )
    }

    // ---- scalar helpers ----

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Var {
        unary(self, self.value().map(|v| v * s), move |_x, _o, g| g.scale(s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        unary(self, self.value().map(|v| v + s), |_x, _o, g| g.clone())
    }

    /// Multiply by a tensor that is not differentiated.
    pub fn mul_const(&self, c: &Tensor) -> Var {
        self.mul(&Var::constant(c.clone()))
    }

    // ---- elementwise unary ----

    pub fn exp(&self) -> Var {
        unary(self, self.value().map(f64::exp), |_x, out, g| g.mul(out))
    }

    pub fn ln(&self) -> Var {
        unary(self, self.value().map(f64::ln), |x, _o, g| g.div(x))
    }

    pub fn square(&self) -> Var {
        unary(self, self.value().map(|v| v * v), |x, _o, g| g.mul(x).scale(2.0))
    }

    /// Square root whose derivative is defined as zero at zero.
    pub fn sqrt(&self) -> Var {
        unary(self, self.value().map(f64::sqrt), |_x, out, g| g.mul(&out.recip_safe()).scale(0.5))
    }

    /// `1/x`, with `1/0` defined as zero.
    pub fn recip_safe(&self) -> Var {
        let value = self.value().map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
        unary(self, value, |_x, out, g| g.mul(&out.square()).neg())
    }

    pub fn tanh(&self) -> Var {
        unary(self, self.value().map(f64::tanh), |_x, out, g| {
            g.mul(&out.square().neg().add_scalar(1.0))
        })
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, self.value().map(sigmoid), |_x, out, g| {
            g.mul(out).mul(&out.neg().add_scalar(1.0))
        })
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Var {
        unary(self, self.value().map(softplus), |x, _o, g| g.mul(&x.sigmoid()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|v| if v >= 0.0 { v } else { slope * v });
        unary(self, value, move |x, _o, g| {
            let mask = x.value().map(|v| if v >= 0.0 { 1.0 } else { slope });
            g.mul_const(&mask)
        })
    }

    /// `max(x, floor)` with a zero gradient wherever the floor is active.
    pub fn maximum_scalar(&self, floor: f64) -> Var {
        let value = self.value().map(|v| v.max(floor));
        unary(self, value, move |x, _o, g| {
            let mask = x.value().map(|v| if v >= floor { 1.0 } else { 0.0 });
            g.mul_const(&mask)
        })
    }

    // ---- reductions and shape ----

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        unary(self, Tensor::scalar(self.value().sum()), move |_x, _o, g| g.broadcast_to(&shape))
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Var {
        let mut kept = self.shape().to_vec();
        for &a in axes {
            kept[a] = 1;
        }
        let r = self.sum_to(&kept);
        if keepdim {
            return r;
        }
        let shape: Vec<usize> = (0..self.shape().len())
            .filter(|a| !axes.contains(a))
            .map(|a| self.shape()[a])
            .collect();
        r.reshape(&shape)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        unary(self, self.value().sum_to(shape), move |_x, _o, g| g.broadcast_to(&orig))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        unary(self, self.value().broadcast_to(shape), move |_x, _o, g| g.sum_to(&orig))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        unary(self, self.value().reshape(shape), move |_x, _o, g| g.reshape(&orig))
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        unary(self, self.value().permute(axes), move |_x, _o, g| g.permute(&inv))
    }

    /// Transpose of a 2D var.
    pub fn t(&self) -> Var {
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.value().matmul(other.value());
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|p, needs, _out, g| {
                vec![
                    needs[0].then(|| g.matmul(&p[1].t())),
                    needs[1].then(|| p[0].t().matmul(g)),
                ]
            }),
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |_p, needs, _out, g| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let r = need.then(|| g.slice_axis(axis, start, len));
                        start += len;
                        r
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let total = self.shape()[axis];
        unary(self, self.value().slice_axis(axis, start, len), move |_x, _o, g| {
            g.embed_axis(axis, start, total)
        })
    }

    pub fn embed_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        let len = self.shape()[axis];
        unary(self, self.value().embed_axis(axis, start, total), move |_x, _o, g| {
            g.slice_axis(axis, start, len)
        })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let idx = idx.to_vec();
        let n_rows = self.shape()[0];
        let value = self.value().gather_rows(&idx);
        unary(self, value, move |_x, _o, g| g.scatter_rows(&idx, n_rows))
    }

    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Var {
        let idx = idx.to_vec();
        let value = self.value().scatter_rows(&idx, n_rows);
        unary(self, value, move |_x, _o, g| g.gather_rows(&idx))
    }

    // ---- image ops ----

    pub fn pad2d(&self, p: usize, mode: PadMode) -> Var {
        if p == 0 {
            return self.clone();
        }
        unary(self, self.value().pad2d(p, mode), move |_x, _o, g| g.pad2d_adjoint(p, mode))
    }

    pub fn pad2d_adjoint(&self, p: usize, mode: PadMode) -> Var {
        if p == 0 {
            return self.clone();
        }
        unary(self, self.value().pad2d_adjoint(p, mode), move |_x, _o, g| g.pad2d(p, mode))
    }

    /// Valid cross-correlation of `[N, Ci, H, W]` with `[Nw, Co, Ci, k, k]`, `Nw ∈ {1, N}`.
    pub fn conv2d(&self, w: &Var) -> Var {
        let value = self.value().conv2d_valid(w.value());
        Var::from_op(
            value,
            vec![self.clone(), w.clone()],
            Box::new(|p, needs, _out, g| {
                let k = p[1].shape()[3];
                let shared = p[1].shape()[0] == 1 && p[0].shape()[0] != 1;
                vec![
                    needs[0].then(|| g.pad2d(k - 1, PadMode::Zero).conv2d(&p[1].flip_transpose_kernel())),
                    needs[1].then(|| p[0].conv2d_wgrad(g, k, shared)),
                ]
            }),
        )
    }

    /// Weight gradient of [`Var::conv2d`] as a bilinear op in `(x, dy)`.
    pub fn conv2d_wgrad(&self, dy: &Var, k: usize, shared: bool) -> Var {
        let value = self.value().conv2d_wgrad(dy.value(), k, shared);
        Var::from_op(
            value,
            vec![self.clone(), dy.clone()],
            Box::new(move |p, needs, _out, g| {
                vec![
                    needs[0].then(|| p[1].pad2d(k - 1, PadMode::Zero).conv2d(&g.flip_transpose_kernel())),
                    needs[1].then(|| p[0].conv2d(g)),
                ]
            }),
        )
    }

    pub fn flip_transpose_kernel(&self) -> Var {
        unary(self, self.value().flip_transpose_kernel(), |_x, _o, g| g.flip_transpose_kernel())
    }

    /// Apply `mh` along rows and `mw` along columns of every trailing 2D plane.
    pub fn sep_linear(&self, mh: &LinearMap1d, mw: &LinearMap1d) -> Var {
        let value = self.value().sep_linear(mh.matrix(), mw.matrix());
        let (ah, aw) = (mh.adjoint(), mw.adjoint());
        unary(self, value, move |_x, _o, g| g.sep_linear(&ah, &aw))
    }

    // ---- composites ----

    /// Log-softmax along the last axis of a 2D var.
    pub fn log_softmax(&self) -> Var {
        let [rows, cols] = [self.shape()[0], self.shape()[1]];
        let mut maxes = vec![0.0; rows];
        for (r, m) in maxes.iter_mut().enumerate() {
            *m = self.value().data()[r * cols..(r + 1) * cols]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let shift = Var::constant(Tensor::new(&[rows, 1], maxes));
        let z = self.sub(&shift);
        let lse = z.exp().sum_axes(&[1], true).ln();
        z.sub(&lse)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}

impl std::ops::Add for &Var {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        Var::add(self, rhs)
    }
}

impl std::ops::Sub for &Var {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        Var::sub(self, rhs)
    }
}

impl std::ops::Mul for &Var {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        Var::mul(self, rhs)
    }
}
