//! Dense row-major `f64` tensors and the numeric kernels behind every op.

use crate::sparse::SparseRows;

/// Edge handling for 2D padding of the two trailing axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Whole-sample symmetric reflection (`x[-1] = x[1]`).
    Reflect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of `in_shape` aligned to the trailing axes of `out_shape`,
/// with zero stride on broadcast axes.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let off = nd - in_shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + off] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    strides
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Visit every element of `out_shape`, yielding the linear offsets into the output
/// and two broadcast operands.
fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..nd - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise binary op with numpy-style broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor { shape: self.shape.clone(), data };
        }
        if other.data.len() == 1 && other.shape.len() <= self.shape.len() {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        let shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = vec![0.0; numel(&shape)];
        for_each_broadcast2(&shape, &sa, &sb, |o, ia, ib| {
            data[o] = f(self.data[ia], other.data[ib]);
        });
        Tensor { shape, data }
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let target = broadcast_shape(&self.shape, shape);
        assert_eq!(target.as_deref(), Some(shape), "cannot broadcast {:?} to {shape:?}", self.shape);
        let sa = broadcast_strides(&self.shape, shape);
        let zero = vec![0; shape.len()];
        let mut data = vec![0.0; numel(shape)];
        for_each_broadcast2(shape, &sa, &zero, |o, ia, _| data[o] = self.data[ia]);
        Tensor { shape: shape.to_vec(), data }
    }

    /// Sum over broadcast axes so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let ok = broadcast_shape(shape, &self.shape).as_deref() == Some(&self.shape[..]);
        assert!(ok, "cannot reduce {:?} to {shape:?}", self.shape);
        let st = broadcast_strides(shape, &self.shape);
        let zero = vec![0; self.shape.len()];
        let mut data = vec![0.0; numel(shape)];
        for_each_broadcast2(&self.shape, &st, &zero, |i, it, _| data[it] += self.data[i]);
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let mut kept = self.shape.clone();
        for &a in axes {
            kept[a] = 1;
        }
        let r = self.sum_to(&kept);
        if keepdim {
            r
        } else {
            let shape: Vec<usize> = (0..self.shape.len())
                .filter(|a| !axes.contains(a))
                .map(|a| self.shape[a])
                .collect();
            r.reshape(&shape)
        }
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let nd = self.shape.len();
        assert_eq!(axes.len(), nd);
        let mut in_strides = vec![0; nd];
        let mut s = 1;
        for i in (0..nd).rev() {
            in_strides[i] = s;
            s *= self.shape[i];
        }
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; nd];
        let mut data = vec![0.0; self.data.len()];
        for_each_broadcast2(&shape, &strides, &zero, |o, i, _| data[o] = self.data[i]);
        Tensor { shape, data }
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.ndim() == 2 && other.ndim() == 2, "matmul expects 2D operands");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, false);
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        let first = parts[0];
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            for (d, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor { shape, data }
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "slice out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor { shape, data }
    }

    /// Adjoint of `slice_axis`: place `self` at `start` inside a zero tensor of extent `total`.
    pub fn embed_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        assert!(start + len <= total);
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor { shape, data }
    }

    fn planes(&self) -> (usize, usize, usize) {
        let nd = self.shape.len();
        assert!(nd >= 2, "expected at least two axes");
        let h = self.shape[nd - 2];
        let w = self.shape[nd - 1];
        (self.data.len() / (h * w).max(1), h, w)
    }

    pub fn pad2d(&self, p: usize, mode: PadMode) -> Tensor {
        let (planes, h, w) = self.planes();
        if mode == PadMode::Reflect {
            assert!(p < h && p < w, "reflect padding {p} needs extent > {p}");
        }
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut shape = self.shape.clone();
        let nd = shape.len();
        shape[nd - 2] = hp;
        shape[nd - 1] = wp;
        let mut data = vec![0.0; planes * hp * wp];
        let rows: Vec<Option<usize>> = (0..hp).map(|i| pad_index(i, p, h, mode)).collect();
        let cols: Vec<Option<usize>> = (0..wp).map(|j| pad_index(j, p, w, mode)).collect();
        for pl in 0..planes {
            let src = &self.data[pl * h * w..(pl + 1) * h * w];
            let dst = &mut data[pl * hp * wp..(pl + 1) * hp * wp];
            for (i, ri) in rows.iter().enumerate() {
                let Some(ri) = ri else { continue };
                for (j, cj) in cols.iter().enumerate() {
                    if let Some(cj) = cj {
                        dst[i * wp + j] = src[ri * w + cj];
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Adjoint of `pad2d`: fold a padded tensor back onto the unpadded grid.
    pub fn pad2d_adjoint(&self, p: usize, mode: PadMode) -> Tensor {
        let (planes, hp, wp) = self.planes();
        let (h, w) = (hp - 2 * p, wp - 2 * p);
        let mut shape = self.shape.clone();
        let nd = shape.len();
        shape[nd - 2] = h;
        shape[nd - 1] = w;
        let mut data = vec![0.0; planes * h * w];
        let rows: Vec<Option<usize>> = (0..hp).map(|i| pad_index(i, p, h, mode)).collect();
        let cols: Vec<Option<usize>> = (0..wp).map(|j| pad_index(j, p, w, mode)).collect();
        for pl in 0..planes {
            let src = &self.data[pl * hp * wp..(pl + 1) * hp * wp];
            let dst = &mut data[pl * h * w..(pl + 1) * h * w];
            for (i, ri) in rows.iter().enumerate() {
                let Some(ri) = ri else { continue };
                for (j, cj) in cols.iter().enumerate() {
                    if let Some(cj) = cj {
                        dst[ri * w + cj] += src[i * wp + j];
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Valid cross-correlation. `x: [N, Ci, H, W]`, `w: [Nw, Co, Ci, k, k]` with `Nw ∈ {1, N}`.
    pub fn conv2d_valid(&self, w: &Tensor) -> Tensor {
        let [n, ci, h, wd] = dims4(&self.shape);
        let [nw, co, ci2, k, k2] = dims5(&w.shape);
        assert!(ci == ci2 && k == k2, "conv2d: x {:?} vs w {:?}", self.shape, w.shape);
        assert!(nw == 1 || nw == n, "conv2d: weight batch {nw} vs input batch {n}");
        assert!(h >= k && wd >= k, "conv2d: kernel larger than input");
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let kk = ci * k * k;
        let mut out = vec![0.0; n * co * ho * wo];
        let mut col = Vec::new();
        for b in 0..n {
            let xb = &self.data[b * ci * h * wd..(b + 1) * ci * h * wd];
            let wb = if nw == 1 { &w.data[..co * kk] } else { &w.data[b * co * kk..(b + 1) * co * kk] };
            let cols: &[f64] = if k == 1 {
                xb
            } else {
                im2col(xb, ci, h, wd, k, &mut col);
                &col
            };
            let yb = &mut out[b * co * ho * wo..(b + 1) * co * ho * wo];
            gemm(co, kk, ho * wo, wb, (kk, 1), cols, (ho * wo, 1), yb, false);
        }
        Tensor { shape: vec![n, co, ho, wo], data: out }
    }

    /// Weight gradient of `conv2d_valid`: `gw[n,o,c,a,b] = Σ dy[n,o,i,j] x[n,c,i+a,j+b]`.
    /// With `shared`, the batch is summed into a single `[1, Co, Ci, k, k]` kernel.
    pub fn conv2d_wgrad(&self, dy: &Tensor, k: usize, shared: bool) -> Tensor {
        let [n, ci, h, wd] = dims4(&self.shape);
        let [n2, co, ho, wo] = dims4(&dy.shape);
        assert!(n == n2 && ho + k == h + 1 && wo + k == wd + 1, "conv2d_wgrad shape mismatch");
        let kk = ci * k * k;
        let nw = if shared { 1 } else { n };
        let mut out = vec![0.0; nw * co * kk];
        let mut col = Vec::new();
        for b in 0..n {
            let xb = &self.data[b * ci * h * wd..(b + 1) * ci * h * wd];
            let dyb = &dy.data[b * co * ho * wo..(b + 1) * co * ho * wo];
            let cols: &[f64] = if k == 1 {
                xb
            } else {
                im2col(xb, ci, h, wd, k, &mut col);
                &col
            };
            let gb = if shared { &mut out[..] } else { &mut out[b * co * kk..(b + 1) * co * kk] };
            // [Co, HoWo] x [HoWo, Ci k k] using the transposed view of the column buffer.
            gemm(co, ho * wo, kk, dyb, (ho * wo, 1), cols, (1, ho * wo), gb, shared);
        }
        Tensor { shape: vec![nw, co, ci, k, k], data: out }
    }

    /// `[Nw, Co, Ci, k, k] -> [Nw, Ci, Co, k, k]` with both spatial axes reversed.
    pub fn flip_transpose_kernel(&self) -> Tensor {
        let [nw, co, ci, k, _] = dims5(&self.shape);
        let mut out = vec![0.0; self.data.len()];
        for n in 0..nw {
            for o in 0..co {
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let src = (((n * co + o) * ci + c) * k + a) * k + b;
                            let dst = (((n * ci + c) * co + o) * k + (k - 1 - a)) * k + (k - 1 - b);
                            out[dst] = self.data[src];
                        }
                    }
                }
            }
        }
        Tensor { shape: vec![nw, ci, co, k, k], data: out }
    }

    /// Separable linear map on the two trailing axes: `Y = Mh X Mwᵀ` per plane.
    pub fn sep_linear(&self, mh: &SparseRows, mw: &SparseRows) -> Tensor {
        let (planes, h, w) = self.planes();
        assert!(mh.n_in() == h && mw.n_in() == w, "sep_linear: map/input size mismatch");
        let (ho, wo) = (mh.n_out(), mw.n_out());
        let mut tmp = vec![0.0; h * wo];
        let mut data = vec![0.0; planes * ho * wo];
        let mut tmp_all = Vec::new();
        if let Some(dw) = mw.dense() {
            // All rows of all planes at once: [planes·h, w] × Mwᵀ.
            tmp_all = vec![0.0; planes * h * wo];
            gemm(planes * h, w, wo, &self.data, (w, 1), dw, (1, w), &mut tmp_all, false);
        }
        for pl in 0..planes {
            let tmp: &[f64] = if mw.dense().is_some() {
                &tmp_all[pl * h * wo..(pl + 1) * h * wo]
            } else {
                let src = &self.data[pl * h * w..(pl + 1) * h * w];
                for i in 0..h {
                    let row = &src[i * w..(i + 1) * w];
                    let dst = &mut tmp[i * wo..(i + 1) * wo];
                    for (j, taps) in mw.rows().iter().enumerate() {
                        dst[j] = taps.iter().map(|&(c, wt)| wt * row[c]).sum();
                    }
                }
                &tmp
            };
            let out = &mut data[pl * ho * wo..(pl + 1) * ho * wo];
            if let Some(dh) = mh.dense() {
                gemm(ho, h, wo, dh, (h, 1), tmp, (wo, 1), out, false);
                continue;
            }
            for (i, taps) in mh.rows().iter().enumerate() {
                let dst = &mut out[i * wo..(i + 1) * wo];
                for &(r, wt) in taps {
                    let srow = &tmp[r * wo..(r + 1) * wo];
                    for (d, s) in dst.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        let nd = shape.len();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        Tensor { shape, data }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let d = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor { shape: vec![idx.len(), d], data }
    }

    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let d = self.shape[1];
        let mut data = vec![0.0; n_rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(&self.data[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        Tensor { shape: vec![n_rows, d], data }
    }
}

fn pad_index(i: usize, p: usize, n: usize, mode: PadMode) -> Option<usize> {
    let x = i as isize - p as isize;
    let n = n as isize;
    if (0..n).contains(&x) {
        return Some(x as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if x < 0 { -x } else { 2 * (n - 1) - x };
            Some(r as usize)
        }
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a 4D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn dims5(s: &[usize]) -> [usize; 5] {
    assert_eq!(s.len(), 5, "expected a 5D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}

fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, col: &mut Vec<f64>) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    col.clear();
    col.resize(ci * k * k * ho * wo, 0.0);
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for a in 0..k {
            for b in 0..k {
                let r = (c * k + a) * k + b;
                let dst = &mut col[r * ho * wo..(r + 1) * ho * wo];
                for i in 0..ho {
                    let s = (i + a) * w + b;
                    dst[i * wo..(i + 1) * wo].copy_from_slice(&plane[s..s + wo]);
                }
            }
        }
    }
}

/// `C (+)= A B` with explicit (row, col) strides for `A: m×k` and `B: k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of every operand were checked above against the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_add_and_reduce() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(&[3], vec![10., 20., 30.]);
        let c = a.zip_map(&b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        assert_eq!(c.sum_to(&[3]).data(), &[25., 47., 69.]);
        assert_eq!(c.sum_to(&[2, 1]).data(), &[66., 75.]);
    }

    #[test]
    fn permute_transposes() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.permute(&[1, 0]).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::from_fn(&[2, 2, 5, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[1, 3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let y = x.conv2d_valid(&w);
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        let xv = |n: usize, c: usize, i: usize, j: usize| x.data()[((n * 2 + c) * 5 + i) * 4 + j];
        let wv = |o: usize, c: usize, a: usize, b: usize| w.data()[((o * 2 + c) * 3 + a) * 3 + b];
        for n in 0..2 {
            for o in 0..3 {
                for i in 0..3 {
                    for j in 0..2 {
                        let mut s = 0.0;
                        for c in 0..2 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    s += wv(o, c, a, b) * xv(n, c, i + a, j + b);
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + o) * 3 + i) * 2 + j];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_pad_is_whole_sample_symmetric() {
        let x = Tensor::new(&[1, 3], vec![1., 2., 3.]).reshape(&[1, 1, 3]);
        let x = Tensor::concat(&[&x, &x], 1);
        let y = x.pad2d(1, PadMode::Reflect);
        assert_eq!(&y.data()[..5], &[2., 1., 2., 3., 2.]);
    }

    #[test]
    fn pad_adjoint_inner_product() {
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let x = Tensor::from_fn(&[1, 2, 4, 5], |i| (i as f64).sin());
            let g = Tensor::from_fn(&[1, 2, 8, 9], |i| (i as f64 * 0.7).cos());
            let lhs: f64 = x.pad2d(2, mode).zip_map(&g, |a, b| a * b).sum();
            let rhs: f64 = x.zip_map(&g.pad2d_adjoint(2, mode), |a, b| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{mode:?}");
        }
    }
}
