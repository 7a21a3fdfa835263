//! Anti-aliased filtering and resampling.
//!
//! Discrete images are treated as samples of a bandlimited continuous signal:
//! resampling is zero-insertion, Kaiser-windowed-sinc low-pass filtering and
//! decimation, and pointwise nonlinearities are evaluated at an oversampled
//! rate and low-passed before returning to the original grid.
//!
//! Sample `i` of a signal at rate `r` sits at continuous position `i / r`, so
//! every resolution of an image shares the same origin. Edges use whole-sample
//! symmetric reflection.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use didigan_tensor::{LinearMap1d, SparseRows};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid filter band: {0}")]
    InvalidBand(String),
    #[error("side {side} scaled by {up}/{down} is not an integer")]
    NonIntegerSize { side: usize, up: usize, down: usize },
    #[error("kernel cutoff {cutoff} exceeds the anti-alias limit {limit} for down-sampling by {down}")]
    KernelTooWide { cutoff: f64, limit: f64, down: usize },
    #[error("image side {side} is not divisible by factor {factor}")]
    IndivisibleSide { side: usize, factor: usize },
    #[error("oversampling factor {0} is not supported (use 2 or 4)")]
    UnsupportedOversample(usize),
    #[error("image must be square, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("image contains non-finite values")]
    NonFinite,
    #[error("up/down factors must be positive")]
    ZeroFactor,
}

/// Symmetric odd-length FIR low-pass kernel with unit DC gain.
#[derive(Clone, Debug, PartialEq)]
pub struct LowpassKernel {
    taps: Vec<f64>,
    cutoff: f64,
    transition_width: f64,
    attenuation_db: f64,
}

/// Default stopband attenuation used by the generator and constraint builder.
pub const DEFAULT_ATTENUATION_DB: f64 = 60.0;

/// Stopband for the filters around a pointwise nonlinearity. Two filters are
/// cascaded there, so the passband ripple budget is tighter.
pub const NONLINEARITY_ATTENUATION_DB: f64 = 80.0;

impl LowpassKernel {
    /// The single-tap delta kernel: filtering with it is the identity.
    pub fn identity() -> Self {
        Self { taps: vec![1.0], cutoff: 0.5, transition_width: 0.0, attenuation_db: 0.0 }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn transition_width(&self) -> f64 {
        self.transition_width
    }

    pub fn stopband_edge(&self) -> f64 {
        self.cutoff + self.transition_width
    }

    pub fn attenuation_db(&self) -> f64 {
        self.attenuation_db
    }

    /// `|H(f)|` at normalized frequency `f` (cycles per sample).
    pub fn magnitude(&self, f: f64) -> f64 {
        let m = self.taps.len() / 2;
        let mut h = self.taps[m];
        for k in 1..=m {
            h += 2.0 * self.taps[m + k] * (2.0 * PI * f * k as f64).cos();
        }
        h.abs()
    }

    /// Worst stopband level in dB over a uniform grid of `points` frequencies.
    pub fn worst_stopband_db(&self, points: usize) -> f64 {
        let lo = self.stopband_edge();
        let worst = (0..=points)
            .map(|i| self.magnitude(lo + (0.5 - lo) * i as f64 / points as f64))
            .fold(0.0f64, f64::max);
        20.0 * worst.max(1e-300).log10()
    }
}

/// Kaiser β for a requested stopband attenuation in dB.
pub fn kaiser_beta(attenuation_db: f64) -> f64 {
    let a = attenuation_db;
    if a > 50.0 {
        0.1102 * (a - 8.7)
    } else if a >= 21.0 {
        0.5842 * (a - 21.0).powf(0.4) + 0.07886 * (a - 21.0)
    } else {
        0.0
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser_sinc(n_taps: usize, fc: f64, beta: f64) -> Vec<f64> {
    let m = (n_taps / 2) as f64;
    let denom = bessel_i0(beta);
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - m;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let r = if m == 0.0 { 0.0 } else { t / m };
            let win = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom;
            sinc * win
        })
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Design a Kaiser-windowed sinc low-pass.
///
/// `cutoff` is the passband edge and `cutoff + transition_width` the stopband
/// edge, both in cycles per sample. The tap count starts from the Kaiser
/// length estimate and grows until a dense sweep confirms the attenuation.
pub fn design_lowpass(cutoff: f64, transition_width: f64, attenuation_db: f64) -> Result<LowpassKernel, DspError> {
    if !(cutoff > 0.0) {
        return Err(DspError::InvalidBand(format!("cutoff {cutoff} must be > 0")));
    }
    if !(transition_width > 0.0) {
        return Err(DspError::InvalidBand(format!("transition width {transition_width} must be > 0")));
    }
    if cutoff + transition_width > 0.5 + 1e-12 {
        return Err(DspError::InvalidBand(format!(
            "cutoff + transition width = {} must be <= 0.5",
            cutoff + transition_width
        )));
    }
    if !(attenuation_db >= 20.0) {
        return Err(DspError::InvalidBand(format!("attenuation {attenuation_db} dB must be >= 20")));
    }
    let beta = kaiser_beta(attenuation_db);
    let estimate = ((attenuation_db - 7.95) / (14.36 * transition_width)).ceil() as usize + 1;
    let mut n_taps = estimate | 1;
    let fc = cutoff + transition_width / 2.0;
    loop {
        let kernel = LowpassKernel {
            taps: kaiser_sinc(n_taps, fc, beta),
            cutoff,
            transition_width,
            attenuation_db,
        };
        if kernel.worst_stopband_db(4096) <= -attenuation_db || n_taps > 20_000 {
            return Ok(kernel);
        }
        n_taps += 2;
    }
}

/// The standard anti-aliasing kernel for resampling by `up/down`: stopband at
/// the lower of the two Nyquist rates, passband edge at half of it.
pub fn antialias_kernel(up: usize, down: usize, attenuation_db: f64) -> LowpassKernel {
    let m = up.max(down) as f64;
    design_lowpass(0.25 / m, 0.25 / m, attenuation_db).expect("valid band by construction")
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - r;
    }
    r as usize
}

/// 1D resampling operator: zero-insert by `up`, filter (taps at the
/// intermediate rate, gain `up`), keep every `down`-th sample.
pub fn resample_operator(n_in: usize, up: usize, down: usize, kernel: &LowpassKernel) -> Result<SparseRows, DspError> {
    if up == 0 || down == 0 {
        return Err(DspError::ZeroFactor);
    }
    if (n_in * up) % down != 0 {
        return Err(DspError::NonIntegerSize { side: n_in, up, down });
    }
    let n_out = n_in * up / down;
    let taps = kernel.taps();
    let c = (taps.len() / 2) as isize;
    let mut rows = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (t, &h) in taps.iter().enumerate() {
            let m = (j * down) as isize + t as isize - c;
            if m.rem_euclid(up as isize) != 0 {
                continue;
            }
            let i = reflect(m.div_euclid(up as isize), n_in);
            *acc.entry(i).or_insert(0.0) += h * up as f64;
        }
        let sum: f64 = acc.values().sum();
        // Polyphase components only approximate unit gain; pin it exactly.
        if sum.abs() > 0.5 {
            for v in acc.values_mut() {
                *v /= sum;
            }
        }
        rows.push(acc.into_iter().filter(|&(_, w)| w != 0.0).collect());
    }
    Ok(SparseRows::new(n_in, rows))
}

/// Sample-and-hold upsampling (the ablated, aliasing path).
pub fn nearest_upsample_operator(n_in: usize, up: usize) -> SparseRows {
    SparseRows::new(n_in, (0..n_in * up).map(|j| vec![(j / up, 1.0)]).collect())
}

/// Plain strided decimation with no pre-filter (the ablated, aliasing path).
pub fn strided_decimation_operator(n_in: usize, down: usize) -> SparseRows {
    SparseRows::new(n_in, (0..n_in / down).map(|j| vec![(j * down, 1.0)]).collect())
}

/// A square single-channel image on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    data: Array2<f64>,
    sample_rate: f64,
}

impl ImageGrid {
    pub fn new(data: Array2<f64>) -> Result<Self, DspError> {
        Self::with_rate(data, 1.0)
    }

    pub fn with_rate(data: Array2<f64>, sample_rate: f64) -> Result<Self, DspError> {
        let (h, w) = data.dim();
        if h != w {
            return Err(DspError::NonSquare(h, w));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        Ok(Self { data, sample_rate })
    }

    pub fn constant(side: usize, value: f64) -> Self {
        Self { data: Array2::from_elem((side, side), value), sample_rate: 1.0 }
    }

    pub fn side(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Apply the same 1D operator along both axes.
    pub fn apply_separable(&self, op: &SparseRows) -> ImageGrid {
        let n = self.side();
        assert_eq!(op.n_in(), n);
        let m = op.n_out();
        let mut tmp = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let row: Vec<f64> = self.data.row(i).to_vec();
            for (j, v) in op.apply(&row).into_iter().enumerate() {
                tmp[[i, j]] = v;
            }
        }
        let mut out = Array2::<f64>::zeros((m, m));
        for j in 0..m {
            let col: Vec<f64> = tmp.column(j).to_vec();
            for (i, v) in op.apply(&col).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        ImageGrid { data: out, sample_rate: self.sample_rate * m as f64 / n as f64 }
    }
}

/// Resample by the rational factor `up/down` using `kernel` at the
/// intermediate rate.
pub fn resample(img: &ImageGrid, up: usize, down: usize, kernel: &LowpassKernel) -> Result<ImageGrid, DspError> {
    if up == 0 || down == 0 {
        return Err(DspError::ZeroFactor);
    }
    if down > up {
        let limit = 0.5 / down as f64;
        if kernel.cutoff() > limit + 1e-12 {
            return Err(DspError::KernelTooWide { cutoff: kernel.cutoff(), limit, down });
        }
    }
    let op = resample_operator(img.side(), up, down, kernel)?;
    Ok(img.apply_separable(&op))
}

/// Operators for an alias-suppressed pointwise nonlinearity at side `n`.
#[derive(Clone, Debug)]
pub struct FilteredNonlinearity {
    pub up: SparseRows,
    /// Low-pass at the original Nyquist, evaluated at the oversampled rate.
    pub filter: SparseRows,
    pub down: SparseRows,
}

impl FilteredNonlinearity {
    pub fn new(n: usize, oversample: usize, attenuation_db: f64) -> Result<Self, DspError> {
        if oversample != 2 && oversample != 4 {
            return Err(DspError::UnsupportedOversample(oversample));
        }
        let k_up = antialias_kernel(oversample, 1, attenuation_db);
        let k_down = antialias_kernel(1, oversample, attenuation_db);
        Ok(Self {
            up: resample_operator(n, oversample, 1, &k_up)?,
            filter: resample_operator(n * oversample, 1, 1, &k_down)?,
            down: resample_operator(n * oversample, 1, oversample, &k_down)?,
        })
    }
}

/// The oversampled, post-filter signal `LPF(f(up(x)))` before decimation.
pub fn filtered_nonlinearity_oversampled(
    img: &ImageGrid,
    f: impl Fn(f64) -> f64,
    oversample: usize,
) -> Result<ImageGrid, DspError> {
    let ops = FilteredNonlinearity::new(img.side(), oversample, NONLINEARITY_ATTENUATION_DB)?;
    let mut up = img.apply_separable(&ops.up);
    up.data.mapv_inplace(f);
    Ok(up.apply_separable(&ops.filter))
}

/// Upsample, apply `f` pointwise, low-pass at the original Nyquist and
/// decimate back to the input grid.
pub fn filtered_nonlinearity(img: &ImageGrid, f: impl Fn(f64) -> f64, oversample: usize) -> Result<ImageGrid, DspError> {
    let ops = FilteredNonlinearity::new(img.side(), oversample, NONLINEARITY_ATTENUATION_DB)?;
    let mut up = img.apply_separable(&ops.up);
    up.data.mapv_inplace(f);
    Ok(up.apply_separable(&ops.down))
}

/// Low-resolution anatomical blueprint of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint(ImageGrid);

impl Constraint {
    pub fn from_grid(grid: ImageGrid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.0
    }

    pub fn side(&self) -> usize {
        self.0.side()
    }

    pub fn data(&self) -> &Array2<f64> {
        self.0.data()
    }
}

/// Anti-aliased downsampling of `x` by an integer `factor`.
pub fn make_constraint(x: &ImageGrid, factor: usize) -> Result<Constraint, DspError> {
    if factor == 0 {
        return Err(DspError::ZeroFactor);
    }
    if x.side() % factor != 0 {
        return Err(DspError::IndivisibleSide { side: x.side(), factor });
    }
    if factor == 1 {
        return Ok(Constraint(x.clone()));
    }
    let kernel = antialias_kernel(1, factor, DEFAULT_ATTENUATION_DB);
    resample(x, 1, factor, &kernel).map(Constraint)
}

/// 1D operator pair (forward + adjoint) for use inside differentiable graphs.
pub fn linear_map(op: SparseRows) -> LinearMap1d {
    LinearMap1d::new(op)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_bands() {
        assert!(matches!(design_lowpass(0.0, 0.1, 60.0), Err(DspError::InvalidBand(m)) if m.contains("cutoff")));
        assert!(matches!(design_lowpass(0.4, 0.2, 60.0), Err(DspError::InvalidBand(m)) if m.contains("<= 0.5")));
        assert!(matches!(design_lowpass(0.2, 0.1, 10.0), Err(DspError::InvalidBand(m)) if m.contains(">= 20")));
    }

    #[test]
    fn kernel_is_odd_symmetric_and_unit_gain() {
        let k = design_lowpass(0.1, 0.05, 70.0).unwrap();
        assert_eq!(k.len() % 2, 1);
        let t = k.taps();
        for i in 0..t.len() {
            assert!((t[i] - t[t.len() - 1 - i]).abs() < 1e-15);
        }
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn non_integer_output_size_is_rejected() {
        let img = ImageGrid::constant(5, 0.0);
        let k = antialias_kernel(1, 2, 60.0);
        assert_eq!(resample(&img, 1, 2, &k), Err(DspError::NonIntegerSize { side: 5, up: 1, down: 2 }));
    }

    #[test]
    fn wide_kernel_rejected_when_decimating() {
        let img = ImageGrid::constant(8, 0.0);
        let k = design_lowpass(0.3, 0.1, 40.0).unwrap();
        assert!(matches!(resample(&img, 1, 2, &k), Err(DspError::KernelTooWide { .. })));
    }

    #[test]
    fn unsupported_oversample() {
        let img = ImageGrid::constant(8, 0.0);
        assert_eq!(filtered_nonlinearity(&img, |v| v, 3).unwrap_err(), DspError::UnsupportedOversample(3));
    }

    #[test]
    fn constraint_of_indivisible_side_fails() {
        let img = ImageGrid::constant(10, 0.0);
        assert_eq!(make_constraint(&img, 4).unwrap_err(), DspError::IndivisibleSide { side: 10, factor: 4 });
    }

    #[test]
    fn non_square_rejected() {
        assert_eq!(ImageGrid::new(Array2::zeros((3, 4))).unwrap_err(), DspError::NonSquare(3, 4));
    }
}
