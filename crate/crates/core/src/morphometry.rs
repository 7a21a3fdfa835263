//! Log-domain diffeomorphic demons registration, Jacobian-determinant maps and
//! ROI area-change statistics.
//!
//! A warp `φ(p) = p + u(p)` maps fixed-image coordinates into the moving
//! image, so `moving ∘ φ ≈ fixed`. With a CN fixed image and an AD moving
//! image, `log det ∇φ > 0` inside a fixed-space ROI means the structure is
//! larger in the AD image.

use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};

#[derive(Debug, Error)]
pub enum MorphometryError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Dense displacement in pixels, `y` (row) and `x` (column) components.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    pub uy: Array2<f64>,
    pub ux: Array2<f64>,
    pub fixed_id: String,
    pub moving_id: String,
}

impl WarpField {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { uy: Array2::zeros((h, w)), ux: Array2::zeros((h, w)), fixed_id: String::new(), moving_id: String::new() }
    }

    /// Field of an arbitrary map `φ(y, x) -> (y', x')`.
    pub fn from_map(h: usize, w: usize, phi: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut f = Self::identity(h, w);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = phi(i as f64, j as f64);
                f.uy[[i, j]] = y - i as f64;
                f.ux[[i, j]] = x - j as f64;
            }
        }
        f
    }

    pub fn dim(&self) -> (usize, usize) {
        self.uy.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.uy.iter().chain(self.ux.iter()).all(|v| v.is_finite())
    }

    pub fn mean_displacement(&self) -> (f64, f64) {
        (self.uy.mean().unwrap_or(0.0), self.ux.mean().unwrap_or(0.0))
    }

    pub fn mean_magnitude(&self) -> f64 {
        Zip::from(&self.uy).and(&self.ux).fold(0.0, |a, y, x| a + (y * y + x * x).sqrt()) / self.uy.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonsConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Gaussian σ (pixels) applied to each update.
    pub fluid_sigma: f64,
    /// Gaussian σ (pixels) applied to the accumulated velocity.
    pub diffusion_sigma: f64,
    /// Bounds a single update to `1 / (2·step_norm)` pixels.
    pub step_norm: f64,
    /// Final mean squared residual above which the result is flagged.
    pub max_residual: f64,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self { levels: 3, iterations: 50, fluid_sigma: 2.0, diffusion_sigma: 1.0, step_norm: 1.0, max_residual: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub warp: WarpField,
    pub initial_residual: f64,
    /// Mean squared difference between the warped moving image and the fixed image.
    pub residual: f64,
    pub converged: bool,
}

/// Bilinear sample with clamped edges.
pub fn sample_bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bot = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// `img ∘ φ`.
pub fn warp_image(img: &Array2<f64>, warp: &WarpField) -> Array2<f64> {
    Array2::from_shape_fn(img.dim(), |(i, j)| sample_bilinear(img, i as f64 + warp.uy[[i, j]], j as f64 + warp.ux[[i, j]]))
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut t: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian blur with clamped edges; `sigma ≤ 0` is the identity.
pub fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let (h, w) = a.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            tmp[[i, j]] = taps.iter().enumerate().map(|(k, t)| t * a[[i, clamp(j as i64 + k as i64 - r, w)]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = taps.iter().enumerate().map(|(k, t)| t * tmp[[clamp(i as i64 + k as i64 - r, h), j]]).sum::<f64>();
        }
    }
    out
}

/// Central-difference gradient `(∂y, ∂x)`, one-sided at the borders.
pub fn gradient(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = a.dim();
    let d = |get: &dyn Fn(usize) -> f64, i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == n - 1 {
            get(n - 1) - get(n - 2)
        } else {
            0.5 * (get(i + 1) - get(i - 1))
        }
    };
    let gy = Array2::from_shape_fn((h, w), |(i, j)| d(&|k| a[[k, j]], i, h));
    let gx = Array2::from_shape_fn((h, w), |(i, j)| d(&|k| a[[i, k]], j, w));
    (gy, gx)
}

/// `exp(v)` by scaling and squaring.
pub fn exponentiate(vy: &Array2<f64>, vx: &Array2<f64>) -> WarpField {
    let max = vy.iter().zip(vx.iter()).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0, f64::max);
    let mut n = 0;
    while max / f64::powi(2.0, n) > 0.5 {
        n += 1;
    }
    let s = f64::powi(2.0, -n);
    let mut f = WarpField { uy: vy * s, ux: vx * s, fixed_id: String::new(), moving_id: String::new() };
    for _ in 0..n {
        f = compose(&f, &f);
    }
    f
}

/// Field of `a ∘ b`: `p ↦ a(b(p))`.
pub fn compose(a: &WarpField, b: &WarpField) -> WarpField {
    let (h, w) = a.dim();
    let mut out = WarpField::identity(h, w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + b.uy[[i, j]], j as f64 + b.ux[[i, j]]);
            out.uy[[i, j]] = b.uy[[i, j]] + sample_bilinear(&a.uy, y, x);
            out.ux[[i, j]] = b.ux[[i, j]] + sample_bilinear(&a.ux, y, x);
        }
    }
    out.fixed_id = b.fixed_id.clone();
    out.moving_id = a.moving_id.clone();
    out
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, x, y| s + (x - y) * (x - y)) / a.len() as f64
}

fn downsample2(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| 0.25 * (a[[2 * i, 2 * j]] + a[[2 * i + 1, 2 * j]] + a[[2 * i, 2 * j + 1]] + a[[2 * i + 1, 2 * j + 1]]))
}

/// Resize a velocity component to `(h, w)` with pixel-centre alignment, scaling magnitudes.
fn upsample_field(a: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ah, aw) = a.dim();
    let (sy, sx) = (ah as f64 / h as f64, aw as f64 / w as f64);
    Array2::from_shape_fn((h, w), |(i, j)| sample_bilinear(a, (i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5) / sy)
}

/// Register `moving` onto `fixed`.
pub fn register(fixed: &Array2<f64>, moving: &Array2<f64>, cfg: &DemonsConfig) -> Result<Registration, MorphometryError> {
    if fixed.dim() != moving.dim() {
        return Err(MorphometryError::Shape(fixed.dim(), moving.dim()));
    }
    if cfg.levels == 0 || !(cfg.step_norm > 0.0) {
        return Err(MorphometryError::Parameter("need at least one level and a positive step norm".into()));
    }
    let (h, w) = fixed.dim();
    if h >> (cfg.levels - 1) < 4 || w >> (cfg.levels - 1) < 4 || h % (1 << (cfg.levels - 1)) != 0 || w % (1 << (cfg.levels - 1)) != 0 {
        return Err(MorphometryError::Parameter(format!("{h}x{w} cannot hold {} pyramid levels", cfg.levels)));
    }
    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().unwrap();
        pyramid.push((downsample2(f), downsample2(m)));
    }
    let (ch, cw) = pyramid.last().unwrap().0.dim();
    let (mut vy, mut vx) = (Array2::zeros((ch, cw)), Array2::zeros((ch, cw)));
    let a2 = cfg.step_norm * cfg.step_norm;
    for (f, m) in pyramid.iter().rev() {
        let (lh, lw) = f.dim();
        if vy.dim() != (lh, lw) {
            vy = upsample_field(&vy, lh, lw);
            vx = upsample_field(&vx, lh, lw);
        }
        let (fgy, fgx) = gradient(f);
        for _ in 0..cfg.iterations {
            let phi = exponentiate(&vy, &vx);
            let warped = warp_image(m, &phi);
            let (mgy, mgx) = gradient(&warped);
            let mut dy = Array2::zeros((lh, lw));
            let mut dx = Array2::zeros((lh, lw));
            for i in 0..lh {
                for j in 0..lw {
                    let diff = warped[[i, j]] - f[[i, j]];
                    // Symmetric gradient of the fixed and warped moving images.
                    let gy = 0.5 * (fgy[[i, j]] + mgy[[i, j]]);
                    let gx = 0.5 * (fgx[[i, j]] + mgx[[i, j]]);
                    let denom = gy * gy + gx * gx + a2 * diff * diff;
                    if denom > 1e-12 {
                        dy[[i, j]] = -diff * gy / denom;
                        dx[[i, j]] = -diff * gx / denom;
                    }
                }
            }
            let dy = gaussian_blur(&dy, cfg.fluid_sigma);
            let dx = gaussian_blur(&dx, cfg.fluid_sigma);
            // First-order update of the velocity, then diffusion regularization.
            vy = gaussian_blur(&(&vy + &dy), cfg.diffusion_sigma);
            vx = gaussian_blur(&(&vx + &dx), cfg.diffusion_sigma);
        }
    }
    let mut warp = exponentiate(&vy, &vx);
    warp.fixed_id.clear();
    warp.moving_id.clear();
    let residual = mse(&warp_image(moving, &warp), fixed);
    Ok(Registration { initial_residual: mse(moving, fixed), residual, converged: residual <= cfg.max_residual, warp })
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    pub det: Array2<f64>,
    /// Natural log of `det`; NaN where the warp folds.
    pub log_det: Array2<f64>,
    /// Pixels with `det ≤ 0`.
    pub folding: Array2<bool>,
}

impl JacobianMap {
    pub fn n_folded(&self) -> usize {
        self.folding.iter().filter(|&&b| b).count()
    }
}

pub fn jacobian_map(warp: &WarpField) -> JacobianMap {
    let (uyy, uyx) = gradient(&warp.uy);
    let (uxy, uxx) = gradient(&warp.ux);
    let det = Array2::from_shape_fn(warp.dim(), |(i, j)| (1.0 + uyy[[i, j]]) * (1.0 + uxx[[i, j]]) - uyx[[i, j]] * uxy[[i, j]]);
    let folding = det.mapv(|d| d <= 0.0);
    let log_det = det.mapv(|d| if d > 0.0 { d.ln() } else { f64::NAN });
    JacobianMap { det, log_det, folding }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub roi: String,
    pub n_pixels: usize,
    pub n_folded: usize,
    pub mean_log_jac: f64,
    /// `100 · (exp(mean_log_jac) − 1)`.
    pub pct_change: f64,
}

/// Mean log-Jacobian over a mask, skipping folded pixels.
pub fn roi_change(jac: &JacobianMap, roi: &Array2<bool>, name: &str) -> Result<RoiStats, MorphometryError> {
    if roi.dim() != jac.det.dim() {
        return Err(MorphometryError::Shape(roi.dim(), jac.det.dim()));
    }
    let (mut sum, mut n, mut folded) = (0.0, 0usize, 0usize);
    for ((&m, &l), &f) in roi.iter().zip(jac.log_det.iter()).zip(jac.folding.iter()) {
        if m {
            if f {
                folded += 1;
            } else {
                sum += l;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MorphometryError::Parameter(format!("ROI `{name}` has no unfolded pixels")));
    }
    let mean = sum / n as f64;
    Ok(RoiStats { roi: name.to_string(), n_pixels: n + folded, n_folded: folded, mean_log_jac: mean, pct_change: 100.0 * (mean.exp() - 1.0) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub height: usize,
    pub width: usize,
    pub components: Vec<String>,
    pub dtype: String,
    #[serde(default)]
    pub fixed_id: String,
    #[serde(default)]
    pub moving_id: String,
}

/// `stem.bin` holds `uy` then `ux` row-major; `stem.json` the header.
pub fn save_warp(stem: &Path, warp: &WarpField) -> Result<(), MorphometryError> {
    let (h, w) = warp.dim();
    let data: Vec<f64> = warp.uy.iter().chain(warp.ux.iter()).copied().collect();
    io::write_f64s(&stem.with_extension("bin"), &data)?;
    let header = FieldHeader {
        height: h,
        width: w,
        components: vec!["uy".into(), "ux".into()],
        dtype: "f64le".into(),
        fixed_id: warp.fixed_id.clone(),
        moving_id: warp.moving_id.clone(),
    };
    io::write_json(&stem.with_extension("json"), &header)?;
    Ok(())
}

pub fn load_warp(stem: &Path) -> Result<WarpField, MorphometryError> {
    let hd: FieldHeader = io::read_json(&stem.with_extension("json"))?;
    let data = io::read_f64s(&stem.with_extension("bin"))?;
    let n = hd.height * hd.width;
    if data.len() != 2 * n {
        return Err(MorphometryError::Parameter(format!("warp file holds {} values, header implies {}", data.len(), 2 * n)));
    }
    let sh = (hd.height, hd.width);
    Ok(WarpField {
        uy: Array2::from_shape_vec(sh, data[..n].to_vec()).unwrap(),
        ux: Array2::from_shape_vec(sh, data[n..].to_vec()).unwrap(),
        fixed_id: hd.fixed_id,
        moving_id: hd.moving_id,
    })
}

/// `stem.bin` holds `det` then `log_det`; folded pixels are recovered from `det ≤ 0`.
pub fn save_jacobian(stem: &Path, jac: &JacobianMap) -> Result<(), MorphometryError> {
    let (h, w) = jac.det.dim();
    let data: Vec<f64> = jac.det.iter().chain(jac.log_det.iter()).copied().collect();
    io::write_f64s(&stem.with_extension("bin"), &data)?;
    let header =
        FieldHeader { height: h, width: w, components: vec!["det".into(), "log_det".into()], dtype: "f64le".into(), fixed_id: String::new(), moving_id: String::new() };
    io::write_json(&stem.with_extension("json"), &header)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiReportRow {
    pub pair_id: String,
    pub roi: String,
    pub mean_log_jac: f64,
    pub pct_change: f64,
}

pub fn write_roi_report(path: &Path, rows: &[RoiReportRow]) -> Result<(), MorphometryError> {
    io::write_json(path, rows)?;
    Ok(())
}
