//! Tissue-volume trends over generated pairs, a PCA view of the style
//! manifold with silhouette separation, classifier reports and figures.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{argmax_class, image_tensor, Critic, CriticClass, CriticError};
use crate::io::{self, IoError};
use crate::manifold::ClassLabel;
use crate::nn::ParamSet;
use crate::phantom::{Tissue, TissueModel};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate covariance: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMasks {
    pub gm: Array2<bool>,
    pub wm: Array2<bool>,
    pub csf: Array2<bool>,
}

impl TissueMasks {
    pub fn get(&self, t: Tissue) -> &Array2<bool> {
        match t {
            Tissue::Csf => &self.csf,
            Tissue::Gm => &self.gm,
            Tissue::Wm => &self.wm,
        }
    }

    pub fn area(&self, t: Tissue) -> usize {
        self.get(t).iter().filter(|&&b| b).count()
    }
}

/// Nearest-mode assignment of every brain pixel to CSF, GM or WM.
pub fn segment_tissues(img: &Array2<f64>, model: &TissueModel) -> TissueMasks {
    let classes = img.mapv(|v| model.classify(v));
    let m = |t| classes.mapv(|c| c == Some(t));
    TissueMasks { gm: m(Tissue::Gm), wm: m(Tissue::Wm), csf: m(Tissue::Csf) }
}

pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAreas {
    pub ad: [usize; 3],
    pub cn: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueTrend {
    pub tissue: Tissue,
    /// Mean over pairs of `100 · (CN − AD) / CN`; positive means smaller in AD.
    pub mean_pct_change: f64,
    pub ci95: (f64, f64),
    /// Pairs with an empty CN tissue are left out.
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    /// Areas in pixels, ordered CSF, GM, WM.
    pub pairs: Vec<PairAreas>,
    pub trends: Vec<TissueTrend>,
}

impl VolumeReport {
    pub fn trend(&self, t: Tissue) -> &TissueTrend {
        self.trends.iter().find(|x| x.tissue == t).expect("every tissue is reported")
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

fn bootstrap_ci(values: &[f64], seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES).map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (BOOTSTRAP_RESAMPLES - 1) as f64).round() as usize).min(BOOTSTRAP_RESAMPLES - 1)];
    (q(0.025), q(0.975))
}

/// Trends from already segmented `(AD, CN)` mask pairs.
pub fn volume_trend_masks(pairs: &[(TissueMasks, TissueMasks)], seed: u64) -> Result<VolumeReport, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::Parameter("volume trend needs at least one pair".into()));
    }
    let areas: Vec<PairAreas> = pairs
        .iter()
        .map(|(ad, cn)| PairAreas { ad: Tissue::ALL.map(|t| ad.area(t)), cn: Tissue::ALL.map(|t| cn.area(t)) })
        .collect();
    let trends = Tissue::ALL
        .iter()
        .enumerate()
        .map(|(k, &tissue)| {
            let pct: Vec<f64> = areas.iter().filter(|a| a.cn[k] > 0).map(|a| 100.0 * (a.cn[k] as f64 - a.ad[k] as f64) / a.cn[k] as f64).collect();
            let mean = if pct.is_empty() { f64::NAN } else { pct.iter().sum::<f64>() / pct.len() as f64 };
            TissueTrend { tissue, mean_pct_change: mean, ci95: bootstrap_ci(&pct, seed ^ k as u64), n_pairs: pct.len() }
        })
        .collect();
    Ok(VolumeReport { pairs: areas, trends })
}

/// Segment each `(AD, CN)` image pair and summarise the tissue-area changes.
pub fn volume_trend(pairs: &[(Array2<f64>, Array2<f64>)], model: &TissueModel, seed: u64) -> Result<VolumeReport, AnalysisError> {
    let masks: Vec<_> = pairs.iter().map(|(a, c)| (segment_tissues(a, model), segment_tissues(c, model))).collect();
    volume_trend_masks(&masks, seed)
}

// ---------------------------------------------------------------------------
// Manifold projection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldProjection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<ClassLabel>,
    /// Share of total variance along each projected axis.
    pub explained_variance: [f64; 2],
    pub silhouette: f64,
}

/// Symmetric eigen-decomposition by cyclic Jacobi; eigenvalues descending with
/// matching column eigenvectors.
fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let scale: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum::<f64>().max(1e-300);
        if off <= 1e-24 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q * n + q] - a[p * n + p]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &i) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + c] = v[k * n + i];
        }
    }
    (vals, vecs)
}

/// Covariance `XᵀX / n` of mean-centred rows.
fn covariance(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    unsafe {
        matrixmultiply::dgemm(d, n, d, 1.0 / n as f64, x.as_ptr(), 1, d as isize, x.as_ptr(), d as isize, 1, 0.0, c.as_mut_ptr(), d as isize, 1);
    }
    c
}

/// Leading eigenvectors of a symmetric `d×d` matrix by orthogonal iteration
/// with Rayleigh–Ritz, `k` columns returned in a `d×k` row-major block.
fn top_eigen(c: &[f64], d: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    if d <= 64 {
        let (vals, vecs) = jacobi_eigen(c, d);
        let mut out = vec![0.0; d * k];
        for r in 0..d {
            for j in 0..k.min(d) {
                out[r * k + j] = vecs[r * d + j];
            }
        }
        return (vals[..k.min(d)].to_vec(), out);
    }
    let m = (k + 6).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9ca);
    let mut q: Vec<f64> = (0..d * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let orthonormalize = |q: &mut Vec<f64>| {
        for j in 0..m {
            for p in 0..j {
                let dot: f64 = (0..d).map(|r| q[r * m + j] * q[r * m + p]).sum();
                for r in 0..d {
                    q[r * m + j] -= dot * q[r * m + p];
                }
            }
            let norm = (0..d).map(|r| q[r * m + j].powi(2)).sum::<f64>().sqrt().max(1e-300);
            for r in 0..d {
                q[r * m + j] /= norm;
            }
        }
    };
    orthonormalize(&mut q);
    let mut prev = vec![f64::INFINITY; m];
    let mut z = vec![0.0; d * m];
    let mut ritz = (vec![], vec![]);
    for _ in 0..500 {
        unsafe {
            matrixmultiply::dgemm(d, d, m, 1.0, c.as_ptr(), d as isize, 1, q.as_ptr(), m as isize, 1, 0.0, z.as_mut_ptr(), m as isize, 1);
        }
        // Rayleigh–Ritz on span(q): H = qᵀ C q.
        let mut h = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                h[i * m + j] = (0..d).map(|r| q[r * m + i] * z[r * m + j]).sum();
            }
        }
        let (vals, vecs) = jacobi_eigen(&h, m);
        let mut rot = vec![0.0; d * m];
        for r in 0..d {
            for j in 0..m {
                rot[r * m + j] = (0..m).map(|i| z[r * m + i] * vecs[i * m + j]).sum();
            }
        }
        let done = (0..k).all(|j| (vals[j] - prev[j]).abs() <= 1e-12 * vals[0].abs().max(1e-300));
        prev.clone_from(&vals);
        let mut qn = vec![0.0; d * m];
        for r in 0..d {
            for j in 0..m {
                qn[r * m + j] = (0..m).map(|i| q[r * m + i] * vecs[i * m + j]).sum();
            }
        }
        ritz = (vals, qn);
        if done {
            break;
        }
        q = rot;
        orthonormalize(&mut q);
    }
    let (vals, vecs) = ritz;
    let mut out = vec![0.0; d * k];
    for r in 0..d {
        for j in 0..k {
            out[r * k + j] = vecs[r * m + j];
        }
    }
    (vals[..k].to_vec(), out)
}

/// Mean silhouette over points with two labels; a point alone in its class
/// scores 0, and zero intra- and inter-cluster distances score 0.
pub fn silhouette(coords: &[[f64; 2]], labels: &[ClassLabel]) -> f64 {
    let n = coords.len();
    let count = |l: ClassLabel| labels.iter().filter(|&&x| x == l).count();
    let (n_ad, n_cn) = (count(ClassLabel::AD), count(ClassLabel::CN));
    if n == 0 || n_ad == 0 || n_cn == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mut same, mut other) = (0.0, 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
            if labels[j] == labels[i] {
                same += d;
            } else {
                other += d;
            }
        }
        let n_same = if labels[i] == ClassLabel::AD { n_ad } else { n_cn } - 1;
        let n_other = if labels[i] == ClassLabel::AD { n_cn } else { n_ad };
        if n_same == 0 {
            continue;
        }
        let a = same / n_same as f64;
        let b = other / n_other as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Mean-centre the codes and project onto the two leading principal directions.
pub fn project_manifold(codes: &[Vec<f64>], labels: &[ClassLabel]) -> Result<ManifoldProjection, AnalysisError> {
    if codes.len() != labels.len() {
        return Err(AnalysisError::Parameter(format!("{} codes but {} labels", codes.len(), labels.len())));
    }
    for l in ClassLabel::ALL {
        if labels.iter().filter(|&&x| x == l).count() < 2 {
            return Err(AnalysisError::Parameter(format!("need at least two {l} codes")));
        }
    }
    let d = codes[0].len();
    if d < 2 || codes.iter().any(|c| c.len() != d) {
        return Err(AnalysisError::Degenerate(format!("codes must share a dimension of at least 2 (got {d})")));
    }
    let n = codes.len();
    let mut mean = vec![0.0; d];
    for c in codes {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / n as f64;
        }
    }
    let x: Vec<f64> = codes.iter().flat_map(|c| c.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let cov = covariance(&x, n, d);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 1e-300) {
        return Err(AnalysisError::Degenerate("all codes coincide; covariance has rank 0".into()));
    }
    let (vals, vecs) = top_eigen(&cov, d, 2);
    let mut coords = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mut p = [0.0; 2];
        for (k, pk) in p.iter_mut().enumerate() {
            // A second component below round-off carries no direction; pin it to zero.
            if vals[k] > 1e-12 * trace {
                *pk = row.iter().enumerate().map(|(i, v)| v * vecs[i * 2 + k]).sum();
            }
        }
        coords.push(p);
    }
    let explained = [vals[0].max(0.0) / trace, vals[1].max(0.0) / trace];
    let silhouette = silhouette(&coords, labels);
    Ok(ManifoldProjection { coords, labels: labels.to_vec(), explained_variance: explained, silhouette })
}

/// Least-squares linear classifier on raw codes, with an intercept, fitted by
/// regularized normal equations. Returns training accuracy on `(codes, labels)`.
pub fn linear_separability(codes: &[Vec<f64>], labels: &[ClassLabel]) -> Result<f64, AnalysisError> {
    let w = fit_linear(codes, labels)?;
    Ok(score_linear(&w, codes, labels))
}

/// Accuracy on `(test, test_labels)` of the rule fitted on `(train, train_labels)`.
pub fn linear_holdout_accuracy(train: &[Vec<f64>], train_labels: &[ClassLabel], test: &[Vec<f64>], test_labels: &[ClassLabel]) -> Result<f64, AnalysisError> {
    if test.is_empty() || test.len() != test_labels.len() {
        return Err(AnalysisError::Parameter("test codes and labels must be non-empty and equal in length".into()));
    }
    let w = fit_linear(train, train_labels)?;
    if test.iter().any(|c| c.len() + 1 != w.len()) {
        return Err(AnalysisError::Parameter("test code dimension differs from training".into()));
    }
    Ok(score_linear(&w, test, test_labels))
}

fn fit_linear(codes: &[Vec<f64>], labels: &[ClassLabel]) -> Result<Vec<f64>, AnalysisError> {
    if codes.is_empty() || codes.len() != labels.len() {
        return Err(AnalysisError::Parameter("codes and labels must be non-empty and equal in length".into()));
    }
    let d = codes[0].len() + 1;
    let n = codes.len();
    let x: Vec<f64> = codes.iter().flat_map(|c| c.iter().copied().chain(std::iter::once(1.0))).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l == ClassLabel::AD { 1.0 } else { -1.0 }).collect();
    let mut a = covariance(&x, n, d);
    let ridge = 1e-8 * (0..d).map(|i| a[i * d + i]).sum::<f64>() / d as f64;
    for i in 0..d {
        a[i * d + i] += ridge.max(1e-12);
    }
    let mut b = vec![0.0; d];
    for r in 0..n {
        for i in 0..d {
            b[i] += x[r * d + i] * y[r] / n as f64;
        }
    }
    solve_spd(&mut a, &mut b, d).ok_or_else(|| AnalysisError::Degenerate("normal equations are singular".into()))
}

fn score_linear(w: &[f64], codes: &[Vec<f64>], labels: &[ClassLabel]) -> f64 {
    let correct = codes
        .iter()
        .zip(labels)
        .filter(|(c, &l)| {
            let s: f64 = c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1];
            s * if l == ClassLabel::AD { 1.0 } else { -1.0 } > 0.0
        })
        .count();
    correct as f64 / codes.len() as f64
}

/// Cholesky solve of `A w = b` in place.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if s <= 0.0 {
            return None;
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut t = a[i * n + j];
            for k in 0..j {
                t -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = t / l;
        }
    }
    for i in 0..n {
        let mut t = b[i];
        for k in 0..i {
            t -= a[i * n + k] * b[k];
        }
        b[i] = t / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut t = b[i];
        for k in i + 1..n {
            t -= a[k * n + i] * b[k];
        }
        b[i] = t / a[i * n + i];
    }
    Some(b.to_vec())
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
    pub recall_ad: f64,
    pub recall_cn: f64,
    /// Rows are true AD, CN; columns predicted AD, CN.
    pub confusion: [[usize; 2]; 2],
}

pub fn report_from_predictions(truth: &[ClassLabel], predicted: &[ClassLabel]) -> Result<ClassificationReport, AnalysisError> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(AnalysisError::Parameter("classification report needs matching, non-empty label lists".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    let recall = |i: usize| {
        let row = confusion[i][0] + confusion[i][1];
        if row == 0 {
            f64::NAN
        } else {
            confusion[i][i] as f64 / row as f64
        }
    };
    Ok(ClassificationReport {
        n: truth.len(),
        accuracy: (confusion[0][0] + confusion[1][1]) as f64 / truth.len() as f64,
        recall_ad: recall(0),
        recall_cn: recall(1),
        confusion,
    })
}

/// AD/CN predictions of the critic's class head with FAKE masked out.
pub fn predict_classes(critic: &Critic, params: &ParamSet, images: &[&Array2<f64>]) -> Result<Vec<ClassLabel>, AnalysisError> {
    let p = params.bind(false);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let logits = didigan_tensor::no_grad(|| critic.class_logits(&p, &didigan_tensor::Var::constant(image_tensor(chunk))))?;
        for i in 0..chunk.len() {
            out.push(match argmax_class(&logits.value().data()[3 * i..3 * i + 2]) {
                CriticClass::AD => ClassLabel::AD,
                _ => ClassLabel::CN,
            });
        }
    }
    Ok(out)
}

pub fn classification_report(critic: &Critic, params: &ParamSet, images: &[&Array2<f64>], labels: &[ClassLabel]) -> Result<ClassificationReport, AnalysisError> {
    if images.is_empty() {
        return Err(AnalysisError::Parameter("empty evaluation split".into()));
    }
    let pred = predict_classes(critic, params, images)?;
    report_from_predictions(labels, &pred)
}

// ---------------------------------------------------------------------------
// Figures and reports

pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<(), AnalysisError> {
    io::write_json(path, value)?;
    Ok(())
}

const AD_COLOUR: [u8; 3] = [200, 40, 40];
const CN_COLOUR: [u8; 3] = [40, 80, 200];

/// Scatter plot of a projection, AD red and CN blue, on a white square canvas.
pub fn write_projection_png(path: &Path, proj: &ManifoldProjection, size: usize) -> Result<(), AnalysisError> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &proj.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let margin = 8.0;
    let span = (0..2).map(|k| (hi[k] - lo[k]).max(1e-12)).fold(0.0, f64::max);
    let mut canvas = vec![[255u8; 3]; size * size];
    for (c, l) in proj.coords.iter().zip(&proj.labels) {
        let px = margin + (c[0] - lo[0]) / span * (size as f64 - 2.0 * margin);
        let py = size as f64 - margin - (c[1] - lo[1]) / span * (size as f64 - 2.0 * margin);
        let colour = if *l == ClassLabel::AD { AD_COLOUR } else { CN_COLOUR };
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (y, x) = (py as i64 + dy, px as i64 + dx);
                if (0..size as i64).contains(&y) && (0..size as i64).contains(&x) {
                    canvas[y as usize * size + x as usize] = colour;
                }
            }
        }
    }
    io::write_rgb_png(path, size, size, |y, x| canvas[y * size + x])?;
    Ok(())
}

fn grey(v: f64) -> [u8; 3] {
    let g = (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

/// Blue (contraction) to white to red (expansion), saturating at `±limit`.
fn diverging(v: f64, limit: f64) -> [u8; 3] {
    if !v.is_finite() {
        return [0, 0, 0];
    }
    let t = (v / limit).clamp(-1.0, 1.0);
    let fade = |c: u8, t: f64| (255.0 - (255.0 - c as f64) * t).round() as u8;
    if t >= 0.0 {
        [fade(200, t), fade(30, t), fade(30, t)]
    } else {
        [fade(30, -t), fade(60, -t), fade(200, -t)]
    }
}

/// One row per pair: AD | CN | log-Jacobian heatmap.
pub fn write_pair_montage(path: &Path, rows: &[(&Array2<f64>, &Array2<f64>, &Array2<f64>)]) -> Result<(), AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Parameter("montage needs at least one pair".into()));
    }
    let (h, w) = rows[0].0.dim();
    let limit = rows.iter().flat_map(|r| r.2.iter()).filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    let gap = 2;
    let total_w = 3 * w + 2 * gap;
    let total_h = rows.len() * h + (rows.len() - 1) * gap;
    io::write_rgb_png(path, total_h, total_w, |y, x| {
        let (r, yy) = (y / (h + gap), y % (h + gap));
        let (c, xx) = (x / (w + gap), x % (w + gap));
        if yy >= h || xx >= w || r >= rows.len() {
            return [255, 255, 255];
        }
        match c {
            0 => grey(rows[r].0[[yy, xx]]),
            1 => grey(rows[r].1[[yy, xx]]),
            _ => diverging(rows[r].2[[yy, xx]], limit),
        }
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0];
        let (vals, vecs) = jacobi_eigen(&a, 3);
        for j in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|k| a[i * 3 + k] * vecs[k * 3 + j]).sum();
                assert!((av - vals[j] * vecs[i * 3 + j]).abs() < 1e-10);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn orthogonal_iteration_matches_jacobi() {
        let d = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            }
        }
        let (v1, _) = top_eigen(&c, d, 2);
        let (v2, _) = jacobi_eigen(&c, d);
        assert!((v1[0] - v2[0]).abs() < 1e-8 * v2[0] && (v1[1] - v2[1]).abs() < 1e-8 * v2[0]);
    }
}
