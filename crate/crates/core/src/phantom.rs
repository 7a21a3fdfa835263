//! Procedural axial-slice phantoms with known AD/CN effects, the on-disk
//! dataset built from them, and ingestion of externally preprocessed slices.
//!
//! An anatomy is a head ellipse holding a CSF rim, a cortical grey-matter band,
//! white matter, two lateral ventricles (CSF) and two hippocampi (GM). The AD
//! render of an anatomy enlarges the ventricles, shrinks the hippocampi and
//! thins the cortex from the outside; everything else, including the smooth
//! deformation shared by both renders, is identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{make_constraint, Constraint, DspError, ImageGrid};
use crate::io::{self, IoError};
use crate::manifold::ClassLabel;

pub const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Mean intensities of the tissue classes in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub background: f64,
    pub csf: f64,
    pub gm: f64,
    pub wm: f64,
    pub noise_std: f64,
}

impl Default for TissueModel {
    fn default() -> Self {
        Self { background: -1.0, csf: -0.55, gm: 0.15, wm: 0.65, noise_std: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tissue {
    Csf,
    Gm,
    Wm,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        }
    }
}

impl TissueModel {
    pub fn mean(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Csf => self.csf,
            Tissue::Gm => self.gm,
            Tissue::Wm => self.wm,
        }
    }

    /// Pixels at or above the midpoint between background and CSF count as brain.
    pub fn brain_threshold(&self) -> f64 {
        0.5 * (self.background + self.csf)
    }

    /// Nearest tissue mode for a brain pixel, `None` for background.
    pub fn classify(&self, v: f64) -> Option<Tissue> {
        if v < self.brain_threshold() {
            return None;
        }
        let mut best = Tissue::Csf;
        for t in Tissue::ALL {
            if (v - self.mean(t)).abs() < (v - self.mean(best)).abs() {
                best = t;
            }
        }
        Some(best)
    }
}

/// Relative AD effect sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEffects {
    pub ventricle_expand: f64,
    pub hippocampus_shrink: f64,
    pub cortex_thin: f64,
}

impl Default for ClassEffects {
    fn default() -> Self {
        Self { ventricle_expand: 0.29, hippocampus_shrink: 0.153, cortex_thin: 0.15 }
    }
}

impl ClassEffects {
    pub const MAX: f64 = 0.6;

    pub fn validate(&self) -> Result<(), PhantomError> {
        for (name, v) in [("ventricle_expand", self.ventricle_expand), ("hippocampus_shrink", self.hippocampus_shrink), ("cortex_thin", self.cortex_thin)] {
            if !(0.0..=Self::MAX).contains(&v) {
                return Err(PhantomError::Parameter(format!("{name} = {v} outside [0, {}]", Self::MAX)));
            }
        }
        Ok(())
    }
}

/// Ground-truth anatomy. Lengths in pixels at `resolution`, offsets relative
/// to the head centre, `y` down and `x` right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub resolution: usize,
    pub center: (f64, f64),
    /// Head semi-axes `(y, x)`.
    pub skull_axes: (f64, f64),
    pub csf_rim: f64,
    pub cortical_thickness: f64,
    /// Combined area of both ventricles.
    pub ventricle_area: f64,
    /// Long over short semi-axis; ventricles are elongated along `y`.
    pub ventricle_aspect: f64,
    pub ventricle_center_y: f64,
    pub ventricle_gap: f64,
    /// Combined area of both hippocampi.
    pub hippocampus_area: f64,
    /// Long over short semi-axis; hippocampi are elongated along `x`.
    pub hippocampus_aspect: f64,
    pub hippocampus_center: (f64, f64),
    pub tissue: TissueModel,
    pub deformation_seed: u64,
    pub deformation_amplitude: f64,
    pub effects: ClassEffects,
}

const RESOLUTIONS: [usize; 3] = [64, 128, 256];

/// Randomized anatomy within fixed, resolution-relative bounds.
pub fn sample_anatomy(seed: u64, resolution: usize) -> Result<PhantomSpec, PhantomError> {
    sample_anatomy_with(seed, resolution, ClassEffects::default())
}

pub fn sample_anatomy_with(seed: u64, resolution: usize, effects: ClassEffects) -> Result<PhantomSpec, PhantomError> {
    if !RESOLUTIONS.contains(&resolution) {
        return Err(PhantomError::Parameter(format!("resolution {resolution} not in {RESOLUTIONS:?}")));
    }
    effects.validate()?;
    let r = resolution as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let head = u(0.92, 1.04);
    let spec = PhantomSpec {
        seed,
        resolution,
        center: (0.5 * r + u(-1.0, 1.0), 0.5 * r + u(-1.0, 1.0)),
        skull_axes: (0.40 * r * head * u(0.98, 1.02), 0.44 * r * head * u(0.98, 1.02)),
        csf_rim: 0.025 * r,
        cortical_thickness: 0.06 * r * u(0.9, 1.1),
        ventricle_area: 0.05 * r * r * u(0.92, 1.08),
        ventricle_aspect: u(1.6, 2.2),
        ventricle_center_y: -0.09 * r + u(-0.5, 0.5),
        ventricle_gap: u(1.0, 2.5),
        hippocampus_area: 0.03 * r * r * u(0.94, 1.06),
        hippocampus_aspect: u(1.6, 2.0),
        hippocampus_center: (0.14 * r + u(-0.5, 0.5), 0.15 * r + u(-0.5, 0.5)),
        tissue: TissueModel::default(),
        deformation_seed: rng.gen(),
        deformation_amplitude: 0.016 * r,
        effects,
    };
    spec.validate()?;
    Ok(spec)
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        self.effects.validate()?;
        let positive = [
            ("skull_axes.y", self.skull_axes.0),
            ("skull_axes.x", self.skull_axes.1),
            ("csf_rim", self.csf_rim),
            ("cortical_thickness", self.cortical_thickness),
            ("ventricle_area", self.ventricle_area),
            ("hippocampus_area", self.hippocampus_area),
            ("ventricle_aspect", self.ventricle_aspect),
            ("hippocampus_aspect", self.hippocampus_aspect),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PhantomError::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Short and long semi-axes of one ventricle for a label.
    fn ventricle_axes(&self, label: ClassLabel) -> (f64, f64) {
        let short = (0.5 * self.ventricle_area / (std::f64::consts::PI * self.ventricle_aspect)).sqrt();
        let s = self.scale(label, 1.0 + self.effects.ventricle_expand);
        (short * s, short * self.ventricle_aspect * s)
    }

    fn hippocampus_axes(&self, label: ClassLabel) -> (f64, f64) {
        let short = (0.5 * self.hippocampus_area / (std::f64::consts::PI * self.hippocampus_aspect)).sqrt();
        let s = self.scale(label, 1.0 - self.effects.hippocampus_shrink);
        (short * s, short * self.hippocampus_aspect * s)
    }

    fn scale(&self, label: ClassLabel, area_factor: f64) -> f64 {
        match label {
            ClassLabel::AD => area_factor.sqrt(),
            ClassLabel::CN => 1.0,
        }
    }

    /// Horizontal offset of each ventricle centre; fixed per anatomy so the
    /// largest admissible expansion still leaves the two apart.
    fn ventricle_offset_x(&self) -> f64 {
        let short = (0.5 * self.ventricle_area / (std::f64::consts::PI * self.ventricle_aspect)).sqrt();
        short * (1.0 + ClassEffects::MAX).sqrt() + 0.5 * self.ventricle_gap
    }

    fn deformation(&self) -> Deformation {
        let mut rng = ChaCha8Rng::seed_from_u64(self.deformation_seed);
        let r = self.resolution as f64;
        let mut comps = Vec::new();
        for axis in 0..2 {
            for _ in 0..3 {
                let fy = rng.gen_range(-1.5..1.5) / r;
                let fx = rng.gen_range(-1.5..1.5) / r;
                let amp = self.deformation_amplitude * rng.gen_range(0.2..0.5);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                comps.push((axis, fy, fx, amp, phase));
            }
        }
        Deformation { comps }
    }
}

struct Deformation {
    comps: Vec<(usize, f64, f64, f64, f64)>,
}

impl Deformation {
    fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        let (mut dy, mut dx) = (0.0, 0.0);
        for &(axis, fy, fx, amp, phase) in &self.comps {
            let v = amp * (std::f64::consts::TAU * (fy * y + fx * x) + phase).sin();
            if axis == 0 {
                dy += v;
            } else {
                dx += v;
            }
        }
        (y + dy, x + dx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    Ventricle,
    Hippocampus,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::Ventricle => "ventricle",
            Structure::Hippocampus => "hippocampus",
        }
    }
}

/// What a continuous point of the phantom is made of.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Point {
    Outside,
    Tissue(Tissue, Option<Structure>),
}

fn inside(dy: f64, dx: f64, ay: f64, ax: f64) -> bool {
    ay > 0.0 && ax > 0.0 && (dy / ay).powi(2) + (dx / ax).powi(2) <= 1.0
}

fn classify_point(spec: &PhantomSpec, label: ClassLabel, y: f64, x: f64) -> Point {
    let (ay, ax) = spec.skull_axes;
    if !inside(y, x, ay, ax) {
        return Point::Outside;
    }
    let thin = match label {
        ClassLabel::AD => spec.effects.cortex_thin * spec.cortical_thickness,
        ClassLabel::CN => 0.0,
    };
    let outer = spec.csf_rim + thin;
    if !inside(y, x, ay - outer, ax - outer) {
        return Point::Tissue(Tissue::Csf, None);
    }
    let inner = spec.csf_rim + spec.cortical_thickness;
    if !inside(y, x, ay - inner, ax - inner) {
        return Point::Tissue(Tissue::Gm, None);
    }
    let (vs, vl) = spec.ventricle_axes(label);
    let vx = spec.ventricle_offset_x();
    for side in [-1.0, 1.0] {
        if inside(y - spec.ventricle_center_y, x - side * vx, vl, vs) {
            return Point::Tissue(Tissue::Csf, Some(Structure::Ventricle));
        }
    }
    let (hs, hl) = spec.hippocampus_axes(label);
    let (hy, hx) = spec.hippocampus_center;
    for side in [-1.0, 1.0] {
        if inside(y - hy, x - side * hx, hs, hl) {
            return Point::Tissue(Tissue::Gm, Some(Structure::Hippocampus));
        }
    }
    Point::Tissue(Tissue::Wm, None)
}

/// Binary ground-truth masks of one render.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomMasks {
    pub brain: Array2<bool>,
    pub gm: Array2<bool>,
    pub wm: Array2<bool>,
    pub csf: Array2<bool>,
    pub ventricle: Array2<bool>,
    pub hippocampus: Array2<bool>,
}

/// Partial-volume fraction of each pixel covered by a structure.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureCoverage {
    pub ventricle: Array2<f64>,
    pub hippocampus: Array2<f64>,
}

impl StructureCoverage {
    pub fn get(&self, s: Structure) -> &Array2<f64> {
        match s {
            Structure::Ventricle => &self.ventricle,
            Structure::Hippocampus => &self.hippocampus,
        }
    }

    /// Structure area in pixels, counting partial pixels fractionally.
    pub fn area(&self, s: Structure) -> f64 {
        self.get(s).sum()
    }
}

impl PhantomMasks {
    pub fn tissue(&self, t: Tissue) -> &Array2<bool> {
        match t {
            Tissue::Csf => &self.csf,
            Tissue::Gm => &self.gm,
            Tissue::Wm => &self.wm,
        }
    }

    pub fn structure(&self, s: Structure) -> &Array2<bool> {
        match s {
            Structure::Ventricle => &self.ventricle,
            Structure::Hippocampus => &self.hippocampus,
        }
    }

    pub const NAMES: [&'static str; 6] = ["brain", "gm", "wm", "csf", "ventricle", "hippocampus"];

    pub fn named(&self) -> [(&'static str, &Array2<bool>); 6] {
        [("brain", &self.brain), ("gm", &self.gm), ("wm", &self.wm), ("csf", &self.csf), ("ventricle", &self.ventricle), ("hippocampus", &self.hippocampus)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub image: Array2<f64>,
    /// The same render before intensity noise.
    pub clean: Array2<f64>,
    pub masks: PhantomMasks,
    pub coverage: StructureCoverage,
}

/// Supersampled rasterization of one anatomy under a label.
pub fn render(spec: &PhantomSpec, label: ClassLabel, resolution: usize) -> Result<Render, PhantomError> {
    spec.validate()?;
    if resolution != spec.resolution {
        return Err(PhantomError::Parameter(format!("spec drawn for {} px, render asked for {resolution}", spec.resolution)));
    }
    let n = resolution;
    let t = spec.tissue;
    let def = spec.deformation();
    let ss = SUPERSAMPLE;
    let w = 1.0 / (ss * ss) as f64;
    let mut clean = Array2::zeros((n, n));
    let mut head_cov = Array2::<f64>::zeros((n, n));
    let mut vent_cov = Array2::<f64>::zeros((n, n));
    let mut hip_cov = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut v = 0.0;
            for a in 0..ss {
                for b in 0..ss {
                    let py = i as f64 + (a as f64 + 0.5) / ss as f64 - spec.center.0;
                    let px = j as f64 + (b as f64 + 0.5) / ss as f64 - spec.center.1;
                    let (y, x) = def.apply(py, px);
                    match classify_point(spec, label, y, x) {
                        Point::Outside => v += w * t.background,
                        Point::Tissue(tis, st) => {
                            v += w * t.mean(tis);
                            head_cov[[i, j]] += w;
                            match st {
                                Some(Structure::Ventricle) => vent_cov[[i, j]] += w,
                                Some(Structure::Hippocampus) => hip_cov[[i, j]] += w,
                                None => {}
                            }
                        }
                    }
                }
            }
            clean[[i, j]] = v;
        }
    }
    let noise_seed = spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(label.index() as u64 + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, t.noise_std).expect("finite noise std");
    let mut image = clean.clone();
    for (v, cov) in image.iter_mut().zip(head_cov.iter()) {
        let e: f64 = normal.sample(&mut rng);
        *v = (*v + cov * e).clamp(-1.0, 1.0);
    }
    let tissue_mask = |tt: Tissue| clean.mapv(|v| t.classify(v) == Some(tt));
    let masks = PhantomMasks {
        brain: clean.mapv(|v| t.classify(v).is_some()),
        gm: tissue_mask(Tissue::Gm),
        wm: tissue_mask(Tissue::Wm),
        csf: tissue_mask(Tissue::Csf),
        ventricle: vent_cov.mapv(|c| c >= 0.5),
        hippocampus: hip_cov.mapv(|c| c >= 0.5),
    };
    Ok(Render { image, clean, masks, coverage: StructureCoverage { ventricle: vent_cov, hippocampus: hip_cov } })
}

pub fn mask_area(m: &Array2<bool>) -> usize {
    m.iter().filter(|&&b| b).count()
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: String,
    pub constraint: String,
    pub masks: BTreeMap<String, String>,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub class: ClassLabel,
    /// Source anatomy or subject; evaluation only.
    pub anatomy: String,
    pub paths: SamplePaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_anatomies: usize,
    pub resolution: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub constraint_factor: usize,
    pub effects: ClassEffects,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_anatomies: 100, resolution: 64, ratios: [0.6, 0.2, 0.2], seed: 0, constraint_factor: 4, effects: ClassEffects::default() }
    }
}

pub fn validate_ratios(ratios: &[f64]) -> Result<[f64; 3], PhantomError> {
    if ratios.len() != 3 {
        return Err(PhantomError::Parameter(format!("split ratios need three values (train, val, test), got {}", ratios.len())));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PhantomError::Parameter(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    Ok([ratios[0], ratios[1], ratios[2]])
}

/// Group counts for a split; every group with a positive ratio gets at least one.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], PhantomError> {
    let train = (ratios[0] * n as f64).round() as usize;
    let val = (ratios[1] * n as f64).round() as usize;
    let counts = [train, val, n.saturating_sub(train + val)];
    if train + val > n || counts.iter().zip(ratios).any(|(&c, r)| r > 0.0 && c == 0) {
        return Err(PhantomError::Parameter(format!("{n} groups are too few for ratios {ratios:?}")));
    }
    Ok(counts)
}

fn opaque_id(seed: u64, anatomy: usize, label: ClassLabel) -> String {
    io::sha256_hex(format!("phantom:{seed}:{anatomy}:{label}").as_bytes())[..16].to_string()
}

/// Anatomy seeds for a dataset seed, in anatomy order.
fn anatomy_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Render `n_anatomies` anatomies under both labels into `out` and split them
/// at anatomy level.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<DatasetSplit, PhantomError> {
    let ratios = validate_ratios(&cfg.ratios)?;
    let counts = split_counts(cfg.n_anatomies, ratios)?;
    if cfg.resolution % cfg.constraint_factor != 0 {
        return Err(DspError::IndivisibleSide { side: cfg.resolution, factor: cfg.constraint_factor }.into());
    }
    for sub in ["images", "constraints", "masks"] {
        io::create_dir(&out.join(sub))?;
    }
    let seeds = anatomy_seeds(cfg.seed, cfg.n_anatomies);
    let mut order: Vec<usize> = (0..cfg.n_anatomies).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT));
    let mut split_of = vec![Split::Train; cfg.n_anatomies];
    for (rank, &a) in order.iter().enumerate() {
        split_of[a] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut split = DatasetSplit { train: vec![], val: vec![], test: vec![], ratios };
    let mut rows = Vec::new();
    for (a, &s) in seeds.iter().enumerate() {
        let spec = sample_anatomy_with(s, cfg.resolution, cfg.effects)?;
        for label in [ClassLabel::CN, ClassLabel::AD] {
            let id = opaque_id(cfg.seed, a, label);
            let r = render(&spec, label, cfg.resolution)?;
            let c = make_constraint(&ImageGrid::new(r.image.clone())?, cfg.constraint_factor)?;
            let paths = write_sample(out, &id, &r.image, &c, Some((&r.masks, &r.coverage)))?;
            let sp = split_of[a];
            match sp {
                Split::Train => split.train.push(id.clone()),
                Split::Val => split.val.push(id.clone()),
                Split::Test => split.test.push(id.clone()),
            }
            rows.push(ManifestRow { id, split: sp, class: label, anatomy: format!("anatomy-{a:04}"), paths, spec: Some(spec.clone()) });
        }
    }
    write_manifest(out, &rows)?;
    io::write_json(&out.join("split.json"), &split)?;
    io::write_json(&out.join("dataset.json"), cfg)?;
    Ok(split)
}

// Keeps the split shuffle off the anatomy-seed stream.
const SPLIT_SALT: u64 = 0x5eed_5117;

fn write_sample(out: &Path, id: &str, image: &Array2<f64>, c: &Constraint, masks: Option<(&PhantomMasks, &StructureCoverage)>) -> Result<SamplePaths, PhantomError> {
    let image_rel = format!("images/{id}.png");
    io::write_png16(&out.join(&image_rel), image, -1.0, 1.0)?;
    let c_rel = format!("constraints/{id}.bin");
    io::write_array2(&out.join(&c_rel), c.data())?;
    let mut mask_paths = BTreeMap::new();
    if let Some((m, cov)) = masks {
        for (name, mask) in m.named() {
            let rel = format!("masks/{id}_{name}.png");
            io::write_mask_png(&out.join(&rel), mask)?;
            mask_paths.insert(name.to_string(), rel);
        }
        for s in [Structure::Ventricle, Structure::Hippocampus] {
            let rel = format!("masks/{id}_{}_pv.png", s.name());
            io::write_png16(&out.join(&rel), cov.get(s), 0.0, 1.0)?;
            mask_paths.insert(format!("{}_pv", s.name()), rel);
        }
    }
    Ok(SamplePaths { image: image_rel, constraint: c_rel, masks: mask_paths })
}

fn write_manifest(out: &Path, rows: &[ManifestRow]) -> Result<(), PhantomError> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| PhantomError::Manifest(e.to_string()))?);
        s.push('\n');
    }
    let p = out.join("manifest.jsonl");
    fs::write(&p, s).map_err(|e| PhantomError::File { path: p.display().to_string(), msg: e.to_string() })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>, PhantomError> {
    let p = dir.join("manifest.jsonl");
    let s = fs::read_to_string(&p).map_err(|e| PhantomError::File { path: p.display().to_string(), msg: e.to_string() })?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PhantomError::Manifest(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_split(dir: &Path) -> Result<DatasetSplit, PhantomError> {
    Ok(io::read_json(&dir.join("split.json"))?)
}

/// What the training loop sees: an opaque id, the image, its class and its
/// constraint. Masks, anatomy and pairing are not reachable from here.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub image: Array2<f64>,
    pub label: ClassLabel,
    pub constraint: Constraint,
}

pub fn load_training_samples(dir: &Path, split: Split) -> Result<Vec<TrainingSample>, PhantomError> {
    let rows = read_manifest(dir)?;
    rows.iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let image = io::read_png16(&dir.join(&r.paths.image), -1.0, 1.0)?;
            let side = image.nrows();
            let c = read_constraint(&dir.join(&r.paths.constraint))?;
            if side % c.side() != 0 {
                return Err(PhantomError::File { path: r.paths.constraint.clone(), msg: format!("constraint side {} does not divide image side {side}", c.side()) });
            }
            Ok(TrainingSample { id: r.id.clone(), image, label: r.class, constraint: c })
        })
        .collect()
}

pub fn read_constraint(path: &Path) -> Result<Constraint, PhantomError> {
    let v = io::read_f64s(path)?;
    let side = (v.len() as f64).sqrt().round() as usize;
    if side * side != v.len() || side == 0 {
        return Err(PhantomError::File { path: path.display().to_string(), msg: format!("{} values do not form a square constraint", v.len()) });
    }
    Ok(Constraint::from_grid(ImageGrid::new(Array2::from_shape_vec((side, side), v).unwrap())?))
}

/// Evaluation view of a sample, including masks and the source anatomy.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub anatomy: String,
    pub label: ClassLabel,
    pub image: Array2<f64>,
    pub constraint: Constraint,
    pub masks: Option<PhantomMasks>,
    pub coverage: Option<StructureCoverage>,
}

pub fn load_eval_samples(dir: &Path, split: Split) -> Result<Vec<EvalSample>, PhantomError> {
    let rows = read_manifest(dir)?;
    rows.iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let image = io::read_png16(&dir.join(&r.paths.image), -1.0, 1.0)?;
            let constraint = read_constraint(&dir.join(&r.paths.constraint))?;
            let masks = if PhantomMasks::NAMES.iter().all(|n| r.paths.masks.contains_key(*n)) {
                let m = |n: &str| io::read_mask_png(&dir.join(&r.paths.masks[n]));
                Some(PhantomMasks { brain: m("brain")?, gm: m("gm")?, wm: m("wm")?, csf: m("csf")?, ventricle: m("ventricle")?, hippocampus: m("hippocampus")? })
            } else {
                None
            };
            let coverage = match (r.paths.masks.get("ventricle_pv"), r.paths.masks.get("hippocampus_pv")) {
                (Some(v), Some(h)) => Some(StructureCoverage { ventricle: io::read_png16(&dir.join(v), 0.0, 1.0)?, hippocampus: io::read_png16(&dir.join(h), 0.0, 1.0)? }),
                _ => None,
            };
            Ok(EvalSample { id: r.id.clone(), anatomy: r.anatomy.clone(), label: r.class, image, constraint, masks, coverage })
        })
        .collect()
}

/// Labelled slices rendered in memory from a seed stream disjoint from the one
/// `build_dataset` uses for the same seed.
pub fn labeled_pool(n_anatomies: usize, resolution: usize, constraint_factor: usize, seed: u64, effects: ClassEffects) -> Result<Vec<TrainingSample>, PhantomError> {
    let seeds = anatomy_seeds(seed ^ 0x9001_5eed_0000_0000, n_anatomies);
    let mut out = Vec::with_capacity(2 * n_anatomies);
    for (a, &s) in seeds.iter().enumerate() {
        let spec = sample_anatomy_with(s, resolution, effects)?;
        for label in [ClassLabel::CN, ClassLabel::AD] {
            let r = render(&spec, label, resolution)?;
            let c = make_constraint(&ImageGrid::new(r.image.clone())?, constraint_factor)?;
            out.push(TrainingSample { id: format!("pool-{}", opaque_id(seed, a, label)), image: r.image, label, constraint: c });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestEntry {
    pub file: String,
    #[serde(default)]
    pub class: Option<String>,
    #[serde(default)]
    pub subject: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub pad_to: usize,
    pub center_n: usize,
    pub constraint_factor: usize,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { pad_to: 256, center_n: 40, constraint_factor: 4, ratios: [0.6, 0.2, 0.2], seed: 0 }
    }
}

/// First index of the `n` central slices of a `depth`-slice volume.
pub fn center_start(depth: usize, n: usize) -> usize {
    depth.saturating_sub(n) / 2
}

/// Zero-pad a slice symmetrically to `pad_to × pad_to`; the extra pixel of
/// an odd margin goes to the bottom/right.
pub fn pad_slice(slice: &Array2<f64>, pad_to: usize) -> Option<Array2<f64>> {
    let (h, w) = slice.dim();
    if h > pad_to || w > pad_to {
        return None;
    }
    let (top, left) = ((pad_to - h) / 2, (pad_to - w) / 2);
    let mut out = Array2::zeros((pad_to, pad_to));
    out.slice_mut(ndarray::s![top..top + h, left..left + w]).assign(slice);
    Some(out)
}

/// Linear percentile value with `q ∈ [0, 1]` on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Map the 1st/99th percentiles of `volume_values` to −1/1, clamped. A volume
/// whose percentiles coincide maps to zeros (with a warning).
pub fn percentile_normalizer(volume_values: &[f64], name: &str) -> impl Fn(f64) -> f64 {
    let mut v: Vec<f64> = volume_values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = if v.is_empty() { (0.0, 0.0) } else { (percentile(&v, 0.01), percentile(&v, 0.99)) };
    let degenerate = !(hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())));
    if degenerate {
        warn!("{name}: constant intensities; slices normalized to zero");
    }
    move |x: f64| if degenerate { 0.0 } else { (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0) }
}

fn file_err(path: &Path, msg: impl Into<String>) -> PhantomError {
    PhantomError::File { path: path.display().to_string(), msg: msg.into() }
}

/// Load a volume as `[slices, H, W]`: NIfTI (slicing the last axis) or a directory of PNG slices in name order.
pub fn load_volume(path: &Path) -> Result<Vec<Array2<f64>>, PhantomError> {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_ascii_lowercase();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| file_err(path, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(file_err(path, "no PNG slices in directory"));
        }
        return files.iter().map(|f| Ok(io::read_png16(f, 0.0, 1.0)?)).collect();
    }
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
        let obj = ReaderOptions::new().read_file(path).map_err(|e| file_err(path, e.to_string()))?;
        let vol: ArrayD<f64> = obj.into_volume().into_ndarray::<f64>().map_err(|e| file_err(path, e.to_string()))?;
        let vol = match vol.ndim() {
            2 => vol.insert_axis(Axis(2)),
            3 => vol,
            4 if vol.shape()[3] == 1 => vol.index_axis_move(Axis(3), 0),
            d => return Err(file_err(path, format!("expected a 3D volume, got {d} dimensions"))),
        };
        let depth = vol.shape()[2];
        return Ok((0..depth)
            .map(|k| {
                let s = vol.index_axis(Axis(2), k);
                Array2::from_shape_fn((s.shape()[0], s.shape()[1]), |(i, j)| s[[i, j]])
            })
            .collect());
    }
    if name.ends_with(".png") {
        return Ok(vec![io::read_png16(path, 0.0, 1.0)?]);
    }
    Err(file_err(path, "unsupported format (use .nii, .nii.gz, .png or a directory of PNGs)"))
}

/// Read `manifest.json` in `input`, extract central slices, pad, normalize and
/// write a dataset (no masks) to `out`, split at subject level.
pub fn ingest_slices(input: &Path, out: &Path, cfg: &IngestConfig) -> Result<DatasetSplit, PhantomError> {
    let ratios = validate_ratios(&cfg.ratios)?;
    if cfg.pad_to % cfg.constraint_factor != 0 {
        return Err(DspError::IndivisibleSide { side: cfg.pad_to, factor: cfg.constraint_factor }.into());
    }
    let entries: Vec<IngestEntry> = io::read_json(&input.join("manifest.json")).map_err(|e| PhantomError::Manifest(e.to_string()))?;
    let mut labelled = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let class = e
            .class
            .as_deref()
            .ok_or_else(|| PhantomError::Manifest(format!("entry {i} ({}) has no class label", e.file)))?;
        let label = ClassLabel::parse(class).ok_or_else(|| PhantomError::Manifest(format!("entry {i} ({}): unknown class {class:?}", e.file)))?;
        let subject = e.subject.clone().unwrap_or_else(|| e.file.clone());
        labelled.push((e, label, subject));
    }
    let subjects: Vec<String> = labelled.iter().map(|(_, _, s)| s.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let counts = split_counts(subjects.len(), ratios)?;
    let mut order = subjects.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let split_of: BTreeMap<String, Split> = order
        .iter()
        .enumerate()
        .map(|(rank, s)| (s.clone(), if rank < counts[0] { Split::Train } else if rank < counts[0] + counts[1] { Split::Val } else { Split::Test }))
        .collect();
    for sub in ["images", "constraints"] {
        io::create_dir(&out.join(sub))?;
    }
    let mut split = DatasetSplit { train: vec![], val: vec![], test: vec![], ratios };
    let mut rows = Vec::new();
    for (e, label, subject) in labelled {
        let path = input.join(&e.file);
        let slices = load_volume(&path)?;
        if slices.len() < cfg.center_n {
            warn!("{}: {} slices, fewer than the {} requested", path.display(), slices.len(), cfg.center_n);
        }
        let start = center_start(slices.len(), cfg.center_n);
        let chosen = &slices[start..(start + cfg.center_n).min(slices.len())];
        let values: Vec<f64> = chosen.iter().flat_map(|s| s.iter().copied()).collect();
        let norm = percentile_normalizer(&values, &e.file);
        for (k, s) in chosen.iter().enumerate() {
            let padded = pad_slice(s, cfg.pad_to)
                .ok_or_else(|| file_err(&path, format!("slice {}x{} is larger than {} and cannot be padded square", s.nrows(), s.ncols(), cfg.pad_to)))?;
            let img = padded.mapv(&norm);
            let c = make_constraint(&ImageGrid::new(img.clone())?, cfg.constraint_factor)?;
            let id = io::sha256_hex(format!("ingest:{}:{}", e.file, start + k).as_bytes())[..16].to_string();
            let paths = write_sample(out, &id, &img, &c, None)?;
            let sp = split_of[&subject];
            match sp {
                Split::Train => split.train.push(id.clone()),
                Split::Val => split.val.push(id.clone()),
                Split::Test => split.test.push(id.clone()),
            }
            rows.push(ManifestRow { id, split: sp, class: label, anatomy: subject.clone(), paths, spec: None });
        }
    }
    write_manifest(out, &rows)?;
    io::write_json(&out.join("split.json"), &split)?;
    io::write_json(&out.join("ingest.json"), cfg)?;
    Ok(split)
}
