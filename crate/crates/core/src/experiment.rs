//! The closed-loop phantom study: generate AD/CN pairs from held-out
//! constraints with a trained generator and measure what changed, against the
//! phantom's known effects.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, project_manifold, volume_trend, volume_trend_masks, AnalysisError, TissueMasks};
use crate::critic::Critic;
use crate::dsp::{make_constraint, Constraint, ImageGrid};
use crate::manifold::{sample_styles, ClassLabel, NoiseVector};
use crate::morphometry::{jacobian_map, register, roi_change, DemonsConfig, MorphometryError, RoiStats};
use crate::nn::ParamSet;
use crate::phantom::{
    build_dataset, labeled_pool, load_eval_samples, load_training_samples, ClassEffects, DatasetConfig, EvalSample, PhantomError, PhantomMasks, Split, Tissue,
    TissueModel,
};
use crate::synthesis::{generate_pair, Generator, SynthesisError, SynthesisNoise};
use crate::train::{fine_tune_classifier, fit, FineTuneConfig, FitOptions, TrainConfig, TrainError, TrainState, ValSnapshot};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Morphometry(#[from] MorphometryError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub pair_id: String,
    /// Index into the evaluation samples the constraint came from.
    pub source: usize,
    pub ad: Array2<f64>,
    pub cn: Array2<f64>,
}

/// `n` pairs cycling through the samples' constraints; pair `k` uses mapping
/// and synthesis noise seeded from `(seed, k)`, shared by its AD and CN image.
pub fn generate_pairs(gen: &Generator, params: &ParamSet, samples: &[EvalSample], n: usize, seed: u64) -> Result<Vec<GeneratedPair>, ExperimentError> {
    let sources: Vec<(&str, &Constraint)> = samples.iter().map(|s| (s.id.as_str(), &s.constraint)).collect();
    generate_pairs_from(gen, params, &sources, n, seed)
}

/// As [`generate_pairs`] for bare `(id, constraint)` sources.
pub fn generate_pairs_from(gen: &Generator, params: &ParamSet, sources: &[(&str, &Constraint)], n: usize, seed: u64) -> Result<Vec<GeneratedPair>, ExperimentError> {
    if sources.is_empty() {
        return Err(ExperimentError::Parameter("no constraints to generate from".into()));
    }
    (0..n)
        .map(|k| {
            let source = k % sources.len();
            let (id, c) = sources[source];
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1_0000_0001).wrapping_add(k as u64));
            let z = NoiseVector::sample(&mut rng, gen.cfg.style_dim);
            let noise = SynthesisNoise::sample(&mut rng, &gen.cfg, 1);
            let (ad, cn) = generate_pair(c, &z, &noise, gen, params, (id.to_string(), seed, k as u64))?;
            Ok(GeneratedPair { pair_id: format!("pair-{k:03}"), source, ad: ad.data, cn: cn.data })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMeasurement {
    pub pair_id: String,
    pub constraint_id: String,
    pub ventricle: RoiStats,
    pub hippocampus: RoiStats,
    pub registration_residual: f64,
    pub registration_converged: bool,
    /// Mean of the AD and CN constraint errors.
    pub adherence: f64,
    /// Mean squared AD−CN difference outside the disease regions.
    pub discrepancy: f64,
    /// The same at each of [`PROFILE_MARGINS`].
    pub discrepancy_by_margin: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSummary {
    pub mean_log_jac: f64,
    pub pct_change: f64,
    /// Share of pairs whose ROI mean has the expected sign.
    pub sign_agreement: f64,
    pub expected_log_jac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSigns {
    pub gm: f64,
    pub wm: f64,
    pub csf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStudy {
    pub pairs: Vec<PairMeasurement>,
    pub ventricle: RoiSummary,
    pub hippocampus: RoiSummary,
    pub mean_adherence: f64,
    pub mean_discrepancy: f64,
    /// `(margin, mean discrepancy)` at each of [`PROFILE_MARGINS`].
    pub discrepancy_profile: Vec<(usize, f64)>,
    pub volume: analysis::VolumeReport,
    /// Percent changes of the phantom ground truth over the same anatomies.
    pub ground_truth_trend: TrendSigns,
    pub generated_trend: TrendSigns,
}

fn dilate(m: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    let r = r as i64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).any(|di| {
            (-r..=r).any(|dj| {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]]
            })
        })
    })
}

/// Union of ventricles, hippocampi and cortex over both renders, grown by `margin` pixels.
pub fn disease_region(a: &PhantomMasks, b: &PhantomMasks, margin: usize) -> Array2<bool> {
    let u = Array2::from_shape_fn(a.brain.dim(), |ix| {
        [a, b].iter().any(|m| m.ventricle[ix] || m.hippocampus[ix] || (m.gm[ix] && !m.hippocampus[ix]) || (m.csf[ix] && !m.ventricle[ix]))
    });
    dilate(&u, margin)
}

pub const DISEASE_MARGIN: usize = 2;

/// Margins at which the pair discrepancy is also reported, to show how far
/// label-driven changes spread beyond the disease region.
pub const PROFILE_MARGINS: [usize; 5] = [0, 2, 4, 6, 8];

fn masked_mse(a: &Array2<f64>, b: &Array2<f64>, keep: &Array2<bool>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ((x, y), &k) in a.iter().zip(b.iter()).zip(keep.iter()) {
        if k {
            s += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn adherence(img: &Array2<f64>, c: &Constraint) -> f64 {
    let factor = img.nrows() / c.side();
    let g = make_constraint(&ImageGrid::new(img.clone()).expect("square image"), factor).expect("divisible side");
    (g.data() - c.data()).mapv(|v| v * v).mean().unwrap()
}

/// Both renders' masks for every anatomy in `samples`, keyed by anatomy.
fn masks_by_anatomy(samples: &[EvalSample]) -> Result<BTreeMap<String, BTreeMap<ClassLabel, PhantomMasks>>, ExperimentError> {
    let mut out: BTreeMap<String, BTreeMap<ClassLabel, PhantomMasks>> = BTreeMap::new();
    for s in samples {
        let m = s.masks.clone().ok_or_else(|| ExperimentError::Parameter(format!("sample {} has no ground-truth masks", s.id)))?;
        out.entry(s.anatomy.clone()).or_default().insert(s.label, m);
    }
    Ok(out)
}

fn tissue_masks(m: &PhantomMasks) -> TissueMasks {
    TissueMasks { gm: m.gm.clone(), wm: m.wm.clone(), csf: m.csf.clone() }
}

fn summarize(stats: &[&RoiStats], expected: f64) -> RoiSummary {
    let n = stats.len().max(1) as f64;
    let mean = stats.iter().map(|s| s.mean_log_jac).sum::<f64>() / n;
    let agree = stats.iter().filter(|s| s.mean_log_jac.signum() == expected.signum() && s.mean_log_jac != 0.0).count() as f64 / n;
    RoiSummary { mean_log_jac: mean, pct_change: 100.0 * (mean.exp() - 1.0), sign_agreement: agree, expected_log_jac: expected }
}

/// Register each generated pair (CN fixed, AD moving), read the ROI changes in
/// the source anatomy's CN masks, and compare tissue trends with the ground truth.
pub fn study_pairs(
    pairs: &[GeneratedPair],
    samples: &[EvalSample],
    effects: &ClassEffects,
    model: &TissueModel,
    demons: &DemonsConfig,
) -> Result<PairStudy, ExperimentError> {
    if pairs.is_empty() {
        return Err(ExperimentError::Parameter("no pairs to study".into()));
    }
    let masks = masks_by_anatomy(samples)?;
    let mut measured = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = &samples[p.source];
        let both = &masks[&s.anatomy];
        let (cn_m, ad_m) = match (both.get(&ClassLabel::CN), both.get(&ClassLabel::AD)) {
            (Some(c), Some(a)) => (c, a),
            _ => return Err(ExperimentError::Parameter(format!("anatomy {} lacks one of its renders", s.anatomy))),
        };
        let reg = register(&p.cn, &p.ad, demons)?;
        let jac = jacobian_map(&reg.warp);
        let discrepancy_by_margin = PROFILE_MARGINS.iter().map(|&m| masked_mse(&p.ad, &p.cn, &disease_region(cn_m, ad_m, m).mapv(|d| !d))).collect();
        let keep = disease_region(cn_m, ad_m, DISEASE_MARGIN).mapv(|d| !d);
        measured.push(PairMeasurement {
            pair_id: p.pair_id.clone(),
            constraint_id: s.id.clone(),
            ventricle: roi_change(&jac, &cn_m.ventricle, "ventricle")?,
            hippocampus: roi_change(&jac, &cn_m.hippocampus, "hippocampus")?,
            registration_residual: reg.residual,
            registration_converged: reg.converged,
            adherence: 0.5 * (adherence(&p.ad, &s.constraint) + adherence(&p.cn, &s.constraint)),
            discrepancy: masked_mse(&p.ad, &p.cn, &keep),
            discrepancy_by_margin,
        });
    }
    let n = measured.len() as f64;
    let ventricle = summarize(&measured.iter().map(|m| &m.ventricle).collect::<Vec<_>>(), (1.0 + effects.ventricle_expand).ln());
    let hippocampus = summarize(&measured.iter().map(|m| &m.hippocampus).collect::<Vec<_>>(), (1.0 - effects.hippocampus_shrink).ln());
    let images: Vec<_> = pairs.iter().map(|p| (p.ad.clone(), p.cn.clone())).collect();
    let volume = volume_trend(&images, model, 0)?;
    let gt_pairs: Vec<_> = masks.values().filter_map(|b| Some((tissue_masks(b.get(&ClassLabel::AD)?), tissue_masks(b.get(&ClassLabel::CN)?)))).collect();
    let gt = volume_trend_masks(&gt_pairs, 0)?;
    let signs = |r: &analysis::VolumeReport| TrendSigns {
        gm: r.trend(Tissue::Gm).mean_pct_change,
        wm: r.trend(Tissue::Wm).mean_pct_change,
        csf: r.trend(Tissue::Csf).mean_pct_change,
    };
    Ok(PairStudy {
        mean_adherence: measured.iter().map(|m| m.adherence).sum::<f64>() / n,
        mean_discrepancy: measured.iter().map(|m| m.discrepancy).sum::<f64>() / n,
        discrepancy_profile: PROFILE_MARGINS
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, measured.iter().map(|p| p.discrepancy_by_margin[i]).sum::<f64>() / n))
            .collect(),
        ventricle,
        hippocampus,
        ground_truth_trend: signs(&gt),
        generated_trend: signs(&volume),
        volume,
        pairs: measured,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldStudy {
    pub n_per_class: usize,
    pub silhouette: f64,
    pub explained_variance: [f64; 2],
    /// Accuracy on fresh codes of a linear rule fitted on the raw codes of the first draw.
    pub linear_accuracy: f64,
}

/// Style codes from noise seeds disjoint from training; separation in the PCA
/// plane and linear separability of the raw codes on a second, unseen draw.
pub fn study_manifold(gen: &Generator, params: &ParamSet, n: usize, seed: u64) -> Result<ManifoldStudy, ExperimentError> {
    let draw = |s: u64| {
        let mut codes = Vec::new();
        let mut labels = Vec::new();
        for (k, l) in ClassLabel::ALL.into_iter().enumerate() {
            for c in sample_styles(l, n, s ^ (0xc1a55 + k as u64), &gen.mapping, params) {
                codes.push(c.0);
                labels.push(l);
            }
        }
        (codes, labels)
    };
    let (codes, labels) = draw(seed);
    let proj = project_manifold(&codes, &labels)?;
    let (fresh, fresh_labels) = draw(seed.wrapping_add(1));
    let linear_accuracy = analysis::linear_holdout_accuracy(&codes, &labels, &fresh, &fresh_labels)?;
    Ok(ManifoldStudy { n_per_class: n, silhouette: proj.silhouette, explained_variance: proj.explained_variance, linear_accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStudy {
    pub zero_shot: analysis::ClassificationReport,
    pub fine_tuned: crate::train::ClassifierMetrics,
}

pub fn study_classifier(
    critic: &Critic,
    params: &ParamSet,
    test: &[EvalSample],
    pool: &[crate::phantom::TrainingSample],
    ft: &FineTuneConfig,
) -> Result<ClassifierStudy, ExperimentError> {
    let imgs: Vec<_> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = test.iter().map(|s| s.label).collect();
    let zero_shot = analysis::classification_report(critic, params, &imgs, &labels)?;
    let test_samples: Vec<_> =
        test.iter().map(|s| crate::phantom::TrainingSample { id: s.id.clone(), image: s.image.clone(), label: s.label, constraint: s.constraint.clone() }).collect();
    let (_, fine_tuned) = fine_tune_classifier(critic, params, pool, &test_samples, ft)?;
    Ok(ClassifierStudy { zero_shot, fine_tuned })
}

/// Everything the closed-loop study needs beyond the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosedLoopConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub n_pairs: usize,
    pub pair_seed: u64,
    pub demons: DemonsConfig,
    pub styles_per_class: usize,
    /// Mapping-noise seed for the manifold study; disjoint from anything drawn in training.
    pub style_seed: u64,
    pub pool_anatomies: usize,
    pub pool_seed: u64,
    pub fine_tune: FineTuneConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            n_pairs: 50,
            pair_seed: 7,
            demons: DemonsConfig::default(),
            styles_per_class: 1000,
            style_seed: 0x5171_e5,
            pool_anatomies: 500,
            pool_seed: 0xf1_7e,
            fine_tune: FineTuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub config_hash: String,
    pub final_val: Option<ValSnapshot>,
    pub pairs: PairStudy,
    pub manifold: ManifoldStudy,
    pub classifier: ClassifierStudy,
}

/// Build the phantom dataset under `work/data`, train into `work/run`, then
/// run the pair, manifold and classifier studies on the held-out split.
pub fn run_closed_loop(cfg: &ClosedLoopConfig, work: &Path) -> Result<ClosedLoopReport, ExperimentError> {
    let data = work.join("data");
    build_dataset(&cfg.dataset, &data)?;
    let train = load_training_samples(&data, Split::Train)?;
    let val = load_training_samples(&data, Split::Val)?;
    let test = load_eval_samples(&data, Split::Test)?;
    let mut state = TrainState::new(&cfg.train)?;
    let fit_report = fit(&mut state, &train, &val, &FitOptions { out_dir: Some(work.join("run")), stop_at: None })?;
    let pairs = generate_pairs(&state.generator, &state.g_ema, &test, cfg.n_pairs, cfg.pair_seed)?;
    let study = study_pairs(&pairs, &test, &cfg.dataset.effects, &TissueModel::default(), &cfg.demons)?;
    let manifold = study_manifold(&state.generator, &state.g_ema, cfg.styles_per_class, cfg.style_seed)?;
    let d = &cfg.dataset;
    let pool = labeled_pool(cfg.pool_anatomies, d.resolution, d.constraint_factor, cfg.pool_seed, d.effects)?;
    let classifier = study_classifier(&state.critic, &state.d_params, &test, &pool, &cfg.fine_tune)?;
    Ok(ClosedLoopReport { config_hash: cfg.train.hash(), final_val: fit_report.val.last().cloned(), pairs: study, manifold, classifier })
}
