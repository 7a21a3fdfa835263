//! Alternating critic/generator optimization with lazy regularization,
//! a generator weight average, checkpoints and a JSON-lines log.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use didigan_tensor::{no_grad, Tensor, Var};
use log::info;
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{argmax_class, image_tensor, Critic, CriticClass, CriticConfig, CriticError};
use crate::dsp::{make_constraint, ImageGrid};
use crate::io::{self, IoError};
use crate::manifold::ClassLabel;
use crate::nn::{randn, Adam, AdamConfig, ParamSet};
use crate::objectives::{
    adv_loss_d, adv_loss_g, class_loss, cycle_loss, diversity_loss, path_length_penalty, r1_penalty, LossBuilder, LossTerms, LossWeights,
    ObjectiveError, PathLengthState,
};
use crate::phantom::TrainingSample;
use crate::synthesis::{constraint_var, Generator, GeneratorConfig, SynthesisError, SynthesisNoise};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("non-finite {phase} loss term `{term}` at step {step}{}", dump.as_ref().map(|p| format!("; state dumped to {}", p.display())).unwrap_or_default())]
    NonFinite { phase: &'static str, term: &'static str, step: u64, dump: Option<PathBuf> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    /// Real images per critic step; also the number of generated images per step.
    pub batch_size: usize,
    /// Extra generated images per generator step that only feed the diversity term.
    pub diversity_pairs: usize,
    pub diversity_floor: f64,
    pub total_steps: u64,
    pub g_adam: AdamConfig,
    pub d_adam: AdamConfig,
    pub weights: LossWeights,
    pub r1_interval: u64,
    pub pl_interval: u64,
    pub pl_batch: usize,
    pub pl_decay: f64,
    /// Upper bound of the generator weight-average decay.
    pub ema_decay: f64,
    pub seed: u64,
    pub val_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            critic: CriticConfig::desk(),
            batch_size: 8,
            diversity_pairs: 2,
            diversity_floor: -1.0,
            total_steps: 1500,
            g_adam: AdamConfig::default(),
            d_adam: AdamConfig::default(),
            weights: LossWeights::default(),
            r1_interval: 16,
            pl_interval: 8,
            pl_batch: 2,
            pl_decay: 0.99,
            ema_decay: 0.999,
            seed: 0,
            val_interval: 250,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        for (name, a) in [("g_adam", &self.g_adam), ("d_adam", &self.d_adam)] {
            if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                return bad(format!("{name}: rate must be positive and betas in [0, 1)"));
            }
        }
        if self.r1_interval == 0 || self.pl_interval == 0 || self.val_interval == 0 || self.checkpoint_interval == 0 {
            return bad("intervals must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.pl_decay) {
            return bad("decays must lie in [0, 1)".into());
        }
        if self.generator.output_resolution != self.critic.resolution || self.generator.constraint_resolution != self.critic.constraint_resolution {
            return bad("generator and critic resolutions disagree".into());
        }
        self.generator.validate()?;
        self.critic.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Decay of the generator weight average at `step`, ramping up from 0.1.
pub fn ema_decay_at(step: u64, max: f64) -> f64 {
    max.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Everything needed to continue training bitwise.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub g_params: ParamSet,
    pub g_ema: ParamSet,
    pub critic: Critic,
    pub d_params: ParamSet,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub pl_state: PathLengthState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (generator, g_params) = Generator::init(&cfg.generator, rng.gen())?;
        let (critic, d_params) = Critic::init(&cfg.critic, rng.gen())?;
        Ok(Self {
            cfg: cfg.clone(),
            g_opt: Adam::new(cfg.g_adam, &g_params),
            d_opt: Adam::new(cfg.d_adam, &d_params),
            g_ema: g_params.clone(),
            generator,
            g_params,
            critic,
            d_params,
            pl_state: PathLengthState { mean: 0.0, decay: cfg.pl_decay },
            step: 0,
            rng,
        })
    }
}

/// Weighted terms of one critic and one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub d: LossTerms,
    pub g: LossTerms,
}

fn non_finite(phase: &'static str, step: u64) -> impl Fn(ObjectiveError) -> TrainError {
    move |e| match e {
        ObjectiveError::NonFinite { term } => TrainError::NonFinite { phase, term, step, dump: None },
        other => TrainError::Config(other.to_string()),
    }
}

fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(Tensor::is_finite)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClassLabel> {
    (0..n).map(|_| if rng.gen::<bool>() { ClassLabel::AD } else { ClassLabel::CN }).collect()
}

/// One critic update followed by one generator update on a batch of real samples.
pub fn train_step(state: &mut TrainState, batch: &[&TrainingSample]) -> Result<StepTerms, TrainError> {
    let b = batch.len();
    if b == 0 {
        return Err(TrainError::Parameter("empty batch".into()));
    }
    let cfg = state.cfg.clone();
    let w = cfg.weights;
    let dim = cfg.generator.style_dim;
    let step = state.step;
    let images: Vec<&Array2<f64>> = batch.iter().map(|s| &s.image).collect();
    let real = image_tensor(&images);
    let real_labels: Vec<ClassLabel> = batch.iter().map(|s| s.label).collect();
    let constraints: Vec<_> = batch.iter().map(|s| &s.constraint).collect();
    let c = constraint_var(&constraints);

    // Critic update.
    let fake_labels = random_labels(&mut state.rng, b);
    let z = randn(&mut state.rng, &[b, dim]);
    let noise = SynthesisNoise::sample(&mut state.rng, &cfg.generator, b);
    let fake = no_grad(|| state.generator.forward(&state.g_params.bind(false), &fake_labels, &Var::constant(z), &c, &noise))?;
    let d_terms = {
        let p = state.d_params.bind(true);
        let x = Var::constant(Tensor::concat(&[&real, fake.value()], 0));
        let out = state.critic.forward(&p, &x)?;
        let adv_real = out.adv.slice_axis(0, 0, b);
        let adv_fake = out.adv.slice_axis(0, b, b);
        let targets: Vec<CriticClass> = real_labels.iter().map(|&l| l.into()).chain(std::iter::repeat(CriticClass::FAKE).take(b)).collect();
        let c2 = Var::concat(&[c.clone(), c.clone()], 0);
        let mut lb = LossBuilder::new();
        lb.adv(&w, adv_loss_d(&adv_real, &adv_fake));
        lb.cycle(&w, cycle_loss(&c2, &out.c_hat).map_err(non_finite("critic", step))?);
        lb.classify(&w, class_loss(&out.logits, &targets).map_err(non_finite("critic", step))?);
        if step % cfg.r1_interval == 0 && w.r1 != 0.0 {
            let critic = &state.critic;
            let r1 = r1_penalty(|x| critic.adv_logits(&p, x).expect("validated input"), &real, cfg.r1_interval as f64);
            lb.r1(&w, r1);
        }
        let (total, terms) = lb.finish(w).map_err(non_finite("critic", step))?;
        let g = p.gradients(&total);
        if !grads_finite(&g) {
            return Err(TrainError::NonFinite { phase: "critic", term: "gradient", step, dump: None });
        }
        state.d_opt.step(&mut state.d_params, &g);
        terms
    };

    // Generator update.
    let g_terms = {
        let k = cfg.diversity_pairs.min(b);
        let labels = random_labels(&mut state.rng, b);
        let z = randn(&mut state.rng, &[b + k, dim]);
        let noise = SynthesisNoise::sample(&mut state.rng, &cfg.generator, b + k);
        let mut all_labels = labels.clone();
        all_labels.extend_from_slice(&labels[..k]);
        let mut all_c: Vec<_> = constraints.clone();
        all_c.extend_from_slice(&constraints[..k]);
        let p = state.g_params.bind(true);
        let dp = state.d_params.bind(false);
        let imgs = state.generator.forward(&p, &all_labels, &Var::constant(z), &constraint_var(&all_c), &noise)?;
        let main = imgs.slice_axis(0, 0, b);
        let out = state.critic.forward(&dp, &main)?;
        let targets: Vec<CriticClass> = labels.iter().map(|&l| l.into()).collect();
        let mut lb = LossBuilder::new();
        lb.adv(&w, adv_loss_g(&out.adv));
        lb.cycle(&w, cycle_loss(&c, &out.c_hat).map_err(non_finite("generator", step))?);
        lb.classify(&w, class_loss(&out.logits, &targets).map_err(non_finite("generator", step))?);
        if k > 0 {
            let a = imgs.slice_axis(0, 0, k);
            let bb = imgs.slice_axis(0, b, k);
            lb.diversity(&w, diversity_loss(&a, &bb, cfg.diversity_floor).map_err(non_finite("generator", step))?);
        }
        if step % cfg.pl_interval == 0 && w.path_length != 0.0 {
            let n = cfg.pl_batch.min(b).max(1);
            let pl_labels = &labels[..n];
            let pz = Var::constant(randn(&mut state.rng, &[n, dim]));
            let ws = no_grad(|| state.generator.map(&state.g_params.bind(false), pl_labels, &pz)).value().clone();
            let pnoise = SynthesisNoise::sample(&mut state.rng, &cfg.generator, n);
            let r = cfg.generator.output_resolution;
            let y = randn(&mut state.rng, &[n, 1, r, r]).map(|v| v / r as f64);
            let pc = constraint_var(&constraints[..n]);
            let gen = &state.generator;
            let (pen, next) = path_length_penalty(|wv| gen.synthesize(&p, wv, &pc, &pnoise).expect("validated shapes"), &ws, &y, state.pl_state);
            lb.path_length(&w, pen.scale(cfg.pl_interval as f64));
            state.pl_state = next;
        }
        let (total, terms) = lb.finish(w).map_err(non_finite("generator", step))?;
        let g = p.gradients(&total);
        if !grads_finite(&g) {
            return Err(TrainError::NonFinite { phase: "generator", term: "gradient", step, dump: None });
        }
        state.g_opt.step(&mut state.g_params, &g);
        state.g_ema.lerp_toward(&state.g_params, ema_decay_at(step, cfg.ema_decay));
        terms
    };
    state.step += 1;
    Ok(StepTerms { d: d_terms, g: g_terms })
}

/// Draw a batch of distinct training indices.
pub fn draw_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    sample_indices(rng, n, b.min(n)).into_vec()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSnapshot {
    pub step: u64,
    /// Critic reconstruction error of real validation constraints.
    pub cycle: f64,
    /// AD/CN accuracy of the critic's class head on real validation images.
    pub accuracy: f64,
    /// Mean squared AD−CN difference of averaged-generator pairs.
    pub pair_energy: f64,
    /// Mean squared error between the constraint of a generated image and its input constraint.
    pub adherence: f64,
}

const VAL_PAIRS: usize = 8;

pub fn validate(state: &TrainState, val: &[TrainingSample]) -> Result<ValSnapshot, TrainError> {
    let dp = state.d_params.bind(false);
    let (mut cyc, mut correct) = (0.0, 0usize);
    for chunk in val.chunks(16) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let cs: Vec<_> = chunk.iter().map(|s| &s.constraint).collect();
        let out = no_grad(|| state.critic.forward(&dp, &Var::constant(image_tensor(&imgs))))?;
        let c = constraint_var(&cs);
        cyc += c.value().zip_map(out.c_hat.value(), |a, b| (a - b) * (a - b)).sum() / c.value().len() as f64 * chunk.len() as f64;
        for (i, s) in chunk.iter().enumerate() {
            let l = &out.logits.value().data()[3 * i..3 * i + 2];
            if argmax_class(l) == CriticClass::from(s.label) {
                correct += 1;
            }
        }
    }
    let n = val.len().max(1) as f64;
    let pairs = val.len().min(VAL_PAIRS);
    let (mut energy, mut adherence) = (0.0, 0.0);
    if pairs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7a1);
        let cfg = &state.cfg.generator;
        let z = randn(&mut rng, &[pairs, cfg.style_dim]);
        let noise = SynthesisNoise::sample(&mut rng, cfg, pairs);
        let mut labels = vec![ClassLabel::AD; pairs];
        labels.extend(vec![ClassLabel::CN; pairs]);
        let zz = Tensor::concat(&[&z, &z], 0);
        let nn = SynthesisNoise::concat(&[&noise, &noise]);
        let cs: Vec<_> = val[..pairs].iter().chain(&val[..pairs]).map(|s| &s.constraint).collect();
        let out = no_grad(|| state.generator.forward(&state.g_ema.bind(false), &labels, &Var::constant(zz), &constraint_var(&cs), &nn))?;
        let r = cfg.output_resolution;
        let data = out.value().data();
        let img = |i: usize| Array2::from_shape_vec((r, r), data[i * r * r..(i + 1) * r * r].to_vec()).unwrap();
        let factor = r / cfg.constraint_resolution;
        for i in 0..pairs {
            let (a, c) = (img(i), img(pairs + i));
            energy += (&a - &c).mapv(|v| v * v).mean().unwrap();
            for (g, s) in [(a, &val[i]), (c, &val[i])] {
                let cg = make_constraint(&ImageGrid::new(g).expect("square"), factor).expect("divisible");
                adherence += (cg.data() - s.constraint.data()).mapv(|v| v * v).mean().unwrap();
            }
        }
        energy /= pairs as f64;
        adherence /= 2.0 * pairs as f64;
    }
    Ok(ValSnapshot { step: state.step, cycle: cyc / n, accuracy: correct as f64 / n, pair_energy: energy, adherence })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    dtype: String,
    step: u64,
    config_hash: String,
    config: TrainConfig,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
    pl_state: PathLengthState,
    g_adam_t: u64,
    d_adam_t: u64,
    generator: Vec<TensorEntry>,
    critic: Vec<TensorEntry>,
}

const GROUPS: [&str; 7] = ["g", "g_ema", "g_adam_m", "g_adam_v", "d", "d_adam_m", "d_adam_v"];

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor], what: &str) -> Result<Vec<Tensor>, TrainError> {
    let need: usize = like.iter().map(Tensor::len).sum();
    if flat.len() != need {
        return Err(TrainError::Checkpoint(format!("{what}: {} values, expected {need}", flat.len())));
    }
    let mut off = 0;
    Ok(like
        .iter()
        .map(|t| {
            let v = Tensor::new(t.shape(), flat[off..off + t.len()].to_vec());
            off += t.len();
            v
        })
        .collect())
}

fn entries(ps: &ParamSet) -> Vec<TensorEntry> {
    ps.names().iter().zip(ps.values()).map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect()
}

/// Write a checkpoint directory: one little-endian f64 file per tensor group plus `manifest.json`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), TrainError> {
    io::create_dir(dir)?;
    let groups: [&[Tensor]; 7] =
        [state.g_params.values(), state.g_ema.values(), &state.g_opt.m, &state.g_opt.v, state.d_params.values(), &state.d_opt.m, &state.d_opt.v];
    for (name, ts) in GROUPS.iter().zip(groups) {
        io::write_f64s(&dir.join(format!("{name}.bin")), &flatten(ts))?;
    }
    let m = CheckpointManifest {
        format: 1,
        dtype: "f64le".into(),
        step: state.step,
        config_hash: state.cfg.hash(),
        config: state.cfg.clone(),
        rng_seed: state.rng.get_seed(),
        rng_word_pos: state.rng.get_word_pos(),
        pl_state: state.pl_state,
        g_adam_t: state.g_opt.t,
        d_adam_t: state.d_opt.t,
        generator: entries(&state.g_params),
        critic: entries(&state.d_params),
    };
    io::write_json(&dir.join("manifest.json"), &m)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState, TrainError> {
    let m: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
    if m.config.hash() != m.config_hash {
        return Err(TrainError::Checkpoint("config hash does not match the stored config".into()));
    }
    let mut s = TrainState::new(&m.config)?;
    if entries(&s.g_params) != m.generator || entries(&s.d_params) != m.critic {
        return Err(TrainError::Checkpoint("tensor layout differs from the configured networks".into()));
    }
    let read = |name: &str, like: &[Tensor]| -> Result<Vec<Tensor>, TrainError> { unflatten(&io::read_f64s(&dir.join(format!("{name}.bin")))?, like, name) };
    let g_like = s.g_params.values().to_vec();
    let d_like = s.d_params.values().to_vec();
    let g = read("g", &g_like)?;
    let ge = read("g_ema", &g_like)?;
    s.g_opt.m = read("g_adam_m", &g_like)?;
    s.g_opt.v = read("g_adam_v", &g_like)?;
    let d = read("d", &d_like)?;
    s.d_opt.m = read("d_adam_m", &d_like)?;
    s.d_opt.v = read("d_adam_v", &d_like)?;
    s.g_params.values_mut().clone_from_slice(&g);
    s.g_ema.values_mut().clone_from_slice(&ge);
    s.d_params.values_mut().clone_from_slice(&d);
    s.g_opt.t = m.g_adam_t;
    s.d_opt.t = m.d_adam_t;
    s.pl_state = m.pl_state;
    s.step = m.step;
    s.rng = ChaCha8Rng::from_seed(m.rng_seed);
    s.rng.set_word_pos(m.rng_word_pos);
    Ok(s)
}

// ---------------------------------------------------------------------------
// Fit loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRow {
    Step { step: u64, d: LossTerms, g: LossTerms, batch_ids: Vec<String> },
    Val(ValSnapshot),
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Checkpoints, the log and non-finite dumps go here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop at this step instead of `total_steps`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub steps: Vec<StepTerms>,
    pub val: Vec<ValSnapshot>,
}

/// Train until `total_steps` (or `stop_at`), validating and checkpointing on the
/// configured cadences. Appends to `log.jsonl` in the output directory.
pub fn fit(state: &mut TrainState, train: &[TrainingSample], val: &[TrainingSample], opts: &FitOptions) -> Result<FitReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Parameter("no training samples".into()));
    }
    let end = opts.stop_at.unwrap_or(state.cfg.total_steps).min(state.cfg.total_steps);
    let mut log = match &opts.out_dir {
        Some(d) => {
            io::create_dir(d)?;
            let p = d.join("log.jsonl");
            let f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| IoError::Fs { path: p.display().to_string(), source: e })?;
            Some((BufWriter::new(f), p))
        }
        None => None,
    };
    let mut emit = |row: &LogRow| -> Result<(), TrainError> {
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(row).expect("log row serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| IoError::Fs { path: p.display().to_string(), source: e })?;
        }
        Ok(())
    };
    let mut report = FitReport::default();
    while state.step < end {
        let idx = draw_batch(&mut state.rng, train.len(), state.cfg.batch_size);
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &train[i]).collect();
        let terms = match train_step(state, &batch) {
            Ok(t) => t,
            Err(TrainError::NonFinite { phase, term, step, .. }) => {
                let dump = match &opts.out_dir {
                    Some(d) => {
                        let p = d.join(format!("nonfinite-{step:06}"));
                        save_checkpoint(state, &p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(TrainError::NonFinite { phase, term, step, dump });
            }
            Err(e) => return Err(e),
        };
        emit(&LogRow::Step { step: state.step - 1, d: terms.d, g: terms.g, batch_ids: batch.iter().map(|s| s.id.clone()).collect() })?;
        report.steps.push(terms);
        if state.step % state.cfg.val_interval == 0 || state.step == end {
            if !val.is_empty() {
                let v = validate(state, val)?;
                info!("step {}: val cycle {:.4} accuracy {:.3} pair energy {:.4} adherence {:.4}", v.step, v.cycle, v.accuracy, v.pair_energy, v.adherence);
                emit(&LogRow::Val(v.clone()))?;
                report.val.push(v);
            }
        }
        if let Some(d) = &opts.out_dir {
            if state.step % state.cfg.checkpoint_interval == 0 || state.step == end {
                save_checkpoint(state, &d.join("checkpoint"))?;
            }
        }
    }
    Ok(report)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>, TrainError> {
    let s = fs::read_to_string(path).map_err(|e| IoError::Fs { path: path.display().to_string(), source: e })?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Checkpoint(format!("log row: {e}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// Classifier fine-tuning

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    /// Only the layers above the convolutional trunk are trained.
    Frozen,
    /// Every critic parameter on the classification path is trained.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub mode: FineTuneMode,
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of the `n` samples held back to pick the best epoch.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { mode: FineTuneMode::Frozen, n: 1000, epochs: 10, lr: 1e-3, batch_size: 32, holdout: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub mode: FineTuneMode,
    pub n: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Epoch kept after selection on the held-back share; 0 means the pretrained head.
    pub best_epoch: usize,
}

/// AD/CN accuracy of the critic class head with the FAKE logit masked.
pub fn class_accuracy(critic: &Critic, params: &ParamSet, samples: &[TrainingSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let p = params.bind(false);
    let mut correct = 0;
    for chunk in samples.chunks(32) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let logits = no_grad(|| critic.class_logits(&p, &Var::constant(image_tensor(&imgs))))?;
        for (i, s) in chunk.iter().enumerate() {
            if argmax_class(&logits.value().data()[3 * i..3 * i + 2]) == CriticClass::from(s.label) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train the critic's class path on `cfg.n` labelled samples from `pool` and
/// report held-out accuracy on `test`. Returns the tuned critic parameters.
pub fn fine_tune_classifier(
    critic: &Critic,
    params: &ParamSet,
    pool: &[TrainingSample],
    test: &[TrainingSample],
    cfg: &FineTuneConfig,
) -> Result<(ParamSet, ClassifierMetrics), TrainError> {
    if cfg.n > pool.len() {
        return Err(TrainError::Parameter(format!("asked for {} labelled samples, only {} available", cfg.n, pool.len())));
    }
    let before = class_accuracy(critic, params, test)?;
    let mut metrics = ClassifierMetrics { mode: cfg.mode, n: cfg.n, accuracy_before: before, accuracy_after: before, best_epoch: 0 };
    if cfg.n == 0 {
        return Ok((params.clone(), metrics));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chosen: Vec<&TrainingSample> = sample_indices(&mut rng, pool.len(), cfg.n).into_iter().map(|i| &pool[i]).collect();
    let n_hold = ((cfg.holdout * cfg.n as f64).round() as usize).min(cfg.n - 1);
    let (hold, fit_set) = chosen.split_at(n_hold);
    let trainable: Vec<bool> = match cfg.mode {
        FineTuneMode::Frozen => {
            let names = critic.class_path_param_names(params);
            params.names().iter().map(|n| names.contains(n)).collect()
        }
        FineTuneMode::Full => {
            let head = ["critic.c_head", "critic.adv"];
            params.names().iter().map(|n| !head.iter().any(|h| n.starts_with(h))).collect()
        }
    };
    // The frozen trunk lets features be computed once.
    let features = |ps: &ParamSet, set: &[&TrainingSample]| -> Result<Vec<Tensor>, TrainError> {
        let p = ps.bind(false);
        set.chunks(32)
            .map(|ch| {
                let imgs: Vec<_> = ch.iter().map(|s| &s.image).collect();
                Ok(no_grad(|| critic.features(&p, &Var::constant(image_tensor(&imgs))))?.value().clone())
            })
            .collect()
    };
    let hold_acc = |ps: &ParamSet| -> Result<f64, TrainError> {
        if hold.is_empty() {
            return Ok(0.0);
        }
        let owned: Vec<TrainingSample> = hold.iter().map(|s| (*s).clone()).collect();
        class_accuracy(critic, ps, &owned)
    };
    let frozen_feats = if cfg.mode == FineTuneMode::Frozen { Some(features(params, fit_set)?) } else { None };
    let mut ps = params.clone();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, &ps);
    let mut best = (hold_acc(&ps)?, 0usize, ps.clone());
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..fit_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(bs) {
            let p = ps.bind(true);
            let targets: Vec<CriticClass> = chunk.iter().map(|&i| fit_set[i].label.into()).collect();
            let logits = match &frozen_feats {
                Some(f) => {
                    let rows: Vec<Tensor> = chunk.iter().map(|&i| f[i / 32].slice_axis(0, i % 32, 1)).collect();
                    let refs: Vec<&Tensor> = rows.iter().collect();
                    critic.class_logits_from_features(&p, &Var::constant(Tensor::concat(&refs, 0)))
                }
                None => {
                    let imgs: Vec<_> = chunk.iter().map(|&i| &fit_set[i].image).collect();
                    critic.class_logits(&p, &Var::constant(image_tensor(&imgs)))?
                }
            };
            let loss = class_loss(&logits, &targets).map_err(non_finite("fine-tune", epoch as u64))?;
            let mut g = p.gradients(&loss);
            for (gi, &t) in g.iter_mut().zip(&trainable) {
                if !t {
                    *gi = Tensor::zeros(gi.shape());
                }
            }
            if !grads_finite(&g) {
                return Err(TrainError::NonFinite { phase: "fine-tune", term: "gradient", step: epoch as u64, dump: None });
            }
            let keep: Vec<Tensor> = ps.values().iter().zip(&trainable).filter(|(_, &t)| !t).map(|(v, _)| v.clone()).collect();
            opt.step(&mut ps, &g);
            // Adam with zero gradient still moves via stale moments; pin frozen tensors.
            let mut it = keep.into_iter();
            for (v, &t) in ps.values_mut().iter_mut().zip(&trainable) {
                if !t {
                    *v = it.next().unwrap();
                }
            }
        }
        let acc = hold_acc(&ps)?;
        if acc > best.0 {
            best = (acc, epoch, ps.clone());
        }
    }
    if hold.is_empty() {
        best = (0.0, cfg.epochs, ps);
    }
    let (_, best_epoch, tuned) = best;
    metrics.accuracy_after = class_accuracy(critic, &tuned, test)?;
    metrics.best_epoch = best_epoch;
    Ok((tuned, metrics))
}

pub fn write_metrics(path: &Path, m: &ClassifierMetrics) -> Result<(), TrainError> {
    io::write_json(path, m)?;
    Ok(())
}
