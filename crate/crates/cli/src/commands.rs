use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use didigan_core::analysis::{self, classification_report, project_manifold, volume_trend, write_pair_montage, write_projection_png};
use didigan_core::dsp::{Constraint, ImageGrid};
use didigan_core::experiment::generate_pairs_from;
use didigan_core::io;
use didigan_core::manifold::{sample_styles, ClassLabel};
use didigan_core::morphometry::{jacobian_map, register, roi_change, write_roi_report, DemonsConfig, RoiReportRow};
use didigan_core::phantom::{
    build_dataset, ingest_slices, labeled_pool, load_eval_samples, load_training_samples, read_constraint, split_counts, validate_ratios, ClassEffects,
    DatasetConfig, IngestConfig, Split, TissueModel,
};
use didigan_core::train::{fine_tune_classifier, fit, load_checkpoint, write_metrics, FineTuneConfig, FineTuneMode, FitOptions, TrainConfig, TrainState};
use log::{info, warn};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::config;
use crate::{CliError, EvaluateArgs, FineTuneArgs, GenerateArgs, IngestArgs, SynthDataArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const SNAPSHOT: &str = "resolved_config.json";

/// Everything needed to rerun the command, written before any work starts.
fn snapshot(out: &Path, command: &str, value: serde_json::Value) -> Result<()> {
    io::create_dir(out)?;
    io::write_json(&out.join(SNAPSHOT), &json!({ "command": command, "config": value }))?;
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("--ratios needs three comma-separated shares (train,val,test), got {} in {s:?}", parts.len())));
    }
    let mut r = [0.0; 3];
    for (slot, p) in r.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| CliError::Usage(format!("--ratios: {p:?} is not a number")))?;
    }
    validate_ratios(&r).map_err(|e| CliError::Usage(format!("--ratios: {e}")))
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", p.display())))
    }
}

fn load_state(ckpt: &Path) -> Result<TrainState> {
    if !ckpt.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found (expected a directory with manifest.json)", ckpt.display())));
    }
    Ok(load_checkpoint(ckpt)?)
}

pub fn synth_data(a: SynthDataArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    if ![64, 128, 256].contains(&a.resolution) {
        return Err(CliError::Usage(format!("--resolution {} (use 64, 128 or 256)", a.resolution)));
    }
    split_counts(a.n, ratios).map_err(|e| CliError::Usage(format!("--n {}: {e}", a.n)))?;
    let effects = ClassEffects { ventricle_expand: a.ventricle_expand, hippocampus_shrink: a.hippocampus_shrink, cortex_thin: a.cortex_thin };
    effects.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = DatasetConfig { n_anatomies: a.n, resolution: a.resolution, ratios, seed: a.seed, constraint_factor: a.constraint_factor, effects };
    snapshot(&a.out, "synth-data", serde_json::to_value(&cfg).unwrap())?;
    let split = build_dataset(&cfg, &a.out)?;
    let manifest_hash = io::hash_file(&a.out.join("manifest.jsonl"))?;
    info!("wrote {} train / {} val / {} test samples to {}", split.train.len(), split.val.len(), split.test.len(), a.out.display());
    println!("manifest sha256 {manifest_hash}");
    Ok(())
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let ratios = parse_ratios(&a.ratios)?;
    require_dir(&a.input, "--input")?;
    let cfg = IngestConfig { pad_to: a.pad_to, center_n: a.center_n, constraint_factor: a.constraint_factor, ratios, seed: a.seed };
    snapshot(&a.out, "ingest", json!({ "input": a.input, "ingest": cfg }))?;
    let split = ingest_slices(&a.input, &a.out, &cfg)?;
    info!("ingested {} train / {} val / {} test slices", split.train.len(), split.val.len(), split.test.len());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data, "--data")?;
    let mut state = match &a.resume {
        Some(ckpt) => {
            if a.config.is_some() || !a.overrides.is_empty() || a.no_antialias || a.seed.is_some() {
                return Err(CliError::Usage("--resume uses the checkpoint's config; only --steps may change it".into()));
            }
            let mut s = load_state(ckpt)?;
            if let Some(n) = a.steps {
                s.cfg.total_steps = n;
            }
            s
        }
        None => {
            let mut overrides = Vec::new();
            if let Some(seed) = a.seed {
                overrides.push(format!("seed={seed}"));
            }
            if let Some(n) = a.steps {
                overrides.push(format!("total_steps={n}"));
            }
            if a.no_antialias {
                overrides.push("generator.antialias=false".into());
            }
            overrides.extend(a.overrides.iter().cloned());
            let cfg: TrainConfig = config::resolve(a.config.as_deref(), &overrides)?;
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            TrainState::new(&cfg)?
        }
    };
    snapshot(&a.out, "train", json!({ "data": a.data, "resume": a.resume, "train": state.cfg }))?;
    let train = load_training_samples(&a.data, Split::Train)?;
    let val = load_training_samples(&a.data, Split::Val)?;
    info!("training from step {} to {} on {} samples", state.step, state.cfg.total_steps, train.len());
    let report = fit(&mut state, &train, &val, &FitOptions { out_dir: Some(a.out.clone()), stop_at: None })?;
    if let Some(v) = report.val.last() {
        println!("{}", serde_json::to_string(v).unwrap());
    }
    info!("checkpoint at {}", a.out.join("checkpoint").display());
    Ok(())
}

pub fn fine_tune(a: FineTuneArgs) -> Result<()> {
    let mode = match a.mode.to_ascii_lowercase().as_str() {
        "frozen" => FineTuneMode::Frozen,
        "full" => FineTuneMode::Full,
        other => return Err(CliError::Usage(format!("--mode {other:?} (use frozen or full)"))),
    };
    require_dir(&a.data, "--data")?;
    let state = load_state(&a.ckpt)?;
    let ds: DatasetConfig = io::read_json(&a.data.join("dataset.json")).unwrap_or_default();
    let cfg = FineTuneConfig { mode, n: a.n, epochs: a.epochs, seed: a.seed, ..FineTuneConfig::default() };
    let res = state.cfg.critic.resolution;
    let factor = res / state.cfg.critic.constraint_resolution;
    snapshot(&a.out, "fine-tune", json!({ "ckpt": a.ckpt, "data": a.data, "pool_anatomies": a.pool_anatomies, "fine_tune": cfg, "effects": ds.effects }))?;
    let test = load_training_samples(&a.data, Split::Test)?;
    let pool = labeled_pool(a.pool_anatomies, res, factor, a.seed, ds.effects)?;
    if cfg.n > pool.len() {
        return Err(CliError::Usage(format!("--n {} exceeds the {} labelled samples of --pool-anatomies {}", cfg.n, pool.len(), a.pool_anatomies)));
    }
    let (_, metrics) = fine_tune_classifier(&state.critic, &state.d_params, &pool, &test, &cfg)?;
    write_metrics(&a.out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string(&metrics).unwrap());
    Ok(())
}

#[derive(Serialize)]
struct PairRecord {
    pair_id: String,
    constraint_id: String,
    seed: u64,
    index: usize,
}

/// Constraint sources: a dataset's test split (with its CN masks as ROIs) or loose files.
fn constraint_sources(dir: &Path) -> Result<Vec<(String, Constraint, Option<(Array2<bool>, Array2<bool>)>)>> {
    if dir.join("manifest.jsonl").is_file() {
        let samples = load_eval_samples(dir, Split::Test)?;
        return Ok(samples
            .into_iter()
            .map(|s| {
                let rois = s.masks.as_ref().map(|m| (m.ventricle.clone(), m.hippocampus.clone()));
                (s.id, s.constraint, rois)
            })
            .collect());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("bin" | "png")))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            let c = if p.extension().unwrap() == "bin" {
                read_constraint(p)?
            } else {
                Constraint::from_grid(ImageGrid::new(io::read_png16(p, -1.0, 1.0)?).map_err(anyhow::Error::from)?)
            };
            Ok((id, c, None))
        })
        .collect()
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let state = load_state(&a.ckpt)?;
    require_dir(&a.constraints, "--constraints")?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let sources = constraint_sources(&a.constraints)?;
    if sources.is_empty() {
        return Err(CliError::Usage(format!("no constraints found in {}", a.constraints.display())));
    }
    let want = state.generator.cfg.constraint_resolution;
    if let Some((id, c, _)) = sources.iter().find(|(_, c, _)| c.side() != want) {
        return Err(CliError::Usage(format!("constraint {id} is {}×{0}; the checkpoint expects {want}×{want}", c.side())));
    }
    snapshot(&a.out, "generate", json!({ "ckpt": a.ckpt, "constraints": a.constraints, "n": a.n, "seed": a.seed }))?;
    let refs: Vec<(&str, &Constraint)> = sources.iter().map(|(id, c, _)| (id.as_str(), c)).collect();
    let pairs = generate_pairs_from(&state.generator, &state.g_ema, &refs, a.n, a.seed).map_err(anyhow::Error::from)?;
    let mut index = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let (id, c, rois) = &sources[p.source];
        let dir = a.out.join(&p.pair_id);
        io::create_dir(&dir)?;
        io::write_png16(&dir.join("ad.png"), &p.ad, -1.0, 1.0)?;
        io::write_png16(&dir.join("cn.png"), &p.cn, -1.0, 1.0)?;
        io::write_f64s(&dir.join("constraint.bin"), c.data().as_slice().unwrap())?;
        let rec = PairRecord { pair_id: p.pair_id.clone(), constraint_id: id.clone(), seed: a.seed, index: k };
        io::write_json(&dir.join("provenance.json"), &rec)?;
        if let Some((v, h)) = rois {
            let rd = a.out.join("rois").join(&p.pair_id);
            io::create_dir(&rd)?;
            io::write_mask_png(&rd.join("ventricle.png"), v)?;
            io::write_mask_png(&rd.join("hippocampus.png"), h)?;
        }
        index.push(rec);
    }
    io::write_json(&a.out.join("pairs.json"), &index)?;
    info!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Skipped {
    pair_id: String,
    reason: String,
}

fn roi_masks(rois: &Path, pair: &str) -> Option<(Array2<bool>, Array2<bool>)> {
    let read = |d: PathBuf| -> Option<(Array2<bool>, Array2<bool>)> {
        Some((io::read_mask_png(&d.join("ventricle.png")).ok()?, io::read_mask_png(&d.join("hippocampus.png")).ok()?))
    };
    read(rois.join(pair)).or_else(|| read(rois.to_path_buf()))
}

fn list_pairs(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("ad.png").exists() || e.path().join("cn.png").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pairs.is_none() && a.styles.is_none() && a.data.is_none() {
        return Err(CliError::Usage("nothing to evaluate: give --pairs, --styles or --data".into()));
    }
    if (a.styles.is_some() || a.data.is_some()) && a.ckpt.is_none() {
        return Err(CliError::Usage("--styles and --data need --ckpt".into()));
    }
    if a.rois.is_some() && a.pairs.is_none() {
        return Err(CliError::Usage("--rois needs --pairs".into()));
    }
    if let Some(p) = &a.pairs {
        require_dir(p, "--pairs")?;
    }
    let state = a.ckpt.as_deref().map(load_state).transpose()?;
    snapshot(&a.out, "evaluate", json!({ "pairs": a.pairs, "rois": a.rois, "ckpt": a.ckpt, "styles": a.styles, "data": a.data, "seed": a.seed }))?;
    let figures = a.out.join("figures");
    io::create_dir(&figures)?;
    let mut report = serde_json::Map::new();

    if let Some(dir) = &a.pairs {
        let demons = DemonsConfig::default();
        let mut skipped = Vec::new();
        let mut images = Vec::new();
        let mut rows = Vec::new();
        let mut montage = Vec::new();
        for id in list_pairs(dir)? {
            let read = |name: &str| io::read_png16(&dir.join(&id).join(name), -1.0, 1.0);
            let (ad, cn) = match (read("ad.png"), read("cn.png")) {
                (Ok(ad), Ok(cn)) if ad.dim() == cn.dim() => (ad, cn),
                (Ok(_), Ok(_)) => {
                    warn!("{id}: AD and CN images differ in size; skipped");
                    skipped.push(Skipped { pair_id: id, reason: "AD and CN images differ in size".into() });
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => {
                    warn!("{id}: {e}; skipped");
                    skipped.push(Skipped { pair_id: id, reason: e.to_string() });
                    continue;
                }
            };
            if let Some(rdir) = &a.rois {
                match roi_masks(rdir, &id) {
                    Some((v, h)) if v.dim() == cn.dim() && h.dim() == cn.dim() => {
                        let reg = register(&cn, &ad, &demons).map_err(anyhow::Error::from)?;
                        let jac = jacobian_map(&reg.warp);
                        for (name, m) in [("ventricle", &v), ("hippocampus", &h)] {
                            match roi_change(&jac, m, name) {
                                Ok(s) => rows.push(RoiReportRow { pair_id: id.clone(), roi: name.into(), mean_log_jac: s.mean_log_jac, pct_change: s.pct_change }),
                                Err(e) => warn!("{id}: {name} ROI: {e}"),
                            }
                        }
                        if montage.len() < 6 {
                            montage.push((ad.clone(), cn.clone(), jac.log_det.mapv(|v| if v.is_finite() { v } else { 0.0 })));
                        }
                    }
                    _ => warn!("{id}: no usable ROI masks under {}", rdir.display()),
                }
            }
            images.push((ad, cn));
        }
        if !rows.is_empty() {
            write_roi_report(&a.out.join("roi_report.json"), &rows).map_err(anyhow::Error::from)?;
            let mean = |roi: &str| {
                let v: Vec<f64> = rows.iter().filter(|r| r.roi == roi).map(|r| r.mean_log_jac).collect();
                let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
                json!({ "pairs": v.len(), "mean_log_jac": m, "pct_change": 100.0 * (m.exp() - 1.0) })
            };
            report.insert("rois".into(), json!({ "ventricle": mean("ventricle"), "hippocampus": mean("hippocampus") }));
        }
        if !montage.is_empty() {
            let refs: Vec<_> = montage.iter().map(|(a, c, j)| (a, c, j)).collect();
            write_pair_montage(&figures.join("pairs.png"), &refs).map_err(anyhow::Error::from)?;
        }
        if !images.is_empty() {
            let vt = volume_trend(&images, &TissueModel::default(), a.seed).map_err(anyhow::Error::from)?;
            report.insert("volume".into(), serde_json::to_value(&vt).unwrap());
        }
        report.insert("pairs_evaluated".into(), json!(images.len()));
        report.insert("skipped".into(), serde_json::to_value(&skipped).unwrap());
    }

    if let (Some(n), Some(s)) = (a.styles, &state) {
        if n == 0 {
            return Err(CliError::Usage("--styles must be at least 1".into()));
        }
        let mut codes = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(2 * n);
        for (k, l) in ClassLabel::ALL.into_iter().enumerate() {
            for c in sample_styles(l, n, a.seed.wrapping_add(k as u64), &s.generator.mapping, &s.g_ema) {
                codes.push(c.0);
                labels.push(l);
            }
        }
        let proj = project_manifold(&codes, &labels).map_err(anyhow::Error::from)?;
        write_projection_png(&figures.join("manifold.png"), &proj, 512).map_err(anyhow::Error::from)?;
        report.insert(
            "manifold".into(),
            json!({ "per_class": n, "silhouette": proj.silhouette, "explained_variance": proj.explained_variance }),
        );
    }

    if let (Some(data), Some(s)) = (&a.data, &state) {
        require_dir(data, "--data")?;
        let test = load_eval_samples(data, Split::Test)?;
        let imgs: Vec<_> = test.iter().map(|t| &t.image).collect();
        let labels: Vec<_> = test.iter().map(|t| t.label).collect();
        let cr = classification_report(&s.critic, &s.d_params, &imgs, &labels).map_err(anyhow::Error::from)?;
        report.insert("classification".into(), serde_json::to_value(&cr).unwrap());
    }

    analysis::write_report(&a.out.join("report.json"), &report).map_err(anyhow::Error::from)?;
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}
