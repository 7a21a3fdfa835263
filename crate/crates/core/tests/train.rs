//! Training loop behaviour on tiny networks: determinism, bitwise resume, log
//! contents, split hygiene and classifier fine-tuning edge cases.

mod suites;

use std::collections::HashSet;

use didigan_core::dsp::{make_constraint, ImageGrid};
use didigan_core::manifold::ClassLabel;
use didigan_core::phantom::TrainingSample;
use didigan_core::train::*;
use ndarray::Array2;
use suites::{tiny_critic_config, tiny_generator_config};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        generator: tiny_generator_config(),
        critic: tiny_critic_config(),
        batch_size: 4,
        diversity_pairs: 1,
        total_steps: 12,
        r1_interval: 4,
        pl_interval: 3,
        val_interval: 5,
        checkpoint_interval: 5,
        seed,
        ..TrainConfig::default()
    }
}

/// Disc-shaped 8×8 slices whose radius depends on the class.
fn samples(prefix: &str, n: usize) -> Vec<TrainingSample> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { ClassLabel::AD } else { ClassLabel::CN };
            let r = if label == ClassLabel::AD { 2.0 } else { 3.2 } + 0.1 * (i / 2) as f64;
            let off = 0.3 * (i % 3) as f64;
            let image = Array2::from_shape_fn((8, 8), |(y, x)| {
                let d = ((y as f64 - 3.5 - off).powi(2) + (x as f64 - 3.5).powi(2)).sqrt();
                if d < r {
                    0.8
                } else {
                    -0.8
                }
            });
            let constraint = make_constraint(&ImageGrid::new(image.clone()).unwrap(), 2).unwrap();
            TrainingSample { id: format!("{prefix}{i:03}"), image, label, constraint }
        })
        .collect()
}

#[test]
fn first_step_gives_finite_terms_and_parameters() {
    let mut s = TrainState::new(&tiny_config(0)).unwrap();
    let data = samples("t", 8);
    let batch: Vec<_> = data.iter().take(4).collect();
    let t = train_step(&mut s, &batch).unwrap();
    for terms in [t.d, t.g] {
        assert!(terms.total.is_finite());
        assert!((terms.total - terms.sum_components()).abs() < 1e-12);
    }
    // Step 0 hits both lazy intervals.
    assert!(t.d.r1 > 0.0 && t.g.path_length >= 0.0);
    assert!(s.g_params.values().iter().chain(s.d_params.values()).all(|v| v.is_finite()));
    assert_eq!(s.step, 1);
}

#[test]
fn same_seed_same_run() {
    let (train, val) = (samples("t", 12), samples("v", 4));
    let run = || {
        let mut s = TrainState::new(&tiny_config(5)).unwrap();
        let r = fit(&mut s, &train, &val, &FitOptions::default()).unwrap();
        (r, s.g_ema.values().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    let mut other = TrainState::new(&tiny_config(6)).unwrap();
    let c = fit(&mut other, &train, &val, &FitOptions::default()).unwrap();
    assert_ne!(a.steps, c.steps);
}

#[test]
fn resume_from_checkpoint_is_bitwise() {
    let (train, val) = (samples("t", 12), samples("v", 4));
    let dir = tempfile::tempdir().unwrap();
    let mut straight = TrainState::new(&tiny_config(2)).unwrap();
    let full = fit(&mut straight, &train, &val, &FitOptions::default()).unwrap();

    let mut first = TrainState::new(&tiny_config(2)).unwrap();
    let opts = FitOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: Some(5) };
    fit(&mut first, &train, &val, &opts).unwrap();
    let mut resumed = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(resumed.step, 5);
    let rest = fit(&mut resumed, &train, &val, &FitOptions::default()).unwrap();

    assert_eq!(&full.steps[5..], &rest.steps[..]);
    assert_eq!(straight.g_params.values(), resumed.g_params.values());
    assert_eq!(straight.g_ema.values(), resumed.g_ema.values());
    assert_eq!(straight.d_params.values(), resumed.d_params.values());
}

#[test]
fn log_rows_carry_every_term_and_only_training_ids() {
    let (train, val) = (samples("t", 12), samples("v", 4));
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainState::new(&tiny_config(1)).unwrap();
    fit(&mut s, &train, &val, &FitOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: None }).unwrap();

    let raw = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
    for side in ["d", "g"] {
        let keys: HashSet<&str> = first[side].as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, HashSet::from(["adv", "cycle", "classify", "diversity", "path_length", "r1", "total"]));
    }

    let train_ids: HashSet<&str> = train.iter().map(|t| t.id.as_str()).collect();
    let rows = read_log(&dir.path().join("log.jsonl")).unwrap();
    let (mut steps, mut vals) = (0, 0);
    for row in rows {
        match row {
            LogRow::Step { batch_ids, .. } => {
                steps += 1;
                assert_eq!(batch_ids.len(), 4);
                assert!(batch_ids.iter().all(|id| train_ids.contains(id.as_str())), "{batch_ids:?}");
            }
            LogRow::Val(v) => {
                vals += 1;
                assert!(v.accuracy >= 0.0 && v.accuracy <= 1.0 && v.adherence.is_finite());
            }
        }
    }
    assert_eq!((steps, vals), (12, 3));
}

#[test]
fn critic_class_head_can_overfit_a_small_set() {
    let (critic, d) = didigan_core::critic::Critic::init(&tiny_critic_config(), 4).unwrap();
    let data = samples("t", 8);
    let cfg = FineTuneConfig { mode: FineTuneMode::Full, n: 8, epochs: 300, lr: 1e-2, batch_size: 8, holdout: 0.0, seed: 0 };
    let (tuned, m) = fine_tune_classifier(&critic, &d, &data, &data, &cfg).unwrap();
    assert_eq!(m.accuracy_after, 1.0, "training accuracy {}", m.accuracy_after);
    assert_eq!(class_accuracy(&critic, &tuned, &data).unwrap(), 1.0);
}

#[test]
fn fine_tune_edge_cases() {
    let (critic, d) = didigan_core::critic::Critic::init(&tiny_critic_config(), 4).unwrap();
    let pool = samples("p", 6);
    let test = samples("q", 4);
    let too_many = FineTuneConfig { n: 7, ..FineTuneConfig::default() };
    assert!(fine_tune_classifier(&critic, &d, &pool, &test, &too_many).is_err());

    let zero = FineTuneConfig { n: 0, ..FineTuneConfig::default() };
    let (same, m) = fine_tune_classifier(&critic, &d, &pool, &test, &zero).unwrap();
    assert_eq!(same.values(), d.values());
    assert_eq!(m.accuracy_before, m.accuracy_after);
    assert_eq!(m.best_epoch, 0);
}

#[test]
fn frozen_mode_leaves_the_trunk_untouched() {
    let (critic, d) = didigan_core::critic::Critic::init(&tiny_critic_config(), 4).unwrap();
    let data = samples("t", 8);
    let cfg = FineTuneConfig { mode: FineTuneMode::Frozen, n: 8, epochs: 5, lr: 1e-2, batch_size: 4, holdout: 0.0, seed: 0 };
    let (tuned, _) = fine_tune_classifier(&critic, &d, &data, &data, &cfg).unwrap();
    let head = critic.class_path_param_names(&d);
    for ((name, a), b) in d.names().iter().zip(d.values()).zip(tuned.values()) {
        if head.contains(name) {
            assert_ne!(a, b, "{name} should train");
        } else {
            assert_eq!(a, b, "{name} should stay frozen");
        }
    }
}

#[test]
fn broken_configs_are_rejected() {
    let mut c = tiny_config(0);
    c.critic.resolution = 16;
    assert!(TrainState::new(&c).is_err());
    let mut c = tiny_config(0);
    c.ema_decay = 1.0;
    assert!(c.validate().is_err());
}
