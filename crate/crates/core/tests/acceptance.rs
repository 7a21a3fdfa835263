//! Acceptance run: the three oracle suites, then the closed-loop phantom
//! experiment trained twice with anti-aliasing and once without. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! The experiment trains the desk configuration from scratch three times, so
//! expect this target to take the better part of an hour on one core.

mod suites;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use didigan_core::experiment::{run_closed_loop, ClosedLoopConfig, ClosedLoopReport, DISEASE_MARGIN};
use suites::{dsp_suite, gradient_suite, jacobian_suite, Suite};

struct Verdict {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn suite_verdict(id: u8, title: &'static str, s: &Suite, budget: Duration) -> Verdict {
    let fails = s.failures();
    let in_time = s.elapsed < budget;
    let mut detail = format!("{} checks in {:.2?} (budget {budget:?})", s.checks.len(), s.elapsed);
    for f in &fails {
        detail += &format!("; {} failed: {}", f.name, f.detail);
    }
    Verdict { id, title, passed: fails.is_empty() && in_time, detail }
}

fn work_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).expect("create acceptance work dir");
    d
}

fn run(cfg: &ClosedLoopConfig, name: &str) -> (Result<ClosedLoopReport, String>, Duration) {
    let t = Instant::now();
    let dir = work_dir(name);
    let r = run_closed_loop(cfg, &dir).map_err(|e| e.to_string());
    if let Ok(rep) = &r {
        let _ = std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(rep).unwrap());
    }
    (r, t.elapsed())
}

fn closed_loop(rep: &ClosedLoopReport) -> Verdict {
    let p = &rep.pairs;
    let (v, h) = (&p.ventricle, &p.hippocampus);
    let a = v.mean_log_jac > 0.0 && v.sign_agreement >= 0.8;
    let b = h.mean_log_jac < 0.0 && h.sign_agreement >= 0.8;
    let ratio = |s: &didigan_core::experiment::RoiSummary| s.mean_log_jac / s.expected_log_jac;
    let c = [ratio(v), ratio(h)].iter().all(|r| (0.5..=2.0).contains(r));
    let d = p.mean_adherence < 0.01;
    let (g, t) = (&p.generated_trend, &p.ground_truth_trend);
    let e = g.gm.signum() == t.gm.signum() && g.wm.signum() == t.wm.signum();
    let detail = format!(
        "(a) ventricle mean log|J| {:+.4}, sign {:.0}% [{}]; (b) hippocampus {:+.4}, sign {:.0}% [{}]; \
         (c) magnitude ratios {:.2} / {:.2} of ln(1.29), ln(0.847) [{}]; (d) adherence {:.5} [{}]; \
         (e) GM {:+.1}% vs {:+.1}%, WM {:+.1}% vs {:+.1}%, CSF {:+.1}% vs {:+.1}% [{}]",
        v.mean_log_jac,
        100.0 * v.sign_agreement,
        ok(a),
        h.mean_log_jac,
        100.0 * h.sign_agreement,
        ok(b),
        ratio(v),
        ratio(h),
        ok(c),
        p.mean_adherence,
        ok(d),
        g.gm,
        t.gm,
        g.wm,
        t.wm,
        g.csf,
        t.csf,
        ok(e),
    );
    Verdict { id: 4, title: "closed-loop phantom experiment", passed: a && b && c && d && e, detail }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn failed(id: u8, title: &'static str, why: impl Into<String>) -> Verdict {
    Verdict { id, title, passed: false, detail: why.into() }
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        println!("[{}] criterion {}: {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
        verdicts.push(v.passed);
    };

    report(suite_verdict(1, "DSP oracle suite", &dsp_suite(), Duration::from_secs(10)));
    report(suite_verdict(2, "gradient suite", &gradient_suite(), Duration::from_secs(60)));
    report(suite_verdict(3, "Jacobian oracle suite", &jacobian_suite(), Duration::from_secs(60)));

    let cfg = ClosedLoopConfig::default();
    let (main_run, main_time) = run(&cfg, "antialiased");
    let mut ablated_cfg = cfg.clone();
    ablated_cfg.train.generator.antialias = false;
    let (ablated, ablated_time) = run(&ablated_cfg, "no-antialias");

    match &main_run {
        Ok(rep) => {
            let mut v = closed_loop(rep);
            v.detail += &format!("; pipeline {main_time:.0?}");
            report(v);
        }
        Err(e) => report(failed(4, "closed-loop phantom experiment", e.clone())),
    }

    match (&main_run, &ablated) {
        (Ok(a), Ok(n)) => {
            let (da, dn) = (a.pairs.mean_discrepancy, n.pairs.mean_discrepancy);
            let profile: Vec<String> =
                a.pairs.discrepancy_profile.iter().zip(&n.pairs.discrepancy_profile).map(|((m, x), (_, y))| format!("{m}px {x:.2e}/{y:.2e}")).collect();
            report(Verdict {
                id: 5,
                title: "anti-aliasing ablation",
                passed: dn > da,
                detail: format!(
                    "non-disease pair MSE {da:.3e} with anti-aliasing vs {dn:.3e} without, {} px margin (ablated pipeline {ablated_time:.0?}); \
                     by margin, with/without: {}",
                    DISEASE_MARGIN,
                    profile.join(", ")
                ),
            });
        }
        (Err(e), _) | (_, Err(e)) => report(failed(5, "anti-aliasing ablation", e.clone())),
    }

    match &main_run {
        Ok(rep) => {
            let m = &rep.manifold;
            report(Verdict {
                id: 6,
                title: "manifold separation",
                passed: m.silhouette >= 0.5 && m.linear_accuracy >= 0.99,
                detail: format!("silhouette {:.3}, linear accuracy on fresh codes {:.2}% ({} codes/class)", m.silhouette, 100.0 * m.linear_accuracy, m.n_per_class),
            });
            let c = &rep.classifier;
            let ft = &c.fine_tuned;
            report(Verdict {
                id: 7,
                title: "classification sanity",
                passed: c.zero_shot.accuracy >= 0.9 && ft.accuracy_after >= ft.accuracy_before,
                detail: format!(
                    "zero-shot {:.1}% on {} test slices; fine-tuned (n={}, {:?}) {:.1}% from {:.1}%",
                    100.0 * c.zero_shot.accuracy,
                    c.zero_shot.n,
                    ft.n,
                    ft.mode,
                    100.0 * ft.accuracy_after,
                    100.0 * ft.accuracy_before
                ),
            });
        }
        Err(e) => {
            report(failed(6, "manifold separation", e.clone()));
            report(failed(7, "classification sanity", e.clone()));
        }
    }

    let (rerun, _) = run(&cfg, "antialiased-rerun");
    match (&main_run, &rerun) {
        (Ok(a), Ok(b)) => {
            let (ja, jb) = (serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
            let bitwise = ja == jb;
            report(Verdict {
                id: 8,
                title: "determinism",
                passed: bitwise,
                detail: if bitwise { format!("rerun reproduced all {} report bytes", ja.len()) } else { "rerun statistics differ".into() },
            });
        }
        (Err(e), _) | (_, Err(e)) => report(failed(8, "determinism", e.clone())),
    }

    let n_pass = verdicts.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", verdicts.len());
    if n_pass == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
