//! Oracle suites shared by the regular tests and the acceptance run. Each
//! returns named checks so callers can either assert or report them.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use didigan_core::critic::{Critic, CriticClass, CriticConfig};
use didigan_core::dsp::*;
use didigan_core::manifold::ClassLabel;
use didigan_core::morphometry::{jacobian_map, register, DemonsConfig, WarpField};
use didigan_core::nn::{Bound, ParamSet};
use didigan_core::objectives::*;
use didigan_core::synthesis::{Generator, GeneratorConfig, SynthesisNoise};
use didigan_tensor::gradcheck::check;
use didigan_tensor::{Tensor, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub struct Suite {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn assert_all(&self) {
        let f = self.failures();
        assert!(f.is_empty(), "failed checks: {f:#?}");
    }
}

fn timed(f: impl FnOnce(&mut Vec<Check>)) -> Suite {
    let t = Instant::now();
    let mut checks = Vec::new();
    f(&mut checks);
    Suite { checks, elapsed: t.elapsed() }
}

// ---------------------------------------------------------------------------
// DSP

/// Magnitude response by direct evaluation of the DTFT sum.
pub fn dft_magnitude(taps: &[f64], f: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &h) in taps.iter().enumerate() {
        re += h * (2.0 * PI * f * n as f64).cos();
        im -= h * (2.0 * PI * f * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

fn tone(n: usize, f: f64) -> ImageGrid {
    ImageGrid::new(Array2::from_shape_fn((n, n), |(i, j)| (2.0 * PI * f * i as f64).cos() * (2.0 * PI * f * j as f64).cos())).unwrap()
}

fn interior_rms(a: &Array2<f64>, margin: usize) -> f64 {
    let n = a.nrows();
    let v: Vec<f64> = (margin..n - margin).flat_map(|i| (margin..n - margin).map(move |j| (i, j))).map(|ix| a[ix] * a[ix]).collect();
    (v.iter().sum::<f64>() / v.len() as f64).sqrt()
}

/// Every kernel the system designs, plus a grid of direct designs: unit DC
/// gain and the requested stopband over a dense sweep; an above-Nyquist tone
/// suppressed by filtered decimation and passed by strided decimation.
pub fn dsp_suite() -> Suite {
    timed(|out| {
        let mut kernels: Vec<(String, LowpassKernel)> = Vec::new();
        for att in [DEFAULT_ATTENUATION_DB, NONLINEARITY_ATTENUATION_DB] {
            for (up, down) in [(2, 1), (1, 2), (4, 1), (1, 4), (1, 8)] {
                kernels.push((format!("antialias {up}/{down} @{att} dB"), antialias_kernel(up, down, att)));
            }
        }
        for &(cutoff, width, att) in &[(0.25, 0.1, 60.0), (0.1, 0.05, 40.0), (0.2, 0.05, 80.0), (0.05, 0.1, 30.0), (0.3, 0.2, 100.0)] {
            kernels.push((format!("lowpass fc={cutoff} tw={width} @{att} dB"), design_lowpass(cutoff, width, att).unwrap()));
        }
        for (name, k) in &kernels {
            let dc = dft_magnitude(k.taps(), 0.0);
            out.push(Check::new(format!("{name}: DC gain"), (dc - 1.0).abs() <= 1e-9, format!("{dc:.12}")));
            let edge = k.stopband_edge();
            let worst = (0..=8000).map(|i| dft_magnitude(k.taps(), edge + (0.5 - edge) * i as f64 / 8000.0)).fold(0.0, f64::max);
            let db = 20.0 * worst.log10();
            out.push(Check::new(format!("{name}: stopband"), db <= -k.attenuation_db() + 1e-6, format!("{db:.2} dB")));
        }
        // 0.4 cycles/sample lies above the Nyquist rate of the halved grid.
        let input = tone(128, 0.4);
        let rms_in = interior_rms(input.data(), 12);
        let filtered = resample(&input, 1, 2, &antialias_kernel(1, 2, DEFAULT_ATTENUATION_DB)).unwrap();
        let naive = input.apply_separable(&strided_decimation_operator(128, 2));
        let filt_db = 20.0 * (rms_in / interior_rms(filtered.data(), 12)).log10();
        let naive_db = 20.0 * (rms_in / interior_rms(naive.data(), 6)).log10();
        out.push(Check::new("above-Nyquist tone, filtered resample", filt_db >= 40.0, format!("{filt_db:.1} dB suppression")));
        out.push(Check::new("above-Nyquist tone, strided path", naive_db <= 1.0, format!("{naive_db:.2} dB suppression")));
    })
}

// ---------------------------------------------------------------------------
// Gradients

pub fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        output_resolution: 8,
        n_blocks: 2,
        channel_base: 2,
        channel_max: 4,
        constraint_resolution: 4,
        inject_from_resolution: 4,
        style_dim: 8,
        ..GeneratorConfig::desk()
    }
}

pub fn tiny_critic_config() -> CriticConfig {
    CriticConfig { resolution: 8, constraint_resolution: 4, channel_base: 2, channel_max: 4, hidden: 8, ..CriticConfig::desk() }
}

pub struct TinyNets {
    pub gen: Generator,
    pub g: ParamSet,
    pub critic: Critic,
    pub d: ParamSet,
    pub real: Tensor,
    pub fake: Tensor,
    pub c: Tensor,
    pub z: Tensor,
    pub noise: SynthesisNoise,
    pub noise2: SynthesisNoise,
    pub labels: [ClassLabel; 2],
}

pub fn tiny_nets(seed: u64) -> TinyNets {
    let (gen, mut g) = Generator::init(&tiny_generator_config(), seed).unwrap();
    // Zero-initialised noise strengths would leave the diversity pair identical.
    for (name, t) in g.names().to_vec().iter().zip(g.values_mut()) {
        if name.contains("noise_strength") {
            *t = Tensor::full(t.shape(), 0.4);
        }
    }
    let (critic, d) = Critic::init(&tiny_critic_config(), seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-0.9..0.9));
    let real = u(&[2, 1, 8, 8]);
    let fake = u(&[2, 1, 8, 8]);
    let c = u(&[2, 1, 4, 4]);
    let z = u(&[2, 8]);
    let cfg = tiny_generator_config();
    let noise = SynthesisNoise::sample(&mut rng, &cfg, 2);
    let noise2 = SynthesisNoise::sample(&mut rng, &cfg, 2);
    TinyNets { gen, g, critic, d, real, fake, c, z, noise, noise2, labels: [ClassLabel::AD, ClassLabel::CN] }
}

fn bound(v: &[Var]) -> Bound {
    Bound::from_vars(v.to_vec())
}

fn constant(p: &ParamSet) -> Bound {
    p.bind(false)
}

/// Relative error of analytic vs central-difference gradients for all six
/// losses, with respect to every parameter of the network that minimises them.
pub fn gradient_errors(seed: u64) -> Vec<(&'static str, &'static str, f64)> {
    let n = tiny_nets(seed);
    let eps = 1e-6;
    let cv = || Var::constant(n.c.clone());
    let zv = || Var::constant(n.z.clone());
    let gen_img = |p: &Bound, noise: &SynthesisNoise| n.gen.forward(p, &n.labels, &zv(), &cv(), noise).unwrap();
    let fake_targets = [CriticClass::FAKE, CriticClass::FAKE];
    let real_targets = [CriticClass::AD, CriticClass::CN];
    let mut out = Vec::new();
    let mut run = |loss: &'static str, side: &'static str, f: &dyn Fn(&[Var]) -> Var, params: &ParamSet| {
        out.push((loss, side, check(f, params.values(), eps, None).rel_error));
    };

    run(
        "adv",
        "D",
        &|v| {
            let p = bound(v);
            let r = n.critic.adv_logits(&p, &Var::constant(n.real.clone())).unwrap();
            let f = n.critic.adv_logits(&p, &Var::constant(n.fake.clone())).unwrap();
            adv_loss_d(&r, &f)
        },
        &n.d,
    );
    run("adv", "G", &|v| adv_loss_g(&n.critic.adv_logits(&constant(&n.d), &gen_img(&bound(v), &n.noise)).unwrap()), &n.g);
    run(
        "cycle",
        "D",
        &|v| cycle_loss(&cv(), &n.critic.forward(&bound(v), &Var::constant(n.fake.clone())).unwrap().c_hat).unwrap(),
        &n.d,
    );
    run("cycle", "G", &|v| cycle_loss(&cv(), &n.critic.forward(&constant(&n.d), &gen_img(&bound(v), &n.noise)).unwrap().c_hat).unwrap(), &n.g);
    run(
        "class",
        "D",
        &|v| {
            let p = bound(v);
            let r = class_loss(&n.critic.class_logits(&p, &Var::constant(n.real.clone())).unwrap(), &real_targets).unwrap();
            let f = class_loss(&n.critic.class_logits(&p, &Var::constant(n.fake.clone())).unwrap(), &fake_targets).unwrap();
            r.add(&f)
        },
        &n.d,
    );
    run("class", "G", &|v| class_loss(&n.critic.class_logits(&constant(&n.d), &gen_img(&bound(v), &n.noise)).unwrap(), &real_targets).unwrap(), &n.g);
    run(
        "div",
        "G",
        &|v| {
            let p = bound(v);
            diversity_loss(&gen_img(&p, &n.noise), &gen_img(&p, &n.noise2), -1.0).unwrap()
        },
        &n.g,
    );
    run(
        "r1",
        "D",
        &|v| {
            let p = bound(v);
            r1_penalty(|x| n.critic.adv_logits(&p, x).unwrap(), &n.real, 1.0)
        },
        &n.d,
    );
    let w = n.gen.map(&constant(&n.g), &n.labels, &zv()).value().clone();
    let y = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i as f64 * 0.37).sin() * 3.0).tanh() * 4.0);
    let state = PathLengthState { mean: 0.3, decay: 0.99 };
    run(
        "path_length",
        "G",
        &|v| {
            let p = bound(v);
            path_length_penalty(|w| n.gen.synthesize(&p, w, &cv(), &n.noise).unwrap(), &w, &y, state).0
        },
        &n.g,
    );
    out
}

pub fn gradient_tolerance(loss: &str) -> f64 {
    match loss {
        "r1" | "path_length" => 1e-3,
        _ => 1e-4,
    }
}

pub fn gradient_suite() -> Suite {
    timed(|out| {
        for (loss, side, e) in gradient_errors(11) {
            let tol = gradient_tolerance(loss);
            out.push(Check::new(format!("{loss} ({side} params)"), e <= tol, format!("rel error {e:.2e} (tol {tol:.0e})")));
        }
    })
}

// ---------------------------------------------------------------------------
// Jacobians and registration

/// Sum of oblique sinusoids, well below Nyquist, shifted by `dy` rows.
pub fn textured(n: usize, dy: f64) -> Array2<f64> {
    let t = std::f64::consts::TAU;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 + dy, j as f64);
        0.4 * (t * y / 17.0).sin() * (t * x / 23.0).cos() + 0.3 * (t * (x + 0.5 * y) / 13.0).sin() + 0.2 * (t * (y - x) / 29.0).cos()
    })
}

fn interior_max_dev(det: &Array2<f64>, target: f64) -> f64 {
    let n = det.nrows();
    (1..n - 1).flat_map(|i| (1..n - 1).map(move |j| (i, j))).map(|ix| (det[ix] - target).abs()).fold(0.0, f64::max)
}

pub fn jacobian_suite() -> Suite {
    timed(|out| {
        let id = jacobian_map(&WarpField::identity(48, 48));
        let dev = id.det.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
        out.push(Check::new("identity detJ", dev <= 1e-12, format!("max |detJ − 1| = {dev:.1e}")));

        let sc = jacobian_map(&WarpField::from_map(48, 48, |y, x| (1.1 * y, 1.1 * x)));
        let dev = interior_max_dev(&sc.det, 1.21);
        out.push(Check::new("scale 1.1 detJ", dev <= 1e-6, format!("max |detJ − 1.21| = {dev:.1e}")));

        let (s, c) = 0.4f64.sin_cos();
        let rot = jacobian_map(&WarpField::from_map(48, 48, |y, x| {
            let (y, x) = (y - 24.0, x - 24.0);
            (c * y - s * x + 24.0, s * y + c * x + 24.0)
        }));
        let dev = interior_max_dev(&rot.det, 1.0);
        out.push(Check::new("rotation detJ", dev <= 1e-3, format!("max |detJ − 1| = {dev:.1e}")));

        let r = register(&textured(64, 0.0), &textured(64, 3.0), &DemonsConfig::default()).unwrap();
        let (mut sy, mut sx, mut k) = (0.0, 0.0, 0.0);
        for i in 8..56 {
            for j in 8..56 {
                sy += r.warp.uy[[i, j]];
                sx += r.warp.ux[[i, j]];
                k += 1.0;
            }
        }
        let err = ((sy / k + 3.0).powi(2) + (sx / k).powi(2)).sqrt();
        out.push(Check::new("3-px translation recovered", err <= 0.5, format!("mean u = ({:.3}, {:.3}), error {err:.3} px", sy / k, sx / k)));
    })
}
