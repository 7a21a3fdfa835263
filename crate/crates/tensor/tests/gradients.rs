use didigan_tensor::gradcheck::check;
use didigan_tensor::{grad, LinearMap1d, PadMode, SparseRows, Tensor, Var};
use proptest::prelude::*;

fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.731 + phase).sin())
}

fn positive(shape: &[usize], phase: f64) -> Tensor {
    wave(shape, phase).map(|v| v.abs() + 0.5)
}

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn assert_grad(name: &str, f: impl Fn(&[Var]) -> Var, inputs: &[Tensor]) {
    let r = check(f, inputs, EPS, None);
    assert!(r.rel_error < TOL, "{name}: relative error {:.3e}", r.rel_error);
}

#[test]
fn elementwise_ops() {
    let a = wave(&[3, 4], 0.1);
    let b = positive(&[4], 0.7);
    assert_grad("add", |v| v[0].add(&v[1]).square().sum(), &[a.clone(), b.clone()]);
    assert_grad("sub", |v| v[0].sub(&v[1]).square().sum(), &[a.clone(), b.clone()]);
    assert_grad("mul", |v| v[0].mul(&v[1]).tanh().sum(), &[a.clone(), b.clone()]);
    assert_grad("div", |v| v[0].div(&v[1]).sum(), &[a.clone(), b.clone()]);
    assert_grad("exp", |v| v[0].exp().sum(), &[a.clone()]);
    assert_grad("ln", |v| v[0].ln().sum(), &[b.clone()]);
    assert_grad("sqrt", |v| v[0].sqrt().sum(), &[b.clone()]);
    assert_grad("sigmoid", |v| v[0].sigmoid().square().sum(), &[a.clone()]);
    assert_grad("softplus", |v| v[0].softplus().sum(), &[a.clone()]);
    assert_grad("leaky", |v| v[0].leaky_relu(0.2).square().sum(), &[a.clone()]);
    assert_grad("log_softmax", |v| v[0].log_softmax().slice_axis(1, 2, 1).sum(), &[a.clone()]);
}

#[test]
fn shape_ops() {
    let a = wave(&[2, 3, 4], 0.3);
    assert_grad("permute", |v| v[0].permute(&[2, 0, 1]).mul_const(&wave(&[4, 2, 3], 1.0)).sum(), &[a.clone()]);
    assert_grad("sum_axes", |v| v[0].sum_axes(&[1], false).square().sum(), &[a.clone()]);
    assert_grad("broadcast", |v| v[0].broadcast_to(&[5, 2, 3, 4]).tanh().sum(), &[a.clone()]);
    assert_grad(
        "concat/slice",
        |v| Var::concat(&[v[0].clone(), v[1].square()], 1).slice_axis(1, 2, 3).tanh().sum(),
        &[a.clone(), wave(&[2, 2, 4], 0.9)],
    );
    assert_grad("matmul", |v| v[0].matmul(&v[1]).tanh().sum(), &[wave(&[3, 5], 0.2), wave(&[5, 2], 0.4)]);
    assert_grad("gather", |v| v[0].gather_rows(&[1, 0, 1]).square().sum(), &[wave(&[2, 3], 0.5)]);
}

#[test]
fn image_ops() {
    let x = wave(&[2, 3, 6, 5], 0.2);
    let w = wave(&[1, 2, 3, 3, 3], 0.8);
    let wb = wave(&[2, 2, 3, 3, 3], 1.1);
    assert_grad("conv shared", |v| v[0].conv2d(&v[1]).tanh().sum(), &[x.clone(), w.clone()]);
    assert_grad("conv per-sample", |v| v[0].conv2d(&v[1]).tanh().sum(), &[x.clone(), wb.clone()]);
    for mode in [PadMode::Zero, PadMode::Reflect] {
        assert_grad("pad", |v| v[0].pad2d(2, mode).tanh().sum(), &[x.clone()]);
    }
    let mh = LinearMap1d::new(SparseRows::new(6, vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0), (5, -0.3)]]));
    let mw = LinearMap1d::new(SparseRows::new(5, vec![vec![(4, 2.0)], vec![(0, 1.0), (1, 1.0)], vec![(3, 0.1)]]));
    assert_grad("sep_linear", |v| v[0].sep_linear(&mh, &mw).tanh().sum(), &[x.clone()]);
}

/// Gradient-of-gradient through conv: `d/dw ‖∂(Σ tanh(conv(x, w)))/∂x‖²`.
#[test]
fn double_backward_through_conv() {
    let x = wave(&[2, 2, 6, 6], 0.4);
    let w = wave(&[1, 3, 2, 3, 3], 0.6).map(|v| 0.5 * v);
    let f = |v: &[Var]| {
        let y = v[0].pad2d(1, PadMode::Reflect).conv2d(&v[1]).tanh().sum();
        let gx = grad(&y, &[&v[0]], true)[0].clone().unwrap();
        gx.square().sum()
    };
    assert_grad("double backward", f, &[x, w]);
}

#[test]
fn double_backward_through_wgrad_and_matmul() {
    let x = wave(&[1, 2, 5, 5], 0.1);
    let w = wave(&[1, 2, 2, 3, 3], 0.2).map(|v| 0.4 * v);
    let f = |v: &[Var]| {
        let y = v[0].conv2d(&v[1]).sigmoid().sum();
        let gw = grad(&y, &[&v[1]], true)[0].clone().unwrap();
        gw.tanh().sum()
    };
    assert_grad("wgrad double backward", f, &[x, w]);
    let a = wave(&[2, 3], 0.3);
    let b = wave(&[3, 2], 0.9);
    let g = |v: &[Var]| {
        let y = v[0].matmul(&v[1]).softplus().sum();
        let ga = grad(&y, &[&v[0]], true)[0].clone().unwrap();
        ga.square().sum()
    };
    assert_grad("matmul double backward", g, &[a, b]);
}

#[test]
fn unused_input_has_no_gradient() {
    let a = Var::leaf(Tensor::scalar(1.0));
    let b = Var::leaf(Tensor::scalar(2.0));
    let y = a.square();
    let g = grad(&y, &[&a, &b], false);
    assert_eq!(g[0].as_ref().unwrap().item(), 2.0);
    assert!(g[1].is_none());
}

#[test]
fn first_order_grads_are_constants_without_create_graph() {
    let a = Var::leaf(Tensor::scalar(3.0));
    let g = grad(&a.square(), &[&a], false)[0].clone().unwrap();
    assert!(!g.requires_grad());
}

proptest! {
    #[test]
    fn sum_to_is_adjoint_of_broadcast(vals in prop::collection::vec(-3.0f64..3.0, 12), g in prop::collection::vec(-3.0f64..3.0, 36)) {
        let x = Tensor::new(&[1, 4, 3], vals);
        let g = Tensor::new(&[3, 4, 3], g);
        let lhs = x.broadcast_to(&[3, 4, 3]).zip_map(&g, |a, b| a * b).sum();
        let rhs = x.zip_map(&g.sum_to(&[1, 4, 3]), |a, b| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}
