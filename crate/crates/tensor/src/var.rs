//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Every backward rule is written in terms of differentiable [`Var`] ops, so a
//! gradient computed with `create_graph = true` can itself be differentiated.
//! That is what second-order regularisers (gradient penalties, Jacobian norms)
//! need.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn recording() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// `(parents, needs, output, grad_output) -> per-parent gradient`.
pub(crate) type BackwardFn = Box<dyn Fn(&[Var], &[bool], &Var, &Var) -> Vec<Option<Var>>>;

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: false, parents: vec![], backward: None }))
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, parents: vec![], backward: None }))
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let track = recording() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Var::constant(value);
        }
        Var(Rc::new(Node { id: next_id(), value, requires_grad: true, parents, backward: Some(backward) }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// Returns `None` for inputs `output` does not depend on. With `create_graph`
/// the returned gradients are themselves differentiable.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    if !output.requires_grad() {
        return vec![None; inputs.len()];
    }
    let wanted: HashSet<u64> = inputs.iter().map(|v| v.id()).collect();

    // Post-order DFS over the tracked subgraph.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
    visited.insert(output.id());
    while let Some((node, child)) = stack.pop() {
        if child < node.0.parents.len() {
            let p = node.0.parents[child].clone();
            stack.push((node, child + 1));
            if p.requires_grad() && visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    // A node needs a gradient if it is a requested input or leads to one.
    let mut needed: HashSet<u64> = HashSet::new();
    for v in &order {
        if wanted.contains(&v.id()) || v.0.parents.iter().any(|p| needed.contains(&p.id())) {
            needed.insert(v.id());
        }
    }

    let run = || {
        let mut grads: HashMap<u64, Var> = HashMap::new();
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
        for node in order.iter().rev() {
            let Some(backward) = &node.0.backward else { continue };
            if !needed.contains(&node.id()) {
                continue;
            }
            let g = if wanted.contains(&node.id()) {
                grads.get(&node.id()).cloned()
            } else {
                grads.remove(&node.id())
            };
            let Some(g) = g else { continue };
            let needs: Vec<bool> = node.0.parents.iter().map(|p| needed.contains(&p.id())).collect();
            let pgrads = backward(&node.0.parents, &needs, node, &g);
            debug_assert_eq!(pgrads.len(), node.0.parents.len());
            for ((p, pg), need) in node.0.parents.iter().zip(pgrads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                let acc = match grads.remove(&p.id()) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
        inputs.iter().map(|v| grads.get(&v.id()).cloned()).collect::<Vec<_>>()
    };

    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}
