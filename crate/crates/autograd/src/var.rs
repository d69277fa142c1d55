use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Shape, Tensor};
use crate::AutogradError;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Run `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

/// A recorded operation. `backward` must be written in terms of [`Var`] ops so
/// that gradients are themselves differentiable.
pub(crate) trait Op {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> &[Var];
    fn backward(&self, grad: &Var) -> Vec<Option<Var>>;
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
}

/// Graph handle around a tensor value.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op.as_ref().map(|o| o.name()))
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
        }))
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn parameter(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor, op: impl Op + 'static) -> Self {
        let track = is_grad_enabled() && op.inputs().iter().any(|v| v.requires_grad());
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: track,
            op: if track { Some(Box::new(op)) } else { None },
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> Shape {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }
}

/// Gradients of `output` (summed if not scalar) with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves part of the
/// graph and can be differentiated again.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>, AutogradError> {
    grad_with_seed(output, Tensor::ones(output.shape()), wrt, create_graph)
}

pub fn grad_with_seed(
    output: &Var,
    seed: Tensor,
    wrt: &[Var],
    create_graph: bool,
) -> Result<Vec<Option<Var>>, AutogradError> {
    if seed.shape() != output.shape() {
        return Err(AutogradError::SeedShape {
            expected: output.shape(),
            actual: seed.shape(),
        });
    }
    if create_graph && !is_grad_enabled() {
        return Err(AutogradError::HigherOrderUnavailable);
    }
    if !output.requires_grad() {
        return Ok(vec![None; wrt.len()]);
    }

    // Iterative post-order DFS gives a topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = &v.0.op {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }

    let keep: HashSet<u64> = wrt.iter().map(Var::id).collect();
    let _mode = GradModeGuard::new(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(seed));

    for node in order.iter().rev() {
        let Some(op) = &node.0.op else { continue };
        let g = if keep.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        let Some(g) = g else { continue };
        let input_grads = op.backward(&g);
        debug_assert_eq!(input_grads.len(), op.inputs().len(), "{}", op.name());
        for (input, ig) in op.inputs().iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(ig.shape(), input.shape(), "gradient shape from {}", op.name());
            let merged = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(input.id(), merged);
        }
    }

    Ok(wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect())
}
