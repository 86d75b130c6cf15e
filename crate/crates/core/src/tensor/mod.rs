//! Reverse-mode automatic differentiation on `f64` ndarrays.
//!
//! Every forward pass builds a fresh [`Tape`]; batch items build independent
//! tapes so they can run on separate threads without shared mutable state.
//! All arithmetic is 64-bit and the execution order is fixed, which keeps
//! results bit-reproducible regardless of thread count.

mod check;
mod nn;
mod ops;

pub use check::{finite_diff_grad, max_rel_err, rel_err};
pub use ops::resize_bilinear_arr;
pub use nn::{xavier, Conv2d, GroupNorm, LayerNorm, Linear, ParamGrads, ParamId, ParamStore};

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

pub type Arr = ndarray::ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Maps an upstream gradient to gradients for each parent, in parent order.
type BackFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

struct Node {
    value: Arc<Arr>,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

/// A single-use computation graph. Not `Sync`; one tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    // one leaf per parameter per tape, so repeated layer calls share a node
    param_vars: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub(crate) fn push(&self, value: Arr, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(to_std(value)),
            parents,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Arr) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf whose gradient is never read; used for fixed inputs and targets.
    pub fn constant(&self, value: Arr) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf backed by a parameter from `store`; memoized per tape so every
    /// use of a parameter shares one node (and one gradient slot).
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let value = store.value(id).clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: vec![],
            back: None,
        });
        let var = Var(nodes.len() - 1);
        self.param_vars.borrow_mut().insert(id, var);
        var
    }

    pub fn value(&self, v: Var) -> Arc<Arr> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar var");
        *val.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar `root`. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Arr::ones(nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(gi) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.back {
                Some(back) => {
                    let parent_grads = back(&gi);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        debug_assert!(p.0 < i, "tape must be topologically ordered");
                        match &mut grads[p.0] {
                            Some(acc) => *acc += &pg,
                            // normalize so closures always see standard layout
                            slot => *slot = Some(to_std(pg)),
                        }
                    }
                }
                // leaf: keep its gradient readable
                None => grads[i] = Some(gi),
            }
        }
        let param_vars = self.param_vars.borrow().clone();
        Grads { grads, param_vars }
    }
}

/// Result of a backward sweep. Holds gradients for leaves only.
pub struct Grads {
    grads: Vec<Option<Arr>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter registered through [`Tape::param`].
    pub fn param(&self, id: ParamId) -> Option<&Arr> {
        self.param_vars.get(&id).and_then(|v| self.get(*v))
    }
}

/// Scalar shape helper used by ops that reduce to one element.
pub(crate) fn scalar_arr(x: f64) -> Arr {
    Arr::from_elem(ndarray::IxDyn(&[1]), x)
}

/// Copies into standard (row-major contiguous) layout when necessary.
pub(crate) fn to_std(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
