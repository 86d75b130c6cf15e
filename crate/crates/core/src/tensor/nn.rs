//! Parameter storage and the small layer vocabulary used by the model.

use std::sync::Arc;

use ndarray::{Array1, Array4, IxDyn};
use rand::Rng;

use super::{Arr, Grads, Tape, Var};

/// Handle to a parameter: the owning store's uid plus the slot index.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) idx: usize,
}

struct ParamEntry {
    name: String,
    value: Arc<Arr>,
}

/// Owns all trainable arrays. Readers share `Arc`s; the optimizer is the
/// single writer between forward passes. Stores carry a process-unique id
/// so tapes can tell parameters of different stores apart.
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(0);
        ParamStore {
            uid: NEXT.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId {
            store: self.uid,
            idx: self.entries.len() - 1,
        }
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.uid, "parameter belongs to a different store");
        id.idx
    }

    pub fn value(&self, id: ParamId) -> &Arc<Arr> {
        &self.entries[self.check(id)].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[self.check(id)].name
    }

    pub fn set(&mut self, id: ParamId, value: Arr) {
        let idx = self.check(id);
        assert_eq!(
            self.entries[idx].value.shape(),
            value.shape(),
            "parameter shape is fixed after creation"
        );
        self.entries[idx].value = Arc::new(value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|idx| ParamId {
            store: self.uid,
            idx,
        })
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Dense per-parameter gradients aligned with a [`ParamStore`].
pub struct ParamGrads {
    pub grads: Vec<Option<Arr>>,
}

impl ParamGrads {
    pub fn zeros(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    /// Collect parameter gradients from one tape's backward sweep.
    pub fn from_backward(store: &ParamStore, grads: &Grads) -> Self {
        let mut out = Self::zeros(store);
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                out.grads[id.idx] = Some(g.clone());
            }
        }
        out
    }

    /// Accumulate another gradient set (fixed order keeps sums reproducible).
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => *acc += g,
                (None, Some(g)) => *slot = Some(g.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= s;
        }
    }
}

/// Xavier-uniform fan-based initialization.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Arr {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Fully connected layer `y = x W^T (+ b)` on row-major query matrices.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier(rng, in_dim, out_dim, &[out_dim, in_dim]),
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.b"),
                Array1::<f64>::zeros(out_dim).into_dyn(),
            )
        });
        Linear { w, b }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let wt = t.transpose(w);
        let y = t.matmul(x, wt);
        match self.b {
            Some(b) => t.add_vec_to_rows(y, t.param(store, b)),
            None => y,
        }
    }
}

/// 3x3 / 1x1 convolution layer.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let w = store.add(
            format!("{name}.w"),
            xavier(rng, fan_in, fan_out, &[out_ch, in_ch, k, k]),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Array1::<f64>::zeros(out_ch).into_dyn()));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    /// Same-shape conv head starting exactly at zero (used for flow fields).
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Array4::<f64>::zeros((out_ch, in_ch, k, k)).into_dyn(),
        );
        let b = Some(store.add(format!("{name}.b"), Array1::<f64>::zeros(out_ch).into_dyn()));
        Conv2d {
            w,
            b,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = self.b.map(|b| t.param(store, b));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group_size: usize) -> Self {
        assert!(channels % group_size == 0);
        GroupNorm {
            gamma: store.add(format!("{name}.g"), Array1::<f64>::ones(channels).into_dyn()),
            beta: store.add(format!("{name}.b"), Array1::<f64>::zeros(channels).into_dyn()),
            groups: channels / group_size,
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        t.group_norm(
            x,
            t.param(store, self.gamma),
            t.param(store, self.beta),
            self.groups,
            1e-5,
        )
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.g"), Array1::<f64>::ones(dim).into_dyn()),
            beta: store.add(format!("{name}.b"), Array1::<f64>::zeros(dim).into_dyn()),
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        t.layer_norm(
            x,
            t.param(store, self.gamma),
            t.param(store, self.beta),
            1e-5,
        )
    }
}

