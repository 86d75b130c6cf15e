//! Decoupled feature decoder: semantic-FPN-style fusion into a scene map
//! `F_s` and a part map `F_p` at stride-4 resolution, with optional
//! coordinate embeddings and flow-aligned upsampling on the part path,
//! plus the initial 1x1 mask heads that also seed the queries.

use ndarray::Array3;
use rand::Rng;

use crate::encoder::MultiScaleFeatures;
use crate::tensor::{Conv2d, ParamStore, Tape, Var};

/// Query/mask block boundaries: thing proposals, one row per stuff class,
/// one row per part class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub n_thing: usize,
    pub n_stuff: usize,
    pub n_part: usize,
}

impl Blocks {
    pub fn total(&self) -> usize {
        self.n_thing + self.n_stuff + self.n_part
    }

    pub fn thing_range(&self) -> std::ops::Range<usize> {
        0..self.n_thing
    }

    pub fn stuff_range(&self) -> std::ops::Range<usize> {
        self.n_thing..self.n_thing + self.n_stuff
    }

    pub fn part_range(&self) -> std::ops::Range<usize> {
        self.n_thing + self.n_stuff..self.total()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub positional_encoding: bool,
    pub aligned: bool,
}

/// Flow-aligned upsampler: predicts a 2-channel offset field from the
/// concatenated (upsampled low, high-reference) maps, then warps the
/// upsampled map. The head starts at zero so the warm start equals plain
/// bilinear upsampling bit-for-bit.
pub struct FlowAlign {
    head: Conv2d,
}

impl FlowAlign {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        FlowAlign {
            head: Conv2d::new_zeroed(store, name, 2 * d, 2, 3),
        }
    }

    /// Upsamples `low` to the reference resolution and samples it at the
    /// predicted offsets.
    pub fn warp_up(&self, t: &Tape, store: &ParamStore, low: Var, reference: Var) -> Var {
        let ref_shape = t.shape(reference);
        let (h, w) = (ref_shape[1], ref_shape[2]);
        let up = t.bilinear_resize(low, h, w);
        let flow = self.head.forward(t, store, t.concat(0, &[up, reference]));
        t.grid_warp(up, flow)
    }
}

/// One fusion path (scene or part). Each level is projected to `d`,
/// optionally augmented with a normalized coordinate embedding, upsampled
/// to stride 4 and summed.
pub struct FeatureDecoder {
    projs: Vec<Conv2d>,
    pos_projs: Vec<Conv2d>,
    flows: Vec<FlowAlign>,
    pub cfg: DecoderConfig,
    /// Test hook: translates the coordinate grid (no effect when the
    /// positional embedding is disabled).
    pub grid_shift: (f64, f64),
}

impl FeatureDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: DecoderConfig,
        c_neck: usize,
    ) -> Self {
        let projs = (0..4)
            .map(|i| Conv2d::new(store, rng, &format!("{name}.proj{i}"), c_neck, cfg.d, 1, 1, true))
            .collect();
        let pos_projs = (0..4)
            .map(|i| {
                Conv2d::new(store, rng, &format!("{name}.pos{i}"), cfg.d + 2, cfg.d, 1, 1, true)
            })
            .collect();
        let flows = (1..4)
            .map(|i| FlowAlign::new(store, &format!("{name}.flow{i}"), cfg.d))
            .collect();
        FeatureDecoder {
            projs,
            pos_projs,
            flows,
            cfg,
            grid_shift: (0.0, 0.0),
        }
    }

    /// Fuses a pyramid into a single `[d, H/4, W/4]` map.
    pub fn forward(&self, t: &Tape, store: &ParamStore, ms: &MultiScaleFeatures) -> Var {
        let (h4, w4) = ms.sizes[0];
        let mut processed = Vec::with_capacity(4);
        for (i, &lvl) in ms.levels.iter().enumerate() {
            let mut x = self.projs[i].forward(t, store, lvl);
            if self.cfg.positional_encoding {
                let (h, w) = ms.sizes[i];
                let grid = t.constant(coord_grid(h, w, self.grid_shift).into_dyn());
                x = self.pos_projs[i].forward(t, store, t.concat(0, &[x, grid]));
            }
            processed.push(x);
        }
        let reference = processed[0];
        let mut acc = processed[0];
        for i in 1..4 {
            let up = if self.cfg.aligned {
                self.flows[i - 1].warp_up(t, store, processed[i], reference)
            } else {
                t.bilinear_resize(processed[i], h4, w4)
            };
            acc = t.add(acc, up);
        }
        acc
    }
}

/// Normalized (y, x) coordinates in [-1, 1], one channel each.
pub fn coord_grid(h: usize, w: usize, shift: (f64, f64)) -> Array3<f64> {
    Array3::from_shape_fn((2, h, w), |(c, y, x)| {
        let (n, i) = if c == 0 { (h, y) } else { (w, x) };
        let base = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
        base + if c == 0 { shift.0 } else { shift.1 }
    })
}

/// The initial 1x1 mask heads. Their weight rows double as the initial
/// queries, so query `k` starts tied to the head that produced its mask.
pub struct InitialHeads {
    pub w_thing: crate::tensor::ParamId,
    pub b_thing: crate::tensor::ParamId,
    pub w_stuff: crate::tensor::ParamId,
    pub b_stuff: crate::tensor::ParamId,
    pub w_part: crate::tensor::ParamId,
    pub b_part: crate::tensor::ParamId,
    pub blocks: Blocks,
    pub d: usize,
}

/// Initial queries and mask logits (masks flattened to `[K, H'*W']`).
pub struct InitialPrediction {
    pub queries: Var,
    pub masks: Var,
    pub feat_hw: (usize, usize),
}

impl InitialHeads {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d: usize,
        blocks: Blocks,
    ) -> Self {
        use crate::tensor::ParamId;
        let mut mk = |name: &str, rows: usize| -> (ParamId, ParamId) {
            let w = store.add(
                format!("init.{name}.w"),
                crate::tensor::xavier(rng, d, rows, &[rows, d]),
            );
            let b = store.add(
                format!("init.{name}.b"),
                ndarray::Array1::<f64>::zeros(rows).into_dyn(),
            );
            (w, b)
        };
        let (w_thing, b_thing) = mk("thing", blocks.n_thing);
        let (w_stuff, b_stuff) = mk("stuff", blocks.n_stuff);
        let (w_part, b_part) = mk("part", blocks.n_part);
        InitialHeads {
            w_thing,
            b_thing,
            w_stuff,
            b_stuff,
            w_part,
            b_part,
            blocks,
            d,
        }
    }

    /// Applies the three heads (thing/stuff on `F_s`, part on `F_p`) and
    /// assembles the unified query matrix from the head weights.
    pub fn forward(&self, t: &Tape, store: &ParamStore, f_s: Var, f_p: Var) -> InitialPrediction {
        let s_shape = t.shape(f_s);
        let (d, h, w) = (s_shape[0], s_shape[1], s_shape[2]);
        debug_assert_eq!(d, self.d);
        let fs2 = t.reshape(f_s, &[d, h * w]);
        let fp2 = t.reshape(f_p, &[d, h * w]);
        let head = |wid, bid, f2| {
            let wv = t.param(store, wid);
            let bv = t.param(store, bid);
            t.add_vec_to_cols(t.matmul(wv, f2), bv)
        };
        let m_thing = head(self.w_thing, self.b_thing, fs2);
        let m_stuff = head(self.w_stuff, self.b_stuff, fs2);
        let m_part = head(self.w_part, self.b_part, fp2);
        let queries = t.concat(
            0,
            &[
                t.param(store, self.w_thing),
                t.param(store, self.w_stuff),
                t.param(store, self.w_part),
            ],
        );
        let masks = t.concat(0, &[m_thing, m_stuff, m_part]);
        InitialPrediction {
            queries,
            masks,
            feat_hw: (h, w),
        }
    }
}
