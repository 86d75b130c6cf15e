//! Cascaded query reasoning: per stage, group query features from the
//! previous masks, refine queries with a gated dynamic convolution and
//! joint multi-head self-attention, then re-predict masks and classes.

use rand::Rng;

use crate::decoder::{Blocks, InitialPrediction};
use crate::tensor::{LayerNorm, Linear, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningConfig {
    pub d: usize,
    pub stages: usize,
    pub heads: usize,
    pub use_dynamic_conv: bool,
    pub use_self_attention: bool,
    /// Class-slot counts per block, excluding the no-object slot.
    pub n_thing_classes: usize,
    pub n_stuff_classes: usize,
    pub n_part_classes: usize,
}

/// One stage's outputs on the tape. Masks are `[K, H'*W']` logits at the
/// decoder feature resolution; class logits carry one extra no-object slot.
pub struct StageVars {
    pub queries: Var,
    pub masks: Var,
    pub cls_thing: Var,
    pub cls_stuff: Var,
    pub cls_part: Var,
}

/// Mask-weighted feature pooling: `X[k] = sum_uv sigmoid(M[k]) * F(.,u,v)`,
/// thing/stuff rows against the scene map, part rows against the part map.
pub fn group_query_features(
    t: &Tape,
    masks: Var,
    f_s2: Var,
    f_p2: Var,
    blocks: Blocks,
) -> Var {
    let sig = t.sigmoid(masks);
    let ts_rows = blocks.n_thing + blocks.n_stuff;
    let sig_ts = t.narrow(sig, 0, 0, ts_rows);
    let sig_pt = t.narrow(sig, 0, ts_rows, blocks.n_part);
    let x_ts = t.matmul(sig_ts, t.transpose(f_s2));
    let x_pt = t.matmul(sig_pt, t.transpose(f_p2));
    t.concat(0, &[x_ts, x_pt])
}

/// Gated dynamic convolution. Gates are `sigmoid(LN(FC(X)))`; the gated sum
/// of projected query features and previous queries passes through an output
/// projection with layer normalization.
pub struct DynamicConv {
    fc_gate_x: Linear,
    ln_gate_x: LayerNorm,
    fc_gate_q: Linear,
    ln_gate_q: LayerNorm,
    proj_x: Linear,
    proj_q: Linear,
    out: Linear,
    ln_out: LayerNorm,
}

impl DynamicConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        DynamicConv {
            fc_gate_x: Linear::new(store, rng, &format!("{name}.gx"), d, d, true),
            ln_gate_x: LayerNorm::new(store, &format!("{name}.gx_ln"), d),
            fc_gate_q: Linear::new(store, rng, &format!("{name}.gq"), d, d, true),
            ln_gate_q: LayerNorm::new(store, &format!("{name}.gq_ln"), d),
            proj_x: Linear::new(store, rng, &format!("{name}.px"), d, d, true),
            proj_q: Linear::new(store, rng, &format!("{name}.pq"), d, d, true),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, true),
            ln_out: LayerNorm::new(store, &format!("{name}.out_ln"), d),
        }
    }

    /// The gated combination itself:
    /// `Gate_x(X) ⊙ X' + Gate_q(X) ⊙ Q'` (row-wise, queries independent).
    pub fn gated_combine(&self, t: &Tape, store: &ParamStore, x: Var, q_prev: Var) -> Var {
        let gate_x = t.sigmoid(self.ln_gate_x.forward(t, store, self.fc_gate_x.forward(t, store, x)));
        let gate_q = t.sigmoid(self.ln_gate_q.forward(t, store, self.fc_gate_q.forward(t, store, x)));
        let xp = self.proj_x.forward(t, store, x);
        let qp = self.proj_q.forward(t, store, q_prev);
        t.add(t.mul(gate_x, xp), t.mul(gate_q, qp))
    }

    pub fn update(&self, t: &Tape, store: &ParamStore, x: Var, q_prev: Var) -> Var {
        let s = self.gated_combine(t, store, x, q_prev);
        self.ln_out.forward(t, store, self.out.forward(t, store, s))
    }
}

/// Joint self-attention over all thing+stuff+part rows with a feed-forward
/// block, pre-residual layer normalization on both sublayers, and no
/// positional encoding on queries.
pub struct SelfAttention {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    heads: usize,
    d: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0, "attention heads must divide d");
        SelfAttention {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, 2 * d, true),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), 2 * d, d, true),
            heads,
            d,
        }
    }

    fn attend(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let q = self.wq.forward(t, store, x);
        let k = self.wk.forward(t, store, x);
        let v = self.wv.forward(t, store, x);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qs = t.narrow(q, 1, h * dh, dh);
            let ks = t.narrow(k, 1, h * dh, dh);
            let vs = t.narrow(v, 1, h * dh, dh);
            let scores = t.mul_scalar(t.matmul(qs, t.transpose(ks)), scale);
            let attn = t.softmax_rows(scores);
            head_outs.push(t.matmul(attn, vs));
        }
        let concat = t.concat(1, &head_outs);
        self.wo.forward(t, store, concat)
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let a = t.add(x, self.attend(t, store, self.ln1.forward(t, store, x)));
        let hidden = t.relu(self.ffn1.forward(t, store, self.ln2.forward(t, store, a)));
        t.add(a, self.ffn2.forward(t, store, hidden))
    }
}

/// Per-block classification head: 2-layer FFN with a no-object slot.
struct ClsHead {
    l1: Linear,
    l2: Linear,
}

impl ClsHead {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, n_classes: usize) -> Self {
        ClsHead {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, 2 * d, true),
            l2: Linear::new(store, rng, &format!("{name}.l2"), 2 * d, n_classes + 1, true),
        }
    }

    fn forward(&self, t: &Tape, store: &ParamStore, q: Var) -> Var {
        self.l2.forward(t, store, t.relu(self.l1.forward(t, store, q)))
    }
}

pub struct ReasonStage {
    dynamic: DynamicConv,
    attention: SelfAttention,
    // bias-free so a zero query row yields all-zero mask logits
    mask_ffn1: Linear,
    mask_ffn2: Linear,
    cls_thing: ClsHead,
    cls_stuff: ClsHead,
    cls_part: ClsHead,
}

impl ReasonStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ReasoningConfig) -> Self {
        ReasonStage {
            dynamic: DynamicConv::new(store, rng, &format!("{name}.dc"), cfg.d),
            attention: SelfAttention::new(store, rng, &format!("{name}.sa"), cfg.d, cfg.heads),
            mask_ffn1: Linear::new(store, rng, &format!("{name}.mask1"), cfg.d, cfg.d, false),
            mask_ffn2: Linear::new(store, rng, &format!("{name}.mask2"), cfg.d, cfg.d, false),
            cls_thing: ClsHead::new(store, rng, &format!("{name}.cls_th"), cfg.d, cfg.n_thing_classes),
            cls_stuff: ClsHead::new(store, rng, &format!("{name}.cls_st"), cfg.d, cfg.n_stuff_classes),
            cls_part: ClsHead::new(store, rng, &format!("{name}.cls_pt"), cfg.d, cfg.n_part_classes),
        }
    }

    /// Mask and class prediction from refined queries: mask logits are the
    /// dot product of the mask-FFN output with the per-pixel features.
    pub fn predict(
        &self,
        t: &Tape,
        store: &ParamStore,
        q: Var,
        f_s2: Var,
        f_p2: Var,
        blocks: Blocks,
    ) -> StageVars {
        let qm = self
            .mask_ffn2
            .forward(t, store, t.relu(self.mask_ffn1.forward(t, store, q)));
        let ts_rows = blocks.n_thing + blocks.n_stuff;
        let qm_ts = t.narrow(qm, 0, 0, ts_rows);
        let qm_pt = t.narrow(qm, 0, ts_rows, blocks.n_part);
        let m_ts = t.matmul(qm_ts, f_s2);
        let m_pt = t.matmul(qm_pt, f_p2);
        let masks = t.concat(0, &[m_ts, m_pt]);
        let q_th = t.narrow(q, 0, 0, blocks.n_thing);
        let q_st = t.narrow(q, 0, blocks.n_thing, blocks.n_stuff);
        let q_pt = t.narrow(q, 0, ts_rows, blocks.n_part);
        StageVars {
            queries: q,
            masks,
            cls_thing: self.cls_thing.forward(t, store, q_th),
            cls_stuff: self.cls_stuff.forward(t, store, q_st),
            cls_part: self.cls_part.forward(t, store, q_pt),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &Tape,
        store: &ParamStore,
        q_prev: Var,
        m_prev: Var,
        f_s2: Var,
        f_p2: Var,
        blocks: Blocks,
        cfg: &ReasoningConfig,
    ) -> StageVars {
        let x = group_query_features(t, m_prev, f_s2, f_p2, blocks);
        let mut q = q_prev;
        if cfg.use_dynamic_conv {
            q = self.dynamic.update(t, store, x, q);
        }
        if cfg.use_self_attention {
            q = self.attention.forward(t, store, q);
        }
        self.predict(t, store, q, f_s2, f_p2, blocks)
    }
}

/// The full cascade; all stage outputs are returned for deep supervision.
pub struct QueryReasoner {
    pub stages: Vec<ReasonStage>,
    pub cfg: ReasoningConfig,
}

impl QueryReasoner {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ReasoningConfig) -> Self {
        assert!(cfg.stages >= 1);
        let stages = (0..cfg.stages)
            .map(|i| ReasonStage::new(store, rng, &format!("stage{i}"), &cfg))
            .collect();
        QueryReasoner { stages, cfg }
    }

    /// Runs all stages from the initial prediction, threading `(Q, M)`.
    pub fn run(
        &self,
        t: &Tape,
        store: &ParamStore,
        init: &InitialPrediction,
        f_s: Var,
        f_p: Var,
        blocks: Blocks,
    ) -> Vec<StageVars> {
        let (h, w) = init.feat_hw;
        let d = self.cfg.d;
        let f_s2 = t.reshape(f_s, &[d, h * w]);
        let f_p2 = t.reshape(f_p, &[d, h * w]);
        let mut q = init.queries;
        let mut m = init.masks;
        let mut outs = Vec::with_capacity(self.cfg.stages);
        for stage in &self.stages {
            let out = stage.forward(t, store, q, m, f_s2, f_p2, blocks, &self.cfg);
            q = out.queries;
            m = out.masks;
            outs.push(out);
        }
        outs
    }
}
