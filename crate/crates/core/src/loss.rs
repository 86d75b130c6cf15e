//! Ground-truth assignment and the deep-supervised joint loss: Hungarian
//! matching for thing proposals, fixed class-index assignment for stuff and
//! part rows, focal + dice mask terms, and focal classification with a
//! down-weighted no-object target.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::decoder::Blocks;
use crate::error::{Error, Result};
use crate::hungarian::hungarian_match;
use crate::model::ForwardOutputs;
use crate::raster::PanopticPartMap;
use crate::taxonomy::{Taxonomy, VOID};
use crate::tensor::{Arr, Tape, Var};

pub const PROB_EPS: f64 = 1e-6;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_part: f64,
    pub lambda_thing: f64,
    pub lambda_stuff: f64,
    pub lambda_cls: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Scale on the classification focal term of rows whose target is the
    /// no-object slot.
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_part: 1.0,
            lambda_thing: 1.0,
            lambda_stuff: 1.0,
            lambda_cls: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.lambda_part,
            self.lambda_thing,
            self.lambda_stuff,
            self.lambda_cls,
            self.focal_alpha,
            self.focal_gamma,
            self.no_object_weight,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One ground-truth thing segment at input resolution.
#[derive(Debug, Clone)]
pub struct GtThing {
    /// Index into the taxonomy's thing-class list.
    pub class_index: usize,
    pub mask: Array1<f64>,
}

/// Per-image targets: thing segments plus per-class binary masks for stuff
/// and parts (absent classes are `None` and skip their mask loss).
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub things: Vec<GtThing>,
    pub stuff_masks: Vec<Option<Array1<f64>>>,
    pub part_masks: Vec<Option<Array1<f64>>>,
    pub hw: (usize, usize),
}

/// Decomposes an annotation into flat training targets.
pub fn prepare_gt(map: &PanopticPartMap, tax: &Taxonomy) -> GroundTruth {
    let (h, w) = map.dims();
    let n = h * w;
    let mut thing_keys: Vec<(u16, u16)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let c = map.scene[[y, x]];
            let i = map.instance[[y, x]];
            if i > 0 && tax.is_thing(c) && !thing_keys.contains(&(c, i)) {
                thing_keys.push((c, i));
            }
        }
    }
    thing_keys.sort_unstable();
    let mut things = Vec::with_capacity(thing_keys.len());
    for (c, i) in thing_keys {
        let mut mask = Array1::<f64>::zeros(n);
        for y in 0..h {
            for x in 0..w {
                if map.scene[[y, x]] == c && map.instance[[y, x]] == i {
                    mask[y * w + x] = 1.0;
                }
            }
        }
        things.push(GtThing {
            class_index: tax.thing_index(c).expect("thing class in taxonomy"),
            mask,
        });
    }
    let stuff_masks = tax
        .stuff_classes()
        .iter()
        .map(|&c| {
            let mut mask = Array1::<f64>::zeros(n);
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    if map.scene[[y, x]] == c && map.instance[[y, x]] == 0 {
                        mask[y * w + x] = 1.0;
                        any = true;
                    }
                }
            }
            any.then_some(mask)
        })
        .collect();
    let part_masks = tax
        .part_classes()
        .iter()
        .map(|&p| {
            let mut mask = Array1::<f64>::zeros(n);
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    if map.part[[y, x]] == p && map.part[[y, x]] != VOID {
                        mask[y * w + x] = 1.0;
                        any = true;
                    }
                }
            }
            any.then_some(mask)
        })
        .collect();
    GroundTruth {
        things,
        stuff_masks,
        part_masks,
        hw: (h, w),
    }
}

// ---- scalar reference forms (used for matching costs and oracles) ----

/// Focal loss of a single probability against a binary target.
pub fn focal_scalar(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Dice loss between sigmoid probabilities and a binary mask
/// (squared-probability denominator).
pub fn dice_scalar(probs: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut psq = 0.0;
    let mut gsq = 0.0;
    for (&p, &g) in probs.iter().zip(target) {
        inter += p * g;
        psq += p * p;
        gsq += g * g;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (psq + gsq + DICE_EPS)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean focal of a sigmoid class-logit row against a one-hot target.
fn cls_focal_row(logits: &[f64], target_slot: usize, w: &LossWeights) -> f64 {
    let mut acc = 0.0;
    for (s, &z) in logits.iter().enumerate() {
        acc += focal_scalar(sigmoid(z), s == target_slot, w.focal_alpha, w.focal_gamma);
    }
    acc / logits.len() as f64
}

/// Thing-block matching cost on the (detached) full-resolution mask logits
/// and class logits of one stage:
/// `cost(k, j) = l_cls * focal_cls + l_thing * (focal_mask + dice)`.
/// With `cls` absent (initial heads) only the mask terms contribute.
pub fn matching_cost(
    thing_mask_logits: &Array2<f64>,
    cls_thing: Option<&Array2<f64>>,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Array2<f64> {
    let k = thing_mask_logits.nrows();
    let m = gt.things.len();
    let hw = thing_mask_logits.ncols();
    let mut cost = Array2::<f64>::zeros((k, m));
    for row in 0..k {
        let logits = thing_mask_logits.row(row);
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let lnp: Vec<f64> = probs
            .iter()
            .map(|&p| p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
            .collect();
        let ln1p: Vec<f64> = probs
            .iter()
            .map(|&p| (1.0 - p.clamp(PROB_EPS, 1.0 - PROB_EPS)).ln())
            .collect();
        for (j, gt_thing) in gt.things.iter().enumerate() {
            let g = &gt_thing.mask;
            let mut focal = 0.0;
            for px in 0..hw {
                let p = probs[px];
                focal += if g[px] > 0.5 {
                    -w.focal_alpha * (1.0 - p).powf(w.focal_gamma) * lnp[px]
                } else {
                    -(1.0 - w.focal_alpha) * p.powf(w.focal_gamma) * ln1p[px]
                };
            }
            focal /= hw as f64;
            let dice = dice_scalar(&probs, g.as_slice().unwrap());
            let mut c = w.lambda_thing * (focal + dice);
            if let Some(cls) = cls_thing {
                c += w.lambda_cls
                    * cls_focal_row(cls.row(row).to_slice().unwrap(), gt_thing.class_index, w);
            }
            cost[[row, j]] = c;
        }
    }
    cost
}

// ---- tape-level loss terms ----

/// Mean elementwise focal loss of sigmoid logits against a binary target.
pub fn focal_loss_t(t: &Tape, logits: Var, target: &Arr, alpha: f64, gamma: f64) -> Var {
    t.mean(focal_elementwise(t, logits, target, alpha, gamma))
}

/// Elementwise focal matrix (no reduction).
fn focal_elementwise(t: &Tape, logits: Var, target: &Arr, alpha: f64, gamma: f64) -> Var {
    let p = t.clamp(t.sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS);
    let one_minus_p = t.add_scalar(t.neg(p), 1.0);
    let pos = t.mul_scalar(t.mul(t.pow_const(one_minus_p, gamma), t.ln(p)), -alpha);
    let neg = t.mul_scalar(
        t.mul(t.pow_const(p, gamma), t.ln(one_minus_p)),
        -(1.0 - alpha),
    );
    let inv = target.mapv(|y| 1.0 - y);
    t.add(t.mul_const(pos, target), t.mul_const(neg, &inv))
}

/// Dice loss of sigmoid logits against a binary target, in `[0, 1]`.
pub fn dice_loss_t(t: &Tape, logits: Var, target: &Arr) -> Var {
    let p = t.sigmoid(logits);
    let inter = t.sum(t.mul_const(p, target));
    let num = t.add_scalar(t.mul_scalar(inter, 2.0), DICE_EPS);
    let gsq = target.iter().map(|&g| g * g).sum::<f64>();
    let den = t.add_scalar(t.sum(t.mul(p, p)), gsq + DICE_EPS);
    t.add_scalar(t.neg(t.div(num, den)), 1.0)
}

/// Per-term loss values (detached) for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub part: f64,
    pub thing: f64,
    pub stuff: f64,
    pub cls: f64,
    pub init: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.part += other.part;
        self.thing += other.thing;
        self.stuff += other.stuff;
        self.cls += other.cls;
        self.init += other.init;
        self.total += other.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.part *= s;
        self.thing *= s;
        self.stuff *= s;
        self.cls *= s;
        self.init *= s;
        self.total *= s;
    }
}

struct BlockMaskLoss {
    term: Option<Var>,
}

/// Mean of (focal + dice) over the given (row, target) pairs.
fn mask_loss_pairs(
    t: &Tape,
    masks: Var,
    pairs: &[(usize, &Array1<f64>)],
    w: &LossWeights,
) -> BlockMaskLoss {
    if pairs.is_empty() {
        return BlockMaskLoss { term: None };
    }
    let rows: Vec<usize> = pairs.iter().map(|&(r, _)| r).collect();
    let gathered = t.gather_rows(masks, &rows);
    let hw = pairs[0].1.len();
    let mut target = Array2::<f64>::zeros((pairs.len(), hw));
    for (i, (_, g)) in pairs.iter().enumerate() {
        target.row_mut(i).assign(*g);
    }
    let target = target.into_dyn();
    // focal: every mask has the same pixel count, so the elementwise mean
    // equals the mean over per-mask means
    let focal = focal_loss_t(t, gathered, &target, w.focal_alpha, w.focal_gamma);
    let mut dice_sum: Option<Var> = None;
    for (i, (_, g)) in pairs.iter().enumerate() {
        let row = t.reshape(t.narrow(gathered, 0, i, 1), &[hw]);
        let d = dice_loss_t(t, row, &(*g).clone().into_dyn());
        dice_sum = Some(match dice_sum {
            None => d,
            Some(acc) => t.add(acc, d),
        });
    }
    let dice_mean = t.mul_scalar(dice_sum.unwrap(), 1.0 / pairs.len() as f64);
    let term = t.add(focal, dice_mean);
    BlockMaskLoss { term: Some(term) }
}

/// Weighted classification focal for one block with fixed or matched
/// targets; `target_slots[r]` is the slot index (last slot = no object).
fn cls_loss_block(
    t: &Tape,
    cls: Var,
    target_slots: &[usize],
    w: &LossWeights,
) -> (Var, f64) {
    let shape = t.shape(cls);
    let (rows, slots) = (shape[0], shape[1]);
    debug_assert_eq!(rows, target_slots.len());
    let no_object = slots - 1;
    let mut target = Array2::<f64>::zeros((rows, slots));
    let mut weights = Array2::<f64>::zeros((rows, slots));
    let mut wsum = 0.0;
    for r in 0..rows {
        target[[r, target_slots[r]]] = 1.0;
        let rw = if target_slots[r] == no_object {
            w.no_object_weight
        } else {
            1.0
        };
        weights.row_mut(r).fill(rw / slots as f64);
        wsum += rw;
    }
    let elem = focal_elementwise(t, cls, &target.into_dyn(), w.focal_alpha, w.focal_gamma);
    let weighted = t.sum(t.mul_const(elem, &weights.into_dyn()));
    (weighted, wsum)
}

/// Upsamples `[K, h*w]` mask logits to the ground-truth resolution.
fn masks_to_full(t: &Tape, masks: Var, feat_hw: (usize, usize), out_hw: (usize, usize)) -> Var {
    let k = t.shape(masks)[0];
    if feat_hw == out_hw {
        return masks;
    }
    let m3 = t.reshape(masks, &[k, feat_hw.0, feat_hw.1]);
    let up = t.bilinear_resize(m3, out_hw.0, out_hw.1);
    t.reshape(up, &[k, out_hw.0 * out_hw.1])
}

struct StageLossInputs {
    masks_full: Var,
    cls: Option<(Var, Var, Var)>,
}

/// The deep-supervised total: per-stage losses (Hungarian matching per
/// stage, fixed assignment for stuff/parts) plus the initial-head loss.
pub fn total_loss(
    t: &Tape,
    out: &ForwardOutputs,
    gt: &GroundTruth,
    w: &LossWeights,
    blocks: Blocks,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    if gt.things.len() > blocks.n_thing {
        return Err(Error::Config(format!(
            "image has {} thing segments but the model has only {} thing queries",
            gt.things.len(),
            blocks.n_thing
        )));
    }
    let mut stages: Vec<StageLossInputs> = Vec::with_capacity(out.stages.len() + 1);
    stages.push(StageLossInputs {
        masks_full: masks_to_full(t, out.init.masks, out.feat_hw, gt.hw),
        cls: None,
    });
    for s in &out.stages {
        stages.push(StageLossInputs {
            masks_full: masks_to_full(t, s.masks, out.feat_hw, gt.hw),
            cls: Some((s.cls_thing, s.cls_stuff, s.cls_part)),
        });
    }

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let add_term = |t_: &Tape, total: &mut Option<Var>, term: Var, lambda: f64| -> f64 {
        let scaled = t_.mul_scalar(term, lambda);
        let v = t_.scalar(scaled);
        *total = Some(match *total {
            None => scaled,
            Some(acc) => t_.add(acc, scaled),
        });
        v
    };

    for (si, stage) in stages.iter().enumerate() {
        let is_init = si == 0;
        let masks = stage.masks_full;
        let mv = t.value(masks);
        let m2 = mv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        if m2.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite mask logits at stage {si}"
            )));
        }
        // things: Hungarian on detached costs
        let thing_logits = m2.slice_axis(Axis(0), (0..blocks.n_thing).into()).to_owned();
        let cls_thing_arr = stage.cls.map(|(c, _, _)| {
            t.value(c)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        });
        let mut thing_slots = vec![usize::MAX; blocks.n_thing];
        let mut thing_pairs: Vec<(usize, &Array1<f64>)> = Vec::new();
        if !gt.things.is_empty() {
            let cost = matching_cost(&thing_logits, cls_thing_arr.as_ref(), gt, w);
            let assignment = hungarian_match(&cost)?;
            for &(row, j) in &assignment.pairs {
                thing_pairs.push((row, &gt.things[j].mask));
                thing_slots[row] = gt.things[j].class_index;
            }
        }
        let thing = mask_loss_pairs(t, masks, &thing_pairs, w);
        if let Some(term) = thing.term {
            let v = add_term(t, &mut total, term, w.lambda_thing);
            if is_init {
                breakdown.init += v;
            } else {
                breakdown.thing += v;
            }
        }

        // stuff/part: fixed class-index assignment, absent classes skipped
        let stuff_pairs: Vec<(usize, &Array1<f64>)> = gt
            .stuff_masks
            .iter()
            .enumerate()
            .filter_map(|(k, m)| m.as_ref().map(|m| (blocks.n_thing + k, m)))
            .collect();
        let stuff = mask_loss_pairs(t, masks, &stuff_pairs, w);
        if let Some(term) = stuff.term {
            let v = add_term(t, &mut total, term, w.lambda_stuff);
            if is_init {
                breakdown.init += v;
            } else {
                breakdown.stuff += v;
            }
        }
        let part_pairs: Vec<(usize, &Array1<f64>)> = gt
            .part_masks
            .iter()
            .enumerate()
            .filter_map(|(k, m)| {
                m.as_ref()
                    .map(|m| (blocks.n_thing + blocks.n_stuff + k, m))
            })
            .collect();
        let part = mask_loss_pairs(t, masks, &part_pairs, w);
        if let Some(term) = part.term {
            let v = add_term(t, &mut total, term, w.lambda_part);
            if is_init {
                breakdown.init += v;
            } else {
                breakdown.part += v;
            }
        }

        // classification: all rows of all blocks, no-object for unmatched
        if let Some((cls_th, cls_st, cls_pt)) = stage.cls {
            let th_slots: Vec<usize> = thing_slots
                .iter()
                .map(|&s| {
                    if s == usize::MAX {
                        t.shape(cls_th)[1] - 1
                    } else {
                        s
                    }
                })
                .collect();
            let st_slots: Vec<usize> = gt
                .stuff_masks
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    if m.is_some() {
                        k
                    } else {
                        t.shape(cls_st)[1] - 1
                    }
                })
                .collect();
            let pt_slots: Vec<usize> = gt
                .part_masks
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    if m.is_some() {
                        k
                    } else {
                        t.shape(cls_pt)[1] - 1
                    }
                })
                .collect();
            let (s_th, w_th) = cls_loss_block(t, cls_th, &th_slots, w);
            let (s_st, w_st) = cls_loss_block(t, cls_st, &st_slots, w);
            let (s_pt, w_pt) = cls_loss_block(t, cls_pt, &pt_slots, w);
            let wsum = w_th + w_st + w_pt;
            if wsum > 0.0 {
                let cls_term = t.mul_scalar(t.add(t.add(s_th, s_st), s_pt), 1.0 / wsum);
                let v = add_term(t, &mut total, cls_term, w.lambda_cls);
                breakdown.cls += v;
            }
        }
    }

    let total = match total {
        Some(v) => v,
        // nothing to supervise (empty scene, all weights zero paths)
        None => t.constant(crate::tensor::Arr::zeros(ndarray::IxDyn(&[1]))),
    };
    breakdown.total = t.scalar(total);
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical("loss is not finite".into()));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err};
    use ndarray::{array, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn focal_reduces_to_half_bce_at_gamma_zero() {
        for &p in &[0.1, 0.4, 0.7, 0.95] {
            let f1 = focal_scalar(p, true, 0.5, 0.0);
            assert!((f1 - 0.5 * -(p as f64).ln()).abs() < 1e-12);
            let f0 = focal_scalar(p, false, 0.5, 0.0);
            assert!((f0 - 0.5 * -(1.0 - p as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_worked_value() {
        // y=1, p=0.5, alpha=0.25, gamma=2 -> 0.25 * 0.25 * ln 2
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        let got = focal_scalar(0.5, true, 0.25, 2.0);
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_vanishes_for_perfect_prediction() {
        assert!(focal_scalar(1.0 - 1e-9, true, 0.25, 2.0) < 1e-12);
    }

    #[test]
    fn dice_trivial_cases() {
        // perfect overlap (binary) -> ~0
        let g = [1.0, 0.0, 1.0, 0.0];
        assert!(dice_scalar(&g, &g) < 1e-6);
        // disjoint supports -> ~1
        let p = [0.0, 1.0, 0.0, 1.0];
        assert!(dice_scalar(&p, &g) > 1.0 - 1e-6);
    }

    #[test]
    fn dice_worked_value() {
        // uniform 0.5 on 2x2 against a single-pixel target -> 0.5
        let p = [0.5, 0.5, 0.5, 0.5];
        let g = [1.0, 0.0, 0.0, 0.0];
        assert!((dice_scalar(&p, &g) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tape_terms_match_scalar_forms() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target: Vec<f64> = (0..12).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let la = Arr::from_shape_vec(IxDyn(&[12]), logits.clone()).unwrap();
        let ta = Arr::from_shape_vec(IxDyn(&[12]), target.clone()).unwrap();
        let t = Tape::new();
        let lv = t.leaf(la);
        let focal = t.scalar(focal_loss_t(&t, lv, &ta, 0.25, 2.0));
        let expect: f64 = logits
            .iter()
            .zip(&target)
            .map(|(&z, &y)| focal_scalar(sigmoid(z), y > 0.5, 0.25, 2.0))
            .sum::<f64>()
            / 12.0;
        assert!((focal - expect).abs() < 1e-12);

        let dice = t.scalar(dice_loss_t(&t, lv, &ta));
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        assert!((dice - dice_scalar(&probs, &target)).abs() < 1e-12);
    }

    #[test]
    fn focal_and_dice_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let logits = Arr::from_shape_vec(
            IxDyn(&[10]),
            (0..10).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let target = Arr::from_shape_vec(
            IxDyn(&[10]),
            (0..10).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        )
        .unwrap();
        for kind in 0..2 {
            let run = |x: &Arr| {
                let t = Tape::new();
                let v = t.leaf(x.clone());
                let loss = if kind == 0 {
                    focal_loss_t(&t, v, &target, 0.25, 2.0)
                } else {
                    dice_loss_t(&t, v, &target)
                };
                (t, v, loss)
            };
            let (t, v, loss) = run(&logits);
            let grads = t.backward(loss);
            let analytic = grads.get(v).unwrap().clone();
            let mut eval = |x: &Arr| {
                let (t, _, l) = run(x);
                t.scalar(l)
            };
            let numeric = finite_diff_grad(&mut eval, &logits, 1e-5);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "kind {kind}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn matching_cost_perfect_match_tends_to_zero() {
        let g = Array1::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let gt = GroundTruth {
            things: vec![GtThing {
                class_index: 0,
                mask: g,
            }],
            stuff_masks: vec![],
            part_masks: vec![],
            hw: (2, 2),
        };
        // saturated correct mask, saturated correct class
        let masks = array![[30.0, 30.0, -30.0, -30.0]];
        let cls = array![[30.0, -30.0]];
        let w = LossWeights::default();
        let cost = matching_cost(&masks, Some(&cls), &gt, &w);
        assert!(cost[[0, 0]] < 1e-6, "cost {}", cost[[0, 0]]);
    }

    #[test]
    fn matching_cost_identical_rows_have_identical_costs() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut masks = Array2::<f64>::zeros((2, 9));
        masks.row_mut(0).assign(&Array1::from_vec(row.clone()));
        masks.row_mut(1).assign(&Array1::from_vec(row));
        let g = Array1::from_shape_fn(9, |i| f64::from(i % 3 == 0));
        let gt = GroundTruth {
            things: vec![GtThing {
                class_index: 0,
                mask: g,
            }],
            stuff_masks: vec![],
            part_masks: vec![],
            hw: (3, 3),
        };
        let cost = matching_cost(&masks, None, &gt, &LossWeights::default());
        assert_eq!(cost[[0, 0]], cost[[1, 0]]);
    }

    use crate::decoder::InitialPrediction;
    use crate::model::ForwardOutputs;
    use crate::reasoning::StageVars;

    /// Synthetic single-stage forward outputs with leaf mask/class logits.
    fn toy_outputs(
        t: &Tape,
        rng: &mut ChaCha12Rng,
        blocks: Blocks,
        feat_hw: (usize, usize),
        cls_slots: (usize, usize, usize),
        scale: f64,
    ) -> ForwardOutputs {
        let k = blocks.total();
        let hw = feat_hw.0 * feat_hw.1;
        let rand2 = |rng: &mut ChaCha12Rng, r: usize, c: usize| {
            Arr::from_shape_vec(
                IxDyn(&[r, c]),
                (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .unwrap()
        };
        let f = t.constant(Arr::zeros(IxDyn(&[2, feat_hw.0, feat_hw.1])));
        let init = InitialPrediction {
            queries: t.leaf(rand2(rng, k, 2)),
            masks: t.leaf(rand2(rng, k, hw)),
            feat_hw,
        };
        let stage = StageVars {
            queries: init.queries,
            masks: t.leaf(rand2(rng, k, hw)),
            cls_thing: t.leaf(rand2(rng, blocks.n_thing, cls_slots.0 + 1)),
            cls_stuff: t.leaf(rand2(rng, blocks.n_stuff, cls_slots.1 + 1)),
            cls_part: t.leaf(rand2(rng, blocks.n_part, cls_slots.2 + 1)),
        };
        ForwardOutputs {
            f_s: f,
            f_p: f,
            init,
            stages: vec![stage],
            feat_hw,
            input_hw: feat_hw,
        }
    }

    fn desk_gt_small() -> (GroundTruth, Blocks) {
        // 4x4 scene: one thing (class idx 0) in the top-left 2x2, one stuff
        // class present, one part present
        let hw = 16;
        let mut thing = Array1::<f64>::zeros(hw);
        for &px in &[0usize, 1, 4, 5] {
            thing[px] = 1.0;
        }
        let mut stuff = Array1::<f64>::zeros(hw);
        for px in 8..16 {
            stuff[px] = 1.0;
        }
        let part = thing.clone();
        let gt = GroundTruth {
            things: vec![GtThing {
                class_index: 0,
                mask: thing,
            }],
            stuff_masks: vec![Some(stuff), None],
            part_masks: vec![Some(part)],
            hw: (4, 4),
        };
        let blocks = Blocks {
            n_thing: 2,
            n_stuff: 2,
            n_part: 1,
        };
        (gt, blocks)
    }

    #[test]
    fn empty_scene_with_saturated_no_object_gives_tiny_loss() {
        let t = Tape::new();
        let blocks = Blocks {
            n_thing: 2,
            n_stuff: 1,
            n_part: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut out = toy_outputs(&t, &mut rng, blocks, (2, 2), (1, 1, 1), 0.5);
        // no GT at all; push all class rows to saturated no-object
        let no_obj = |rows: usize, slots: usize| {
            let mut a = Array2::<f64>::from_elem((rows, slots), -30.0);
            a.column_mut(slots - 1).fill(30.0);
            a.into_dyn()
        };
        out.stages[0].cls_thing = t.leaf(no_obj(2, 2));
        out.stages[0].cls_stuff = t.leaf(no_obj(1, 2));
        out.stages[0].cls_part = t.leaf(no_obj(1, 2));
        let gt = GroundTruth {
            things: vec![],
            stuff_masks: vec![None],
            part_masks: vec![None],
            hw: (2, 2),
        };
        let (_, bd) = total_loss(&t, &out, &gt, &LossWeights::default(), blocks).unwrap();
        assert!(bd.total < 1e-9, "loss {}", bd.total);
    }

    #[test]
    fn zero_weights_zero_loss() {
        let t = Tape::new();
        let (gt, blocks) = desk_gt_small();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let out = toy_outputs(&t, &mut rng, blocks, (4, 4), (1, 2, 1), 1.0);
        let w = LossWeights {
            lambda_part: 0.0,
            lambda_thing: 0.0,
            lambda_stuff: 0.0,
            lambda_cls: 0.0,
            ..LossWeights::default()
        };
        let (_, bd) = total_loss(&t, &out, &gt, &w, blocks).unwrap();
        assert_eq!(bd.total, 0.0);
        assert_eq!(
            (bd.part, bd.thing, bd.stuff, bd.cls, bd.init),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn too_many_things_is_an_error() {
        let t = Tape::new();
        let blocks = Blocks {
            n_thing: 1,
            n_stuff: 1,
            n_part: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let out = toy_outputs(&t, &mut rng, blocks, (2, 2), (1, 1, 1), 1.0);
        let mk = |v: f64| {
            let mut m = Array1::<f64>::zeros(4);
            m[0] = v;
            m
        };
        let gt = GroundTruth {
            things: vec![
                GtThing { class_index: 0, mask: mk(1.0) },
                GtThing { class_index: 0, mask: mk(1.0) },
            ],
            stuff_masks: vec![None],
            part_masks: vec![None],
            hw: (2, 2),
        };
        assert!(total_loss(&t, &out, &gt, &LossWeights::default(), blocks).is_err());
    }

    #[test]
    fn total_equals_sum_of_independently_evaluated_terms() {
        // tiny fixed scenario evaluated term by term with the scalar oracles
        let t = Tape::new();
        let (gt, blocks) = desk_gt_small();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let out = toy_outputs(&t, &mut rng, blocks, (4, 4), (1, 2, 1), 1.5);
        let w = LossWeights::default();
        let (_, bd) = total_loss(&t, &out, &gt, &w, blocks).unwrap();

        let masks_of = |v: Var| -> Array2<f64> {
            t.value(v)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let mask_pair = |m: &Array2<f64>, row: usize, g: &Array1<f64>| -> f64 {
            let probs: Vec<f64> = m.row(row).iter().map(|&z| sigmoid(z)).collect();
            let focal = probs
                .iter()
                .zip(g.iter())
                .map(|(&p, &y)| focal_scalar(p, y > 0.5, w.focal_alpha, w.focal_gamma))
                .sum::<f64>()
                / probs.len() as f64;
            focal + dice_scalar(&probs, g.as_slice().unwrap())
        };

        let mut expect = 0.0;
        for (masks, with_cls) in [(masks_of(out.init.masks), false), (masks_of(out.stages[0].masks), true)] {
            // things: 2 proposals, 1 GT -> matching picks the cheaper row
            let thing_rows = masks.slice_axis(Axis(0), (0..2).into()).to_owned();
            let cls_arr = with_cls.then(|| masks_of(out.stages[0].cls_thing));
            let cost = matching_cost(&thing_rows, cls_arr.as_ref(), &gt, &w);
            let row = if cost[[0, 0]] <= cost[[1, 0]] { 0 } else { 1 };
            expect += w.lambda_thing * mask_pair(&masks, row, &gt.things[0].mask);
            // stuff row 2 (class 0 present), part row 4
            expect += w.lambda_stuff * mask_pair(&masks, 2, gt.stuff_masks[0].as_ref().unwrap());
            expect += w.lambda_part * mask_pair(&masks, 4, gt.part_masks[0].as_ref().unwrap());
            if with_cls {
                let cls_focal = |v: Var, slots: &[usize]| -> (f64, f64) {
                    let c = masks_of(v);
                    let mut s = 0.0;
                    let mut wsum = 0.0;
                    for (r, &slot) in slots.iter().enumerate() {
                        let no_obj = c.ncols() - 1;
                        let rw = if slot == no_obj { w.no_object_weight } else { 1.0 };
                        let mean = c
                            .row(r)
                            .iter()
                            .enumerate()
                            .map(|(s2, &z)| {
                                focal_scalar(sigmoid(z), s2 == slot, w.focal_alpha, w.focal_gamma)
                            })
                            .sum::<f64>()
                            / c.ncols() as f64;
                        s += rw * mean;
                        wsum += rw;
                    }
                    (s, wsum)
                };
                let th_slots = if row == 0 { vec![0usize, 1] } else { vec![1usize, 0] };
                let (s_th, w_th) = cls_focal(out.stages[0].cls_thing, &th_slots);
                let (s_st, w_st) = cls_focal(out.stages[0].cls_stuff, &[0, 2]);
                let (s_pt, w_pt) = cls_focal(out.stages[0].cls_part, &[0]);
                expect += w.lambda_cls * (s_th + s_st + s_pt) / (w_th + w_st + w_pt);
            }
        }
        assert!(
            (bd.total - expect).abs() < 1e-9,
            "total {} vs oracle {}",
            bd.total,
            expect
        );
    }

    #[test]
    fn loss_is_invariant_under_thing_row_permutation() {
        let (gt, blocks) = desk_gt_small();
        let w = LossWeights::default();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let t = Tape::new();
        let out = toy_outputs(&t, &mut rng, blocks, (4, 4), (1, 2, 1), 1.2);
        let (_, bd) = total_loss(&t, &out, &gt, &w, blocks).unwrap();

        // swap the two thing rows everywhere they appear
        let swap_rows = |v: Var, rows: usize| -> Arr {
            let a = t.value(v);
            let mut a = a
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            if rows >= 2 {
                let r0 = a.row(0).to_owned();
                let r1 = a.row(1).to_owned();
                a.row_mut(0).assign(&r1);
                a.row_mut(1).assign(&r0);
            }
            a.into_dyn()
        };
        let t2 = Tape::new();
        let out2 = ForwardOutputs {
            f_s: t2.constant(Arr::zeros(IxDyn(&[2, 4, 4]))),
            f_p: t2.constant(Arr::zeros(IxDyn(&[2, 4, 4]))),
            init: InitialPrediction {
                queries: t2.leaf(swap_rows(out.init.queries, 2)),
                masks: t2.leaf(swap_rows(out.init.masks, 2)),
                feat_hw: (4, 4),
            },
            stages: vec![StageVars {
                queries: t2.leaf(swap_rows(out.stages[0].queries, 2)),
                masks: t2.leaf(swap_rows(out.stages[0].masks, 2)),
                cls_thing: t2.leaf(swap_rows(out.stages[0].cls_thing, 2)),
                cls_stuff: t2.leaf(t.value(out.stages[0].cls_stuff).as_ref().clone()),
                cls_part: t2.leaf(t.value(out.stages[0].cls_part).as_ref().clone()),
            }],
            feat_hw: (4, 4),
            input_hw: (4, 4),
        };
        let (_, bd2) = total_loss(&t2, &out2, &gt, &w, blocks).unwrap();
        assert!(
            (bd.total - bd2.total).abs() < 1e-8,
            "{} vs {}",
            bd.total,
            bd2.total
        );
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        // gradients w.r.t. stage mask and class logits through matching
        let (gt, blocks) = desk_gt_small();
        let w = LossWeights::default();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let k = blocks.total();
        let base_init = Arr::from_shape_vec(
            IxDyn(&[k, 16]),
            (0..k * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let base_stage = Arr::from_shape_vec(
            IxDyn(&[k, 16]),
            (0..k * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let base_cls = Arr::from_shape_vec(
            IxDyn(&[2, 2]),
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let run = |init_m: &Arr, stage_m: &Arr, cls_th: &Arr| {
            let t = Tape::new();
            let f = t.constant(Arr::zeros(IxDyn(&[2, 4, 4])));
            let init = InitialPrediction {
                queries: t.constant(Arr::zeros(IxDyn(&[k, 2]))),
                masks: t.leaf(init_m.clone()),
                feat_hw: (4, 4),
            };
            let stage = StageVars {
                queries: init.queries,
                masks: t.leaf(stage_m.clone()),
                cls_thing: t.leaf(cls_th.clone()),
                cls_stuff: t.constant(Arr::zeros(IxDyn(&[2, 3]))),
                cls_part: t.constant(Arr::zeros(IxDyn(&[1, 2]))),
            };
            let vars = (init.masks, stage.masks, stage.cls_thing);
            let out = ForwardOutputs {
                f_s: f,
                f_p: f,
                init,
                stages: vec![stage],
                feat_hw: (4, 4),
                input_hw: (4, 4),
            };
            let (lv, _) = total_loss(&t, &out, &gt, &w, blocks).unwrap();
            (t, vars, lv)
        };
        let (t, vars, lv) = run(&base_init, &base_stage, &base_cls);
        let grads = t.backward(lv);
        for target in 0..3 {
            let analytic = grads
                .get([vars.0, vars.1, vars.2][target])
                .unwrap()
                .clone();
            let base = [&base_init, &base_stage, &base_cls][target].clone();
            let mut eval = |x: &Arr| {
                let args = [&base_init, &base_stage, &base_cls];
                let mut owned: Vec<Arr> = args.iter().map(|a| (*a).clone()).collect();
                owned[target] = x.clone();
                let (t, _, lv) = run(&owned[0], &owned[1], &owned[2]);
                t.scalar(lv)
            };
            let numeric = finite_diff_grad(&mut eval, &base, 1e-6);
            assert!(
                max_rel_err(&analytic, &numeric) < 1e-4,
                "target {target}: {}",
                max_rel_err(&analytic, &numeric)
            );
        }
    }

    #[test]
    fn matching_cost_matches_term_by_term_recomputation() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let masks = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-2.0..2.0));
        let cls = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-2.0..2.0));
        let gts: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(6, |_| f64::from(rng.gen_bool(0.5))))
            .collect();
        let gt = GroundTruth {
            things: gts
                .iter()
                .enumerate()
                .map(|(j, m)| GtThing {
                    class_index: j,
                    mask: m.clone(),
                })
                .collect(),
            stuff_masks: vec![],
            part_masks: vec![],
            hw: (2, 3),
        };
        let w = LossWeights::default();
        let cost = matching_cost(&masks, Some(&cls), &gt, &w);
        for k in 0..2 {
            for j in 0..2 {
                let probs: Vec<f64> = masks.row(k).iter().map(|&z| sigmoid(z)).collect();
                let focal: f64 = probs
                    .iter()
                    .zip(gts[j].iter())
                    .map(|(&p, &y)| focal_scalar(p, y > 0.5, w.focal_alpha, w.focal_gamma))
                    .sum::<f64>()
                    / 6.0;
                let dice = dice_scalar(&probs, gts[j].as_slice().unwrap());
                let cf: f64 = cls
                    .row(k)
                    .iter()
                    .enumerate()
                    .map(|(s, &z)| focal_scalar(sigmoid(z), s == j, w.focal_alpha, w.focal_gamma))
                    .sum::<f64>()
                    / 3.0;
                let expect = w.lambda_thing * (focal + dice) + w.lambda_cls * cf;
                assert!((cost[[k, j]] - expect).abs() < 1e-9);
            }
        }
    }
}
