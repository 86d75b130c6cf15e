//! PQ and PartPQ evaluation: segment matching at IoU > 0.5 with standard
//! void handling, the two-branch IOU_p (instance IoU for part-less classes,
//! mean part IoU otherwise), per-class reports with P/NP sub-averages, and
//! the ground-truth plane-swap upper-bound analysis.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::PanopticPartMap;
use crate::taxonomy::{Taxonomy, VOID};

/// One extracted segment: a (class, instance) group for things, a class
/// region for stuff. Pixels are flattened row-major indices.
#[derive(Debug, Clone)]
pub struct Segment {
    pub class: u16,
    pub instance: u16,
    pub pixels: Vec<usize>,
}

/// Extracts all non-void segments of a map.
pub fn extract_segments(map: &PanopticPartMap, tax: &Taxonomy) -> Vec<Segment> {
    let (h, w) = map.dims();
    let mut index: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let c = map.scene[[y, x]];
            if c == VOID || !tax.is_scene_class(c) {
                continue;
            }
            let key = if tax.is_thing(c) {
                let i = map.instance[[y, x]];
                if i == 0 {
                    continue; // malformed thing pixel without an instance
                }
                (c, i)
            } else {
                (c, 0)
            };
            index.entry(key).or_default().push(y * w + x);
        }
    }
    index
        .into_iter()
        .map(|((class, instance), pixels)| Segment {
            class,
            instance,
            pixels,
        })
        .collect()
}

/// Per-true-positive overlap values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpOverlap {
    pub iou_inst: f64,
    pub iou_p: f64,
}

/// Matching outcome for one scene-level class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassTally {
    pub tp: Vec<TpOverlap>,
    pub fp: u32,
    pub fn_count: u32,
}

impl ClassTally {
    fn active(&self) -> bool {
        !self.tp.is_empty() || self.fp > 0 || self.fn_count > 0
    }
}

/// Accumulated TP/FP/FN sets per scene-level class. Merging tallies is
/// associative and commutative, so per-image results can be reduced in any
/// grouping (the harness still fixes the order for bit-reproducibility).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTally {
    pub per_class: BTreeMap<u16, ClassTally>,
}

impl MetricTally {
    pub fn merge(&mut self, other: &MetricTally) {
        for (&class, tally) in &other.per_class {
            let entry = self.per_class.entry(class).or_default();
            entry.tp.extend_from_slice(&tally.tp);
            entry.fp += tally.fp;
            entry.fn_count += tally.fn_count;
        }
    }
}

/// IOU_p of a matched pair: instance-level IoU for part-less classes, the
/// mean per-part IoU over part classes present in either side otherwise.
/// Ground-truth-void pixels are excluded throughout.
pub fn compute_iou_p(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    tax: &Taxonomy,
    pred_seg: &Segment,
    gt_seg: &Segment,
) -> f64 {
    if !tax.has_parts(gt_seg.class) {
        return instance_iou(gt, pred_seg, gt_seg);
    }
    let w = gt.width();
    let flat =
        |map: &PanopticPartMap, px: usize| -> u16 { map.part[[px / w, px % w]] };
    let gt_void = |px: usize| gt.scene[[px / w, px % w]] == VOID;
    // per-part pixel sets restricted to each side's own segment pixels
    let mut pred_count: BTreeMap<u16, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<u16, usize> = BTreeMap::new();
    let mut inter: BTreeMap<u16, usize> = BTreeMap::new();
    let mut in_gt = vec![false; gt.width() * gt.height()];
    for &px in &gt_seg.pixels {
        in_gt[px] = true;
        let p = flat(gt, px);
        if p != VOID {
            *gt_count.entry(p).or_default() += 1;
        }
    }
    for &px in &pred_seg.pixels {
        if gt_void(px) {
            continue;
        }
        let p = flat(pred, px);
        if p != VOID {
            *pred_count.entry(p).or_default() += 1;
            if in_gt[px] && flat(gt, px) == p {
                *inter.entry(p).or_default() += 1;
            }
        }
    }
    let mut classes: Vec<u16> = pred_count.keys().chain(gt_count.keys()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for c in &classes {
        let p = *pred_count.get(c).unwrap_or(&0);
        let g = *gt_count.get(c).unwrap_or(&0);
        let i = *inter.get(c).unwrap_or(&0);
        let union = p + g - i;
        if union > 0 {
            sum += i as f64 / union as f64;
        }
    }
    sum / classes.len() as f64
}

/// Instance IoU with ground-truth-void pixels excluded from the union.
fn instance_iou(gt: &PanopticPartMap, pred_seg: &Segment, gt_seg: &Segment) -> f64 {
    let w = gt.width();
    let mut in_gt = vec![false; gt.width() * gt.height()];
    for &px in &gt_seg.pixels {
        in_gt[px] = true;
    }
    let mut inter = 0usize;
    let mut pred_void = 0usize;
    for &px in &pred_seg.pixels {
        if in_gt[px] {
            inter += 1;
        }
        if gt.scene[[px / w, px % w]] == VOID {
            pred_void += 1;
        }
    }
    let union = pred_seg.pixels.len() + gt_seg.pixels.len() - inter - pred_void;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Matches prediction segments against ground truth: a pair is a true
/// positive iff classes agree and the instance IoU is strictly above 0.5.
/// Unmatched predictions mostly covering ground-truth void are discarded
/// rather than counted as false positives.
pub fn match_segments(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    tax: &Taxonomy,
) -> Result<MetricTally> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    let pred_segs = extract_segments(pred, tax);
    let gt_segs = extract_segments(gt, tax);
    let mut tally = MetricTally::default();

    // pixel -> segment index maps
    let n = pred.width() * pred.height();
    let w = pred.width();
    let mut pred_at = vec![usize::MAX; n];
    for (i, s) in pred_segs.iter().enumerate() {
        for &px in &s.pixels {
            pred_at[px] = i;
        }
    }
    let mut gt_at = vec![usize::MAX; n];
    for (i, s) in gt_segs.iter().enumerate() {
        for &px in &s.pixels {
            gt_at[px] = i;
        }
    }
    let mut inter: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pred_void = vec![0usize; pred_segs.len()];
    for px in 0..n {
        let p = pred_at[px];
        let g = gt_at[px];
        if p != usize::MAX && g != usize::MAX {
            *inter.entry((p, g)).or_default() += 1;
        }
        if p != usize::MAX && gt.scene[[px / w, px % w]] == VOID {
            pred_void[p] += 1;
        }
    }

    let mut pred_matched = vec![false; pred_segs.len()];
    let mut gt_matched = vec![false; gt_segs.len()];
    for (&(pi, gi), &i) in &inter {
        let ps = &pred_segs[pi];
        let gs = &gt_segs[gi];
        if ps.class != gs.class {
            continue;
        }
        let union = ps.pixels.len() + gs.pixels.len() - i - pred_void[pi];
        let iou = if union == 0 {
            0.0
        } else {
            i as f64 / union as f64
        };
        if iou > 0.5 {
            // IoU > 0.5 makes the match unique on both sides
            pred_matched[pi] = true;
            gt_matched[gi] = true;
            let iou_p = compute_iou_p(pred, gt, tax, ps, gs);
            tally
                .per_class
                .entry(ps.class)
                .or_default()
                .tp
                .push(TpOverlap {
                    iou_inst: iou,
                    iou_p,
                });
        }
    }
    for (pi, ps) in pred_segs.iter().enumerate() {
        if pred_matched[pi] {
            continue;
        }
        // mostly-void predictions are ignored, not penalized
        if pred_void[pi] as f64 / ps.pixels.len() as f64 > 0.5 {
            continue;
        }
        tally.per_class.entry(ps.class).or_default().fp += 1;
    }
    for (gi, gs) in gt_segs.iter().enumerate() {
        if !gt_matched[gi] {
            tally.per_class.entry(gs.class).or_default().fn_count += 1;
        }
    }
    Ok(tally)
}

/// One metric family (PQ or PartPQ) in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over classes present in ground truth or predictions; `None`
    /// when no class is present at all (undefined, not zero).
    pub overall: Option<f64>,
    /// Sub-average over classes with parts.
    pub with_parts: Option<f64>,
    /// Sub-average over classes without parts.
    pub without_parts: Option<f64>,
    pub per_class: BTreeMap<u16, f64>,
}

fn summarize(tally: &MetricTally, tax: &Taxonomy, use_iou_p: bool) -> MetricSummary {
    let mut per_class = BTreeMap::new();
    for (&class, ct) in &tally.per_class {
        if !ct.active() {
            continue;
        }
        let num: f64 = ct
            .tp
            .iter()
            .map(|o| if use_iou_p { o.iou_p } else { o.iou_inst })
            .sum();
        let den = ct.tp.len() as f64 + 0.5 * ct.fp as f64 + 0.5 * ct.fn_count as f64;
        per_class.insert(class, 100.0 * num / den);
    }
    let avg = |it: Vec<f64>| -> Option<f64> {
        if it.is_empty() {
            None
        } else {
            Some(it.iter().sum::<f64>() / it.len() as f64)
        }
    };
    let overall = avg(per_class.values().copied().collect());
    let with_parts = avg(
        per_class
            .iter()
            .filter(|(c, _)| tax.has_parts(**c))
            .map(|(_, v)| *v)
            .collect(),
    );
    let without_parts = avg(
        per_class
            .iter()
            .filter(|(c, _)| !tax.has_parts(**c))
            .map(|(_, v)| *v)
            .collect(),
    );
    MetricSummary {
        overall,
        with_parts,
        without_parts,
        per_class,
    }
}

/// Panoptic quality: `sum IoU / (TP + FP/2 + FN/2)` with instance IoU.
pub fn compute_pq(tally: &MetricTally, tax: &Taxonomy) -> MetricSummary {
    summarize(tally, tax, false)
}

/// PartPQ: the TP overlap term is IOU_p instead of instance IoU.
pub fn compute_partpq(tally: &MetricTally, tax: &Taxonomy) -> MetricSummary {
    summarize(tally, tax, true)
}

/// Both families plus raw counts, ready for report emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pq: MetricSummary,
    pub partpq: MetricSummary,
    pub counts: BTreeMap<u16, (usize, u32, u32)>,
}

impl MetricReport {
    pub fn from_tally(tally: &MetricTally, tax: &Taxonomy) -> Self {
        MetricReport {
            pq: compute_pq(tally, tax),
            partpq: compute_partpq(tally, tax),
            counts: tally
                .per_class
                .iter()
                .filter(|(_, ct)| ct.active())
                .map(|(&c, ct)| (c, (ct.tp.len(), ct.fp, ct.fn_count)))
                .collect(),
        }
    }
}

/// Evaluates a prediction against ground truth in one call.
pub fn evaluate_pair(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    tax: &Taxonomy,
) -> Result<MetricReport> {
    let tally = match_segments(pred, gt, tax)?;
    Ok(MetricReport::from_tally(&tally, tax))
}

/// Which planes to replace with ground truth in the upper-bound analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapMode {
    PanopticGt,
    PartGt,
    Both,
}

impl std::str::FromStr for SwapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "panoptic_gt" => Ok(SwapMode::PanopticGt),
            "part_gt" => Ok(SwapMode::PartGt),
            "both" => Ok(SwapMode::Both),
            other => Err(Error::Config(format!(
                "unknown swap mode {other:?} (panoptic_gt, part_gt, both)"
            ))),
        }
    }
}

/// Rebuilds the evaluated map with the selected planes replaced by ground
/// truth; the surviving predicted plane is re-overlaid under the
/// compatibility/void rule.
pub fn swap_planes(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    tax: &Taxonomy,
    mode: SwapMode,
) -> PanopticPartMap {
    let (h, w) = gt.dims();
    match mode {
        SwapMode::Both => gt.clone(),
        SwapMode::PanopticGt => {
            let mut part = gt.part.clone();
            for y in 0..h {
                for x in 0..w {
                    let scene = gt.scene[[y, x]];
                    let p = pred.part[[y, x]];
                    part[[y, x]] = if tax.has_parts(scene) && tax.part_allowed(scene, p) {
                        p
                    } else {
                        VOID
                    };
                }
            }
            PanopticPartMap {
                scene: gt.scene.clone(),
                instance: gt.instance.clone(),
                part,
            }
        }
        SwapMode::PartGt => {
            let mut part = pred.part.clone();
            for y in 0..h {
                for x in 0..w {
                    let scene = pred.scene[[y, x]];
                    let p = gt.part[[y, x]];
                    part[[y, x]] = if tax.has_parts(scene) && tax.part_allowed(scene, p) {
                        p
                    } else {
                        VOID
                    };
                }
            }
            PanopticPartMap {
                scene: pred.scene.clone(),
                instance: pred.instance.clone(),
                part,
            }
        }
    }
}

/// Upper-bound evaluation with the selected planes swapped to ground truth.
pub fn oracle_swap_eval(
    pred: &PanopticPartMap,
    gt: &PanopticPartMap,
    tax: &Taxonomy,
    mode: SwapMode,
) -> Result<MetricReport> {
    let rebuilt = swap_planes(pred, gt, tax, mode);
    evaluate_pair(&rebuilt, gt, tax)
}
