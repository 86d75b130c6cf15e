//! Inference-time merging: score-ordered panoptic paste of thing masks,
//! stuff fill by mask argmax, then part overlay with the class
//! compatibility/void rule.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::decoder::Blocks;
use crate::raster::PanopticPartMap;
use crate::taxonomy::{Taxonomy, VOID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Minimum combined (class confidence x mask quality) score.
    pub score_thresh: f64,
    /// Mask binarization threshold on sigmoid probabilities.
    pub mask_thresh: f64,
    /// Minimum fraction of a mask surviving the paste.
    pub overlap_keep: f64,
    /// Stuff classes below this pixel count become void.
    pub min_stuff_area: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            score_thresh: 0.3,
            mask_thresh: 0.5,
            overlap_keep: 0.5,
            min_stuff_area: 16,
        }
    }
}

/// Final-stage outputs detached to plain arrays at input resolution.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// `[K, H, W]` mask logits.
    pub masks: Array3<f64>,
    pub cls_thing: Array2<f64>,
    pub cls_stuff: Array2<f64>,
    pub cls_part: Array2<f64>,
    pub blocks: Blocks,
}

/// One pasted thing segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScore {
    pub instance_id: u16,
    pub class_id: u16,
    pub score: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// NaN-proof descending order key.
fn finite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::MIN
    }
}

/// Panoptic-FPN-style merge: thing rows scored by class confidence times
/// mean in-mask probability, pasted in descending score order without
/// overwriting, low-score / mostly-occluded segments dropped; remaining
/// pixels take the argmax stuff class, small stuff regions become void.
pub fn merge_panoptic(
    out: &StageOutput,
    tax: &Taxonomy,
    cfg: &MergeConfig,
) -> (Array2<u16>, Array2<u16>, Vec<SegmentScore>) {
    let (_, h, w) = out.masks.dim();
    let blocks = out.blocks;
    let mut scene = Array2::<u16>::from_elem((h, w), VOID);
    let mut instance = Array2::<u16>::zeros((h, w));

    // score thing proposals
    struct Cand {
        row: usize,
        class_id: u16,
        score: f64,
        pixels: Vec<(usize, usize)>,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for row in blocks.thing_range() {
        let mut best_c = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for c in 0..tax.n_things() {
            let p = finite(out.cls_thing[[row, c]]);
            if p > best_p {
                best_p = p;
                best_c = c;
            }
        }
        let confidence = sigmoid(best_p);
        let mut pixels = Vec::new();
        let mut prob_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = sigmoid(out.masks[[row, y, x]]);
                if p.is_finite() && p > cfg.mask_thresh {
                    pixels.push((y, x));
                    prob_sum += p;
                }
            }
        }
        if pixels.is_empty() {
            continue;
        }
        let quality = prob_sum / pixels.len() as f64;
        let score = confidence * quality;
        if score < cfg.score_thresh || !score.is_finite() {
            continue;
        }
        cands.push(Cand {
            row,
            class_id: tax.thing_classes()[best_c],
            score,
            pixels,
        });
    }
    // paste order: descending score, row index breaking ties for determinism
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.row.cmp(&b.row))
    });

    let mut scores = Vec::new();
    let mut next_id: u16 = 1;
    for cand in cands {
        let free: Vec<&(usize, usize)> = cand
            .pixels
            .iter()
            .filter(|&&(y, x)| scene[[y, x]] == VOID)
            .collect();
        if (free.len() as f64) < cfg.overlap_keep * cand.pixels.len() as f64 {
            continue;
        }
        for &&(y, x) in &free {
            scene[[y, x]] = cand.class_id;
            instance[[y, x]] = next_id;
        }
        scores.push(SegmentScore {
            instance_id: next_id,
            class_id: cand.class_id,
            score: cand.score,
        });
        next_id += 1;
    }

    // stuff fill on unclaimed pixels
    if blocks.n_stuff > 0 {
        let stuff_rows = blocks.stuff_range();
        for y in 0..h {
            for x in 0..w {
                if scene[[y, x]] != VOID {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0usize;
                for (k, row) in stuff_rows.clone().enumerate() {
                    let v = finite(out.masks[[row, y, x]]);
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                scene[[y, x]] = tax.stuff_classes()[best_k];
            }
        }
        // small stuff regions become void (per-class total area)
        for &c in tax.stuff_classes() {
            let area = scene.iter().filter(|&&v| v == c).count();
            if area > 0 && area < cfg.min_stuff_area {
                for v in scene.iter_mut() {
                    if *v == c {
                        *v = VOID;
                    }
                }
            }
        }
    }
    (scene, instance, scores)
}

/// Part overlay: pixels of part-less classes keep void; within parted
/// segments the unrestricted per-pixel argmax wins, then incompatible
/// winners are voided.
pub fn merge_parts(
    scene: ArrayView2<'_, u16>,
    instance: ArrayView2<'_, u16>,
    part_logits: ArrayView3<'_, f64>,
    tax: &Taxonomy,
) -> PanopticPartMap {
    let (h, w) = scene.dim();
    let mut part = Array2::<u16>::from_elem((h, w), VOID);
    let n_part = part_logits.dim().0;
    debug_assert_eq!(n_part, tax.n_parts());
    for y in 0..h {
        for x in 0..w {
            let class = scene[[y, x]];
            if !tax.has_parts(class) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_k = usize::MAX;
            for k in 0..n_part {
                let v = finite(part_logits[[k, y, x]]);
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            if best_k == usize::MAX {
                continue;
            }
            let part_id = tax.part_classes()[best_k];
            if tax.part_allowed(class, part_id) {
                part[[y, x]] = part_id;
            }
        }
    }
    PanopticPartMap {
        scene: scene.to_owned(),
        instance: instance.to_owned(),
        part,
    }
}

/// Full merge pipeline producing the final per-pixel triple.
pub fn merge(
    out: &StageOutput,
    tax: &Taxonomy,
    cfg: &MergeConfig,
) -> (PanopticPartMap, Vec<SegmentScore>) {
    let (scene, instance, scores) = merge_panoptic(out, tax, cfg);
    let part_rows = out.blocks.part_range();
    let part_logits = out
        .masks
        .slice(ndarray::s![part_rows.start..part_rows.end, .., ..]);
    let map = merge_parts(scene.view(), instance.view(), part_logits, tax);
    (map, scores)
}
