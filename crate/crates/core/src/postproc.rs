//! Triplet composition and pairwise non-maximum suppression.
//!
//! Each query contributes candidate triplets scored by the product of its
//! action, object-class and interactiveness probabilities. Suppression then
//! removes near-duplicate triplets: two triplets overlap by the product
//! `iou(human)^alpha * iou(object)^beta`, and a lower-scored triplet is
//! dropped when its overlap with a kept triplet of the same (object class,
//! action) group exceeds the threshold.

use crate::geometry::BoundingBox;
use crate::model::LayerDetections;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One scored (human, object, action) detection.
///
/// `score` is always the exact product of the three component scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredTriplet {
    pub image_id: String,
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub object_class: usize,
    pub action: usize,
    /// Composite confidence: `action_score * object_score * interactive_score`.
    pub score: f64,
    pub action_score: f64,
    pub object_score: f64,
    pub interactive_score: f64,
}

impl ScoredTriplet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        human_box: BoundingBox,
        object_box: BoundingBox,
        object_class: usize,
        action: usize,
        action_score: f64,
        object_score: f64,
        interactive_score: f64,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            human_box,
            object_box,
            object_class,
            action,
            score: action_score * object_score * interactive_score,
            action_score,
            object_score,
            interactive_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PnmsConfig {
    /// Exponent on the human-box IoU.
    pub alpha: f64,
    /// Exponent on the object-box IoU.
    pub beta: f64,
    /// Overlap above which the lower-scored triplet is suppressed.
    pub iou_threshold: f64,
    /// Candidates kept per image (by score) before suppression.
    pub top_k: usize,
    /// When true, triplets suppress across (object class, action) groups.
    pub class_agnostic: bool,
}

impl Default for PnmsConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            iou_threshold: 0.7,
            top_k: 100,
            class_agnostic: false,
        }
    }
}

/// Pairwise overlap between two triplets: `iou_h^alpha * iou_o^beta`.
///
/// Follows the `0^0 = 1` convention of `f64::powf`, so a zero exponent
/// ignores that box pair entirely.
pub fn pair_iou(a: &ScoredTriplet, b: &ScoredTriplet, alpha: f64, beta: f64) -> f64 {
    a.human_box.iou(&b.human_box).powf(alpha) * a.object_box.iou(&b.object_box).powf(beta)
}

/// Composes scored triplets from final-layer outputs.
///
/// For each query the object class is the argmax over real classes
/// (background excluded, ties to the lower id). With `argmax_only` false one
/// triplet is emitted per (query, action); with it true only each query's
/// best-scoring action is emitted.
pub fn compose_triplets(
    image_id: &str,
    dets: &LayerDetections,
    action_probs: &Array2<f64>,
    argmax_only: bool,
) -> Vec<ScoredTriplet> {
    let num_queries = dets.num_queries();
    let c_o = dets.num_object_classes();
    let c_a = action_probs.ncols();
    assert_eq!(action_probs.nrows(), num_queries, "query count mismatch");
    assert_eq!(dets.object_boxes.len(), num_queries, "box count mismatch");

    let mut out = Vec::with_capacity(num_queries * c_a);
    for q in 0..num_queries {
        let mut best_class = 0;
        for k in 1..c_o {
            if dets.object_probs[[q, k]] > dets.object_probs[[q, best_class]] {
                best_class = k;
            }
        }
        let object_score = dets.object_probs[[q, best_class]];
        let interactive = dets.interactive_probs[q];
        let actions: Vec<usize> = if argmax_only {
            let mut best = 0;
            for a in 1..c_a {
                if action_probs[[q, a]] > action_probs[[q, best]] {
                    best = a;
                }
            }
            vec![best]
        } else {
            (0..c_a).collect()
        };
        for a in actions {
            out.push(ScoredTriplet::new(
                image_id,
                dets.human_boxes[q],
                dets.object_boxes[q],
                best_class,
                a,
                action_probs[[q, a]],
                object_score,
                interactive,
            ));
        }
    }
    out
}

/// Suppresses near-duplicate triplets per image.
///
/// Triplets are processed per image in descending score order (ties keep
/// input order), truncated to `top_k` before suppression. Images appear in
/// the output in first-appearance order of their ids in the input.
pub fn pnms(triplets: &[ScoredTriplet], cfg: &PnmsConfig) -> Vec<ScoredTriplet> {
    let mut image_order: Vec<&str> = Vec::new();
    for t in triplets {
        if !image_order.contains(&t.image_id.as_str()) {
            image_order.push(&t.image_id);
        }
    }

    let mut out = Vec::new();
    for image_id in image_order {
        let mut group: Vec<&ScoredTriplet> =
            triplets.iter().filter(|t| t.image_id == image_id).collect();
        group.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        group.truncate(cfg.top_k);

        let mut kept: Vec<&ScoredTriplet> = Vec::new();
        'candidates: for cand in group {
            for &k in &kept {
                let same_group = cfg.class_agnostic
                    || (k.object_class == cand.object_class && k.action == cand.action);
                if same_group && pair_iou(k, cand, cfg.alpha, cfg.beta) > cfg.iou_threshold {
                    continue 'candidates;
                }
            }
            kept.push(cand);
        }
        out.extend(kept.into_iter().cloned());
    }
    out
}
