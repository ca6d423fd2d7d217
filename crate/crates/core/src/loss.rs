//! Set-prediction training loss.
//!
//! Ground-truth pairs are assigned to queries by Hungarian matching on a
//! cost mirroring the loss terms; the loss itself combines box L1 and GIoU
//! regression on matched queries with three classification terms: object
//! class (softmax over real classes plus background), action class
//! (per-class binary cross-entropy) and interactiveness (binary). The same
//! weighted sum applies to every decoder layer's outputs, and the final
//! training scalar is the mean over layers.

use crate::data::GtInstance;
use crate::geometry::BoundingBox;
use crate::matching::{hungarian_match, Assignment, MatchError};
use crate::model::{ForwardPass, LayerDetections};
use crate::reweight::WeightVector;
use crate::tensor::{NodeId, Tape};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_giou: f64,
    pub lambda_interactive: f64,
    pub lambda_object: f64,
    pub lambda_action: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_box: 2.5,
            lambda_giou: 1.0,
            lambda_interactive: 1.0,
            lambda_object: 1.0,
            lambda_action: 1.0,
        }
    }
}

/// Loss terms of one decoder layer, all unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub box_human: f64,
    pub box_object: f64,
    pub giou_human: f64,
    pub giou_object: f64,
    pub interactive: f64,
    pub object_class: f64,
    pub action_class: f64,
    /// The weighted sum of this layer's terms.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    /// Mean of the per-layer totals; the scalar that is optimized.
    pub total: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("{kind} weight vector has {got} classes, expected {expected}")]
    WeightLength {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("assignment maps {gts} ground truths but {expected} were supplied")]
    AssignmentSize { gts: usize, expected: usize },
    #[error("assignment query index {query} out of range for {num_queries} queries")]
    QueryOutOfRange { query: usize, num_queries: usize },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Matching cost between every ground truth (row) and query (column),
/// computed from final-layer outputs of both decoders.
pub fn build_cost_matrix(
    dets: &LayerDetections,
    action_probs: &Array2<f64>,
    gts: &[GtInstance],
    w: &LossWeights,
) -> Array2<f64> {
    let n_q = dets.num_queries();
    let mut cost = Array2::zeros((gts.len(), n_q));
    for (g, gt) in gts.iter().enumerate() {
        for q in 0..n_q {
            let l1 = box_l1(&dets.human_boxes[q], &gt.human_box)
                + box_l1(&dets.object_boxes[q], &gt.object_box);
            let giou_term = (1.0 - dets.human_boxes[q].giou(&gt.human_box))
                + (1.0 - dets.object_boxes[q].giou(&gt.object_box));
            let object_term = -dets.object_probs[[q, gt.object_class]];
            let action_term = -gt
                .actions
                .iter()
                .map(|&a| action_probs[[q, a]])
                .sum::<f64>()
                / gt.actions.len() as f64;
            let interactive_term = -dets.interactive_probs[q];
            cost[[g, q]] = w.lambda_box * l1
                + w.lambda_giou * giou_term
                + w.lambda_object * object_term
                + w.lambda_action * action_term
                + w.lambda_interactive * interactive_term;
        }
    }
    cost
}

/// Matches ground truths to queries by minimum total cost.
pub fn match_queries(
    dets: &LayerDetections,
    action_probs: &Array2<f64>,
    gts: &[GtInstance],
    w: &LossWeights,
) -> Result<Assignment, MatchError> {
    hungarian_match(&build_cost_matrix(dets, action_probs, gts, w))
}

fn box_l1(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Builds the full loss on the tape and returns the scalar node to
/// backpropagate plus the numeric breakdown.
///
/// The assignment (computed on final-layer outputs) is reused for every
/// layer's supervision. `assignment` may be `None` only when `gts` is empty;
/// all queries are then background.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    gts: &[GtInstance],
    assignment: Option<&Assignment>,
    w: &LossWeights,
    object_weights: &WeightVector,
    action_weights: &WeightVector,
) -> Result<(NodeId, LossBreakdown), LossError> {
    let n_q = tape.value(pass.pair_layers[0].object_logits).nrows();
    let c_o = tape.value(pass.pair_layers[0].object_logits).ncols() - 1;
    let c_a = tape.value(pass.action_layers[0]).ncols();
    if object_weights.len() != c_o {
        return Err(LossError::WeightLength {
            kind: "object",
            expected: c_o,
            got: object_weights.len(),
        });
    }
    if action_weights.len() != c_a {
        return Err(LossError::WeightLength {
            kind: "action",
            expected: c_a,
            got: action_weights.len(),
        });
    }
    let gt_to_query: &[usize] = match assignment {
        Some(a) => {
            if a.gt_to_query.len() != gts.len() {
                return Err(LossError::AssignmentSize {
                    gts: a.gt_to_query.len(),
                    expected: gts.len(),
                });
            }
            if let Some(&q) = a.gt_to_query.iter().find(|&&q| q >= n_q) {
                return Err(LossError::QueryOutOfRange {
                    query: q,
                    num_queries: n_q,
                });
            }
            &a.gt_to_query
        }
        None => {
            if !gts.is_empty() {
                return Err(LossError::AssignmentSize {
                    gts: 0,
                    expected: gts.len(),
                });
            }
            &[]
        }
    };

    // Shared per-query target structures.
    let mut object_targets = vec![c_o; n_q]; // background class by default
    let mut interactive_targets = Array2::zeros((n_q, 1));
    let mut action_targets = Array2::zeros((n_q, c_a));
    for (g, &q) in gt_to_query.iter().enumerate() {
        object_targets[q] = gts[g].object_class;
        interactive_targets[[q, 0]] = 1.0;
        for &a in &gts[g].actions {
            action_targets[[q, a]] = 1.0;
        }
    }
    let object_query_weights: Vec<f64> = object_targets
        .iter()
        .map(|&t| {
            if t == c_o {
                object_weights.background
            } else {
                object_weights.class_weights[t]
            }
        })
        .collect();
    let mut action_entry_weights = Array2::zeros((n_q, c_a));
    for q in 0..n_q {
        for k in 0..c_a {
            action_entry_weights[[q, k]] = if action_targets[[q, k]] == 1.0 {
                action_weights.class_weights[k]
            } else {
                action_weights.background
            };
        }
    }

    let matched: Vec<usize> = gt_to_query.to_vec();
    let gt_human: Vec<BoundingBox> = gts.iter().map(|g| g.human_box).collect();
    let gt_object: Vec<BoundingBox> = gts.iter().map(|g| g.object_box).collect();

    let mut layer_nodes = Vec::with_capacity(pass.pair_layers.len());
    let mut layers = Vec::with_capacity(pass.pair_layers.len());
    for (pair, &action_logits) in pass.pair_layers.iter().zip(&pass.action_layers) {
        let (box_h, giou_h) = box_losses(tape, pair.human_boxes, &matched, &gt_human);
        let (box_o, giou_o) = box_losses(tape, pair.object_boxes, &matched, &gt_object);
        let interactive = bce_mean(tape, pair.interactive_logits, &interactive_targets);
        let object_class = weighted_cross_entropy(
            tape,
            pair.object_logits,
            &object_targets,
            &object_query_weights,
        );
        let action_class =
            weighted_bce(tape, action_logits, &action_targets, &action_entry_weights);

        let mut total = scale_add(tape, None, box_h, w.lambda_box);
        total = scale_add(tape, total, box_o, w.lambda_box);
        total = scale_add(tape, total, giou_h, w.lambda_giou);
        total = scale_add(tape, total, giou_o, w.lambda_giou);
        total = scale_add(tape, total, Some(interactive), w.lambda_interactive);
        total = scale_add(tape, total, Some(object_class), w.lambda_object);
        total = scale_add(tape, total, Some(action_class), w.lambda_action);
        let total = total.expect("at least one term");

        let value = |n: Option<NodeId>| n.map_or(0.0, |n| tape.scalar(n));
        layers.push(LayerLoss {
            box_human: value(box_h),
            box_object: value(box_o),
            giou_human: value(giou_h),
            giou_object: value(giou_o),
            interactive: tape.scalar(interactive),
            object_class: tape.scalar(object_class),
            action_class: tape.scalar(action_class),
            total: tape.scalar(total),
        });
        layer_nodes.push(total);
    }

    let mut sum = layer_nodes[0];
    for &n in &layer_nodes[1..] {
        sum = tape.add(sum, n);
    }
    let total_node = tape.scale(sum, 1.0 / layer_nodes.len() as f64);
    let breakdown = LossBreakdown {
        layers,
        total: tape.scalar(total_node),
    };
    Ok((total_node, breakdown))
}

fn scale_add(
    tape: &mut Tape,
    acc: Option<NodeId>,
    term: Option<NodeId>,
    weight: f64,
) -> Option<NodeId> {
    match term {
        None => acc,
        Some(t) => {
            let scaled = tape.scale(t, weight);
            Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled),
            })
        }
    }
}

/// L1 and GIoU losses over matched queries; `None` when nothing is matched.
fn box_losses(
    tape: &mut Tape,
    boxes: NodeId,
    matched: &[usize],
    targets: &[BoundingBox],
) -> (Option<NodeId>, Option<NodeId>) {
    if matched.is_empty() {
        return (None, None);
    }
    let g = matched.len();
    let pred = tape.gather_rows(boxes, Arc::new(matched.to_vec()));
    let mut target = Array2::zeros((g, 4));
    for (i, b) in targets.iter().enumerate() {
        target[[i, 0]] = b.cx;
        target[[i, 1]] = b.cy;
        target[[i, 2]] = b.w;
        target[[i, 3]] = b.h;
    }
    let target = tape.leaf(target);

    let diff = tape.sub(pred, target);
    let l1 = tape.abs(diff);
    let l1_sum = tape.sum_all(l1);
    let l1_loss = tape.scale(l1_sum, 1.0 / g as f64);

    let giou = giou_node(tape, pred, target);
    let one_minus = tape.affine(giou, -1.0, 1.0);
    let giou_loss = tape.mean_all(one_minus);
    (Some(l1_loss), Some(giou_loss))
}

/// Differentiable generalized IoU of row-aligned center-size boxes,
/// `(g, 1)` output.
fn giou_node(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let eps = 1e-12;
    let corners = |tape: &mut Tape, m: NodeId| {
        let cx = tape.slice_cols(m, 0, 1);
        let cy = tape.slice_cols(m, 1, 1);
        let w = tape.slice_cols(m, 2, 1);
        let h = tape.slice_cols(m, 3, 1);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        let x1 = tape.sub(cx, hw);
        let x2 = tape.add(cx, hw);
        let y1 = tape.sub(cy, hh);
        let y2 = tape.add(cy, hh);
        (x1, y1, x2, y2, w, h)
    };
    let (ax1, ay1, ax2, ay2, aw, ah) = corners(tape, a);
    let (bx1, by1, bx2, by2, bw, bh) = corners(tape, b);

    let ix1 = tape.max_el(ax1, bx1);
    let iy1 = tape.max_el(ay1, by1);
    let ix2 = tape.min_el(ax2, bx2);
    let iy2 = tape.min_el(ay2, by2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area_a = tape.mul(aw, ah);
    let area_b = tape.mul(bw, bh);
    let areas = tape.add(area_a, area_b);
    let union = tape.sub(areas, inter);
    let union_eps = tape.affine(union, 1.0, eps);
    let iou = tape.div(inter, union_eps);

    let ex1 = tape.min_el(ax1, bx1);
    let ey1 = tape.min_el(ay1, by1);
    let ex2 = tape.max_el(ax2, bx2);
    let ey2 = tape.max_el(ay2, by2);
    let ew = tape.sub(ex2, ex1);
    let eh = tape.sub(ey2, ey1);
    let enclose = tape.mul(ew, eh);
    let enclose_eps = tape.affine(enclose, 1.0, eps);
    let gap = tape.sub(enclose, union);
    let penalty = tape.div(gap, enclose_eps);
    tape.sub(iou, penalty)
}

/// Mean binary cross-entropy with logits against a constant target matrix:
/// `mean(softplus(x) - x * t)`.
fn bce_mean(tape: &mut Tape, logits: NodeId, targets: &Array2<f64>) -> NodeId {
    let sp = tape.softplus(logits);
    let xt = tape.mul_const(logits, Arc::new(targets.clone()));
    let per_entry = tape.sub(sp, xt);
    tape.mean_all(per_entry)
}

/// Per-entry weighted BCE, normalized by the weight mass so uniform weights
/// reduce to the plain mean.
fn weighted_bce(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Array2<f64>,
    weights: &Array2<f64>,
) -> NodeId {
    let sp = tape.softplus(logits);
    let xt = tape.mul_const(logits, Arc::new(targets.clone()));
    let per_entry = tape.sub(sp, xt);
    let weighted = tape.mul_const(per_entry, Arc::new(weights.clone()));
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / weights.sum())
}

/// Per-query weighted softmax cross-entropy, normalized by the weight mass.
fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    query_weights: &[f64],
) -> NodeId {
    let lse = tape.logsumexp_rows(logits);
    let picked = tape.select_cols_per_row(logits, Arc::new(targets.to_vec()));
    let ce = tape.sub(lse, picked);
    let w = Array2::from_shape_vec((query_weights.len(), 1), query_weights.to_vec())
        .expect("weight column");
    let weighted = tape.mul_const(ce, Arc::new(w));
    let sum = tape.sum_all(weighted);
    tape.scale(sum, 1.0 / query_weights.iter().sum::<f64>())
}
