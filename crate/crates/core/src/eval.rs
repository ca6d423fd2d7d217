//! Mean average precision over (object class, action) detection classes.
//!
//! A prediction is a true positive when some not-yet-claimed ground-truth
//! pair of the same class in the same image overlaps it with both box IoUs
//! above 0.5. Per class, predictions are ranked by score across all images
//! and the average precision is the area under the precision envelope.
//! Classes without ground truth are excluded from every mean.

use crate::data::{Dataset, HoiClassTable};
use crate::geometry::BoundingBox;
use crate::postproc::ScoredTriplet;
use std::collections::HashMap;
use std::fmt::Write as _;

/// IoU both boxes must exceed for a prediction to count as a hit.
pub const MATCH_IOU: f64 = 0.5;

/// Per-class evaluation outcome.
#[derive(Debug, Clone)]
pub struct ClassEval {
    pub ap: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// Raw precision values after each ranked prediction.
    pub precision: Vec<f64>,
    /// Raw recall values after each ranked prediction.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Indexed by HOI class id (`object_class * C_a + action`).
    pub per_class: Vec<ClassEval>,
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
}

/// Greedily flags ranked same-class predictions against ground truths of one
/// image. `preds` must already be sorted by descending score.
///
/// Each ground truth is claimed at most once; a prediction claims the
/// eligible ground truth with the largest `min(iou_h, iou_o)`, ties going to
/// the lower index.
pub fn match_to_gt(
    preds: &[(BoundingBox, BoundingBox)],
    gts: &[(BoundingBox, BoundingBox)],
) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    preds
        .iter()
        .map(|(ph, po)| {
            let mut best: Option<(usize, f64)> = None;
            for (i, (gh, go)) in gts.iter().enumerate() {
                if claimed[i] {
                    continue;
                }
                let iou_h = ph.iou(gh);
                let iou_o = po.iou(go);
                if iou_h > MATCH_IOU && iou_o > MATCH_IOU {
                    let quality = iou_h.min(iou_o);
                    if best.is_none_or(|(_, q)| quality > q) {
                        best = Some((i, quality));
                    }
                }
            }
            match best {
                Some((i, _)) => {
                    claimed[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-recall curve with the all-point precision
/// envelope. `flags` must be ordered by descending score.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let (precision, recall) = precision_recall(flags, num_gt);
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..flags.len()).rev() {
        envelope = envelope.max(precision[i]);
        let prev_recall = if i == 0 { 0.0 } else { recall[i - 1] };
        ap += (recall[i] - prev_recall) * envelope;
    }
    ap
}

fn precision_recall(flags: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    (precision, recall)
}

/// Evaluates predictions against ground truth for every HOI class.
pub fn evaluate(
    dataset: &Dataset,
    predictions: &[ScoredTriplet],
    table: &HoiClassTable,
) -> EvalResult {
    let c_a = dataset.meta.num_action_classes;
    let num_classes = dataset.meta.num_object_classes * c_a;

    // Ground truths bucketed by (image, class).
    let mut gt_by_image_class: HashMap<(&str, usize), Vec<(BoundingBox, BoundingBox)>> =
        HashMap::new();
    let mut gt_count = vec![0usize; num_classes];
    for ann in &dataset.annotations {
        for inst in &ann.instances {
            for &a in &inst.actions {
                let class = inst.object_class * c_a + a;
                gt_count[class] += 1;
                gt_by_image_class
                    .entry((ann.image_id.as_str(), class))
                    .or_default()
                    .push((inst.human_box, inst.object_box));
            }
        }
    }

    // Predictions bucketed by class, ranked by score (ties keep input order).
    let mut preds_by_class: Vec<Vec<&ScoredTriplet>> = vec![Vec::new(); num_classes];
    for t in predictions {
        preds_by_class[t.object_class * c_a + t.action].push(t);
    }

    let mut per_class = Vec::with_capacity(num_classes);
    for (class, mut preds) in preds_by_class.into_iter().enumerate() {
        preds.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));

        // Flag each ranked prediction, claiming ground truth per image.
        let mut claimed: HashMap<&str, Vec<bool>> = HashMap::new();
        let mut flags = Vec::with_capacity(preds.len());
        for p in &preds {
            let flag = match gt_by_image_class.get(&(p.image_id.as_str(), class)) {
                Some(gts) => {
                    let claimed = claimed
                        .entry(p.image_id.as_str())
                        .or_insert_with(|| vec![false; gts.len()]);
                    let mut best: Option<(usize, f64)> = None;
                    for (i, (gh, go)) in gts.iter().enumerate() {
                        if claimed[i] {
                            continue;
                        }
                        let iou_h = p.human_box.iou(gh);
                        let iou_o = p.object_box.iou(go);
                        if iou_h > MATCH_IOU && iou_o > MATCH_IOU {
                            let quality = iou_h.min(iou_o);
                            if best.is_none_or(|(_, q)| quality > q) {
                                best = Some((i, quality));
                            }
                        }
                    }
                    match best {
                        Some((i, _)) => {
                            claimed[i] = true;
                            true
                        }
                        None => false,
                    }
                }
                None => false,
            };
            flags.push(flag);
        }

        let num_gt = gt_count[class];
        let (precision, recall) = precision_recall(&flags, num_gt.max(1));
        per_class.push(ClassEval {
            ap: average_precision(&flags, num_gt),
            num_gt,
            num_predictions: preds.len(),
            precision,
            recall,
        });
    }

    let mean_over = |keep: &dyn Fn(usize) -> bool| {
        let aps: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(k, c)| c.num_gt > 0 && keep(*k))
            .map(|(_, c)| c.ap)
            .collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    };
    let map_full = mean_over(&|_| true);
    let map_rare = mean_over(&|k| table.entries[k].rare);
    let map_nonrare = mean_over(&|k| !table.entries[k].rare);

    EvalResult {
        per_class,
        map_full,
        map_rare,
        map_nonrare,
    }
}

/// Renders the fixed-format evaluation report.
pub fn render_report(result: &EvalResult, table: &HoiClassTable) -> String {
    let count = |keep: &dyn Fn(usize) -> bool| {
        result
            .per_class
            .iter()
            .enumerate()
            .filter(|(k, c)| c.num_gt > 0 && keep(*k))
            .count()
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "mAP full     {:.6}  over {} classes",
        result.map_full,
        count(&|_| true)
    );
    let _ = writeln!(
        out,
        "mAP rare     {:.6}  over {} classes",
        result.map_rare,
        count(&|k| table.entries[k].rare)
    );
    let _ = writeln!(
        out,
        "mAP non-rare {:.6}  over {} classes",
        result.map_nonrare,
        count(&|k| !table.entries[k].rare)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "class object action train_count rare gt preds ap");
    for (k, c) in result.per_class.iter().enumerate() {
        let e = &table.entries[k];
        let _ = writeln!(
            out,
            "{k} {} {} {} {} {} {} {:.6}",
            e.object_class,
            e.action,
            e.train_count,
            if e.rare { "yes" } else { "no" },
            c.num_gt,
            c.num_predictions,
            c.ap
        );
    }
    out
}
