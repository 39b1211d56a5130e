//! Evaluation metrics: classification accuracy over non-background anchors,
//! mean absolute error over matched box pairs in (x, y, w, h) pixel form,
//! and mean IoU over matched pairs, plus the greedy matcher that pairs
//! predictions with ground truths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox, ScoredBox};

/// Accuracy over anchors whose true class is not background; `None` when no
/// such anchor exists (flagged "undefined" in reports).
pub fn modified_accuracy(y_true: &[f32], y_pred: &[f32], num_classes: usize) -> Option<f64> {
    let (correct, total) = accuracy_counts(y_true, y_pred, num_classes);
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

/// (correct, considered) pair behind [`modified_accuracy`]; lets evaluation
/// shards merge by count-weighted averaging.
pub fn accuracy_counts(y_true: &[f32], y_pred: &[f32], num_classes: usize) -> (usize, usize) {
    assert_eq!(y_true.len(), y_pred.len(), "accuracy shape mismatch");
    let background = num_classes - 1;
    let mut correct = 0;
    let mut total = 0;
    for (trow, prow) in y_true.chunks(num_classes).zip(y_pred.chunks(num_classes)) {
        let t = argmax(trow);
        if t == background {
            continue;
        }
        total += 1;
        if argmax(prow) == t {
            correct += 1;
        }
    }
    (correct, total)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over pairs of |Δx| + |Δy| + |Δw| + |Δh|, boxes in (x, y, w, h)
/// pixel form with (x, y) the top-left corner. `None` on an empty pair set.
pub fn modified_mae(pairs: &[(BBox, BBox)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(gt, pred)| {
            let g = gt.to_xywh();
            let p = pred.to_xywh();
            (0..4).map(|i| (g[i] - p[i]).abs()).sum::<f64>()
        })
        .sum();
    Some(sum / pairs.len() as f64)
}

/// Arithmetic mean of IoU over matched pairs; `None` on an empty pair set.
pub fn mean_iou(pairs: &[(BBox, BBox)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs.iter().map(|(a, b)| iou(a, b)).sum();
    Some(sum / pairs.len() as f64)
}

/// One matched (ground truth, prediction) pair.
#[derive(Debug, Clone, Copy)]
pub struct MatchedPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub iou: f64,
}

/// Outcome of greedy matching for one image.
#[derive(Debug, Clone, Default)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gts: Vec<usize>,
    pub unmatched_preds: Vec<usize>,
}

/// Greedy highest-IoU matching between predictions and ground truths with a
/// floor: candidate pairs sorted by IoU descending (ties toward lower
/// prediction then ground-truth index), each side matched at most once,
/// pairs below `iou_floor` never matched.
pub fn match_predictions(gts: &[BBox], preds: &[ScoredBox], iou_floor: f64) -> Matching {
    let mut candidates = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(g, &p.bbox);
            if v >= iou_floor {
                candidates.push((pi, gi, v));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut pred_taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for (pi, gi, v) in candidates {
        if !gt_taken[gi] && !pred_taken[pi] {
            gt_taken[gi] = true;
            pred_taken[pi] = true;
            pairs.push(MatchedPair {
                gt_index: gi,
                pred_index: pi,
                iou: v,
            });
        }
    }
    Matching {
        pairs,
        unmatched_gts: (0..gts.len()).filter(|&i| !gt_taken[i]).collect(),
        unmatched_preds: (0..preds.len()).filter(|&i| !pred_taken[i]).collect(),
    }
}

/// Per-class tallies for an evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ground_truths: usize,
    pub predictions: usize,
    pub matched: usize,
    pub class_correct: usize,
}

/// Aggregated evaluation result over a split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Anchor-level classification accuracy; `None` = undefined.
    pub accuracy: Option<f64>,
    pub accuracy_correct: usize,
    pub accuracy_total: usize,
    /// Pixel MAE over matched pairs; `None` = undefined.
    pub mae: Option<f64>,
    /// Mean IoU over matched pairs; `None` = undefined.
    pub mean_iou: Option<f64>,
    pub matched_pairs: usize,
    pub unmatched_ground_truths: usize,
    pub unmatched_predictions: usize,
    pub invalid_box_drops: usize,
    pub per_class_counts: BTreeMap<String, ClassCounts>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_all_correct() {
        // 2 assigned anchors (classes 0, 1), 1 background; all predicted right
        let y_true = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let y_pred = [0.8, 0.1, 0.1, 0.2, 0.7, 0.1, 0.1, 0.1, 0.8];
        assert_eq!(modified_accuracy(&y_true, &y_pred, 3), Some(1.0));
    }

    #[test]
    fn accuracy_two_of_three() {
        let y_true = [
            1.0, 0.0, 0.0, // anchor 0: class 0
            0.0, 1.0, 0.0, // anchor 1: class 1
            1.0, 0.0, 0.0, // anchor 2: class 0
        ];
        let y_pred = [
            0.8, 0.1, 0.1, // correct
            0.7, 0.2, 0.1, // wrong
            0.9, 0.05, 0.05, // correct
        ];
        let acc = modified_accuracy(&y_true, &y_pred, 3).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_undefined_without_assigned_anchors() {
        let y_true = [0.0, 0.0, 1.0];
        let y_pred = [0.5, 0.3, 0.2];
        assert_eq!(modified_accuracy(&y_true, &y_pred, 3), None);
    }

    #[test]
    fn mae_identical_pairs_is_zero() {
        let b = BBox::new(1.0, 2.0, 5.0, 7.0);
        assert_eq!(modified_mae(&[(b, b)]), Some(0.0));
    }

    #[test]
    fn mae_single_x_shift() {
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0);
        let pred = BBox::new(13.0, 10.0, 23.0, 20.0);
        // Δx = 3, w and h unchanged
        assert_eq!(modified_mae(&[(gt, pred)]), Some(3.0));
    }

    #[test]
    fn mae_undefined_on_empty() {
        assert_eq!(modified_mae(&[]), None);
        assert_eq!(mean_iou(&[]), None);
    }

    #[test]
    fn mean_iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let m = mean_iou(&[(a, b), (a, a)]).unwrap();
        assert!((m - (1.0 / 7.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!((m - 0.5714).abs() < 1e-4);
    }

    #[test]
    fn matching_prefers_highest_iou_and_respects_floor() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)];
        let preds = vec![
            ScoredBox {
                bbox: BBox::new(1.0, 1.0, 11.0, 11.0),
                class_id: 0,
                score: 0.9,
            },
            ScoredBox {
                bbox: BBox::new(50.0, 50.0, 60.0, 60.0),
                class_id: 0,
                score: 0.8,
            },
        ];
        let m = match_predictions(&gts, &preds, 0.3);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].gt_index, 0);
        assert_eq!(m.pairs[0].pred_index, 0);
        assert_eq!(m.unmatched_gts, vec![1]);
        assert_eq!(m.unmatched_preds, vec![1]);
    }
}
