//! Geometry and metric oracles: rasterized IoU on integer boxes, a
//! definitional brute-force target assignment, an O(n²) keep-if-nothing-
//! better NMS, and plain-loop losses and metrics over box pairs.

use defectvit_core::anchors::{AnchorState, BBox, ScoredBox};

/// IoU by counting unit pixels; exact for integer-coordinate boxes.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let x_lo = a.x1.min(b.x1).floor() as i64;
    let x_hi = a.x2.max(b.x2).ceil() as i64;
    let y_lo = a.y1.min(b.y1).floor() as i64;
    let y_hi = a.y2.max(b.y2).ceil() as i64;
    let inside = |bx: &BBox, x: i64, y: i64| -> bool {
        // a unit cell [x, x+1) x [y, y+1) is inside when its origin is
        (x as f64) >= bx.x1 && ((x + 1) as f64) <= bx.x2 && (y as f64) >= bx.y1 && ((y + 1) as f64) <= bx.y2
    };
    let mut inter = 0u64;
    let mut union = 0u64;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let ia = inside(a, x, y);
            let ib = inside(b, x, y);
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    // local analytic IoU so the oracle does not lean on the engine
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Definitional dual-threshold assignment with force-matching, written as
/// three independent passes:
/// 1. per anchor, best GT by (IoU, lower index) and the threshold rule;
/// 2. per GT, its best anchor by (IoU, lower index);
/// 3. anchors claimed by force-matching take the best claimant unless a
///    strictly better threshold assignment already holds.
pub fn brute_force_assign(anchors: &[BBox], gts: &[BBox], upper: f64, lower: f64) -> Vec<AnchorState> {
    if gts.is_empty() {
        return vec![AnchorState::Background; anchors.len()];
    }
    let mut states: Vec<AnchorState> = anchors
        .iter()
        .map(|anchor| {
            let mut best_g = 0usize;
            let mut best = f64::NEG_INFINITY;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(anchor, gt);
                if v > best {
                    best = v;
                    best_g = g;
                }
            }
            if best > upper {
                AnchorState::Assigned { gt_index: best_g }
            } else if best < lower {
                AnchorState::Background
            } else {
                AnchorState::Discarded
            }
        })
        .collect();

    for (i, anchor) in anchors.iter().enumerate() {
        // every GT whose single best anchor is i claims it
        let mut claim: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let mut best_anchor = 0usize;
            let mut best = f64::NEG_INFINITY;
            for (j, a2) in anchors.iter().enumerate() {
                let v = iou(a2, gt);
                if v > best {
                    best = v;
                    best_anchor = j;
                }
            }
            if best_anchor == i {
                let v = iou(anchor, gt);
                let better = match claim {
                    None => true,
                    Some((cg, cv)) => v > cv || (v == cv && g < cg),
                };
                if better {
                    claim = Some((g, v));
                }
            }
        }
        if let Some((g, v)) = claim {
            match states[i] {
                AnchorState::Assigned { gt_index } => {
                    let cur = iou(anchor, &gts[gt_index]);
                    if v > cur || (v == cur && g < gt_index) {
                        states[i] = AnchorState::Assigned { gt_index: g };
                    }
                }
                _ => states[i] = AnchorState::Assigned { gt_index: g },
            }
        }
    }
    states
}

/// O(n²) NMS reference: a box survives when no kept higher-priority box of
/// the same class overlaps it beyond the threshold; priority is (score,
/// then lower index). Computed by repeated scans rather than sorting.
pub fn nms_reference(
    boxes: &[ScoredBox],
    iou_threshold: f64,
    score_threshold: f64,
) -> Vec<ScoredBox> {
    let candidates: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].score >= score_threshold)
        .collect();
    let priority = |i: usize, j: usize| -> bool {
        // true when i outranks j
        boxes[i].score > boxes[j].score || (boxes[i].score == boxes[j].score && i < j)
    };
    let mut kept: Vec<usize> = Vec::new();
    loop {
        // pick the highest-priority unprocessed candidate
        let mut next: Option<usize> = None;
        for &i in &candidates {
            if kept.contains(&i) || suppressed(&kept, boxes, i, iou_threshold) {
                continue;
            }
            next = match next {
                None => Some(i),
                Some(cur) => {
                    if priority(i, cur) {
                        Some(i)
                    } else {
                        Some(cur)
                    }
                }
            };
        }
        match next {
            Some(i) => kept.push(i),
            None => break,
        }
    }
    kept.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    kept.into_iter().map(|i| boxes[i]).collect()
}

fn suppressed(kept: &[usize], boxes: &[ScoredBox], i: usize, thr: f64) -> bool {
    kept.iter()
        .any(|&j| boxes[j].class_id == boxes[i].class_id && iou(&boxes[j].bbox, &boxes[i].bbox) > thr)
}

/// Accuracy by explicit double loop over anchors and classes.
pub fn loop_accuracy(y_true: &[f32], y_pred: &[f32], c: usize) -> Option<f64> {
    let background = c - 1;
    let rows = y_true.len() / c;
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in 0..rows {
        let mut t_best = 0;
        let mut p_best = 0;
        for m in 0..c {
            if y_true[r * c + m] > y_true[r * c + t_best] {
                t_best = m;
            }
            if y_pred[r * c + m] > y_pred[r * c + p_best] {
                p_best = m;
            }
        }
        if t_best == background {
            continue;
        }
        total += 1;
        if p_best == t_best {
            correct += 1;
        }
    }
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

/// MAE over (x, y, w, h) by explicit loop.
pub fn loop_mae(pairs: &[(BBox, BBox)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        let ax = a.x1;
        let ay = a.y1;
        let aw = a.x2 - a.x1;
        let ah = a.y2 - a.y1;
        let bx = b.x1;
        let by = b.y1;
        let bw = b.x2 - b.x1;
        let bh = b.y2 - b.y1;
        sum += (ax - bx).abs() + (ay - by).abs() + (aw - bw).abs() + (ah - bh).abs();
    }
    Some(sum / pairs.len() as f64)
}

pub fn loop_mean_iou(pairs: &[(BBox, BBox)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += iou(a, b);
    }
    Some(sum / pairs.len() as f64)
}
