//! Anchor-box machinery: grid construction, IoU, dual-threshold ground-truth
//! assignment with force-matching, corner-offset encoding, min-max scaling of
//! offsets, and per-class non-maximum suppression.
//!
//! All operations here are pure functions on immutable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form, pixel coordinates, origin top-left.
/// `class_id` is carried by ground-truth boxes only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_id: Option<usize>,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            class_id: None,
        }
    }

    pub fn with_class(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            class_id: Some(class_id),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            class_id: self.class_id,
        }
    }

    /// (x, y, w, h) with (x, y) the top-left corner.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fixed anchor set tiled over the image: one anchor per
/// (cell, scale, ratio), row-major cells, scale-major within a cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub image_size: usize,
    pub grid_stride: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds the anchor grid. Anchors are centered on cell centers, sized
/// `w = scale·√ratio`, `h = scale/√ratio`, and clipped to the image.
pub fn build_anchor_grid(
    image_size: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if stride == 0 || image_size % stride != 0 {
        return Err(Error::Parameter(format!(
            "stride {stride} must divide image size {image_size}"
        )));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Parameter("scales and ratios must be non-empty".into()));
    }
    let cells = image_size / stride;
    let size = image_size as f64;
    let mut anchors = Vec::with_capacity(cells * cells * scales.len() * ratios.len());
    for row in 0..cells {
        for col in 0..cells {
            let cx = (col as f64 + 0.5) * stride as f64;
            let cy = (row as f64 + 0.5) * stride as f64;
            for &scale in scales {
                for &ratio in ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    let boxed = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
                        .clipped(size, size);
                    if !boxed.is_valid() {
                        return Err(Error::Construction(format!(
                            "anchor at cell ({row},{col}) scale {scale} ratio {ratio} is degenerate after clipping"
                        )));
                    }
                    anchors.push(boxed);
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        image_size,
        grid_stride: stride,
        scales: scales.to_vec(),
        aspect_ratios: ratios.to_vec(),
    })
}

/// Corner-form offsets of `gt` relative to `anchor`, scale-normalized by the
/// anchor extent: `(Δx1/aw, Δy1/ah, Δx2/aw, Δy2/ah)`.
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let aw = anchor.width();
    let ah = anchor.height();
    [
        (gt.x1 - anchor.x1) / aw,
        (gt.y1 - anchor.y1) / ah,
        (gt.x2 - anchor.x2) / aw,
        (gt.y2 - anchor.y2) / ah,
    ]
}

/// Exact inverse of [`encode_offsets`]. The caller drops boxes that decode
/// to a non-positive extent.
pub fn decode_offsets(anchor: &BBox, offsets: &[f64; 4]) -> BBox {
    let aw = anchor.width();
    let ah = anchor.height();
    BBox::new(
        anchor.x1 + offsets[0] * aw,
        anchor.y1 + offsets[1] * ah,
        anchor.x2 + offsets[2] * aw,
        anchor.y2 + offsets[3] * ah,
    )
}

/// Per-channel affine normalization of offsets to [0, 1], fit on the
/// training population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl MinMaxScaler {
    /// Fits channel extremes. Errors on a constant channel (or fewer than
    /// two distinct values), naming the offending channel.
    pub fn fit(all_offsets: &[[f64; 4]]) -> Result<Self> {
        if all_offsets.len() < 2 {
            return Err(Error::Parameter(format!(
                "scaler fit needs at least 2 offset rows, got {}",
                all_offsets.len()
            )));
        }
        let mut min = [f64::INFINITY; 4];
        let mut max = [f64::NEG_INFINITY; 4];
        for row in all_offsets {
            for ch in 0..4 {
                min[ch] = min[ch].min(row[ch]);
                max[ch] = max[ch].max(row[ch]);
            }
        }
        for ch in 0..4 {
            if !(max[ch] > min[ch]) {
                return Err(Error::ScalerFit {
                    channel: ch,
                    value: min[ch],
                });
            }
        }
        Ok(Self { min, max })
    }

    /// Maps to [0, 1]; values outside the fit range clamp.
    pub fn apply(&self, offsets: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for ch in 0..4 {
            out[ch] = ((offsets[ch] - self.min[ch]) / (self.max[ch] - self.min[ch])).clamp(0.0, 1.0);
        }
        out
    }

    /// Exact inverse of `apply` for in-range values. No clamping: sigmoid
    /// outputs may legitimately invert to offsets slightly outside the
    /// training range.
    pub fn invert(&self, scaled: &[f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for ch in 0..4 {
            out[ch] = scaled[ch] * (self.max[ch] - self.min[ch]) + self.min[ch];
        }
        out
    }
}

/// Assignment outcome for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    /// Matched to the ground-truth box at this index.
    Assigned { gt_index: usize },
    Background,
    /// IoU between the thresholds; ignored by both losses.
    Discarded,
}

/// Per-anchor training targets: class one-hot (background included, last
/// index) and min-max-scaled corner offsets. Offsets are all-zero exactly
/// for background and discarded anchors.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    pub num_classes: usize,
    pub class_onehot: Vec<f32>,
    pub offsets: Vec<f32>,
    pub assignment_state: Vec<AnchorState>,
}

impl AnchorTargets {
    pub fn num_anchors(&self) -> usize {
        self.assignment_state.len()
    }

    pub fn matched_count(&self) -> usize {
        self.assignment_state
            .iter()
            .filter(|s| matches!(s, AnchorState::Assigned { .. }))
            .count()
    }
}

/// Dual-threshold assignment per anchor, with force-matching:
///
/// - per anchor, the best-IoU ground truth wins (ties broken by lower GT
///   index); IoU above `upper` assigns, below `lower` marks background,
///   in between discards;
/// - additionally every ground truth claims its single best-IoU anchor
///   (ties broken by lower anchor index) even below `upper`, unless that
///   anchor already carries a strictly better threshold assignment;
/// - with no ground truths at all, every anchor is background.
pub fn assign_states(
    grid: &AnchorGrid,
    gts: &[BBox],
    upper: f64,
    lower: f64,
) -> Result<Vec<AnchorState>> {
    if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
        return Err(Error::Parameter(format!(
            "thresholds must satisfy 0 <= lower < upper <= 1, got lower {lower}, upper {upper}"
        )));
    }
    let n = grid.len();
    if gts.is_empty() {
        return Ok(vec![AnchorState::Background; n]);
    }

    let mut states = Vec::with_capacity(n);
    let mut ious = vec![0.0f64; n * gts.len()];
    for (i, anchor) in grid.anchors.iter().enumerate() {
        let mut best_gt = 0usize;
        let mut best_iou = f64::NEG_INFINITY;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            ious[i * gts.len() + g] = v;
            if v > best_iou {
                best_iou = v;
                best_gt = g;
            }
        }
        states.push(if best_iou > upper {
            AnchorState::Assigned { gt_index: best_gt }
        } else if best_iou < lower {
            AnchorState::Background
        } else {
            AnchorState::Discarded
        });
    }

    // force-match: each GT claims its best anchor
    for (g, _gt) in gts.iter().enumerate() {
        let mut best_anchor = 0usize;
        let mut best_iou = f64::NEG_INFINITY;
        for i in 0..n {
            let v = ious[i * gts.len() + g];
            if v > best_iou {
                best_iou = v;
                best_anchor = i;
            }
        }
        match states[best_anchor] {
            AnchorState::Assigned { gt_index } => {
                // keep whichever GT overlaps more; lower index wins a tie
                let cur = ious[best_anchor * gts.len() + gt_index];
                if best_iou > cur || (best_iou == cur && g < gt_index) {
                    states[best_anchor] = AnchorState::Assigned { gt_index: g };
                }
            }
            _ => states[best_anchor] = AnchorState::Assigned { gt_index: g },
        }
    }
    Ok(states)
}

/// Full target construction: states plus class one-hots and scaled offsets.
/// `num_classes` includes the background class at the last index. Assigned
/// anchors must reference ground truths that carry a class id.
pub fn assign_targets(
    grid: &AnchorGrid,
    gts: &[BBox],
    upper: f64,
    lower: f64,
    num_classes: usize,
    scaler: &MinMaxScaler,
) -> Result<AnchorTargets> {
    let states = assign_states(grid, gts, upper, lower)?;
    let background = num_classes - 1;
    let n = grid.len();
    let mut class_onehot = vec![0.0f32; n * num_classes];
    let mut offsets = vec![0.0f32; n * 4];
    for (i, state) in states.iter().enumerate() {
        match *state {
            AnchorState::Assigned { gt_index } => {
                let gt = &gts[gt_index];
                let class = gt.class_id.ok_or_else(|| {
                    Error::Contract(format!("ground truth {gt_index} has no class id"))
                })?;
                if class >= background {
                    return Err(Error::Contract(format!(
                        "ground truth class {class} collides with background index {background}"
                    )));
                }
                class_onehot[i * num_classes + class] = 1.0;
                let raw = encode_offsets(&grid.anchors[i], gt);
                let scaled = scaler.apply(&raw);
                for ch in 0..4 {
                    offsets[i * 4 + ch] = scaled[ch] as f32;
                }
            }
            AnchorState::Background | AnchorState::Discarded => {
                class_onehot[i * num_classes + background] = 1.0;
            }
        }
    }
    Ok(AnchorTargets {
        num_classes,
        class_onehot,
        offsets,
        assignment_state: states,
    })
}

/// Raw (unscaled) offsets of every assigned anchor; the scaler-fit
/// population for a training split.
pub fn collect_raw_offsets(
    grid: &AnchorGrid,
    gts: &[BBox],
    upper: f64,
    lower: f64,
) -> Result<Vec<[f64; 4]>> {
    let states = assign_states(grid, gts, upper, lower)?;
    let mut out = Vec::new();
    for (i, state) in states.iter().enumerate() {
        if let AnchorState::Assigned { gt_index } = state {
            out.push(encode_offsets(&grid.anchors[i], &gts[*gt_index]));
        }
    }
    Ok(out)
}

/// A scored, classified box entering or leaving NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy per-class non-maximum suppression.
///
/// Boxes under `score_threshold` are dropped first. Within each class, the
/// highest-scoring box is kept and same-class boxes with IoU strictly above
/// `iou_threshold` are suppressed. Output is sorted by descending score;
/// ties break toward the lower input index.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, score_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            boxes[j].class_id == boxes[i].class_id && iou(&boxes[j].bbox, &boxes[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i]).collect()
}
