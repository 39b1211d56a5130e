//! Background-aware training losses: cross-entropy that skips anchors whose
//! true class is background, and squared error averaged only over rows with
//! non-zero true offsets. Skipping (rather than masking) keeps the result
//! bit-identical under appended background rows.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Scalar loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cce: f64,
    pub mse: f64,
    pub total: f64,
    pub matched_anchor_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the regression term: total = cce + lambda · mse.
    pub lambda: f32,
    /// Divide the cross-entropy sum by the matched-anchor count. The raw
    /// sum is the reference semantics; normalization is a training aid.
    pub normalize_cce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            normalize_cce: false,
        }
    }
}

/// Cross-entropy over non-background anchors. `y_true` rows are one-hot
/// (background = last class); `y_pred` rows are distributions. Returns the
/// unnormalized sum, differentiable w.r.t. `y_pred`.
pub fn modified_cce(tape: &Tape, y_true: &Tensor, y_pred: &Tensor) -> Result<Tensor> {
    let num_classes = y_true.shape()[y_true.shape().len() - 1];
    tape.modified_cce(y_true, y_pred, num_classes - 1)
}

/// Squared error summed over rows whose true offsets are not all zero,
/// divided by the number of such rows (0 when none qualify).
pub fn modified_mse(tape: &Tape, y_true: &Tensor, y_pred: &Tensor) -> Result<Tensor> {
    tape.modified_mse(y_true, y_pred)
}

/// Combined loss for one batch of stacked anchor rows. Returns the scalar
/// tensor to backpropagate plus the numeric report.
pub fn combined_loss(
    tape: &Tape,
    class_true: &Tensor,
    class_pred: &Tensor,
    offsets_true: &Tensor,
    offsets_pred: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    let num_classes = class_true.shape()[class_true.shape().len() - 1];
    let background = num_classes - 1;
    let matched = class_true
        .data()
        .chunks(num_classes)
        .filter(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best != background
        })
        .count();

    let mut cce = modified_cce(tape, class_true, class_pred)?;
    if cfg.normalize_cce && matched > 0 {
        cce = tape.mul_scalar(&cce, 1.0 / matched as f32)?;
    }
    let mse = modified_mse(tape, offsets_true, offsets_pred)?;
    let weighted = tape.mul_scalar(&mse, cfg.lambda)?;
    let total = tape.add(&cce, &weighted)?;
    let report = LossReport {
        cce: cce.item() as f64,
        mse: mse.item() as f64,
        total: total.item() as f64,
        matched_anchor_count: matched,
    };
    Ok((total, report))
}
