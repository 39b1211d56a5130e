//! The full detector: encoder (ViT, or a raw-patch passthrough for the
//! no-transformer ablation) feeding the shared CNN trunk and twin heads,
//! plus the box-space prediction path (decode, clip, background filter,
//! class-wise NMS).

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_offsets, nms, AnchorGrid, BBox, MinMaxScaler, ScoredBox};
use crate::error::{Error, Result};
use crate::head::{heads, trunk, DetectionOutput, HeadConfig, HeadWeights};
use crate::rng::chacha;
use crate::tensor::{Mode, Tape, Tensor};
use crate::vit::{encode, patchify, ViTConfig, ViTWeights};

/// Which feature extractor sits in front of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Vit,
    /// Ablation: flattened raw patches go straight to the trunk
    /// (embed dim = channels · patch²).
    RawPatch,
}

pub struct Detector {
    pub vit_cfg: ViTConfig,
    pub head_cfg: HeadConfig,
    pub encoder: EncoderKind,
    pub vit_weights: Option<ViTWeights>,
    pub head_weights: HeadWeights,
}

/// NMS and confidence settings for the prediction path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PredictParams {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PredictParams {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            nms_iou: 0.45,
        }
    }
}

/// Counters from one prediction pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictDiagnostics {
    /// Anchors whose argmax class was background.
    pub background_anchors: usize,
    /// Survivors dropped for decoding to a degenerate box.
    pub invalid_boxes: usize,
    /// Survivors dropped for scoring under the confidence threshold.
    pub low_confidence: usize,
}

impl Detector {
    pub fn embed_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Vit => self.vit_cfg.embed_dim,
            EncoderKind::RawPatch => self.vit_cfg.patch_dim(),
        }
    }

    pub fn init(
        vit_cfg: ViTConfig,
        head_cfg: HeadConfig,
        encoder: EncoderKind,
        seed: u64,
    ) -> Result<Self> {
        vit_cfg.validate()?;
        head_cfg.validate()?;
        let mut rng = chacha(seed);
        let vit_weights = match encoder {
            EncoderKind::Vit => Some(ViTWeights::init(&vit_cfg, &mut rng)?),
            EncoderKind::RawPatch => None,
        };
        let embed_dim = match encoder {
            EncoderKind::Vit => vit_cfg.embed_dim,
            EncoderKind::RawPatch => vit_cfg.patch_dim(),
        };
        let head_weights = HeadWeights::init(&head_cfg, embed_dim, vit_cfg.num_patches(), &mut rng)?;
        Ok(Self {
            vit_cfg,
            head_cfg,
            encoder,
            vit_weights,
            head_weights,
        })
    }

    /// Stable (name, tensor) list; order defines optimizer-state layout and
    /// the checkpoint payload order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(vw) = &self.vit_weights {
            out.extend(vw.named_params());
        }
        out.extend(self.head_weights.named_params());
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// End-to-end forward on one preprocessed `[c×h×w]` image.
    pub fn forward(&self, tape: &Tape, image: &Tensor, mode: Mode) -> Result<DetectionOutput> {
        let embeddings = match self.encoder {
            EncoderKind::Vit => {
                let w = self
                    .vit_weights
                    .as_ref()
                    .ok_or_else(|| Error::Config("ViT encoder selected but no weights".into()))?;
                encode(tape, image, &self.vit_cfg, w, mode)?
            }
            EncoderKind::RawPatch => {
                if image.shape() != [self.vit_cfg.channels, self.vit_cfg.image_size, self.vit_cfg.image_size] {
                    return Err(Error::Config(format!(
                        "image shape {:?} does not match config",
                        image.shape()
                    )));
                }
                patchify(image, self.vit_cfg.patch_size)?
            }
        };
        let shared = trunk(tape, &embeddings, &self.head_cfg, &self.head_weights)?;
        heads(tape, &shared, &self.head_cfg, &self.head_weights, mode)
    }

    /// Box-space prediction on one preprocessed image: forward in eval mode,
    /// drop background-argmax anchors, invert the offset scaler, decode
    /// against each anchor, clip to image bounds, then class-wise NMS.
    /// Scores are the argmax-class softmax probability.
    pub fn predict(
        &self,
        image: &Tensor,
        grid: &AnchorGrid,
        scaler: &MinMaxScaler,
        params: &PredictParams,
    ) -> Result<(Vec<ScoredBox>, PredictDiagnostics)> {
        if grid.len() != self.head_cfg.num_anchors {
            return Err(Error::Config(format!(
                "grid has {} anchors but head expects {}",
                grid.len(),
                self.head_cfg.num_anchors
            )));
        }
        let tape = Tape::new();
        let out = self.forward(&tape, image, Mode::Eval)?;
        Ok(boxes_from_output(
            &out.class_probs.to_vec(),
            &out.offsets.to_vec(),
            self.head_cfg.num_classes,
            grid,
            scaler,
            params,
        ))
    }
}

/// Shared tail of the prediction path, reusable on cached forward outputs:
/// background filter, confidence filter, scaler inversion, decode, clip,
/// class-wise NMS.
pub fn boxes_from_output(
    probs: &[f32],
    offsets: &[f32],
    num_classes: usize,
    grid: &AnchorGrid,
    scaler: &MinMaxScaler,
    params: &PredictParams,
) -> (Vec<ScoredBox>, PredictDiagnostics) {
    let c = num_classes;
    let background = c - 1;
    let size = grid.image_size as f64;
    let mut diag = PredictDiagnostics::default();
    let mut candidates = Vec::new();
    for (i, anchor) in grid.anchors.iter().enumerate() {
        let row = &probs[i * c..(i + 1) * c];
        let mut best = 0;
        for (m, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = m;
            }
        }
        if best == background {
            diag.background_anchors += 1;
            continue;
        }
        let score = row[best] as f64;
        if score < params.confidence_threshold {
            diag.low_confidence += 1;
            continue;
        }
        let scaled = [
            offsets[i * 4] as f64,
            offsets[i * 4 + 1] as f64,
            offsets[i * 4 + 2] as f64,
            offsets[i * 4 + 3] as f64,
        ];
        let raw = scaler.invert(&scaled);
        let decoded = decode_offsets(anchor, &raw);
        if !decoded.is_valid() {
            diag.invalid_boxes += 1;
            continue;
        }
        let clipped = decoded.clipped(size, size);
        if !clipped.is_valid() {
            diag.invalid_boxes += 1;
            continue;
        }
        candidates.push(ScoredBox {
            bbox: BBox::new(clipped.x1, clipped.y1, clipped.x2, clipped.y2),
            class_id: best,
            score,
        });
    }
    // confidence was already applied; NMS only needs the IoU rule
    (nms(&candidates, params.nms_iou, 0.0), diag)
}
