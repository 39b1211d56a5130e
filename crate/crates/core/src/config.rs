//! One TOML file drives generate/train/eval/predict. Every section has
//! defaults, so a minimal config is just an output directory and a data
//! path; unknown keys are rejected to catch typos.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_grid, AnchorGrid};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::{EncoderKind, PredictParams};
use crate::synth::GenConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub anchors: AnchorConfig,
    pub loss: LossSettings,
    pub optimizer: OptimizerSettings,
    pub data: DataConfig,
    pub predict: PredictSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            anchors: AnchorConfig::default(),
            loss: LossSettings::default(),
            optimizer: OptimizerSettings::default(),
            data: DataConfig::default(),
            predict: PredictSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f32,
    pub dropout_rate: f32,
    /// false = raw-patch passthrough ablation (no transformer).
    pub use_vit: bool,
    pub head: HeadSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            mlp_ratio: 2.0,
            dropout_rate: 0.1,
            use_vit: true,
            head: HeadSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub mlp_hidden: Vec<usize>,
    pub dropout_rate: f32,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            cnn_channels: vec![64, 32],
            cnn_kernel: 3,
            mlp_hidden: vec![256],
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub upper_iou: f64,
    pub lower_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 16,
            scales: vec![12.0, 24.0, 40.0],
            ratios: vec![0.5, 1.0, 2.0],
            upper_iou: 0.6,
            lower_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub lambda: f32,
    pub normalize_cce: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            normalize_cce: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub lr: f32,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant lr).
    pub lr_decay: f32,
    pub betas: [f32; 2],
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 1.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 30,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory: `generate` writes it, `train`/`eval` read it.
    pub path: PathBuf,
    /// Re-augment training samples each epoch.
    pub augment: bool,
    pub generator: GeneratorSettings,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/synth"),
            augment: false,
            generator: GeneratorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub classes: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub defects_min: usize,
    pub defects_max: usize,
    pub overlap_allowed: bool,
    pub noise_level: f32,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            classes: crate::synth::CLASS_LIBRARY[..3].iter().map(|s| s.to_string()).collect(),
            train: 600,
            val: 100,
            test: 100,
            defects_min: 1,
            defects_max: 4,
            overlap_allowed: true,
            noise_level: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    pub confidence_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            nms_iou: 0.45,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Number of classes the model predicts, background included.
    pub fn num_classes(&self) -> usize {
        self.data.generator.classes.len() + 1
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        if self.model.use_vit {
            EncoderKind::Vit
        } else {
            EncoderKind::RawPatch
        }
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.model.image_size,
            patch_size: self.model.patch_size,
            channels: self.model.channels,
            embed_dim: self.model.embed_dim,
            num_heads: self.model.num_heads,
            num_layers: self.model.num_layers,
            mlp_ratio: self.model.mlp_ratio,
            dropout_rate: self.model.dropout_rate,
        }
    }

    pub fn build_grid(&self) -> Result<AnchorGrid> {
        build_anchor_grid(
            self.model.image_size,
            self.anchors.stride,
            &self.anchors.scales,
            &self.anchors.ratios,
        )
    }

    pub fn head_config(&self, num_anchors: usize) -> HeadConfig {
        HeadConfig {
            cnn_channels: self.model.head.cnn_channels.clone(),
            cnn_kernel: self.model.head.cnn_kernel,
            mlp_hidden: self.model.head.mlp_hidden.clone(),
            dropout_rate: self.model.head.dropout_rate,
            num_anchors,
            num_classes: self.num_classes(),
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            image_size: self.model.image_size,
            classes: self.data.generator.classes.clone(),
            defects_min: self.data.generator.defects_min,
            defects_max: self.data.generator.defects_max,
            overlap_allowed: self.data.generator.overlap_allowed,
            noise_level: self.data.generator.noise_level,
            seed: self.seed,
        }
    }

    pub fn predict_params(&self) -> PredictParams {
        PredictParams {
            confidence_threshold: self.predict.confidence_threshold,
            nms_iou: self.predict.nms_iou,
        }
    }

    pub fn adam_config(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            lr: self.optimizer.lr,
            beta1: self.optimizer.betas[0],
            beta2: self.optimizer.betas[1],
            eps: self.optimizer.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit_config().validate()?;
        let grid = self.build_grid()?;
        self.head_config(grid.len()).validate()?;
        self.gen_config().validate()?;
        if !(0.0..=1.0).contains(&self.anchors.lower_iou)
            || !(0.0..=1.0).contains(&self.anchors.upper_iou)
            || self.anchors.lower_iou >= self.anchors.upper_iou
        {
            return Err(Error::Config(format!(
                "anchor thresholds must satisfy 0 <= lower < upper <= 1, got {} / {}",
                self.anchors.lower_iou, self.anchors.upper_iou
            )));
        }
        if self.optimizer.epochs == 0 || self.optimizer.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0 < self.optimizer.lr_decay && self.optimizer.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.optimizer.lr_decay
            )));
        }
        if self.loss.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.loss.lambda)));
        }
        Ok(())
    }

    /// Train/eval-time consistency with a loaded dataset.
    pub fn check_dataset(&self, classes: &[String]) -> Result<()> {
        if classes != self.data.generator.classes.as_slice() {
            return Err(Error::Config(format!(
                "dataset classes {:?} do not match configured classes {:?}",
                classes, self.data.generator.classes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_classes(), 4);
        assert_eq!(cfg.build_grid().unwrap().len(), 144);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optimizer.epochs, 30);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = toml::from_str::<RunConfig>("sead = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn bad_thresholds_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.anchors.lower_iou = 0.7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn class_mismatch_is_config_error() {
        let cfg = RunConfig::default();
        let other = vec!["scratch".to_string()];
        assert!(cfg.check_dataset(&other).is_err());
        assert!(cfg.check_dataset(&cfg.data.generator.classes).is_ok());
    }
}
