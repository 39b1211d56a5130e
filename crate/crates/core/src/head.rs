//! Detection head downstream of the encoder: a small CNN over the patch
//! embedding grid, flattened into a shared feature vector feeding two MLPs —
//! classification (per-anchor softmax) and regression (per-anchor sigmoid).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    pub mlp_hidden: Vec<usize>,
    pub dropout_rate: f32,
    pub num_anchors: usize,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            cnn_channels: vec![64, 32],
            cnn_kernel: 3,
            mlp_hidden: vec![256],
            dropout_rate: 0.1,
            num_anchors: 144,
            num_classes: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cnn_channels.is_empty() {
            return Err(Error::Config("head needs at least one CNN stage".into()));
        }
        if self.cnn_kernel == 0 || self.cnn_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "cnn kernel must be odd and positive, got {}",
                self.cnn_kernel
            )));
        }
        if self.num_anchors == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "head needs anchors and at least one real class plus background".into(),
            ));
        }
        Ok(())
    }

    pub fn classification_out(&self) -> usize {
        self.num_anchors * self.num_classes
    }

    pub fn regression_out(&self) -> usize {
        self.num_anchors * 4
    }
}

/// Per-anchor class distribution plus sigmoid offsets.
pub struct DetectionOutput {
    /// `[num_anchors × num_classes]`, rows sum to 1.
    pub class_probs: Tensor,
    /// `[num_anchors × 4]`, every value in (0, 1).
    pub offsets: Tensor,
}

struct MlpWeights {
    layers: Vec<(Tensor, Tensor)>,
    out_w: Tensor,
    out_b: Tensor,
}

pub struct HeadWeights {
    embed_dim: usize,
    grid_side: usize,
    convs: Vec<(Tensor, Tensor)>,
    cls: MlpWeights,
    reg: MlpWeights,
}

fn init_mlp(input: usize, hidden: &[usize], output: usize, rng: &mut ChaCha8Rng) -> MlpWeights {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push((
            Tensor::normal_param(vec![prev, h], INIT_STD, rng),
            Tensor::zeros_param(vec![h]),
        ));
        prev = h;
    }
    MlpWeights {
        layers,
        out_w: Tensor::normal_param(vec![prev, output], INIT_STD, rng),
        out_b: Tensor::zeros_param(vec![output]),
    }
}

impl HeadWeights {
    /// `embed_dim`/`num_patches` describe the encoder output this head sits
    /// on; `num_patches` must be a perfect square.
    pub fn init(
        cfg: &HeadConfig,
        embed_dim: usize,
        num_patches: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid_side = (num_patches as f64).sqrt().round() as usize;
        if grid_side * grid_side != num_patches {
            return Err(Error::Config(format!(
                "trunk needs a square patch grid, got {num_patches} patches"
            )));
        }
        let mut convs = Vec::new();
        let mut prev = embed_dim;
        for &ch in &cfg.cnn_channels {
            convs.push((
                Tensor::normal_param(vec![ch, prev, cfg.cnn_kernel, cfg.cnn_kernel], INIT_STD, rng),
                Tensor::zeros_param(vec![ch]),
            ));
            prev = ch;
        }
        let flat = prev * grid_side * grid_side;
        Ok(Self {
            embed_dim,
            grid_side,
            convs,
            cls: init_mlp(flat, &cfg.mlp_hidden, cfg.classification_out(), rng),
            reg: init_mlp(flat, &cfg.mlp_hidden, cfg.regression_out(), rng),
        })
    }

    pub fn flat_dim(&self, cfg: &HeadConfig) -> usize {
        cfg.cnn_channels.last().unwrap() * self.grid_side * self.grid_side
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.convs.iter().enumerate() {
            out.push((format!("head.conv{i}.k"), k.clone()));
            out.push((format!("head.conv{i}.b"), b.clone()));
        }
        for (branch, mlp) in [("cls", &self.cls), ("reg", &self.reg)] {
            for (i, (w, b)) in mlp.layers.iter().enumerate() {
                out.push((format!("head.{branch}.fc{i}.w"), w.clone()));
                out.push((format!("head.{branch}.fc{i}.b"), b.clone()));
            }
            out.push((format!("head.{branch}.out.w"), mlp.out_w.clone()));
            out.push((format!("head.{branch}.out.b"), mlp.out_b.clone()));
        }
        out
    }
}

/// Shared CNN trunk: reshapes `[num_patches × embed_dim]` embeddings to a
/// `[embed_dim × side × side]` grid, applies conv+ReLU stages, flattens.
pub fn trunk(
    tape: &Tape,
    embeddings: &Tensor,
    cfg: &HeadConfig,
    weights: &HeadWeights,
) -> Result<Tensor> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != weights.grid_side * weights.grid_side || s[1] != weights.embed_dim {
        return Err(Error::Config(format!(
            "trunk expects [{} x {}], got {:?}",
            weights.grid_side * weights.grid_side,
            weights.embed_dim,
            s
        )));
    }
    let side = weights.grid_side;
    // channels-first: [P, E] -> [E, P] -> [E, side, side]
    let chan_major = tape.transpose(embeddings)?;
    let mut x = tape.reshape(&chan_major, vec![weights.embed_dim, side, side])?;
    let pad = cfg.cnn_kernel / 2;
    for (k, b) in &weights.convs {
        x = tape.conv2d(&x, k, 1, pad)?;
        x = tape.add_chan_bias(&x, b)?;
        x = tape.relu(&x)?;
    }
    let flat = x.numel();
    tape.reshape(&x, vec![1, flat])
}

fn mlp_forward(
    tape: &Tape,
    shared: &Tensor,
    mlp: &MlpWeights,
    dropout_rate: f32,
    mode: Mode,
    site: &str,
) -> Result<Tensor> {
    let mut x = shared.clone();
    for (i, (w, b)) in mlp.layers.iter().enumerate() {
        x = tape.relu(&tape.linear(&x, w, b)?)?;
        let (training, seed) = mode.dropout_args(&format!("{site}.drop{i}"));
        x = tape.dropout(&x, dropout_rate, training, seed)?;
    }
    tape.linear(&x, &mlp.out_w, &mlp.out_b)
}

/// Twin heads over the shared trunk feature: classification logits reshaped
/// to `(num_anchors, num_classes)` with per-row softmax, regression logits
/// reshaped to `(num_anchors, 4)` with elementwise sigmoid.
pub fn heads(
    tape: &Tape,
    shared: &Tensor,
    cfg: &HeadConfig,
    weights: &HeadWeights,
    mode: Mode,
) -> Result<DetectionOutput> {
    let cls_logits = mlp_forward(tape, shared, &weights.cls, cfg.dropout_rate, mode, "head.cls")?;
    let cls_rows = tape.reshape(&cls_logits, vec![cfg.num_anchors, cfg.num_classes])?;
    let class_probs = tape.softmax_lastdim(&cls_rows)?;

    let reg_logits = mlp_forward(tape, shared, &weights.reg, cfg.dropout_rate, mode, "head.reg")?;
    let reg_rows = tape.reshape(&reg_logits, vec![cfg.num_anchors, 4])?;
    let offsets = tape.sigmoid(&reg_rows)?;

    Ok(DetectionOutput { class_probs, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            cnn_channels: vec![8, 4],
            cnn_kernel: 3,
            mlp_hidden: vec![16],
            dropout_rate: 0.0,
            num_anchors: 9,
            num_classes: 3,
        }
    }

    fn embeddings(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = chacha(seed);
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| crate::rng::normal(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn trunk_output_length_contract() {
        let cfg = small_cfg();
        let mut rng = chacha(1);
        let w = HeadWeights::init(&cfg, 6, 16, &mut rng).unwrap();
        let tape = Tape::new();
        let out = trunk(&tape, &embeddings(16, 6, 2), &cfg, &w).unwrap();
        assert_eq!(out.shape(), &[1, 4 * 16]);
        assert_eq!(out.numel(), cfg.cnn_channels.last().unwrap() * 16);
    }

    #[test]
    fn trunk_rejects_non_square_patch_count() {
        let cfg = small_cfg();
        let mut rng = chacha(1);
        assert!(HeadWeights::init(&cfg, 6, 15, &mut rng).is_err());
    }

    #[test]
    fn trunk_is_deterministic_without_dropout() {
        let cfg = small_cfg();
        let mut rng = chacha(4);
        let w = HeadWeights::init(&cfg, 6, 16, &mut rng).unwrap();
        let e = embeddings(16, 6, 5);
        let a = trunk(&Tape::new(), &e, &cfg, &w).unwrap().to_vec();
        let b = trunk(&Tape::new(), &e, &cfg, &w).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn head_rows_are_distributions_and_sigmoid_range() {
        let cfg = small_cfg();
        let mut rng = chacha(7);
        let w = HeadWeights::init(&cfg, 6, 16, &mut rng).unwrap();
        let tape = Tape::new();
        let shared = trunk(&tape, &embeddings(16, 6, 8), &cfg, &w).unwrap();
        let out = heads(&tape, &shared, &cfg, &w, Mode::Eval).unwrap();
        assert_eq!(out.class_probs.shape(), &[9, 3]);
        assert_eq!(out.offsets.shape(), &[9, 4]);
        for row in out.class_probs.to_vec().chunks(3) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for v in out.offsets.to_vec() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn saturated_logits_pin_probabilities() {
        let cfg = small_cfg();
        let mut rng = chacha(9);
        let w = HeadWeights::init(&cfg, 6, 16, &mut rng).unwrap();
        // force the classification output layer: bias row 0 to [+10, -10, -10]
        w.cls.out_w.update_data(|d| d.fill(0.0));
        w.cls.out_b.update_data(|d| {
            d.fill(-10.0);
            d[0] = 10.0;
        });
        let tape = Tape::new();
        let shared = trunk(&tape, &embeddings(16, 6, 10), &cfg, &w).unwrap();
        let out = heads(&tape, &shared, &cfg, &w, Mode::Eval).unwrap();
        let probs = out.class_probs.to_vec();
        assert!((probs[0] - 1.0).abs() < 1e-3);
        assert!(probs[1] < 1e-3 && probs[2] < 1e-3);
    }
}
