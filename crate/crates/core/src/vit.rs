//! Desk-scale Vision Transformer encoder: patchify, linear patch embedding
//! with learnable positional embeddings, pre-norm transformer blocks
//! (multi-head self-attention + MLP, residual connections), final norm.
//!
//! No class token: the detection trunk consumes the full per-patch grid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f32,
    pub dropout_rate: f32,
}

impl Default for ViTConfig {
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
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} must be divisible by num heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 || self.num_layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("channels, layers and embed dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }
}

pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Learnable state of the encoder: patch projection, positional table,
/// transformer blocks, final norm.
pub struct ViTWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
}

impl ViTWeights {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockWeights {
                ln1_gamma: Tensor::ones_param(vec![d]),
                ln1_beta: Tensor::zeros_param(vec![d]),
                wq: Tensor::normal_param(vec![d, d], INIT_STD, rng),
                bq: Tensor::zeros_param(vec![d]),
                wk: Tensor::normal_param(vec![d, d], INIT_STD, rng),
                bk: Tensor::zeros_param(vec![d]),
                wv: Tensor::normal_param(vec![d, d], INIT_STD, rng),
                bv: Tensor::zeros_param(vec![d]),
                wo: Tensor::normal_param(vec![d, d], INIT_STD, rng),
                bo: Tensor::zeros_param(vec![d]),
                ln2_gamma: Tensor::ones_param(vec![d]),
                ln2_beta: Tensor::zeros_param(vec![d]),
                mlp_w1: Tensor::normal_param(vec![d, hidden], INIT_STD, rng),
                mlp_b1: Tensor::zeros_param(vec![hidden]),
                mlp_w2: Tensor::normal_param(vec![hidden, d], INIT_STD, rng),
                mlp_b2: Tensor::zeros_param(vec![d]),
            })
            .collect();
        Ok(Self {
            patch_w: Tensor::normal_param(vec![cfg.patch_dim(), d], INIT_STD, rng),
            patch_b: Tensor::zeros_param(vec![d]),
            positional: Tensor::normal_param(vec![cfg.num_patches(), d], INIT_STD, rng),
            blocks,
            lnf_gamma: Tensor::ones_param(vec![d]),
            lnf_beta: Tensor::zeros_param(vec![d]),
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("vit.patch_w".to_string(), self.patch_w.clone()),
            ("vit.patch_b".to_string(), self.patch_b.clone()),
            ("vit.positional".to_string(), self.positional.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pairs: [(&str, &Tensor); 16] = [
                ("ln1_gamma", &b.ln1_gamma),
                ("ln1_beta", &b.ln1_beta),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_gamma", &b.ln2_gamma),
                ("ln2_beta", &b.ln2_beta),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ];
            for (name, t) in pairs {
                out.push((format!("vit.block{i}.{name}"), (*t).clone()));
            }
        }
        out.push(("vit.lnf_gamma".to_string(), self.lnf_gamma.clone()));
        out.push(("vit.lnf_beta".to_string(), self.lnf_beta.clone()));
        out
    }
}

/// Splits a `[c×h×w]` image into `patch_size`-sized tiles, row-major from
/// the top-left, each flattened in (channel, y, x) order.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Config(format!("patchify expects [c,h,w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h != w {
        return Err(Error::Config(format!("patchify expects a square image, got {h}x{w}")));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} must divide image size {h}"
        )));
    }
    let side = h / patch_size;
    let patch_dim = c * patch_size * patch_size;
    let data = image.data();
    let mut out = Vec::with_capacity(side * side * patch_dim);
    for py in 0..side {
        for px in 0..side {
            for ic in 0..c {
                for dy in 0..patch_size {
                    let y = py * patch_size + dy;
                    let base = ic * h * w + y * w + px * patch_size;
                    out.extend_from_slice(&data[base..base + patch_size]);
                }
            }
        }
    }
    drop(data);
    Tensor::new(vec![side * side, patch_dim], out)
}

/// Inverse of [`patchify`]; reconstructs the `[c×h×w]` image.
pub fn unpatchify(patches: &Tensor, channels: usize, image_size: usize, patch_size: usize) -> Result<Tensor> {
    let side = image_size / patch_size;
    let patch_dim = channels * patch_size * patch_size;
    if patches.shape() != [side * side, patch_dim] {
        return Err(Error::Config(format!(
            "unpatchify expects [{}, {}], got {:?}",
            side * side,
            patch_dim,
            patches.shape()
        )));
    }
    let data = patches.data();
    let mut out = vec![0.0f32; channels * image_size * image_size];
    for py in 0..side {
        for px in 0..side {
            let row = &data[(py * side + px) * patch_dim..(py * side + px + 1) * patch_dim];
            let mut k = 0;
            for ic in 0..channels {
                for dy in 0..patch_size {
                    let y = py * patch_size + dy;
                    for dx in 0..patch_size {
                        let x = px * patch_size + dx;
                        out[ic * image_size * image_size + y * image_size + x] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    drop(data);
    Tensor::new(vec![channels, image_size, image_size], out)
}

/// Multi-head self-attention: per head, `softmax(QKᵀ/√d_head)·V`; heads are
/// concatenated and output-projected. Returns the per-head attention
/// probability matrices alongside the output.
pub fn multi_head_self_attention_with_probs(
    tape: &Tape,
    x: &Tensor,
    block: &BlockWeights,
    num_heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Config(format!("attention expects [n,d], got {s:?}")));
    }
    let d = s[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "embed dim {d} must be divisible by num heads {num_heads}"
        )));
    }
    let dh = d / num_heads;
    let q = tape.linear(x, &block.wq, &block.bq)?;
    let k = tape.linear(x, &block.wk, &block.bk)?;
    let v = tape.linear(x, &block.wv, &block.bv)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.narrow_cols(&q, h * dh, dh)?;
        let kh = tape.narrow_cols(&k, h * dh, dh)?;
        let vh = tape.narrow_cols(&v, h * dh, dh)?;
        let scores = tape.mul_scalar(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
        let attn = tape.softmax_lastdim(&scores)?;
        heads.push(tape.matmul(&attn, &vh)?);
        probs.push(attn);
    }
    let concat = tape.concat_cols(&heads)?;
    let out = tape.linear(&concat, &block.wo, &block.bo)?;
    Ok((out, probs))
}

pub fn multi_head_self_attention(
    tape: &Tape,
    x: &Tensor,
    block: &BlockWeights,
    num_heads: usize,
) -> Result<Tensor> {
    multi_head_self_attention_with_probs(tape, x, block, num_heads).map(|(out, _)| out)
}

/// Full encoder forward: patch embedding + positional table, then
/// `num_layers` pre-norm blocks, then a final layer norm. Output is
/// `[num_patches × embed_dim]`.
pub fn encode(
    tape: &Tape,
    image: &Tensor,
    cfg: &ViTConfig,
    weights: &ViTWeights,
    mode: Mode,
) -> Result<Tensor> {
    cfg.validate()?;
    if image.shape() != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config [{}, {}, {}]",
            image.shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    if weights.positional.shape() != [cfg.num_patches(), cfg.embed_dim] {
        return Err(Error::Config(format!(
            "positional table {:?} does not match {} patches x {} dims",
            weights.positional.shape(),
            cfg.num_patches(),
            cfg.embed_dim
        )));
    }
    let patches = patchify(image, cfg.patch_size)?;
    let mut x = tape.linear(&patches, &weights.patch_w, &weights.patch_b)?;
    x = tape.add(&x, &weights.positional)?;
    let (training, seed) = mode.dropout_args("vit.embed");
    x = tape.dropout(&x, cfg.dropout_rate, training, seed)?;

    for (i, block) in weights.blocks.iter().enumerate() {
        let normed = tape.layer_norm(&x, &block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
        let attn = multi_head_self_attention(tape, &normed, block, cfg.num_heads)?;
        let (training, seed) = mode.dropout_args(&format!("vit.block{i}.attn_drop"));
        let attn = tape.dropout(&attn, cfg.dropout_rate, training, seed)?;
        x = tape.add(&x, &attn)?;

        let normed2 = tape.layer_norm(&x, &block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
        let hidden = tape.gelu(&tape.linear(&normed2, &block.mlp_w1, &block.mlp_b1)?)?;
        let mlp_out = tape.linear(&hidden, &block.mlp_w2, &block.mlp_b2)?;
        let (training, seed) = mode.dropout_args(&format!("vit.block{i}.mlp_drop"));
        let mlp_out = tape.dropout(&mlp_out, cfg.dropout_rate, training, seed)?;
        x = tape.add(&x, &mlp_out)?;
    }
    tape.layer_norm(&x, &weights.lnf_gamma, &weights.lnf_beta, LN_EPS)
}
