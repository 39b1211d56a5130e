//! Adam optimizer. The paper never names its optimizer; Adam with the usual
//! defaults is the project-wide choice.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    /// State is positional: `params` must be passed to every `step` call in
    /// the same order as here.
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected Adam update in place and zeroes the grads.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.cfg.beta1 as f64, self.cfg.beta2 as f64);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = self.cfg.lr as f64;
        let eps = self.cfg.eps as f64;

        for (i, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!("param {i} has no gradient; run backward first"))
            })?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j] as f64;
                    let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                    let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                    m[j] = mj as f32;
                    v[j] = vj as f32;
                    let mhat = mj / bias1;
                    let vhat = vj / bias2;
                    data[j] = (data[j] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            });
            p.zero_grad();
        }
        Ok(())
    }

    // checkpoint plumbing
    pub fn state(&self) -> (&[Vec<f32>], &[Vec<f32>], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(&mut self, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>, t: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Contract("optimizer state arity mismatch".into()));
        }
        for (i, (ms, vs)) in m.iter().zip(&v).enumerate() {
            if ms.len() != self.m[i].len() || vs.len() != self.v[i].len() {
                return Err(Error::Contract(format!("optimizer state size mismatch at param {i}")));
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        Ok(())
    }
}
