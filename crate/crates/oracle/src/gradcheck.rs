//! Finite-difference gradient oracle: engine gradients vs central
//! differences of the independent f64 reference forward implementations.
//!
//! Random inputs, kink-free by construction (relu inputs bounded away from
//! zero, log inputs positive, probabilities away from the clamp floor).

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use defectvit_core::rng::chacha;
use defectvit_core::tensor::{Tape, Tensor};
use defectvit_core::vit::BlockWeights;

use crate::refmath;

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 10;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct GradSuiteReport {
    pub checks: Vec<OpCheck>,
    pub duration: Duration,
}

impl GradSuiteReport {
    pub fn all_within(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < tol)
    }

    pub fn worst(&self) -> Option<&OpCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
    }
}

/// |a − b| / max(|a|, |b|, 1).
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Max relative error between the engine gradient of `input` and central
/// differences of `reference` over that input.
fn check_input(
    grad: &[f32],
    input64: &[f64],
    reference: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..input64.len() {
        let fd = refmath::central_diff(reference, input64, i, EPS);
        worst = worst.max(rel_err(grad[i] as f64, fd));
    }
    worst
}

fn weighted_sum64(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Builds `loss = sum(W ⊙ y)` on the tape and backprops it.
fn engine_weighted_loss(tape: &Tape, y: &Tensor, w: &Tensor) -> Vec<f32> {
    let prod = tape.mul(y, w).expect("weight shape");
    let loss = tape.sum(&prod).expect("sum");
    tape.backward(&loss).expect("backward");
    Vec::new()
}

macro_rules! check {
    ($checks:expr, $name:literal, $seed:expr, $body:expr) => {{
        let mut worst = 0.0f64;
        for inst in 0..INSTANCES {
            let mut rng = chacha($seed ^ (inst as u64 * 0x9e37));
            #[allow(clippy::redundant_closure_call)]
            let e: f64 = ($body)(&mut rng);
            worst = worst.max(e);
        }
        $checks.push(OpCheck {
            name: $name,
            instances: INSTANCES,
            max_rel_err: worst,
        });
    }};
}

pub fn run_gradient_suite(seed: u64) -> GradSuiteReport {
    let start = Instant::now();
    let mut checks = Vec::new();

    check!(checks, "matmul", seed ^ 0x01, |rng: &mut ChaCha8Rng| {
        let (m, k, n) = (3, 4, 5);
        let a = uniform(rng, m * k, -1.0, 1.0);
        let b = uniform(rng, k * n, -1.0, 1.0);
        let w = uniform(rng, m * n, -1.0, 1.0);
        let tape = Tape::new();
        let ta = Tensor::param(vec![m, k], a.clone()).unwrap();
        let tb = Tensor::param(vec![k, n], b.clone()).unwrap();
        let tw = Tensor::new(vec![m, n], w.clone()).unwrap();
        let y = tape.matmul(&ta, &tb).unwrap();
        engine_weighted_loss(&tape, &y, &tw);
        let (a64, b64, w64) = (to64(&a), to64(&b), to64(&w));
        let ea = check_input(&ta.grad().unwrap(), &a64, &mut |x| {
            weighted_sum64(&refmath::matmul(x, &b64, m, k, n), &w64)
        });
        let eb = check_input(&tb.grad().unwrap(), &b64, &mut |x| {
            weighted_sum64(&refmath::matmul(&a64, x, m, k, n), &w64)
        });
        ea.max(eb)
    });

    check!(checks, "conv2d", seed ^ 0x02, |rng: &mut ChaCha8Rng| {
        let (cin, h, w_) = (2, 5, 5);
        let (cout, kh, kw) = (3, 3, 3);
        let stride = if rng.gen::<bool>() { 1 } else { 2 };
        let padding = usize::from(rng.gen::<bool>());
        let x = uniform(rng, cin * h * w_, -1.0, 1.0);
        let k = uniform(rng, cout * cin * kh * kw, -0.7, 0.7);
        let (ph, pw) = (h + 2 * padding, w_ + 2 * padding);
        let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
        let wsum = uniform(rng, cout * oh * ow, -1.0, 1.0);
        let tape = Tape::new();
        let tx = Tensor::param(vec![cin, h, w_], x.clone()).unwrap();
        let tk = Tensor::param(vec![cout, cin, kh, kw], k.clone()).unwrap();
        let tw = Tensor::new(vec![cout, oh, ow], wsum.clone()).unwrap();
        let y = tape.conv2d(&tx, &tk, stride, padding).unwrap();
        engine_weighted_loss(&tape, &y, &tw);
        let (x64, k64, w64) = (to64(&x), to64(&k), to64(&wsum));
        let ex = check_input(&tx.grad().unwrap(), &x64, &mut |v| {
            weighted_sum64(
                &refmath::conv2d(v, cin, h, w_, &k64, cout, kh, kw, stride, padding),
                &w64,
            )
        });
        let ek = check_input(&tk.grad().unwrap(), &k64, &mut |v| {
            weighted_sum64(
                &refmath::conv2d(&x64, cin, h, w_, v, cout, kh, kw, stride, padding),
                &w64,
            )
        });
        ex.max(ek)
    });

    // elementwise binary ops
    for (name, marker) in [("add", 0x03u64), ("sub", 0x04), ("mul", 0x05)] {
        let mut worst = 0.0f64;
        for inst in 0..INSTANCES {
            let mut rng = chacha(seed ^ marker ^ (inst as u64 * 0x9e37));
            let n = 12;
            let a = uniform(&mut rng, n, -1.5, 1.5);
            let b = uniform(&mut rng, n, -1.5, 1.5);
            let w = uniform(&mut rng, n, -1.0, 1.0);
            let tape = Tape::new();
            let ta = Tensor::param(vec![3, 4], a.clone()).unwrap();
            let tb = Tensor::param(vec![3, 4], b.clone()).unwrap();
            let tw = Tensor::new(vec![3, 4], w.clone()).unwrap();
            let y = match name {
                "add" => tape.add(&ta, &tb).unwrap(),
                "sub" => tape.sub(&ta, &tb).unwrap(),
                _ => tape.mul(&ta, &tb).unwrap(),
            };
            engine_weighted_loss(&tape, &y, &tw);
            let (a64, b64, w64) = (to64(&a), to64(&b), to64(&w));
            let apply = |av: &[f64], bv: &[f64]| -> Vec<f64> {
                av.iter()
                    .zip(bv)
                    .map(|(x, y)| match name {
                        "add" => x + y,
                        "sub" => x - y,
                        _ => x * y,
                    })
                    .collect()
            };
            let ea = check_input(&ta.grad().unwrap(), &a64, &mut |v| {
                weighted_sum64(&apply(v, &b64), &w64)
            });
            let eb = check_input(&tb.grad().unwrap(), &b64, &mut |v| {
                weighted_sum64(&apply(&a64, v), &w64)
            });
            worst = worst.max(ea.max(eb));
        }
        checks.push(OpCheck {
            name,
            instances: INSTANCES,
            max_rel_err: worst,
        });
    }

    // elementwise unary ops, sampled away from kinks / domain edges
    type RefFn = fn(&[f64]) -> Vec<f64>;
    let unary: [(&'static str, u64, RefFn); 5] = [
        ("relu", 0x06, refmath::relu),
        ("gelu", 0x07, refmath::gelu),
        ("sigmoid", 0x08, refmath::sigmoid),
        ("log", 0x09, refmath::log),
        ("square", 0x0a, refmath::square),
    ];
    for (name, marker, reference) in unary {
        let mut worst = 0.0f64;
        for inst in 0..INSTANCES {
            let mut rng = chacha(seed ^ marker ^ (inst as u64 * 0x9e37));
            let n = 20;
            let x: Vec<f32> = match name {
                "relu" => (0..n)
                    .map(|_| {
                        let mag = rng.gen_range(0.05..1.5f32);
                        if rng.gen::<bool>() {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect(),
                "log" => uniform(&mut rng, n, 0.2, 3.0),
                _ => uniform(&mut rng, n, -2.0, 2.0),
            };
            let w = uniform(&mut rng, n, -1.0, 1.0);
            let tape = Tape::new();
            let tx = Tensor::param(vec![4, 5], x.clone()).unwrap();
            let tw = Tensor::new(vec![4, 5], w.clone()).unwrap();
            let y = match name {
                "relu" => tape.relu(&tx).unwrap(),
                "gelu" => tape.gelu(&tx).unwrap(),
                "sigmoid" => tape.sigmoid(&tx).unwrap(),
                "log" => tape.log(&tx).unwrap(),
                _ => tape.square(&tx).unwrap(),
            };
            engine_weighted_loss(&tape, &y, &tw);
            let (x64, w64) = (to64(&x), to64(&w));
            worst = worst.max(check_input(&tx.grad().unwrap(), &x64, &mut |v| {
                weighted_sum64(&reference(v), &w64)
            }));
        }
        checks.push(OpCheck {
            name,
            instances: INSTANCES,
            max_rel_err: worst,
        });
    }

    check!(checks, "softmax", seed ^ 0x0b, |rng: &mut ChaCha8Rng| {
        let (rows, k) = (3, 5);
        let x = uniform(rng, rows * k, -2.0, 2.0);
        let w = uniform(rng, rows * k, -1.0, 1.0);
        let tape = Tape::new();
        let tx = Tensor::param(vec![rows, k], x.clone()).unwrap();
        let tw = Tensor::new(vec![rows, k], w.clone()).unwrap();
        let y = tape.softmax_lastdim(&tx).unwrap();
        engine_weighted_loss(&tape, &y, &tw);
        let (x64, w64) = (to64(&x), to64(&w));
        check_input(&tx.grad().unwrap(), &x64, &mut |v| {
            weighted_sum64(&refmath::softmax_lastdim(v, k), &w64)
        })
    });

    check!(checks, "layernorm", seed ^ 0x0c, |rng: &mut ChaCha8Rng| {
        let (rows, d) = (4, 6);
        let eps = 1e-5f32;
        let x = uniform(rng, rows * d, -1.5, 1.5);
        let gamma = uniform(rng, d, 0.5, 1.5);
        let beta = uniform(rng, d, -0.5, 0.5);
        let w = uniform(rng, rows * d, -1.0, 1.0);
        let tape = Tape::new();
        let tx = Tensor::param(vec![rows, d], x.clone()).unwrap();
        let tg = Tensor::param(vec![d], gamma.clone()).unwrap();
        let tb = Tensor::param(vec![d], beta.clone()).unwrap();
        let tw = Tensor::new(vec![rows, d], w.clone()).unwrap();
        let y = tape.layer_norm(&tx, &tg, &tb, eps).unwrap();
        engine_weighted_loss(&tape, &y, &tw);
        let (x64, g64, b64, w64) = (to64(&x), to64(&gamma), to64(&beta), to64(&w));
        let ex = check_input(&tx.grad().unwrap(), &x64, &mut |v| {
            weighted_sum64(&refmath::layer_norm(v, &g64, &b64, d, eps as f64), &w64)
        });
        let eg = check_input(&tg.grad().unwrap(), &g64, &mut |v| {
            weighted_sum64(&refmath::layer_norm(&x64, v, &b64, d, eps as f64), &w64)
        });
        let eb = check_input(&tb.grad().unwrap(), &b64, &mut |v| {
            weighted_sum64(&refmath::layer_norm(&x64, &g64, v, d, eps as f64), &w64)
        });
        ex.max(eg).max(eb)
    });

    check!(checks, "attention", seed ^ 0x0d, |rng: &mut ChaCha8Rng| {
        let (n, d, heads) = (5usize, 8usize, 2usize);
        let x = uniform(rng, n * d, -1.0, 1.0);
        let mats: Vec<Vec<f32>> = (0..4).map(|_| uniform(rng, d * d, -0.4, 0.4)).collect();
        let biases: Vec<Vec<f32>> = (0..4).map(|_| uniform(rng, d, -0.1, 0.1)).collect();
        let w = uniform(rng, n * d, -1.0, 1.0);

        let tape = Tape::new();
        let tx = Tensor::param(vec![n, d], x.clone()).unwrap();
        let block = BlockWeights {
            ln1_gamma: Tensor::ones_param(vec![d]),
            ln1_beta: Tensor::zeros_param(vec![d]),
            wq: Tensor::param(vec![d, d], mats[0].clone()).unwrap(),
            bq: Tensor::param(vec![d], biases[0].clone()).unwrap(),
            wk: Tensor::param(vec![d, d], mats[1].clone()).unwrap(),
            bk: Tensor::param(vec![d], biases[1].clone()).unwrap(),
            wv: Tensor::param(vec![d, d], mats[2].clone()).unwrap(),
            bv: Tensor::param(vec![d], biases[2].clone()).unwrap(),
            wo: Tensor::param(vec![d, d], mats[3].clone()).unwrap(),
            bo: Tensor::param(vec![d], biases[3].clone()).unwrap(),
            ln2_gamma: Tensor::ones_param(vec![d]),
            ln2_beta: Tensor::zeros_param(vec![d]),
            mlp_w1: Tensor::zeros_param(vec![d, d]),
            mlp_b1: Tensor::zeros_param(vec![d]),
            mlp_w2: Tensor::zeros_param(vec![d, d]),
            mlp_b2: Tensor::zeros_param(vec![d]),
        };
        let y = defectvit_core::vit::multi_head_self_attention(&tape, &tx, &block, heads).unwrap();
        let tw = Tensor::new(vec![n, d], w.clone()).unwrap();
        engine_weighted_loss(&tape, &y, &tw);

        let x64 = to64(&x);
        let m64: Vec<Vec<f64>> = mats.iter().map(|v| to64(v)).collect();
        let b64: Vec<Vec<f64>> = biases.iter().map(|v| to64(v)).collect();
        let w64 = to64(&w);
        let run = |x: &[f64], m: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            weighted_sum64(
                &refmath::mhsa(x, n, d, heads, &m[0], &b[0], &m[1], &b[1], &m[2], &b[2], &m[3], &b[3]),
                &w64,
            )
        };
        let mut worst = check_input(&tx.grad().unwrap(), &x64, &mut |v| run(v, &m64, &b64));
        let weight_tensors = [&block.wq, &block.wk, &block.wv, &block.wo];
        for (mi, t) in weight_tensors.iter().enumerate() {
            worst = worst.max(check_input(&t.grad().unwrap(), &m64[mi], &mut |v| {
                let mut m = m64.clone();
                m[mi] = v.to_vec();
                run(&x64, &m, &b64)
            }));
        }
        let bias_tensors = [&block.bq, &block.bk, &block.bv, &block.bo];
        for (bi, t) in bias_tensors.iter().enumerate() {
            worst = worst.max(check_input(&t.grad().unwrap(), &b64[bi], &mut |v| {
                let mut b = b64.clone();
                b[bi] = v.to_vec();
                run(&x64, &m64, &b)
            }));
        }
        worst
    });

    check!(checks, "modified_cce", seed ^ 0x0e, |rng: &mut ChaCha8Rng| {
        let (rows, c) = (6usize, 4usize);
        let mut y_true = vec![0.0f32; rows * c];
        for r in 0..rows {
            let class = if rng.gen::<f32>() < 0.5 {
                c - 1 // background
            } else {
                rng.gen_range(0..c - 1)
            };
            y_true[r * c + class] = 1.0;
        }
        // predictions: softmaxed random logits. Logit spread is kept small
        // so probabilities stay >= ~0.09: the 1/p curvature of -t·ln(p)
        // otherwise dominates the eps² truncation of central differences.
        let logits = uniform(rng, rows * c, -0.5, 0.5);
        let mut y_pred = vec![0.0f32; rows * c];
        for r in 0..rows {
            let row64 = to64(&logits[r * c..(r + 1) * c]);
            let p = refmath::softmax_lastdim(&row64, c);
            for m in 0..c {
                y_pred[r * c + m] = p[m] as f32;
            }
        }
        let upstream = rng.gen_range(0.5..1.5f32);
        let tape = Tape::new();
        let tt = Tensor::new(vec![rows, c], y_true.clone()).unwrap();
        let tp = Tensor::param(vec![rows, c], y_pred.clone()).unwrap();
        let loss = tape.modified_cce(&tt, &tp, c - 1).unwrap();
        let scaled = tape.mul_scalar(&loss, upstream).unwrap();
        tape.backward(&scaled).unwrap();
        let (t64, p64) = (to64(&y_true), to64(&y_pred));
        check_input(&tp.grad().unwrap(), &p64, &mut |v| {
            upstream as f64 * refmath::modified_cce(&t64, v, c)
        })
    });

    check!(checks, "modified_mse", seed ^ 0x0f, |rng: &mut ChaCha8Rng| {
        let (rows, k) = (6usize, 4usize);
        let mut y_true = vec![0.0f32; rows * k];
        for r in 0..rows {
            if rng.gen::<f32>() < 0.5 {
                for m in 0..k {
                    y_true[r * k + m] = rng.gen_range(0.1..0.9);
                }
            }
        }
        let y_pred = uniform(rng, rows * k, 0.01, 0.99);
        let upstream = rng.gen_range(0.5..1.5f32);
        let tape = Tape::new();
        let tt = Tensor::new(vec![rows, k], y_true.clone()).unwrap();
        let tp = Tensor::param(vec![rows, k], y_pred.clone()).unwrap();
        let loss = tape.modified_mse(&tt, &tp).unwrap();
        let scaled = tape.mul_scalar(&loss, upstream).unwrap();
        tape.backward(&scaled).unwrap();
        let (t64, p64) = (to64(&y_true), to64(&y_pred));
        check_input(&tp.grad().unwrap(), &p64, &mut |v| {
            upstream as f64 * refmath::modified_mse(&t64, v, k)
        })
    });

    check!(checks, "composite", seed ^ 0x10, |rng: &mut ChaCha8Rng| {
        // sum(W ⊙ softmax(gelu(a)·b + bias)): five chained differentiable ops
        let (m, k, n) = (4usize, 3usize, 5usize);
        let a = uniform(rng, m * k, -1.0, 1.0);
        let b = uniform(rng, k * n, -1.0, 1.0);
        let bias = uniform(rng, n, -0.5, 0.5);
        let w = uniform(rng, m * n, -1.0, 1.0);
        let tape = Tape::new();
        let ta = Tensor::param(vec![m, k], a.clone()).unwrap();
        let tb = Tensor::param(vec![k, n], b.clone()).unwrap();
        let tbias = Tensor::param(vec![n], bias.clone()).unwrap();
        let tw = Tensor::new(vec![m, n], w.clone()).unwrap();
        let g = tape.gelu(&ta).unwrap();
        let mm = tape.matmul(&g, &tb).unwrap();
        let shifted = tape.add_row_bias(&mm, &tbias).unwrap();
        let sm = tape.softmax_lastdim(&shifted).unwrap();
        engine_weighted_loss(&tape, &sm, &tw);
        let (a64, b64, bias64, w64) = (to64(&a), to64(&b), to64(&bias), to64(&w));
        let run = |av: &[f64], bv: &[f64], biasv: &[f64]| -> f64 {
            let g = refmath::gelu(av);
            let mm = refmath::matmul(&g, bv, m, k, n);
            let shifted = refmath::add_row_bias(&mm, biasv, n);
            weighted_sum64(&refmath::softmax_lastdim(&shifted, n), &w64)
        };
        let ea = check_input(&ta.grad().unwrap(), &a64, &mut |v| run(v, &b64, &bias64));
        let eb = check_input(&tb.grad().unwrap(), &b64, &mut |v| run(&a64, v, &bias64));
        let ec = check_input(&tbias.grad().unwrap(), &bias64, &mut |v| run(&a64, &b64, v));
        ea.max(eb).max(ec)
    });

    GradSuiteReport {
        checks,
        duration: start.elapsed(),
    }
}
