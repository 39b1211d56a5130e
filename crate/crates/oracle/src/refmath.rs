//! Pure-f64 reference forward implementations, written independently of the
//! tensor engine (plain loops, no tape). Finite differences over these give
//! gradient oracles precise enough for a 1e-4 relative tolerance.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kern: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ph = h + 2 * padding;
    let pw = w + 2 * padding;
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let at = |ic: usize, y: isize, xx: isize| -> f64 {
        let yy = y - padding as isize;
        let xx = xx - padding as isize;
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x[ic * h * w + yy as usize * w + xx as usize]
        }
    };
    let mut out = vec![0.0; cout * oh * ow];
    for oc in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += at(ic, (oy * stride + ky) as isize, (ox * stride + kx) as isize)
                                * kern[((oc * cin + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    const C: f64 = 0.044_715;
    const S: f64 = 0.797_884_560_802_865_4;
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (S * (v + C * v * v * v)).tanh()))
        .collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn log(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.ln()).collect()
}

pub fn square(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * v).collect()
}

pub fn softmax_lastdim(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(k).zip(x.chunks(k)) {
        let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(d).zip(x.chunks(d)) {
        let mean = xrow.iter().sum::<f64>() / d as f64;
        let var = xrow.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = (xrow[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Row-broadcast bias add on an `[n×d]` matrix.
pub fn add_row_bias(x: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    x.iter().enumerate().map(|(i, &v)| v + b[i % d]).collect()
}

/// Cross-entropy summed over non-background rows (background = last class),
/// with the same 1e-7 probability floor as the engine.
pub fn modified_cce(y_true: &[f64], y_pred: &[f64], c: usize) -> f64 {
    let background = c - 1;
    let mut loss = 0.0;
    for (trow, prow) in y_true.chunks(c).zip(y_pred.chunks(c)) {
        let mut best = 0;
        for (i, &v) in trow.iter().enumerate() {
            if v > trow[best] {
                best = i;
            }
        }
        if best == background {
            continue;
        }
        let mut row = 0.0;
        for m in 0..c {
            if trow[m] != 0.0 {
                row += trow[m] * prow[m].max(1e-7).ln();
            }
        }
        loss -= row;
    }
    loss
}

/// Squared error averaged over rows with a non-zero true sum.
pub fn modified_mse(y_true: &[f64], y_pred: &[f64], k: usize) -> f64 {
    let mut loss = 0.0;
    let mut count = 0usize;
    for (trow, prow) in y_true.chunks(k).zip(y_pred.chunks(k)) {
        if trow.iter().sum::<f64>() == 0.0 {
            continue;
        }
        for m in 0..k {
            let d = trow[m] - prow[m];
            loss += d * d;
        }
        count += 1;
    }
    if count > 0 {
        loss / count as f64
    } else {
        0.0
    }
}

/// Reference multi-head self-attention matching the model wiring: shared
/// QKV projections, per-head scaled softmax attention, concat, output
/// projection. All weights row-major `[d×d]`, biases `[d]`.
#[allow(clippy::too_many_arguments)]
pub fn mhsa(
    x: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    wq: &[f64],
    bq: &[f64],
    wk: &[f64],
    bk: &[f64],
    wv: &[f64],
    bv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let dh = d / heads;
    let q = add_row_bias(&matmul(x, wq, n, d, d), bq, d);
    let k = add_row_bias(&matmul(x, wk, n, d, d), bk, d);
    let v = add_row_bias(&matmul(x, wv, n, d, d), bv, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![0.0; n * d];
    for hd in 0..heads {
        // scores[i][j] = q_i · k_j / sqrt(dh), over this head's columns
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += q[i * d + hd * dh + t] * k[j * d + hd * dh + t];
                }
                scores[i * n + j] = acc * scale;
            }
        }
        let probs = softmax_lastdim(&scores, n);
        for i in 0..n {
            for t in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += probs[i * n + j] * v[j * d + hd * dh + t];
                }
                concat[i * d + hd * dh + t] = acc;
            }
        }
    }
    add_row_bias(&matmul(&concat, wo, n, d, d), bo, d)
}

/// Symmetric central difference of `f` in coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += eps;
    let mut minus = x.to_vec();
    minus[i] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}
