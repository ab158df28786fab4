//! Straight-line reference implementations of the training equations,
//! written from their definitions with plain loops and no graph engine.
//! The oracle and acceptance suites compare production code against
//! these; nothing here may call into the library's numeric paths.

#![allow(dead_code)]

pub const KL_FLOOR: f64 = 1e-12;
pub const TIME_WIDTH: usize = 8;

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    let lz = z.ln() + m;
    row.iter().map(|x| x - lz).collect()
}

/// [m x k] times [k x n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Row-stochastic self-similarity of an [n x d] batch at temperature
/// tau: softmax over rows of the scaled Gram matrix.
pub fn self_similarity(emb: &[f64], n: usize, d: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let dot: f64 = (0..d).map(|k| emb[i * d + k] * emb[j * d + k]).sum();
            row.push(dot / tau);
        }
        out.extend(softmax(&row));
    }
    out
}

/// Drops each row's diagonal entry of an [n x n] row-stochastic matrix
/// and renormalizes the rest through exp-reweighting; [n x (n-1)].
pub fn neg_disentangle(p: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        let z: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| p[i * n + j].exp())
            .sum();
        for j in 0..n {
            if j != i {
                out.push(p[i * n + j].exp() / z);
            }
        }
    }
    out
}

/// Mean over rows of KL(p || q) with q floored, for [m x w] matrices of
/// row distributions.
pub fn kl_rows(p: &[f64], q: &[f64], m: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..w {
            let pij = p[i * w + j];
            if pij > 0.0 {
                total += pij * (pij / q[i * w + j].max(KL_FLOOR)).ln();
            }
        }
    }
    total / m as f64
}

/// Intra-modal alignment loss: KL from the teacher's disentangled
/// self-similarity to the student's, both at the same temperature.
pub fn intra_loss(student: &[f64], teacher: &[f64], n: usize, d: usize, tau: f64) -> f64 {
    let ps = neg_disentangle(&self_similarity(student, n, d, tau), n);
    let pt = neg_disentangle(&self_similarity(teacher, n, d, tau), n);
    kl_rows(&pt, &ps, n, n - 1)
}

/// Symmetric InfoNCE over the cross-similarity matrix `v sᵀ / tau` with
/// positives on the diagonal.
pub fn infonce(v: &[f64], s: &[f64], n: usize, d: usize, tau: f64) -> f64 {
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|k| v[i * d + k] * s[j * d + k]).sum();
            sim[i * n + j] = dot / tau;
        }
    }
    let mut row_term = 0.0;
    let mut col_term = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim[i * n + j]).collect();
        row_term += log_softmax(&row)[i];
        let col: Vec<f64> = (0..n).map(|j| sim[j * n + i]).collect();
        col_term += log_softmax(&col)[i];
    }
    -0.5 * (row_term / n as f64 + col_term / n as f64)
}

/// Stage-three objective: flow loss plus weighted contrastive terms.
pub fn total_loss(cfm: f64, intra: f64, inter: f64, li: f64, le: f64) -> f64 {
    cfm + li * intra + le * inter
}

pub fn ot_path(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect()
}

pub fn ot_target(x0: &[f64], x1: &[f64]) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| b - a).collect()
}

/// Octave sinusoidal features of a path time.
pub fn time_embed(t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(TIME_WIDTH);
    for k in 0..TIME_WIDTH / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// One affine layer chain with tanh between hidden layers. `layers` are
/// (weights [w_in x w_out], bias [w_out]) pairs; input is a single row.
pub fn mlp_forward(layers: &[(Vec<f64>, Vec<f64>, usize, usize)], input: &[f64]) -> Vec<f64> {
    let mut cur = input.to_vec();
    let last = layers.len() - 1;
    for (li, (w, b, w_in, w_out)) in layers.iter().enumerate() {
        assert_eq!(cur.len(), *w_in);
        let mut next = b.clone();
        for i in 0..*w_in {
            for j in 0..*w_out {
                next[j] += cur[i] * w[i * w_out + j];
            }
        }
        if li < last {
            for x in next.iter_mut() {
                *x = x.tanh();
            }
        }
        cur = next;
    }
    cur
}

/// Field input row for one sample: x_t, time features, then condition,
/// token, and prompt slots, zero-filled when absent.
pub fn field_input(
    xt: &[f64],
    t: f64,
    cond: Option<&[f64]>,
    cond_dim: usize,
    tokens: Option<&[f64]>,
    token_dim: usize,
    prompt: Option<&[f64]>,
) -> Vec<f64> {
    let mut row = xt.to_vec();
    row.extend(time_embed(t));
    match cond {
        Some(c) => row.extend_from_slice(c),
        None => row.extend(std::iter::repeat(0.0).take(cond_dim)),
    }
    match tokens {
        Some(tk) => row.extend_from_slice(tk),
        None => row.extend(std::iter::repeat(0.0).take(token_dim)),
    }
    match prompt {
        Some(p) => row.extend_from_slice(p),
        None => row.extend(std::iter::repeat(0.0).take(xt.len())),
    }
    row
}

/// Flow-matching loss over a batch against a caller-supplied field
/// evaluation: mean over rows of the L1 (or squared L2) residual
/// between the constant transport target and the field at the
/// interpolated point.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss<F: Fn(&[f64], f64, usize) -> Vec<f64>>(
    x0: &[f64],
    x1: &[f64],
    ts: &[f64],
    n: usize,
    d: usize,
    field: F,
    squared: bool,
) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let r0 = &x0[i * d..(i + 1) * d];
        let r1 = &x1[i * d..(i + 1) * d];
        let xt = ot_path(r0, r1, ts[i]);
        let target = ot_target(r0, r1);
        let pred = field(&xt, ts[i], i);
        for j in 0..d {
            let e = target[j] - pred[j];
            total += if squared { e * e } else { e.abs() };
        }
    }
    total / n as f64
}

/// Single-head cross-attention of query rows against a bank:
/// softmax(x wq (bank wk)ᵀ / sqrt(d)) (bank wv), then the output map.
#[allow(clippy::too_many_arguments)]
pub fn bare_attention(
    x: &[f64],
    bank: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    n: usize,
    kk: usize,
    d: usize,
) -> Vec<f64> {
    let q = matmul(x, wq, n, d, d);
    let k = matmul(bank, wk, kk, d, d);
    let v = matmul(bank, wv, kk, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut att = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..kk)
            .map(|r| {
                let dot: f64 = (0..d).map(|c| q[i * d + c] * k[r * d + c]).sum();
                dot * scale
            })
            .collect();
        let w = softmax(&logits);
        for r in 0..kk {
            for c in 0..d {
                att[i * d + c] += w[r] * v[r * d + c];
            }
        }
    }
    matmul(&att, wo, n, d, d)
}

/// Multi-head variant: heads attend on column slices of the projected
/// queries, keys and values; outputs concatenate head by head. Logit
/// scale stays 1/sqrt(d) unless `per_head_scale`.
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention(
    x: &[f64],
    bank: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    n: usize,
    kk: usize,
    d: usize,
    heads: usize,
    per_head_scale: bool,
) -> Vec<f64> {
    let q = matmul(x, wq, n, d, d);
    let k = matmul(bank, wk, kk, d, d);
    let v = matmul(bank, wv, kk, d, d);
    let dh = d / heads;
    let scale = 1.0 / (if per_head_scale { dh } else { d } as f64).sqrt();
    let mut att = vec![0.0; n * d];
    for h in 0..heads {
        let lo = h * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..kk)
                .map(|r| {
                    let dot: f64 = (0..dh).map(|c| q[i * d + lo + c] * k[r * d + lo + c]).sum();
                    dot * scale
                })
                .collect();
            let w = softmax(&logits);
            for r in 0..kk {
                for c in 0..dh {
                    att[i * d + lo + c] += w[r] * v[r * d + lo + c];
                }
            }
        }
    }
    matmul(&att, wo, n, d, d)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
