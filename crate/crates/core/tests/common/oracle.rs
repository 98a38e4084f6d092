//! Straight-line reference implementations on nested `Vec`s, written without
//! the tape so composed encoders can be checked against them.

#![allow(clippy::needless_range_loop)]

use livlr_core::davl::{INDEX_EMBEDDING, SOURCES};
use livlr_core::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Mat {
    to_mat(store.get(name).unwrap())
}

pub fn vec_of(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|c| (0..inner).map(|k| row[k] * b[k][c]).sum()).collect()
        })
        .collect()
}

/// `x · W (+ b)` with parameters looked up under `prefix`.
pub fn affine(store: &ParamStore, prefix: &str, x: &Mat, bias: bool) -> Mat {
    let mut y = mm(x, &param(store, &format!("{prefix}.w")));
    if bias {
        let b = vec_of(store, &format!("{prefix}.b"));
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

pub fn hadamard_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len())
        .map(|c| a.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `ReLU(v_i + Σ_j α_ij (v_j W + b_ij))` where `edges[i]` lists `(j, b_ij)`
/// and `α_i·` is the softmax of `(v_i Wq)·(v_j Wk)` over those neighbors.
pub fn attn_gcn(v: &Mat, w: &Mat, wq: &Mat, wk: &Mat, edges: &[Vec<(usize, f64)>]) -> Mat {
    let q = mm(v, wq);
    let k = mm(v, wk);
    let msg = mm(v, w);
    let mut out = v.clone();
    for (i, nb) in edges.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let scores: Vec<f64> = nb.iter().map(|&(j, _)| dot(&q[i], &k[j])).collect();
        let alpha = softmax(&scores);
        for (a, &(j, b)) in alpha.iter().zip(nb) {
            for c in 0..out[i].len() {
                out[i][c] += a * (msg[j][c] + b);
            }
        }
    }
    relu(&out)
}

/// Per row, the `k` highest-scoring other nodes of `(V W1)(V W2)ᵀ`, picked
/// one at a time (ties to the lower index).
pub fn top_k_neighbors(v: &Mat, w1: &Mat, w2: &Mat, k: usize) -> Vec<Vec<usize>> {
    let a = mm(v, w1);
    let b = mm(v, w2);
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut chosen = Vec::new();
            for _ in 0..k.min(n - 1) {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..n {
                    if j == i || chosen.contains(&j) {
                        continue;
                    }
                    let s = dot(&a[i], &b[j]);
                    if best.is_none_or(|(_, bs)| s > bs) {
                        best = Some((j, s));
                    }
                }
                chosen.push(best.unwrap().0);
            }
            chosen.sort_unstable();
            chosen
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step LSTM recurrence (gates i, f, g, o) over `xs`; returns the
/// last hidden state.
pub fn lstm(store: &ParamStore, prefix: &str, xs: &Mat, reverse: bool) -> Vec<f64> {
    let w_ih = param(store, &format!("{prefix}.w_ih"));
    let w_hh = param(store, &format!("{prefix}.w_hh"));
    let b = vec_of(store, &format!("{prefix}.b"));
    let h_dim = w_hh.len();
    let mut h = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    if reverse {
        order.reverse();
    }
    for t in order {
        let x = &xs[t];
        let pre: Vec<f64> = (0..4 * h_dim)
            .map(|k| {
                b[k] + x.iter().enumerate().map(|(r, xv)| xv * w_ih[r][k]).sum::<f64>()
                    + h.iter().enumerate().map(|(r, hv)| hv * w_hh[r][k]).sum::<f64>()
            })
            .collect();
        for u in 0..h_dim {
            c[u] = sigmoid(pre[h_dim + u]) * c[u] + sigmoid(pre[u]) * pre[2 * h_dim + u].tanh();
            h[u] = sigmoid(pre[3 * h_dim + u]) * c[u].tanh();
        }
    }
    h
}

pub fn bilstm(store: &ParamStore, prefix: &str, xs: &Mat) -> Vec<f64> {
    let mut out = lstm(store, &format!("{prefix}.fwd"), xs, false);
    out.extend(lstm(store, &format!("{prefix}.bwd"), xs, true));
    out
}

/// Per-head loops: each head projects with its own column block.
pub fn qatt(store: &ParamStore, prefix: &str, heads: usize, x: &Mat, q: &Mat) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let proj = |w: &str, m: &Mat, h: usize| -> Mat {
        let w = param(store, &format!("{prefix}.{w}"));
        m.iter()
            .map(|row| {
                (0..dh)
                    .map(|c| (0..d).map(|r| row[r] * w[r][h * dh + c]).sum())
                    .collect()
            })
            .collect()
    };
    let mut out: Mat = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (proj("wq", x, h), proj("wk", q, h), proj("wv", q, h));
        let wo = param(store, &format!("{prefix}.out.h{h:02}"));
        for (i, qi) in qh.iter().enumerate() {
            let s: Vec<f64> = kh.iter().map(|k| dot(qi, k) / (dh as f64).sqrt()).collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..dh)
                .map(|c| e.iter().zip(&vh).map(|(a, v)| a / z * v[c]).sum())
                .collect();
            out[i].extend((0..dh).map(|c| (0..dh).map(|r| mixed[r] * wo[r][c]).sum::<f64>()));
        }
    }
    out
}

/// DaVL straight through: attention, index scaling, top-k graph,
/// count-normalized vanilla GCN, mean.
pub fn davl(store: &ParamStore, heads: usize, n_n: usize, parts: &[Mat; 4], q: &Mat) -> Vec<f64> {
    let index = param(store, INDEX_EMBEDDING);
    let mut v: Mat = Vec::new();
    for (g, x) in parts.iter().enumerate() {
        for row in qatt(store, &format!("davl.qatt.{}", SOURCES[g]), heads, x, q) {
            v.push(hadamard_row(&row, &index[g]));
        }
    }
    let nb = top_k_neighbors(
        &v,
        &param(store, "davl.learner.w1"),
        &param(store, "davl.learner.w2"),
        n_n,
    );
    let msg = mm(&v, &param(store, "davl.gcn.0.w"));
    let out: Mat = v
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(c, x)| {
                    let m: f64 = nb[i].iter().map(|&j| msg[j][c]).sum::<f64>() / nb[i].len() as f64;
                    (x + m).max(0.0)
                })
                .collect()
        })
        .collect();
    mean_rows(&out)
}
