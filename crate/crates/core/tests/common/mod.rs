//! Independent reference implementations on nested `Vec`s, plus fixtures
//! shared by the integration tests.

#![allow(dead_code)]

pub mod grad_suite;
pub mod oracle_suite;

use deim::autograd::{Dropout, Graph};
use deim::data::{length_mask, TokenizedPair};
use deim::model::Model;
use deim::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_m(r: usize, c: usize, rng: &mut ChaCha8Rng) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn t(m: &M) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn m_of(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &M, b: &M) -> M {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; c]; r];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|&v| v.max(0.0)).collect()).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Softmax in ratio form, `w_j = 1 / Σ_k exp(x_k − x_j)` over kept entries; dropped entries get 0.
pub fn softmax_ratio(x: &[f64], keep: &[bool]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, &xj)| {
            if !keep[j] {
                return 0.0;
            }
            let denom: f64 = x.iter().zip(keep).filter(|(_, &k)| k).map(|(&xk, _)| (xk - xj).exp()).sum();
            1.0 / denom
        })
        .collect()
}

pub fn softmax_rows(s: &M, keep_cols: &[bool]) -> M {
    s.iter().map(|row| softmax_ratio(row, keep_cols)).collect()
}

pub fn softmax_cols(s: &M, keep_rows: &[bool]) -> M {
    transpose(&softmax_rows(&transpose(s), keep_rows))
}

pub fn mask(a: &M, keep: &[bool]) -> M {
    a.iter()
        .zip(keep)
        .map(|(r, &k)| if k { r.clone() } else { vec![0.0; r.len()] })
        .collect()
}

pub fn concat_cols(parts: &[&M]) -> M {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

/// `S_ij = Σ_k relu(C W_c)_ik · relu(Q W_q)_jk`, computed entry by entry.
pub fn similarity(c: &M, q: &M, wc: &M, wq: &M) -> M {
    let pc = relu(&matmul(c, wc));
    let pq = relu(&matmul(q, wq));
    let mut s = vec![vec![0.0; q.len()]; c.len()];
    for i in 0..c.len() {
        for j in 0..q.len() {
            s[i][j] = (0..pc[0].len()).map(|k| pc[i][k] * pq[j][k]).sum();
        }
    }
    s
}

/// Alignment: `(S, C', Q')`.
pub fn align(c: &M, q: &M, wc: &M, wq: &M, mc: &[bool], mq: &[bool]) -> (M, M, M) {
    let s = similarity(c, q, wc, wq);
    let (n, m, d) = (c.len(), q.len(), c[0].len());
    let mut ca = vec![vec![0.0; d]; n];
    for i in 0..n {
        let w = softmax_ratio(&s[i], mq);
        for j in 0..m {
            for k in 0..d {
                ca[i][k] += w[j] * q[j][k];
            }
        }
    }
    let mut qa = vec![vec![0.0; d]; m];
    for j in 0..m {
        let col: Vec<f64> = (0..n).map(|i| s[i][j]).collect();
        let w = softmax_ratio(&col, mc);
        for i in 0..n {
            for k in 0..d {
                qa[j][k] += w[i] * c[i][k];
            }
        }
    }
    (s, mask(&ca, mc), mask(&qa, mq))
}

/// Gated fusion, element by element: `(z, gate)`.
pub fn fuse(x: &M, y: &M, w1: &M, w2: &M) -> (M, M) {
    let d = x[0].len();
    let mut z = vec![vec![0.0; d]; x.len()];
    let mut gate = vec![vec![0.0; d]; x.len()];
    for i in 0..x.len() {
        let f: Vec<f64> = x[i]
            .iter()
            .chain(&y[i])
            .copied()
            .chain(x[i].iter().zip(&y[i]).map(|(a, b)| a * b))
            .chain(x[i].iter().zip(&y[i]).map(|(a, b)| a - b))
            .collect();
        for k in 0..d {
            let a: f64 = (0..f.len()).map(|l| f[l] * w1[l][k]).sum();
            let b: f64 = (0..f.len()).map(|l| f[l] * w2[l][k]).sum();
            let g = sigmoid(b);
            gate[i][k] = g;
            z[i][k] = g * a.tanh() + (1.0 - g) * x[i][k];
        }
    }
    (z, gate)
}

/// H→P attention: row `t` is `Σ_j softmax(S_t:)_j P_j`.
pub fn h2p(s: &M, p: &M, mh: &[bool], mp: &[bool]) -> M {
    let d = p[0].len();
    let out: M = s
        .iter()
        .map(|row| {
            let w = softmax_ratio(row, mp);
            (0..d).map(|k| (0..p.len()).map(|j| w[j] * p[j][k]).sum()).collect()
        })
        .collect();
    mask(&out, mh)
}

/// P→H attention: `(b, c)` with `b = softmax(max_j S_tj)` and `c = Σ_t b_t H_t`.
pub fn p2h(s: &M, h: &M, mh: &[bool], mp: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let peaks: Vec<f64> = s
        .iter()
        .map(|row| {
            row.iter()
                .zip(mp)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let b = softmax_ratio(&peaks, mh);
    let d = h[0].len();
    let c = (0..d).map(|k| (0..h.len()).map(|t| b[t] * h[t][k]).sum()).collect();
    (b, c)
}

pub fn merge(h: &M, q: &M, c: &M) -> M {
    (0..h.len())
        .map(|i| {
            let d = h[i].len();
            let mut row = Vec::with_capacity(4 * d);
            row.extend_from_slice(&h[i]);
            row.extend_from_slice(&q[i]);
            row.extend((0..d).map(|k| h[i][k] * q[i][k]));
            row.extend((0..d).map(|k| h[i][k] * c[i][k]));
            row
        })
        .collect()
}

/// `E_tu = G_t · G_u`, `Z_t = Σ_u softmax(E_t:)_u G_u`.
pub fn self_attend(g: &M, keep: &[bool]) -> M {
    let n = g.len();
    let w = g[0].len();
    let e: M = (0..n)
        .map(|t| (0..n).map(|u| (0..w).map(|k| g[t][k] * g[u][k]).sum()).collect())
        .collect();
    let z: M = (0..n)
        .map(|t| {
            let a = softmax_ratio(&e[t], keep);
            (0..w).map(|k| (0..n).map(|u| a[u] * g[u][k]).sum()).collect()
        })
        .collect();
    mask(&z, keep)
}

/// Classification head: `softmax(tanh(x W + b))` per row.
pub fn head_classify(x: &M, w: &M, b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let h: Vec<f64> = (0..b.len())
                .map(|k| ((0..row.len()).map(|l| row[l] * w[l][k]).sum::<f64>() + b[k]).tanh())
                .collect();
            softmax_ratio(&h, &vec![true; h.len()])
        })
        .collect()
}

/// Ranking head: `tanh(tanh(x W + b))` per row.
pub fn head_rank(x: &M, w: &M, b: f64) -> Vec<f64> {
    x.iter()
        .map(|row| ((0..row.len()).map(|l| row[l] * w[l][0]).sum::<f64>() + b).tanh().tanh())
        .collect()
}

/// `−Σ_i Σ_k y_ik ln ŷ_ik` with one-hot `y`.
pub fn cross_entropy_sum(probs: &M, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, row) in probs.iter().enumerate() {
        for (k, &p) in row.iter().enumerate() {
            let y = if k == labels[i] { 1.0 } else { 0.0 };
            total -= y * p.max(1e-12).ln();
        }
    }
    total
}

pub fn hinge_mean(pos: &[f64], neg: &[f64]) -> f64 {
    pos.iter().zip(neg).map(|(p, n)| (1.0 - p + n).max(0.0)).sum::<f64>() / pos.len() as f64
}

/// Same-padded 1-D convolution with kernel `[w][d_in][d_out]`.
pub fn conv1d(x: &M, k: &[M]) -> M {
    let (len, w) = (x.len(), k.len());
    let (din, dout) = (k[0].len(), k[0][0].len());
    let half = (w / 2) as isize;
    let mut out = vec![vec![0.0; dout]; len];
    for t in 0..len {
        for o in 0..w {
            let src = t as isize + o as isize - half;
            if src < 0 || src >= len as isize {
                continue;
            }
            for i in 0..din {
                for j in 0..dout {
                    out[t][j] += x[src as usize][i] * k[o][i][j];
                }
            }
        }
    }
    out
}

/// Average precision by brute force: precision@k at every relevant rank.
pub fn brute_ap_rr(scores: &[f64], relevant: &[bool]) -> Option<(f64, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Insertion sort: stable and independent of the library's sort.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] < scores[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut ap = 0.0;
    let mut first = None;
    for k in 1..=order.len() {
        if relevant[order[k - 1]] {
            let hits = order[..k].iter().filter(|&&i| relevant[i]).count();
            ap += hits as f64 / k as f64;
            first.get_or_insert(1.0 / k as f64);
        }
    }
    Some((ap / total as f64, first.unwrap()))
}

/// Random keep-mask of length `n` with at least one kept position.
pub fn rand_mask(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let len = rng.gen_range(1..=n);
    (0..n).map(|i| i < len).collect()
}

/// Embedded pair padded with random PAD rows; returns unmasked rows of Z and the pooled vector.
pub fn padded_forward(model: &Model, pair: &TokenizedPair, pad: usize, noise_seed: Option<u64>) -> (Vec<f64>, Vec<f64>) {
    let (la, lb) = (pair.len_a(), pair.len_b());
    let mut x = model.embed_tensor(&pair.a, la + pad).unwrap();
    let mut y = model.embed_tensor(&pair.b, lb + pad).unwrap();
    if let Some(seed) = noise_seed {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (t, len) in [(&mut x, la), (&mut y, lb)] {
            for i in len..t.rows() {
                t.row_mut(i).iter_mut().for_each(|v| *v = r.gen_range(-50.0..50.0));
            }
        }
    }
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let (vx, vy) = (g.constant(x), g.constant(y));
    let tr = model
        .forward_embedded(
            &mut g,
            &vars,
            vx,
            vy,
            &length_mask(la, la + pad),
            &length_mask(lb, lb + pad),
            &mut Dropout::eval(),
        )
        .unwrap();
    let z = g.value(tr.z);
    let rows: Vec<f64> = (0..la).flat_map(|i| z.row(i).to_vec()).collect();
    (rows, g.value(tr.pooled).data().to_vec())
}
