//! Library operations against the nested-loop references.

use super::*;
use deim::autograd::Graph;
use deim::encoder::{align, fuse};
use deim::heads::{cross_entropy, head_forward, hinge_loss, HeadKind, Reduction};
use deim::interaction::{h2p_attention, merge, p2h_attention, self_attend};
use deim::Tensor;
use rand::Rng;

const SEEDS: u64 = 25;

fn dims(rng: &mut rand_chacha::ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5))
}

pub fn matmul_matches_triple_loop() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (a, b, c) = dims(&mut r);
        let x = rand_m(a, b, &mut r);
        let y = rand_m(b, c, &mut r);
        let mut g = Graph::new();
        let (vx, vy) = (g.constant(t(&x)), g.constant(t(&y)));
        let z = g.matmul(vx, vy).unwrap();
        assert!(max_diff(&m_of(g.value(z)), &matmul(&x, &y)) < 1e-14, "seed {seed}");
    }
}

pub fn conv1d_matches_direct_sum() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let (len, din, dout) = dims(&mut r);
        let w = [1, 3, 5][r.gen_range(0..3)];
        let x = rand_m(len, din, &mut r);
        let k: Vec<M> = (0..w).map(|_| rand_m(din, dout, &mut r)).collect();
        let flat: Vec<f64> = k.iter().flatten().flatten().copied().collect();
        let mut g = Graph::new();
        let vx = g.constant(t(&x));
        let vk = g.constant(Tensor::new(&[w, din, dout], flat).unwrap());
        let y = g.conv1d(vx, vk).unwrap();
        assert!(max_diff(&m_of(g.value(y)), &conv1d(&x, &k)) < 1e-14, "seed {seed}");
    }
}

pub fn softmax_matches_high_precision_values() {
    let cases: [(&[f64], [f64; 4]); 3] = [
        (&[1.0, 2.0, 3.0], [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953, 0.0]),
        (
            &[-3.5, 0.25, 10.0, 7.75],
            [1.2401719309119197014e-6, 0.000052733452368481934182, 0.90460170783278672495, 0.095344318542913881192],
        ),
        (&[1000.0, 999.0, 998.0], [0.66524095577482188953, 0.24472847105479765247, 0.090030573170380457998, 0.0]),
    ];
    for (x, want) in cases {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(x));
        let y = g.softmax(v, 0, None).unwrap();
        for (j, &got) in g.value(y).data().iter().enumerate() {
            assert!((got - want[j]).abs() < 1e-15, "{x:?}[{j}]: {got} vs {}", want[j]);
        }
    }
}

pub fn masked_softmax_matches_ratio_form() {
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        let (n, m, _) = dims(&mut r);
        let s: M = rand_m(n, m, &mut r).into_iter().map(|row| row.iter().map(|v| v * 20.0).collect()).collect();
        let keep = rand_mask(m, &mut r);
        let mut g = Graph::new();
        let v = g.constant(t(&s));
        let y = g.softmax(v, 1, Some(&keep)).unwrap();
        assert!(max_diff(&m_of(g.value(y)), &softmax_rows(&s, &keep)) < 1e-14, "seed {seed}");
        let keep_rows = rand_mask(n, &mut r);
        let y = g.softmax(v, 0, Some(&keep_rows)).unwrap();
        assert!(max_diff(&m_of(g.value(y)), &softmax_cols(&s, &keep_rows)) < 1e-14, "seed {seed}");
    }
}

pub fn align_matches_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let (n, m, d) = dims(&mut r);
        let (mc, mq) = (rand_mask(n, &mut r), rand_mask(m, &mut r));
        let c = mask(&rand_m(n, d, &mut r), &mc);
        let q = mask(&rand_m(m, d, &mut r), &mq);
        let (wc, wq) = (rand_m(d, d, &mut r), rand_m(d, d, &mut r));
        let mut g = Graph::new();
        let (vc, vq) = (g.constant(t(&c)), g.constant(t(&q)));
        let (vwc, vwq) = (g.constant(t(&wc)), g.constant(t(&wq)));
        let a = align(&mut g, vc, vq, &mc, &mq, vwc, vwq).unwrap();
        let (s, ca, qa) = super::align(&c, &q, &wc, &wq, &mc, &mq);
        assert!(max_diff(&m_of(g.value(a.scores)), &s) < 1e-12, "seed {seed}");
        assert!(max_diff(&m_of(g.value(a.a_aligned)), &ca) < 1e-12, "seed {seed}");
        assert!(max_diff(&m_of(g.value(a.b_aligned)), &qa) < 1e-12, "seed {seed}");
    }
}

pub fn fuse_matches_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let (n, _, d) = dims(&mut r);
        let (x, y) = (rand_m(n, d, &mut r), rand_m(n, d, &mut r));
        let (w1, w2) = (rand_m(4 * d, d, &mut r), rand_m(4 * d, d, &mut r));
        let mut g = Graph::new();
        let vars: Vec<_> = [&x, &y, &w1, &w2].iter().map(|m| g.constant(t(m))).collect();
        let f = fuse(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let (z, gate) = super::fuse(&x, &y, &w1, &w2);
        assert!(max_diff(&m_of(g.value(f.out)), &z) < 1e-12, "seed {seed}");
        assert!(max_diff(&m_of(g.value(f.gate)), &gate) < 1e-12, "seed {seed}");
    }
}

pub fn bidirectional_attention_matches_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let (n, m, d) = dims(&mut r);
        let (mh, mp) = (rand_mask(n, &mut r), rand_mask(m, &mut r));
        let s: M = rand_m(n, m, &mut r).into_iter().map(|row| row.iter().map(|v| v * 5.0).collect()).collect();
        let h = mask(&rand_m(n, d, &mut r), &mh);
        let p = mask(&rand_m(m, d, &mut r), &mp);
        let mut g = Graph::new();
        let (vs, vh, vp) = (g.constant(t(&s)), g.constant(t(&h)), g.constant(t(&p)));
        let (_, q_att) = h2p_attention(&mut g, vs, vp, &mh, &mp).unwrap();
        assert!(max_diff(&m_of(g.value(q_att)), &h2p(&s, &p, &mh, &mp)) < 1e-12, "seed {seed}");

        let got = p2h_attention(&mut g, vs, vh, &mh, &mp).unwrap();
        let (b, c) = p2h(&s, &h, &mh, &mp);
        let gb: Vec<f64> = g.value(got.weights).data().to_vec();
        assert!(gb.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12), "seed {seed}");
        assert!(max_diff(&m_of(g.value(got.summary)), &vec![c.clone()]) < 1e-12, "seed {seed}");
        let tiled: M = mh.iter().map(|&k| if k { c.clone() } else { vec![0.0; d] }).collect();
        assert!(max_diff(&m_of(g.value(got.tiled)), &tiled) < 1e-12, "seed {seed}");
    }
}

pub fn merge_matches_oracle_bitwise() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let (n, _, d) = dims(&mut r);
        let (h, q, c) = (rand_m(n, d, &mut r), rand_m(n, d, &mut r), rand_m(n, d, &mut r));
        let mut g = Graph::new();
        let (vh, vq, vc) = (g.constant(t(&h)), g.constant(t(&q)), g.constant(t(&c)));
        let out = merge(&mut g, vh, vq, vc).unwrap();
        assert_eq!(m_of(g.value(out)), super::merge(&h, &q, &c), "seed {seed}");
    }
}

pub fn self_attend_matches_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(700 + seed);
        let (n, _, d) = dims(&mut r);
        let keep = rand_mask(n, &mut r);
        let gm = mask(&rand_m(n, 4 * d, &mut r), &keep);
        let mut g = Graph::new();
        let v = g.constant(t(&gm));
        let (_, z) = self_attend(&mut g, v, &keep).unwrap();
        assert!(max_diff(&m_of(g.value(z)), &super::self_attend(&gm, &keep)) < 1e-12, "seed {seed}");
    }
}

pub fn self_attend_orthogonal_rows() {
    // Orthogonal rows of norm 2: E = 4·I, so each row keeps weight e⁴/(e⁴ + n − 1).
    let gm: M = vec![vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 2.0]];
    let mut g = Graph::new();
    let v = g.constant(t(&gm));
    let (w, z) = self_attend(&mut g, v, &[true; 3]).unwrap();
    let own = 4f64.exp() / (4f64.exp() + 2.0);
    let other = 1.0 / (4f64.exp() + 2.0);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { own } else { other };
            assert!((g.value(w).at(i, j) - want).abs() < 1e-15);
        }
    }
    assert!(max_diff(&m_of(g.value(z)), &super::self_attend(&gm, &[true; 3])) < 1e-15);
}

pub fn heads_match_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(800 + seed);
        let (n, k, w) = (r.gen_range(1..5), r.gen_range(2..5), r.gen_range(2..9));
        let x = rand_m(n, w, &mut r);
        let wm = rand_m(w, k, &mut r);
        let b: Vec<f64> = (0..k).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(t(&x)), g.constant(t(&wm)));
        let vb = g.constant(Tensor::vector(&b));
        let probs = head_forward(&mut g, vx, vw, vb, HeadKind::Classify(k)).unwrap();
        let want = head_classify(&x, &wm, &b);
        assert!(max_diff(&m_of(g.value(probs)), &want) < 1e-12, "seed {seed}");

        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let loss = cross_entropy(&mut g, probs, &labels, Reduction::Sum).unwrap();
        assert!((g.value(loss).item() - cross_entropy_sum(&want, &labels)).abs() < 1e-10, "seed {seed}");
        let mean = cross_entropy(&mut g, probs, &labels, Reduction::Mean).unwrap();
        assert!((g.value(mean).item() - cross_entropy_sum(&want, &labels) / n as f64).abs() < 1e-10);

        let w1 = rand_m(w, 1, &mut r);
        let b1 = r.gen_range(-1.0..1.0);
        let vw1 = g.constant(t(&w1));
        let vb1 = g.constant(Tensor::vector(&[b1]));
        let score = head_forward(&mut g, vx, vw1, vb1, HeadKind::Rank).unwrap();
        let want = head_rank(&x, &w1, b1);
        assert!(g.value(score).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

pub fn hinge_matches_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(900 + seed);
        let n = r.gen_range(1..8);
        let pos: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let vp = g.constant(Tensor::new(&[n, 1], pos.clone()).unwrap());
        let vn = g.constant(Tensor::new(&[n, 1], neg.clone()).unwrap());
        let l = hinge_loss(&mut g, vp, vn).unwrap();
        assert!((g.value(l).item() - hinge_mean(&pos, &neg)).abs() < 1e-12, "seed {seed}");
    }
}
