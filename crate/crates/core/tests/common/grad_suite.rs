//! Finite-difference checks, 20 seeds per operation and per end-to-end loss.

use super::{rand_mask, rng};
use deim::autograd::{Dropout, Graph, Var};
use deim::data::{build_vocab, prepare_pairs, synthetic_pairs, TokenizedPair};
use deim::encoder::{align, encode_context, fuse, ContextVars};
use deim::gradcheck::{grad_check, relative_error, DEFAULT_TOLERANCE};
use deim::heads::{cross_entropy, head_forward, hinge_loss, pool_mean_max, pool_splice, HeadKind, Reduction};
use deim::interaction::{h2p_attention, merge, p2h_attention, self_attend, similarity};
use deim::model::Model;
use deim::trainer::init_model;
use deim::{Ablation, Result, Task, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn rt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Runs `op` on `SEEDS` random input sets drawn by `make` and asserts every check passes.
fn check<M, F>(name: &str, make: M, op: F)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut r = rng(seed * 7919 + name.len() as u64);
        let inputs = make(&mut r);
        let aux_seed: u64 = r.gen();
        let report = grad_check(
            |g, v| op(g, v, &mut ChaCha8Rng::seed_from_u64(aux_seed)),
            &inputs,
            DEFAULT_TOLERANCE,
        )
        .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(report.passed(), "{name} seed {seed}: {report:?}");
    }
}

fn shape2(r: &mut ChaCha8Rng) -> [usize; 2] {
    [r.gen_range(1..5), r.gen_range(1..5)]
}

pub fn elementwise_and_linear_ops() {
    check(
        "matmul",
        |r| {
            let (a, b, c) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            vec![rt(&[a, b], r), rt(&[b, c], r)]
        },
        |g, v, _| g.matmul(v[0], v[1]),
    );
    check("transpose", |r| vec![rt(&shape2(r), r)], |g, v, _| g.transpose(v[0]));
    for (name, k) in [("add", 0), ("sub", 1), ("mul", 2)] {
        check(
            name,
            |r| {
                let s = shape2(r);
                vec![rt(&s, r), rt(&s, r)]
            },
            move |g, v, _| match k {
                0 => g.add(v[0], v[1]),
                1 => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            },
        );
    }
    check(
        "add_bias",
        |r| {
            let s = shape2(r);
            vec![rt(&s, r), rt(&[s[1]], r)]
        },
        |g, v, _| g.add_bias(v[0], v[1]),
    );
    check("affine", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.affine(v[0], -1.7, 0.3)));
    check("relu", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.relu(v[0])));
    check("tanh", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.tanh(v[0])));
    check("sigmoid", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.sigmoid(v[0])));
    check("sum", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.sum(v[0])));
    check("mean", |r| vec![rt(&shape2(r), r)], |g, v, _| Ok(g.mean(v[0])));
    check(
        "reshape",
        |r| vec![rt(&[2, 3], r)],
        |g, v, _| {
            let x = g.reshape(v[0], &[3, 2])?;
            let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, -1.0, 0.5])?);
            g.matmul(x, w)
        },
    );
}

pub fn structural_ops() {
    check(
        "concat_cols",
        |r| {
            let n = r.gen_range(1..4);
            vec![rt(&[n, 2], r), rt(&[n, 3], r)]
        },
        |g, v, _| g.concat(&[v[0], v[1]], 1),
    );
    check(
        "concat_rows",
        |r| {
            let d = r.gen_range(1..4);
            vec![rt(&[2, d], r), rt(&[1, d], r)]
        },
        |g, v, _| g.concat(&[v[0], v[1]], 0),
    );
    check("select_rows", |r| vec![rt(&[4, 3], r)], |g, v, _| g.select_rows(v[0], &[3, 0, 3]));
    check("broadcast_rows", |r| vec![rt(&[1, 3], r)], |g, v, _| g.broadcast_rows(v[0], 4));
    check(
        "mask_rows",
        |r| vec![rt(&[4, 2], r)],
        |g, v, _| g.mask_rows(v[0], &[true, false, true, false]),
    );
    check(
        "scale_elems",
        |r| vec![rt(&[2, 3], r)],
        |g, v, _| g.scale_elems(v[0], vec![0.0, 1.25, 2.0, -1.0, 3.0, 0.5]),
    );
    check("dropout", |r| vec![rt(&[3, 4], r)], |g, v, r| g.dropout(v[0], 0.3, r));
    check(
        "conv1d",
        |r| {
            let (len, din, dout) = (r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..4));
            let w = [1, 3, 5][r.gen_range(0..3)];
            vec![rt(&[len, din], r), rt(&[w, din, dout], r)]
        },
        |g, v, _| g.conv1d(v[0], v[1]),
    );
}

pub fn reductions_and_normalisations() {
    check(
        "softmax_rows_masked",
        |r| vec![rt(&[3, 4], r)],
        |g, v, _| g.softmax(v[0], 1, Some(&[true, true, false, true])),
    );
    check(
        "softmax_cols_masked",
        |r| vec![rt(&[4, 3], r)],
        |g, v, _| g.softmax(v[0], 0, Some(&[false, true, true, true])),
    );
    check("softmax_vector", |r| vec![rt(&[5], r)], |g, v, _| g.softmax(v[0], 0, None));
    check("row_max", |r| vec![rt(&[3, 4], r)], |g, v, _| g.row_max(v[0], Some(&[true, false, true, true])));
    check("mean_rows", |r| vec![rt(&[4, 3], r)], |g, v, _| g.mean_rows(v[0], &[true, true, false, true]));
    check("max_rows", |r| vec![rt(&[4, 3], r)], |g, v, _| g.max_rows(v[0], &[true, true, true, false]));
    check(
        "nll",
        |r| vec![rt(&[3, 4], r)],
        |g, v, _| {
            let p = g.softmax(v[0], 1, None)?;
            g.nll(p, &[0, 3, 1], 1e-12)
        },
    );
}

pub fn model_layers() {
    check(
        "align",
        |r| {
            let (n, m, d) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
            vec![rt(&[n, d], r), rt(&[m, d], r), rt(&[d, d], r), rt(&[d, d], r)]
        },
        |g, v, _| {
            let (n, m) = (g.shape(v[0])[0], g.shape(v[1])[0]);
            let mut mc = vec![true; n];
            mc[n - 1] = n == 1;
            let a = align(g, v[0], v[1], &mc, &vec![true; m], v[2], v[3])?;
            g.concat(&[a.a_aligned, a.b_aligned], 0)
        },
    );
    check(
        "fuse",
        |r| {
            let (n, d) = (r.gen_range(1..4), r.gen_range(1..4));
            vec![rt(&[n, d], r), rt(&[n, d], r), rt(&[4 * d, d], r), rt(&[4 * d, d], r)]
        },
        |g, v, _| Ok(fuse(g, v[0], v[1], v[2], v[3])?.out),
    );
    check(
        "h2p",
        |r| {
            let (n, m, d) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
            vec![rt(&[n, m], r), rt(&[m, d], r)]
        },
        |g, v, _| {
            let (n, m) = (g.shape(v[0])[0], g.shape(v[0])[1]);
            Ok(h2p_attention(g, v[0], v[1], &vec![true; n], &vec![true; m])?.1)
        },
    );
    check(
        "p2h",
        |r| {
            let (n, m, d) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
            vec![rt(&[n, m], r), rt(&[n, d], r)]
        },
        |g, v, _| {
            let (n, m) = (g.shape(v[0])[0], g.shape(v[0])[1]);
            Ok(p2h_attention(g, v[0], v[1], &vec![true; n], &vec![true; m])?.tiled)
        },
    );
    check(
        "merge",
        |r| {
            let (n, d) = (r.gen_range(1..4), r.gen_range(1..4));
            vec![rt(&[n, d], r), rt(&[n, d], r), rt(&[n, d], r)]
        },
        |g, v, _| merge(g, v[0], v[1], v[2]),
    );
    check(
        "self_attend",
        |r| vec![rt(&[r.gen_range(1..5), 4], r)],
        |g, v, r| {
            let n = g.shape(v[0])[0];
            let keep = rand_mask(n, r);
            Ok(self_attend(g, v[0], &keep)?.1)
        },
    );
    check(
        "similarity_merge_self_attend",
        |r| {
            let (n, m, d) = (r.gen_range(1..4), r.gen_range(1..4), 2);
            vec![rt(&[n, d], r), rt(&[m, d], r), rt(&[d, d], r), rt(&[d, d], r)]
        },
        |g, v, _| {
            let (n, m) = (g.shape(v[0])[0], g.shape(v[1])[0]);
            let (mh, mp) = (vec![true; n], vec![true; m]);
            let s = similarity(g, v[0], v[1], v[2], v[3])?;
            let (_, q) = h2p_attention(g, s, v[1], &mh, &mp)?;
            let c = p2h_attention(g, s, v[0], &mh, &mp)?;
            let gm = merge(g, v[0], q, c.tiled)?;
            Ok(self_attend(g, gm, &mh)?.1)
        },
    );
    check(
        "encode_context",
        |r| {
            let (n, e, d) = (r.gen_range(1..5), 3, 2);
            vec![
                rt(&[n, e], r),
                rt(&[e, d], r),
                rt(&[d], r),
                rt(&[3, d, d], r),
                rt(&[d], r),
                rt(&[d, d], r),
                rt(&[d, d], r),
                rt(&[d, d], r),
            ]
        },
        |g, v, r| {
            let n = g.shape(v[0])[0];
            let vars = ContextVars {
                proj_w: v[1],
                proj_b: v[2],
                convs: vec![(v[3], v[4])],
                attn_q: v[5],
                attn_k: v[6],
                attn_v: v[7],
            };
            let mut dropout = Dropout::train(0.2, r);
            encode_context(g, v[0], &rand_mask(n, &mut ChaCha8Rng::seed_from_u64(n as u64)), &vars, &mut dropout)
        },
    );
}

pub fn heads_and_losses() {
    check(
        "pool_splice",
        |r| vec![rt(&[4, 3], r)],
        |g, v, _| pool_splice(g, v[0], &[true, true, true, false]),
    );
    check(
        "pool_mean_max",
        |r| vec![rt(&[4, 3], r)],
        |g, v, _| pool_mean_max(g, v[0], &[true, false, true, true]),
    );
    check(
        "head_classify",
        |r| vec![rt(&[2, 6], r), rt(&[6, 3], r), rt(&[3], r)],
        |g, v, _| head_forward(g, v[0], v[1], v[2], HeadKind::Classify(3)),
    );
    check(
        "head_rank",
        |r| vec![rt(&[2, 6], r), rt(&[6, 1], r), rt(&[1], r)],
        |g, v, _| head_forward(g, v[0], v[1], v[2], HeadKind::Rank),
    );
    check(
        "cross_entropy",
        |r| vec![rt(&[3, 4], r)],
        |g, v, _| {
            let p = g.softmax(v[0], 1, None)?;
            cross_entropy(g, p, &[1, 0, 3], Reduction::Mean)
        },
    );
    check(
        "hinge",
        // Scores near the margin boundary are kept away from the kink at 1.
        |r| {
            let pos: Vec<f64> = (0..4).map(|_| r.gen_range(-0.5..0.5)).collect();
            let neg: Vec<f64> = pos.iter().map(|p| p - r.gen_range(-0.5..0.5)).collect();
            vec![Tensor::new(&[4, 1], pos).unwrap(), Tensor::new(&[4, 1], neg).unwrap()]
        },
        |g, v, _| hinge_loss(g, v[0], v[1]),
    );
}

fn tiny_model(task: Task, ablation: Ablation, seed: u64) -> (Model, Vec<TokenizedPair>) {
    let raw = synthetic_pairs(task, 4, seed);
    let vocab = build_vocab(&raw, 1);
    let pairs = prepare_pairs(&raw, &vocab, 8).pairs;
    let mut cfg = TrainConfig::default();
    cfg.task = task;
    cfg.static_dim = 4;
    cfg.contextual_dim = 3;
    cfg.hidden = 3;
    cfg.seed = seed;
    cfg.ablation = ablation;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_model(&cfg, &vocab, &mut r).unwrap();
    // Larger head weights keep the loss away from a flat region.
    let hw = model.index_of("head.w").unwrap();
    for v in model.param_mut(hw).data_mut() {
        *v *= 3.0;
    }
    (model, pairs)
}

fn loss_of(model: &Model, pairs: &[TokenizedPair], task: Task) -> (Graph, Var) {
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let loss = if task.is_ranking() {
        let pos: Vec<&TokenizedPair> = vec![&pairs[0], &pairs[1]];
        let neg: Vec<&TokenizedPair> = vec![&pairs[2], &pairs[3]];
        let sp = model.forward_batch(&mut g, &vars, &pos, &mut Dropout::eval()).unwrap();
        let sn = model.forward_batch(&mut g, &vars, &neg, &mut Dropout::eval()).unwrap();
        // Shift scores so every triple sits inside the margin.
        let sp = g.affine(sp, 0.1, 0.0);
        hinge_loss(&mut g, sp, sn).unwrap()
    } else {
        let refs: Vec<&TokenizedPair> = pairs[..2].iter().collect();
        let labels: Vec<usize> = refs.iter().map(|p| p.label).collect();
        let probs = model.forward_batch(&mut g, &vars, &refs, &mut Dropout::eval()).unwrap();
        cross_entropy(&mut g, probs, &labels, Reduction::Mean).unwrap()
    };
    (g, loss)
}

/// End-to-end loss gradient on sampled parameter coordinates; returns the worst relative error.
fn end_to_end(task: Task, ablation: Ablation, seed: u64) -> f64 {
    let (mut model, pairs) = tiny_model(task, ablation, seed);
    let (mut g, loss) = loss_of(&model, &pairs, task);
    g.backward(loss).unwrap();
    let grads = g.param_grads(|i| model.param(i).cols());
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let n = model.param(i).len();
        let coords: Vec<usize> = if i == 0 {
            // Rows of tokens that occur in the batch.
            let c = model.param(0).cols();
            pairs[0].a.ids.iter().take(2).map(|&id| id * c + r.gen_range(0..c)).collect()
        } else {
            (0..3).map(|_| r.gen_range(0..n)).collect()
        };
        for k in coords {
            let analytic = grads.get(&i).map_or(0.0, |gv| gv[k]);
            let base = model.param(i).data()[k];
            let h = 1e-5;
            model.param_mut(i).data_mut()[k] = base + h;
            let (g1, l1) = loss_of(&model, &pairs, task);
            model.param_mut(i).data_mut()[k] = base - h;
            let (g2, l2) = loss_of(&model, &pairs, task);
            model.param_mut(i).data_mut()[k] = base;
            let numeric = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

pub fn end_to_end_classification_loss() {
    for seed in 0..SEEDS {
        let e = end_to_end(Task::Snli, Ablation::default(), seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

pub fn end_to_end_ranking_loss() {
    for seed in 0..SEEDS {
        let e = end_to_end(Task::WikiQa, Ablation::default(), seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

pub fn end_to_end_ablations() {
    let variants = [
        Ablation { no_alignment: true, ..Default::default() },
        Ablation { no_fusion: true, ..Default::default() },
        Ablation { no_self_attention: true, ..Default::default() },
        Ablation { only_h2p: true, ..Default::default() },
        Ablation { only_p2h: true, ..Default::default() },
        Ablation { no_elmo: true, ..Default::default() },
    ];
    for (k, a) in variants.into_iter().enumerate() {
        for seed in 0..4 {
            let e = end_to_end(Task::Snli, a, 100 + seed);
            assert!(e < 1e-3, "variant {k} seed {seed}: {e}");
        }
    }
}
