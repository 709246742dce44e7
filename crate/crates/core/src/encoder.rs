//! Per-sentence contextual encoding, cross-sentence alignment, and gated fusion.
//!
//! Sequences are rows: a sentence of `n` tokens is an `n × d` matrix. Every
//! function takes a row mask (`true` for real tokens) and guarantees that
//! masked rows of its outputs are exactly zero, so padding never leaks into
//! unmasked positions.

use crate::autograd::{Dropout, Graph, Var};
use crate::error::Result;

/// Weights of the convolution + self-attention stack, shared by both sentences.
#[derive(Debug, Clone)]
pub struct ContextVars {
    pub proj_w: Var,
    pub proj_b: Var,
    /// `(kernel [w, d, d], bias [d])` per convolution sublayer.
    pub convs: Vec<(Var, Var)>,
    pub attn_q: Var,
    pub attn_k: Var,
    pub attn_v: Var,
}

/// Projects embeddings to the model width, then applies each convolution and
/// the self-attention sublayer with a residual connection around each.
pub fn encode_context(g: &mut Graph, x: Var, mask: &[bool], vars: &ContextVars, dropout: &mut Dropout) -> Result<Var> {
    let x = dropout.apply(g, x)?;
    let projected = g.matmul(x, vars.proj_w)?;
    let projected = g.add_bias(projected, vars.proj_b)?;
    let mut h = g.mask_rows(projected, mask)?;

    for &(kernel, bias) in &vars.convs {
        let conv = g.conv1d(h, kernel)?;
        let conv = g.add_bias(conv, bias)?;
        let conv = g.relu(conv);
        let conv = dropout.apply(g, conv)?;
        let sum = g.add(h, conv)?;
        h = g.mask_rows(sum, mask)?;
    }

    let attended = scaled_self_attention(g, h, mask, vars)?;
    let attended = dropout.apply(g, attended)?;
    let sum = g.add(h, attended)?;
    g.mask_rows(sum, mask)
}

/// Single-head scaled dot-product self-attention over unmasked positions.
fn scaled_self_attention(g: &mut Graph, h: Var, mask: &[bool], vars: &ContextVars) -> Result<Var> {
    let d = g.shape(h)[1] as f64;
    let q = g.matmul(h, vars.attn_q)?;
    let k = g.matmul(h, vars.attn_k)?;
    let v = g.matmul(h, vars.attn_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.affine(scores, 1.0 / d.sqrt(), 0.0);
    let weights = g.softmax(scores, 1, Some(mask))?;
    let out = g.matmul(weights, v)?;
    g.mask_rows(out, mask)
}

/// Outputs of [`align`].
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    /// `n × m` similarity scores.
    pub scores: Var,
    /// Row-normalised scores (over the second sentence).
    pub row_weights: Var,
    /// Column-normalised scores (over the first sentence).
    pub col_weights: Var,
    /// First sentence re-expressed through the second (`n × d`).
    pub a_aligned: Var,
    /// Second sentence re-expressed through the first (`m × d`).
    pub b_aligned: Var,
}

/// Similarity `relu(C·W_c) · relu(Q·W_q)ᵀ`, the form shared by alignment and
/// the bidirectional attention layer.
pub fn projected_similarity(g: &mut Graph, c: Var, q: Var, w_c: Var, w_q: Var) -> Result<Var> {
    let left = g.matmul(c, w_c)?;
    let left = g.relu(left);
    let right = g.matmul(q, w_q)?;
    let right = g.relu(right);
    let right_t = g.transpose(right)?;
    g.matmul(left, right_t)
}

/// Soft alignment of two encoded sentences.
///
/// `C' = softmax_rows(S) · Q` and `Q' = softmax_cols(S)ᵀ · C`, so every row of
/// either output is a convex combination of the other sentence's unmasked rows.
pub fn align(
    g: &mut Graph,
    c: Var,
    q: Var,
    mask_c: &[bool],
    mask_q: &[bool],
    w_c: Var,
    w_q: Var,
) -> Result<Alignment> {
    let scores = projected_similarity(g, c, q, w_c, w_q)?;
    g.tag(scores, "align.scores");

    let row_weights = g.softmax(scores, 1, Some(mask_q))?;
    let a_aligned = g.matmul(row_weights, q)?;
    let a_aligned = g.mask_rows(a_aligned, mask_c)?;
    g.tag(a_aligned, "align.a_aligned");

    let col_weights = g.softmax(scores, 0, Some(mask_c))?;
    let col_t = g.transpose(col_weights)?;
    let b_aligned = g.matmul(col_t, c)?;
    let b_aligned = g.mask_rows(b_aligned, mask_q)?;
    g.tag(b_aligned, "align.b_aligned");

    Ok(Alignment {
        scores,
        row_weights,
        col_weights,
        a_aligned,
        b_aligned,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub out: Var,
    pub gate: Var,
    pub candidate: Var,
}

/// Gated fusion of `x` (original) and `y` (aligned):
///
/// ```text
/// f = [x; y; x⊙y; x−y]
/// z = σ(f·W₂) ⊙ tanh(f·W₁) + (1 − σ(f·W₂)) ⊙ x
/// ```
pub fn fuse(g: &mut Graph, x: Var, y: Var, w1: Var, w2: Var) -> Result<Fusion> {
    let prod = g.mul(x, y)?;
    let diff = g.sub(x, y)?;
    let features = g.concat(&[x, y, prod, diff], 1)?;
    let candidate = g.matmul(features, w1)?;
    let candidate = g.tanh(candidate);
    let gate = g.matmul(features, w2)?;
    let gate = g.sigmoid(gate);
    let keep = g.affine(gate, -1.0, 1.0);
    let mixed = g.mul(gate, candidate)?;
    let carried = g.mul(keep, x)?;
    let out = g.add(mixed, carried)?;
    Ok(Fusion { out, gate, candidate })
}

/// Replacement for [`fuse`] when fusion is ablated: `[x; y] · W`.
pub fn splice_project(g: &mut Graph, x: Var, y: Var, w: Var) -> Result<Var> {
    let spliced = g.concat(&[x, y], 1)?;
    g.matmul(spliced, w)
}

/// How the fused representation is produced.
#[derive(Debug, Clone, Copy)]
pub enum FuseVars {
    Gated { w1: Var, w2: Var },
    Spliced { w: Var },
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub context: ContextVars,
    /// `None` disables alignment: each sentence is fused with itself.
    pub align: Option<(Var, Var)>,
    pub fuse: FuseVars,
}

#[derive(Debug, Clone, Copy)]
pub struct PairEncoding {
    pub c: Var,
    pub q: Var,
    pub alignment: Option<Alignment>,
    pub h: Var,
    pub p: Var,
    /// Fusion gates of the two sentences, when gated fusion is active.
    pub gates: Option<(Var, Var)>,
}

/// Encodes both sentences with shared weights, aligns them, and fuses each
/// with its aligned counterpart.
pub fn encode_pair(
    g: &mut Graph,
    x: Var,
    y: Var,
    mask_x: &[bool],
    mask_y: &[bool],
    vars: &EncoderVars,
    dropout: &mut Dropout,
) -> Result<PairEncoding> {
    let c = encode_context(g, x, mask_x, &vars.context, dropout)?;
    let q = encode_context(g, y, mask_y, &vars.context, dropout)?;
    let (alignment, c_aligned, q_aligned) = match vars.align {
        Some((w_c, w_q)) => {
            let a = align(g, c, q, mask_x, mask_y, w_c, w_q)?;
            (Some(a), a.a_aligned, a.b_aligned)
        }
        None => (None, c, q),
    };
    let (h, p, gates) = match vars.fuse {
        FuseVars::Gated { w1, w2 } => {
            let fh = fuse(g, c, c_aligned, w1, w2)?;
            let fp = fuse(g, q, q_aligned, w1, w2)?;
            g.tag(fh.gate, "fuse.gate");
            (fh.out, fp.out, Some((fh.gate, fp.gate)))
        }
        FuseVars::Spliced { w } => {
            let h = splice_project(g, c, c_aligned, w)?;
            let p = splice_project(g, q, q_aligned, w)?;
            (h, p, None)
        }
    };
    g.tag(h, "encode.h");
    g.tag(p, "encode.p");
    Ok(PairEncoding {
        c,
        q,
        alignment,
        h,
        p,
        gates,
    })
}
