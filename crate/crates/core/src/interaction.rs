//! Bidirectional attention between the two fused sentences, followed by
//! self-attention over the merged representation.

use crate::autograd::{Graph, Var};
use crate::encoder::projected_similarity;
use crate::error::Result;
use crate::tensor::Tensor;

/// Similarity between rows of `h` (`n × d`) and `p` (`m × d`), recomputed with
/// fresh projections on the fused representations.
pub fn similarity(g: &mut Graph, h: Var, p: Var, w_h: Var, w_p: Var) -> Result<Var> {
    let s = projected_similarity(g, h, p, w_h, w_p)?;
    Ok(g.tag(s, "bidaf.similarity"))
}

/// H→P attention: each row of `s` is normalised over `p`'s unmasked rows and
/// used to mix them. Returns `(weights n × m, attended n × d)`.
pub fn h2p_attention(g: &mut Graph, s: Var, p: Var, mask_h: &[bool], mask_p: &[bool]) -> Result<(Var, Var)> {
    let weights = g.softmax(s, 1, Some(mask_p))?;
    g.tag(weights, "bidaf.h2p_weights");
    let attended = g.matmul(weights, p)?;
    let attended = g.mask_rows(attended, mask_h)?;
    g.tag(attended, "bidaf.h2p");
    Ok((weights, attended))
}

#[derive(Debug, Clone, Copy)]
pub struct P2h {
    /// `n × 1` weights over `h`'s rows.
    pub weights: Var,
    /// `1 × d` summary of `h`.
    pub summary: Var,
    /// `summary` tiled over the unmasked rows, `n × d`.
    pub tiled: Var,
}

/// P→H attention: the row maxima of `s` (over `p`'s unmasked columns) are
/// normalised over `h`'s unmasked rows, and the weighted sum of `h` is tiled
/// across all `n` positions.
pub fn p2h_attention(g: &mut Graph, s: Var, h: Var, mask_h: &[bool], mask_p: &[bool]) -> Result<P2h> {
    let n = g.shape(h)[0];
    let peaks = g.row_max(s, Some(mask_p))?;
    let weights = g.softmax(peaks, 0, Some(mask_h))?;
    g.tag(weights, "bidaf.p2h_weights");
    let weights_t = g.transpose(weights)?;
    let summary = g.matmul(weights_t, h)?;
    g.tag(summary, "bidaf.p2h");
    let tiled = g.broadcast_rows(summary, n)?;
    let tiled = g.mask_rows(tiled, mask_h)?;
    Ok(P2h {
        weights,
        summary,
        tiled,
    })
}

/// Per-position merge `[h; q; h⊙q; h⊙c]`, width `4d`.
pub fn merge(g: &mut Graph, h: Var, q_att: Var, c_att: Var) -> Result<Var> {
    let hq = g.mul(h, q_att)?;
    let hc = g.mul(h, c_att)?;
    let merged = g.concat(&[h, q_att, hq, hc], 1)?;
    Ok(g.tag(merged, "merge"))
}

/// A zero matrix standing in for an ablated attention direction.
pub fn zeros_like(g: &mut Graph, like: Var) -> Var {
    let shape = g.shape(like).to_vec();
    g.constant(Tensor::zeros(&shape))
}

/// Self-attention without projections or scaling: `E = G·Gᵀ`, rows normalised
/// over unmasked positions, `Z = softmax_rows(E)·G`. Returns `(weights, Z)`.
pub fn self_attend(g: &mut Graph, merged: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let gt = g.transpose(merged)?;
    let energy = g.matmul(merged, gt)?;
    g.tag(energy, "self_attention.energy");
    let weights = g.softmax(energy, 1, Some(mask))?;
    let z = g.matmul(weights, merged)?;
    let z = g.mask_rows(z, mask)?;
    g.tag(z, "self_attention.out");
    Ok((weights, z))
}
