//! Pooling, output heads, and training losses.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax over this many classes.
    Classify(usize),
    /// Single matching score.
    Rank,
}

impl HeadKind {
    pub fn out_dim(self) -> usize {
        match self {
            HeadKind::Classify(k) => k,
            HeadKind::Rank => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// First and last unmasked rows, concatenated.
    #[default]
    Splice,
    /// Mean and max over unmasked rows, concatenated.
    MeanMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// `[Z[first]; Z[last]]` over unmasked positions, as a `1 × 2w` row.
pub fn pool_splice(g: &mut Graph, z: Var, mask: &[bool]) -> Result<Var> {
    let first = mask.iter().position(|&m| m).ok_or(Error::EmptySequence)?;
    let last = mask.iter().rposition(|&m| m).ok_or(Error::EmptySequence)?;
    let width = g.shape(z)[1];
    let rows = g.select_rows(z, &[first, last])?;
    g.reshape(rows, &[1, 2 * width])
}

pub fn pool_mean_max(g: &mut Graph, z: Var, mask: &[bool]) -> Result<Var> {
    let mean = g.mean_rows(z, mask)?;
    let max = g.max_rows(z, mask)?;
    g.concat(&[mean, max], 1)
}

pub fn pool(g: &mut Graph, z: Var, mask: &[bool], pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Splice => pool_splice(g, z, mask),
        Pooling::MeanMax => pool_mean_max(g, z, mask),
    }
}

/// `F(tanh(pooled·W + b))` with `F = softmax` for classification and
/// `F = tanh` for ranking. `pooled` is `N × width`; the result is `N × out_dim`.
pub fn head_forward(g: &mut Graph, pooled: Var, w: Var, b: Var, kind: HeadKind) -> Result<Var> {
    let logits = g.matmul(pooled, w)?;
    let logits = g.add_bias(logits, b)?;
    let hidden = g.tanh(logits);
    let out = match kind {
        HeadKind::Classify(_) => g.softmax(hidden, 1, None)?,
        HeadKind::Rank => g.tanh(hidden),
    };
    Ok(g.tag(out, "head.out"))
}

/// `-Σ_i Σ_k y_ik ln ŷ_ik` with one-hot `y`, optionally divided by the batch size.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let total = g.nll(probs, labels, LOG_CLAMP)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.affine(total, 1.0 / labels.len() as f64, 0.0),
    })
}

/// Mean of `max(0, 1 − f(A,B⁺) + f(A,B⁻))` over aligned `N × 1` score columns.
pub fn hinge_loss(g: &mut Graph, pos: Var, neg: Var) -> Result<Var> {
    let gap = g.sub(pos, neg)?;
    let margin = g.affine(gap, -1.0, 1.0);
    let clipped = g.relu(margin);
    Ok(g.mean(clipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rows(n: usize, w: usize) -> Tensor {
        Tensor::new(&[n, w], (0..n * w).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn splice_picks_first_and_last_unmasked() {
        let mut g = Graph::new();
        let z = g.constant(rows(1, 2));
        let p = pool_splice(&mut g, z, &[true]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 0.0, 1.0]);

        let z = g.constant(rows(3, 2));
        let p = pool_splice(&mut g, z, &[true; 3]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 4.0, 5.0]);

        let z = g.constant(rows(5, 2));
        let p = pool_splice(&mut g, z, &[true, true, true, false, false]).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 1.0, 4.0, 5.0]);

        assert!(matches!(pool_splice(&mut g, z, &[false; 5]), Err(Error::EmptySequence)));
    }

    #[test]
    fn zero_head_is_uniform_or_zero() {
        let mut g = Graph::new();
        let pooled = g.constant(rows(2, 4));
        let w = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let probs = head_forward(&mut g, pooled, w, b, HeadKind::Classify(3)).unwrap();
        assert!(g.value(probs).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let w = g.constant(Tensor::zeros(&[4, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let score = head_forward(&mut g, pooled, w, b, HeadKind::Rank).unwrap();
        assert_eq!(g.value(score).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let one_hot = g.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut g, one_hot, &[1], Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let uniform = g.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
        let l = cross_entropy(&mut g, uniform, &[2], Reduction::Sum).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&mut g, uniform, &[3], Reduction::Sum),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn hinge_closed_forms() {
        let cases = [(1.5, 0.2, 0.0), (0.4, 0.4, 1.0), (0.9, 0.3, 0.4)];
        for (pos, neg, want) in cases {
            let mut g = Graph::new();
            let p = g.constant(Tensor::new(&[1, 1], vec![pos]).unwrap());
            let n = g.constant(Tensor::new(&[1, 1], vec![neg]).unwrap());
            let l = hinge_loss(&mut g, p, n).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-15, "{pos} {neg}");
        }
    }
}
