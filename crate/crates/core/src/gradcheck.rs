//! Central finite-difference validation of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks `op` at `inputs`, probing every coordinate of every input.
///
/// Non-scalar outputs are reduced with fixed random weights so that every
/// output coordinate contributes a distinct signal.
pub fn grad_check<F>(op: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    grad_check_at(op, inputs, &coords, tolerance)
}

/// Like [`grad_check`] but probes only `coords`.
pub fn grad_check_at<F>(
    op: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let reducer = |g: &mut Graph, out: Var| -> Result<Var> {
        let n = g.value(out).len();
        if n == 1 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_f1e1d);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let shape = g.value(out).shape().to_vec();
        let w = g.constant(Tensor::new(&shape, w)?);
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let s = reducer(&mut g, out)?;
        Ok(g.value(s).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    for (k, v) in g.value(out).data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numerical {
                what: "output".into(),
                index: k,
            });
        }
    }
    let s = reducer(&mut g, out)?;
    g.backward(s)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        coordinates: coords.len(),
        tolerance,
    };
    let mut probe = inputs.to_vec();
    for &(i, c) in coords {
        let orig = probe[i].data()[c];
        probe[i].data_mut()[c] = orig + DEFAULT_STEP;
        let plus = eval(&probe)?;
        probe[i].data_mut()[c] = orig - DEFAULT_STEP;
        let minus = eval(&probe)?;
        probe[i].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
        let a = analytic[i][c];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Numerical {
                what: format!("input {i}"),
                index: c,
            });
        }
        let rel = relative_error(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, c);
        }
    }
    Ok(report)
}
