//! Central-difference gradient verification.
//!
//! The checker rebuilds the computation from scratch for every perturbed
//! evaluation, so it stays independent of the autograd path it checks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Flat index where it occurred.
    pub worst_index: usize,
    /// Autograd and numeric values at that index.
    pub autograd: f64,
    pub numeric: f64,
    /// How many coordinates were compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1.0);
    (a - n).abs() / denom
}

/// Checks `d f(x) / d x` against central differences for every coordinate of
/// `x`. `f` must build a scalar from the given leaf and be deterministic.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// As [`grad_check`], restricted to the given coordinates of `x` (used when
/// the full sweep would be too slow).
pub fn grad_check_coords<S, F>(
    f: F,
    x: &Tensor<S>,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if coords.is_empty() {
        return Err(Error::Contract("no coordinates to check".into()));
    }
    let eval = |point: &Tensor<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.clone(), false);
        let out = f(&mut tape, v)?;
        if out.0 >= tape.len() {
            return Err(Error::Contract("function returned a foreign var".into()));
        }
        Ok(tape.value(out).item()?.to_f64_lossy())
    };

    // autograd pass
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    let loss = tape.value(out).clone();
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(out)?;
    let auto = tape
        .take_grad(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: coords[0],
        autograd: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Index(format!(
                "coordinate {i} out of range for {} elements",
                x.numel()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::from_f64_lossy(h);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - S::from_f64_lossy(h);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let autograd = auto.data()[i].to_f64_lossy();
        let err = rel_err(autograd, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
            report.autograd = autograd;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::<f64>::from_fn(vec![5], |i| i as f64 * 0.3 - 0.7);
        let report = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(report.within(1e-9), "{report:?}");
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::<f64>::from_fn(vec![4], |i| 0.2 * i as f64 - 0.3);
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.within(1e-8), "{report:?}");
    }

    #[test]
    fn hard_threshold_is_flagged_as_mismatch() {
        // Autograd uses the straight-through estimator, so the report must
        // show a large error against finite differences: the true derivative
        // is zero almost everywhere.
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.4, 0.9, 0.6, 0.2]).unwrap();
        let report = grad_check(
            |t, v| {
                let b = t.channel_threshold(v, 0.5)?;
                Ok(t.sum(b))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err > 0.5,
            "expected an STE/numeric mismatch, got {report:?}"
        );
    }
}
