//! Finite-difference verification of autodiff gradients.
//!
//! The checker never trusts the graph: it rebuilds the computation from
//! scratch at perturbed points and compares central differences against the
//! backward pass, coordinate by coordinate. The comparison metric is
//! `|a - n| / max(1, |a|, |n|)`, absolute for small gradients and relative
//! for large ones.

use super::{Graph, Tensor, VarId};
use crate::{Error, Result};

/// Checks the gradient of a scalar-valued computation with respect to every
/// coordinate of every input. `build` must be pure: same inputs, same loss.
/// Returns the worst error over all coordinates.
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId>,
{
    if inputs.is_empty() {
        return Err(Error::Usage("grad_check needs at least one input".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!("step size must be positive and finite, got {eps}")));
    }

    // Analytic pass: all inputs as differentiation targets.
    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(g.var(t.clone())?);
    }
    let loss = build(&mut g, &ids)?;
    if !g.tensor(loss).is_scalar() {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar loss, got shape {:?}",
            g.tensor(loss).shape
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(points.len());
        for t in points {
            ids.push(g.constant(t.clone())?);
        }
        let loss = build(&mut g, &ids)?;
        if !g.tensor(loss).is_scalar() {
            return Err(Error::Usage("loss became non-scalar at a perturbed point".into()));
        }
        Ok(g.tensor(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data[j];
            work[i].data[j] = orig + eps;
            let f_plus = eval(&work)?;
            work[i].data[j] = orig - eps;
            let f_minus = eval(&work)?;
            work[i].data[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(build: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    grad_check_multi(|g, ids| build(g, ids[0]), std::slice::from_ref(input), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_tiny_error() {
        // f(x) = sum(x*x); df/dx = 2x, exactly representable, so the only
        // error is the O(eps^2) truncation of the central difference.
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, id| {
            let sq = g.mul(id, id)?;
            g.sum(sq)
        }, &x, 1e-4)
        .unwrap();
        assert!(err < 1e-8, "error {err}");
    }

    #[test]
    fn quadratic_analytic_gradient_values() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let id = g.var(x).unwrap();
        let sq = g.mul(id, id).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(id).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_gives_zero_both_ways() {
        let x = Tensor::new(vec![3], vec![0.5, -0.25, 2.0]).unwrap();
        let err = grad_check(|g, id| {
            let zero = g.scale(id, 0.0)?;
            g.sum(zero)
        }, &x, 1e-4)
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|g, id| g.mul(id, id), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn bad_eps_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, id| g.sum(id), &x, 0.0).is_err());
        assert!(grad_check(|g, id| g.sum(id), &x, f64::NAN).is_err());
    }
}
