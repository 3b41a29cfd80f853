use super::{Graph, Var};
use crate::error::{Result, SdqError};
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_surrogate<F>(f: &F, point: Tensor, coord: usize) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::surrogate();
    let x = g.param(point);
    let y = f(&mut g, x)?;
    let v = g.value(y);
    if !v.is_scalar() {
        return Err(SdqError::contract("grad_check: function is not scalar-valued"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(SdqError::NonFinite {
            context: "grad_check perturbed evaluation".into(),
            index: coord,
            value: v,
        });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences of step `h`.
///
/// Both sides are evaluated on a surrogate graph, so rounding nodes
/// contribute their straight-through derivative.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(SdqError::contract(format!("grad_check: step must be positive, got {h}")));
    }
    let mut g = Graph::surrogate();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.value(y).ensure_finite("grad_check output")?;
    g.backward(y)?;
    let analytic = g.grad(x).into_data();
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(SdqError::NonFinite {
            context: "grad_check analytic gradient".into(),
            index: i,
            value: analytic[i],
        });
    }

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fp = eval_surrogate(&f, plus, i)?;
        let fm = eval_surrogate(&f, minus, i)?;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = (a - n).abs() / n.abs().max(1.0);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::RoundGrad;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|g, x| Ok(g.sum_sq(x)), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn checks_ste_surrogate() {
        // x · round(x): surrogate derivative is 2x
        let f = |g: &mut Graph, x: Var| {
            let r = g.round(x, RoundGrad::Ste);
            let p = g.mul(x, r)?;
            Ok(g.sum(p))
        };
        let r = grad_check(f, &Tensor::vector(vec![0.3, 1.7, -2.2]), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{}", r.max_rel_error);
        assert!((r.analytic[1] - 3.4).abs() < 1e-12);
    }

    #[test]
    fn non_finite_names_coordinate() {
        let f = |g: &mut Graph, x: Var| {
            let l = g.log(x);
            Ok(g.sum(l))
        };
        let err = grad_check(f, &Tensor::vector(vec![1.0, 1e-7]), 1e-5).unwrap_err();
        match err {
            SdqError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|g, x| Ok(g.sum(x)), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
