use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let hi = f(&theta)?;
        theta[i] = orig - eps;
        let lo = f(&theta)?;
        theta[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around parameter {i}: f(+) = {hi}, f(-) = {lo}"
            )));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_of_squares() {
        let g = finite_diff_grad(|p| Ok(p.iter().map(|x| x * x).sum()), &[1.0, 2.0, 3.0], 1e-5)
            .unwrap();
        for (a, b) in g.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let r = finite_diff_grad(|p| Ok(p[0].ln()), &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_diff_grad(|p| Ok(p[0]), &[0.0], 0.0).is_err());
    }
}
