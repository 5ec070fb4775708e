use nalgebra::DMatrix;
use rayon::prelude::*;

use super::FitError;

/// Step policy for finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    /// Relative step, applied to `max(|p|, scale)`.
    pub relative: f64,
    /// Evaluate the columns on the rayon pool. Only use with pure residuals.
    pub parallel: bool,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            relative: 1e-6,
            parallel: false,
        }
    }
}

fn eval<F>(f: &F, p: &[f64]) -> Result<Vec<f64>, FitError>
where
    F: Fn(&[f64]) -> Vec<f64> + ?Sized,
{
    let r = f(p);
    if r.iter().all(|v| v.is_finite()) {
        Ok(r)
    } else {
        Err(FitError::Evaluation { params: p.to_vec() })
    }
}

/// Central-difference Jacobian of `f` at `params`.
///
/// Steps are one-sided where a central probe would leave `[lower, upper]`.
/// `scales` sets the step floor for parameters near zero.
pub fn numeric_jacobian<F>(
    f: &F,
    params: &[f64],
    lower: &[f64],
    upper: &[f64],
    scales: &[f64],
    policy: StepPolicy,
) -> Result<DMatrix<f64>, FitError>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync + ?Sized,
{
    let n = params.len();
    let base = eval(f, params)?;
    let m = base.len();

    let column = |j: usize| -> Result<Vec<f64>, FitError> {
        let p = params[j];
        let h = policy.relative * p.abs().max(scales[j].abs()).max(f64::MIN_POSITIVE);
        let up_ok = p + h <= upper[j];
        let down_ok = p - h >= lower[j];
        let mut probe = params.to_vec();
        let col = if up_ok && down_ok {
            probe[j] = p + h;
            let hi = eval(f, &probe)?;
            probe[j] = p - h;
            let lo = eval(f, &probe)?;
            // exact step actually taken, after rounding
            let span = (p + h) - (p - h);
            hi.iter().zip(&lo).map(|(a, b)| (a - b) / span).collect()
        } else if up_ok {
            probe[j] = p + h;
            let hi = eval(f, &probe)?;
            let span = (p + h) - p;
            hi.iter().zip(&base).map(|(a, b)| (a - b) / span).collect()
        } else {
            probe[j] = p - h;
            let lo = eval(f, &probe)?;
            let span = p - (p - h);
            base.iter().zip(&lo).map(|(a, b)| (a - b) / span).collect()
        };
        Ok(col)
    };

    let cols: Vec<Vec<f64>> = if policy.parallel {
        (0..n).into_par_iter().map(column).collect::<Result<_, _>>()?
    } else {
        (0..n).map(column).collect::<Result<_, _>>()?
    };

    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn constant_residual_gives_zero_jacobian() {
        let f = |_: &[f64]| vec![1.5, -2.0, 7.0];
        let j = numeric_jacobian(&f, &[0.3, 4.0], &[-INF; 2], &[INF; 2], &[1.0; 2], StepPolicy::default()).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_derivative() {
        let f = |p: &[f64]| vec![p[0] * p[0]];
        let j = numeric_jacobian(&f, &[3.0], &[-INF], &[INF], &[1.0], StepPolicy::default()).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn one_sided_at_bounds() {
        let f = |p: &[f64]| {
            assert!(p[0] >= 0.0 && p[0] <= 1.0, "probe left the box: {}", p[0]);
            vec![p[0].powi(3)]
        };
        let lo = numeric_jacobian(&f, &[0.0], &[0.0], &[1.0], &[1.0], StepPolicy::default()).unwrap();
        assert!(lo[(0, 0)].abs() < 1e-10);
        let hi = numeric_jacobian(&f, &[1.0], &[0.0], &[1.0], &[1.0], StepPolicy::default()).unwrap();
        assert_relative_eq!(hi[(0, 0)], 3.0, max_relative = 1e-5);
    }

    #[test]
    fn parallel_matches_serial() {
        let f = |p: &[f64]| vec![p[0].sin() * p[1], p[1].exp() - p[0], p[0] * p[1] * p[1]];
        let x = [0.7, -0.2];
        let s = numeric_jacobian(&f, &x, &[-INF; 2], &[INF; 2], &[1.0; 2], StepPolicy::default()).unwrap();
        let par = StepPolicy {
            parallel: true,
            ..StepPolicy::default()
        };
        let p = numeric_jacobian(&f, &x, &[-INF; 2], &[INF; 2], &[1.0; 2], par).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let f = |p: &[f64]| vec![(p[0] - 1.0).ln()];
        let err = numeric_jacobian(&f, &[1.0], &[-INF], &[INF], &[1.0], StepPolicy::default()).unwrap_err();
        assert!(matches!(err, FitError::Evaluation { .. }));
    }
}
