//! Bounded Levenberg-Marquardt least squares.
//!
//! Minimises `½ Σ wᵢ rᵢ(p)²` subject to `lo ≤ p ≤ hi`. Bounds are enforced by
//! projecting each trial point back into the box; finite differences switch to
//! one-sided probes at an active bound. Internally the parameters are divided
//! by a per-parameter scale so that the damping term `λ·I` acts on comparable
//! magnitudes.

mod jacobian;
pub mod monte_carlo;

pub use jacobian::{numeric_jacobian, StepPolicy};
pub use monte_carlo::{monte_carlo_propagate, InputDistribution, McSummary};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("residual function returned a non-finite value at {params:?}")]
    Evaluation { params: Vec<f64> },
    #[error("normal equations are singular even with damping {lambda:e}")]
    IllConditioned { lambda: f64 },
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
    #[error("fit did not converge after {} iterations", .best.iterations)]
    NotConverged { best: Box<FitResult> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    MaxIter,
    Stalled,
}

/// Outcome of a least-squares solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: Vec<f64>,
    /// Absent when there are no residual degrees of freedom.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// `sqrt(Σ wᵢ rᵢ²)` at the optimum.
    pub residual_norm: f64,
    pub n_residuals: usize,
    pub iterations: usize,
    pub status: FitStatus,
    /// Condition number of the column-scaled normal matrix.
    pub condition_number: f64,
    pub covariance_reliable: bool,
    /// Weighted sum of squares after every accepted step, starting point first.
    #[serde(skip)]
    pub accepted_ssr: Vec<f64>,
}

impl FitResult {
    /// `true` unless the optimizer stopped for a reason other than convergence.
    pub fn is_advisory(&self) -> bool {
        self.status != FitStatus::Converged || !self.covariance_reliable
    }

    /// 1σ uncertainties (square roots of the covariance diagonal).
    pub fn sigmas(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas().map(|s| s[i]).unwrap_or(f64::NAN)
    }

    pub fn reduced_chi2(&self) -> f64 {
        let dof = self.n_residuals.saturating_sub(self.params.len());
        if dof == 0 {
            f64::NAN
        } else {
            self.residual_norm * self.residual_norm / dof as f64
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

type ResidualFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a>;
type JacobianFn<'a> = Box<dyn Fn(&[f64]) -> DMatrix<f64> + Sync + 'a>;

/// A least-squares problem: residuals, bounds, weights and a start point.
pub struct FitProblem<'a> {
    residuals: ResidualFn<'a>,
    jacobian: Option<JacobianFn<'a>>,
    initial: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    scales: Vec<f64>,
    weights: Option<Vec<f64>>,
    names: Vec<String>,
}

impl<'a> FitProblem<'a> {
    pub fn new<F>(residuals: F, initial: Vec<f64>) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync + 'a,
    {
        let n = initial.len();
        Self {
            residuals: Box::new(residuals),
            jacobian: None,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            scales: initial.iter().map(|p| p.abs().max(1.0)).collect(),
            weights: None,
            names: (0..n).map(|i| format!("p{i}")).collect(),
            initial,
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    /// Typical magnitude of each parameter.
    pub fn with_scales(mut self, scales: Vec<f64>) -> Self {
        self.scales = scales;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn with_names<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.names = names.into_iter().map(Into::into).collect();
        self
    }

    /// Analytic Jacobian of the unweighted residuals.
    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64]) -> DMatrix<f64> + Sync + 'a,
    {
        self.jacobian = Some(Box::new(jac));
        self
    }

    /// Unweighted residuals at `p`.
    pub fn residuals_at(&self, p: &[f64]) -> Vec<f64> {
        (self.residuals)(p)
    }

    pub fn n_params(&self) -> usize {
        self.initial.len()
    }

    fn validate(&self) -> Result<(), FitError> {
        let n = self.initial.len();
        if n == 0 {
            return Err(FitError::InvalidProblem("no parameters".into()));
        }
        if self.lower.len() != n || self.upper.len() != n || self.scales.len() != n || self.names.len() != n {
            return Err(FitError::InvalidProblem("bounds, scales and names must match the parameter count".into()));
        }
        for j in 0..n {
            let p = self.initial[j];
            if !p.is_finite() || p < self.lower[j] || p > self.upper[j] {
                return Err(FitError::InvalidProblem(format!(
                    "initial {} = {p} outside [{}, {}]",
                    self.names[j], self.lower[j], self.upper[j]
                )));
            }
            if !(self.scales[j].is_finite() && self.scales[j] > 0.0) {
                return Err(FitError::InvalidProblem(format!("scale of {} must be positive", self.names[j])));
            }
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(FitError::InvalidProblem("weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    fn weighted(&self, r: Vec<f64>) -> Vec<f64> {
        match &self.weights {
            Some(w) => r.iter().zip(w).map(|(ri, wi)| ri * wi.sqrt()).collect(),
            None => r,
        }
    }

    fn eval(&self, p: &[f64]) -> Result<Vec<f64>, FitError> {
        let r = (self.residuals)(p);
        if let Some(w) = &self.weights {
            if w.len() != r.len() {
                return Err(FitError::InvalidProblem(format!(
                    "{} weights for {} residuals",
                    w.len(),
                    r.len()
                )));
            }
        }
        if r.iter().all(|v| v.is_finite()) {
            Ok(self.weighted(r))
        } else {
            Err(FitError::Evaluation { params: p.to_vec() })
        }
    }

    fn jac(&self, p: &[f64], policy: StepPolicy) -> Result<DMatrix<f64>, FitError> {
        let mut j = match &self.jacobian {
            Some(jf) => jf(p),
            None => numeric_jacobian(&*self.residuals, p, &self.lower, &self.upper, &self.scales, policy)?,
        };
        if let Some(w) = &self.weights {
            for (i, wi) in w.iter().enumerate() {
                let s = wi.sqrt();
                j.row_mut(i).scale_mut(s);
            }
        }
        if j.iter().any(|v| !v.is_finite()) {
            return Err(FitError::Evaluation { params: p.to_vec() });
        }
        Ok(j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Stop when every gradient component is this small relative to its
    /// column and residual norms.
    pub g_tol: f64,
    /// Stop when the scaled step is this small relative to the scaled point.
    pub x_tol: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub f_tol: f64,
    pub step: StepPolicy,
    /// Scale the covariance by the residual variance. Turn off when the
    /// weights are absolute inverse variances.
    pub scale_covariance: bool,
    pub max_condition: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            g_tol: 1e-10,
            x_tol: 1e-10,
            f_tol: 1e-14,
            step: StepPolicy::default(),
            scale_covariance: true,
            max_condition: 1e10,
        }
    }
}

fn ssr(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn clamp_into(p: &mut [f64], lo: &[f64], hi: &[f64]) {
    for j in 0..p.len() {
        p[j] = p[j].clamp(lo[j], hi[j]);
    }
}

/// Run Levenberg-Marquardt on `problem`.
///
/// A trial point whose residuals are non-finite counts as a rejected step;
/// non-finite values at the start point or inside a Jacobian are errors.
pub fn solve(problem: &FitProblem<'_>, opts: &SolveOptions) -> Result<FitResult, FitError> {
    problem.validate()?;
    let n = problem.n_params();
    let s = &problem.scales;
    let (lo, hi) = (&problem.lower, &problem.upper);

    let mut p = problem.initial.clone();
    let mut r = problem.eval(&p)?;
    let m = r.len();
    let mut cost = ssr(&r);
    let mut accepted = vec![cost];

    let mut lambda = f64::NAN;
    let mut status = FitStatus::MaxIter;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        iterations += 1;
        let jac = problem.jac(&p, opts.step)?;
        // column-scaled Jacobian: d r / d (p/s)
        let js = DMatrix::from_fn(m, n, |i, j| jac[(i, j)] * s[j]);
        let rv = DVector::from_column_slice(&r);
        let g = js.transpose() * &rv;
        let a = js.transpose() * &js;

        let rnorm = cost.sqrt();
        if rnorm == 0.0 {
            status = FitStatus::Converged;
            break;
        }
        // gradient test on the components not blocked by an active bound
        let mut gmax = 0.0f64;
        for j in 0..n {
            let descent = -g[j];
            let blocked = (p[j] <= lo[j] && descent < 0.0) || (p[j] >= hi[j] && descent > 0.0);
            if blocked {
                continue;
            }
            let cn = js.column(j).norm();
            if cn > 0.0 {
                gmax = gmax.max(g[j].abs() / (cn * rnorm));
            }
        }
        if gmax <= opts.g_tol {
            status = FitStatus::Converged;
            break;
        }

        let max_diag = (0..n).map(|j| a[(j, j)]).fold(0.0f64, f64::max);
        if lambda.is_nan() {
            lambda = 1e-3 * max_diag.max(f64::MIN_POSITIVE);
        }
        let lambda_ceiling = 1e16 * max_diag.max(1.0);

        loop {
            let mut damped = a.clone();
            for j in 0..n {
                damped[(j, j)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 2.0;
                if lambda > 1e30 * max_diag.max(1.0) {
                    return Err(FitError::IllConditioned { lambda });
                }
                continue;
            };
            let delta = chol.solve(&(-&g));

            let mut trial: Vec<f64> = (0..n).map(|j| p[j] + delta[j] * s[j]).collect();
            clamp_into(&mut trial, lo, hi);
            let step_norm = (0..n).map(|j| ((trial[j] - p[j]) / s[j]).powi(2)).sum::<f64>().sqrt();
            let x_norm = (0..n).map(|j| (p[j] / s[j]).powi(2)).sum::<f64>().sqrt();
            let tiny_step = step_norm <= opts.x_tol * (x_norm + opts.x_tol);

            let trial_r = problem.eval(&trial).ok();
            let trial_cost = trial_r.as_deref().map(ssr).unwrap_or(f64::INFINITY);

            if trial_cost < cost {
                let reduction = (cost - trial_cost) / cost;
                p = trial;
                r = trial_r.expect("finite trial residuals");
                cost = trial_cost;
                accepted.push(cost);
                lambda /= 3.0;
                if tiny_step || reduction <= opts.f_tol || cost == 0.0 {
                    status = FitStatus::Converged;
                    break 'outer;
                }
                continue 'outer;
            }

            if tiny_step {
                // no representable improvement left along the damped direction
                status = FitStatus::Converged;
                break 'outer;
            }
            lambda *= 2.0;
            if lambda > lambda_ceiling {
                status = FitStatus::Stalled;
                break 'outer;
            }
        }
    }

    let jac = problem.jac(&p, opts.step)?;
    let (covariance, condition_number) = covariance(&jac, s, cost, m, opts.scale_covariance);
    let covariance_reliable = covariance.is_some() && condition_number <= opts.max_condition;

    Ok(FitResult {
        names: problem.names.clone(),
        params: p,
        covariance,
        residual_norm: cost.sqrt(),
        n_residuals: m,
        iterations,
        status,
        condition_number,
        covariance_reliable,
        accepted_ssr: accepted,
    })
}

/// `σ² · (JᵀWJ)⁻¹` with `σ² = SSR/(m−n)`, evaluated in scaled coordinates.
fn covariance(
    jac: &DMatrix<f64>,
    scales: &[f64],
    cost: f64,
    m: usize,
    scale_by_residuals: bool,
) -> (Option<Vec<Vec<f64>>>, f64) {
    let n = jac.ncols();
    let js = DMatrix::from_fn(m, n, |i, j| jac[(i, j)] * scales[j]);
    let a = js.transpose() * &js;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if m <= n {
        return (None, cond);
    }
    let Ok(inv) = svd.pseudo_inverse(smax * 1e-15) else {
        return (None, cond);
    };
    let factor = if scale_by_residuals { cost / (m - n) as f64 } else { 1.0 };
    let cov = (0..n)
        .map(|i| (0..n).map(|j| inv[(i, j)] * scales[i] * scales[j] * factor).collect())
        .collect();
    (Some(cov), cond)
}
