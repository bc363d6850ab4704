//! Penalized least squares with an unpenalized intercept.
//!
//! Lasso minimizes `(1/2n)·‖y − β₀ − Xβ‖² + λ‖β‖₁` by cyclic coordinate
//! descent on the centered Gram matrix; Ridge solves
//! `(XcᵀXc + nλI)β = Xcᵀ(y − ȳ)` directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Coordinate-descent passes (zero for direct solves).
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub penalty: Penalty,
    pub lambda: f64,
    /// Sample sd of each training column, for standardized importances.
    pub column_sd: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl LinearModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.coefficients.len() {
            return Err(Error::Schema(format!(
                "linear model has {} coefficients, input has {} columns",
                self.coefficients.len(),
                x.ncols()
            )));
        }
        let beta = DVector::from_column_slice(&self.coefficients);
        let xb = x * beta;
        Ok(xb.iter().map(|v| v + self.intercept).collect())
    }

    pub fn l1_norm(&self) -> f64 {
        self.coefficients.iter().map(|b| b.abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    /// Largest coefficient change in a pass that counts as settled.
    pub tol: f64,
    /// A settled fit is accepted once its KKT residual is at most this.
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            kkt_tol: 1e-7,
            max_iter: 100_000,
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Fit("no training rows".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Fit(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite value in training data".into()));
    }
    Ok(())
}

/// Centered design summaries shared by the solvers.
struct Centered {
    x_mean: Vec<f64>,
    y_mean: f64,
    /// `(1/n)·XcᵀXc`.
    gram: DMatrix<f64>,
    /// `(1/n)·Xcᵀ(y − ȳ)`.
    xty: DVector<f64>,
    column_sd: Vec<f64>,
}

impl Centered {
    fn new(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let n = x.nrows() as f64;
        let x_mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
        let y_mean = stats::mean(y);
        let mut xc = x.clone();
        for (j, m) in x_mean.iter().enumerate() {
            let first = x[(0, j)];
            if x.column(j).iter().all(|v| *v == first) {
                // Exactly zero, so the column never enters the fit.
                xc.column_mut(j).fill(0.0);
            } else {
                xc.column_mut(j).add_scalar_mut(-m);
            }
        }
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
        let gram = xc.tr_mul(&xc) / n;
        let xty = xc.tr_mul(&yc) / n;
        let column_sd = x
            .column_iter()
            .map(|c| stats::sample_sd(c.as_slice()))
            .collect();
        Self {
            x_mean,
            y_mean,
            gram,
            xty,
            column_sd,
        }
    }

    fn intercept(&self, beta: &[f64]) -> f64 {
        self.y_mean - self.x_mean.iter().zip(beta).map(|(m, b)| m * b).sum::<f64>()
    }
}

/// `max_j |n⁻¹ Xcⱼᵀ(y − ȳ)|`: the smallest λ with an all-zero Lasso solution.
pub fn lambda_max(x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    check_inputs(x, y)?;
    let c = Centered::new(x, y);
    Ok(c.xty.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Largest violation of the Lasso optimality conditions, computed from the
/// raw data: `max(0, |gⱼ| − λ)` for zero coefficients and `|gⱼ − λ·sign βⱼ|`
/// for active ones, with `g = n⁻¹ Xcᵀ r`.
pub fn kkt_residual(x: &DMatrix<f64>, y: &[f64], intercept: f64, beta: &[f64], lambda: f64) -> f64 {
    let n = x.nrows();
    let mut resid: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    for (j, b) in beta.iter().enumerate() {
        if *b != 0.0 {
            for (r, xv) in resid.iter_mut().zip(x.column(j).iter()) {
                *r -= b * xv;
            }
        }
    }
    let r_mean = stats::mean(&resid);
    let mut worst: f64 = 0.0;
    for (j, b) in beta.iter().enumerate() {
        let col = x.column(j);
        let x_mean = col.mean();
        let g: f64 = col
            .iter()
            .zip(&resid)
            .map(|(xv, r)| (xv - x_mean) * (r - r_mean))
            .sum::<f64>()
            / n as f64;
        let v = if *b == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn gram_kkt(c: &Centered, beta: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let b = DVector::from_column_slice(beta);
    let g = &c.xty - &c.gram * b;
    let mut worst: f64 = 0.0;
    for (j, bj) in beta.iter().enumerate() {
        if c.gram[(j, j)] <= 0.0 {
            continue;
        }
        let v = if *bj == 0.0 {
            (g[j].abs() - lambda).max(0.0)
        } else {
            (g[j] - lambda * bj.signum()).abs()
        };
        worst = worst.max(v);
    }
    (g.iter().copied().collect(), worst)
}

fn lasso_cd(c: &Centered, lambda: f64, opts: &LassoOptions, beta: &mut [f64]) -> FitDiagnostics {
    let p = beta.len();
    // grad[j] = n⁻¹ Xcⱼᵀ r for the current residual r.
    let (mut grad, _) = gram_kkt(c, beta, lambda);
    let update = |j: usize, beta: &mut [f64], grad: &mut [f64]| -> f64 {
        let q = c.gram[(j, j)];
        if q <= 0.0 {
            return 0.0;
        }
        let old = beta[j];
        let new = soft_threshold(grad[j] + q * old, lambda) / q;
        let delta = new - old;
        if delta != 0.0 {
            beta[j] = new;
            for (k, g) in grad.iter_mut().enumerate() {
                *g -= c.gram[(k, j)] * delta;
            }
        }
        delta.abs()
    };

    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    while iterations < opts.max_iter {
        // Full pass over every coordinate.
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            max_change = max_change.max(update(j, beta, &mut grad));
        }
        if max_change < opts.tol {
            let (g, r) = gram_kkt(c, beta, lambda);
            grad = g;
            kkt = r;
            if kkt <= opts.kkt_tol {
                return FitDiagnostics {
                    iterations,
                    kkt_residual: kkt,
                    converged: true,
                };
            }
        }
        // Passes over the active set until it settles.
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while iterations < opts.max_iter {
            iterations += 1;
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, beta, &mut grad));
            }
            if change < opts.tol {
                break;
            }
        }
    }
    if kkt.is_infinite() {
        kkt = gram_kkt(c, beta, lambda).1;
    }
    FitDiagnostics {
        iterations,
        kkt_residual: kkt,
        converged: false,
    }
}

/// Lasso fit; `warm_start` seeds the coefficients.
pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &LassoOptions,
    warm_start: Option<&[f64]>,
) -> Result<LinearModel> {
    check_inputs(x, y)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Fit(format!("lambda {lambda} must be non-negative")));
    }
    let c = Centered::new(x, y);
    Ok(lasso_on(&c, lambda, opts, warm_start))
}

fn lasso_on(c: &Centered, lambda: f64, opts: &LassoOptions, warm_start: Option<&[f64]>) -> LinearModel {
    let p = c.x_mean.len();
    let mut beta = match warm_start {
        Some(w) if w.len() == p => w.to_vec(),
        _ => vec![0.0; p],
    };
    let diagnostics = lasso_cd(c, lambda, opts, &mut beta);
    if !diagnostics.converged {
        tracing::warn!(
            lambda,
            iterations = diagnostics.iterations,
            kkt = diagnostics.kkt_residual,
            "lasso did not converge"
        );
    }
    LinearModel {
        intercept: c.intercept(&beta),
        coefficients: beta,
        penalty: Penalty::L1,
        lambda,
        column_sd: c.column_sd.clone(),
        diagnostics,
    }
}

/// Warm-started fits along `lambdas` in the given order (descending is fastest).
pub fn lasso_path(
    x: &DMatrix<f64>,
    y: &[f64],
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<LinearModel>> {
    check_inputs(x, y)?;
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Fit(format!("lambda {bad} must be non-negative")));
    }
    let c = Centered::new(x, y);
    let mut out: Vec<LinearModel> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let warm = out.last().map(|m| m.coefficients.clone());
        out.push(lasso_on(&c, l, opts, warm.as_deref()));
    }
    Ok(out)
}

pub fn fit_ridge(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LinearModel> {
    check_inputs(x, y)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Fit(format!("lambda {lambda} must be non-negative")));
    }
    let c = Centered::new(x, y);
    let p = c.x_mean.len();
    // Same system as (XcᵀXc + nλI)β = Xcᵀ(y − ȳ), divided through by n.
    let a = &c.gram + DMatrix::identity(p, p) * lambda;
    if lambda == 0.0 {
        let sv = a.clone().singular_values();
        let hi = sv.iter().fold(0.0f64, |m, v| m.max(*v));
        let lo = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if p > 0 && (hi == 0.0 || lo <= hi * 1e-12) {
            return Err(Error::Fit("singular design: ridge with lambda = 0 needs full column rank".into()));
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Fit("ridge system is not positive definite".into()))?;
    let beta: Vec<f64> = chol.solve(&c.xty).iter().copied().collect();
    let intercept = c.intercept(&beta);
    let grad = &c.xty - (&c.gram * DVector::from_column_slice(&beta));
    let kkt = grad
        .iter()
        .zip(&beta)
        .map(|(g, b)| (g - lambda * b).abs())
        .fold(0.0, f64::max);
    Ok(LinearModel {
        intercept,
        coefficients: beta,
        penalty: Penalty::L2,
        lambda,
        column_sd: c.column_sd,
        diagnostics: FitDiagnostics {
            iterations: 0,
            kkt_residual: kkt,
            converged: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { 0.0 } else { j as f64 - 4.0 }).collect();
        let y = (0..n)
            .map(|i| 1.5 + (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    /// Least squares with intercept via the normal equations on [1 X].
    fn ols_oracle(x: &DMatrix<f64>, y: &[f64]) -> (f64, Vec<f64>) {
        let n = x.nrows();
        let p = x.ncols();
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let yv = DVector::from_column_slice(y);
        let sol = (a.transpose() * &a).lu().solve(&(a.transpose() * yv)).unwrap();
        (sol[0], sol.iter().skip(1).copied().collect())
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let (x, y) = random_problem(40, 6, 1);
        let lmax = lambda_max(&x, &y).unwrap();
        let m = fit_lasso(&x, &y, lmax, &LassoOptions::default(), None).unwrap();
        assert!(m.coefficients.iter().all(|b| *b == 0.0));
        assert!((m.intercept - stats::mean(&y)).abs() < 1e-12);
        let m = fit_lasso(&x, &y, lmax * 0.99, &LassoOptions::default(), None).unwrap();
        assert!(m.coefficients.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn lambda_zero_matches_normal_equations() {
        for seed in 0..20 {
            let (x, y) = random_problem(50, 10, 100 + seed);
            let m = fit_lasso(&x, &y, 0.0, &LassoOptions::default(), None).unwrap();
            assert!(m.diagnostics.converged);
            let (b0, b) = ols_oracle(&x, &y);
            assert!((m.intercept - b0).abs() < 1e-6);
            for (u, v) in m.coefficients.iter().zip(&b) {
                assert!((u - v).abs() < 1e-6, "{u} vs {v}");
            }
            let r = fit_ridge(&x, &y, 0.0).unwrap();
            for (u, v) in r.coefficients.iter().zip(&b) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    /// Columns orthogonal to the intercept with `n⁻¹XᵀX = I`.
    fn orthonormal_design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, p + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        a.column_mut(0).fill(1.0);
        let q = a.qr().q();
        DMatrix::from_fn(n, p, |i, j| q[(i, j + 1)] * (n as f64).sqrt())
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        let n = 60;
        let p = 8;
        let x = orthonormal_design(n, p, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 + 1.5 * x[(i, 0)] - 0.7 * x[(i, 3)] + 0.3 * x[(i, 5)] + rng.sample::<f64, _>(StandardNormal) * 0.2)
            .collect();
        for lambda in [0.0, 0.1, 0.4, 1.0] {
            let m = fit_lasso(&x, &y, lambda, &LassoOptions::default(), None).unwrap();
            for j in 0..p {
                let z: f64 = (0..n).map(|i| x[(i, j)] * y[i]).sum::<f64>() / n as f64;
                let expect = soft_threshold(z, lambda);
                assert!((m.coefficients[j] - expect).abs() < 1e-8, "j={j} {} vs {expect}", m.coefficients[j]);
            }
        }
    }

    #[test]
    fn kkt_holds_and_path_shrinks() {
        let (x, y) = random_problem(80, 12, 9);
        let lmax = lambda_max(&x, &y).unwrap();
        let lambdas: Vec<f64> = (0..20).map(|k| lmax * 10f64.powf(-4.0 * k as f64 / 19.0)).collect();
        let path = lasso_path(&x, &y, &lambdas, &LassoOptions::default()).unwrap();
        for (m, l) in path.iter().zip(&lambdas) {
            assert!(m.diagnostics.converged);
            let k = kkt_residual(&x, &y, m.intercept, &m.coefficients, *l);
            assert!(k <= 1e-6, "kkt {k} at lambda {l}");
        }
        for w in path.windows(2) {
            assert!(w[0].l1_norm() <= w[1].l1_norm() + 1e-9);
        }
    }

    #[test]
    fn warm_and_cold_starts_agree() {
        let (x, y) = random_problem(50, 7, 12);
        let l = 0.05 * lambda_max(&x, &y).unwrap();
        let cold = fit_lasso(&x, &y, l, &LassoOptions::default(), None).unwrap();
        let warm = fit_lasso(&x, &y, l, &LassoOptions::default(), Some(&[1.0; 7])).unwrap();
        for (a, b) in cold.coefficients.iter().zip(&warm.coefficients) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (x, y) = random_problem(50, 10, 2);
        let opts = LassoOptions {
            max_iter: 1,
            ..LassoOptions::default()
        };
        let m = fit_lasso(&x, &y, 0.0, &opts, None).unwrap();
        assert!(!m.diagnostics.converged);
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut x = DMatrix::zeros(3, 1);
        x[(1, 0)] = f64::NAN;
        assert!(fit_lasso(&x, &[1.0, 2.0, 3.0], 0.1, &LassoOptions::default(), None).is_err());
        assert!(fit_ridge(&x, &[1.0, 2.0, 3.0], 0.1).is_err());
        assert!(fit_lasso(&DMatrix::zeros(0, 2), &[], 0.1, &LassoOptions::default(), None).is_err());
    }

    #[test]
    fn ridge_limits_and_formula() {
        let (x, y) = random_problem(40, 5, 5);
        let mut xs = x.clone();
        for j in 0..5 {
            let sd = stats::sample_sd(x.column(j).as_slice());
            xs.column_mut(j).scale_mut(1.0 / sd);
        }
        let big = fit_ridge(&xs, &y, 1e6).unwrap();
        assert!(big.coefficients.iter().all(|b| b.abs() < 1e-3));
        assert!((big.intercept - stats::mean(&y)).abs() < 1e-2);

        let xv: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let x1 = DMatrix::from_column_slice(10, 1, &xv);
        let y1: Vec<f64> = xv.iter().map(|v| 2.0 * v).collect();
        let lambda = 0.1;
        let m = fit_ridge(&x1, &y1, lambda).unwrap();
        let sxx: f64 = xv.iter().map(|v| v * v).sum();
        let expect = 2.0 * sxx / (sxx + 10.0 * lambda);
        assert!((m.coefficients[0] - expect).abs() < 1e-12);
        assert!(m.coefficients[0] < 2.0);
    }

    #[test]
    fn ridge_singular_at_zero_lambda() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 7.0];
        assert!(matches!(fit_ridge(&x, &y, 0.0), Err(Error::Fit(_))));
        assert!(fit_ridge(&x, &y, 0.1).is_ok());
    }

    #[test]
    fn ridge_duplicate_rows_invariance() {
        let (x, y) = random_problem(30, 4, 6);
        let x2 = DMatrix::from_fn(60, 4, |i, j| x[(i % 30, j)]);
        let y2: Vec<f64> = (0..60).map(|i| y[i % 30]).collect();
        let a = fit_ridge(&x, &y, 0.3).unwrap();
        let b = fit_ridge(&x2, &y2, 0.3).unwrap();
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-10);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-10);
    }

    #[test]
    fn prediction_matches_naive_loop() {
        let (x, y) = random_problem(25, 6, 8);
        let m = fit_lasso(&x, &y, 0.1, &LassoOptions::default(), None).unwrap();
        let pred = m.predict(&x).unwrap();
        for i in 0..25 {
            let mut v = m.intercept;
            for j in 0..6 {
                v += x[(i, j)] * m.coefficients[j];
            }
            assert!((pred[i] - v).abs() < 1e-9);
        }
        assert!(m.predict(&DMatrix::zeros(2, 5)).is_err());
    }

    proptest! {
        #[test]
        fn lasso_kkt_on_random_problems(seed in 0u64..10_000, frac in 0.0f64..1.0) {
            let (x, y) = random_problem(30, 5, seed);
            let l = frac * lambda_max(&x, &y).unwrap();
            let m = fit_lasso(&x, &y, l, &LassoOptions::default(), None).unwrap();
            prop_assert!(m.diagnostics.converged);
            prop_assert!(kkt_residual(&x, &y, m.intercept, &m.coefficients, l) <= 1e-6);
        }
    }
}
