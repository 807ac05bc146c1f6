//! Initial nuisance fits: logistic propensity model, linear outcome working
//! model, outcome scaling for the logit fluctuation, and the arm-wise
//! conditional variance model used by the plug-in variance.

use crate::datagen::{expit, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, lstsq, Matrix};

pub const LOGISTIC_MAX_ITER: usize = 100;
pub const LOGISTIC_SCORE_TOL: f64 = 1e-8;
pub const LOGISTIC_STEP_TOL: f64 = 1e-10;
/// Coefficient norm beyond which the fit is treated as separating.
pub const LOGISTIC_DIVERGENCE_NORM: f64 = 30.0;
pub const DEFAULT_CLAMP_DELTA: f64 = 0.005;
pub const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    /// Intercept first, then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    /// Estimated `P(A = 1 | W)` per row.
    pub fitted_g1: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityFit {
    /// `1 - g1`, never fitted separately.
    pub fn fitted_g0(&self) -> Vec<f64> {
        self.fitted_g1.iter().map(|g| 1.0 - g).collect()
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn bernoulli_loglik(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(e, yi)| yi * e - log1pexp(*e)).sum()
}

/// Maximum likelihood logistic regression by Newton–Raphson (IRLS) with
/// step halving. `x` must include the intercept column.
pub fn fit_logistic(x: &Matrix, y: &[f64]) -> Result<PropensityFit> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::Input("logistic response length mismatch".into()));
    }
    if n <= p {
        return Err(Error::Input(format!(
            "logistic regression needs more rows ({n}) than columns ({p})"
        )));
    }
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!(
            "logistic response y[{i}] = {} is not binary",
            y[i]
        )));
    }

    let mut beta = vec![0.0; p];
    let mut eta = x.mul_vec(&beta);
    let mut ll = bernoulli_loglik(&eta, y);
    let mut converged = false;
    let mut iterations = 0;
    // Size of the last accepted step. Under separation the score vanishes
    // while steps stay O(1), so a small score only counts once Newton is in
    // its local regime.
    let mut last_step = 0.0f64;

    while iterations < LOGISTIC_MAX_ITER {
        let prob: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid: Vec<f64> = y.iter().zip(&prob).map(|(yi, pi)| yi - pi).collect();
        let score = x.tr_mul_vec(&resid);
        if last_step < 1e-3 && score.iter().all(|s| s.abs() < LOGISTIC_SCORE_TOL) {
            converged = true;
            break;
        }
        let mut info = vec![0.0; p * p];
        for (i, pi) in prob.iter().enumerate() {
            let wi = pi * (1.0 - pi);
            let row = x.row(i);
            for r in 0..p {
                let wr = wi * row[r];
                for c in 0..=r {
                    info[r * p + c] += wr * row[c];
                }
            }
        }
        for r in 0..p {
            for c in 0..r {
                info[c * p + r] = info[r * p + c];
            }
        }
        iterations += 1;
        let Some(mut step) = cholesky_solve(&info, &score) else {
            break;
        };

        // Halve until the likelihood does not decrease.
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            let cand_eta = x.mul_vec(&cand);
            let cand_ll = bernoulli_loglik(&cand_eta, y);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
        if !accepted {
            break;
        }
        last_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if beta.iter().map(|b| b * b).sum::<f64>().sqrt() > LOGISTIC_DIVERGENCE_NORM {
            break;
        }
        if step.iter().all(|s| s.abs() < LOGISTIC_STEP_TOL) {
            converged = true;
            break;
        }
    }

    let fitted_g1 = eta
        .iter()
        .map(|&e| expit(e).clamp(f64::EPSILON, 1.0 - f64::EPSILON))
        .collect();
    Ok(PropensityFit {
        coefficients: beta,
        fitted_g1,
        converged,
        iterations,
    })
}

/// Ordinary least squares coefficients.
pub fn fit_ols(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    let names: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    lstsq(x, y, &names)
}

/// Propensity design: intercept plus every covariate.
pub fn propensity_design(w: &Matrix) -> Matrix {
    let (n, p) = (w.rows(), w.cols());
    let mut x = Matrix::zeros(n, p + 1);
    for i in 0..n {
        x.set(i, 0, 1.0);
        for (j, &v) in w.row(i).iter().enumerate() {
            x.set(i, j + 1, v);
        }
    }
    x
}

pub fn fit_propensity(ds: &Dataset) -> Result<PropensityFit> {
    let y: Vec<f64> = ds.a.iter().map(|&a| f64::from(a)).collect();
    fit_logistic(&propensity_design(&ds.w), &y)
}

/// Linear outcome working model `Y ~ 1 + A + W[included]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeFit {
    /// Intercept, treatment, then one per included covariate.
    pub coefficients: Vec<f64>,
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub included_covariates: Vec<usize>,
}

impl OutcomeFit {
    /// Prediction at the observed treatment of each row.
    pub fn q_observed(&self, a: &[u8]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &ai)| if ai == 1 { self.q1[i] } else { self.q0[i] })
            .collect()
    }
}

fn outcome_row(w: &[f64], a: f64, included: &[usize], out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = a;
    for (k, &j) in included.iter().enumerate() {
        out[k + 2] = w[j];
    }
}

pub fn fit_outcome(ds: &Dataset, included: &[usize]) -> Result<OutcomeFit> {
    let (n, p) = (ds.n(), ds.w.cols());
    if let Some(&j) = included.iter().find(|&&j| j >= p) {
        return Err(Error::Config(format!("covariate index {j} out of range (p = {p})")));
    }
    ds.check_both_arms()?;
    let k = included.len() + 2;
    let mut x = Matrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        outcome_row(ds.w.row(i), f64::from(ds.a[i]), included, &mut row);
        for (j, &v) in row.iter().enumerate() {
            x.set(i, j, v);
        }
    }
    let mut names = vec!["intercept".to_string(), "a".to_string()];
    names.extend(included.iter().map(|j| format!("w{}", j + 1)));
    let coefficients = lstsq(&x, &ds.y, &names)?;

    let mut q1 = Vec::with_capacity(n);
    let mut q0 = Vec::with_capacity(n);
    for i in 0..n {
        outcome_row(ds.w.row(i), 1.0, included, &mut row);
        q1.push(crate::linalg::dot(&row, &coefficients));
        row[1] = 0.0;
        q0.push(crate::linalg::dot(&row, &coefficients));
    }
    Ok(OutcomeFit {
        coefficients,
        q1,
        q0,
        included_covariates: included.to_vec(),
    })
}

/// Affine map of the outcome onto `[0, 1]` with clamping of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScaling {
    pub lower: f64,
    pub upper: f64,
    pub clamp_delta: f64,
}

impl OutcomeScaling {
    /// Bounds from the observed range of `y`.
    pub fn from_outcome(y: &[f64], clamp_delta: f64) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Input("outcome scaling needs at least two values".into()));
        }
        if !(clamp_delta > 0.0 && clamp_delta < 0.5) {
            return Err(Error::Config(format!("clamp delta {clamp_delta} outside (0, 0.5)")));
        }
        let lower = y.iter().copied().fold(f64::INFINITY, f64::min);
        let upper = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(upper > lower) {
            return Err(Error::ConstantOutcome(lower));
        }
        Ok(Self {
            lower,
            upper,
            clamp_delta,
        })
    }

    #[inline]
    pub fn range(&self) -> f64 {
        self.upper - self.lower
    }

    #[inline]
    pub fn scale(&self, y: f64) -> f64 {
        (y - self.lower) / self.range()
    }

    /// Scaled and clamped to `[delta, 1 - delta]`.
    #[inline]
    pub fn scale_prediction(&self, q: f64) -> f64 {
        self.scale(q).clamp(self.clamp_delta, 1.0 - self.clamp_delta)
    }

    #[inline]
    pub fn unscale(&self, s: f64) -> f64 {
        self.lower + s * self.range()
    }
}

/// Returns the scaling, scaled outcomes, and scaled clamped predictions.
pub fn scale_outcome(y: &[f64], q: &[f64]) -> Result<(OutcomeScaling, Vec<f64>, Vec<f64>)> {
    let s = OutcomeScaling::from_outcome(y, DEFAULT_CLAMP_DELTA)?;
    let ys = y.iter().map(|&v| s.scale(v)).collect();
    let qs = q.iter().map(|&v| s.scale_prediction(v)).collect();
    Ok((s, ys, qs))
}

/// `sigma^2(a, W)` from regressing squared residuals on `{1, W}` per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVarianceFit {
    /// Indexed by arm: `[control, treated]`.
    pub coefficients_by_arm: [Vec<f64>; 2],
    pub sigma2_1: Vec<f64>,
    pub sigma2_0: Vec<f64>,
}

pub fn fit_residual_variance(ds: &Dataset, q: &OutcomeFit) -> Result<ResidualVarianceFit> {
    let design = propensity_design(&ds.w);
    let k = design.cols();
    let q_obs = q.q_observed(&ds.a);
    let r2: Vec<f64> = ds.y.iter().zip(&q_obs).map(|(y, q)| (y - q) * (y - q)).collect();

    let mut coefs: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut preds: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for arm in [0u8, 1u8] {
        let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.a[i] == arm).collect();
        if idx.len() < k {
            return Err(Error::Input(format!(
                "arm {arm} has {} observations; the variance model needs at least {k}",
                idx.len()
            )));
        }
        let x = design.select_rows(&idx);
        let target: Vec<f64> = idx.iter().map(|&i| r2[i]).collect();
        let mut names = vec!["intercept".to_string()];
        names.extend((1..k).map(|j| format!("w{j}")));
        let b = lstsq(&x, &target, &names)?;
        preds[arm as usize] = design.mul_vec(&b).into_iter().map(|v| v.max(SIGMA2_FLOOR)).collect();
        coefs[arm as usize] = b;
    }
    let [p0, p1] = preds;
    Ok(ResidualVarianceFit {
        coefficients_by_arm: coefs,
        sigma2_1: p1,
        sigma2_0: p0,
    })
}

/// Everything the targeting step needs from the initial fits.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFits {
    pub propensity: PropensityFit,
    pub outcome: OutcomeFit,
    pub scaling: OutcomeScaling,
    pub residual_variance: ResidualVarianceFit,
}

impl NuisanceFits {
    pub fn fit(ds: &Dataset, included: &[usize]) -> Result<Self> {
        ds.check_both_arms()?;
        let propensity = fit_propensity(ds)?;
        let outcome = fit_outcome(ds, included)?;
        let scaling = OutcomeScaling::from_outcome(&ds.y, DEFAULT_CLAMP_DELTA)?;
        let residual_variance = fit_residual_variance(ds, &outcome)?;
        Ok(Self {
            propensity,
            outcome,
            scaling,
            residual_variance,
        })
    }

    /// Untargeted G-computation estimate `mean(q1 - q0)`.
    pub fn g_computation(&self) -> f64 {
        let q = &self.outcome;
        q.q1.iter().zip(&q.q0).map(|(a, b)| a - b).sum::<f64>() / q.q1.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, Misspec, Scenario};

    fn design_1d(x: &[f64]) -> Matrix {
        let rows: Vec<[f64; 2]> = x.iter().map(|&v| [1.0, v]).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn intercept_only_balanced() {
        let x = Matrix::from_rows(&[[1.0], [1.0], [1.0], [1.0]]).unwrap();
        let fit = fit_logistic(&x, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.fitted_g1.iter().all(|g| (g - 0.5).abs() < 1e-12));
    }

    /// Grid refinement of the log-likelihood, independent of Newton.
    fn grid_mle(x: &[f64], y: &[f64]) -> (f64, f64) {
        let ll = |a: f64, b: f64| -> f64 {
            x.iter()
                .zip(y)
                .map(|(xi, yi)| {
                    let e = a + b * xi;
                    yi * e - log1pexp(e)
                })
                .sum()
        };
        let (mut ca, mut cb, mut half) = (0.0, 0.0, 8.0);
        for _ in 0..60 {
            let mut best = (f64::NEG_INFINITY, ca, cb);
            for i in -10..=10 {
                for j in -10..=10 {
                    let a = ca + half * f64::from(i) / 10.0;
                    let b = cb + half * f64::from(j) / 10.0;
                    let v = ll(a, b);
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
            ca = best.1;
            cb = best.2;
            half *= 0.5;
        }
        (ca, cb)
    }

    #[test]
    fn six_point_fixture_matches_grid_oracle() {
        // y = {0,0,0,1,1,1} on these x is quasi-separated (no finite MLE);
        // this labelling overlaps.
        let x = [-2.0, -1.0, 0.0, 0.0, 1.0, 2.0];
        let y = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let fit = fit_logistic(&design_1d(&x), &y).unwrap();
        assert!(fit.converged);
        let (a, b) = grid_mle(&x, &y);
        assert!((fit.coefficients[0] - a).abs() < 1e-4, "{:?} vs {a}", fit.coefficients);
        assert!((fit.coefficients[1] - b).abs() < 1e-4, "{:?} vs {b}", fit.coefficients);
    }

    #[test]
    fn separated_data_is_flagged() {
        let x = [-2.0, -1.0, 1.0, 2.0];
        let fit = fit_logistic(&design_1d(&x), &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(!fit.converged);
        assert!(fit.coefficients[1] > 10.0);
        let quasi = fit_logistic(
            &design_1d(&[-2.0, -1.0, 0.0, 0.0, 1.0, 2.0]),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(!quasi.converged);
        assert!(fit.fitted_g1.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn recovers_generating_propensity() {
        let s = Scenario::new(5000, 1.0, Misspec::Moderate, false, 2024).unwrap();
        let ds = gen_dataset(&s).unwrap();
        let fit = fit_propensity(&ds).unwrap();
        assert!(fit.converged);
        // Standard errors from the inverse information at the estimate.
        let x = propensity_design(&ds.w);
        let p = x.cols();
        let mut info = vec![0.0; p * p];
        for i in 0..x.rows() {
            let g = fit.fitted_g1[i];
            for r in 0..p {
                for c in 0..p {
                    info[r * p + c] += g * (1.0 - g) * x.get(i, r) * x.get(i, c);
                }
            }
        }
        let truth = [0.0, 1.5, 2.0, -1.0, -2.5];
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let col = cholesky_solve(&info, &e).unwrap();
            let se = col[j].sqrt();
            assert!(
                (fit.coefficients[j] - truth[j]).abs() < 3.0 * se,
                "coef {j}: {} vs {} (se {se})",
                fit.coefficients[j],
                truth[j]
            );
        }
        // Score at the solution.
        let y: Vec<f64> = ds.a.iter().map(|&a| f64::from(a)).collect();
        let resid: Vec<f64> = y.iter().zip(&fit.fitted_g1).map(|(a, b)| a - b).collect();
        assert!(x.tr_mul_vec(&resid).iter().all(|s| s.abs() < 1e-6));
        // Fitted values reproduce expit(X beta).
        for (eta, g) in x.mul_vec(&fit.coefficients).iter().zip(&fit.fitted_g1) {
            assert!((expit(*eta) - g).abs() < 1e-12);
        }
    }

    #[test]
    fn ols_intercept_only_is_mean() {
        let x = Matrix::from_rows(&[[1.0], [1.0], [1.0]]).unwrap();
        let b = fit_ols(&x, &[1.0, 2.0, 6.0]).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn ols_matches_normal_equations() {
        use rand::Rng;
        let mut rng = crate::rng::StreamKey::new(3, 0).rng();
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|_| [1.0, rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>()])
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 10.0).collect();
        let b = fit_ols(&x, &y).unwrap();
        // Normal equations oracle.
        let mut xtx = vec![0.0; 9];
        for r in &rows {
            for i in 0..3 {
                for j in 0..3 {
                    xtx[i * 3 + j] += r[i] * r[j];
                }
            }
        }
        let oracle = cholesky_solve(&xtx, &x.tr_mul_vec(&y)).unwrap();
        for (u, v) in b.iter().zip(&oracle) {
            assert!((u - v).abs() < 1e-8);
        }
        // Residual orthogonality.
        let fitted = x.mul_vec(&b);
        let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, f)| a - f).collect();
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..3 {
            let c = x.column(j);
            let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(crate::linalg::dot(&c, &resid).abs() < 1e-8 * cn * ynorm);
        }
    }

    #[test]
    fn outcome_working_model_columns() {
        let s = Scenario::new(300, 1.0, Misspec::High, false, 1).unwrap();
        let ds = gen_dataset(&s).unwrap();
        let high = fit_outcome(&ds, &Misspec::High.included_covariates(4)).unwrap();
        assert_eq!(high.included_covariates, vec![1, 2, 3]);
        assert_eq!(high.coefficients.len(), 5);
        let moderate = fit_outcome(&ds, &Misspec::Moderate.included_covariates(4)).unwrap();
        assert_eq!(moderate.included_covariates, vec![0, 1, 2, 3]);
        // Main effects only: q1 - q0 is the treatment coefficient everywhere.
        for (a, b) in moderate.q1.iter().zip(&moderate.q0) {
            assert!((a - b - moderate.coefficients[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_linear_truth_is_recovered() {
        let s = Scenario::new(100, 1.0, Misspec::NearlyCorrect, false, 8).unwrap();
        let mut ds = gen_dataset(&s).unwrap();
        for i in 0..ds.n() {
            let w = ds.w.row(i);
            ds.y[i] = 0.3 + 1.25 * f64::from(ds.a[i]) + w[0] - 2.0 * w[1] + 0.5 * w[3];
        }
        let fit = fit_outcome(&ds, &[0, 1, 2, 3]).unwrap();
        for (a, b) in fit.q1.iter().zip(&fit.q0) {
            assert!((a - b - 1.25).abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_examples() {
        let (s, ys, _) = scale_outcome(&[0.0, 1.0], &[]).unwrap();
        assert_eq!((s.lower, s.upper), (0.0, 1.0));
        assert_eq!(ys, vec![0.0, 1.0]);
        let (s, ys, qs) = scale_outcome(&[2.0, 4.0, 6.0], &[5.996, 2.0]).unwrap();
        assert_eq!(ys, vec![0.0, 0.5, 1.0]);
        assert!((qs[0] - 0.995).abs() < 1e-15);
        assert!((qs[1] - 0.005).abs() < 1e-15);
        assert_eq!(s.unscale(s.scale(3.3)), 3.3);
        assert!(matches!(
            scale_outcome(&[1.0, 1.0], &[]),
            Err(Error::ConstantOutcome(_))
        ));
    }

    #[test]
    fn residual_variance_floor_and_saturation() {
        let s = Scenario::new(60, 1.0, Misspec::Moderate, false, 4).unwrap();
        let mut ds = gen_dataset(&s).unwrap();
        // Zero residuals everywhere.
        let q = fit_outcome(&ds, &[0, 1, 2, 3]).unwrap();
        ds.y = q.q_observed(&ds.a);
        let q = fit_outcome(&ds, &[0, 1, 2, 3]).unwrap();
        let rv = fit_residual_variance(&ds, &q).unwrap();
        assert!(rv.sigma2_1.iter().chain(&rv.sigma2_0).all(|&v| v == SIGMA2_FLOOR));
    }

    #[test]
    fn residual_variance_saturated_arm_interpolates() {
        // Five treated rows: {1, W} has five columns, so the fit is exact.
        let w_rows = [
            [0.1, 0.2, -0.3, 0.4],
            [-0.5, 0.1, 0.9, -0.2],
            [0.7, -0.6, 0.2, 0.3],
            [0.0, 0.8, -0.1, -0.9],
            [-0.4, -0.3, 0.5, 0.6],
            [0.2, 0.3, 0.4, 0.5],
            [-0.2, 0.6, -0.4, 0.1],
            [0.9, -0.9, 0.0, 0.2],
            [-0.7, 0.4, 0.3, -0.5],
            [0.3, -0.1, -0.8, 0.7],
            [0.6, 0.5, 0.1, -0.3],
        ];
        let a = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let y = vec![1.0, 3.0, -2.0, 0.5, 2.2, 0.1, 0.3, -0.4, 0.8, 1.1, -0.6];
        let ds = Dataset::new(Matrix::from_rows(&w_rows).unwrap(), a, y).unwrap();
        let q = fit_outcome(&ds, &[0, 1, 2, 3]).unwrap();
        let rv = fit_residual_variance(&ds, &q).unwrap();
        let q_obs = q.q_observed(&ds.a);
        for ((y, q), s2) in ds.y.iter().zip(&q_obs).zip(&rv.sigma2_1).take(5) {
            let r2 = (y - q).powi(2);
            assert!((s2 - r2.max(SIGMA2_FLOOR)).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_variance_recovers_noise_level() {
        let s = Scenario::new(20000, 1.0, Misspec::NearlyCorrect, true, 11).unwrap();
        let mut ds = gen_dataset(&s).unwrap();
        // Linear truth plus N(0, 0.25) noise so the working model is correct.
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::rng::StreamKey::new(12, 0).rng();
        for i in 0..ds.n() {
            let w = ds.w.row(i);
            let z: f64 = rng.sample(StandardNormal);
            ds.y[i] = 1.0 + 2.0 * f64::from(ds.a[i]) + w[0] + w[1] + w[2] + w[3] + 0.5 * z;
        }
        let q = fit_outcome(&ds, &[0, 1, 2, 3]).unwrap();
        let rv = fit_residual_variance(&ds, &q).unwrap();
        // Var of a squared N(0, v) residual is 2 v^2; per-arm mean of the
        // fitted surface has standard error about sqrt(2 v^2 / n_arm).
        let v: f64 = 0.25;
        let se = (2.0 * v * v / (ds.n() as f64 / 2.0)).sqrt();
        for s2 in [&rv.sigma2_1, &rv.sigma2_0] {
            let mean = s2.iter().sum::<f64>() / s2.len() as f64;
            assert!((mean - v).abs() < 3.0 * se, "mean {mean}");
        }
    }
}
