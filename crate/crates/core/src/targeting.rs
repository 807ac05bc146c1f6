//! TMLE fluctuation of the initial outcome regression.
//!
//! Two targeting strategies are supported, each with a logit or a linear
//! fluctuation:
//!
//! * **gH** (clever-covariate scaled): unweighted loss, arm covariates
//!   `H1 = A/g1` and `H0 = (1-A)/g0`. The counterfactual update is
//!   `eps_a / g_a(W)`, so strata with large inverse weights receive larger
//!   corrections.
//! * **gWt** (loss weighted): inverse weights `A/g1`, `(1-A)/g0` enter the
//!   loss and each arm gets an intercept-only update `eps_a`.
//!
//! Because `H1 * H0 = 0` pointwise, the two-parameter fit splits into two
//! independent one-dimensional problems, one per arm. All fits accept
//! optional integer frequency weights so that bootstrap resamples can be
//! evaluated on the original rows.

use std::fmt;
use std::str::FromStr;

use crate::datagen::{expit, logit, Dataset};
use crate::error::{Error, Result};
use crate::nuisance::{NuisanceFits, OutcomeScaling};
use crate::truncation::{apply_truncation, TruncatedPropensity, TruncationSpec};

pub const FLUCTUATION_MAX_ITER: usize = 100;
/// Absolute tolerance on each arm's score at the returned `eps`.
pub const FLUCTUATION_SCORE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Clever-covariate-scaled targeting.
    GH,
    /// Loss-weighted targeting.
    GWT,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::GH => "gH",
            Strategy::GWT => "gWt",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gh" => Ok(Strategy::GH),
            "gwt" => Ok(Strategy::GWT),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected gH or gWt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Link {
    Logit,
    Linear,
}

impl Link {
    pub fn as_str(&self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Linear => "linear",
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" | "logistic" => Ok(Link::Logit),
            "linear" => Ok(Link::Linear),
            other => Err(Error::Config(format!(
                "unknown link '{other}' (expected logit or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluctuationResult {
    pub eps1: f64,
    pub eps0: f64,
    pub link: Link,
    pub strategy: Strategy,
    pub converged: bool,
}

impl FluctuationResult {
    #[inline]
    pub fn eps(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.eps1
        } else {
            self.eps0
        }
    }
}

/// Result of a single targeted fit at one truncation level.
#[derive(Debug, Clone, PartialEq)]
pub struct TmleFit {
    /// Targeted predictions on the original outcome scale.
    pub q1_star: Vec<f64>,
    pub q0_star: Vec<f64>,
    pub psi_hat: f64,
    /// Centered efficient influence function values, computed with the
    /// truncated propensities used for targeting.
    pub eif: Vec<f64>,
    pub fluct: FluctuationResult,
    pub trunc: TruncationSpec,
    pub activated_1: usize,
    pub activated_0: usize,
}

/// One arm's one-dimensional fluctuation problem.
///
/// Logit: maximize `sum w_i [y_i log p_i + (1-y_i) log(1-p_i)]` with
/// `p_i = expit(o_i + eps h_i)`. Its score `sum w_i h_i (y_i - p_i)` is
/// strictly decreasing in `eps`.
struct ArmProblem {
    weight: Vec<f64>,
    h: Vec<f64>,
    offset: Vec<f64>,
    y: Vec<f64>,
}

impl ArmProblem {
    fn with_capacity(n: usize) -> Self {
        Self {
            weight: Vec::with_capacity(n),
            h: Vec::with_capacity(n),
            offset: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, weight: f64, h: f64, offset: f64, y: f64) {
        self.weight.push(weight);
        self.h.push(h);
        self.offset.push(offset);
        self.y.push(y);
    }

    fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Score and its derivative at `eps`.
    fn logit_score(&self, eps: f64) -> (f64, f64) {
        let mut s = 0.0;
        let mut d = 0.0;
        for i in 0..self.y.len() {
            let (w, h) = (self.weight[i], self.h[i]);
            let p = expit(self.offset[i] + eps * h);
            s += w * h * (self.y[i] - p);
            d -= w * h * h * p * (1.0 - p);
        }
        (s, d)
    }

    /// Safeguarded Newton on the monotone score: Newton steps are accepted
    /// while they stay inside the current sign bracket, otherwise the
    /// bracket is bisected or expanded.
    fn solve_logit(&self, start: f64) -> (f64, bool) {
        let mut eps = if start.is_finite() { start } else { 0.0 };
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut s, mut d) = self.logit_score(eps);
        for _ in 0..FLUCTUATION_MAX_ITER {
            if s == 0.0 {
                break;
            }
            if s > 0.0 {
                lo = eps;
            } else {
                hi = eps;
            }
            let newton = eps - s / d;
            let next = if d < 0.0 && newton.is_finite() && newton > lo && newton < hi {
                newton
            } else if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                // Expand in the direction of the root.
                let step = 2.0 * (1.0 + eps.abs());
                if s > 0.0 {
                    eps + step
                } else {
                    eps - step
                }
            };
            if (next - eps).abs() <= 4.0 * f64::EPSILON * (1.0 + eps.abs()) {
                eps = next;
                (s, _) = self.logit_score(eps);
                break;
            }
            eps = next;
            (s, d) = self.logit_score(eps);
        }
        (eps, s.abs() <= FLUCTUATION_SCORE_TOL)
    }

    /// Linear fluctuation: weighted least squares of `y - o` on `h`.
    fn solve_linear(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.y.len() {
            let (w, h) = (self.weight[i], self.h[i]);
            num += w * h * (self.y[i] - self.offset[i]);
            den += w * h * h;
        }
        num / den
    }
}

/// Builds the per-arm problem. `offset_obs` and `y` are on the fitting scale
/// (logit of scaled prediction and scaled outcome, or the original scale for
/// the linear link).
fn arm_problem(
    arm: u8,
    strategy: Strategy,
    a: &[u8],
    y: &[f64],
    offset_obs: &[f64],
    g: &TruncatedPropensity,
    freq: Option<&[u32]>,
) -> Result<ArmProblem> {
    let ga = g.arm(arm);
    let mut prob = ArmProblem::with_capacity(a.len());
    for i in 0..a.len() {
        if a[i] != arm {
            continue;
        }
        let f = freq.map_or(1.0, |f| f64::from(f[i]));
        if f == 0.0 {
            continue;
        }
        let inv = 1.0 / ga[i];
        match strategy {
            Strategy::GH => prob.push(f, inv, offset_obs[i], y[i]),
            Strategy::GWT => prob.push(f * inv, 1.0, offset_obs[i], y[i]),
        }
    }
    if prob.y.is_empty() || !(prob.total_weight() > 0.0) {
        return Err(Error::EmptyArm { arm });
    }
    Ok(prob)
}

#[allow(clippy::too_many_arguments)]
fn fluctuate(
    strategy: Strategy,
    link: Link,
    a: &[u8],
    y: &[f64],
    offset_obs: &[f64],
    g: &TruncatedPropensity,
    freq: Option<&[u32]>,
    start: (f64, f64),
) -> Result<FluctuationResult> {
    let n = a.len();
    if y.len() != n || offset_obs.len() != n || g.len() != n || freq.is_some_and(|f| f.len() != n) {
        return Err(Error::Input("fluctuation inputs have inconsistent lengths".into()));
    }
    let p1 = arm_problem(1, strategy, a, y, offset_obs, g, freq)?;
    let p0 = arm_problem(0, strategy, a, y, offset_obs, g, freq)?;
    let (eps1, eps0, converged) = match link {
        Link::Logit => {
            let (e1, c1) = p1.solve_logit(start.0);
            let (e0, c0) = p0.solve_logit(start.1);
            (e1, e0, c1 && c0)
        }
        Link::Linear => {
            let (e1, e0) = (p1.solve_linear(), p0.solve_linear());
            (e1, e0, e1.is_finite() && e0.is_finite())
        }
    };
    Ok(FluctuationResult {
        eps1,
        eps0,
        link,
        strategy,
        converged,
    })
}

fn logit_offsets(q_scaled: &[f64]) -> Vec<f64> {
    q_scaled.iter().map(|&q| logit(q)).collect()
}

/// gH logit fluctuation. `q_scaled` holds the scaled, clamped initial
/// prediction at each row's observed treatment.
pub fn fluctuate_gh_logit(
    q_scaled: &[f64],
    y_scaled: &[f64],
    a: &[u8],
    g: &TruncatedPropensity,
) -> Result<FluctuationResult> {
    fluctuate(
        Strategy::GH,
        Link::Logit,
        a,
        y_scaled,
        &logit_offsets(q_scaled),
        g,
        None,
        (0.0, 0.0),
    )
}

/// gWt logit fluctuation.
pub fn fluctuate_gwt_logit(
    q_scaled: &[f64],
    y_scaled: &[f64],
    a: &[u8],
    g: &TruncatedPropensity,
) -> Result<FluctuationResult> {
    fluctuate(
        Strategy::GWT,
        Link::Logit,
        a,
        y_scaled,
        &logit_offsets(q_scaled),
        g,
        None,
        (0.0, 0.0),
    )
}

/// gH linear fluctuation on the original scale: `eps_a = sum H (Y - Q) / sum H^2`.
pub fn fluctuate_gh_linear(q: &[f64], y: &[f64], a: &[u8], g: &TruncatedPropensity) -> Result<FluctuationResult> {
    fluctuate(Strategy::GH, Link::Linear, a, y, q, g, None, (0.0, 0.0))
}

/// gWt linear fluctuation: weighted mean residual per arm.
pub fn fluctuate_gwt_linear(q: &[f64], y: &[f64], a: &[u8], g: &TruncatedPropensity) -> Result<FluctuationResult> {
    fluctuate(Strategy::GWT, Link::Linear, a, y, q, g, None, (0.0, 0.0))
}

/// Additive update on the fitting scale for row `i` of arm `arm`.
#[inline]
fn update(fluct: &FluctuationResult, arm: u8, g_arm_i: f64) -> f64 {
    match fluct.strategy {
        Strategy::GH => fluct.eps(arm) * (1.0 / g_arm_i),
        Strategy::GWT => fluct.eps(arm),
    }
}

/// Targeted predictions for every row under treatment `arm`.
///
/// `q_at_arm` is the initial regression evaluated at `A = arm`, on the
/// original scale. The logit link needs the outcome scaling.
pub fn predict_counterfactual(
    fluct: &FluctuationResult,
    q_at_arm: &[f64],
    g: &TruncatedPropensity,
    arm: u8,
    scaling: Option<&OutcomeScaling>,
) -> Result<Vec<f64>> {
    let ga = g.arm(arm);
    if ga.len() != q_at_arm.len() {
        return Err(Error::Input("prediction inputs have inconsistent lengths".into()));
    }
    match fluct.link {
        Link::Logit => {
            let s = scaling.ok_or_else(|| Error::Input("logit-link predictions require an outcome scaling".into()))?;
            Ok(q_at_arm
                .iter()
                .zip(ga)
                .map(|(&q, &gi)| s.unscale(expit(logit(s.scale_prediction(q)) + update(fluct, arm, gi))))
                .collect())
        }
        Link::Linear => Ok(q_at_arm
            .iter()
            .zip(ga)
            .map(|(&q, &gi)| q + update(fluct, arm, gi))
            .collect()),
    }
}

/// `D*(O_i)` including the `-psi` centering.
pub fn efficient_influence(
    a: &[u8],
    y: &[f64],
    g: &TruncatedPropensity,
    q1_star: &[f64],
    q0_star: &[f64],
    psi: f64,
) -> Vec<f64> {
    (0..a.len())
        .map(|i| {
            let resid = if a[i] == 1 {
                (y[i] - q1_star[i]) / g.g1[i]
            } else {
                -(y[i] - q0_star[i]) / g.g0[i]
            };
            resid + q1_star[i] - q0_star[i] - psi
        })
        .collect()
}

/// Per-replication quantities shared by every fit along a truncation path
/// and by every bootstrap draw: the data, the fixed initial fits, and the
/// logit offsets.
#[derive(Debug, Clone)]
pub struct TargetingInputs {
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub g1_hat: Vec<f64>,
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
    pub scaling: OutcomeScaling,
    y_scaled: Vec<f64>,
    q_obs: Vec<f64>,
    /// `logit` of the scaled, clamped prediction at the observed arm.
    offset_obs: Vec<f64>,
    /// Same under each counterfactual arm.
    offset1: Vec<f64>,
    offset0: Vec<f64>,
}

impl TargetingInputs {
    pub fn new(ds: &Dataset, nuis: &NuisanceFits) -> Result<Self> {
        Self::from_parts(
            ds.a.clone(),
            ds.y.clone(),
            nuis.propensity.fitted_g1.clone(),
            nuis.outcome.q1.clone(),
            nuis.outcome.q0.clone(),
            nuis.scaling,
        )
    }

    pub fn from_parts(
        a: Vec<u8>,
        y: Vec<f64>,
        g1_hat: Vec<f64>,
        q1: Vec<f64>,
        q0: Vec<f64>,
        scaling: OutcomeScaling,
    ) -> Result<Self> {
        let n = a.len();
        if [y.len(), g1_hat.len(), q1.len(), q0.len()].iter().any(|&l| l != n) {
            return Err(Error::Input("targeting inputs have inconsistent lengths".into()));
        }
        let y_scaled = y.iter().map(|&v| scaling.scale(v)).collect();
        let q_obs: Vec<f64> = (0..n).map(|i| if a[i] == 1 { q1[i] } else { q0[i] }).collect();
        let to_offset = |q: &[f64]| -> Vec<f64> { q.iter().map(|&v| logit(scaling.scale_prediction(v))).collect() };
        let offset_obs = to_offset(&q_obs);
        let offset1 = to_offset(&q1);
        let offset0 = to_offset(&q0);
        Ok(Self {
            a,
            y,
            g1_hat,
            q1,
            q0,
            scaling,
            y_scaled,
            q_obs,
            offset_obs,
            offset1,
            offset0,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn truncate(&self, spec: &TruncationSpec) -> TruncatedPropensity {
        apply_truncation(&self.g1_hat, spec)
    }

    /// Fits `(eps1, eps0)`, optionally with frequency weights and a warm start.
    pub fn fluctuate(
        &self,
        g: &TruncatedPropensity,
        strategy: Strategy,
        link: Link,
        freq: Option<&[u32]>,
        start: (f64, f64),
    ) -> Result<FluctuationResult> {
        match link {
            Link::Logit => fluctuate(
                strategy,
                link,
                &self.a,
                &self.y_scaled,
                &self.offset_obs,
                g,
                freq,
                start,
            ),
            Link::Linear => fluctuate(strategy, link, &self.a, &self.y, &self.q_obs, g, freq, start),
        }
    }

    pub fn predict(&self, fluct: &FluctuationResult, g: &TruncatedPropensity) -> Result<(Vec<f64>, Vec<f64>)> {
        let q1 = predict_counterfactual(fluct, &self.q1, g, 1, Some(&self.scaling))?;
        let q0 = predict_counterfactual(fluct, &self.q0, g, 0, Some(&self.scaling))?;
        Ok((q1, q0))
    }

    /// `sum_i f_i (Q1* - Q0*) / sum_i f_i`, without materializing predictions.
    #[allow(clippy::needless_range_loop)]
    pub fn weighted_psi(&self, fluct: &FluctuationResult, g: &TruncatedPropensity, freq: &[u32]) -> f64 {
        let s = &self.scaling;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.n() {
            if freq[i] == 0 {
                continue;
            }
            let f = f64::from(freq[i]);
            let (u1, u0) = (update(fluct, 1, g.g1[i]), update(fluct, 0, g.g0[i]));
            let diff = match fluct.link {
                Link::Logit => {
                    let p1 = expit(self.offset1[i] + u1);
                    let p0 = expit(self.offset0[i] + u0);
                    s.range() * (p1 - p0)
                }
                Link::Linear => self.q1[i] + u1 - self.q0[i] - u0,
            };
            num += f * diff;
            den += f;
        }
        num / den
    }

    /// Full targeted fit at one truncation level.
    pub fn fit(&self, spec: &TruncationSpec, strategy: Strategy, link: Link) -> Result<TmleFit> {
        let g = self.truncate(spec);
        self.fit_truncated(&g, spec, strategy, link)
    }

    pub fn fit_truncated(
        &self,
        g: &TruncatedPropensity,
        spec: &TruncationSpec,
        strategy: Strategy,
        link: Link,
    ) -> Result<TmleFit> {
        let fluct = self.fluctuate(g, strategy, link, None, (0.0, 0.0))?;
        let (q1_star, q0_star) = self.predict(&fluct, g)?;
        let n = self.n() as f64;
        let psi_hat = q1_star.iter().zip(&q0_star).map(|(a, b)| a - b).sum::<f64>() / n;
        let eif = efficient_influence(&self.a, &self.y, g, &q1_star, &q0_star, psi_hat);
        Ok(TmleFit {
            q1_star,
            q0_star,
            psi_hat,
            eif,
            fluct,
            trunc: *spec,
            activated_1: g.activated_1,
            activated_0: g.activated_0,
        })
    }
}

/// Truncation, fluctuation, counterfactual prediction and plug-in ATE.
pub fn tmle_fit(
    ds: &Dataset,
    nuis: &NuisanceFits,
    spec: &TruncationSpec,
    strategy: Strategy,
    link: Link,
) -> Result<TmleFit> {
    ds.check_both_arms()?;
    TargetingInputs::new(ds, nuis)?.fit(spec, strategy, link)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_g(n: usize, g1: f64) -> TruncatedPropensity {
        TruncatedPropensity {
            g1: vec![g1; n],
            g0: vec![1.0 - g1; n],
            activated_1: 0,
            activated_0: 0,
        }
    }

    #[test]
    fn gh_logit_identity_when_scores_vanish() {
        // One treated and one control row with q equal to y.
        let a = [1, 0];
        let q = [0.3, 0.6];
        let fl = fluctuate_gh_logit(&q, &q, &a, &const_g(2, 0.4)).unwrap();
        assert!(fl.eps1.abs() < 1e-12 && fl.eps0.abs() < 1e-12);
        assert!(fl.converged);
    }

    #[test]
    fn gwt_logit_identity_when_weighted_residuals_vanish() {
        let a = [1, 1, 0, 0];
        let q = [0.5, 0.5, 0.4, 0.4];
        let y = [0.3, 0.7, 0.2, 0.6];
        let fl = fluctuate_gwt_logit(&q, &y, &a, &const_g(4, 0.5)).unwrap();
        assert!(fl.eps1.abs() < 1e-12 && fl.eps0.abs() < 1e-12);
    }

    #[test]
    fn linear_examples() {
        // Single treated observation, H1 = 2, residual 1.
        let g = TruncatedPropensity {
            g1: vec![0.5, 0.5],
            g0: vec![0.5, 0.5],
            activated_1: 0,
            activated_0: 0,
        };
        let fl = fluctuate_gh_linear(&[0.0, 0.0], &[1.0, 0.0], &[1, 0], &g).unwrap();
        assert!((fl.eps1 - 0.5).abs() < 1e-15);
        assert_eq!(fl.eps0, 0.0);

        // Two treated with weights {1, 3} and residuals {0, 4}.
        let g = TruncatedPropensity {
            g1: vec![1.0, 1.0 / 3.0, 0.5],
            g0: vec![0.5, 0.5, 0.5],
            activated_1: 0,
            activated_0: 0,
        };
        let fl = fluctuate_gwt_linear(&[0.0, 0.0, 0.0], &[0.0, 4.0, 0.0], &[1, 1, 0], &g).unwrap();
        assert!((fl.eps1 - 3.0).abs() < 1e-14);

        let fl = fluctuate_gwt_linear(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1, 1, 0], &g).unwrap();
        assert_eq!((fl.eps1, fl.eps0), (0.0, 0.0));
    }

    #[test]
    fn empty_arm_is_an_error() {
        let g = const_g(2, 0.5);
        assert!(matches!(
            fluctuate_gh_linear(&[0.0, 0.0], &[1.0, 2.0], &[1, 1], &g),
            Err(Error::EmptyArm { arm: 0 })
        ));
    }

    #[test]
    fn prediction_examples() {
        let s = OutcomeScaling {
            lower: 0.0,
            upper: 1.0,
            clamp_delta: 0.005,
        };
        let g = TruncatedPropensity {
            g1: vec![0.02],
            g0: vec![0.98],
            activated_1: 0,
            activated_0: 0,
        };
        let mut fl = FluctuationResult {
            eps1: 0.1,
            eps0: 0.0,
            link: Link::Logit,
            strategy: Strategy::GWT,
            converged: true,
        };
        let p = predict_counterfactual(&fl, &[0.5], &g, 1, Some(&s)).unwrap();
        assert!((p[0] - 0.524_979_187_478_939_8).abs() < 1e-12);
        fl.strategy = Strategy::GH;
        let p = predict_counterfactual(&fl, &[0.5], &g, 1, Some(&s)).unwrap();
        assert!((p[0] - 0.993_307_149_075_715).abs() < 1e-12);
        fl.eps1 = 0.0;
        let p = predict_counterfactual(&fl, &[0.25], &g, 1, Some(&s)).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!(predict_counterfactual(&fl, &[0.25], &g, 1, None).is_err());
    }
}
