//! Variance estimators for the targeted ATE and the resulting intervals.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nuisance::ResidualVarianceFit;
use crate::rng::StreamKey;
use crate::targeting::{FluctuationResult, Link, Strategy, TargetingInputs};
use crate::truncation::{TruncatedPropensity, TruncationSpec};

pub const Z_95: f64 = 1.96;
pub const DEFAULT_BOOT_REPS: usize = 500;
/// Minimum retained draws for a percentile interval.
pub const MIN_PERCENTILE_DRAWS: usize = 40;
/// Fraction of dropped bootstrap draws above which the estimate is flagged.
pub const MAX_DROP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarianceMethod {
    EIF,
    PlugIn,
    TB,
    /// Monte Carlo variance across replications; simulation only.
    MC,
}

impl VarianceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            VarianceMethod::EIF => "eif",
            VarianceMethod::PlugIn => "plugin",
            VarianceMethod::TB => "tb",
            VarianceMethod::MC => "mc",
        }
    }
}

impl fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eif" => Ok(VarianceMethod::EIF),
            "plugin" | "plug-in" => Ok(VarianceMethod::PlugIn),
            "tb" => Ok(VarianceMethod::TB),
            "mc" => Ok(VarianceMethod::MC),
            other => Err(Error::Config(format!(
                "unknown variance method '{other}' (expected eif, plugin or tb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub method: VarianceMethod,
    pub value: f64,
    /// Requested bootstrap replicates (TB only).
    pub b_reps: Option<usize>,
    /// Empirical 2.5% and 97.5% quantiles of the bootstrap estimates (TB only).
    pub quantiles: Option<(f64, f64)>,
    /// Bootstrap draws dropped for an empty arm or a failed fluctuation.
    pub dropped: usize,
    /// More than 10% of the bootstrap draws were dropped.
    pub flagged: bool,
}

impl VarianceEstimate {
    pub fn simple(method: VarianceMethod, value: f64) -> Self {
        Self {
            method,
            value,
            b_reps: None,
            quantiles: None,
            dropped: 0,
            flagged: false,
        }
    }

    pub fn se(&self) -> f64 {
        self.value.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// `(1/n^2) sum D*_i^2`.
pub fn var_eif(eif: &[f64]) -> VarianceEstimate {
    let n = eif.len() as f64;
    let value = eif.iter().map(|d| d * d).sum::<f64>() / (n * n);
    VarianceEstimate::simple(VarianceMethod::EIF, value)
}

/// Conditional-variance decomposition of `Var(D)`, divided by `n`:
///
/// `(1/n) [ mean(s1/g1 + s0/g0) + mean((q1 - q0 - psi)^2) ]`.
///
/// `q1`/`q0` are the regression predictions entering the heterogeneity term
/// (targeted predictions by default).
pub fn var_plugin(
    q1: &[f64],
    q0: &[f64],
    rv: &ResidualVarianceFit,
    g: &TruncatedPropensity,
    psi_hat: f64,
) -> VarianceEstimate {
    let n = q1.len();
    let nf = n as f64;
    let mut residual = 0.0;
    let mut regression = 0.0;
    for i in 0..n {
        residual += rv.sigma2_1[i] / g.g1[i] + rv.sigma2_0[i] / g.g0[i];
        let d = q1[i] - q0[i] - psi_hat;
        regression += d * d;
    }
    VarianceEstimate::simple(VarianceMethod::PlugIn, (residual / nf + regression / nf) / nf)
}

/// Source of bootstrap row indices. Draw `b` must depend only on `b`.
pub trait Resampler {
    fn resample(&self, n: usize, draw: u64) -> Vec<usize>;
}

/// Draw `b` uses stream `b` of the key's family, so extending `B` keeps the
/// earlier draws unchanged.
#[derive(Debug, Clone, Copy)]
pub struct KeyedResampler {
    pub key: StreamKey,
}

impl Resampler for KeyedResampler {
    fn resample(&self, n: usize, draw: u64) -> Vec<usize> {
        let mut rng = self.key.with_index(draw).rng();
        (0..n).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Returns the original sample every time.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityResampler;

impl Resampler for IdentityResampler {
    fn resample(&self, n: usize, _draw: u64) -> Vec<usize> {
        (0..n).collect()
    }
}

/// Bootstrap estimates at one truncation level.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub psis: Vec<f64>,
    pub dropped: usize,
    pub b_reps: usize,
}

impl BootstrapDraws {
    pub fn estimate(&self) -> Result<VarianceEstimate> {
        let k = self.psis.len();
        if k < 2 {
            return Err(Error::TooFewDraws {
                retained: k,
                required: 2,
            });
        }
        let mean = self.psis.iter().sum::<f64>() / k as f64;
        let value = self.psis.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
        let mut sorted = self.psis.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(VarianceEstimate {
            method: VarianceMethod::TB,
            value,
            b_reps: Some(self.b_reps),
            quantiles: Some((quantile_type7(&sorted, 0.025), quantile_type7(&sorted, 0.975))),
            dropped: self.dropped,
            flagged: self.dropped as f64 > MAX_DROP_FRACTION * self.b_reps as f64,
        })
    }
}

/// Targeted bootstrap at several truncation levels sharing the same
/// resamples. Initial fits stay fixed; only `(eps1, eps0)` is refit, warm
/// started from `starts[k]`.
pub fn bootstrap_path<R: Resampler + ?Sized>(
    inputs: &TargetingInputs,
    levels: &[TruncatedPropensity],
    starts: &[FluctuationResult],
    strategy: Strategy,
    link: Link,
    b_reps: usize,
    resampler: &R,
) -> Result<Vec<BootstrapDraws>> {
    if b_reps < 2 {
        return Err(Error::Config(format!("bootstrap needs B >= 2, got {b_reps}")));
    }
    if starts.len() != levels.len() {
        return Err(Error::Input("one warm start per truncation level is required".into()));
    }
    let n = inputs.n();
    let mut out: Vec<BootstrapDraws> = levels
        .iter()
        .map(|_| BootstrapDraws {
            psis: Vec::with_capacity(b_reps),
            dropped: 0,
            b_reps,
        })
        .collect();
    let mut counts = vec![0u32; n];
    for b in 0..b_reps {
        counts.iter_mut().for_each(|c| *c = 0);
        for i in resampler.resample(n, b as u64) {
            counts[i] += 1;
        }
        let treated: u32 = (0..n).filter(|&i| inputs.a[i] == 1).map(|i| counts[i]).sum();
        if treated == 0 || treated as usize == n {
            out.iter_mut().for_each(|o| o.dropped += 1);
            continue;
        }
        for (k, g) in levels.iter().enumerate() {
            let start = (starts[k].eps1, starts[k].eps0);
            match inputs.fluctuate(g, strategy, link, Some(&counts), start) {
                Ok(fl) if fl.converged => out[k].psis.push(inputs.weighted_psi(&fl, g, &counts)),
                _ => out[k].dropped += 1,
            }
        }
    }
    Ok(out)
}

/// Targeted bootstrap variance at one truncation level.
pub fn var_targeted_bootstrap<R: Resampler + ?Sized>(
    inputs: &TargetingInputs,
    spec: &TruncationSpec,
    strategy: Strategy,
    link: Link,
    b_reps: usize,
    resampler: &R,
) -> Result<VarianceEstimate> {
    let g = inputs.truncate(spec);
    let start = inputs.fluctuate(&g, strategy, link, None, (0.0, 0.0))?;
    let draws = bootstrap_path(inputs, &[g], &[start], strategy, link, b_reps, resampler)?;
    draws[0].estimate()
}

/// `psi +- 1.96 sqrt(v)`.
pub fn wald_ci(psi_hat: f64, v: &VarianceEstimate) -> ConfidenceInterval {
    wald_ci_value(psi_hat, v.value)
}

pub fn wald_ci_value(psi_hat: f64, variance: f64) -> ConfidenceInterval {
    let half = Z_95 * variance.max(0.0).sqrt();
    ConfidenceInterval {
        lower: psi_hat - half,
        upper: psi_hat + half,
        level: 0.95,
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical 2.5% / 97.5% interval from bootstrap estimates.
pub fn percentile_ci(boot_psis: &[f64]) -> Result<ConfidenceInterval> {
    if boot_psis.len() < MIN_PERCENTILE_DRAWS {
        return Err(Error::TooFewDraws {
            retained: boot_psis.len(),
            required: MIN_PERCENTILE_DRAWS,
        });
    }
    let mut sorted = boot_psis.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ConfidenceInterval {
        lower: quantile_type7(&sorted, 0.025),
        upper: quantile_type7(&sorted, 0.975),
        level: 0.95,
    })
}
