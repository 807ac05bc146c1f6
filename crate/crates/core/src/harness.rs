//! Monte Carlo study runner.
//!
//! A study is a list of scenarios, each replicated `reps` times. Every
//! replication draws one dataset from its own keyed stream, fits the
//! nuisances once and evaluates all methods on those shared fits. Records are
//! folded into per-(scenario, method) metrics and a cross-scenario summary.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::adaptive::{build_envelope, select_truncation, SelectionResult, StopReason, TruncationPath, VarianceSource};
use crate::datagen::{fmt_f64, gen_dataset_with, true_ate, Misspec, Scenario};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFits;
use crate::rng::StreamKey;
use crate::targeting::{Link, Strategy, TargetingInputs};
use crate::truncation::{TruncatedPropensity, TruncationSpec};
use crate::variance::{
    bootstrap_path, var_eif, var_plugin, wald_ci_value, ConfidenceInterval, KeyedResampler, VarianceMethod,
};

pub const DEFAULT_GRID: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const DEFAULT_REPS: usize = 500;
pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_SAMPLE_SIZES: [usize; 3] = [500, 1000, 2000];
pub const DEFAULT_KAPPAS: [f64; 3] = [1.0, 2.0, 3.0];

/// Marker written for missing values in every CSV.
pub const MISSING: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Untargeted G-computation `mean(q1 - q0)`.
    Init,
    Tmle {
        strategy: Strategy,
        link: Link,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationLevel {
    Fixed(f64),
    Adaptive(VarianceSource),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub estimator: Estimator,
    /// `None` for `Init`.
    pub truncation: Option<TruncationLevel>,
    /// Variances computed per record, from `{EIF, PlugIn, TB}`.
    pub variance_methods: Vec<VarianceMethod>,
}

impl MethodSpec {
    pub fn init() -> Self {
        Self {
            estimator: Estimator::Init,
            truncation: None,
            variance_methods: Vec::new(),
        }
    }

    pub fn fixed(strategy: Strategy, link: Link, c: f64, variance_methods: &[VarianceMethod]) -> Self {
        Self {
            estimator: Estimator::Tmle { strategy, link },
            truncation: Some(TruncationLevel::Fixed(c)),
            variance_methods: variance_methods.to_vec(),
        }
    }

    pub fn adaptive(
        strategy: Strategy,
        link: Link,
        source: VarianceSource,
        variance_methods: &[VarianceMethod],
    ) -> Self {
        Self {
            estimator: Estimator::Tmle { strategy, link },
            truncation: Some(TruncationLevel::Adaptive(source)),
            variance_methods: variance_methods.to_vec(),
        }
    }

    /// e.g. `init`, `gH_logit_c6`, `gWt_linear_TBb`.
    pub fn id(&self) -> String {
        match (self.estimator, self.truncation) {
            (Estimator::Init, _) => "init".to_string(),
            (Estimator::Tmle { strategy, link }, Some(TruncationLevel::Fixed(c))) => {
                format!("{strategy}_{link}_c{c}")
            }
            (Estimator::Tmle { strategy, link }, Some(TruncationLevel::Adaptive(s))) => {
                format!("{strategy}_{link}_{s}")
            }
            (Estimator::Tmle { strategy, link }, None) => format!("{strategy}_{link}"),
        }
    }

    fn group(&self) -> Option<(Strategy, Link)> {
        match self.estimator {
            Estimator::Init => None,
            Estimator::Tmle { strategy, link } => Some((strategy, link)),
        }
    }

    fn wants(&self, m: VarianceMethod) -> bool {
        self.variance_methods.contains(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variance_methods.contains(&VarianceMethod::MC) {
            return Err(Error::Config(format!(
                "method {}: the Monte Carlo variance is a study-level quantity, not a per-record estimator",
                self.id()
            )));
        }
        match (self.estimator, self.truncation) {
            (Estimator::Tmle { .. }, None) => {
                Err(Error::Config(format!("method {} needs a truncation level", self.id())))
            }
            (_, Some(TruncationLevel::Fixed(c))) if !(c > 0.0) || !c.is_finite() => Err(Error::Config(format!(
                "method {}: truncation constant must be positive",
                self.id()
            ))),
            _ => Ok(()),
        }
    }
}

/// Which variance builds the intervals compared by the Lepski rule. The
/// envelope always uses the selector's own source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LepskiCi {
    #[default]
    Source,
    Eif,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub reps: usize,
    pub methods: Vec<MethodSpec>,
    /// Ascending grid walked by the adaptive selectors.
    pub grid: Vec<f64>,
    pub boot_reps: usize,
    pub brake_multiplier: f64,
    pub lepski_ci: LepskiCi,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub seed: u64,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("c-grid must be nonempty and strictly ascending".into()));
        }
        if self.grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::Config("c-grid values must be positive".into()));
        }
        if !(self.brake_multiplier >= 0.0) {
            return Err(Error::Config("brake multiplier must be nonnegative".into()));
        }
        for s in &self.scenarios {
            s.validate()?;
            if s.seed != self.seed {
                return Err(Error::Config(format!("scenario {} carries a different seed", s.id())));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.methods {
            m.validate()?;
            if !seen.insert(m.id()) {
                return Err(Error::Config(format!("method {} listed twice", m.id())));
            }
        }
        let needs_tb = self.methods.iter().any(|m| {
            m.wants(VarianceMethod::TB) || m.truncation == Some(TruncationLevel::Adaptive(VarianceSource::TBb))
        });
        if needs_tb && self.boot_reps < 2 {
            return Err(Error::Config("boot-reps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            grid: self.grid.clone(),
            reps: self.reps,
            boot_reps: self.boot_reps,
        }
    }
}

/// The full factorial design: `n x kappa x misspec`, observational only.
pub fn default_scenarios(seed: u64) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &n in &DEFAULT_SAMPLE_SIZES {
        for &k in &DEFAULT_KAPPAS {
            for m in Misspec::ALL {
                out.push(Scenario {
                    n,
                    kappa_pos: k,
                    misspec: m,
                    rct: false,
                    seed,
                });
            }
        }
    }
    out
}

/// Fixed-c methods for both strategies over `grid`, logit link, EIF variance.
pub fn default_methods(grid: &[f64]) -> Vec<MethodSpec> {
    let mut out = Vec::new();
    for strategy in [Strategy::GH, Strategy::GWT] {
        for &c in grid {
            out.push(MethodSpec::fixed(strategy, Link::Logit, c, &[VarianceMethod::EIF]));
        }
    }
    out
}

/// One row of `records.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub scenario_id: String,
    pub n: usize,
    pub kappa: f64,
    pub misspec: Misspec,
    pub rct: bool,
    pub rep: u64,
    pub method_id: String,
    pub strategy: Option<Strategy>,
    pub link: Option<Link>,
    /// Truncation constant used; the chosen one for adaptive methods.
    pub c: f64,
    pub selector: Option<VarianceSource>,
    pub stop_reason: Option<StopReason>,
    pub psi_hat: f64,
    pub var_eif: f64,
    pub var_plugin: f64,
    pub var_tb: f64,
    /// Reported interval: EIF Wald for fixed levels, the selector's own
    /// variance for adaptive ones.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub eps1: f64,
    pub eps0: f64,
    pub activated_1: usize,
    pub activated_0: usize,
    pub converged: bool,
    pub propensity_converged: bool,
    pub tb_dropped: usize,
    pub tb_flagged: bool,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    fn blank(s: &Scenario, rep: u64, m: &MethodSpec) -> Self {
        let (strategy, link) = match m.group() {
            Some((s, l)) => (Some(s), Some(l)),
            None => (None, None),
        };
        let (c, selector) = match m.truncation {
            Some(TruncationLevel::Fixed(c)) => (c, None),
            Some(TruncationLevel::Adaptive(src)) => (f64::NAN, Some(src)),
            None => (f64::NAN, None),
        };
        Self {
            scenario_id: s.id(),
            n: s.n,
            kappa: s.kappa_pos,
            misspec: s.misspec,
            rct: s.rct,
            rep,
            method_id: m.id(),
            strategy,
            link,
            c,
            selector,
            stop_reason: None,
            psi_hat: f64::NAN,
            var_eif: f64::NAN,
            var_plugin: f64::NAN,
            var_tb: f64::NAN,
            ci_lower: f64::NAN,
            ci_upper: f64::NAN,
            eps1: f64::NAN,
            eps0: f64::NAN,
            activated_1: 0,
            activated_0: 0,
            converged: false,
            propensity_converged: false,
            tb_dropped: 0,
            tb_flagged: false,
            failure: None,
        }
    }

    fn fail(mut self, why: impl Into<String>) -> Self {
        self.failure = Some(why.into());
        self
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.psi_hat.is_finite()
    }

    fn fill_level(&mut self, lv: &LevelSummary) {
        self.c = lv.c;
        self.psi_hat = lv.psi;
        self.var_eif = lv.var_eif;
        self.var_plugin = lv.var_plugin;
        self.var_tb = lv.var_tb;
        self.eps1 = lv.eps1;
        self.eps0 = lv.eps0;
        self.activated_1 = lv.activated_1;
        self.activated_0 = lv.activated_0;
        self.converged = lv.converged;
        self.tb_dropped = lv.tb_dropped;
        self.tb_flagged = lv.tb_flagged;
    }
}

/// Everything computed at one truncation level of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSummary {
    pub c: f64,
    pub psi: f64,
    pub eps1: f64,
    pub eps0: f64,
    pub activated_1: usize,
    pub activated_0: usize,
    pub converged: bool,
    pub var_eif: f64,
    pub var_plugin: f64,
    pub var_tb: f64,
    pub tb_dropped: usize,
    pub tb_flagged: bool,
    pub failure: Option<String>,
}

impl LevelSummary {
    fn failed(c: f64, why: String) -> Self {
        Self {
            c,
            psi: f64::NAN,
            eps1: f64::NAN,
            eps0: f64::NAN,
            activated_1: 0,
            activated_0: 0,
            converged: false,
            var_eif: f64::NAN,
            var_plugin: f64::NAN,
            var_tb: f64::NAN,
            tb_dropped: 0,
            tb_flagged: false,
            failure: Some(why),
        }
    }

    /// Per-replication variance for a selector source (missing for MCb).
    pub fn variance(&self, source: VarianceSource) -> f64 {
        match source {
            VarianceSource::EIFb => self.var_eif,
            VarianceSource::TBb => self.var_tb,
            VarianceSource::MCb => f64::NAN,
        }
    }
}

/// The adaptive grid of one (strategy, link) pair in one replication, kept
/// for the Monte Carlo selector which needs every replication first.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub strategy: Strategy,
    pub link: Link,
    pub levels: Vec<LevelSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutput {
    /// One per method, in method order. MCb records stay failed with
    /// `pending` until [`complete_mc_selection`] runs.
    pub records: Vec<ReplicationRecord>,
    pub paths: Vec<GridPath>,
}

const MC_PENDING: &str = "pending: MCb selection needs the full scenario";

/// Levels and variances needed for one (strategy, link) pair. Level lists
/// are ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub strategy: Strategy,
    pub link: Link,
    pub levels: Vec<f64>,
    /// Levels needing the plug-in variance.
    pub plugin: Vec<f64>,
    /// Levels needing the targeted bootstrap.
    pub tb: Vec<f64>,
    pub keep_path: bool,
}

fn push_level(v: &mut Vec<f64>, c: f64) {
    if !v.contains(&c) {
        v.push(c);
    }
}

/// Groups methods by (strategy, link) and collects the levels each needs.
pub fn plan_groups(methods: &[MethodSpec], grid: &[f64]) -> Vec<GroupPlan> {
    let mut plans: Vec<GroupPlan> = Vec::new();
    for m in methods {
        let Some((strategy, link)) = m.group() else {
            continue;
        };
        let idx = match plans.iter().position(|p| p.strategy == strategy && p.link == link) {
            Some(i) => i,
            None => {
                plans.push(GroupPlan {
                    strategy,
                    link,
                    levels: Vec::new(),
                    plugin: Vec::new(),
                    tb: Vec::new(),
                    keep_path: false,
                });
                plans.len() - 1
            }
        };
        let p = &mut plans[idx];
        let cs: Vec<f64> = match m.truncation {
            Some(TruncationLevel::Fixed(c)) => vec![c],
            Some(TruncationLevel::Adaptive(src)) => {
                if src == VarianceSource::MCb {
                    p.keep_path = true;
                }
                if src == VarianceSource::TBb {
                    grid.iter().for_each(|&c| push_level(&mut p.tb, c));
                }
                grid.to_vec()
            }
            None => Vec::new(),
        };
        for &c in &cs {
            push_level(&mut p.levels, c);
            if m.wants(VarianceMethod::PlugIn) {
                push_level(&mut p.plugin, c);
            }
            if m.wants(VarianceMethod::TB) {
                push_level(&mut p.tb, c);
            }
        }
    }
    for p in &mut plans {
        for v in [&mut p.levels, &mut p.plugin, &mut p.tb] {
            v.sort_by(f64::total_cmp);
        }
    }
    plans
}

/// Fits every planned level of one (strategy, link) pair, then the
/// targeted bootstrap at the planned levels on shared resamples.
pub fn evaluate_group(
    plan: &GroupPlan,
    inputs: &TargetingInputs,
    nuis: &NuisanceFits,
    tb_key: StreamKey,
    boot_reps: usize,
) -> Vec<LevelSummary> {
    let n = inputs.n();
    let mut out = Vec::with_capacity(plan.levels.len());
    let mut truncated: Vec<Option<TruncatedPropensity>> = Vec::with_capacity(plan.levels.len());
    let mut starts = Vec::with_capacity(plan.levels.len());
    for &c in &plan.levels {
        let fitted = TruncationSpec::new(c, n).and_then(|spec| {
            let g = inputs.truncate(&spec);
            let fit = inputs.fit_truncated(&g, &spec, plan.strategy, plan.link)?;
            Ok((g, fit))
        });
        match fitted {
            Ok((g, fit)) => {
                let var_plugin = if plan.plugin.contains(&c) {
                    var_plugin(&fit.q1_star, &fit.q0_star, &nuis.residual_variance, &g, fit.psi_hat).value
                } else {
                    f64::NAN
                };
                out.push(LevelSummary {
                    c,
                    psi: fit.psi_hat,
                    eps1: fit.fluct.eps1,
                    eps0: fit.fluct.eps0,
                    activated_1: fit.activated_1,
                    activated_0: fit.activated_0,
                    converged: fit.fluct.converged,
                    var_eif: var_eif(&fit.eif).value,
                    var_plugin,
                    var_tb: f64::NAN,
                    tb_dropped: 0,
                    tb_flagged: false,
                    failure: None,
                });
                truncated.push(Some(g));
                starts.push(Some(fit.fluct));
            }
            Err(e) => {
                out.push(LevelSummary::failed(c, e.to_string()));
                truncated.push(None);
                starts.push(None);
            }
        }
    }

    let tb_idx: Vec<usize> = (0..plan.levels.len())
        .filter(|&k| plan.tb.contains(&plan.levels[k]) && truncated[k].is_some())
        .collect();
    if !tb_idx.is_empty() {
        let gs: Vec<TruncatedPropensity> = tb_idx.iter().map(|&k| truncated[k].clone().unwrap()).collect();
        let st: Vec<_> = tb_idx.iter().map(|&k| starts[k].unwrap()).collect();
        let resampler = KeyedResampler { key: tb_key };
        match bootstrap_path(inputs, &gs, &st, plan.strategy, plan.link, boot_reps, &resampler) {
            Ok(draws) => {
                for (j, &k) in tb_idx.iter().enumerate() {
                    out[k].tb_dropped = draws[j].dropped;
                    match draws[j].estimate() {
                        Ok(v) => {
                            out[k].var_tb = v.value;
                            out[k].tb_flagged = v.flagged;
                        }
                        Err(e) => out[k].failure = Some(format!("targeted bootstrap: {e}")),
                    }
                }
            }
            Err(e) => {
                for &k in &tb_idx {
                    out[k].failure = Some(format!("targeted bootstrap: {e}"));
                }
            }
        }
    }
    out
}

/// The levels at the grid constants, in grid order.
pub fn grid_levels<'a>(levels: &'a [LevelSummary], grid: &[f64]) -> Vec<&'a LevelSummary> {
    grid.iter().filter_map(|c| levels.iter().find(|l| l.c == *c)).collect()
}

/// Runs one selector over fitted grid levels. `variances` are the source's
/// variances per level. Returns the selection and the chosen level's interval
/// under the source variance.
pub fn select_on_levels(
    levels: &[&LevelSummary],
    variances: &[f64],
    source: VarianceSource,
    n: usize,
    multiplier: f64,
    lepski_ci: LepskiCi,
) -> Result<(SelectionResult, ConfidenceInterval)> {
    if let Some(bad) = levels.iter().find(|l| l.failure.is_some()) {
        return Err(Error::Input(format!(
            "level c={} failed: {}",
            bad.c,
            bad.failure.as_deref().unwrap_or("")
        )));
    }
    let grid: Vec<f64> = levels.iter().map(|l| l.c).collect();
    let psis: Vec<f64> = levels.iter().map(|l| l.psi).collect();
    let source_path = TruncationPath::new(&grid, &psis, variances, source)?;
    let env = build_envelope(&source_path, n, multiplier);
    let sel = match lepski_ci {
        LepskiCi::Source => select_truncation(&source_path, &env),
        LepskiCi::Eif => {
            let eif: Vec<f64> = levels.iter().map(|l| l.var_eif).collect();
            select_truncation(&TruncationPath::new(&grid, &psis, &eif, source)?, &env)
        }
    };
    let ci = source_path.levels[sel.chosen_index].ci;
    Ok((SelectionResult { chosen_ci: ci, ..sel }, ci))
}

fn adaptive_record(
    mut rec: ReplicationRecord,
    levels: &[&LevelSummary],
    variances: &[f64],
    source: VarianceSource,
    n: usize,
    cfg: &StudyConfig,
) -> ReplicationRecord {
    match select_on_levels(levels, variances, source, n, cfg.brake_multiplier, cfg.lepski_ci) {
        Ok((sel, ci)) => {
            rec.fill_level(levels[sel.chosen_index]);
            rec.stop_reason = Some(sel.stop_reason);
            rec.ci_lower = ci.lower;
            rec.ci_upper = ci.upper;
            rec
        }
        Err(e) => rec.fail(e.to_string()),
    }
}

/// Generates replication `rep` of `scenario` and evaluates every method.
pub fn run_replication(scenario: &Scenario, rep: u64, cfg: &StudyConfig) -> ReplicationOutput {
    let blanks = || cfg.methods.iter().map(|m| ReplicationRecord::blank(scenario, rep, m));
    let fail_all = |why: String| ReplicationOutput {
        records: blanks().map(|r| r.fail(why.clone())).collect(),
        paths: Vec::new(),
    };

    let key = scenario.replication_key(rep);
    let ds = match gen_dataset_with(scenario, &mut key.rng()) {
        Ok(ds) => ds,
        Err(e) => return fail_all(format!("generation: {e}")),
    };
    let included = scenario.misspec.included_covariates(ds.w.cols());
    let nuis = match NuisanceFits::fit(&ds, &included) {
        Ok(f) => f,
        Err(e) => return fail_all(format!("nuisance fit: {e}")),
    };
    let inputs = match TargetingInputs::new(&ds, &nuis) {
        Ok(t) => t,
        Err(e) => return fail_all(format!("targeting inputs: {e}")),
    };
    let prop_ok = nuis.propensity.converged;

    let plans = plan_groups(&cfg.methods, &cfg.grid);
    let evaluated: Vec<Vec<LevelSummary>> = plans
        .iter()
        .map(|p| evaluate_group(p, &inputs, &nuis, key.child("tb"), cfg.boot_reps))
        .collect();

    let mut records = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        let mut rec = ReplicationRecord::blank(scenario, rep, m);
        rec.propensity_converged = prop_ok;
        let rec = match (m.group(), m.truncation) {
            (None, _) => {
                rec.psi_hat = nuis.g_computation();
                rec.converged = true;
                rec
            }
            (Some(g), trunc) => {
                let gi = plans.iter().position(|p| (p.strategy, p.link) == g).expect("planned");
                let levels = &evaluated[gi];
                match trunc {
                    Some(TruncationLevel::Fixed(c)) => {
                        let lv = levels.iter().find(|l| l.c == c).expect("planned level");
                        if let Some(why) = &lv.failure {
                            rec.fail(why.clone())
                        } else {
                            rec.fill_level(lv);
                            let ci = wald_ci_value(lv.psi, lv.var_eif);
                            rec.ci_lower = ci.lower;
                            rec.ci_upper = ci.upper;
                            rec
                        }
                    }
                    Some(TruncationLevel::Adaptive(VarianceSource::MCb)) => rec.fail(MC_PENDING),
                    Some(TruncationLevel::Adaptive(src)) => {
                        let lv = grid_levels(levels, &cfg.grid);
                        let vars: Vec<f64> = lv.iter().map(|l| l.variance(src)).collect();
                        adaptive_record(rec, &lv, &vars, src, scenario.n, cfg)
                    }
                    None => rec.fail("no truncation level"),
                }
            }
        };
        records.push(rec);
    }

    let paths = plans
        .iter()
        .zip(evaluated)
        .filter(|(p, _)| p.keep_path)
        .map(|(p, levels)| GridPath {
            strategy: p.strategy,
            link: p.link,
            levels: grid_levels(&levels, &cfg.grid).into_iter().cloned().collect(),
        })
        .collect();
    ReplicationOutput { records, paths }
}

fn sample_variance(xs: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
}

/// Fills the MCb records of one scenario. `V(c)` is the variance of
/// `psi(c)` across the replications whose whole grid succeeded.
pub fn complete_mc_selection(outputs: &mut [ReplicationOutput], scenario: &Scenario, cfg: &StudyConfig) {
    for (mi, m) in cfg.methods.iter().enumerate() {
        if m.truncation != Some(TruncationLevel::Adaptive(VarianceSource::MCb)) {
            continue;
        }
        let group = m.group().expect("adaptive methods are targeted");
        let path_of = |o: &ReplicationOutput| -> Option<Vec<LevelSummary>> {
            o.paths
                .iter()
                .find(|p| (p.strategy, p.link) == group)
                .map(|p| p.levels.clone())
        };
        let complete: Vec<Vec<f64>> = outputs
            .iter()
            .filter_map(path_of)
            .filter(|l| l.iter().all(|x| x.failure.is_none()))
            .map(|l| l.iter().map(|x| x.psi).collect())
            .collect();
        if complete.len() < 2 {
            for o in outputs.iter_mut() {
                o.records[mi].failure = Some("MCb selection needs at least two complete replications".into());
            }
            continue;
        }
        let mc_var: Vec<f64> = (0..cfg.grid.len())
            .map(|k| sample_variance(&complete.iter().map(|p| p[k]).collect::<Vec<_>>()))
            .collect();
        for o in outputs.iter_mut() {
            let Some(levels) = path_of(o) else {
                // Replication failed before the grid was fitted.
                if o.records[mi].failure.as_deref() == Some(MC_PENDING) {
                    o.records[mi].failure = Some("no fitted grid".into());
                }
                continue;
            };
            let mut rec = o.records[mi].clone();
            rec.failure = None;
            let refs: Vec<&LevelSummary> = levels.iter().collect();
            o.records[mi] = adaptive_record(rec, &refs, &mc_var, VarianceSource::MCb, scenario.n, cfg);
        }
    }
}

/// All replications of one scenario, in replication order.
pub fn run_scenario(scenario: &Scenario, cfg: &StudyConfig) -> Vec<ReplicationRecord> {
    let mut outputs: Vec<ReplicationOutput> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|r| run_replication(scenario, r, cfg))
        .collect();
    complete_mc_selection(&mut outputs, scenario, cfg);
    outputs.into_iter().flat_map(|o| o.records).collect()
}

/// Runs the study on a pool of `cfg.threads` workers. The records are
/// ordered by scenario, replication and method regardless of scheduling.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<ReplicationRecord>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| cfg.scenarios.iter().flat_map(|s| run_scenario(s, cfg)).collect()))
}

/// Metrics for one (scenario, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario_id: String,
    pub n: usize,
    pub kappa: f64,
    pub misspec: Misspec,
    pub rct: bool,
    pub method_id: String,
    pub strategy: Option<Strategy>,
    pub link: Option<Link>,
    /// Fixed truncation constant; missing for `init` and adaptive methods.
    pub c: f64,
    pub selector: Option<VarianceSource>,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub reps_nonconverged: usize,
    pub psi0: f64,
    pub mean_psi: f64,
    pub bias: f64,
    /// Monte Carlo standard deviation of `psi_hat` (divisor `R - 1`).
    pub se: f64,
    pub abs_bias_over_se: f64,
    pub mse: f64,
    /// Coverage of the reported interval of each record.
    pub coverage: f64,
    pub coverage_error: f64,
    pub coverage_eif: f64,
    pub coverage_plugin: f64,
    pub coverage_tb: f64,
    /// Coverage of `psi_hat +- 1.96 se`.
    pub coverage_mc: f64,
    pub mean_var_eif: f64,
    pub mean_var_plugin: f64,
    pub mean_var_tb: f64,
    pub mean_chosen_c: f64,
}

impl MetricsRow {
    pub fn var_mc(&self) -> f64 {
        self.se * self.se
    }
}

pub fn coverage_error(coverage: f64) -> f64 {
    if coverage.is_nan() {
        f64::NAN
    } else {
        (0.95 - coverage).max(0.0)
    }
}

fn mean_finite(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for x in xs.filter(|x| x.is_finite()) {
        s += x;
        k += 1;
    }
    if k == 0 {
        f64::NAN
    } else {
        s / k as f64
    }
}

fn coverage_of(ok: &[&ReplicationRecord], psi0: f64, var: impl Fn(&ReplicationRecord) -> f64) -> f64 {
    mean_finite(ok.iter().map(|r| {
        let v = var(r);
        if v.is_finite() {
            f64::from(u8::from(wald_ci_value(r.psi_hat, v).contains(psi0)))
        } else {
            f64::NAN
        }
    }))
}

fn aggregate_cell(cell: &[&ReplicationRecord], psi0: f64) -> MetricsRow {
    let mut cell = cell.to_vec();
    cell.sort_by_key(|r| r.rep);
    let first = cell[0];
    let ok: Vec<&ReplicationRecord> = cell.iter().copied().filter(|r| r.is_ok()).collect();
    let r = ok.len();
    let nan = f64::NAN;
    let (mut mean_psi, mut bias, mut se, mut mse) = (nan, nan, nan, nan);
    let mut coverage = nan;
    let mut coverage_mc = nan;
    if r >= 2 {
        let rf = r as f64;
        mean_psi = ok.iter().map(|x| x.psi_hat).sum::<f64>() / rf;
        bias = mean_psi - psi0;
        se = (ok.iter().map(|x| (x.psi_hat - mean_psi).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt();
        mse = ok.iter().map(|x| (x.psi_hat - psi0).powi(2)).sum::<f64>() / rf;
        coverage = mean_finite(ok.iter().map(|x| {
            if x.ci_lower.is_finite() && x.ci_upper.is_finite() {
                f64::from(u8::from(x.ci_lower <= psi0 && psi0 <= x.ci_upper))
            } else {
                f64::NAN
            }
        }));
        coverage_mc = coverage_of(&ok, psi0, |_| se * se);
    }
    let (cov_eif, cov_plugin, cov_tb) = if r >= 2 {
        (
            coverage_of(&ok, psi0, |x| x.var_eif),
            coverage_of(&ok, psi0, |x| x.var_plugin),
            coverage_of(&ok, psi0, |x| x.var_tb),
        )
    } else {
        (nan, nan, nan)
    };
    MetricsRow {
        scenario_id: first.scenario_id.clone(),
        n: first.n,
        kappa: first.kappa,
        misspec: first.misspec,
        rct: first.rct,
        method_id: first.method_id.clone(),
        strategy: first.strategy,
        link: first.link,
        c: if first.selector.is_some() { nan } else { first.c },
        selector: first.selector,
        reps_ok: r,
        reps_failed: cell.len() - r,
        reps_nonconverged: ok.iter().filter(|x| !x.converged).count(),
        psi0,
        mean_psi,
        bias,
        se,
        abs_bias_over_se: bias.abs() / se,
        mse,
        coverage,
        coverage_error: coverage_error(coverage),
        coverage_eif: cov_eif,
        coverage_plugin: cov_plugin,
        coverage_tb: cov_tb,
        coverage_mc,
        mean_var_eif: mean_finite(ok.iter().map(|x| x.var_eif)),
        mean_var_plugin: mean_finite(ok.iter().map(|x| x.var_plugin)),
        mean_var_tb: mean_finite(ok.iter().map(|x| x.var_tb)),
        mean_chosen_c: if first.selector.is_some() {
            mean_finite(ok.iter().map(|x| x.c))
        } else {
            nan
        },
    }
}

fn group_in_order<T, K: Eq + std::hash::Hash + Clone>(
    items: impl IntoIterator<Item = T>,
    key: impl Fn(&T) -> K,
) -> Vec<Vec<T>> {
    let mut index: HashMap<K, usize> = HashMap::new();
    let mut groups: Vec<Vec<T>> = Vec::new();
    for it in items {
        let k = key(&it);
        let i = *index.entry(k).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[i].push(it);
    }
    groups
}

/// Metrics per (scenario, method) against a common truth `psi0`, in order
/// of first appearance.
pub fn aggregate(records: &[ReplicationRecord], psi0: f64) -> Vec<MetricsRow> {
    group_in_order(records, |r| (r.scenario_id.clone(), r.method_id.clone()))
        .iter()
        .map(|cell| aggregate_cell(cell, psi0))
        .collect()
}

/// [`aggregate`] with each scenario's own true ATE.
pub fn aggregate_study(records: &[ReplicationRecord]) -> Vec<MetricsRow> {
    group_in_order(records, |r| (r.scenario_id.clone(), r.method_id.clone()))
        .iter()
        .map(|cell| aggregate_cell(cell, true_ate(cell[0].misspec)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub rct: bool,
    pub method_id: String,
    pub scenarios: usize,
    pub mse_mean: f64,
    pub mse_median: f64,
    pub mse_worst: f64,
    pub ce_mean: f64,
    pub ce_median: f64,
    pub ce_worst: f64,
}

/// `(mean, median, max)` of the finite values.
pub fn mean_median_max(xs: &[f64]) -> (f64, f64, f64) {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let mean = v.iter().sum::<f64>() / k as f64;
    let median = if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    };
    (mean, median, v[k - 1])
}

/// Mean, median and worst MSE and coverage error across scenarios, per
/// (sample size, design, method).
pub fn summarize_across_scenarios(metrics: &[MetricsRow]) -> Vec<SummaryRow> {
    group_in_order(metrics, |m| (m.n, m.rct, m.method_id.clone()))
        .iter()
        .map(|g| {
            let mse: Vec<f64> = g.iter().map(|m| m.mse).collect();
            let ce: Vec<f64> = g.iter().map(|m| m.coverage_error).collect();
            let (mse_mean, mse_median, mse_worst) = mean_median_max(&mse);
            let (ce_mean, ce_median, ce_worst) = mean_median_max(&ce);
            SummaryRow {
                n: g[0].n,
                rct: g[0].rct,
                method_id: g[0].method_id.clone(),
                scenarios: g.len(),
                mse_mean,
                mse_median,
                mse_worst,
                ce_mean,
                ce_median,
                ce_worst,
            }
        })
        .collect()
}

/// Mean variance estimates per fixed truncation level next to the Monte
/// Carlo variance.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub scenario_id: String,
    pub strategy: Strategy,
    pub link: Link,
    pub c: f64,
    pub mc: f64,
    pub eif: f64,
    pub plugin: f64,
    pub tb: f64,
}

pub fn variance_table(metrics: &[MetricsRow]) -> Vec<VarianceRow> {
    metrics
        .iter()
        .filter(|m| m.c.is_finite() && m.selector.is_none())
        .filter_map(|m| {
            Some(VarianceRow {
                scenario_id: m.scenario_id.clone(),
                strategy: m.strategy?,
                link: m.link?,
                c: m.c,
                mc: m.var_mc(),
                eif: m.mean_var_eif,
                plugin: m.mean_var_plugin,
                tb: m.mean_var_tb,
            })
        })
        .collect()
}

/// Settings stamped on the first line of every emitted CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub grid: Vec<f64>,
    pub reps: usize,
    pub boot_reps: usize,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let grid: Vec<String> = self.grid.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "# seed={}, grid={}, reps={}, boot_reps={}, version={}",
            self.seed,
            grid.join(";"),
            self.reps,
            self.boot_reps,
            env!("CARGO_PKG_VERSION")
        )
    }
}

impl Provenance {
    /// Parses a line written by `Display`.
    pub fn parse(line: &str) -> Option<Self> {
        let body = line.strip_prefix('#')?.trim();
        let mut map = HashMap::new();
        for part in body.split(", ") {
            let (k, v) = part.split_once('=')?;
            map.insert(k.trim(), v.trim());
        }
        Some(Self {
            seed: map.get("seed")?.parse().ok()?,
            grid: map
                .get("grid")?
                .split(';')
                .map(|s| s.parse().ok())
                .collect::<Option<Vec<f64>>>()?,
            reps: map.get("reps")?.parse().ok()?,
            boot_reps: map.get("boot_reps")?.parse().ok()?,
        })
    }
}

/// Column-keyed CSV row access.
pub struct Row<'a> {
    path: &'a str,
    line: usize,
    header: &'a HashMap<String, usize>,
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line,
            message: msg,
        }
    }

    pub fn str(&self, col: &str) -> Result<&str> {
        let i = self
            .header
            .get(col)
            .ok_or_else(|| self.err(format!("missing column '{col}'")))?;
        self.rec
            .get(*i)
            .ok_or_else(|| self.err(format!("short row, no '{col}'")))
    }

    pub fn parse<T: FromStr>(&self, col: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let s = self.str(col)?;
        s.parse().map_err(|e| self.err(format!("column '{col}': '{s}': {e}")))
    }

    pub fn f64(&self, col: &str) -> Result<f64> {
        match self.str(col)? {
            MISSING => Ok(f64::NAN),
            _ => self.parse(col),
        }
    }

    pub fn opt<T: FromStr>(&self, col: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.str(col)? {
            MISSING | "" => Ok(None),
            _ => self.parse(col).map(Some),
        }
    }
}

pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        MISSING.to_string()
    } else {
        fmt_f64(v)
    }
}

fn fmt_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| MISSING.to_string(), |x| x.to_string())
}

/// Writes a provenance line, a header and the rows.
pub fn write_table(
    path: &Path,
    provenance: &Provenance,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{provenance}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Input(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_table`] and maps each row.
pub fn read_table<T>(path: &Path, mut f: impl FnMut(&Row) -> Result<T>) -> Result<(Option<Provenance>, Vec<T>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let provenance = text.lines().next().and_then(Provenance::parse);
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: HashMap<String, usize> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: name.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    if header.is_empty() {
        return Err(Error::Parse {
            path: name,
            line: 1,
            message: "empty file".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: name.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(f(&Row {
            path: &name,
            line,
            header: &header,
            rec: &rec,
        })?);
    }
    Ok((provenance, out))
}

pub const RECORD_COLUMNS: [&str; 28] = [
    "scenario_id",
    "n",
    "kappa",
    "misspec",
    "rct",
    "rep",
    "method_id",
    "strategy",
    "link",
    "c",
    "selector",
    "stop_reason",
    "psi_hat",
    "var_eif",
    "var_plugin",
    "var_tb",
    "ci_lower",
    "ci_upper",
    "eps1",
    "eps0",
    "activated_1",
    "activated_0",
    "converged",
    "propensity_converged",
    "tb_dropped",
    "tb_flagged",
    "failed",
    "failure",
];

impl ReplicationRecord {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.scenario_id.clone(),
            self.n.to_string(),
            self.kappa.to_string(),
            self.misspec.to_string(),
            self.rct.to_string(),
            self.rep.to_string(),
            self.method_id.clone(),
            fmt_opt(&self.strategy),
            fmt_opt(&self.link),
            fmt_num(self.c),
            fmt_opt(&self.selector),
            fmt_opt(&self.stop_reason),
            fmt_num(self.psi_hat),
            fmt_num(self.var_eif),
            fmt_num(self.var_plugin),
            fmt_num(self.var_tb),
            fmt_num(self.ci_lower),
            fmt_num(self.ci_upper),
            fmt_num(self.eps1),
            fmt_num(self.eps0),
            self.activated_1.to_string(),
            self.activated_0.to_string(),
            self.converged.to_string(),
            self.propensity_converged.to_string(),
            self.tb_dropped.to_string(),
            self.tb_flagged.to_string(),
            self.failure.is_some().to_string(),
            self.failure.clone().unwrap_or_default(),
        ]
    }

    pub fn from_row(r: &Row) -> Result<Self> {
        let failed: bool = r.parse("failed")?;
        Ok(Self {
            scenario_id: r.str("scenario_id")?.to_string(),
            n: r.parse("n")?,
            kappa: r.parse("kappa")?,
            misspec: r.parse("misspec")?,
            rct: r.parse("rct")?,
            rep: r.parse("rep")?,
            method_id: r.str("method_id")?.to_string(),
            strategy: r.opt("strategy")?,
            link: r.opt("link")?,
            c: r.f64("c")?,
            selector: r.opt("selector")?,
            stop_reason: r.opt("stop_reason")?,
            psi_hat: r.f64("psi_hat")?,
            var_eif: r.f64("var_eif")?,
            var_plugin: r.f64("var_plugin")?,
            var_tb: r.f64("var_tb")?,
            ci_lower: r.f64("ci_lower")?,
            ci_upper: r.f64("ci_upper")?,
            eps1: r.f64("eps1")?,
            eps0: r.f64("eps0")?,
            activated_1: r.parse("activated_1")?,
            activated_0: r.parse("activated_0")?,
            converged: r.parse("converged")?,
            propensity_converged: r.parse("propensity_converged")?,
            tb_dropped: r.parse("tb_dropped")?,
            tb_flagged: r.parse("tb_flagged")?,
            failure: failed.then(|| r.str("failure").unwrap_or_default().to_string()),
        })
    }
}

pub const METRICS_COLUMNS: [&str; 31] = [
    "scenario_id",
    "n",
    "kappa",
    "misspec",
    "rct",
    "method_id",
    "strategy",
    "link",
    "c",
    "selector",
    "reps_ok",
    "reps_failed",
    "reps_nonconverged",
    "psi0",
    "mean_psi",
    "bias",
    "se",
    "abs_bias_over_se",
    "mse",
    "coverage",
    "coverage_error",
    "coverage_eif",
    "coverage_plugin",
    "coverage_tb",
    "coverage_mc",
    "var_mc",
    "mean_var_eif",
    "mean_var_plugin",
    "mean_var_tb",
    "mean_chosen_c",
    "summary_key",
];

impl MetricsRow {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.scenario_id.clone(),
            self.n.to_string(),
            self.kappa.to_string(),
            self.misspec.to_string(),
            self.rct.to_string(),
            self.method_id.clone(),
            fmt_opt(&self.strategy),
            fmt_opt(&self.link),
            fmt_num(self.c),
            fmt_opt(&self.selector),
            self.reps_ok.to_string(),
            self.reps_failed.to_string(),
            self.reps_nonconverged.to_string(),
            fmt_num(self.psi0),
            fmt_num(self.mean_psi),
            fmt_num(self.bias),
            fmt_num(self.se),
            fmt_num(self.abs_bias_over_se),
            fmt_num(self.mse),
            fmt_num(self.coverage),
            fmt_num(self.coverage_error),
            fmt_num(self.coverage_eif),
            fmt_num(self.coverage_plugin),
            fmt_num(self.coverage_tb),
            fmt_num(self.coverage_mc),
            fmt_num(self.var_mc()),
            fmt_num(self.mean_var_eif),
            fmt_num(self.mean_var_plugin),
            fmt_num(self.mean_var_tb),
            fmt_num(self.mean_chosen_c),
            format!("n{}{}", self.n, if self.rct { "_rct" } else { "" }),
        ]
    }

    pub fn from_row(r: &Row) -> Result<Self> {
        Ok(Self {
            scenario_id: r.str("scenario_id")?.to_string(),
            n: r.parse("n")?,
            kappa: r.parse("kappa")?,
            misspec: r.parse("misspec")?,
            rct: r.parse("rct")?,
            method_id: r.str("method_id")?.to_string(),
            strategy: r.opt("strategy")?,
            link: r.opt("link")?,
            c: r.f64("c")?,
            selector: r.opt("selector")?,
            reps_ok: r.parse("reps_ok")?,
            reps_failed: r.parse("reps_failed")?,
            reps_nonconverged: r.parse("reps_nonconverged")?,
            psi0: r.f64("psi0")?,
            mean_psi: r.f64("mean_psi")?,
            bias: r.f64("bias")?,
            se: r.f64("se")?,
            abs_bias_over_se: r.f64("abs_bias_over_se")?,
            mse: r.f64("mse")?,
            coverage: r.f64("coverage")?,
            coverage_error: r.f64("coverage_error")?,
            coverage_eif: r.f64("coverage_eif")?,
            coverage_plugin: r.f64("coverage_plugin")?,
            coverage_tb: r.f64("coverage_tb")?,
            coverage_mc: r.f64("coverage_mc")?,
            mean_var_eif: r.f64("mean_var_eif")?,
            mean_var_plugin: r.f64("mean_var_plugin")?,
            mean_var_tb: r.f64("mean_var_tb")?,
            mean_chosen_c: r.f64("mean_chosen_c")?,
        })
    }
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "n",
    "rct",
    "method_id",
    "scenarios",
    "mse_mean",
    "mse_median",
    "mse_worst",
    "coverage_error_mean",
    "coverage_error_median",
    "coverage_error_worst",
];

impl SummaryRow {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.rct.to_string(),
            self.method_id.clone(),
            self.scenarios.to_string(),
            fmt_num(self.mse_mean),
            fmt_num(self.mse_median),
            fmt_num(self.mse_worst),
            fmt_num(self.ce_mean),
            fmt_num(self.ce_median),
            fmt_num(self.ce_worst),
        ]
    }

    pub fn from_row(r: &Row) -> Result<Self> {
        Ok(Self {
            n: r.parse("n")?,
            rct: r.parse("rct")?,
            method_id: r.str("method_id")?.to_string(),
            scenarios: r.parse("scenarios")?,
            mse_mean: r.f64("mse_mean")?,
            mse_median: r.f64("mse_median")?,
            mse_worst: r.f64("mse_worst")?,
            ce_mean: r.f64("coverage_error_mean")?,
            ce_median: r.f64("coverage_error_median")?,
            ce_worst: r.f64("coverage_error_worst")?,
        })
    }
}

pub const VARIANCE_COLUMNS: [&str; 8] = ["scenario_id", "strategy", "link", "c", "mc", "eif", "plugin", "tb"];

impl VarianceRow {
    pub fn to_row(&self) -> Vec<String> {
        vec![
            self.scenario_id.clone(),
            self.strategy.to_string(),
            self.link.to_string(),
            fmt_num(self.c),
            fmt_num(self.mc),
            fmt_num(self.eif),
            fmt_num(self.plugin),
            fmt_num(self.tb),
        ]
    }

    pub fn from_row(r: &Row) -> Result<Self> {
        Ok(Self {
            scenario_id: r.str("scenario_id")?.to_string(),
            strategy: r.parse("strategy")?,
            link: r.parse("link")?,
            c: r.f64("c")?,
            mc: r.f64("mc")?,
            eif: r.f64("eif")?,
            plugin: r.f64("plugin")?,
            tb: r.f64("tb")?,
        })
    }
}

pub const RECORDS_FILE: &str = "records.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const VARIANCE_FILE: &str = "variance_table.csv";

/// Aggregated tables derived from a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyTables {
    pub metrics: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
    pub variance: Vec<VarianceRow>,
}

impl StudyTables {
    pub fn from_records(records: &[ReplicationRecord]) -> Self {
        let metrics = aggregate_study(records);
        let summary = summarize_across_scenarios(&metrics);
        let variance = variance_table(&metrics);
        Self {
            metrics,
            summary,
            variance,
        }
    }
}

pub fn write_records(path: &Path, prov: &Provenance, records: &[ReplicationRecord]) -> Result<()> {
    write_table(path, prov, &RECORD_COLUMNS, records.iter().map(|r| r.to_row()))
}

pub fn read_records(path: &Path) -> Result<(Option<Provenance>, Vec<ReplicationRecord>)> {
    read_table(path, ReplicationRecord::from_row)
}

/// Writes `metrics.csv`, `summary.csv` and `variance_table.csv` to `dir`.
pub fn write_tables(dir: &Path, prov: &Provenance, t: &StudyTables) -> Result<()> {
    write_table(
        &dir.join(METRICS_FILE),
        prov,
        &METRICS_COLUMNS,
        t.metrics.iter().map(|r| r.to_row()),
    )?;
    write_table(
        &dir.join(SUMMARY_FILE),
        prov,
        &SUMMARY_COLUMNS,
        t.summary.iter().map(|r| r.to_row()),
    )?;
    write_table(
        &dir.join(VARIANCE_FILE),
        prov,
        &VARIANCE_COLUMNS,
        t.variance.iter().map(|r| r.to_row()),
    )
}

/// Runs the study and writes every table to `dir`.
pub fn run_and_write(cfg: &StudyConfig, dir: &Path) -> Result<(Vec<ReplicationRecord>, StudyTables)> {
    let records = run_study(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prov = cfg.provenance();
    write_records(&dir.join(RECORDS_FILE), &prov, &records)?;
    let tables = StudyTables::from_records(&records);
    write_tables(dir, &prov, &tables)?;
    Ok((records, tables))
}
