//! Command-line configuration, dispatch and table emission.
//!
//! Every flag can also be given in a flat `key = value` file passed with
//! `--config`; keys are the long flag names without dashes. Flags override
//! file values.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::adaptive::{StopReason, VarianceSource, DEFAULT_BRAKE_MULTIPLIER};
use crate::datagen::{Dataset, Misspec, Scenario};
use crate::error::{Error, Result};
use crate::harness::{
    self, evaluate_group, grid_levels, read_table, select_on_levels, write_table, GroupPlan, LepskiCi, LevelSummary,
    MethodSpec, MetricsRow, Provenance, StudyConfig, StudyTables, VarianceRow, DEFAULT_GRID, DEFAULT_KAPPAS,
    DEFAULT_REPS, DEFAULT_SAMPLE_SIZES, DEFAULT_SEED, METRICS_FILE, RECORDS_FILE, VARIANCE_FILE,
};
use crate::nuisance::NuisanceFits;
use crate::rng::{hash_bytes, mix64, StreamKey};
use crate::targeting::{Link, Strategy, TargetingInputs};
use crate::truncation::trunc_bound;
use crate::variance::{wald_ci_value, VarianceMethod, DEFAULT_BOOT_REPS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const RELATIVE_VARIANCE_FILE: &str = "plot_relative_variance.csv";
pub const METRIC_CURVES_FILE: &str = "plot_metric_curves.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(Error::Config(_)) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tmletrunc",
    version,
    about = "TMLE of the ATE with propensity truncation and adaptive truncation selection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the Monte Carlo study and write records, metrics, summary,
    /// variance and plot tables.
    Simulate(RunArgs),
    /// Estimate the ATE on a CSV file with columns w1..wp, a, y.
    Estimate(EstimateArgs),
    /// Re-aggregate an existing records.csv and rewrite every derived table.
    Tables(TablesArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat key=value file; keys are long flag names without the dashes.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Sample sizes, comma separated [default: 500,1000,2000].
    #[arg(long, value_name = "LIST")]
    pub n: Option<String>,
    /// Positivity strengths kappa, comma separated [default: 1,2,3].
    #[arg(long, value_name = "LIST")]
    pub kappa: Option<String>,
    /// Outcome misspecification levels: high, moderate, nearly-correct [default: all].
    #[arg(long, value_name = "LIST")]
    pub misspec: Option<String>,
    /// Replications per scenario [default: 500].
    #[arg(long)]
    pub reps: Option<String>,
    /// Ascending truncation constants, comma separated, or a range `a..b` [default: 1..10].
    #[arg(long = "c-grid", value_name = "LIST")]
    pub c_grid: Option<String>,
    /// Targeting strategies: gH, gWt [default: gH,gWt].
    #[arg(long, value_name = "LIST")]
    pub strategy: Option<String>,
    /// Fluctuation links: logit, linear [default: logit].
    #[arg(long, value_name = "LIST")]
    pub link: Option<String>,
    /// Adaptive selectors: EIFb, MCb, TBb, or none [default: EIFb,MCb; estimate: EIFb,TBb].
    #[arg(long, value_name = "LIST")]
    pub selectors: Option<String>,
    /// Variance estimators per record: eif, plugin, tb [default: eif; estimate: all].
    #[arg(long, value_name = "LIST")]
    pub variance: Option<String>,
    /// Targeted bootstrap replicates [default: 500].
    #[arg(long = "boot-reps")]
    pub boot_reps: Option<String>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory [default: out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for all cores [default: 0].
    #[arg(long)]
    pub threads: Option<String>,
    /// Randomized treatment (fair coin) instead of the observational design.
    #[arg(long)]
    pub rct: bool,
    /// Add the untargeted G-computation baseline.
    #[arg(long = "include-init")]
    pub include_init: bool,
    /// Brake envelope multiplier on sqrt(ln n) [default: 1].
    #[arg(long = "brake-multiplier")]
    pub brake_multiplier: Option<String>,
    /// Variance behind the Lepski comparison intervals: source or eif [default: source].
    #[arg(long = "lepski-ci")]
    pub lepski_ci: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// CSV with covariate columns w1..wp, a binary column a and outcome y.
    pub input: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TablesArgs {
    /// Directory holding records.csv [default: out].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubcommandKind {
    Simulate,
    Estimate,
    Tables,
}

/// Validated configuration for any subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub subcommand: SubcommandKind,
    pub sample_sizes: Vec<usize>,
    pub kappas: Vec<f64>,
    pub misspecs: Vec<Misspec>,
    pub rct: bool,
    pub reps: usize,
    pub grid: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub links: Vec<Link>,
    pub selectors: Vec<VarianceSource>,
    pub variance: Vec<VarianceMethod>,
    pub boot_reps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub include_init: bool,
    pub brake_multiplier: f64,
    pub lepski_ci: LepskiCi,
    pub input: Option<PathBuf>,
}

impl RunConfig {
    /// Study defaults; `estimate` reports every per-dataset variance and
    /// the selectors that need no replications.
    pub fn defaults(subcommand: SubcommandKind) -> Self {
        let single = subcommand == SubcommandKind::Estimate;
        Self {
            subcommand,
            sample_sizes: DEFAULT_SAMPLE_SIZES.to_vec(),
            kappas: DEFAULT_KAPPAS.to_vec(),
            misspecs: Misspec::ALL.to_vec(),
            rct: false,
            reps: DEFAULT_REPS,
            grid: DEFAULT_GRID.to_vec(),
            strategies: vec![Strategy::GH, Strategy::GWT],
            links: vec![Link::Logit],
            selectors: if single {
                vec![VarianceSource::EIFb, VarianceSource::TBb]
            } else {
                vec![VarianceSource::EIFb, VarianceSource::MCb]
            },
            variance: if single {
                vec![VarianceMethod::EIF, VarianceMethod::PlugIn, VarianceMethod::TB]
            } else {
                vec![VarianceMethod::EIF]
            },
            boot_reps: DEFAULT_BOOT_REPS,
            seed: DEFAULT_SEED,
            out: PathBuf::from("out"),
            threads: 0,
            include_init: false,
            brake_multiplier: DEFAULT_BRAKE_MULTIPLIER,
            lepski_ci: LepskiCi::Source,
            input: None,
        }
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        for &n in &self.sample_sizes {
            for &kappa_pos in &self.kappas {
                for &misspec in &self.misspecs {
                    out.push(Scenario {
                        n,
                        kappa_pos,
                        misspec,
                        rct: self.rct,
                        seed: self.seed,
                    });
                }
            }
        }
        out
    }

    /// Init first, then per (strategy, link): fixed levels, then selectors.
    pub fn methods(&self) -> Vec<MethodSpec> {
        let mut out = Vec::new();
        if self.include_init {
            out.push(MethodSpec::init());
        }
        for &s in &self.strategies {
            for &l in &self.links {
                for &c in &self.grid {
                    out.push(MethodSpec::fixed(s, l, c, &self.variance));
                }
                for &src in &self.selectors {
                    out.push(MethodSpec::adaptive(s, l, src, &self.variance));
                }
            }
        }
        out
    }

    pub fn study(&self) -> StudyConfig {
        StudyConfig {
            scenarios: self.scenarios(),
            reps: self.reps,
            methods: self.methods(),
            grid: self.grid.clone(),
            boot_reps: self.boot_reps,
            brake_multiplier: self.brake_multiplier,
            lepski_ci: self.lepski_ci,
            threads: self.threads,
            seed: self.seed,
        }
    }
}

const CONFIG_KEYS: [&str; 17] = [
    "n",
    "kappa",
    "misspec",
    "reps",
    "c-grid",
    "strategy",
    "link",
    "selectors",
    "variance",
    "boot-reps",
    "seed",
    "out",
    "threads",
    "rct",
    "include-init",
    "brake-multiplier",
    "lepski-ci",
];

/// Parses a flat `key = value` file. `#` starts a comment; underscores in
/// keys are read as dashes.
pub fn parse_config_file(text: &str, path: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
        let key = k.trim().replace('_', "-");
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("{path}:{}: unknown key '{key}'", i + 1)));
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{path}:{}: key '{key}' given twice", i + 1)));
        }
    }
    Ok(map)
}

fn usage(flag: &str, msg: impl fmt::Display) -> CliError {
    CliError::Usage(format!("--{flag}: {msg}"))
}

fn parse_one<T: FromStr>(flag: &str, s: &str) -> std::result::Result<T, CliError>
where
    T::Err: fmt::Display,
{
    s.trim().parse().map_err(|e| usage(flag, format!("'{s}': {e}")))
}

fn parse_list<T: FromStr>(flag: &str, s: &str) -> std::result::Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
    if items.is_empty() {
        return Err(usage(flag, "empty list"));
    }
    items.into_iter().map(|x| parse_one(flag, x)).collect()
}

fn parse_bool(flag: &str, s: &str) -> std::result::Result<bool, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(usage(flag, format!("'{other}' is not a boolean"))),
    }
}

/// `1,2,5` or an integer range `1..10`.
fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, CliError> {
    let flag = "c-grid";
    let grid: Vec<f64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (i64, i64) = (parse_one(flag, a)?, parse_one(flag, b)?);
        if a > b {
            return Err(usage(flag, format!("empty range {s}")));
        }
        (a..=b).map(|c| c as f64).collect()
    } else {
        parse_list(flag, s)?
    };
    if grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
        return Err(usage(flag, "constants must be positive"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(usage(flag, "constants must be strictly ascending"));
    }
    Ok(grid)
}

fn parse_selectors(s: &str) -> std::result::Result<Vec<VarianceSource>, CliError> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    parse_list("selectors", s)
}

fn parse_lepski_ci(s: &str) -> std::result::Result<LepskiCi, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "source" => Ok(LepskiCi::Source),
        "eif" => Ok(LepskiCi::Eif),
        other => Err(usage("lepski-ci", format!("'{other}' (expected source or eif)"))),
    }
}

fn no_duplicates<T: PartialEq + fmt::Debug>(flag: &str, v: &[T]) -> std::result::Result<(), CliError> {
    for (i, x) in v.iter().enumerate() {
        if v[..i].contains(x) {
            return Err(usage(flag, format!("{x:?} listed twice")));
        }
    }
    Ok(())
}

/// Merges flags over an optional config file over the defaults.
pub fn resolve(args: &RunArgs, subcommand: SubcommandKind) -> std::result::Result<RunConfig, CliError> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_file(&text, &p.display().to_string())?
        }
        None => HashMap::new(),
    };
    let pick =
        |flag: Option<&String>, key: &str| -> Option<String> { flag.cloned().or_else(|| file.get(key).cloned()) };

    let mut cfg = RunConfig::defaults(subcommand);
    if let Some(v) = pick(args.n.as_ref(), "n") {
        cfg.sample_sizes = parse_list("n", &v)?;
    }
    if let Some(v) = pick(args.kappa.as_ref(), "kappa") {
        cfg.kappas = parse_list("kappa", &v)?;
    }
    if let Some(v) = pick(args.misspec.as_ref(), "misspec") {
        cfg.misspecs = parse_list("misspec", &v)?;
    }
    if let Some(v) = pick(args.reps.as_ref(), "reps") {
        cfg.reps = parse_one("reps", &v)?;
    }
    if let Some(v) = pick(args.c_grid.as_ref(), "c-grid") {
        cfg.grid = parse_grid(&v)?;
    }
    if let Some(v) = pick(args.strategy.as_ref(), "strategy") {
        cfg.strategies = parse_list("strategy", &v)?;
    }
    if let Some(v) = pick(args.link.as_ref(), "link") {
        cfg.links = parse_list("link", &v)?;
    }
    if let Some(v) = pick(args.selectors.as_ref(), "selectors") {
        cfg.selectors = parse_selectors(&v)?;
    }
    if let Some(v) = pick(args.variance.as_ref(), "variance") {
        cfg.variance = parse_list("variance", &v)?;
    }
    if let Some(v) = pick(args.boot_reps.as_ref(), "boot-reps") {
        cfg.boot_reps = parse_one("boot-reps", &v)?;
    }
    if let Some(v) = pick(args.seed.as_ref(), "seed") {
        cfg.seed = parse_one("seed", &v)?;
    }
    if let Some(v) = args.out.clone().or_else(|| file.get("out").map(PathBuf::from)) {
        cfg.out = v;
    }
    if let Some(v) = pick(args.threads.as_ref(), "threads") {
        cfg.threads = parse_one("threads", &v)?;
    }
    if let Some(v) = pick(args.brake_multiplier.as_ref(), "brake-multiplier") {
        cfg.brake_multiplier = parse_one("brake-multiplier", &v)?;
    }
    if let Some(v) = pick(args.lepski_ci.as_ref(), "lepski-ci") {
        cfg.lepski_ci = parse_lepski_ci(&v)?;
    }
    cfg.rct = args.rct
        || file
            .get("rct")
            .map(|v| parse_bool("rct", v))
            .transpose()?
            .unwrap_or(false);
    cfg.include_init = args.include_init
        || file
            .get("include-init")
            .map(|v| parse_bool("include-init", v))
            .transpose()?
            .unwrap_or(false);

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    if cfg.sample_sizes.iter().any(|&n| n < 3) {
        return Err(usage("n", "sample sizes must be at least 3"));
    }
    if cfg.kappas.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
        return Err(usage("kappa", "values must be positive"));
    }
    if cfg.reps == 0 {
        return Err(usage("reps", "must be at least 1"));
    }
    if !(cfg.brake_multiplier >= 0.0) || !cfg.brake_multiplier.is_finite() {
        return Err(usage("brake-multiplier", "must be a nonnegative number"));
    }
    if cfg.variance.contains(&VarianceMethod::MC) {
        return Err(usage(
            "variance",
            "mc is computed by the study itself; choose from eif, plugin, tb",
        ));
    }
    let needs_tb = cfg.variance.contains(&VarianceMethod::TB) || cfg.selectors.contains(&VarianceSource::TBb);
    if needs_tb && cfg.boot_reps < 2 {
        return Err(usage("boot-reps", "must be at least 2"));
    }
    if cfg.subcommand == SubcommandKind::Estimate && cfg.selectors.contains(&VarianceSource::MCb) {
        return Err(usage(
            "selectors",
            "MCb needs Monte Carlo replications and is only available in simulate",
        ));
    }
    no_duplicates("n", &cfg.sample_sizes)?;
    no_duplicates("misspec", &cfg.misspecs)?;
    no_duplicates("strategy", &cfg.strategies)?;
    no_duplicates("link", &cfg.links)?;
    no_duplicates("selectors", &cfg.selectors)?;
    no_duplicates("variance", &cfg.variance)?;
    no_duplicates("kappa", &cfg.kappas)?;
    for &n in &cfg.sample_sizes {
        for &c in &cfg.grid {
            if let Err(e) = trunc_bound(c, n) {
                return Err(usage("c-grid", e));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first). Help and version requests come back
/// as `Err` carrying clap's message and exit code 0.
pub fn parse_config<I, T>(argv: I) -> std::result::Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    resolve_command(&cli.command)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("{e}\n")))
}

fn resolve_command(cmd: &Command) -> std::result::Result<RunConfig, CliError> {
    match cmd {
        Command::Simulate(a) => resolve(a, SubcommandKind::Simulate),
        Command::Estimate(a) => {
            let mut cfg = resolve(&a.run, SubcommandKind::Estimate)?;
            cfg.input = Some(a.input.clone());
            Ok(cfg)
        }
        Command::Tables(a) => {
            let mut cfg = RunConfig::defaults(SubcommandKind::Tables);
            if let Some(o) = &a.out {
                cfg.out = o.clone();
            }
            Ok(cfg)
        }
    }
}

/// One truncation level of an estimate report.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub bound: f64,
    pub level: LevelSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub source: VarianceSource,
    pub chosen_c: f64,
    pub psi: f64,
    pub stop_reason: StopReason,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub strategy: Strategy,
    pub link: Link,
    pub levels: Vec<LevelReport>,
    pub selections: Vec<std::result::Result<SelectionReport, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub path: String,
    pub n: usize,
    pub n_treated: usize,
    pub covariates: usize,
    pub propensity_converged: bool,
    pub g1_min: f64,
    pub g1_max: f64,
    pub g_computation: f64,
    pub variance: Vec<VarianceMethod>,
    pub groups: Vec<GroupReport>,
}

/// Applies the estimators to a user dataset. The outcome working model uses
/// every covariate column.
pub fn estimate_dataset(ds: &Dataset, path: &str, cfg: &RunConfig) -> Result<EstimateReport> {
    ds.check_both_arms()?;
    let n = ds.n();
    let all: Vec<usize> = (0..ds.w.cols()).collect();
    let nuis = NuisanceFits::fit(ds, &all)?;
    let inputs = TargetingInputs::new(ds, &nuis)?;
    let tb_key = StreamKey::new(mix64(cfg.seed ^ hash_bytes(b"estimate")), 0).child("tb");
    let wants_tb = cfg.variance.contains(&VarianceMethod::TB) || cfg.selectors.contains(&VarianceSource::TBb);
    let mut groups = Vec::new();
    for &strategy in &cfg.strategies {
        for &link in &cfg.links {
            let plan = GroupPlan {
                strategy,
                link,
                levels: cfg.grid.clone(),
                plugin: if cfg.variance.contains(&VarianceMethod::PlugIn) {
                    cfg.grid.clone()
                } else {
                    Vec::new()
                },
                tb: if wants_tb { cfg.grid.clone() } else { Vec::new() },
                keep_path: false,
            };
            let levels = evaluate_group(&plan, &inputs, &nuis, tb_key, cfg.boot_reps);
            let refs = grid_levels(&levels, &cfg.grid);
            let selections = cfg
                .selectors
                .iter()
                .map(|&src| {
                    let vars: Vec<f64> = refs.iter().map(|l| l.variance(src)).collect();
                    select_on_levels(&refs, &vars, src, n, cfg.brake_multiplier, cfg.lepski_ci)
                        .map(|(sel, ci)| SelectionReport {
                            source: src,
                            chosen_c: sel.chosen_c,
                            psi: sel.chosen_psi,
                            stop_reason: sel.stop_reason,
                            ci: (ci.lower, ci.upper),
                        })
                        .map_err(|e| e.to_string())
                })
                .collect();
            let levels = levels
                .into_iter()
                .map(|level| LevelReport {
                    bound: trunc_bound(level.c, n).unwrap_or(f64::NAN),
                    level,
                })
                .collect();
            groups.push(GroupReport {
                strategy,
                link,
                levels,
                selections,
            });
        }
    }
    let g = &nuis.propensity.fitted_g1;
    Ok(EstimateReport {
        path: path.to_string(),
        n,
        n_treated: ds.n_treated(),
        covariates: ds.w.cols(),
        propensity_converged: nuis.propensity.converged,
        g1_min: g.iter().copied().fold(f64::INFINITY, f64::min),
        g1_max: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        g_computation: nuis.g_computation(),
        variance: cfg.variance.clone(),
        groups,
    })
}

pub fn estimate_file(path: &Path, cfg: &RunConfig) -> Result<EstimateReport> {
    let ds = Dataset::read_csv(path)?;
    estimate_dataset(&ds, &path.display().to_string(), cfg)
}

fn fmt_ci(psi: f64, v: f64) -> String {
    if v.is_nan() {
        return "-".to_string();
    }
    let ci = wald_ci_value(psi, v);
    format!("{v:.6} [{:.4}, {:.4}]", ci.lower, ci.upper)
}

impl fmt::Display for EstimateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "data: {}", self.path)?;
        writeln!(
            f,
            "n = {}, treated = {}, covariates = {}",
            self.n, self.n_treated, self.covariates
        )?;
        writeln!(
            f,
            "propensity: range [{:.3e}, {:.6}], converged = {}",
            self.g1_min, self.g1_max, self.propensity_converged
        )?;
        writeln!(f, "g-computation (untargeted): {:.6}", self.g_computation)?;
        for g in &self.groups {
            writeln!(f)?;
            writeln!(f, "{} / {}", g.strategy, g.link)?;
            for lr in &g.levels {
                let l = &lr.level;
                if let Some(why) = &l.failure {
                    if l.psi.is_nan() {
                        writeln!(f, "  c = {:<5} failed: {why}", l.c)?;
                        continue;
                    }
                }
                writeln!(
                    f,
                    "  c = {:<5} b = {:.6}  psi = {:.6}  eps = ({:.4e}, {:.4e}){}  truncated = ({}, {})",
                    l.c,
                    lr.bound,
                    l.psi,
                    l.eps1,
                    l.eps0,
                    if l.converged { "" } else { " not converged" },
                    l.activated_1,
                    l.activated_0
                )?;
                for m in &self.variance {
                    let v = match m {
                        VarianceMethod::EIF => l.var_eif,
                        VarianceMethod::PlugIn => l.var_plugin,
                        VarianceMethod::TB => l.var_tb,
                        VarianceMethod::MC => f64::NAN,
                    };
                    let mut line = format!("      {:<7} {}", m.as_str(), fmt_ci(l.psi, v));
                    if *m == VarianceMethod::TB && l.tb_dropped > 0 {
                        line.push_str(&format!("  dropped {}", l.tb_dropped));
                        if l.tb_flagged {
                            line.push_str(" (more than 10%)");
                        }
                    }
                    writeln!(f, "{line}")?;
                }
                if let Some(why) = &l.failure {
                    writeln!(f, "      warning: {why}")?;
                }
            }
            for s in &g.selections {
                match s {
                    Ok(s) => writeln!(
                        f,
                        "  {}: c = {}  psi = {:.6}  95% CI [{:.4}, {:.4}]  stop = {}",
                        s.source, s.chosen_c, s.psi, s.ci.0, s.ci.1, s.stop_reason
                    )?,
                    Err(e) => writeln!(f, "  selector failed: {e}")?,
                }
            }
        }
        Ok(())
    }
}

/// Writes `plot_relative_variance.csv` and `plot_metric_curves.csv` into
/// `dir` from its metrics and variance tables.
pub fn emit_plot_data(dir: &Path) -> Result<()> {
    let metrics_path = dir.join(METRICS_FILE);
    let var_path = dir.join(VARIANCE_FILE);
    for p in [&metrics_path, &var_path] {
        if !p.exists() {
            return Err(Error::Input(format!("missing input file {}", p.display())));
        }
    }
    let (prov, metrics) = read_table(&metrics_path, MetricsRow::from_row)?;
    if metrics.is_empty() {
        return Err(Error::Input(format!("{} has no rows", metrics_path.display())));
    }
    let (_, variance) = read_table(&var_path, VarianceRow::from_row)?;
    let prov = prov.unwrap_or(Provenance {
        seed: 0,
        grid: Vec::new(),
        reps: 0,
        boot_reps: 0,
    });

    let mut rel = Vec::new();
    for v in &variance {
        for (name, value) in [("mc", v.mc), ("eif", v.eif), ("plugin", v.plugin), ("tb", v.tb)] {
            if value.is_nan() {
                continue;
            }
            rel.push(vec![
                v.scenario_id.clone(),
                v.strategy.to_string(),
                v.link.to_string(),
                harness::fmt_num(v.c),
                name.to_string(),
                harness::fmt_num(value / v.mc),
            ]);
        }
    }
    write_table(
        &dir.join(RELATIVE_VARIANCE_FILE),
        &prov,
        &["scenario_id", "strategy", "link", "c", "estimator", "relative_variance"],
        rel,
    )?;

    let mut curves = Vec::new();
    for m in metrics.iter().filter(|m| m.c.is_finite()) {
        let (Some(s), Some(l)) = (m.strategy, m.link) else {
            continue;
        };
        for (name, value) in [
            ("bias", m.bias),
            ("se", m.se),
            ("abs_bias_over_se", m.abs_bias_over_se),
            ("mse", m.mse),
            ("coverage", m.coverage),
            ("coverage_mc", m.coverage_mc),
            ("coverage_error", m.coverage_error),
        ] {
            curves.push(vec![
                m.scenario_id.clone(),
                s.to_string(),
                l.to_string(),
                harness::fmt_num(m.c),
                name.to_string(),
                harness::fmt_num(value),
            ]);
        }
    }
    write_table(
        &dir.join(METRIC_CURVES_FILE),
        &prov,
        &["scenario_id", "strategy", "link", "c", "metric", "value"],
        curves,
    )
}

/// Re-aggregates `records.csv` in `dir` and rewrites the derived tables.
pub fn rebuild_tables(dir: &Path) -> Result<StudyTables> {
    let records_path = dir.join(RECORDS_FILE);
    if !records_path.exists() {
        return Err(Error::Input(format!("missing input file {}", records_path.display())));
    }
    let (prov, records) = harness::read_records(&records_path)?;
    if records.is_empty() {
        return Err(Error::Input(format!("{} has no rows", records_path.display())));
    }
    let prov = prov.ok_or_else(|| Error::Input(format!("{} lacks its provenance line", records_path.display())))?;
    let tables = StudyTables::from_records(&records);
    harness::write_tables(dir, &prov, &tables)?;
    emit_plot_data(dir)?;
    Ok(tables)
}

/// Executes a resolved configuration, returning text for stdout.
pub fn execute(cfg: &RunConfig) -> std::result::Result<String, CliError> {
    match cfg.subcommand {
        SubcommandKind::Simulate => {
            let study = cfg.study();
            study.validate()?;
            let (records, tables) = harness::run_and_write(&study, &cfg.out)?;
            emit_plot_data(&cfg.out)?;
            let failed = records.iter().filter(|r| !r.is_ok()).count();
            Ok(format!(
                "{} records ({} failed), {} metric rows, {} summary rows written to {}\n",
                records.len(),
                failed,
                tables.metrics.len(),
                tables.summary.len(),
                cfg.out.display()
            ))
        }
        SubcommandKind::Estimate => {
            let input = cfg
                .input
                .as_ref()
                .ok_or_else(|| CliError::Usage("estimate needs an input file".into()))?;
            Ok(estimate_file(input, cfg)?.to_string())
        }
        SubcommandKind::Tables => {
            let t = rebuild_tables(&cfg.out)?;
            Ok(format!(
                "{} metric rows, {} summary rows written to {}\n",
                t.metrics.len(),
                t.summary.len(),
                cfg.out.display()
            ))
        }
    }
}

/// Entry point used by the binary. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve_command(&cli.command).and_then(|cfg| execute(&cfg));
    match result {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(args: &[&str]) -> std::result::Result<RunConfig, clap::Error> {
        parse_config(std::iter::once("tmletrunc").chain(args.iter().copied()))
    }

    #[test]
    fn simulate_defaults() {
        let c = cfg(&["simulate"]).unwrap();
        assert_eq!(c, RunConfig::defaults(SubcommandKind::Simulate));
        assert_eq!(c.scenarios().len(), 27);
    }

    #[test]
    fn single_level_grid() {
        assert_eq!(cfg(&["simulate", "--c-grid", "5"]).unwrap().grid, vec![5.0]);
        assert_eq!(
            cfg(&["simulate", "--c-grid", "1..3"]).unwrap().grid,
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn table_one_scenario() {
        let c = cfg(&[
            "simulate",
            "--n",
            "1000",
            "--kappa",
            "3",
            "--misspec",
            "high",
            "--reps",
            "500",
        ])
        .unwrap();
        let s = c.scenarios();
        assert_eq!(s.len(), 1);
        assert_eq!(
            (s[0].n, s[0].kappa_pos, s[0].misspec, c.reps),
            (1000, 3.0, Misspec::High, 500)
        );
    }

    #[test]
    fn bad_values_name_the_flag() {
        let e = cfg(&["simulate", "--c-grid", "3,2"]).unwrap_err().to_string();
        assert!(e.contains("--c-grid"), "{e}");
        let e = cfg(&["simulate", "--reps", "many"]).unwrap_err().to_string();
        assert!(e.contains("--reps"), "{e}");
        let e = cfg(&["estimate", "x.csv", "--selectors", "MCb"])
            .unwrap_err()
            .to_string();
        assert!(e.contains("--selectors"), "{e}");
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(parse_config_file("reps = 3\nbogus = 1\n", "f").is_err());
        let m = parse_config_file("# c\nboot_reps = 7 # trailing\n", "f").unwrap();
        assert_eq!(m["boot-reps"], "7");
    }
}
