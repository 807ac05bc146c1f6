//! Synthetic observational data with tunable overlap and outcome-model
//! difficulty, plus CSV dump and load of datasets.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{hash_bytes, mix64, StreamKey};

/// Number of covariates produced by the generator.
pub const N_COVARIATES: usize = 4;

/// Standard deviation of the outcome noise.
pub const NOISE_SD: f64 = 0.5;

const PROPENSITY_COEFS: [f64; N_COVARIATES] = [1.5, 2.0, -1.0, -2.5];

/// Difficulty of the outcome regression relative to the linear working model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Misspec {
    /// Nonlinear truth; the working model also omits `W1`.
    High,
    /// Nonlinear truth; all covariates in the working model.
    Moderate,
    /// Additive truth with a mildly heterogeneous effect.
    NearlyCorrect,
}

impl Misspec {
    pub const ALL: [Misspec; 3] = [Misspec::High, Misspec::Moderate, Misspec::NearlyCorrect];

    pub fn as_str(&self) -> &'static str {
        match self {
            Misspec::High => "high",
            Misspec::Moderate => "moderate",
            Misspec::NearlyCorrect => "nearly-correct",
        }
    }

    /// Covariate columns (0-based) used by the outcome working model.
    pub fn included_covariates(&self, p: usize) -> Vec<usize> {
        match self {
            Misspec::High => (1..p).collect(),
            Misspec::Moderate | Misspec::NearlyCorrect => (0..p).collect(),
        }
    }
}

impl fmt::Display for Misspec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Misspec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Ok(Misspec::High),
            "moderate" | "mod" => Ok(Misspec::Moderate),
            "nearly-correct" | "nearlycorrect" | "nearly_correct" | "nc" => Ok(Misspec::NearlyCorrect),
            other => Err(Error::Config(format!(
                "unknown misspecification level '{other}' (expected high, moderate or nearly-correct)"
            ))),
        }
    }
}

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n: usize,
    pub kappa_pos: f64,
    pub misspec: Misspec,
    /// Treatment assigned by a fair coin independent of `W`.
    pub rct: bool,
    pub seed: u64,
}

impl Scenario {
    pub fn new(n: usize, kappa_pos: f64, misspec: Misspec, rct: bool, seed: u64) -> Result<Self> {
        let s = Scenario {
            n,
            kappa_pos,
            misspec,
            rct,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("sample size must be >= 2, got {}", self.n)));
        }
        if !(self.kappa_pos > 0.0) || !self.kappa_pos.is_finite() {
            return Err(Error::Config(format!(
                "kappa_pos must be positive and finite, got {}",
                self.kappa_pos
            )));
        }
        Ok(())
    }

    /// Seed-independent identifier, e.g. `n1000_k3_high`.
    pub fn id(&self) -> String {
        let mut id = format!("n{}_k{}_{}", self.n, self.kappa_pos, self.misspec);
        if self.rct {
            id.push_str("_rct");
        }
        id
    }

    /// Key of the random stream owned by replication `rep`.
    pub fn replication_key(&self, rep: u64) -> StreamKey {
        StreamKey::new(mix64(self.seed ^ hash_bytes(self.id().as_bytes())), rep)
    }
}

/// Observed data `(W, A, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub w: Matrix,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    /// Generating propensity, when known. Diagnostics only.
    pub true_propensity: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(w: Matrix, a: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            w,
            a,
            y,
            true_propensity: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_treated(&self) -> usize {
        self.a.iter().filter(|&&a| a == 1).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.w.rows() != n || self.a.len() != n {
            return Err(Error::Input(format!(
                "inconsistent lengths: W has {} rows, A has {}, Y has {n}",
                self.w.rows(),
                self.a.len()
            )));
        }
        if let Some(i) = self.a.iter().position(|&a| a > 1) {
            return Err(Error::Input(format!("A[{i}] = {} is not binary", self.a[i])));
        }
        if let Some(i) = self.y.iter().position(|y| !y.is_finite()) {
            return Err(Error::Input(format!("Y[{i}] is not finite")));
        }
        if let Some(i) = self.w.as_slice().iter().position(|w| !w.is_finite()) {
            return Err(Error::Input(format!(
                "W row {} column {} is not finite",
                i / self.w.cols().max(1),
                i % self.w.cols().max(1)
            )));
        }
        if let Some(g) = &self.true_propensity {
            if g.len() != n {
                return Err(Error::Input("true propensity length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Errors if every observation is in the same arm.
    pub fn check_both_arms(&self) -> Result<()> {
        let treated = self.n_treated();
        if treated == 0 {
            return Err(Error::SingleArm { n: self.n(), arm: 0 });
        }
        if treated == self.n() {
            return Err(Error::SingleArm { n: self.n(), arm: 1 });
        }
        Ok(())
    }

    /// Writes `w1..wp,a,y,true_g` with 17 significant digits per real.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let p = self.w.cols();
        let header: Vec<String> = (1..=p).map(|j| format!("w{j}")).collect();
        write!(out, "{},a,y", header.join(","))?;
        if self.true_propensity.is_some() {
            write!(out, ",true_g")?;
        }
        writeln!(out)?;
        for i in 0..self.n() {
            for &v in self.w.row(i) {
                write!(out, "{},", fmt_f64(v))?;
            }
            write!(out, "{},{}", self.a[i], fmt_f64(self.y[i]))?;
            if let Some(g) = &self.true_propensity {
                write!(out, ",{}", fmt_f64(g[i]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Reads a CSV with a header naming covariate columns `w*`, plus `a` and
    /// `y`. A `true_g` column is kept if present; other columns are rejected.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(std::io::BufReader::new(file));
        let parse_err = |line: usize, message: String| Error::Parse {
            path: shown.clone(),
            line,
            message,
        };
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let mut w_cols = Vec::new();
        let (mut a_col, mut y_col, mut g_col) = (None, None, None);
        for (j, h) in headers.iter().enumerate() {
            let h = h.to_ascii_lowercase();
            match h.as_str() {
                "a" => a_col = Some(j),
                "y" => y_col = Some(j),
                "true_g" => g_col = Some(j),
                _ if h.starts_with('w') => w_cols.push(j),
                _ => return Err(parse_err(1, format!("unexpected column '{h}'"))),
            }
        }
        let a_col = a_col.ok_or_else(|| parse_err(1, "missing column 'a'".into()))?;
        let y_col = y_col.ok_or_else(|| parse_err(1, "missing column 'y'".into()))?;
        if w_cols.is_empty() {
            return Err(parse_err(1, "no covariate columns (w*)".into()));
        }
        let p = w_cols.len();
        let (mut w, mut a, mut y, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let num = |j: usize, name: &str| -> Result<f64> {
                let s = rec.get(j).unwrap_or("");
                let v: f64 = s
                    .parse()
                    .map_err(|_| parse_err(line, format!("{name}: cannot parse '{s}' as a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("{name}: value is not finite")));
                }
                Ok(v)
            };
            for &j in &w_cols {
                w.push(num(j, &headers[j])?);
            }
            let av = rec.get(a_col).unwrap_or("");
            a.push(match av {
                "0" | "0.0" => 0u8,
                "1" | "1.0" => 1u8,
                _ => return Err(parse_err(line, format!("a: '{av}' is not binary (0 or 1)"))),
            });
            y.push(num(y_col, "y")?);
            if let Some(j) = g_col {
                g.push(num(j, "true_g")?);
            }
        }
        let n = y.len();
        if n == 0 {
            return Err(parse_err(2, "no data rows".into()));
        }
        let mut ds = Dataset::new(Matrix::from_row_major(n, p, w)?, a, y)?;
        if g_col.is_some() {
            ds.true_propensity = Some(g);
        }
        Ok(ds)
    }
}

/// 17 significant digits, enough for any f64 to round trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `n x 4` covariates, each entry Uniform(-1, 1), drawn row by row.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let data: Vec<f64> = (0..n * N_COVARIATES).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    Matrix::from_row_major(n, N_COVARIATES, data).expect("shape is consistent")
}

/// `expit(kappa (1.5 w1 + 2 w2 - w3 - 2.5 w4))`.
pub fn true_propensity(w: &[f64], kappa_pos: f64) -> f64 {
    let eta: f64 = w.iter().zip(PROPENSITY_COEFS).map(|(x, c)| x * c).sum();
    expit(kappa_pos * eta)
}

/// Untreated mean and treatment effect at `w`.
pub fn outcome_components(w: &[f64], misspec: Misspec) -> (f64, f64) {
    match misspec {
        Misspec::High | Misspec::Moderate => {
            let mu0 = w[0] + w[1].abs() + w[2] + w[3].abs();
            let tau = 3.0 + 2.0 * w[0] - 0.5 * w[1].abs() + 0.5 * w[2] - 2.0 * w[3].abs();
            (mu0, tau)
        }
        Misspec::NearlyCorrect => {
            let mu0 = w[0] + w[1] + w[2] + w[3];
            let tau = 2.0 - 0.5 * w[0].abs();
            (mu0, tau)
        }
    }
}

pub fn true_outcome_mean(w: &[f64], a: u8, misspec: Misspec) -> f64 {
    let (mu0, tau) = outcome_components(w, misspec);
    mu0 + f64::from(a) * tau
}

/// `E[tau(W)]` with `W ~ Uniform(-1,1)^4`, using `E[W_j] = 0`, `E|W_j| = 1/2`.
pub fn true_ate(misspec: Misspec) -> f64 {
    const MEAN_ABS: f64 = 0.5;
    match misspec {
        Misspec::High | Misspec::Moderate => 3.0 - 0.5 * MEAN_ABS - 2.0 * MEAN_ABS,
        Misspec::NearlyCorrect => 2.0 - 0.5 * MEAN_ABS,
    }
}

/// Draws a dataset from an explicit stream. Draw order: all covariates,
/// then all treatment uniforms, then all outcome normals.
pub fn gen_dataset_with<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Result<Dataset> {
    s.validate()?;
    let n = s.n;
    let w = gen_covariates(n, rng);
    let g: Vec<f64> = (0..n)
        .map(|i| {
            if s.rct {
                0.5
            } else {
                true_propensity(w.row(i), s.kappa_pos)
            }
        })
        .collect();
    let a: Vec<u8> = g.iter().map(|&gi| u8::from(rng.random::<f64>() < gi)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            true_outcome_mean(w.row(i), a[i], s.misspec) + NOISE_SD * z
        })
        .collect();
    let ds = Dataset {
        w,
        a,
        y,
        true_propensity: Some(g),
    };
    ds.check_both_arms()?;
    Ok(ds)
}

/// Dataset for replication 0 of the scenario.
pub fn gen_dataset(s: &Scenario) -> Result<Dataset> {
    gen_dataset_with(s, &mut s.replication_key(0).rng())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    /// Emits a constant 64-bit word, so every f64 draw equals 0.75.
    struct Constant;

    impl RngCore for Constant {
        fn next_u32(&mut self) -> u32 {
            0xC000_0000
        }
        fn next_u64(&mut self) -> u64 {
            0xC000_0000_0000_0000
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    #[test]
    fn stubbed_stream_gives_constant_row() {
        let w = gen_covariates(1, &mut Constant);
        assert_eq!(w.row(0), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn propensity_formula() {
        assert_eq!(true_propensity(&[0.0; 4], 2.7), 0.5);
        assert!((true_propensity(&[1.0, 1.0, -1.0, -1.0], 1.0) - 0.999_088_948_805_599_4).abs() < 1e-15);
        let tiny = true_propensity(&[-1.0, -1.0, 1.0, 1.0], 3.0);
        assert!((tiny - (-21.0f64).exp() / (1.0 + (-21.0f64).exp())).abs() < 1e-22);
        assert!((tiny - 7.583e-10).abs() < 1e-12);
    }

    #[test]
    fn outcome_mean_formula() {
        assert_eq!(true_outcome_mean(&[0.0; 4], 1, Misspec::High), 3.0);
        assert_eq!(true_outcome_mean(&[0.0; 4], 0, Misspec::NearlyCorrect), 0.0);
        assert_eq!(true_outcome_mean(&[1.0; 4], 1, Misspec::High), 7.0);
        assert_eq!(true_outcome_mean(&[1.0; 4], 1, Misspec::NearlyCorrect), 5.5);
    }

    #[test]
    fn working_model_columns() {
        assert_eq!(Misspec::High.included_covariates(4), vec![1, 2, 3]);
        assert_eq!(Misspec::Moderate.included_covariates(4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn closed_form_ate() {
        for m in Misspec::ALL {
            assert_eq!(true_ate(m), 1.75);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = Scenario::new(200, 2.0, Misspec::Moderate, false, 99).unwrap();
        assert_eq!(gen_dataset(&s).unwrap(), gen_dataset(&s).unwrap());
        let t = Scenario { seed: 100, ..s.clone() };
        assert_ne!(gen_dataset(&s).unwrap().y, gen_dataset(&t).unwrap().y);
    }

    #[test]
    fn single_arm_is_an_error() {
        let s = Scenario::new(2, 1.0, Misspec::High, true, 0).unwrap();
        // With n = 2 a single-arm draw happens half the time.
        let mut saw = false;
        for rep in 0..64 {
            if let Err(Error::SingleArm { .. }) = gen_dataset_with(&s, &mut s.replication_key(rep).rng()) {
                saw = true;
            }
        }
        assert!(saw);
    }

    #[test]
    fn invalid_scenarios_rejected() {
        assert!(Scenario::new(1, 1.0, Misspec::High, false, 0).is_err());
        assert!(Scenario::new(10, 0.0, Misspec::High, false, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = Scenario::new(50, 3.0, Misspec::High, false, 5).unwrap();
        let ds = gen_dataset(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        assert_eq!(Dataset::read_csv(&path).unwrap(), ds);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "w1,w2,a,y\n0.1,0.2,1,3.0\n0.1,0.2,2,3.0\n").unwrap();
        let err = Dataset::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("not binary"), "{err}");
        std::fs::write(&path, "w1,a,y\n0.1,1,abc\n").unwrap();
        let err = Dataset::read_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}
