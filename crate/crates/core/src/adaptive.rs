//! Lepski-type selection of the truncation constant with a brake envelope.
//!
//! The walk starts at the strongest truncation `c_K` and moves one level at a
//! time toward weaker truncation. A move to `c_{k-1}` requires that its
//! estimate stays inside the envelope around `psi(c_K)` (the brake) and that
//! its whole interval moved in the direction of the estimate (the Lepski
//! condition). The first failed check stops the walk at the current level.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::variance::{wald_ci_value, ConfidenceInterval, VarianceMethod};

pub const DEFAULT_BRAKE_MULTIPLIER: f64 = 1.0;

/// Which variance feeds the selector's intervals and its envelope radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarianceSource {
    EIFb,
    MCb,
    TBb,
}

impl VarianceSource {
    pub const ALL: [VarianceSource; 3] = [VarianceSource::EIFb, VarianceSource::MCb, VarianceSource::TBb];

    pub fn as_str(&self) -> &'static str {
        match self {
            VarianceSource::EIFb => "EIFb",
            VarianceSource::MCb => "MCb",
            VarianceSource::TBb => "TBb",
        }
    }

    pub fn variance_method(&self) -> VarianceMethod {
        match self {
            VarianceSource::EIFb => VarianceMethod::EIF,
            VarianceSource::MCb => VarianceMethod::MC,
            VarianceSource::TBb => VarianceMethod::TB,
        }
    }
}

impl fmt::Display for VarianceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VarianceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eifb" => Ok(VarianceSource::EIFb),
            "mcb" => Ok(VarianceSource::MCb),
            "tbb" => Ok(VarianceSource::TBb),
            other => Err(Error::Config(format!(
                "unknown selector '{other}' (expected EIFb, MCb or TBb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLevel {
    pub c: f64,
    pub psi: f64,
    pub variance: f64,
    pub ci: ConfidenceInterval,
}

/// Estimates along an ascending grid of truncation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationPath {
    pub levels: Vec<PathLevel>,
    pub source: VarianceSource,
}

impl TruncationPath {
    /// Builds Wald intervals from `(c, psi, variance)` triples.
    pub fn new(grid: &[f64], psis: &[f64], variances: &[f64], source: VarianceSource) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Input("truncation path is empty".into()));
        }
        if psis.len() != grid.len() || variances.len() != grid.len() {
            return Err(Error::Input("truncation path lengths differ".into()));
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("truncation grid must be strictly ascending".into()));
        }
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Input(format!("path variance {v} is not a nonnegative number")));
        }
        let levels = grid
            .iter()
            .zip(psis)
            .zip(variances)
            .map(|((&c, &psi), &variance)| PathLevel {
                c,
                psi,
                variance,
                ci: wald_ci_value(psi, variance),
            })
            .collect();
        Ok(Self { levels, source })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.c).collect()
    }

    fn anchor(&self) -> &PathLevel {
        self.levels.last().expect("path is nonempty")
    }
}

/// `{theta : |theta - center| <= radius}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrakeEnvelope {
    pub center: f64,
    pub radius: f64,
    pub z_multiplier: f64,
}

impl BrakeEnvelope {
    pub fn contains(&self, theta: f64) -> bool {
        (theta - self.center).abs() <= self.radius
    }

    /// Envelope that never brakes; plain Lepski.
    pub fn unbounded(center: f64) -> Self {
        Self {
            center,
            radius: f64::INFINITY,
            z_multiplier: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    LepskiStop,
    BrakeStop,
    GridExhausted,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::LepskiStop => "lepski",
            StopReason::BrakeStop => "brake",
            StopReason::GridExhausted => "exhausted",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lepski" => Ok(StopReason::LepskiStop),
            "brake" => Ok(StopReason::BrakeStop),
            "exhausted" => Ok(StopReason::GridExhausted),
            other => Err(Error::Input(format!("unknown stop reason '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionResult {
    pub chosen_c: f64,
    pub chosen_index: usize,
    pub chosen_psi: f64,
    pub chosen_ci: ConfidenceInterval,
    pub stop_reason: StopReason,
    pub variance_source: VarianceSource,
}

/// Lepski condition for moving from `current` to the next weaker level.
/// Equal estimates never move.
pub fn lepski_move_allowed(current: (f64, &ConfidenceInterval), next: (f64, &ConfidenceInterval)) -> bool {
    let (psi_cur, ci_cur) = current;
    let (psi_next, ci_next) = next;
    (psi_next < psi_cur && ci_next.upper <= ci_cur.upper) || (psi_next > psi_cur && ci_next.lower >= ci_cur.lower)
}

/// Envelope centered at `psi(c_K)` with radius
/// `multiplier * sqrt(ln n) * sqrt(V(c_K))`.
pub fn build_envelope(path: &TruncationPath, n: usize, multiplier: f64) -> BrakeEnvelope {
    let anchor = path.anchor();
    let z = multiplier * (n as f64).ln().sqrt();
    let radius = if multiplier == 0.0 || anchor.variance == 0.0 {
        0.0
    } else {
        z * anchor.variance.sqrt()
    };
    BrakeEnvelope {
        center: anchor.psi,
        radius,
        z_multiplier: multiplier,
    }
}

pub fn select_truncation(path: &TruncationPath, env: &BrakeEnvelope) -> SelectionResult {
    let levels = &path.levels;
    let mut k = levels.len() - 1;
    let stop_reason = loop {
        if k == 0 {
            break StopReason::GridExhausted;
        }
        let (cur, next) = (&levels[k], &levels[k - 1]);
        if !env.contains(next.psi) {
            break StopReason::BrakeStop;
        }
        if !lepski_move_allowed((cur.psi, &cur.ci), (next.psi, &next.ci)) {
            break StopReason::LepskiStop;
        }
        k -= 1;
    };
    let chosen = &levels[k];
    SelectionResult {
        chosen_c: chosen.c,
        chosen_index: k,
        chosen_psi: chosen.psi,
        chosen_ci: chosen.ci,
        stop_reason,
        variance_source: path.source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ci(lo: f64, hi: f64) -> ConfidenceInterval {
        ConfidenceInterval {
            lower: lo,
            upper: hi,
            level: 0.95,
        }
    }

    #[test]
    fn lepski_rule_examples() {
        assert!(lepski_move_allowed((1.0, &ci(0.8, 1.2)), (1.5, &ci(1.25, 1.75))));
        assert!(!lepski_move_allowed((1.0, &ci(0.8, 1.2)), (1.1, &ci(0.7, 1.5))));
        assert!(!lepski_move_allowed((1.0, &ci(0.8, 1.2)), (1.0, &ci(0.9, 1.1))));
        // Downward move with the upper end not increasing.
        assert!(lepski_move_allowed((1.0, &ci(0.8, 1.2)), (0.5, &ci(0.1, 1.2))));
    }

    #[test]
    fn envelope_examples() {
        let path = TruncationPath::new(&[1.0, 2.0], &[0.0, 1.0], &[0.1, 0.04], VarianceSource::EIFb).unwrap();
        let env = build_envelope(&path, 1000, 1.0);
        assert_eq!(env.center, 1.0);
        // sqrt(ln 1000) * 0.2
        assert!((env.radius - 0.525_652_2).abs() < 1e-6, "{}", env.radius);
        assert!(env.contains(env.center));
        assert_eq!(build_envelope(&path, 1000, 0.0).radius, 0.0);
        let flat = TruncationPath::new(&[1.0, 2.0], &[0.0, 1.0], &[0.1, 0.0], VarianceSource::EIFb).unwrap();
        assert_eq!(build_envelope(&flat, 1000, 1.0).radius, 0.0);
    }

    #[test]
    fn identical_estimates_stop_at_anchor() {
        let grid: Vec<f64> = (1..=10).map(f64::from).collect();
        let path = TruncationPath::new(&grid, &[2.0; 10], &[0.01; 10], VarianceSource::EIFb).unwrap();
        let sel = select_truncation(&path, &build_envelope(&path, 1000, 1.0));
        assert_eq!(sel.stop_reason, StopReason::LepskiStop);
        assert_eq!(sel.chosen_c, 10.0);
        assert_eq!(sel.chosen_index, 9);
    }

    #[test]
    fn nested_upward_path_exhausts_grid() {
        // psi decreases in c, so walking toward c_1 moves upward; with equal
        // variances each lower end rises with the estimate.
        let grid = [1.0, 2.0, 3.0, 4.0];
        let psis = [4.0, 3.0, 2.0, 1.0];
        let vars = [0.01; 4];
        let path = TruncationPath::new(&grid, &psis, &vars, VarianceSource::TBb).unwrap();
        let env = BrakeEnvelope {
            center: 1.0,
            radius: 1e6,
            z_multiplier: 1.0,
        };
        let sel = select_truncation(&path, &env);
        assert_eq!(sel.stop_reason, StopReason::GridExhausted);
        assert_eq!(sel.chosen_c, 1.0);
        assert_eq!(sel.variance_source, VarianceSource::TBb);
    }

    #[test]
    fn brake_stops_before_lepski() {
        // Hand trace, SE = 0.1 everywhere so CIs are psi +- 0.196; n = 1000,
        // multiplier 1 gives radius 0.26283 around psi(c4) = 1.0.
        //   c4 -> c3: psi 1.25, inside (|0.25| <= 0.2628); CI [1.054, 1.446]
        //             lower 1.054 >= 0.804, moves.
        //   c3 -> c2: psi 1.5 outside (|0.5| > 0.2628) although Lepski
        //             (lower 1.304 >= 1.054) would allow it: brake at c3.
        let path = TruncationPath::new(
            &[1.0, 2.0, 3.0, 4.0],
            &[1.75, 1.5, 1.25, 1.0],
            &[0.01; 4],
            VarianceSource::EIFb,
        )
        .unwrap();
        let env = build_envelope(&path, 1000, 1.0);
        assert!(lepski_move_allowed(
            (path.levels[2].psi, &path.levels[2].ci),
            (path.levels[1].psi, &path.levels[1].ci)
        ));
        let sel = select_truncation(&path, &env);
        assert_eq!(sel.stop_reason, StopReason::BrakeStop);
        assert_eq!(sel.chosen_index, 2);
        assert_eq!(sel.chosen_c, 3.0);
        assert_eq!(sel.chosen_psi, 1.25);
    }

    #[test]
    fn single_level_grid() {
        let path = TruncationPath::new(&[5.0], &[1.0], &[0.1], VarianceSource::EIFb).unwrap();
        let sel = select_truncation(&path, &build_envelope(&path, 500, 1.0));
        assert_eq!(sel.stop_reason, StopReason::GridExhausted);
        assert_eq!(sel.chosen_c, 5.0);
    }

    #[test]
    fn grid_must_ascend() {
        assert!(TruncationPath::new(&[2.0, 1.0], &[0.0, 0.0], &[0.1, 0.1], VarianceSource::EIFb).is_err());
    }

    fn arb_path() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|k| {
            (
                proptest::collection::vec(-2.0f64..2.0, k),
                proptest::collection::vec(0.0f64..0.5, k),
            )
        })
    }

    proptest! {
        #[test]
        fn selector_properties((psis, vars) in arb_path(), m1 in 0.0f64..3.0, dm in 0.0f64..3.0) {
            let grid: Vec<f64> = (1..=psis.len()).map(|c| c as f64).collect();
            let path = TruncationPath::new(&grid, &psis, &vars, VarianceSource::EIFb).unwrap();
            let env = build_envelope(&path, 1000, m1);
            let sel = select_truncation(&path, &env);

            // Admissibility: chosen estimate lies in the envelope.
            prop_assert!(env.contains(sel.chosen_psi) || sel.chosen_index == grid.len() - 1);
            // Determinism.
            prop_assert_eq!(sel, select_truncation(&path, &env));
            // Removing the brake never selects stronger truncation.
            let free = select_truncation(&path, &BrakeEnvelope::unbounded(env.center));
            prop_assert!(free.chosen_c <= sel.chosen_c);
            // A larger multiplier never increases the chosen constant.
            let wider = select_truncation(&path, &build_envelope(&path, 1000, m1 + dm));
            prop_assert!(wider.chosen_c <= sel.chosen_c);
        }
    }
}
