#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use rand::Rng;
use tmletrunc::adaptive::{
    build_envelope, lepski_move_allowed, select_truncation, BrakeEnvelope, StopReason, TruncationPath, VarianceSource,
};
use tmletrunc::datagen::{expit, gen_dataset, logit, Misspec, Scenario};
use tmletrunc::nuisance::NuisanceFits;
use tmletrunc::rng::StreamKey;
use tmletrunc::targeting::{
    fluctuate_gh_linear, fluctuate_gh_logit, fluctuate_gwt_linear, fluctuate_gwt_logit, tmle_fit, Link, Strategy,
};
use tmletrunc::truncation::{TruncatedPropensity, TruncationSpec};

pub type Check = Result<String, String>;

pub const STRATEGIES: [Strategy; 2] = [Strategy::GH, Strategy::GWT];
pub const LINKS: [Link; 2] = [Link::Logit, Link::Linear];

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Random datasets with `n` in `[20, 200]`; every strategy and link must
/// solve the efficient score equation and both arm scores.
pub fn score_equation_property(cases: usize) -> Check {
    let key = StreamKey::new(0x5c0e, 0);
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst_eif = 0.0f64;
    let mut worst_arm = 0.0f64;
    for case in 0..cases as u64 {
        let mut rng = key.with_index(case).rng();
        let n = rng.random_range(20..=200usize);
        let kappa = [1.0, 2.0, 3.0][rng.random_range(0..3usize)];
        let misspec = Misspec::ALL[rng.random_range(0..3usize)];
        let rct = rng.random_bool(0.2);
        let c = rng.random_range(0.5..10.0);
        let seed = rng.random::<u64>();
        let s = Scenario::new(n, kappa, misspec, rct, seed).map_err(|e| e.to_string())?;
        let ds = gen_dataset(&s).map_err(|e| e.to_string())?;
        // Single-arm or separated draws are outside the property's domain.
        let Ok(nuis) = NuisanceFits::fit(&ds, &misspec.included_covariates(4)) else {
            skipped += 1;
            continue;
        };
        let Ok(spec) = TruncationSpec::new(c, n) else {
            skipped += 1;
            continue;
        };
        for strategy in STRATEGIES {
            for link in LINKS {
                let fit = tmle_fit(&ds, &nuis, &spec, strategy, link).map_err(|e| e.to_string())?;
                let mean_eif = fit.eif.iter().sum::<f64>() / n as f64;
                let g1: Vec<f64> = nuis.propensity.fitted_g1.clone();
                let g = tmletrunc::truncation::apply_truncation(&g1, &spec);
                // Arm scores on the fitting scale.
                let to_fit = |v: f64| match link {
                    Link::Logit => nuis.scaling.scale(v),
                    Link::Linear => v,
                };
                let mut s1 = 0.0;
                let mut s0 = 0.0;
                for i in 0..n {
                    if ds.a[i] == 1 {
                        s1 += (to_fit(ds.y[i]) - to_fit(fit.q1_star[i])) / g.g1[i];
                    } else {
                        s0 += (to_fit(ds.y[i]) - to_fit(fit.q0_star[i])) / g.g0[i];
                    }
                }
                let (s1, s0) = (s1 / n as f64, s0 / n as f64);
                worst_eif = worst_eif.max(mean_eif.abs());
                worst_arm = worst_arm.max(s1.abs()).max(s0.abs());
                ensure!(
                    mean_eif.abs() < 1e-8,
                    "case {case} ({strategy}, {link}, n={n}): mean D* = {mean_eif:e}"
                );
                ensure!(
                    s1.abs() < 1e-6 && s0.abs() < 1e-6,
                    "case {case} ({strategy}, {link}, n={n}): arm scores {s1:e}, {s0:e}"
                );
            }
        }
        checked += 1;
    }
    ensure!(
        checked * 10 >= cases * 9,
        "only {checked} of {cases} datasets were usable"
    );
    Ok(format!(
        "{checked} datasets x 4 fits ({skipped} skipped), max |mean D*| {worst_eif:.1e}, max |arm score| {worst_arm:.1e}"
    ))
}

/// Golden-section minimizer on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

pub struct Fixture {
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    pub q: Vec<f64>,
    pub g1: Vec<f64>,
}

/// Eight observations on the unit scale with overlapping arms.
pub fn fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            a: vec![1, 0, 1, 0, 1, 1, 0, 0],
            y: vec![0.9, 0.2, 0.6, 0.4, 0.75, 0.3, 0.1, 0.55],
            q: vec![0.7, 0.3, 0.5, 0.35, 0.6, 0.45, 0.25, 0.4],
            g1: vec![0.8, 0.3, 0.55, 0.2, 0.9, 0.65, 0.1, 0.45],
        },
        Fixture {
            a: vec![0, 1, 1, 0, 0, 1, 0, 1],
            y: vec![0.05, 0.95, 0.5, 0.6, 0.35, 0.15, 0.8, 0.7],
            q: vec![0.2, 0.6, 0.65, 0.5, 0.3, 0.4, 0.55, 0.5],
            g1: vec![0.02, 0.97, 0.5, 0.4, 0.15, 0.6, 0.7, 0.05],
        },
        Fixture {
            a: vec![1, 1, 0, 0, 1, 0, 1, 0],
            y: vec![0.4, 0.45, 0.5, 0.55, 0.42, 0.48, 0.47, 0.52],
            q: vec![0.9, 0.85, 0.1, 0.2, 0.8, 0.15, 0.95, 0.05],
            g1: vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        },
    ]
}

pub fn propensity(g1: &[f64]) -> TruncatedPropensity {
    TruncatedPropensity {
        g1: g1.to_vec(),
        g0: g1.iter().map(|g| 1.0 - g).collect(),
        activated_1: 0,
        activated_0: 0,
    }
}

fn arm_loss(fx: &Fixture, g: &TruncatedPropensity, arm: u8, strategy: Strategy, eps: f64) -> f64 {
    let ga = g.arm(arm);
    let mut loss = 0.0;
    for i in 0..fx.a.len() {
        if fx.a[i] != arm {
            continue;
        }
        let (w, h) = match strategy {
            Strategy::GH => (1.0, 1.0 / ga[i]),
            Strategy::GWT => (1.0 / ga[i], 1.0),
        };
        let p = expit(logit(fx.q[i]) + eps * h);
        loss -= w * (fx.y[i] * p.ln() + (1.0 - fx.y[i]) * (1.0 - p).ln());
    }
    loss
}

/// Brute-force and closed-form oracles for the fluctuation step.
pub fn oracle_equivalence() -> Check {
    let mut worst_logit = 0.0f64;
    let mut worst_linear = 0.0f64;
    let mut worst_const = 0.0f64;
    for (k, fx) in fixtures().iter().enumerate() {
        let g = propensity(&fx.g1);
        for strategy in STRATEGIES {
            let fit = match strategy {
                Strategy::GH => fluctuate_gh_logit(&fx.q, &fx.y, &fx.a, &g),
                Strategy::GWT => fluctuate_gwt_logit(&fx.q, &fx.y, &fx.a, &g),
            }
            .map_err(|e| e.to_string())?;
            ensure!(fit.converged, "fixture {k} {strategy}: logit fit did not converge");
            for arm in [1u8, 0] {
                let oracle = golden_section(|e| arm_loss(fx, &g, arm, strategy, e), -20.0, 20.0, 1e-11);
                let d = (fit.eps(arm) - oracle).abs();
                worst_logit = worst_logit.max(d);
                ensure!(
                    d < 1e-6,
                    "fixture {k} {strategy} arm {arm}: eps {} vs oracle {oracle}",
                    fit.eps(arm)
                );
            }

            // Linear link: weighted least squares through the origin.
            let lin = match strategy {
                Strategy::GH => fluctuate_gh_linear(&fx.q, &fx.y, &fx.a, &g),
                Strategy::GWT => fluctuate_gwt_linear(&fx.q, &fx.y, &fx.a, &g),
            }
            .map_err(|e| e.to_string())?;
            for arm in [1u8, 0] {
                let ga = g.arm(arm);
                let (mut num, mut den) = (0.0, 0.0);
                for i in (0..8).filter(|&i| fx.a[i] == arm) {
                    let (w, h) = match strategy {
                        Strategy::GH => (1.0, 1.0 / ga[i]),
                        Strategy::GWT => (1.0 / ga[i], 1.0),
                    };
                    num += w * h * (fx.y[i] - fx.q[i]);
                    den += w * h * h;
                }
                let d = (lin.eps(arm) - num / den).abs();
                worst_linear = worst_linear.max(d);
                ensure!(
                    d < 1e-10,
                    "fixture {k} {strategy} linear arm {arm}: {} vs {}",
                    lin.eps(arm),
                    num / den
                );
            }
        }

        // Constant propensity: both strategies give the same update.
        let gc = propensity(&[0.35; 8]);
        for link in LINKS {
            let (gh, gwt) = match link {
                Link::Logit => (
                    fluctuate_gh_logit(&fx.q, &fx.y, &fx.a, &gc),
                    fluctuate_gwt_logit(&fx.q, &fx.y, &fx.a, &gc),
                ),
                Link::Linear => (
                    fluctuate_gh_linear(&fx.q, &fx.y, &fx.a, &gc),
                    fluctuate_gwt_linear(&fx.q, &fx.y, &fx.a, &gc),
                ),
            };
            let (gh, gwt) = (gh.map_err(|e| e.to_string())?, gwt.map_err(|e| e.to_string())?);
            for (arm, ga) in [(1u8, 0.35), (0u8, 0.65)] {
                let d = (gh.eps(arm) / ga - gwt.eps(arm)).abs();
                worst_const = worst_const.max(d);
                ensure!(
                    d < 1e-8,
                    "fixture {k} {link} arm {arm}: gH update {} vs gWt {}",
                    gh.eps(arm) / ga,
                    gwt.eps(arm)
                );
            }
        }
    }
    Ok(format!(
        "logit vs golden section {worst_logit:.1e}, linear vs closed form {worst_linear:.1e}, gH vs gWt at constant g {worst_const:.1e}"
    ))
}

fn wald(psi: f64, var: f64) -> (f64, f64) {
    let h = 1.96 * var.sqrt();
    (psi - h, psi + h)
}

/// Constructed paths with hand-traced answers plus randomized invariants.
pub fn selector_suite(cases: usize) -> Check {
    let grid10: Vec<f64> = (1..=10).map(f64::from).collect();
    let err = |e: tmletrunc::Error| e.to_string();

    let flat = TruncationPath::new(&grid10, &[2.0; 10], &[0.01; 10], VarianceSource::EIFb).map_err(err)?;
    let sel = select_truncation(&flat, &build_envelope(&flat, 1000, 1.0));
    ensure!(
        sel.stop_reason == StopReason::LepskiStop && sel.chosen_c == 10.0,
        "flat path: {:?} at c={}",
        sel.stop_reason,
        sel.chosen_c
    );

    let nested = TruncationPath::new(
        &[1.0, 2.0, 3.0, 4.0],
        &[4.0, 3.0, 2.0, 1.0],
        &[0.01; 4],
        VarianceSource::EIFb,
    )
    .map_err(err)?;
    let sel = select_truncation(
        &nested,
        &BrakeEnvelope {
            center: 1.0,
            radius: 1e6,
            z_multiplier: 1.0,
        },
    );
    ensure!(
        sel.stop_reason == StopReason::GridExhausted && sel.chosen_c == 1.0,
        "nested path: {:?} at c={}",
        sel.stop_reason,
        sel.chosen_c
    );

    // SE 0.1 everywhere, radius sqrt(ln 1000) * 0.1 = 0.2628 around 1.0.
    // Level 3 (psi 1.25) is admissible and Lepski-allowed; level 2
    // (psi 1.5) passes Lepski but leaves the envelope.
    let braked = TruncationPath::new(
        &[1.0, 2.0, 3.0, 4.0],
        &[1.75, 1.5, 1.25, 1.0],
        &[0.01; 4],
        VarianceSource::EIFb,
    )
    .map_err(err)?;
    let env = build_envelope(&braked, 1000, 1.0);
    ensure!((env.radius - 0.262_826_1).abs() < 1e-6, "radius {}", env.radius);
    let l = &braked.levels;
    ensure!(
        lepski_move_allowed((l[2].psi, &l[2].ci), (l[1].psi, &l[1].ci)),
        "constructed path: Lepski should allow the blocked move"
    );
    let sel = select_truncation(&braked, &env);
    ensure!(
        sel.stop_reason == StopReason::BrakeStop && sel.chosen_c == 3.0 && sel.chosen_psi == 1.25,
        "braked path: {:?} at c={}",
        sel.stop_reason,
        sel.chosen_c
    );
    let (lo, hi) = wald(1.25, 0.01);
    ensure!(
        sel.chosen_ci.lower == lo && sel.chosen_ci.upper == hi,
        "braked path interval [{}, {}]",
        sel.chosen_ci.lower,
        sel.chosen_ci.upper
    );

    let key = StreamKey::new(0x5e1e, 0);
    for case in 0..cases as u64 {
        let mut rng = key.with_index(case).rng();
        let k = rng.random_range(2..=12usize);
        let grid: Vec<f64> = (1..=k).map(|c| c as f64).collect();
        let psis: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.5)).collect();
        let m = rng.random_range(0.0..3.0);
        let dm = rng.random_range(0.0..3.0);
        let n = rng.random_range(50..5000usize);
        let path = TruncationPath::new(&grid, &psis, &vars, VarianceSource::TBb).map_err(err)?;
        let env = build_envelope(&path, n, m);
        let sel = select_truncation(&path, &env);
        ensure!(
            env.contains(sel.chosen_psi) || sel.chosen_index == k - 1,
            "case {case}: chosen psi outside the envelope"
        );
        ensure!(sel == select_truncation(&path, &env), "case {case}: not deterministic");
        let free = select_truncation(&path, &BrakeEnvelope::unbounded(env.center));
        ensure!(
            free.chosen_c <= sel.chosen_c,
            "case {case}: removing the brake increased c"
        );
        let wider = select_truncation(&path, &build_envelope(&path, n, m + dm));
        ensure!(
            wider.chosen_c <= sel.chosen_c,
            "case {case}: larger multiplier increased c"
        );
    }
    Ok(format!(
        "3 constructed paths exact, {cases} random paths satisfy admissibility, monotonicity, determinism"
    ))
}
