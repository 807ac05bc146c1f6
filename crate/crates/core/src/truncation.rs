//! Lower truncation of both arm probabilities at `b = c / (sqrt(n) ln n)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationSpec {
    pub c: f64,
    pub n: usize,
    pub bound: f64,
}

impl TruncationSpec {
    pub fn new(c: f64, n: usize) -> Result<Self> {
        Ok(Self {
            c,
            n,
            bound: trunc_bound(c, n)?,
        })
    }
}

/// `c / (sqrt(n) ln n)`, rejected unless it lies in `(0, 0.5)`.
pub fn trunc_bound(c: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Config(format!("truncation needs n >= 3, got {n}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Config(format!("truncation constant must be positive, got {c}")));
    }
    let nf = n as f64;
    let b = c / (nf.sqrt() * nf.ln());
    if b >= 0.5 {
        return Err(Error::Config(format!(
            "truncation bound {b:.4} for c = {c}, n = {n} is not below 0.5"
        )));
    }
    Ok(b)
}

/// Arm probabilities after truncation. `g1 + g0` may exceed one.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedPropensity {
    pub g1: Vec<f64>,
    pub g0: Vec<f64>,
    pub activated_1: usize,
    pub activated_0: usize,
}

impl TruncatedPropensity {
    pub fn len(&self) -> usize {
        self.g1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g1.is_empty()
    }

    /// `g_a(W_i)` for arm `a`.
    #[inline]
    pub fn arm(&self, arm: u8) -> &[f64] {
        if arm == 1 {
            &self.g1
        } else {
            &self.g0
        }
    }

    /// Untruncated view, `g0 = 1 - g1`.
    pub fn untruncated(g1_hat: &[f64]) -> Self {
        Self {
            g1: g1_hat.to_vec(),
            g0: g1_hat.iter().map(|g| 1.0 - g).collect(),
            activated_1: 0,
            activated_0: 0,
        }
    }
}

pub fn apply_truncation(g1_hat: &[f64], spec: &TruncationSpec) -> TruncatedPropensity {
    apply_bound(g1_hat, spec.bound)
}

fn apply_bound(g1_hat: &[f64], b: f64) -> TruncatedPropensity {
    let mut out = TruncatedPropensity {
        g1: Vec::with_capacity(g1_hat.len()),
        g0: Vec::with_capacity(g1_hat.len()),
        activated_1: 0,
        activated_0: 0,
    };
    for &g in g1_hat {
        let g0 = 1.0 - g;
        if g < b {
            out.activated_1 += 1;
        }
        if g0 < b {
            out.activated_0 += 1;
        }
        out.g1.push(g.max(b));
        out.g0.push(g0.max(b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig4(x: f64) -> f64 {
        let mag = 10f64.powf(x.abs().log10().floor() - 3.0);
        (x / mag).round() * mag
    }

    #[test]
    fn bounds_at_n_1000() {
        assert_eq!(sig4(trunc_bound(1.0, 1000).unwrap()), sig4(0.004578));
        assert_eq!(sig4(trunc_bound(2.0, 1000).unwrap()), sig4(0.009156));
        assert_eq!(sig4(trunc_bound(5.0, 1000).unwrap()), sig4(0.022890));
    }

    #[test]
    fn bound_validation() {
        assert!(trunc_bound(1.0, 2).is_err());
        assert!(trunc_bound(0.0, 100).is_err());
        assert!(trunc_bound(10.0, 3).is_err());
    }

    #[test]
    fn rule_examples() {
        let t = apply_bound(&[0.001, 0.5, 0.999], 0.0229);
        assert_eq!(t.g1[0], 0.0229);
        assert!((t.g0[0] - 0.999).abs() < 1e-15);
        assert_eq!((t.g1[1], t.g0[1]), (0.5, 0.5));
        assert_eq!(t.g1[2], 0.999);
        assert_eq!(t.g0[2], 0.0229);
        assert_eq!((t.activated_1, t.activated_0), (1, 1));
    }

    proptest! {
        #[test]
        fn idempotent_monotone_and_inert(
            g in proptest::collection::vec(1e-9f64..(1.0 - 1e-9), 1..50),
            c in 0.5f64..10.0,
            dc in 0.0f64..5.0,
        ) {
            let spec = TruncationSpec::new(c, 1000).unwrap();
            let once = apply_truncation(&g, &spec);
            let twice = apply_bound(&once.g1, spec.bound);
            prop_assert_eq!(&twice.g1, &once.g1);
            // Reapplying to g0 directly is also a no-op.
            for (a, b) in once.g0.iter().zip(&once.g0) {
                prop_assert_eq!(a.max(spec.bound), *b);
            }
            prop_assert!(once.g1.iter().chain(&once.g0).all(|&v| v >= spec.bound));

            let wider = apply_truncation(&g, &TruncationSpec::new(c + dc, 1000).unwrap());
            for i in 0..g.len() {
                prop_assert!(wider.g1[i] >= once.g1[i]);
                prop_assert!(wider.g0[i] >= once.g0[i]);
            }

            if g.iter().all(|&v| v >= spec.bound && 1.0 - v >= spec.bound) {
                prop_assert_eq!(once.activated_1 + once.activated_0, 0);
                prop_assert_eq!(&once.g1, &g);
            }
        }
    }
}
