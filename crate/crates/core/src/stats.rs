//! Summary statistics and the pooled two-sample t-test.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, libm::sqrt(ss / (n - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p_value: f64,
    /// Zero pooled variance with unequal means: `t` is infinite.
    pub degenerate: bool,
    pub mean_a: f64,
    pub mean_b: f64,
}

/// Student's two-sample t-test with pooled variance, `df = n_a + n_b - 2`.
pub fn compare_models(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("t-test samples must be finite".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let df = a.len() + b.len() - 2;
    let pooled = ((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / df as f64;
    let diff = ma - mb;
    let se = libm::sqrt(pooled * (1.0 / na + 1.0 / nb));
    let base = TTest {
        t: 0.0,
        df,
        p_value: 1.0,
        degenerate: false,
        mean_a: ma,
        mean_b: mb,
    };
    if se == 0.0 {
        if diff == 0.0 {
            return Ok(base);
        }
        return Ok(TTest {
            t: if diff > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            p_value: 0.0,
            degenerate: true,
            ..base
        });
    }
    let t = diff / se;
    Ok(TTest {
        t,
        p_value: student_two_sided_p(t, df as f64),
        ..base
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..500 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook form: t = (ma - mb) / sqrt(sp2 (1/na + 1/nb)), computed from raw sums.
    fn oracle_t(a: &[f64], b: &[f64]) -> f64 {
        let sum = |x: &[f64]| x.iter().sum::<f64>();
        let sumsq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let ssa = sumsq(a) - sum(a) * sum(a) / na;
        let ssb = sumsq(b) - sum(b) * sum(b) / nb;
        let sp2 = (ssa + ssb) / (na + nb - 2.0);
        (sum(a) / na - sum(b) / nb) / libm::sqrt(sp2 * (1.0 / na + 1.0 / nb))
    }

    #[test]
    fn identical_samples() {
        let a = [0.8, 0.7, 0.9, 0.75, 0.85];
        let r = compare_models(&a, &a).unwrap();
        assert_eq!((r.t, r.df, r.p_value, r.degenerate), (0.0, 8, 1.0, false));
    }

    #[test]
    fn constant_unequal_samples_are_degenerate() {
        let r = compare_models(&[0.9; 5], &[0.5; 5]).unwrap();
        assert!(r.degenerate && r.t == f64::INFINITY && r.p_value == 0.0);
        assert_eq!(r.df, 8);
        let r = compare_models(&[0.5; 5], &[0.9; 5]).unwrap();
        assert_eq!(r.t, f64::NEG_INFINITY);
        let r = compare_models(&[0.5; 5], &[0.5; 5]).unwrap();
        assert!(!r.degenerate && r.t == 0.0 && r.p_value == 1.0);
    }

    #[test]
    fn matches_reference_values() {
        // Reference p-values from an independent statistics package (Student, pooled).
        let a = [0.91, 0.88, 0.93, 0.90, 0.89];
        let b = [0.85, 0.87, 0.84, 0.86, 0.83];
        let r = compare_models(&a, &b).unwrap();
        assert!((r.t - oracle_t(&a, &b)).abs() < 1e-12);
        assert!((r.t - 4.669_737_852_696_137).abs() < 1e-9, "{}", r.t);
        assert!((r.p_value - 0.001_603_062_184_473_832).abs() < 1e-9, "{}", r.p_value);

        let a = [0.62, 0.71, 0.55, 0.80, 0.66];
        let b = [0.60, 0.58, 0.70, 0.52, 0.61];
        let r = compare_models(&a, &b).unwrap();
        assert!((r.t - oracle_t(&a, &b)).abs() < 1e-12);
        assert!((r.t - 1.289_909_123_240_273).abs() < 1e-9, "{}", r.t);
        assert!((r.p_value - 0.233_118_169_372_257_3).abs() < 1e-9, "{}", r.p_value);
    }

    #[test]
    fn beta_edges() {
        assert_eq!(regularized_beta(0.0, 2.0, 3.0), 0.0);
        assert_eq!(regularized_beta(1.0, 2.0, 3.0), 1.0);
        // I_x(1, 1) = x.
        assert!((regularized_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-14);
        // t with df=1 is Cauchy: P(|T| >= 1) = 0.5.
        assert!((student_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_std_uses_sample_denominator() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - libm::sqrt(5.0 / 3.0)).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn rejects_short_samples() {
        assert!(compare_models(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn antisymmetric(a in proptest::collection::vec(0.0f64..1.0, 5),
                         b in proptest::collection::vec(0.0f64..1.0, 5)) {
            let ab = compare_models(&a, &b).unwrap();
            let ba = compare_models(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert_eq!(ab.p_value, ba.p_value);
            prop_assert_eq!(ab.df, 8);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }
}
