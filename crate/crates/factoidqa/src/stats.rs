//! Statistical helpers: means over evaluation batches and the paired
//! two-sided Student t-test used to compare systems across batches.
//!
//! The t-distribution tail is computed through the regularized incomplete
//! beta function, with ln-gamma via the Lanczos series and the continued
//! fraction evaluated by Lentz's method.

use crate::error::{Error, Result};

const INC_BETA_EPS: f64 = 1e-14;
const INC_BETA_FPMIN: f64 = 1e-300;
const INC_BETA_MAX_ITER: usize = 300;

/// Natural log of the gamma function, Lanczos approximation (g = 5, 6 terms).
/// Accurate to better than 1e-10 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::numerical(format!(
            "inc_beta requires positive shape parameters, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::numerical(format!(
            "inc_beta requires x in [0, 1], got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // The continued fraction converges rapidly for x < (a + 1) / (a + b + 2);
    // otherwise use the symmetry relation.
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Continued fraction for the incomplete beta function, evaluated with the
/// modified Lentz algorithm.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < INC_BETA_FPMIN {
        d = INC_BETA_FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=INC_BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < INC_BETA_FPMIN {
            d = INC_BETA_FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < INC_BETA_FPMIN {
            c = INC_BETA_FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < INC_BETA_FPMIN {
            d = INC_BETA_FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < INC_BETA_FPMIN {
            c = INC_BETA_FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < INC_BETA_EPS {
            return Ok(h);
        }
    }
    Err(Error::numerical(format!(
        "incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}"
    )))
}

/// P(T <= t) for a Student t variable with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::numerical("student_t_cdf requires df >= 1"));
    }
    let dff = df as f64;
    let x = dff / (dff + t * t);
    let tail = 0.5 * inc_beta(dff / 2.0, 0.5, x)?;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// Two-sided p-value P(|T| >= |t|) for a Student t variable.
pub fn student_t_two_sided_p(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::numerical("student_t_two_sided_p requires df >= 1"));
    }
    let dff = df as f64;
    inc_beta(dff / 2.0, 0.5, dff / (dff + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired two-sided Student t-test over per-batch scores.
///
/// `xs` and `ys` must have equal length n >= 2 and be paired by position.
/// Identical inputs (every difference zero) give t = 0 and p = 1, since the
/// observed effect vanishes. Zero-variance differences with a nonzero mean
/// are rejected as numerical failures since the statistic diverges there.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    if xs.len() != ys.len() {
        return Err(Error::validation(format!(
            "paired t-test requires equal-length inputs, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::validation(
            "paired t-test requires at least two pairs",
        ));
    }
    let n = xs.len() as f64;
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var = diffs
        .iter()
        .map(|d| (d - mean_diff) * (d - mean_diff))
        .sum::<f64>()
        / (n - 1.0);
    if var <= 0.0 {
        if diffs.iter().all(|&d| d == 0.0) {
            return Ok(TTestResult {
                t: 0.0,
                df: xs.len() - 1,
                p: 1.0,
            });
        }
        return Err(Error::numerical(
            "paired t-test is undefined: differences have zero variance",
        ));
    }
    let se = (var / n).sqrt();
    let t = mean_diff / se;
    if !t.is_finite() {
        return Err(Error::numerical("paired t-test produced a non-finite t"));
    }
    let df = xs.len() - 1;
    let p = student_t_two_sided_p(t, df)?;
    Ok(TTestResult { t, df, p })
}

/// Arithmetic mean of per-batch scores. Empty input is rejected.
pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("mean of an empty sequence is undefined"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ln_gamma_matches_known_values() {
        assert!(close(ln_gamma(1.0), 0.0, 1e-10));
        assert!(close(ln_gamma(5.0), 24.0_f64.ln(), 1e-10));
        assert!(close(
            ln_gamma(0.5),
            std::f64::consts::PI.sqrt().ln(),
            1e-10
        ));
    }

    #[test]
    fn inc_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(1, b) = 1 - (1 - x)^b.
        assert!(close(inc_beta(1.0, 1.0, 0.3).unwrap(), 0.3, 1e-12));
        assert!(close(inc_beta(1.0, 2.0, 0.1).unwrap(), 0.19, 1e-12));
        assert!(close(inc_beta(2.0, 2.0, 0.5).unwrap(), 0.5, 1e-12));
        assert_eq!(inc_beta(2.0, 3.0, 0.0).unwrap(), 0.0);
        assert_eq!(inc_beta(2.0, 3.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn inc_beta_symmetry() {
        for &(a, b, x) in &[(0.5, 3.0, 0.2), (2.5, 1.5, 0.7), (4.0, 4.0, 0.31)] {
            let lhs = inc_beta(a, b, x).unwrap();
            let rhs = 1.0 - inc_beta(b, a, 1.0 - x).unwrap();
            assert!(close(lhs, rhs, 1e-12), "a={a} b={b} x={x}");
        }
    }

    #[test]
    fn t_cdf_matches_closed_forms() {
        // df = 1 is a Cauchy: F(t) = 1/2 + atan(t)/pi, so F(1) = 3/4.
        assert!(close(student_t_cdf(1.0, 1).unwrap(), 0.75, 1e-10));
        // df = 2: F(t) = 1/2 (1 + t / sqrt(2 + t^2)), so F(sqrt 2) = 0.853553...
        assert!(close(
            student_t_cdf(2.0_f64.sqrt(), 2).unwrap(),
            0.8535533905932737,
            1e-10
        ));
        assert!(close(student_t_cdf(0.0, 7).unwrap(), 0.5, 1e-12));
        assert!(close(student_t_cdf(-1.0, 1).unwrap(), 0.25, 1e-10));
    }

    #[test]
    fn t_cdf_approaches_normal_for_large_df() {
        let p = student_t_two_sided_p(1.96, 1000).unwrap();
        assert!(close(p, 0.05, 2e-3), "got {p}");
    }

    #[test]
    fn paired_t_test_hand_computed_example() {
        // diffs (1, 2, 3): mean 2, sd 1, t = 2 sqrt(3), df = 2,
        // p = I_{1/7}(1, 1/2) = 1 - sqrt(6/7).
        let result = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!(close(result.t, 2.0 * 3.0_f64.sqrt(), 1e-12));
        assert_eq!(result.df, 2);
        assert!(close(result.p, 1.0 - (6.0_f64 / 7.0).sqrt(), 1e-12));
    }

    #[test]
    fn paired_t_test_is_antisymmetric() {
        let xs = [0.51, 0.62, 0.43, 0.55];
        let ys = [0.48, 0.66, 0.41, 0.50];
        let ab = paired_t_test(&xs, &ys).unwrap();
        let ba = paired_t_test(&ys, &xs).unwrap();
        assert!(close(ab.t, -ba.t, 1e-12));
        assert!(close(ab.p, ba.p, 1e-12));
    }

    #[test]
    fn paired_t_test_rejects_degenerate_inputs() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.5]).is_err());
        // Constant nonzero differences have zero variance but a nonzero mean.
        let err = paired_t_test(&[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn paired_t_test_on_identical_inputs_is_a_null_result() {
        let xs = [0.52, 0.61, 0.47];
        let result = paired_t_test(&xs, &xs).unwrap();
        assert_eq!(result.t, 0.0);
        assert_eq!(result.df, 2);
        assert_eq!(result.p, 1.0);
    }

    #[test]
    fn mean_rejects_empty_and_averages() {
        assert!(mean(&[]).is_err());
        assert!(close(mean(&[0.25, 0.75]).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn p_values_stay_in_unit_interval() {
        for df in 1..30 {
            for i in 0..40 {
                let t = -6.0 + 0.3 * i as f64;
                let p = student_t_two_sided_p(t, df).unwrap();
                assert!((0.0..=1.0).contains(&p), "t={t} df={df} p={p}");
                let cdf = student_t_cdf(t, df).unwrap();
                assert!((0.0..=1.0).contains(&cdf));
            }
        }
    }
}
