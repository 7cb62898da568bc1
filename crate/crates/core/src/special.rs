//! Scalar special functions used by the likelihood and diagnostics.
//!
//! Hand-rolled rather than pulled from a stats crate because `ln_gamma` and
//! `digamma` sit on the sampler's innermost loop; both use upward recurrence
//! into the asymptotic (Stirling) regime and are accurate to ~1e-13 relative.

const LN_2PI: f64 = 1.8378770664093453;

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma domain: x > 0, got {x}");
    let mut shift = 1.0;
    while x < 10.0 {
        shift *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360360.0))))));
    (x - 0.5) * x.ln() - x + 0.5 * LN_2PI + series - shift.ln()
}

/// Digamma function psi(x) = d/dx ln Gamma(x) for x > 0.
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma domain: x > 0, got {x}");
    let mut shift = 0.0;
    while x < 10.0 {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    x.ln()
        - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 120.0
                        - inv2
                            * (1.0 / 252.0
                                - inv2
                                    * (1.0 / 240.0
                                        - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))))
        - shift
}

/// Both `ln_gamma(x)` and `digamma(x)` in one pass, sharing the upward
/// recurrence and the reciprocal powers. The likelihood gradient needs the
/// pair at every Dirichlet cell, which makes this the hottest scalar call in
/// a fit.
pub fn ln_gamma_digamma(mut x: f64) -> (f64, f64) {
    debug_assert!(x > 0.0, "ln_gamma_digamma domain: x > 0, got {x}");
    let mut shift_prod = 1.0;
    let mut shift_sum = 0.0;
    while x < 10.0 {
        shift_prod *= x;
        shift_sum += 1.0 / x;
        x += 1.0;
    }
    let ln_x = x.ln();
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let lg_series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360360.0))))));
    let lg = (x - 0.5) * ln_x - x + 0.5 * LN_2PI + lg_series - shift_prod.ln();
    let dg_series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    let dg = ln_x - 0.5 * inv - dg_series - shift_sum;
    (lg, dg)
}

/// Numerically stable log(sum(exp(x))) over a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Inverse standard normal CDF (Acklam's rational approximation, |err| < 1.2e-9).
pub fn norm_ppf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_ppf domain: p in (0,1), got {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// log(p / (1 - p)) for p in (0, 1).
pub fn logit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "logit domain: p in (0,1), got {p}");
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const EULER_GAMMA: f64 = 0.5772156649015329;

    #[test]
    fn ln_gamma_known_values() {
        assert_relative_eq!(ln_gamma(0.5), 0.5723649429247001, max_relative = 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!(ln_gamma(2.0).abs() < 1e-13);
        assert_relative_eq!(ln_gamma(3.0), 2.0f64.ln(), max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(10.0), 12.801827480081469, max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(1e-6), (1e6f64).ln(), max_relative = 1e-5);
    }

    #[test]
    fn digamma_known_values() {
        assert_relative_eq!(digamma(1.0), -EULER_GAMMA, max_relative = 1e-12);
        assert_relative_eq!(
            digamma(0.5),
            -EULER_GAMMA - 2.0 * 2.0f64.ln(),
            max_relative = 1e-12
        );
        // psi(x+1) = psi(x) + 1/x
        for &x in &[0.1, 0.7, 1.3, 4.5, 9.9, 25.0] {
            assert_relative_eq!(digamma(x + 1.0), digamma(x) + 1.0 / x, max_relative = 1e-11);
        }
    }

    #[test]
    fn matches_reference_implementation_on_grid() {
        let mut x = 0.01;
        while x < 50.0 {
            assert_relative_eq!(
                ln_gamma(x),
                statrs::function::gamma::ln_gamma(x),
                max_relative = 1e-10,
                epsilon = 1e-10
            );
            assert_relative_eq!(
                digamma(x),
                statrs::function::gamma::digamma(x),
                max_relative = 1e-8,
                epsilon = 1e-10
            );
            x *= 1.17;
        }
    }

    #[test]
    fn fused_pair_matches_single_calls() {
        let mut x = 0.01;
        while x < 200.0 {
            let (lg, dg) = ln_gamma_digamma(x);
            assert_eq!(lg, ln_gamma(x), "ln_gamma at {x}");
            assert_eq!(dg, digamma(x), "digamma at {x}");
            x *= 1.31;
        }
    }

    #[test]
    fn digamma_is_ln_gamma_derivative() {
        for &x in &[0.3f64, 1.1, 2.7, 8.4, 33.0] {
            let h = 1e-6 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_relative_eq!(digamma(x), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn log_sum_exp_stable() {
        assert_relative_eq!(
            log_sum_exp(&[0.0, 0.0]),
            2.0f64.ln(),
            max_relative = 1e-14
        );
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2.0f64.ln());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn norm_ppf_quantiles() {
        assert!(norm_ppf(0.5).abs() < 1e-9);
        assert_relative_eq!(norm_ppf(0.975), 1.959963984540054, max_relative = 1e-7);
        assert_relative_eq!(norm_ppf(0.025), -1.959963984540054, max_relative = 1e-7);
        assert_relative_eq!(norm_ppf(0.841344746068543), 1.0, max_relative = 1e-7);
        assert_relative_eq!(norm_ppf(1e-6), -4.753424308822899, max_relative = 1e-6);
    }
}
