//! Pareto-smoothed importance sampling leave-one-out cross-validation.
//!
//! Out-of-sample density for held-out row i is estimated from full-posterior
//! draws with importance weights 1/p(y_i|draw); the largest weights are
//! replaced by quantiles of a generalized Pareto distribution fitted to them
//! (Zhang-Stephens estimator with the weakly informative shape prior). The
//! fitted shape k reports reliability: points above 0.7 are suspect.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::log_sum_exp;

/// Fitted shapes above this are treated as unreliable.
pub const PARETO_K_THRESHOLD: f64 = 0.7;
/// Warn when more than this share of observations exceeds the threshold.
pub const HIGH_K_WARN_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum LooError {
    #[error("log-likelihood matrix needs at least 2 draws and 1 observation, got {draws} x {obs}")]
    TooSmall { draws: usize, obs: usize },
    #[error("log-likelihood has a non-finite value at draw {draw}, observation {obs}")]
    NonFinite { draw: usize, obs: usize },
    #[error("fits cover different observation counts: {0} vs {1}")]
    MismatchedObservations(usize, usize),
    #[error("need at least 2 fits to compare, got {0}")]
    TooFewFits(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooResult {
    /// Expected log pointwise predictive density, summed over observations.
    pub elpd: f64,
    pub se: f64,
    /// Effective parameter count: in-sample lpd minus elpd.
    pub p_loo: f64,
    pub pointwise: Vec<f64>,
    /// Fitted Pareto shape per observation; NaN when the tail was too short
    /// to fit.
    pub pareto_k: Vec<f64>,
    pub n_high_k: usize,
    pub high_k_warning: bool,
}

/// PSIS-LOO over a (draws x observations) log-likelihood matrix.
pub fn psis_loo(log_lik: &Array2<f64>) -> Result<LooResult, LooError> {
    let (s, n) = log_lik.dim();
    if s < 2 || n < 1 {
        return Err(LooError::TooSmall { draws: s, obs: n });
    }
    for ((draw, obs), &v) in log_lik.indexed_iter() {
        if !v.is_finite() {
            return Err(LooError::NonFinite { draw, obs });
        }
    }
    let tail_len = (0.2 * s as f64).min(3.0 * (s as f64).sqrt()).ceil() as usize;
    let mut pointwise = Vec::with_capacity(n);
    let mut pareto_k = Vec::with_capacity(n);
    let mut lw = vec![0.0; s];
    for i in 0..n {
        let ll: Vec<f64> = (0..s).map(|d| log_lik[(d, i)]).collect();
        for (d, &l) in ll.iter().enumerate() {
            lw[d] = -l;
        }
        // center so the largest raw weight is exp(0)
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in lw.iter_mut() {
            *v -= m;
        }
        pareto_k.push(smooth_tail(&mut lw, tail_len));
        let num: Vec<f64> = (0..s).map(|d| lw[d] + ll[d]).collect();
        pointwise.push(log_sum_exp(&num) - log_sum_exp(&lw));
    }
    let elpd: f64 = pointwise.iter().sum();
    let mean = elpd / n as f64;
    let var = if n > 1 {
        pointwise.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let se = (n as f64 * var).sqrt();
    let lpd: f64 = (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..s).map(|d| log_lik[(d, i)]).collect();
            log_sum_exp(&col) - (s as f64).ln()
        })
        .sum();
    let n_high_k = pareto_k.iter().filter(|k| k.is_finite() && **k > PARETO_K_THRESHOLD).count();
    Ok(LooResult {
        elpd,
        se,
        p_loo: lpd - elpd,
        pointwise,
        pareto_k,
        n_high_k,
        high_k_warning: n_high_k as f64 > HIGH_K_WARN_FRACTION * n as f64,
    })
}

/// Replaces the `tail_len` largest log weights in place with smoothed values;
/// returns the fitted Pareto shape (NaN when no fit was possible).
fn smooth_tail(lw: &mut [f64], tail_len: usize) -> f64 {
    let s = lw.len();
    if tail_len < 5 || tail_len >= s {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].partial_cmp(&lw[b]).unwrap());
    let cutoff = lw[order[s - tail_len - 1]];
    let exp_cutoff = cutoff.exp();
    let exceedances: Vec<f64> = order[s - tail_len..]
        .iter()
        .map(|&idx| lw[idx].exp() - exp_cutoff)
        .collect();
    if !exceedances.last().is_some_and(|&x| x > 0.0 && x.is_finite()) {
        return f64::NAN;
    }
    let (k, sigma) = gpd_fit(&exceedances);
    if !k.is_finite() || !(sigma > 0.0) {
        return f64::NAN;
    }
    for (j, &idx) in order[s - tail_len..].iter().enumerate() {
        let p = (j as f64 + 0.5) / tail_len as f64;
        let q = gpd_quantile(p, k, sigma) + exp_cutoff;
        lw[idx] = q.ln().min(0.0);
    }
    k
}

/// Zhang-Stephens generalized Pareto fit on sorted-ascending exceedances,
/// with the (10, 0.5) prior pulling the shape toward 1/2.
pub(crate) fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    debug_assert!(n >= 5);
    debug_assert!(x.windows(2).all(|w| w[0] <= w[1]));
    let m_grid = 30 + (n as f64).sqrt().floor() as usize;
    let quart_idx = ((n as f64 / 4.0 + 0.5).floor() as usize).max(1) - 1;
    let x_quart = x[quart_idx];
    let x_max = x[n - 1];
    if !(x_quart > 0.0) {
        // degenerate lower quartile; fall back to a tiny positive value
        return gpd_fit_grid(x, 1.0 / x_max, x_max.max(1e-12) * 1e-3, m_grid);
    }
    gpd_fit_grid(x, 1.0 / x_max, x_quart, m_grid)
}

fn gpd_fit_grid(x: &[f64], inv_max: f64, x_quart: f64, m_grid: usize) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let mut thetas = Vec::with_capacity(m_grid);
    let mut logliks = Vec::with_capacity(m_grid);
    for j in 1..=m_grid {
        let theta = inv_max + (1.0 - (m_grid as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * x_quart);
        let k: f64 = x.iter().map(|&v| (-theta * v).ln_1p()).sum::<f64>() / nf;
        let l = if k != 0.0 && (-theta / k) > 0.0 {
            nf * ((-theta / k).ln() - k - 1.0)
        } else {
            f64::NEG_INFINITY
        };
        thetas.push(theta);
        logliks.push(l);
    }
    let lse = log_sum_exp(&logliks);
    if !lse.is_finite() {
        return (f64::NAN, f64::NAN);
    }
    let theta_hat: f64 = thetas
        .iter()
        .zip(&logliks)
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k_hat: f64 = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k_hat / theta_hat;
    // weakly informative regularization toward 1/2
    let k_reg = (nf * k_hat + 10.0 * 0.5) / (nf + 10.0);
    (k_reg, sigma)
}

/// Generalized Pareto quantile function (location 0).
pub(crate) fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&p));
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma * ((-k) * (1.0 - p).ln()).exp_m1() / k
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooRow {
    pub name: String,
    pub elpd: f64,
    pub se: f64,
    pub p_loo: f64,
    /// Difference to the best fit (0 for the best row).
    pub elpd_diff: f64,
    pub diff_se: f64,
    pub n_high_k: usize,
    pub high_k_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LooComparison {
    pub rows: Vec<LooRow>,
}

/// Ranks fits by elpd (best first) with pairwise difference standard errors
/// against the winner.
pub fn compare_loo(entries: &[(String, LooResult)]) -> Result<LooComparison, LooError> {
    if entries.len() < 2 {
        return Err(LooError::TooFewFits(entries.len()));
    }
    let n = entries[0].1.pointwise.len();
    for (_, r) in entries.iter() {
        if r.pointwise.len() != n {
            return Err(LooError::MismatchedObservations(n, r.pointwise.len()));
        }
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .1
            .elpd
            .partial_cmp(&entries[a].1.elpd)
            .unwrap()
            .then_with(|| entries[a].0.cmp(&entries[b].0))
    });
    let best = &entries[order[0]].1;
    let rows = order
        .iter()
        .map(|&idx| {
            let (name, r) = &entries[idx];
            let diffs: Vec<f64> = r
                .pointwise
                .iter()
                .zip(&best.pointwise)
                .map(|(a, b)| a - b)
                .collect();
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            LooRow {
                name: name.clone(),
                elpd: r.elpd,
                se: r.se,
                p_loo: r.p_loo,
                elpd_diff: r.elpd - best.elpd,
                diff_se: (n as f64 * var).sqrt(),
                n_high_k: r.n_high_k,
                high_k_warning: r.high_k_warning,
            }
        })
        .collect();
    Ok(LooComparison { rows })
}

impl LooComparison {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "name",
            "elpd",
            "se",
            "p_loo",
            "elpd_diff",
            "diff_se",
            "n_high_k",
            "high_k_warning",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.elpd.to_string(),
                r.se.to_string(),
                r.p_loo.to_string(),
                r.elpd_diff.to_string(),
                r.diff_se.to_string(),
                r.n_high_k.to_string(),
                r.high_k_warning.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const LN_2PI: f64 = 1.8378770664093453;

    fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * LN_2PI - 0.5 * var.ln() - 0.5 * (x - mean) * (x - mean) / var
    }

    /// Conjugate normal-normal model where exact LOO is available in closed
    /// form: y_i ~ N(mu, 1), mu ~ N(0, 1).
    #[test]
    fn matches_analytic_loo_in_conjugate_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 30usize;
        let s = 8000usize;
        let y: Vec<f64> = (0..n)
            .map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sum_y: f64 = y.iter().sum();
        // full posterior: mu | y ~ N(sum/(n+1), 1/(n+1))
        let post_mean = sum_y / (n as f64 + 1.0);
        let post_var = 1.0 / (n as f64 + 1.0);
        let draws: Vec<f64> = (0..s)
            .map(|_| post_mean + post_var.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_lik =
            Array2::from_shape_fn((s, n), |(d, i)| normal_logpdf(y[i], draws[d], 1.0));
        let got = psis_loo(&log_lik).unwrap();
        // exact: posterior without i has precision n, predictive variance 1 + 1/n
        let exact: Vec<f64> = (0..n)
            .map(|i| {
                let m = (sum_y - y[i]) / n as f64;
                normal_logpdf(y[i], m, 1.0 + 1.0 / n as f64)
            })
            .collect();
        let exact_total: f64 = exact.iter().sum();
        assert!(
            (got.elpd - exact_total).abs() < 0.5,
            "psis {} vs exact {exact_total}",
            got.elpd
        );
        for (g, e) in got.pointwise.iter().zip(&exact) {
            assert!((g - e).abs() < 0.15, "pointwise {g} vs {e}");
        }
        assert_eq!(got.n_high_k, 0);
        assert!(!got.high_k_warning);
        // one location parameter: p_loo near 1
        assert!(got.p_loo > 0.3 && got.p_loo < 3.0, "p_loo {}", got.p_loo);
        assert!(got.se > 0.0);
    }

    #[test]
    fn gpd_fit_recovers_shape_and_scale() {
        for &(k_true, sigma_true) in &[(0.3, 1.2), (-0.2, 0.7)] {
            let n = 200;
            let x: Vec<f64> = (0..n)
                .map(|j| gpd_quantile((j as f64 + 0.5) / n as f64, k_true, sigma_true))
                .collect();
            let (k, sigma) = gpd_fit(&x);
            assert!((k - k_true).abs() < 0.1, "k {k} vs {k_true}");
            assert!(
                (sigma - sigma_true).abs() / sigma_true < 0.15,
                "sigma {sigma} vs {sigma_true}"
            );
        }
    }

    #[test]
    fn heavy_tailed_ratios_are_flagged() {
        // importance ratios r = u^(-1/0.8) are Pareto with shape 1.25 > 0.7
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = 2000;
        let log_lik = Array2::from_shape_fn((s, 1), |_| {
            let u: f64 = rng.gen_range(1e-12f64..1.0);
            (1.0 / 0.8) * u.ln() // lw = -ll = 1.25 * (-ln u): Pareto tail, k = 1.25
        });
        let got = psis_loo(&log_lik).unwrap();
        assert_eq!(got.pareto_k.len(), 1);
        assert!(
            got.pareto_k[0] > 0.7,
            "expected high pareto k, got {}",
            got.pareto_k[0]
        );
        assert!(got.high_k_warning);
    }

    #[test]
    fn smoothing_only_touches_the_tail_and_caps_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = 400;
        let mut lw: Vec<f64> = (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in lw.iter_mut() {
            *v -= m;
        }
        let tail_len = 60;
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].partial_cmp(&lw[b]).unwrap());
        let body: Vec<f64> = order[..s - tail_len].iter().map(|&i| lw[i]).collect();
        let mut smoothed = lw.clone();
        let k = smooth_tail(&mut smoothed, tail_len);
        assert!(k.is_finite());
        for &i in &order[..s - tail_len] {
            assert_eq!(smoothed[i], lw[i]);
        }
        assert!(smoothed.iter().all(|&v| v <= 0.0));
        assert_eq!(body.len(), s - tail_len);
    }

    #[test]
    fn comparison_ranks_and_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = 500;
        let n = 40;
        let base = Array2::from_shape_fn((s, n), |_| {
            -1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        let better = base.mapv(|v| v + 0.3);
        let loo_a = psis_loo(&better).unwrap();
        let loo_b = psis_loo(&base).unwrap();
        assert_relative_eq!(loo_a.elpd, loo_b.elpd + 0.3 * n as f64, max_relative = 1e-10);
        let cmp = compare_loo(&[("worse".into(), loo_b), ("better".into(), loo_a)]).unwrap();
        assert_eq!(cmp.rows[0].name, "better");
        assert_eq!(cmp.rows[0].elpd_diff, 0.0);
        assert_eq!(cmp.rows[0].diff_se, 0.0);
        assert_relative_eq!(cmp.rows[1].elpd_diff, -0.3 * n as f64, max_relative = 1e-10);
        assert!(cmp.rows[1].diff_se.abs() < 1e-9, "constant shift has no diff se");
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,elpd,se,p_loo,elpd_diff,diff_se,n_high_k,high_k_warning"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn rejects_bad_input() {
        let tiny = Array2::from_shape_fn((1, 3), |_| -1.0);
        assert!(matches!(psis_loo(&tiny), Err(LooError::TooSmall { .. })));
        let mut bad = Array2::from_shape_fn((10, 3), |_| -1.0);
        bad[(4, 1)] = f64::NAN;
        assert!(matches!(
            psis_loo(&bad),
            Err(LooError::NonFinite { draw: 4, obs: 1 })
        ));
        let a = psis_loo(&Array2::from_shape_fn((10, 3), |_| -1.0)).unwrap();
        let b = psis_loo(&Array2::from_shape_fn((10, 4), |_| -1.0)).unwrap();
        assert!(matches!(
            compare_loo(&[("a".into(), a.clone()), ("b".into(), b)]),
            Err(LooError::MismatchedObservations(3, 4))
        ));
        assert!(matches!(
            compare_loo(&[("a".into(), a)]),
            Err(LooError::TooFewFits(1))
        ));
    }
}
