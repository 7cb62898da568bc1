//! Convergence diagnostics: rank-normalized split R-hat and bulk/tail
//! effective sample sizes, following the folded/rank-normalized formulation
//! with Geyer's initial monotone sequence for the autocorrelation sum.

use ndarray::Array2;

use crate::special::norm_ppf;

/// Rank-normalized split R-hat: the larger of the bulk statistic and the
/// statistic of the draws folded around their median. 1.0 means mixed;
/// constant input returns exactly 1.0.
pub fn split_rhat(chains: &Array2<f64>) -> f64 {
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let folded = basic_rhat(&rank_normalize(&fold(&split)));
    bulk.max(folded)
}

/// Bulk effective sample size on rank-normalized split chains.
pub fn ess_bulk(chains: &Array2<f64>) -> f64 {
    basic_ess(&rank_normalize(&split_chains(chains)))
}

/// Tail effective sample size: the smaller ESS of the 5% and 95% exceedance
/// indicators.
pub fn ess_tail(chains: &Array2<f64>) -> f64 {
    let mut all: Vec<f64> = chains.iter().cloned().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q05 = quantile_sorted(&all, 0.05);
    let q95 = quantile_sorted(&all, 0.95);
    let low = chains.mapv(|x| if x <= q05 { 1.0 } else { 0.0 });
    let high = chains.mapv(|x| if x >= q95 { 1.0 } else { 0.0 });
    basic_ess(&split_chains(&low)).min(basic_ess(&split_chains(&high)))
}

/// Splits each chain in half, doubling the chain count. Odd trailing draws
/// are dropped.
fn split_chains(chains: &Array2<f64>) -> Array2<f64> {
    let (m, n) = chains.dim();
    let half = n / 2;
    Array2::from_shape_fn((2 * m, half), |(j, i)| {
        let c = j / 2;
        if j % 2 == 0 {
            chains[(c, i)]
        } else {
            chains[(c, half + i)]
        }
    })
}

fn fold(chains: &Array2<f64>) -> Array2<f64> {
    let mut all: Vec<f64> = chains.iter().cloned().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = quantile_sorted(&all, 0.5);
    chains.mapv(|x| (x - med).abs())
}

/// Average ranks (ties averaged) mapped through the normal quantile function
/// with the Blom offset.
fn rank_normalize(chains: &Array2<f64>) -> Array2<f64> {
    let total = chains.len();
    let flat: Vec<f64> = chains.iter().cloned().collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| flat[a].partial_cmp(&flat[b]).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[order[j + 1]] == flat[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 averaged over the tie run
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let (m, n) = chains.dim();
    let denom = total as f64 + 0.25;
    Array2::from_shape_fn((m, n), |(c, d)| {
        norm_ppf((ranks[c * n + d] - 0.375) / denom)
    })
}

fn chain_moments(chains: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = chains.dim();
    let mut means = Vec::with_capacity(m);
    let mut vars = Vec::with_capacity(m);
    for j in 0..m {
        let row = chains.row(j);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

fn basic_rhat(chains: &Array2<f64>) -> f64 {
    let (m, n) = chains.dim();
    if n < 2 || m < 2 {
        return f64::NAN;
    }
    let (means, vars) = chain_moments(chains);
    let w: f64 = vars.iter().sum::<f64>() / m as f64;
    if w == 0.0 {
        return 1.0;
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n =
        means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>() / (m - 1) as f64;
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;
    (var_plus / w).sqrt()
}

/// ESS from the multi-chain autocorrelation estimate with Geyer's initial
/// monotone positive sequence.
fn basic_ess(chains: &Array2<f64>) -> f64 {
    let (m, n) = chains.dim();
    let total = (m * n) as f64;
    if n < 4 {
        return total;
    }
    let (means, vars) = chain_moments(chains);
    let w: f64 = vars.iter().sum::<f64>() / m as f64;
    if w == 0.0 {
        return total;
    }
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (n - 1) as f64 / n as f64 * w + b_over_n;

    // biased (divisor n) autocovariances per chain, averaged
    let mean_acov = |t: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..m {
            let row = chains.row(j);
            let mean = means[j];
            let mut s = 0.0;
            for i in 0..n - t {
                s += (row[i] - mean) * (row[i + t] - mean);
            }
            acc += s / n as f64;
        }
        acc / m as f64
    };

    let rho = |t: usize| 1.0 - (w - mean_acov(t)) / var_plus;

    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        k += 1;
    }
    let tau = tau.max(1.0 / (total).log10().max(1.0));
    (total / tau).min(total * total.log10().max(1.0))
}

/// Linear-interpolation quantile of a sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
