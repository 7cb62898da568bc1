//! Posterior-mode estimation by limited-memory BFGS with Armijo backtracking,
//! used both as a standalone estimator and to initialize the sampler.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{InferenceError, LogDensity};

#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    pub max_iterations: usize,
    /// Infinity-norm gradient threshold for convergence.
    pub grad_tolerance: f64,
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Jittered restarts before giving up.
    pub max_restarts: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            max_iterations: 1000,
            grad_tolerance: 1e-6,
            memory: 10,
            max_restarts: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    /// Mode on the unconstrained scale.
    pub u: Vec<f64>,
    pub log_posterior: f64,
    pub iterations: usize,
    pub grad_inf_norm: f64,
    pub converged: bool,
}

/// Maximizes the log density from `init`, restarting from jittered points if
/// the line search collapses or the start is unusable.
pub fn map_estimate<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    options: &MapOptions,
    seed: u64,
) -> Result<MapResult, InferenceError> {
    assert_eq!(init.len(), target.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // keep clear of the per-chain streams
    let mut start = init.to_vec();
    let mut last = String::new();
    for restart in 0..=options.max_restarts {
        match lbfgs(target, &start, options) {
            Ok(result) => return Ok(result),
            Err(message) => last = message,
        }
        let sd = 0.1 * (restart + 1) as f64;
        start = init
            .iter()
            .map(|&x| x + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
    }
    Err(InferenceError::MapFailed {
        restarts: options.max_restarts,
        message: last,
    })
}

fn lbfgs<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    options: &MapOptions,
) -> Result<MapResult, String> {
    let dim = target.dim();
    let mut x = init.to_vec();
    let mut grad = vec![0.0; dim];
    // minimize f = -log density
    let mut f = -target.log_density_and_gradient(&x, &mut grad);
    for g in grad.iter_mut() {
        *g = -*g;
    }
    if !f.is_finite() {
        return Err("starting point has non-finite density".into());
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut direction = vec![0.0; dim];
    let mut x_new = vec![0.0; dim];
    let mut grad_new = vec![0.0; dim];
    let mut iterations = 0;
    for iter in 0..options.max_iterations {
        iterations = iter;
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < options.grad_tolerance {
            return Ok(MapResult {
                u: x,
                log_posterior: -f,
                iterations: iter,
                grad_inf_norm: gnorm,
                converged: true,
            });
        }
        two_loop(&history, &grad, &mut direction);
        let mut dg: f64 = direction.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(dg < 0.0) {
            // not a descent direction: fall back to steepest descent
            history.clear();
            for (d, g) in direction.iter_mut().zip(&grad) {
                *d = -g;
            }
            dg = -grad.iter().map(|g| g * g).sum::<f64>();
            if dg == 0.0 {
                return Ok(MapResult {
                    u: x,
                    log_posterior: -f,
                    iterations: iter,
                    grad_inf_norm: gnorm,
                    converged: true,
                });
            }
        }
        // Armijo backtracking
        let c1 = 1e-4;
        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = f64::INFINITY;
        for _ in 0..60 {
            for i in 0..dim {
                x_new[i] = x[i] + step * direction[i];
            }
            f_new = -target.log_density_and_gradient(&x_new, &mut grad_new);
            if f_new.is_finite() && f_new <= f + c1 * step * dg {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if history.is_empty() {
                return Err(format!("line search failed at iteration {iter}"));
            }
            // stale curvature can poison the direction; drop it and retry
            history.clear();
            continue;
        }
        for g in grad_new.iter_mut() {
            *g = -*g;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        x.copy_from_slice(&x_new);
        grad.copy_from_slice(&grad_new);
        f = f_new;
    }
    let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(MapResult {
        u: x,
        log_posterior: -f,
        iterations: iterations + 1,
        grad_inf_norm: gnorm,
        converged: false,
    })
}

/// Two-loop recursion: direction = -H grad with the implicit inverse Hessian.
fn two_loop(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, grad: &[f64], out: &mut [f64]) {
    out.copy_from_slice(grad);
    if history.is_empty() {
        for v in out.iter_mut() {
            *v = -*v;
        }
        return;
    }
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.iter().zip(out.iter()).map(|(si, qi)| si * qi).sum::<f64>();
        for (qi, yi) in out.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    // initial scaling from the most recent pair
    let (s_last, y_last, _) = history.back().unwrap();
    let sy: f64 = s_last.iter().zip(y_last).map(|(a, b)| a * b).sum();
    let yy: f64 = y_last.iter().map(|v| v * v).sum();
    let gamma = if yy > 0.0 { sy / yy } else { 1.0 };
    for v in out.iter_mut() {
        *v *= gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.iter().zip(out.iter()).map(|(yi, ri)| yi * ri).sum::<f64>();
        for (ri, si) in out.iter_mut().zip(s) {
            *ri += (a - b) * si;
        }
    }
    for v in out.iter_mut() {
        *v = -*v;
    }
}
