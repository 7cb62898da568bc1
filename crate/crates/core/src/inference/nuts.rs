//! No-U-Turn sampler: dynamic Hamiltonian Monte Carlo with slice-based
//! multinomial selection over the doubling trajectory, dual-averaging step
//! size adaptation toward a target acceptance statistic, and windowed
//! estimation of a diagonal mass matrix during warmup.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use super::LogDensity;

/// Divergence threshold on the drop in joint log density.
const DIVERGENCE_GAP: f64 = 1000.0;

#[derive(Debug, Clone, Copy)]
pub struct ChainSettings {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    /// Standard deviation of the jitter applied to the starting point.
    pub init_jitter_sd: f64,
}

#[derive(Debug)]
pub struct ChainOutput {
    /// Kept draws, row-major (draws x dim), unconstrained scale.
    pub draws: Vec<f64>,
    pub logps: Vec<f64>,
    /// Post-warmup transitions that diverged.
    pub divergences: usize,
    pub warmup_divergences: usize,
    /// Post-warmup transitions that hit the tree depth cap.
    pub max_depth_hits: usize,
    pub step_size: f64,
    pub mean_accept: f64,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl Point {
    fn eval<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Point {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_gradient(&q, &mut grad);
        Point { q, grad, logp }
    }
}

fn kinetic(inv_mass: &[f64], p: &[f64]) -> f64 {
    0.5 * inv_mass.iter().zip(p).map(|(m, pi)| m * pi * pi).sum::<f64>()
}

fn leapfrog<T: LogDensity + ?Sized>(
    target: &T,
    inv_mass: &[f64],
    pt: &Point,
    p: &[f64],
    signed_eps: f64,
) -> (Point, Vec<f64>) {
    let dim = pt.q.len();
    let mut p_new = p.to_vec();
    for i in 0..dim {
        p_new[i] += 0.5 * signed_eps * pt.grad[i];
    }
    let mut q_new = pt.q.clone();
    for i in 0..dim {
        q_new[i] += signed_eps * inv_mass[i] * p_new[i];
    }
    let new_pt = Point::eval(target, q_new);
    for i in 0..dim {
        p_new[i] += 0.5 * signed_eps * new_pt.grad[i];
    }
    (new_pt, p_new)
}

/// Both-ends u-turn criterion using velocities (inverse mass times momentum).
fn no_u_turn(minus: &(Point, Vec<f64>), plus: &(Point, Vec<f64>), inv_mass: &[f64]) -> bool {
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for i in 0..inv_mass.len() {
        let dq = plus.0.q[i] - minus.0.q[i];
        fwd += dq * inv_mass[i] * plus.1[i];
        bwd += dq * inv_mass[i] * minus.1[i];
    }
    fwd >= 0.0 && bwd >= 0.0
}

struct Subtree {
    minus: (Point, Vec<f64>),
    plus: (Point, Vec<f64>),
    prop: Point,
    /// Leaves inside the slice.
    n: f64,
    s: bool,
    alpha: f64,
    n_alpha: f64,
    divergent: bool,
}

struct TreeCtx<'a, T: ?Sized> {
    target: &'a T,
    inv_mass: &'a [f64],
    eps: f64,
    rng: &'a mut ChaCha8Rng,
}

fn build_tree<T: LogDensity + ?Sized>(
    ctx: &mut TreeCtx<'_, T>,
    from: &(Point, Vec<f64>),
    logu: f64,
    dir: f64,
    depth: usize,
    h0: f64,
) -> Subtree {
    if depth == 0 {
        let (pt, p) = leapfrog(ctx.target, ctx.inv_mass, &from.0, &from.1, dir * ctx.eps);
        let joint = if pt.logp.is_finite() {
            pt.logp - kinetic(ctx.inv_mass, &p)
        } else {
            f64::NEG_INFINITY
        };
        let n = if logu <= joint { 1.0 } else { 0.0 };
        let divergent = logu > joint + DIVERGENCE_GAP;
        let gap = joint - h0;
        let alpha = if gap >= 0.0 { 1.0 } else { gap.exp() };
        return Subtree {
            minus: (pt.clone(), p.clone()),
            plus: (pt.clone(), p),
            prop: pt,
            n,
            s: !divergent,
            alpha,
            n_alpha: 1.0,
            divergent,
        };
    }
    let mut t1 = build_tree(ctx, from, logu, dir, depth - 1, h0);
    if !t1.s {
        return t1;
    }
    let t2 = {
        let from2 = if dir > 0.0 { &t1.plus } else { &t1.minus };
        build_tree(ctx, from2, logu, dir, depth - 1, h0)
    };
    let total = t1.n + t2.n;
    if ctx.rng.gen::<f64>() * total < t2.n {
        t1.prop = t2.prop;
    }
    if dir > 0.0 {
        t1.plus = t2.plus;
    } else {
        t1.minus = t2.minus;
    }
    t1.n = total;
    t1.alpha += t2.alpha;
    t1.n_alpha += t2.n_alpha;
    t1.divergent |= t2.divergent;
    t1.s = t2.s && no_u_turn(&t1.minus, &t1.plus, ctx.inv_mass);
    t1
}

struct TransitionStats {
    accept: f64,
    divergent: bool,
    depth_hit: bool,
}

fn transition<T: LogDensity + ?Sized>(
    target: &T,
    point: &mut Point,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut ChaCha8Rng,
) -> TransitionStats {
    let dim = point.q.len();
    let mut p0 = vec![0.0; dim];
    for (pi, m) in p0.iter_mut().zip(inv_mass) {
        *pi = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
    }
    let h0 = point.logp - kinetic(inv_mass, &p0);
    let logu = h0 - rng.sample::<f64, _>(Exp1);
    let mut minus = (point.clone(), p0.clone());
    let mut plus = (point.clone(), p0);
    let mut n = 1.0f64;
    let mut s = true;
    let mut depth = 0usize;
    let mut alpha_sum = 0.0;
    let mut n_alpha = 0.0;
    let mut divergent = false;
    while s && depth < max_depth {
        let dir: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let t = {
            let mut ctx = TreeCtx { target, inv_mass, eps, rng };
            let from = if dir > 0.0 { &plus } else { &minus };
            build_tree(&mut ctx, from, logu, dir, depth, h0)
        };
        if dir > 0.0 {
            plus = t.plus;
        } else {
            minus = t.minus;
        }
        alpha_sum += t.alpha;
        n_alpha += t.n_alpha;
        divergent |= t.divergent;
        if t.s {
            let prob = (t.n / n).min(1.0);
            if rng.gen::<f64>() < prob {
                *point = t.prop;
            }
        }
        n += t.n;
        s = t.s && no_u_turn(&minus, &plus, inv_mass);
        depth += 1;
    }
    TransitionStats {
        accept: if n_alpha > 0.0 { alpha_sum / n_alpha } else { 0.0 },
        divergent,
        depth_hit: s && depth == max_depth,
    }
}

/// Doubling/halving search for a step size whose one-step acceptance
/// straddles 1/2.
fn find_reasonable_epsilon<T: LogDensity + ?Sized>(
    target: &T,
    point: &Point,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = point.q.len();
    let mut p0 = vec![0.0; dim];
    for (pi, m) in p0.iter_mut().zip(inv_mass) {
        *pi = rng.sample::<f64, _>(StandardNormal) / m.sqrt();
    }
    let h0 = point.logp - kinetic(inv_mass, &p0);
    let log_ratio = |eps: f64| -> f64 {
        let (pt, p) = leapfrog(target, inv_mass, point, &p0, eps);
        if pt.logp.is_finite() {
            (pt.logp - kinetic(inv_mass, &p)) - h0
        } else {
            f64::NEG_INFINITY
        }
    };
    let half = 0.5f64.ln();
    let mut eps = 1.0;
    let mut r = log_ratio(eps);
    let mut guard = 0;
    while !r.is_finite() && guard < 60 {
        eps *= 0.5;
        r = log_ratio(eps);
        guard += 1;
    }
    let dir = if r > half { 1.0 } else { -1.0 };
    for _ in 0..60 {
        if (dir > 0.0 && r <= half) || (dir < 0.0 && r >= half) {
            break;
        }
        eps *= if dir > 0.0 { 2.0 } else { 0.5 };
        r = log_ratio(eps);
    }
    eps.clamp(1e-10, 1e3)
}

/// Nesterov dual averaging of the log step size.
struct DualAveraging {
    mu: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: usize,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> DualAveraging {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1;
        let m = self.m as f64;
        self.h_bar += (self.target - accept - self.h_bar) / (m + Self::T0);
        let log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let w = m.powf(-Self::KAPPA);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Warmup phases: an initial step-size-only buffer, doubling variance
/// windows, and a terminal step-size buffer.
struct MassSchedule {
    enabled: bool,
    collect_start: usize,
    collect_end: usize,
    window_ends: Vec<usize>,
}

impl MassSchedule {
    fn new(warmup: usize) -> MassSchedule {
        if warmup < 20 {
            return MassSchedule {
                enabled: false,
                collect_start: 0,
                collect_end: 0,
                window_ends: Vec::new(),
            };
        }
        let (init, term, base) = if warmup >= 150 {
            (75usize, 50usize, 25usize)
        } else {
            let init = (warmup * 15 / 100).max(1);
            let term = (warmup * 10 / 100).max(1);
            (init, term, (warmup - init - term).max(1))
        };
        let last = warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        loop {
            let mut end = start + size;
            if end + 2 * size > last || end > last {
                end = last;
            }
            ends.push(end);
            if end >= last {
                break;
            }
            start = end;
            size *= 2;
        }
        MassSchedule {
            enabled: true,
            collect_start: init,
            collect_end: last,
            window_ends: ends,
        }
    }

    fn collecting(&self, iter: usize) -> bool {
        self.enabled && iter >= self.collect_start && iter < self.collect_end
    }

    fn window_closes_after(&self, iter: usize) -> bool {
        self.enabled && self.window_ends.contains(&(iter + 1))
    }
}

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Welford {
        Welford { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate written into `out`; no-op when fewer
    /// than two samples were seen.
    fn shrunk_variance(&self, out: &mut [f64]) {
        if self.n < 2 {
            return;
        }
        let n = self.n as f64;
        let shrink = n / (n + 5.0);
        for i in 0..out.len() {
            let var = self.m2[i] / (n - 1.0);
            out[i] = (shrink * var + 1e-3 * (1.0 - shrink)).max(1e-10);
        }
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }
}

/// Runs one chain; `rng` must already be seeded and stream-assigned.
pub fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    init: &[f64],
    init_inv_mass: Option<&[f64]>,
    cfg: &ChainSettings,
    rng: &mut ChaCha8Rng,
) -> Result<ChainOutput, String> {
    let dim = target.dim();
    assert_eq!(init.len(), dim);
    assert!(cfg.draws > 0, "need at least one kept draw");
    let mut point = Point::eval(target, init.to_vec());
    let mut tries = 0;
    while !point.logp.is_finite() && tries < 100 {
        let q: Vec<f64> = init
            .iter()
            .map(|&x| x + cfg.init_jitter_sd.max(0.1) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        point = Point::eval(target, q);
        tries += 1;
    }
    if !point.logp.is_finite() {
        return Err("no finite starting point found".into());
    }

    // Seed mass from caller-supplied scales (typically curvature at the mode)
    // so the first adaptation window does not run with unit mass on a badly
    // scaled posterior; the windowed estimates replace it as they close.
    let mut inv_mass = match init_inv_mass {
        Some(m) => {
            assert_eq!(m.len(), dim);
            m.to_vec()
        }
        None => vec![1.0; dim],
    };
    let mut eps = find_reasonable_epsilon(target, &point, &inv_mass, rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let schedule = MassSchedule::new(cfg.warmup);
    let mut welford = Welford::new(dim);

    let mut out = ChainOutput {
        draws: Vec::with_capacity(cfg.draws * dim),
        logps: Vec::with_capacity(cfg.draws),
        divergences: 0,
        warmup_divergences: 0,
        max_depth_hits: 0,
        step_size: eps,
        mean_accept: 0.0,
    };
    let mut accept_sum = 0.0;
    for iter in 0..cfg.warmup + cfg.draws {
        let stats = transition(target, &mut point, eps, &inv_mass, cfg.max_depth, rng);
        if iter < cfg.warmup {
            out.warmup_divergences += stats.divergent as usize;
            eps = da.update(stats.accept);
            if schedule.collecting(iter) {
                welford.push(&point.q);
            }
            if schedule.window_closes_after(iter) {
                welford.shrunk_variance(&mut inv_mass);
                welford.reset();
                eps = find_reasonable_epsilon(target, &point, &inv_mass, rng);
                da = DualAveraging::new(eps, cfg.target_accept);
            }
            if iter + 1 == cfg.warmup {
                eps = da.final_eps();
            }
        } else {
            out.draws.extend_from_slice(&point.q);
            out.logps.push(point.logp);
            out.divergences += stats.divergent as usize;
            out.max_depth_hits += stats.depth_hit as usize;
            accept_sum += stats.accept;
        }
    }
    out.step_size = eps;
    out.mean_accept = accept_sum / cfg.draws as f64;
    Ok(out)
}
