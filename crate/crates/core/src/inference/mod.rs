//! Posterior inference: MAP initialization, NUTS sampling across chains,
//! convergence diagnostics, and leave-one-out comparison.

pub mod diagnostics;
pub mod draws;
pub mod loo;
pub mod map;
pub mod nuts;

pub use draws::{Diagnostics, DrawsError, PosteriorDraws};
pub use loo::{compare_loo, psis_loo, LooComparison, LooError, LooResult};
pub use map::{map_estimate, MapOptions, MapResult};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlVariant, Model, ModelError, ModelSpec, ParameterVector};

/// A differentiable unnormalized log density over R^dim.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns the log density and fills `grad`. Non-finite values signal a
    /// rejected point; the gradient must then be zeroed.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(x, grad)
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("MAP optimization failed after {restarts} restarts: {message}")]
    MapFailed { restarts: usize, message: String },
    #[error("chain {chain} failed: {message}")]
    ChainFailed { chain: usize, message: String },
    #[error("sampler needs at least 2 chains, got {0}")]
    TooFewChains(usize),
    #[error("sampler needs at least 1 warmup and 1 kept draw per chain")]
    EmptySchedule,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub chains: usize,
    /// Warmup (adaptation) iterations per chain, discarded.
    pub warmup: usize,
    /// Kept draws per chain.
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub max_depth: usize,
    /// Worker threads for running chains; results are identical regardless.
    pub threads: usize,
    pub store_log_lik: bool,
    pub init_jitter_sd: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            chains: 4,
            warmup: 500,
            draws: 500,
            seed: 42,
            target_accept: 0.9,
            max_depth: 10,
            threads: 1,
            store_log_lik: true,
            init_jitter_sd: 0.1,
        }
    }
}

/// Fits one variant: MAP, then NUTS chains initialized around the mode, then
/// diagnostics and optional pointwise log likelihoods. Chain c draws from
/// stream c+1 of a ChaCha8 generator seeded with `settings.seed`, so results
/// are reproducible and independent of `threads`.
pub fn sample(
    spec: &ModelSpec,
    variant: ControlVariant,
    settings: &SamplerSettings,
) -> Result<PosteriorDraws, InferenceError> {
    if settings.chains < 2 {
        return Err(InferenceError::TooFewChains(settings.chains));
    }
    if settings.warmup == 0 || settings.draws == 0 {
        return Err(InferenceError::EmptySchedule);
    }
    let model = Model::new(spec, variant)?;
    let layout = spec.layout();
    let prior_mode = ParameterVector::prior_mode(&layout, &spec.priors);
    let map = map_estimate(&model, &prior_mode, &MapOptions::default(), settings.seed)?;
    let init_inv_mass = curvature_inv_mass(&model, &map.u);

    let cfg = nuts::ChainSettings {
        warmup: settings.warmup,
        draws: settings.draws,
        target_accept: settings.target_accept,
        max_depth: settings.max_depth,
        init_jitter_sd: settings.init_jitter_sd,
    };
    let run_one = |chain: usize| -> Result<nuts::ChainOutput, InferenceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(chain as u64 + 1);
        let init: Vec<f64> = map
            .u
            .iter()
            .map(|&x| x + settings.init_jitter_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        nuts::run_chain(&model, &init, Some(&init_inv_mass), &cfg, &mut rng)
            .map_err(|message| InferenceError::ChainFailed { chain, message })
    };
    let outputs: Vec<nuts::ChainOutput> = if settings.threads > 1 {
        let run = &run_one;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..settings.chains)
                .map(|c| scope.spawn(move || run(c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("chain thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        (0..settings.chains).map(run_one).collect::<Result<Vec<_>, _>>()?
    };

    let dim = layout.dim();
    let mut draws_flat = Vec::with_capacity(settings.chains * settings.draws * dim);
    for out in &outputs {
        for d in 0..settings.draws {
            let u = &out.draws[d * dim..(d + 1) * dim];
            let p = ParameterVector::from_unconstrained(&layout, u);
            draws_flat.extend(p.to_constrained_flat(&layout));
        }
    }

    let series = |param: usize| {
        Array2::from_shape_fn((settings.chains, settings.draws), |(c, d)| {
            draws_flat[(c * settings.draws + d) * dim + param]
        })
    };
    let mut rhat = Vec::with_capacity(dim);
    let mut ess_bulk = Vec::with_capacity(dim);
    let mut ess_tail = Vec::with_capacity(dim);
    for param in 0..dim {
        let a = series(param);
        rhat.push(diagnostics::split_rhat(&a));
        ess_bulk.push(diagnostics::ess_bulk(&a));
        ess_tail.push(diagnostics::ess_tail(&a));
    }
    let divergent: usize = outputs.iter().map(|o| o.divergences).sum();
    let total = settings.chains * settings.draws;
    let n_obs = model.n_obs();
    let mut log_lik = Vec::new();
    if settings.store_log_lik {
        log_lik.reserve(total * n_obs);
        for i in 0..total {
            let p = ParameterVector::from_constrained_flat(&layout, &draws_flat[i * dim..(i + 1) * dim]);
            log_lik.extend(model.pointwise_log_lik(&p));
        }
    }
    Ok(PosteriorDraws {
        category: spec.category.name().to_string(),
        variant,
        layout,
        levels: spec.levels.clone(),
        language_ids: spec.language_ids.clone(),
        concept_ids: spec.concept_ids.clone(),
        param_names: layout.names(&spec.levels, &spec.language_ids, &spec.concept_ids),
        n_chains: settings.chains,
        n_draws: settings.draws,
        n_obs,
        seed: settings.seed,
        diagnostics: Diagnostics {
            rhat,
            ess_bulk,
            ess_tail,
            divergent_transitions: divergent,
            total_transitions: total,
            max_depth_hits: outputs.iter().map(|o| o.max_depth_hits).sum(),
            step_sizes: outputs.iter().map(|o| o.step_size).collect(),
            mean_accept: outputs.iter().map(|o| o.mean_accept).collect(),
            unreliable: divergent as f64 > 0.1 * total as f64,
            map_log_posterior: map.log_posterior,
        },
        has_log_lik: settings.store_log_lik,
        draws: draws_flat,
        log_lik,
    })
}

/// Inverse-mass seed from the diagonal curvature of the negative log
/// posterior at a mode, by central differences of the gradient. Costs two
/// gradient evaluations per coordinate and gives the warmup a reasonable
/// per-dimension scale before the first adaptation window closes.
fn curvature_inv_mass<T: LogDensity + ?Sized>(target: &T, u: &[f64]) -> Vec<f64> {
    let dim = target.dim();
    let mut q = u.to_vec();
    let mut g_plus = vec![0.0; dim];
    let mut g_minus = vec![0.0; dim];
    let mut inv_mass = vec![1.0; dim];
    for i in 0..dim {
        let h = 1e-4 * (1.0 + u[i].abs());
        q[i] = u[i] + h;
        let lp = target.log_density_and_gradient(&q, &mut g_plus);
        q[i] = u[i] - h;
        let lm = target.log_density_and_gradient(&q, &mut g_minus);
        q[i] = u[i];
        if !lp.is_finite() || !lm.is_finite() {
            continue;
        }
        let curvature = -(g_plus[i] - g_minus[i]) / (2.0 * h);
        if curvature.is_finite() && curvature > 1e-8 {
            inv_mass[i] = (1.0 / curvature).clamp(1e-6, 1e6);
        }
    }
    inv_mass
}

/// Fits every control variant with the same settings, in declaration order:
/// full, phylo_only, areal_only, none.
pub fn fit_variants(
    spec: &ModelSpec,
    settings: &SamplerSettings,
) -> Result<Vec<(ControlVariant, PosteriorDraws)>, InferenceError> {
    ControlVariant::ALL
        .iter()
        .map(|&v| sample(spec, v, settings).map(|d| (v, d)))
        .collect()
}
