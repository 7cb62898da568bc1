//! Dirichlet regression over compressed proportions with hierarchical concept
//! and language effects plus phylogenetic and areal Gaussian-process terms.
//!
//! Observation i (language l, concept j) has compressed proportions y' over
//! the K levels of one category and log density
//!
//! ```text
//! ll_i = ln G(theta) - sum_k ln G(theta mu_k) + sum_k (theta mu_k - 1) ln y'_k
//! mu = softmax(eta),  eta_K = 0 (reference level)
//! eta_k = alpha_k + tau_c[k] c_raw[j,k] + tau_l l_raw[l,k]
//!         + sigma_p (L_p z_p)[l,k] + sigma_a (L_a z_a)[l,k]
//! ```
//!
//! with L_p / L_a the Cholesky factors of the exponential-decay correlation
//! over the masked patristic / areal distances (non-centered throughout).
//! Inactive controls in a reduced variant skip their eta term but keep their
//! parameters and priors, so all variants share one parameter space and the
//! reduced posterior is exactly the full posterior at sigma = 0.
//!
//! The unconstrained vector stores positives on the log scale; the posterior
//! includes the change-of-variables terms, and its gradient is exact.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::covariance::{areal_distance, patristic_distance, DistanceMatrix, DEFAULT_CUTOFF_KM};
use crate::linalg::{cholesky, cholesky_with_grad, lower_matvec, lower_t_matvec};
use crate::phonology::{Category, ProportionTable};
use crate::special::{digamma, ln_gamma, ln_gamma_digamma, logit};

const LN_2PI: f64 = 1.8378770664093453;
const MODEL_JITTER: f64 = 1e-8;
/// Unconstrained log-scale parameters outside this band are rejected outright.
const LOG_SCALE_LIMIT: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("observation {index}: {message}")]
    BadObservation { index: usize, message: String },
    #[error("distance matrix labels do not match the model's language list ({0})")]
    LabelMismatch(&'static str),
    #[error("language `{0}` in the proportion table is missing from the corpus")]
    UnknownLanguage(String),
    #[error("concept `{0}` in the proportion table is missing from the corpus")]
    UnknownConcept(String),
    #[error("unknown control variant `{0}` (expected full, phylo_only, areal_only, or none)")]
    UnknownVariant(String),
}

/// Prior hyperparameters. Positive scales get half-normal priors, decay and
/// precision get gammas (shape/rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    pub alpha_sd: f64,
    pub tau_concept_sd: f64,
    pub tau_language_sd: f64,
    pub sigma_sd: f64,
    pub phi_shape: f64,
    pub phi_rate: f64,
    pub theta_shape: f64,
    pub theta_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            alpha_sd: 1.0,
            tau_concept_sd: 1.0,
            tau_language_sd: 1.0,
            sigma_sd: 1.0,
            phi_shape: 2.0,
            phi_rate: 1.0,
            theta_shape: 2.0,
            theta_rate: 0.1,
        }
    }
}

/// Which Gaussian-process controls enter the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    Full,
    PhyloOnly,
    ArealOnly,
    None,
}

impl ControlVariant {
    pub const ALL: &'static [ControlVariant] = &[
        ControlVariant::Full,
        ControlVariant::PhyloOnly,
        ControlVariant::ArealOnly,
        ControlVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlVariant::Full => "full",
            ControlVariant::PhyloOnly => "phylo_only",
            ControlVariant::ArealOnly => "areal_only",
            ControlVariant::None => "none",
        }
    }

    pub fn phylo_active(self) -> bool {
        matches!(self, ControlVariant::Full | ControlVariant::PhyloOnly)
    }

    pub fn areal_active(self) -> bool {
        matches!(self, ControlVariant::Full | ControlVariant::ArealOnly)
    }
}

impl std::fmt::Display for ControlVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ControlVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<ControlVariant, ModelError> {
        ControlVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// One (language, concept) row of compressed proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub language: usize,
    pub concept: usize,
    pub proportions: Vec<f64>,
    pub weight: f64,
}

/// Everything a fit needs: the design, the data, the distances, the priors.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub category: Category,
    pub levels: Vec<String>,
    pub language_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    pub observations: Vec<Observation>,
    pub phylo: DistanceMatrix,
    pub areal: DistanceMatrix,
    pub priors: Priors,
}

impl ModelSpec {
    /// Builds a spec from a proportion table plus the corpus records that give
    /// languages their classification paths and coordinates. Only languages
    /// and concepts with at least one row enter the design.
    pub fn from_proportions(
        corpus: &Corpus,
        table: &ProportionTable,
        priors: Priors,
        cutoff_km: Option<f64>,
        weighted: bool,
    ) -> Result<ModelSpec, ModelError> {
        use std::collections::BTreeSet;
        let lang_ids: BTreeSet<&str> = table.rows.iter().map(|r| r.language_id.as_str()).collect();
        let concept_ids: BTreeSet<&str> = table.rows.iter().map(|r| r.concept_id.as_str()).collect();
        let mut languages = Vec::with_capacity(lang_ids.len());
        for id in &lang_ids {
            let idx = corpus
                .language_index(id)
                .ok_or_else(|| ModelError::UnknownLanguage(id.to_string()))?;
            languages.push(corpus.languages[idx].clone());
        }
        for id in &concept_ids {
            if corpus.concept_index(id).is_none() {
                return Err(ModelError::UnknownConcept(id.to_string()));
            }
        }
        let language_ids: Vec<String> = lang_ids.iter().map(|s| s.to_string()).collect();
        let concept_ids: Vec<String> = concept_ids.iter().map(|s| s.to_string()).collect();
        let lang_pos = |id: &str| language_ids.binary_search_by(|x| x.as_str().cmp(id)).unwrap();
        let concept_pos = |id: &str| concept_ids.binary_search_by(|x| x.as_str().cmp(id)).unwrap();
        let mean_total = table.rows.iter().map(|r| r.total as f64).sum::<f64>()
            / table.rows.len().max(1) as f64;
        let observations = table
            .rows
            .iter()
            .map(|r| Observation {
                language: lang_pos(&r.language_id),
                concept: concept_pos(&r.concept_id),
                proportions: r.proportions.clone(),
                weight: if weighted { r.total as f64 / mean_total } else { 1.0 },
            })
            .collect();
        let spec = ModelSpec {
            category: table.category,
            levels: table.levels.clone(),
            language_ids,
            concept_ids,
            observations,
            phylo: patristic_distance(&languages),
            areal: areal_distance(&languages, cutoff_km.unwrap_or(DEFAULT_CUTOFF_KM)),
            priors,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.levels.len();
        if k < 2 {
            return Err(ModelError::TooFewLevels(k));
        }
        // an observation-free spec is legal: the posterior is the prior
        for (i, obs) in self.observations.iter().enumerate() {
            let bad = |message: String| ModelError::BadObservation { index: i, message };
            if obs.language >= self.language_ids.len() {
                return Err(bad(format!("language index {} out of range", obs.language)));
            }
            if obs.concept >= self.concept_ids.len() {
                return Err(bad(format!("concept index {} out of range", obs.concept)));
            }
            if obs.proportions.len() != k {
                return Err(bad(format!(
                    "expected {k} proportions, got {}",
                    obs.proportions.len()
                )));
            }
            if !obs.proportions.iter().all(|&p| p > 0.0 && p < 1.0) {
                return Err(bad("proportions must be strictly inside (0, 1)".into()));
            }
            let s: f64 = obs.proportions.iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(bad(format!("proportions sum to {s}, not 1")));
            }
            if !(obs.weight > 0.0) {
                return Err(bad(format!("weight {} must be positive", obs.weight)));
            }
        }
        if self.phylo.labels != self.language_ids {
            return Err(ModelError::LabelMismatch("phylo"));
        }
        if self.areal.labels != self.language_ids {
            return Err(ModelError::LabelMismatch("areal"));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_levels: self.levels.len(),
            n_languages: self.language_ids.len(),
            n_concepts: self.concept_ids.len(),
        }
    }
}

/// Index map for the flat parameter vector. Order: alpha (K-1), log tau_c
/// (K-1), log tau_l, log sigma_p, log sigma_a, log phi_p, log phi_a,
/// log theta, then concept-major c_raw, language-major l_raw, z_p, z_a.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n_levels: usize,
    pub n_languages: usize,
    pub n_concepts: usize,
}

impl ParamLayout {
    pub fn kfree(&self) -> usize {
        self.n_levels - 1
    }

    pub fn dim(&self) -> usize {
        let kf = self.kfree();
        2 * kf + 6 + kf * (self.n_concepts + 3 * self.n_languages)
    }

    pub fn alpha(&self) -> usize {
        0
    }
    pub fn log_tau_c(&self) -> usize {
        self.kfree()
    }
    pub fn log_tau_l(&self) -> usize {
        2 * self.kfree()
    }
    pub fn log_sigma_p(&self) -> usize {
        2 * self.kfree() + 1
    }
    pub fn log_sigma_a(&self) -> usize {
        2 * self.kfree() + 2
    }
    pub fn log_phi_p(&self) -> usize {
        2 * self.kfree() + 3
    }
    pub fn log_phi_a(&self) -> usize {
        2 * self.kfree() + 4
    }
    pub fn log_theta(&self) -> usize {
        2 * self.kfree() + 5
    }
    pub fn c_raw(&self) -> usize {
        2 * self.kfree() + 6
    }
    pub fn l_raw(&self) -> usize {
        self.c_raw() + self.n_concepts * self.kfree()
    }
    pub fn z_phylo(&self) -> usize {
        self.l_raw() + self.n_languages * self.kfree()
    }
    pub fn z_areal(&self) -> usize {
        self.z_phylo() + self.n_languages * self.kfree()
    }

    /// Human-readable names for every flat slot, on the constrained scale.
    pub fn names(&self, levels: &[String], language_ids: &[String], concept_ids: &[String]) -> Vec<String> {
        let kf = self.kfree();
        let mut names = Vec::with_capacity(self.dim());
        for k in 0..kf {
            names.push(format!("alpha[{}]", levels[k]));
        }
        for k in 0..kf {
            names.push(format!("tau_c[{}]", levels[k]));
        }
        names.push("tau_l".into());
        names.push("sigma_p".into());
        names.push("sigma_a".into());
        names.push("phi_p".into());
        names.push("phi_a".into());
        names.push("theta".into());
        for c in concept_ids {
            for k in 0..kf {
                names.push(format!("c_raw[{c},{}]", levels[k]));
            }
        }
        for prefix in ["l_raw", "z_p", "z_a"] {
            for l in language_ids {
                for k in 0..kf {
                    names.push(format!("{prefix}[{l},{}]", levels[k]));
                }
            }
        }
        names
    }
}

/// Constrained-scale view of one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha: Vec<f64>,
    pub tau_concept: Vec<f64>,
    pub tau_language: f64,
    pub sigma_phylo: f64,
    pub sigma_areal: f64,
    pub phi_phylo: f64,
    pub phi_areal: f64,
    pub theta: f64,
    pub concept_raw: Vec<f64>,
    pub language_raw: Vec<f64>,
    pub z_phylo: Vec<f64>,
    pub z_areal: Vec<f64>,
}

impl ParameterVector {
    pub fn from_unconstrained(layout: &ParamLayout, u: &[f64]) -> ParameterVector {
        assert_eq!(u.len(), layout.dim());
        let kf = layout.kfree();
        let seg = |start: usize, len: usize| u[start..start + len].to_vec();
        ParameterVector {
            alpha: seg(layout.alpha(), kf),
            tau_concept: u[layout.log_tau_c()..layout.log_tau_c() + kf]
                .iter()
                .map(|v| v.exp())
                .collect(),
            tau_language: u[layout.log_tau_l()].exp(),
            sigma_phylo: u[layout.log_sigma_p()].exp(),
            sigma_areal: u[layout.log_sigma_a()].exp(),
            phi_phylo: u[layout.log_phi_p()].exp(),
            phi_areal: u[layout.log_phi_a()].exp(),
            theta: u[layout.log_theta()].exp(),
            concept_raw: seg(layout.c_raw(), layout.n_concepts * kf),
            language_raw: seg(layout.l_raw(), layout.n_languages * kf),
            z_phylo: seg(layout.z_phylo(), layout.n_languages * kf),
            z_areal: seg(layout.z_areal(), layout.n_languages * kf),
        }
    }

    pub fn to_unconstrained(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut u = self.to_constrained_flat(layout);
        let kf = layout.kfree();
        for i in layout.log_tau_c()..layout.log_tau_c() + kf {
            u[i] = u[i].ln();
        }
        for i in layout.log_tau_l()..=layout.log_theta() {
            u[i] = u[i].ln();
        }
        u
    }

    /// Flat vector in layout order but on the constrained scale (positives
    /// stored as themselves). This is the representation posterior draws are
    /// stored in.
    pub fn to_constrained_flat(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut v = Vec::with_capacity(layout.dim());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.tau_concept);
        v.push(self.tau_language);
        v.push(self.sigma_phylo);
        v.push(self.sigma_areal);
        v.push(self.phi_phylo);
        v.push(self.phi_areal);
        v.push(self.theta);
        v.extend_from_slice(&self.concept_raw);
        v.extend_from_slice(&self.language_raw);
        v.extend_from_slice(&self.z_phylo);
        v.extend_from_slice(&self.z_areal);
        debug_assert_eq!(v.len(), layout.dim());
        v
    }

    pub fn from_constrained_flat(layout: &ParamLayout, v: &[f64]) -> ParameterVector {
        assert_eq!(v.len(), layout.dim());
        let kf = layout.kfree();
        let seg = |start: usize, len: usize| v[start..start + len].to_vec();
        ParameterVector {
            alpha: seg(layout.alpha(), kf),
            tau_concept: seg(layout.log_tau_c(), kf),
            tau_language: v[layout.log_tau_l()],
            sigma_phylo: v[layout.log_sigma_p()],
            sigma_areal: v[layout.log_sigma_a()],
            phi_phylo: v[layout.log_phi_p()],
            phi_areal: v[layout.log_phi_a()],
            theta: v[layout.log_theta()],
            concept_raw: seg(layout.c_raw(), layout.n_concepts * kf),
            language_raw: seg(layout.l_raw(), layout.n_languages * kf),
            z_phylo: seg(layout.z_phylo(), layout.n_languages * kf),
            z_areal: seg(layout.z_areal(), layout.n_languages * kf),
        }
    }

    /// Prior-mode starting point on the unconstrained scale.
    pub fn prior_mode(layout: &ParamLayout, priors: &Priors) -> Vec<f64> {
        let mut u = vec![0.0; layout.dim()];
        // half-normal + Jacobian peaks at the prior sd; gamma + Jacobian at
        // shape/rate
        u[layout.log_tau_l()] = priors.tau_language_sd.ln();
        u[layout.log_sigma_p()] = priors.sigma_sd.ln();
        u[layout.log_sigma_a()] = priors.sigma_sd.ln();
        u[layout.log_phi_p()] = (priors.phi_shape / priors.phi_rate).ln();
        u[layout.log_phi_a()] = (priors.phi_shape / priors.phi_rate).ln();
        u[layout.log_theta()] = (priors.theta_shape / priors.theta_rate).ln();
        for k in 0..layout.kfree() {
            u[layout.log_tau_c() + k] = priors.tau_concept_sd.ln();
        }
        u
    }
}

struct GpBlock {
    idx: Vec<usize>,
    dist: Array2<f64>,
    mask: Array2<bool>,
}

impl GpBlock {
    fn from_distance(dist: &DistanceMatrix) -> Vec<GpBlock> {
        dist.blocks()
            .into_iter()
            .map(|idx| {
                let n = idx.len();
                let mut d = Array2::zeros((n, n));
                let mut m = Array2::from_elem((n, n), false);
                for (a, &i) in idx.iter().enumerate() {
                    for (b, &j) in idx.iter().enumerate() {
                        d[(a, b)] = dist.values[(i, j)];
                        m[(a, b)] = dist.mask[(i, j)];
                    }
                }
                GpBlock { idx, dist: d, mask: m }
            })
            .collect()
    }
}

/// Per-evaluation state of one GP control.
struct GpEval {
    /// v[l,k] = (L z)[l,k], language-major.
    v: Vec<f64>,
    /// dv[l,k] = (dL/dphi z)[l,k]; empty when no gradient is needed.
    dv: Vec<f64>,
    /// Per-block factors for the transpose product in the z gradient.
    factors: Vec<Array2<f64>>,
}

/// Compiled model: spec data flattened for fast evaluation.
pub struct Model {
    pub layout: ParamLayout,
    pub variant: ControlVariant,
    pub priors: Priors,
    n_obs: usize,
    obs_lang: Vec<u32>,
    obs_concept: Vec<u32>,
    weights: Vec<f64>,
    /// ln y', row-major n_obs x K.
    ln_y: Vec<f64>,
    phylo_blocks: Vec<GpBlock>,
    areal_blocks: Vec<GpBlock>,
}

impl Model {
    pub fn new(spec: &ModelSpec, variant: ControlVariant) -> Result<Model, ModelError> {
        spec.validate()?;
        let layout = spec.layout();
        let k = layout.n_levels;
        let n_obs = spec.observations.len();
        let mut obs_lang = Vec::with_capacity(n_obs);
        let mut obs_concept = Vec::with_capacity(n_obs);
        let mut weights = Vec::with_capacity(n_obs);
        let mut ln_y = Vec::with_capacity(n_obs * k);
        for obs in &spec.observations {
            obs_lang.push(obs.language as u32);
            obs_concept.push(obs.concept as u32);
            weights.push(obs.weight);
            ln_y.extend(obs.proportions.iter().map(|&p| p.ln()));
        }
        Ok(Model {
            layout,
            variant,
            priors: spec.priors,
            n_obs,
            obs_lang,
            obs_concept,
            weights,
            ln_y,
            phylo_blocks: GpBlock::from_distance(&spec.phylo),
            areal_blocks: GpBlock::from_distance(&spec.areal),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    fn gp_eval(
        blocks: &[GpBlock],
        phi: f64,
        z: &[f64],
        kfree: usize,
        n_lang: usize,
        want_grad: bool,
    ) -> Option<GpEval> {
        let mut v = vec![0.0; n_lang * kfree];
        let mut dv = if want_grad { vec![0.0; n_lang * kfree] } else { Vec::new() };
        let mut factors = Vec::with_capacity(blocks.len());
        let mut zb = Vec::new();
        let mut out = Vec::new();
        for block in blocks {
            let n = block.idx.len();
            let mut a = Array2::zeros((n, n));
            let mut da = Array2::zeros((n, n));
            for i in 0..n {
                a[(i, i)] = 1.0 + MODEL_JITTER;
                for j in (i + 1)..n {
                    if !block.mask[(i, j)] {
                        let c = (-phi * block.dist[(i, j)]).exp();
                        a[(i, j)] = c;
                        a[(j, i)] = c;
                        let dc = -block.dist[(i, j)] * c;
                        da[(i, j)] = dc;
                        da[(j, i)] = dc;
                    }
                }
            }
            let (l, dl) = if want_grad {
                match cholesky_with_grad(&a, &da) {
                    Ok(pair) => pair,
                    Err(_) => return None,
                }
            } else {
                match cholesky(&a) {
                    Ok(l) => (l, Array2::zeros((0, 0))),
                    Err(_) => return None,
                }
            };
            zb.resize(n, 0.0);
            out.resize(n, 0.0);
            for k in 0..kfree {
                for (bi, &lang) in block.idx.iter().enumerate() {
                    zb[bi] = z[lang * kfree + k];
                }
                lower_matvec(&l, &zb, &mut out);
                for (bi, &lang) in block.idx.iter().enumerate() {
                    v[lang * kfree + k] = out[bi];
                }
                if want_grad {
                    lower_matvec(&dl, &zb, &mut out);
                    for (bi, &lang) in block.idx.iter().enumerate() {
                        dv[lang * kfree + k] = out[bi];
                    }
                }
            }
            factors.push(l);
        }
        Some(GpEval { v, dv, factors })
    }

    /// Log posterior (unnormalized only by data constants, which are kept) on
    /// the unconstrained scale, including the log|Jacobian| of the log
    /// transforms. Returns negative infinity for numerically unusable points.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        self.eval(u, None)
    }

    /// Same as [`log_posterior`](Self::log_posterior) but also fills `grad`.
    /// On a rejected point the gradient is zeroed.
    pub fn log_posterior_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(u, Some(grad))
    }

    fn eval(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let layout = &self.layout;
        assert_eq!(u.len(), layout.dim());
        if let Some(g) = grad.as_deref_mut() {
            assert_eq!(g.len(), layout.dim());
            g.fill(0.0);
        }
        let kf = layout.kfree();
        let k_total = layout.n_levels;
        let n_lang = layout.n_languages;

        // reject absurd log-scale proposals before exponentiating
        for i in layout.log_tau_c()..=layout.log_theta() {
            if u[i].abs() > LOG_SCALE_LIMIT {
                return f64::NEG_INFINITY;
            }
        }
        let alpha = &u[layout.alpha()..layout.alpha() + kf];
        let tau_c: Vec<f64> = u[layout.log_tau_c()..layout.log_tau_c() + kf]
            .iter()
            .map(|v| v.exp())
            .collect();
        let tau_l = u[layout.log_tau_l()].exp();
        let sigma_p = u[layout.log_sigma_p()].exp();
        let sigma_a = u[layout.log_sigma_a()].exp();
        let phi_p = u[layout.log_phi_p()].exp();
        let phi_a = u[layout.log_phi_a()].exp();
        let theta = u[layout.log_theta()].exp();
        let c_raw = &u[layout.c_raw()..layout.c_raw() + layout.n_concepts * kf];
        let l_raw = &u[layout.l_raw()..layout.l_raw() + n_lang * kf];
        let z_p = &u[layout.z_phylo()..layout.z_phylo() + n_lang * kf];
        let z_a = &u[layout.z_areal()..layout.z_areal() + n_lang * kf];

        let want_grad = grad.is_some();
        let gp_p = if self.variant.phylo_active() {
            match Model::gp_eval(&self.phylo_blocks, phi_p, z_p, kf, n_lang, want_grad) {
                Some(g) => Some(g),
                None => return f64::NEG_INFINITY,
            }
        } else {
            None
        };
        let gp_a = if self.variant.areal_active() {
            match Model::gp_eval(&self.areal_blocks, phi_a, z_a, kf, n_lang, want_grad) {
                Some(g) => Some(g),
                None => return f64::NEG_INFINITY,
            }
        } else {
            None
        };

        let ln_gamma_theta = ln_gamma(theta);
        let digamma_theta = digamma(theta);

        // combined per-language offset, hoisted out of the row loop
        let mut lang_off = vec![0.0; n_lang * kf];
        for (i, off) in lang_off.iter_mut().enumerate() {
            let mut e = tau_l * l_raw[i];
            if let Some(gp) = &gp_p {
                e += sigma_p * gp.v[i];
            }
            if let Some(gp) = &gp_a {
                e += sigma_a * gp.v[i];
            }
            *off = e;
        }

        let mut value = 0.0;
        let mut eta = vec![0.0; k_total];
        let mut mu = vec![0.0; k_total];
        let mut gk = vec![0.0; k_total];
        let mut g_alpha = vec![0.0; kf];
        let mut g_tau_c_acc = vec![0.0; kf];
        let mut g_c_acc = vec![0.0; layout.n_concepts * kf];
        let mut e_lang = vec![0.0; n_lang * kf];
        let mut d_theta_acc = 0.0;

        for row in 0..self.n_obs {
            let li = self.obs_lang[row] as usize;
            let cj = self.obs_concept[row] as usize;
            let loff = li * kf;
            let coff = cj * kf;
            let lny = &self.ln_y[row * k_total..(row + 1) * k_total];
            let mut m = 0.0f64; // reference eta is 0
            for k in 0..kf {
                let e = alpha[k] + tau_c[k] * c_raw[coff + k] + lang_off[loff + k];
                eta[k] = e;
                if e > m {
                    m = e;
                }
            }
            eta[kf] = 0.0;
            let mut norm = 0.0;
            for k in 0..k_total {
                let ex = (eta[k] - m).exp();
                mu[k] = ex;
                norm += ex;
            }
            let inv_norm = 1.0 / norm;
            let w = self.weights[row];
            let mut ll = ln_gamma_theta;
            let mut gbar = 0.0;
            let mut d_theta_row = 0.0;
            for k in 0..k_total {
                let mu_k = mu[k] * inv_norm;
                mu[k] = mu_k;
                let tm = theta * mu_k;
                if tm < 1e-290 {
                    if let Some(g) = grad.as_deref_mut() {
                        g.fill(0.0);
                    }
                    return f64::NEG_INFINITY;
                }
                let (lg, dg) = ln_gamma_digamma(tm);
                ll += (tm - 1.0) * lny[k] - lg;
                let g = theta * (lny[k] - dg);
                gk[k] = g;
                gbar += mu_k * g;
                d_theta_row += mu_k * (lny[k] - dg);
            }
            value += w * ll;
            if want_grad {
                d_theta_acc += w * (digamma_theta + d_theta_row);
                for k in 0..kf {
                    let e = w * mu[k] * (gk[k] - gbar);
                    g_alpha[k] += e;
                    g_c_acc[coff + k] += e;
                    g_tau_c_acc[k] += e * c_raw[coff + k];
                    e_lang[loff + k] += e;
                }
            }
        }
        if !value.is_finite() {
            if let Some(g) = grad.as_deref_mut() {
                g.fill(0.0);
            }
            return f64::NEG_INFINITY;
        }

        // priors and Jacobians
        let pr = &self.priors;
        let half_normal = |x: f64, lx: f64, sd: f64| {
            // density of half-normal(sd) at x plus the log-Jacobian lx
            0.5 * (2.0 / std::f64::consts::PI).ln() - sd.ln() - 0.5 * x * x / (sd * sd) + lx
        };
        let gamma_log = |x: f64, lx: f64, shape: f64, rate: f64| {
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x + lx
        };
        for k in 0..kf {
            value += -0.5 * alpha[k] * alpha[k] / (pr.alpha_sd * pr.alpha_sd)
                - pr.alpha_sd.ln()
                - 0.5 * LN_2PI;
            value += half_normal(tau_c[k], u[layout.log_tau_c() + k], pr.tau_concept_sd);
        }
        value += half_normal(tau_l, u[layout.log_tau_l()], pr.tau_language_sd);
        value += half_normal(sigma_p, u[layout.log_sigma_p()], pr.sigma_sd);
        value += half_normal(sigma_a, u[layout.log_sigma_a()], pr.sigma_sd);
        value += gamma_log(phi_p, u[layout.log_phi_p()], pr.phi_shape, pr.phi_rate);
        value += gamma_log(phi_a, u[layout.log_phi_a()], pr.phi_shape, pr.phi_rate);
        value += gamma_log(theta, u[layout.log_theta()], pr.theta_shape, pr.theta_rate);
        let mut std_normal_sum = 0.0;
        for &x in c_raw.iter().chain(l_raw).chain(z_p).chain(z_a) {
            std_normal_sum += x * x;
        }
        let n_std = (layout.n_concepts + 3 * n_lang) * kf;
        value += -0.5 * std_normal_sum - 0.5 * n_std as f64 * LN_2PI;

        let Some(g) = grad else {
            return value;
        };

        // data gradients assembled from the accumulators
        for k in 0..kf {
            g[layout.alpha() + k] =
                g_alpha[k] - alpha[k] / (pr.alpha_sd * pr.alpha_sd);
            g[layout.log_tau_c() + k] = tau_c[k] * g_tau_c_acc[k] + 1.0
                - tau_c[k] * tau_c[k] / (pr.tau_concept_sd * pr.tau_concept_sd);
        }
        for j in 0..layout.n_concepts {
            for k in 0..kf {
                g[layout.c_raw() + j * kf + k] =
                    tau_c[k] * g_c_acc[j * kf + k] - c_raw[j * kf + k];
            }
        }
        let mut g_tau_l_acc = 0.0;
        for l in 0..n_lang {
            for k in 0..kf {
                let e = e_lang[l * kf + k];
                g[layout.l_raw() + l * kf + k] = tau_l * e - l_raw[l * kf + k];
                g_tau_l_acc += e * l_raw[l * kf + k];
            }
        }
        g[layout.log_tau_l()] = tau_l * g_tau_l_acc + 1.0
            - tau_l * tau_l / (pr.tau_language_sd * pr.tau_language_sd);
        g[layout.log_theta()] =
            theta * d_theta_acc + pr.theta_shape - pr.theta_rate * theta;

        let apply_gp = |gp: Option<&GpEval>,
                            blocks: &[GpBlock],
                            sigma: f64,
                            phi: f64,
                            z: &[f64],
                            z_off: usize,
                            sigma_off: usize,
                            phi_off: usize,
                            g: &mut [f64]| {
            match gp {
                Some(gp) => {
                    let mut g_sigma_acc = 0.0;
                    let mut g_phi_acc = 0.0;
                    for i in 0..n_lang * kf {
                        g_sigma_acc += gp.v[i] * e_lang[i];
                        g_phi_acc += gp.dv[i] * e_lang[i];
                    }
                    let mut eb = Vec::new();
                    let mut out = Vec::new();
                    for (block, l) in blocks.iter().zip(&gp.factors) {
                        let n = block.idx.len();
                        eb.resize(n, 0.0);
                        out.resize(n, 0.0);
                        for k in 0..kf {
                            for (bi, &lang) in block.idx.iter().enumerate() {
                                eb[bi] = e_lang[lang * kf + k];
                            }
                            lower_t_matvec(l, &eb, &mut out);
                            for (bi, &lang) in block.idx.iter().enumerate() {
                                let slot = lang * kf + k;
                                g[z_off + slot] = sigma * out[bi] - z[slot];
                            }
                        }
                    }
                    g[sigma_off] = sigma * g_sigma_acc + 1.0
                        - sigma * sigma / (pr.sigma_sd * pr.sigma_sd);
                    g[phi_off] =
                        phi * sigma * g_phi_acc + pr.phi_shape - pr.phi_rate * phi;
                }
                None => {
                    // inactive control: parameters keep their priors
                    for (slot, &zv) in z.iter().enumerate() {
                        g[z_off + slot] = -zv;
                    }
                    g[sigma_off] = 1.0 - sigma * sigma / (pr.sigma_sd * pr.sigma_sd);
                    g[phi_off] = pr.phi_shape - pr.phi_rate * phi;
                }
            }
        };
        apply_gp(
            gp_p.as_ref(),
            &self.phylo_blocks,
            sigma_p,
            phi_p,
            z_p,
            layout.z_phylo(),
            layout.log_sigma_p(),
            layout.log_phi_p(),
            g,
        );
        apply_gp(
            gp_a.as_ref(),
            &self.areal_blocks,
            sigma_a,
            phi_a,
            z_a,
            layout.z_areal(),
            layout.log_sigma_a(),
            layout.log_phi_a(),
            g,
        );
        value
    }

    /// Log posterior evaluated directly on the constrained scale, without the
    /// change-of-variables terms. Unlike the unconstrained form this admits
    /// exact zeros for the GP scales, which is how variant-reduction checks
    /// are phrased.
    pub fn log_posterior_constrained(&self, p: &ParameterVector) -> f64 {
        let layout = &self.layout;
        let kf = layout.kfree();
        let data = self.log_likelihood(p);
        if !data.is_finite() {
            return f64::NEG_INFINITY;
        }
        let pr = &self.priors;
        let half_normal = |x: f64, sd: f64| {
            0.5 * (2.0 / std::f64::consts::PI).ln() - sd.ln() - 0.5 * x * x / (sd * sd)
        };
        let gamma_log = |x: f64, shape: f64, rate: f64| {
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
        };
        let mut value = data;
        for k in 0..kf {
            value += -0.5 * p.alpha[k] * p.alpha[k] / (pr.alpha_sd * pr.alpha_sd)
                - pr.alpha_sd.ln()
                - 0.5 * LN_2PI;
            value += half_normal(p.tau_concept[k], pr.tau_concept_sd);
        }
        value += half_normal(p.tau_language, pr.tau_language_sd);
        value += half_normal(p.sigma_phylo, pr.sigma_sd);
        value += half_normal(p.sigma_areal, pr.sigma_sd);
        value += gamma_log(p.phi_phylo, pr.phi_shape, pr.phi_rate);
        value += gamma_log(p.phi_areal, pr.phi_shape, pr.phi_rate);
        value += gamma_log(p.theta, pr.theta_shape, pr.theta_rate);
        let mut ss = 0.0;
        let mut n = 0usize;
        for x in p
            .concept_raw
            .iter()
            .chain(&p.language_raw)
            .chain(&p.z_phylo)
            .chain(&p.z_areal)
        {
            ss += x * x;
            n += 1;
        }
        value - 0.5 * ss - 0.5 * n as f64 * LN_2PI
    }

    /// Linear predictor rows (n_obs x K, reference level last, pinned to 0).
    pub fn linear_predictor(&self, p: &ParameterVector) -> Array2<f64> {
        let layout = &self.layout;
        let kf = layout.kfree();
        let n_lang = layout.n_languages;
        let gp_p = if self.variant.phylo_active() && p.sigma_phylo != 0.0 {
            Model::gp_eval(&self.phylo_blocks, p.phi_phylo, &p.z_phylo, kf, n_lang, false)
        } else {
            None
        };
        let gp_a = if self.variant.areal_active() && p.sigma_areal != 0.0 {
            Model::gp_eval(&self.areal_blocks, p.phi_areal, &p.z_areal, kf, n_lang, false)
        } else {
            None
        };
        let mut eta = Array2::zeros((self.n_obs, layout.n_levels));
        for row in 0..self.n_obs {
            let li = self.obs_lang[row] as usize;
            let cj = self.obs_concept[row] as usize;
            for k in 0..kf {
                let mut e = p.alpha[k]
                    + p.tau_concept[k] * p.concept_raw[cj * kf + k]
                    + p.tau_language * p.language_raw[li * kf + k];
                if let Some(gp) = &gp_p {
                    e += p.sigma_phylo * gp.v[li * kf + k];
                }
                if let Some(gp) = &gp_a {
                    e += p.sigma_areal * gp.v[li * kf + k];
                }
                eta[(row, k)] = e;
            }
        }
        eta
    }

    /// Weighted data log likelihood at a constrained parameter point.
    pub fn log_likelihood(&self, p: &ParameterVector) -> f64 {
        self.pointwise_log_lik(p).iter().sum()
    }

    /// Per-observation weighted log likelihood contributions.
    pub fn pointwise_log_lik(&self, p: &ParameterVector) -> Vec<f64> {
        let eta = self.linear_predictor(p);
        let k_total = self.layout.n_levels;
        let theta = p.theta;
        let ln_gamma_theta = ln_gamma(theta);
        let mut out = Vec::with_capacity(self.n_obs);
        let mut mu = vec![0.0; k_total];
        for row in 0..self.n_obs {
            let mut m = 0.0f64;
            for k in 0..k_total {
                if eta[(row, k)] > m {
                    m = eta[(row, k)];
                }
            }
            let mut norm = 0.0;
            for k in 0..k_total {
                let ex = (eta[(row, k)] - m).exp();
                mu[k] = ex;
                norm += ex;
            }
            let lny = &self.ln_y[row * k_total..(row + 1) * k_total];
            let mut ll = ln_gamma_theta;
            for k in 0..k_total {
                let tm = theta * mu[k] / norm;
                ll += (tm - 1.0) * lny[k] - ln_gamma(tm);
            }
            out.push(self.weights[row] * ll);
        }
        out
    }
}

/// Summary row of the prior-predictive report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorReport {
    pub n_draws: usize,
    pub rows: Vec<PriorSummaryRow>,
    /// Share of prior draws whose implied concept-level log odds exceed 1 in
    /// magnitude; a sanity check that the priors are weakly regularizing.
    pub p_abs_log_odds_gt_1: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn summarize(name: &str, mut xs: Vec<f64>) -> PriorSummaryRow {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    PriorSummaryRow {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        q025: quantile_sorted(&xs, 0.025),
        q25: quantile_sorted(&xs, 0.25),
        q50: quantile_sorted(&xs, 0.50),
        q75: quantile_sorted(&xs, 0.75),
        q975: quantile_sorted(&xs, 0.975),
    }
}

/// Simulates the scalar priors and the implied concept-level log odds for the
/// first level of the category.
pub fn prior_simulate(spec: &ModelSpec, n_draws: usize, seed: u64) -> PriorReport {
    use rand::SeedableRng;
    assert!(n_draws >= 2, "need at least 2 prior draws");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pr = &spec.priors;
    let kf = spec.levels.len() - 1;
    let gamma_phi = GammaDist::new(pr.phi_shape, 1.0 / pr.phi_rate).unwrap();
    let gamma_theta = GammaDist::new(pr.theta_shape, 1.0 / pr.theta_rate).unwrap();
    let mut alpha0 = Vec::with_capacity(n_draws);
    let mut tau_c = Vec::with_capacity(n_draws);
    let mut tau_l = Vec::with_capacity(n_draws);
    let mut sigma_p = Vec::with_capacity(n_draws);
    let mut sigma_a = Vec::with_capacity(n_draws);
    let mut phi_p = Vec::with_capacity(n_draws);
    let mut phi_a = Vec::with_capacity(n_draws);
    let mut theta = Vec::with_capacity(n_draws);
    let mut log_odds = Vec::with_capacity(n_draws);
    let mut exceed = 0usize;
    let mut alpha = vec![0.0; kf];
    let mut c_eff = vec![0.0; kf];
    for _ in 0..n_draws {
        for a in alpha.iter_mut() {
            *a = pr.alpha_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let tc = (pr.tau_concept_sd * rng.sample::<f64, _>(StandardNormal)).abs();
        for c in c_eff.iter_mut() {
            *c = tc * rng.sample::<f64, _>(StandardNormal);
        }
        alpha0.push(alpha[0]);
        tau_c.push(tc);
        tau_l.push((pr.tau_language_sd * rng.sample::<f64, _>(StandardNormal)).abs());
        sigma_p.push((pr.sigma_sd * rng.sample::<f64, _>(StandardNormal)).abs());
        sigma_a.push((pr.sigma_sd * rng.sample::<f64, _>(StandardNormal)).abs());
        phi_p.push(gamma_phi.sample(&mut rng));
        phi_a.push(gamma_phi.sample(&mut rng));
        theta.push(gamma_theta.sample(&mut rng));
        let lor = implied_log_odds(&alpha, &c_eff, 0);
        if lor.abs() > 1.0 {
            exceed += 1;
        }
        log_odds.push(lor);
    }
    let rows = vec![
        summarize("alpha", alpha0),
        summarize("tau_concept", tau_c),
        summarize("tau_language", tau_l),
        summarize("sigma_phylo", sigma_p),
        summarize("sigma_areal", sigma_a),
        summarize("phi_phylo", phi_p),
        summarize("phi_areal", phi_a),
        summarize("theta", theta),
        summarize("concept_log_odds", log_odds),
    ];
    PriorReport {
        n_draws,
        rows,
        p_abs_log_odds_gt_1: exceed as f64 / n_draws as f64,
    }
}

/// Log odds of `level` under softmax([alpha + c, 0]) against the baseline
/// softmax([alpha, 0]).
pub fn implied_log_odds(alpha: &[f64], c_eff: &[f64], level: usize) -> f64 {
    let kf = alpha.len();
    debug_assert_eq!(c_eff.len(), kf);
    debug_assert!(level <= kf);
    let softmax_at = |with_c: bool| -> f64 {
        let mut denom = 1.0; // reference level exp(0)
        for k in 0..kf {
            denom += (alpha[k] + if with_c { c_eff[k] } else { 0.0 }).exp();
        }
        let num = if level == kf {
            1.0
        } else {
            (alpha[level] + if with_c { c_eff[level] } else { 0.0 }).exp()
        };
        num / denom
    };
    logit(softmax_at(true)) - logit(softmax_at(false))
}

impl PriorReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "mean", "sd", "q2.5", "q25", "q50", "q75", "q97.5"])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.mean.to_string(),
                r.sd.to_string(),
                r.q025.to_string(),
                r.q25.to_string(),
                r.q50.to_string(),
                r.q75.to_string(),
                r.q975.to_string(),
            ])?;
        }
        w.write_record([
            "p_abs_log_odds_gt_1".to_string(),
            self.p_abs_log_odds_gt_1.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }
}
