//! Synthetic wordlist generation with a known effect structure.
//!
//! The generator builds a language sample (families laid out as balanced
//! binary trees, placed in geographic blobs per macro-area), draws concept,
//! language, phylogenetic, and areal effects on the linear-predictor scale,
//! and renders Dirichlet-multinomial segment counts as concrete forms made of
//! exemplar IPA tokens. Because the forms round-trip through the ordinary
//! annotation pipeline, a fit on simulated data tests the whole chain, and
//! the emitted truth record gives the exact log-odds a correct fit should
//! recover.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConceptRecord, Corpus, CorpusError, FormRecord, LanguageRecord, Macroarea};
use crate::covariance::{areal_distance, patristic_distance, DistanceMatrix};
use crate::linalg;
use crate::model::implied_log_odds;
use crate::phonology::Category;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("simulation spec: {0}")]
    BadSpec(String),
    #[error("{0} kernel is not positive definite")]
    BadKernel(&'static str),
    #[error("corpus assembly: {0}")]
    Corpus(#[from] CorpusError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A single exactly-planted concept effect (linear-predictor scale, relative
/// to the category's reference level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub concept: usize,
    pub level: String,
    pub value: f64,
}

fn default_phi() -> f64 {
    2.0
}

fn default_theta() -> f64 {
    30.0
}

/// Everything the generator needs. Serializable so a simulation can be
/// described by a JSON file and rerun bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_families: usize,
    pub langs_per_family: usize,
    /// Number of distinct macro-areas the families are cycled over (1..=6).
    pub n_areas: usize,
    pub n_concepts: usize,
    pub category: Category,
    /// Synonymous forms per (language, concept) pair.
    #[serde(default = "one")]
    pub forms_per_pair: usize,
    /// Participating segments per form.
    pub segments_per_form: usize,
    /// Baseline log-odds per non-reference level; empty means all zero.
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// Exact effects written into the concept-effect matrix.
    #[serde(default)]
    pub effects: Vec<PlantedEffect>,
    /// Spread of independent background concept effects (0 = none).
    #[serde(default)]
    pub background_effect_sd: f64,
    /// Spread of per-language level effects (0 = none).
    #[serde(default)]
    pub tau_language: f64,
    /// Marginal scale of the phylogenetic random effect (0 = off).
    #[serde(default)]
    pub sigma_phylo: f64,
    #[serde(default = "default_phi")]
    pub phi_phylo: f64,
    /// Marginal scale of the areal random effect (0 = off).
    #[serde(default)]
    pub sigma_areal: f64,
    #[serde(default = "default_phi")]
    pub phi_areal: f64,
    /// Dirichlet precision of per-form composition draws.
    #[serde(default = "default_theta")]
    pub theta: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Ground truth behind a simulated dataset. `concept_effects` rows and
/// `alpha` are on the linear-predictor scale with the reference level
/// dropped; `true_log_odds` has one entry per (concept, level) including the
/// reference, on the same scale the evaluation stage reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub category: Category,
    pub levels: Vec<String>,
    pub alpha: Vec<f64>,
    pub concept_effects: Vec<Vec<f64>>,
    /// Combined per-language offsets (language + phylogenetic + areal).
    pub language_effects: Vec<Vec<f64>>,
    pub true_log_odds: Vec<TrueLogOdds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLogOdds {
    pub concept: String,
    pub level: String,
    pub value: f64,
}

impl Truth {
    pub fn log_odds_for(&self, concept: &str, level: &str) -> Option<f64> {
        self.true_log_odds
            .iter()
            .find(|t| t.concept == concept && t.level == level)
            .map(|t| t.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub languages: Vec<LanguageRecord>,
    pub concepts: Vec<ConceptRecord>,
    pub forms: Vec<FormRecord>,
    pub truth: Truth,
}

impl SimulatedData {
    pub fn corpus(&self) -> Result<Corpus, CorpusError> {
        Corpus::new(
            self.languages.clone(),
            self.concepts.clone(),
            self.forms.clone(),
        )
    }

    /// Writes `languages.csv`, `concepts.csv`, `forms.csv`, and `truth.json`
    /// into `dir` (creating it), in the same schemas the ingest step reads.
    pub fn write_dataset(&self, dir: &Path) -> Result<(), SimulateError> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("languages.csv"))?;
        w.write_record([
            "ID",
            "Name",
            "Glottocode",
            "Latitude",
            "Longitude",
            "Macroarea",
            "Family_Path",
        ])?;
        for l in &self.languages {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                l.id.as_str(),
                l.name.as_str(),
                l.glottocode.as_str(),
                &fmt(l.latitude),
                &fmt(l.longitude),
                l.macroarea.map(|m| m.name()).unwrap_or(""),
                &l.family_path.join("/"),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("concepts.csv"))?;
        w.write_record(["ID", "Gloss", "Swadesh100", "Tadmor100", "Holman40"])?;
        for c in &self.concepts {
            w.write_record([
                c.id.as_str(),
                c.gloss.as_str(),
                if c.swadesh100 { "true" } else { "false" },
                if c.tadmor100 { "true" } else { "false" },
                if c.holman40 { "true" } else { "false" },
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("forms.csv"))?;
        w.write_record(["ID", "Language_ID", "Concept_ID", "Segments"])?;
        for f in &self.forms {
            w.write_record([
                f.id.as_str(),
                f.language_id.as_str(),
                f.concept_id.as_str(),
                &f.segments.join(" "),
            ])?;
        }
        w.flush()?;

        let file = fs::File::create(dir.join("truth.json"))?;
        serde_json::to_writer_pretty(file, &self.truth)?;
        Ok(())
    }
}

/// One representative token per feature level. Every exemplar classifies
/// back to exactly its level, so rendered forms re-annotate to the counts
/// they were drawn from.
pub fn exemplar(category: Category, level: &str) -> Option<&'static str> {
    use Category::*;
    let token = match (category, level) {
        (Voicing, "unvoiced") => "k",
        (Voicing, "voiced") => "n",
        (Position, "alveolar") => "n",
        (Position, "glottal") => "h",
        (Position, "labial") => "m",
        (Position, "palatal") => "j",
        (Position, "velar") => "k",
        (Manner, "continuant") => "s",
        (Manner, "lateral") => "l",
        (Manner, "nasal") => "n",
        (Manner, "stop") => "k",
        (Manner, "vibrant") => "r",
        (MannerVoicing, "continuant unvoiced") => "s",
        (MannerVoicing, "continuant voiced") => "z",
        (MannerVoicing, "lateral voiced") => "l",
        (MannerVoicing, "nasal voiced") => "n",
        (MannerVoicing, "stop unvoiced") => "k",
        (MannerVoicing, "stop voiced") => "d",
        (MannerVoicing, "vibrant voiced") => "r",
        (PositionVoicing, "alveolar unvoiced") => "t",
        (PositionVoicing, "alveolar voiced") => "d",
        (PositionVoicing, "glottal unvoiced") => "h",
        (PositionVoicing, "glottal voiced") => "ɦ",
        (PositionVoicing, "labial unvoiced") => "p",
        (PositionVoicing, "labial voiced") => "b",
        (PositionVoicing, "palatal unvoiced") => "c",
        (PositionVoicing, "palatal voiced") => "j",
        (PositionVoicing, "velar unvoiced") => "k",
        (PositionVoicing, "velar voiced") => "g",
        (Roundedness, "rounded") => "u",
        (Roundedness, "unrounded") => "i",
        (Height, "high") => "i",
        (Height, "low") => "a",
        (Height, "mid") => "o",
        (Backness, "back") => "u",
        (Backness, "central") => "ə",
        (Backness, "front") => "i",
        (Extreme, "high-back") => "u",
        (Extreme, "high-front") => "i",
        (Extreme, "low-back") => "ɒ",
        (Extreme, "low-front") => "a",
        (ExtremeRoundedness, "high-back-rounded") => "u",
        (ExtremeRoundedness, "high-back-unrounded") => "ɯ",
        (ExtremeRoundedness, "high-front-rounded") => "y",
        (ExtremeRoundedness, "high-front-unrounded") => "i",
        (ExtremeRoundedness, "low-back-rounded") => "ɒ",
        (ExtremeRoundedness, "low-back-unrounded") => "ɑ",
        (ExtremeRoundedness, "low-front-rounded") => "ɶ",
        (ExtremeRoundedness, "low-front-unrounded") => "a",
        _ => return None,
    };
    Some(token)
}

const AREA_POOL: &[Macroarea] = &[
    Macroarea::Eurasia,
    Macroarea::Africa,
    Macroarea::SouthAmerica,
    Macroarea::Papunesia,
    Macroarea::NorthAmerica,
    Macroarea::Australia,
];

impl SimulationSpec {
    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::BadSpec(m));
        if self.n_families == 0 || self.langs_per_family == 0 {
            return bad("need at least one family with at least one language".into());
        }
        if !(1..=AREA_POOL.len()).contains(&self.n_areas) {
            return bad(format!("n_areas must be in 1..={}", AREA_POOL.len()));
        }
        if self.n_concepts == 0 {
            return bad("need at least one concept".into());
        }
        if self.forms_per_pair == 0 || self.segments_per_form == 0 {
            return bad("forms_per_pair and segments_per_form must be positive".into());
        }
        let k = self.category.levels().len();
        if !self.alpha.is_empty() && self.alpha.len() != k - 1 {
            return bad(format!(
                "alpha must have {} entries (levels minus the reference), got {}",
                k - 1,
                self.alpha.len()
            ));
        }
        for e in &self.effects {
            if e.concept >= self.n_concepts {
                return bad(format!("effect concept {} out of range", e.concept));
            }
            match self.category.levels().iter().position(|l| *l == e.level) {
                None => return bad(format!("unknown level `{}`", e.level)),
                Some(i) if i == k - 1 => {
                    return bad(format!(
                        "`{}` is the reference level; plant effects on a non-reference level",
                        e.level
                    ))
                }
                Some(_) => {}
            }
        }
        if self.background_effect_sd < 0.0
            || self.tau_language < 0.0
            || self.sigma_phylo < 0.0
            || self.sigma_areal < 0.0
        {
            return bad("scales must be non-negative".into());
        }
        if self.phi_phylo <= 0.0 || self.phi_areal <= 0.0 {
            return bad("decay rates must be positive".into());
        }
        if self.theta <= 0.0 {
            return bad("theta must be positive".into());
        }
        Ok(())
    }

    fn build_languages(&self) -> Vec<LanguageRecord> {
        let depth = if self.langs_per_family <= 1 {
            0
        } else {
            usize::BITS - (self.langs_per_family - 1).leading_zeros()
        };
        let mut out = Vec::with_capacity(self.n_families * self.langs_per_family);
        for f in 0..self.n_families {
            let area = f % self.n_areas;
            // ring = which family blob inside the area; blobs sit a few
            // hundred km apart so same-area pairs stay under the contact
            // cutoff while different areas are far beyond it.
            let ring = f / self.n_areas;
            let base_lat = -20.0 + 15.0 * area as f64 + 1.6 * (ring % 3) as f64;
            let base_lon = -150.0 + 50.0 * area as f64 + 2.4 * (ring / 3) as f64;
            for i in 0..self.langs_per_family {
                let mut family_path = vec![format!("fam{f:02}")];
                for d in 1..=depth {
                    family_path.push(format!("fam{f:02}d{d}g{}", i >> (depth as usize - d as usize)));
                }
                let global = f * self.langs_per_family + i;
                out.push(LanguageRecord {
                    id: format!("fam{f:02}l{i:02}"),
                    name: format!("Family {f} language {i}"),
                    glottocode: format!("simu{:04}", global + 1),
                    latitude: Some(base_lat + 0.09 * (i % 5) as f64),
                    longitude: Some(base_lon + 0.11 * (i / 5) as f64),
                    macroarea: Some(AREA_POOL[area]),
                    family_path,
                });
            }
        }
        out
    }

    fn build_concepts(&self) -> Vec<ConceptRecord> {
        (0..self.n_concepts)
            .map(|j| ConceptRecord {
                id: format!("conc{j:03}"),
                gloss: format!("concept {j}"),
                swadesh100: j % 2 == 0,
                tadmor100: j % 3 != 0,
                holman40: j % 4 == 1,
            })
            .collect()
    }
}

/// Draws one standard-normal vector per non-reference level, correlates it
/// through the Cholesky factor of `exp(-phi d)` over the distance matrix, and
/// accumulates `sigma * (L z)` into the per-language effect matrix. Latent
/// draws are consumed even when `sigma` is zero so the random stream does not
/// depend on which controls are active.
fn add_gp_effect(
    effects: &mut [Vec<f64>],
    dist: &DistanceMatrix,
    sigma: f64,
    phi: f64,
    k1: usize,
    which: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<(), SimulateError> {
    let n = dist.labels.len();
    let mut kernel = ndarray::Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            kernel[(i, j)] = if i == j {
                1.0 + 1e-8
            } else if dist.mask[(i, j)] {
                0.0
            } else {
                (-phi * dist.values[(i, j)]).exp()
            };
        }
    }
    let chol = linalg::cholesky(&kernel).map_err(|_| SimulateError::BadKernel(which))?;
    let mut z = vec![0.0; n];
    let mut v = vec![0.0; n];
    for k in 0..k1 {
        for zi in z.iter_mut() {
            *zi = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        if sigma == 0.0 {
            continue;
        }
        linalg::lower_matvec(&chol, &z, &mut v);
        for (i, effect) in effects.iter_mut().enumerate() {
            effect[k] += sigma * v[i];
        }
    }
    Ok(())
}

pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedData, SimulateError> {
    spec.validate()?;
    let levels: Vec<String> = spec.category.levels().iter().map(|s| s.to_string()).collect();
    let k = levels.len();
    let k1 = k - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let languages = spec.build_languages();
    let concepts = spec.build_concepts();
    let n_lang = languages.len();

    let alpha = if spec.alpha.is_empty() {
        vec![0.0; k1]
    } else {
        spec.alpha.clone()
    };

    // Concept effects: independent background noise (centered per level so
    // the grand intercept of a fit stays at alpha), then exact overwrites.
    let mut concept_effects = vec![vec![0.0; k1]; spec.n_concepts];
    if spec.background_effect_sd > 0.0 {
        for row in concept_effects.iter_mut() {
            for e in row.iter_mut() {
                *e = spec.background_effect_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        for k in 0..k1 {
            let mean: f64 = concept_effects.iter().map(|r| r[k]).sum::<f64>()
                / spec.n_concepts as f64;
            for row in concept_effects.iter_mut() {
                row[k] -= mean;
            }
        }
    }
    for planted in &spec.effects {
        let li = levels.iter().position(|l| *l == planted.level).expect("validated");
        concept_effects[planted.concept][li] = planted.value;
    }

    // Per-language offsets: independent language effects plus the two
    // distance-correlated components.
    let mut language_effects = vec![vec![0.0; k1]; n_lang];
    for row in language_effects.iter_mut() {
        for e in row.iter_mut() {
            *e = spec.tau_language * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    let phylo = patristic_distance(&languages);
    let areal = areal_distance(&languages, crate::covariance::DEFAULT_CUTOFF_KM);
    add_gp_effect(
        &mut language_effects,
        &phylo,
        spec.sigma_phylo,
        spec.phi_phylo,
        k1,
        "phylogenetic",
        &mut rng,
    )?;
    add_gp_effect(
        &mut language_effects,
        &areal,
        spec.sigma_areal,
        spec.phi_areal,
        k1,
        "areal",
        &mut rng,
    )?;

    // Render forms: per (language, concept, synonym), draw a composition from
    // Dirichlet(theta * softmax(eta)), then segment counts from it.
    let mut forms = Vec::with_capacity(n_lang * spec.n_concepts * spec.forms_per_pair);
    let mut mu = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut counts = vec![0u64; k];
    let exemplars: Vec<&'static str> = levels
        .iter()
        .map(|l| exemplar(spec.category, l).expect("every canonical level has an exemplar"))
        .collect();
    let mut form_counter = 0usize;
    for (li, lang) in languages.iter().enumerate() {
        for concept in &concepts {
            let j: usize = concept.id[4..].parse().expect("generated id");
            let mut denom = 0.0;
            for kk in 0..k {
                let eta = if kk == k1 {
                    0.0
                } else {
                    alpha[kk] + concept_effects[j][kk] + language_effects[li][kk]
                };
                mu[kk] = eta.exp();
                denom += mu[kk];
            }
            for m in mu.iter_mut() {
                *m /= denom;
            }
            for _ in 0..spec.forms_per_pair {
                let mut total = 0.0;
                for kk in 0..k {
                    let g = Gamma::new(spec.theta * mu[kk], 1.0)
                        .expect("positive shape")
                        .sample(&mut rng);
                    p[kk] = g;
                    total += g;
                }
                for pk in p.iter_mut() {
                    *pk = if total > 0.0 { *pk / total } else { 1.0 / k as f64 };
                }
                counts.fill(0);
                for _ in 0..spec.segments_per_form {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = k - 1;
                    for (kk, pk) in p.iter().enumerate() {
                        acc += pk;
                        if u < acc {
                            pick = kk;
                            break;
                        }
                    }
                    counts[pick] += 1;
                }
                let mut segments = Vec::with_capacity(spec.segments_per_form);
                for (kk, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        segments.push(exemplars[kk].to_string());
                    }
                }
                forms.push(FormRecord {
                    id: format!("f{form_counter:06}"),
                    language_id: lang.id.clone(),
                    concept_id: concept.id.clone(),
                    segments,
                });
                form_counter += 1;
            }
        }
    }

    let mut true_log_odds = Vec::with_capacity(spec.n_concepts * k);
    for (j, concept) in concepts.iter().enumerate() {
        for (kk, level) in levels.iter().enumerate() {
            true_log_odds.push(TrueLogOdds {
                concept: concept.id.clone(),
                level: level.clone(),
                value: implied_log_odds(&alpha, &concept_effects[j], kk),
            });
        }
    }

    Ok(SimulatedData {
        languages,
        concepts,
        forms,
        truth: Truth {
            category: spec.category,
            levels,
            alpha,
            concept_effects,
            language_effects,
            true_log_odds,
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::phonology::{classify_segment, count_features, to_proportions};

    pub(crate) fn small_spec() -> SimulationSpec {
        SimulationSpec {
            n_families: 2,
            langs_per_family: 4,
            n_areas: 2,
            n_concepts: 3,
            category: Category::Voicing,
            forms_per_pair: 2,
            segments_per_form: 6,
            alpha: vec![],
            effects: vec![PlantedEffect {
                concept: 0,
                level: "unvoiced".into(),
                value: (1.5f64).ln(),
            }],
            background_effect_sd: 0.0,
            tau_language: 0.1,
            sigma_phylo: 0.3,
            phi_phylo: 2.0,
            sigma_areal: 0.2,
            phi_areal: 2.0,
            theta: 25.0,
            seed: 11,
        }
    }

    #[test]
    fn exemplars_round_trip_through_classifier() {
        for &category in Category::ALL {
            for (i, level) in category.levels().iter().enumerate() {
                let token = exemplar(category, level)
                    .unwrap_or_else(|| panic!("{category} `{level}` has no exemplar"));
                let profile = classify_segment(token);
                assert_eq!(
                    category.level_of(&profile),
                    Some(i),
                    "{category} `{level}` exemplar `{token}` classified elsewhere"
                );
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = small_spec();
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        a.write_dataset(dir_a.path()).unwrap();
        b.write_dataset(dir_b.path()).unwrap();
        for file in ["languages.csv", "concepts.csv", "forms.csv", "truth.json"] {
            let bytes_a = fs::read(dir_a.path().join(file)).unwrap();
            let bytes_b = fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} differs between runs");
        }
        let different = simulate(&SimulationSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.forms, different.forms);
    }

    #[test]
    fn truth_log_odds_match_closed_form() {
        // Zero baseline, one planted effect x on level 0 of a K-level
        // category: the planted cell's log-odds must be
        // logit(e^x / (e^x + K - 1)) - logit(1 / K).
        let spec = SimulationSpec {
            category: Category::Position,
            effects: vec![PlantedEffect {
                concept: 1,
                level: "alveolar".into(),
                value: 0.7,
            }],
            ..small_spec()
        };
        let data = simulate(&spec).unwrap();
        let k = 5.0;
        let x = 0.7f64;
        let with = x.exp() / (x.exp() + k - 1.0);
        let expect = (with / (1.0 - with)).ln() - (1.0 / (k - 1.0)).ln();
        let got = data.truth.log_odds_for("conc001", "alveolar").unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, expected {expect}");
        // Unplanted concepts with zero background carry exactly zero.
        assert_eq!(data.truth.log_odds_for("conc002", "velar"), Some(0.0));
    }

    #[test]
    fn dataset_round_trips_through_annotation() {
        let spec = small_spec();
        let data = simulate(&spec).unwrap();
        let corpus = data.corpus().unwrap();
        assert_eq!(corpus.languages.len(), 8);
        assert_eq!(corpus.forms.len(), 8 * 3 * 2);

        let table = count_features(&corpus, spec.category, None);
        assert_eq!(table.rows.len(), 8 * 3, "one row per (language, concept)");
        for row in &table.rows {
            assert_eq!(
                row.total,
                (spec.forms_per_pair * spec.segments_per_form) as u64,
                "every simulated segment participates in its own category"
            );
        }
        let props = to_proportions(&table).unwrap();
        let model_spec = crate::model::ModelSpec::from_proportions(
            &corpus,
            &props,
            crate::model::Priors::default(),
            None,
            false,
        )
        .unwrap();
        assert_eq!(model_spec.levels, vec!["unvoiced", "voiced"]);
        assert_eq!(model_spec.language_ids.len(), 8);
        assert_eq!(model_spec.observations.len(), 24);
    }

    #[test]
    fn dataset_round_trips_through_csv_files() {
        let data = simulate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_dataset(dir.path()).unwrap();
        let langs = crate::corpus::parse_languages(
            fs::File::open(dir.path().join("languages.csv")).unwrap(),
            "languages.csv",
        )
        .unwrap();
        let concepts = crate::corpus::parse_concepts(
            fs::File::open(dir.path().join("concepts.csv")).unwrap(),
            "concepts.csv",
        )
        .unwrap();
        let forms = crate::corpus::parse_forms(
            fs::File::open(dir.path().join("forms.csv")).unwrap(),
            "forms.csv",
        )
        .unwrap();
        let reparsed = Corpus::new(langs, concepts, forms).unwrap();
        let direct = data.corpus().unwrap();
        assert_eq!(reparsed.languages, direct.languages);
        assert_eq!(reparsed.concepts, direct.concepts);
        assert_eq!(reparsed.forms, direct.forms);
        let truth: Truth =
            serde_json::from_reader(fs::File::open(dir.path().join("truth.json")).unwrap())
                .unwrap();
        assert_eq!(truth, data.truth);
    }

    #[test]
    fn planted_effect_shows_up_in_raw_counts() {
        // A huge planted effect must dominate the concept's counts.
        let spec = SimulationSpec {
            effects: vec![PlantedEffect {
                concept: 0,
                level: "unvoiced".into(),
                value: (8.0f64).ln(),
            }],
            tau_language: 0.0,
            sigma_phylo: 0.0,
            sigma_areal: 0.0,
            theta: 60.0,
            seed: 5,
            ..small_spec()
        };
        let data = simulate(&spec).unwrap();
        let corpus = data.corpus().unwrap();
        let table = count_features(&corpus, Category::Voicing, None);
        let share = |concept: &str| {
            let (mut hit, mut total) = (0u64, 0u64);
            for row in table.rows.iter().filter(|r| r.concept_id == concept) {
                hit += row.counts[0];
                total += row.total;
            }
            hit as f64 / total as f64
        };
        let planted = share("conc000");
        let control = share("conc001");
        assert!(
            planted > 0.75 && control < 0.65,
            "planted share {planted}, control share {control}"
        );
    }

    #[test]
    fn geography_respects_area_and_family_layout() {
        let data = simulate(&small_spec()).unwrap();
        let areal = areal_distance(&data.languages, crate::covariance::DEFAULT_CUTOFF_KM);
        let phylo = patristic_distance(&data.languages);
        let n = data.languages.len();
        for i in 0..n {
            for j in 0..n {
                // mask == true marks a pair excluded from the kernel
                let same_family =
                    data.languages[i].family_key() == data.languages[j].family_key();
                let same_area = data.languages[i].macroarea == data.languages[j].macroarea;
                assert_eq!(phylo.mask[(i, j)], !same_family, "phylo mask at ({i},{j})");
                assert_eq!(areal.mask[(i, j)], !same_area, "areal mask at ({i},{j})");
            }
        }
    }

    #[test]
    fn spec_validation_rejects_bad_input() {
        let ok = small_spec();
        assert!(ok.validate().is_ok());
        let cases = [
            SimulationSpec { n_families: 0, ..ok.clone() },
            SimulationSpec { n_areas: 0, ..ok.clone() },
            SimulationSpec { n_areas: 7, ..ok.clone() },
            SimulationSpec { segments_per_form: 0, ..ok.clone() },
            SimulationSpec { alpha: vec![0.1, 0.2], ..ok.clone() },
            SimulationSpec { theta: 0.0, ..ok.clone() },
            SimulationSpec {
                effects: vec![PlantedEffect { concept: 99, level: "voiced".into(), value: 0.1 }],
                ..ok.clone()
            },
            // "voiced" is the voicing reference level
            SimulationSpec {
                effects: vec![PlantedEffect { concept: 0, level: "voiced".into(), value: 0.1 }],
                ..ok.clone()
            },
            SimulationSpec {
                effects: vec![PlantedEffect { concept: 0, level: "nasal".into(), value: 0.1 }],
                ..ok.clone()
            },
        ];
        for (i, bad) in cases.iter().enumerate() {
            assert!(
                matches!(simulate(bad), Err(SimulateError::BadSpec(_))),
                "case {i} should be rejected"
            );
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = small_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: SimulationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        // Defaults cover omitted optional fields.
        let minimal: SimulationSpec = serde_json::from_str(
            r#"{
                "n_families": 1, "langs_per_family": 2, "n_areas": 1,
                "n_concepts": 2, "category": "height",
                "segments_per_form": 4, "seed": 3
            }"#,
        )
        .unwrap();
        assert_eq!(minimal.forms_per_pair, 1);
        assert_eq!(minimal.theta, 30.0);
        assert_eq!(minimal.phi_phylo, 2.0);
        assert!(minimal.effects.is_empty());
    }
}
