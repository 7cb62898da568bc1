//! Posterior summaries: per-concept log-odds ratios, HPDI/ROPE
//! classification, effect-count tables, basic-vocabulary list hits, and
//! comparisons between two result sets.
//!
//! CSV contracts (all files carry a header row):
//! - results: `concept,category,level,mean,hpdi_low,hpdi_high,classification`
//!   (the same schema is accepted as prior-results input);
//! - effect counts: `category,strong,weak,none,not_interpretable,total`
//!   with a final `total` row;
//! - list hits: `list,n_concepts,prior_hits,new_hits,replicated,replicated_pct`;
//! - correlation: `n_matched,pearson_r`;
//! - scatter: `concept,category,level,old_mean,new_mean` (one row per key
//!   matched between the old and new runs);
//! - manhattan: `feature_index,concept,category,level,new_mean,label` where
//!   `feature_index` numbers the distinct (category, level) features in
//!   sorted order and `label` is `concept:level` for the five largest
//!   absolute means, empty otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ConceptRecord;
use crate::inference::PosteriorDraws;
use crate::model::implied_log_odds;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("need at least {needed} samples for an interval, got {n}")]
    TooFewSamples { n: usize, needed: usize },
    #[error("interval mass must lie strictly between 0 and 1, got {0}")]
    BadMass(f64),
    #[error("invalid evaluation config: {0}")]
    BadConfig(&'static str),
    #[error("level {level:?} is not a level of category {category}")]
    UnknownLevel { level: String, category: String },
    #[error("concept {0:?} was not part of the fit")]
    UnknownConcept(String),
    #[error("only {matched} result keys matched between runs; need at least 10")]
    TooFewMatches { matched: usize },
    #[error("bad results row: {0}")]
    BadRow(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Thresholds for the four-way effect classification. The region of
/// practical equivalence spans log-odds ratios in (rope_lower, rope_upper),
/// symmetric about zero with the upper edge at ln(1.25) by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default = "default_mass")]
    pub hpdi_mass: f64,
    #[serde(default = "default_rope_upper")]
    pub rope_upper: f64,
    #[serde(default = "default_rope_lower")]
    pub rope_lower: f64,
}

fn default_mass() -> f64 {
    0.95
}

fn default_rope_upper() -> f64 {
    1.25f64.ln()
}

fn default_rope_lower() -> f64 {
    -1.25f64.ln()
}

impl Default for EvaluationConfig {
    fn default() -> EvaluationConfig {
        EvaluationConfig {
            hpdi_mass: default_mass(),
            rope_upper: default_rope_upper(),
            rope_lower: default_rope_lower(),
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<(), EvaluateError> {
        if !(self.hpdi_mass > 0.0 && self.hpdi_mass < 1.0) {
            return Err(EvaluateError::BadConfig(
                "hpdi_mass must lie strictly between 0 and 1",
            ));
        }
        if !(self.rope_upper > 0.0) {
            return Err(EvaluateError::BadConfig("rope_upper must be positive"));
        }
        if self.rope_lower != -self.rope_upper {
            return Err(EvaluateError::BadConfig(
                "rope_lower must equal -rope_upper",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectClass {
    Strong,
    Weak,
    None,
    NotInterpretable,
}

impl EffectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectClass::Strong => "strong",
            EffectClass::Weak => "weak",
            EffectClass::None => "none",
            EffectClass::NotInterpretable => "not_interpretable",
        }
    }
}

impl fmt::Display for EffectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EffectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<EffectClass, String> {
        match s {
            "strong" => Ok(EffectClass::Strong),
            "weak" => Ok(EffectClass::Weak),
            "none" => Ok(EffectClass::None),
            "not_interpretable" => Ok(EffectClass::NotInterpretable),
            other => Err(format!("unknown classification {other:?}")),
        }
    }
}

/// One classified effect: the posterior mean log-odds ratio of a feature
/// level for one concept, its HPDI, and the four-way call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectResult {
    pub concept: String,
    pub category: String,
    pub level: String,
    pub mean: f64,
    pub hpdi_low: f64,
    pub hpdi_high: f64,
    pub classification: EffectClass,
}

/// Four-way call for one effect. Rule order: strong when the interval lies
/// entirely outside the equivalence region; else weak when the mean is
/// outside it and the interval excludes zero; else none when the interval
/// lies entirely inside it; else not interpretable.
pub fn classify(mean: f64, low: f64, high: f64, cfg: &EvaluationConfig) -> EffectClass {
    if low > cfg.rope_upper || high < cfg.rope_lower {
        EffectClass::Strong
    } else if (mean > cfg.rope_upper || mean < cfg.rope_lower) && (low > 0.0 || high < 0.0) {
        EffectClass::Weak
    } else if low > cfg.rope_lower && high < cfg.rope_upper {
        EffectClass::None
    } else {
        EffectClass::NotInterpretable
    }
}

/// Shortest contiguous interval over the sorted samples that contains
/// ceil(mass * n) of them; ties go to the lowest starting index.
pub fn hpdi(samples: &[f64], mass: f64) -> Result<(f64, f64), EvaluateError> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(EvaluateError::BadMass(mass));
    }
    let n = samples.len();
    if n < 20 {
        return Err(EvaluateError::TooFewSamples { n, needed: 20 });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let window = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best_start = 0;
    let mut best_width = f64::INFINITY;
    for start in 0..=(n - window) {
        let width = sorted[start + window - 1] - sorted[start];
        if width < best_width {
            best_width = width;
            best_start = start;
        }
    }
    Ok((sorted[best_start], sorted[best_start + window - 1]))
}

/// Per-draw log-odds ratio of one feature level for one concept against the
/// population baseline: p = softmax(alpha + concept effect) at the level,
/// p_bar = softmax(alpha) at the level, returning ln[(p/(1-p)) / (p_bar/(1-p_bar))].
/// Language and spatial effects sit at their zero population mean. Draws are
/// walked chain-major, matching the draw storage order.
pub fn concept_log_odds(
    fit: &PosteriorDraws,
    concept: &str,
    level: &str,
) -> Result<Vec<f64>, EvaluateError> {
    let lidx = fit
        .levels
        .iter()
        .position(|l| l == level)
        .ok_or_else(|| EvaluateError::UnknownLevel {
            level: level.to_string(),
            category: fit.category.clone(),
        })?;
    let cidx = fit
        .concept_ids
        .iter()
        .position(|c| c == concept)
        .ok_or_else(|| EvaluateError::UnknownConcept(concept.to_string()))?;
    let layout = &fit.layout;
    let kf = layout.kfree();
    let coff = layout.c_raw() + cidx * kf;
    let mut c_eff = vec![0.0; kf];
    let mut out = Vec::with_capacity(fit.n_chains * fit.n_draws);
    for chain in 0..fit.n_chains {
        for d in 0..fit.n_draws {
            let row = fit.draw(chain, d);
            let alpha = &row[layout.alpha()..layout.alpha() + kf];
            let tau_c = &row[layout.log_tau_c()..layout.log_tau_c() + kf];
            let c_raw = &row[coff..coff + kf];
            for k in 0..kf {
                c_eff[k] = tau_c[k] * c_raw[k];
            }
            out.push(implied_log_odds(alpha, &c_eff, lidx));
        }
    }
    Ok(out)
}

/// Classifies every (concept, level) pair of a fit, levels and concepts in
/// their stored order.
pub fn evaluate_category(
    fit: &PosteriorDraws,
    cfg: &EvaluationConfig,
) -> Result<Vec<EffectResult>, EvaluateError> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(fit.concept_ids.len() * fit.levels.len());
    for concept in &fit.concept_ids {
        for level in &fit.levels {
            let draws = concept_log_odds(fit, concept, level)?;
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let (low, high) = hpdi(&draws, cfg.hpdi_mass)?;
            results.push(EffectResult {
                concept: concept.clone(),
                category: fit.category.clone(),
                level: level.clone(),
                mean,
                hpdi_low: low,
                hpdi_high: high,
                classification: classify(mean, low, high, cfg),
            });
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EffectCountRow {
    pub category: String,
    pub strong: usize,
    pub weak: usize,
    pub none: usize,
    pub not_interpretable: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectCountTable {
    pub rows: Vec<EffectCountRow>,
    pub totals: EffectCountRow,
}

/// Tallies classifications per category, rows sorted by category name, plus
/// a grand-total row.
pub fn count_effects(results: &[EffectResult]) -> EffectCountTable {
    let mut by_cat: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
    for r in results {
        let cell = by_cat.entry(r.category.as_str()).or_default();
        match r.classification {
            EffectClass::Strong => cell[0] += 1,
            EffectClass::Weak => cell[1] += 1,
            EffectClass::None => cell[2] += 1,
            EffectClass::NotInterpretable => cell[3] += 1,
        }
    }
    let mut totals = [0usize; 4];
    let rows: Vec<EffectCountRow> = by_cat
        .into_iter()
        .map(|(category, c)| {
            for (t, v) in totals.iter_mut().zip(c) {
                *t += v;
            }
            EffectCountRow {
                category: category.to_string(),
                strong: c[0],
                weak: c[1],
                none: c[2],
                not_interpretable: c[3],
                total: c.iter().sum(),
            }
        })
        .collect();
    EffectCountTable {
        rows,
        totals: EffectCountRow {
            category: "total".to_string(),
            strong: totals[0],
            weak: totals[1],
            none: totals[2],
            not_interpretable: totals[3],
            total: totals.iter().sum(),
        },
    }
}

impl EffectCountTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows.iter().chain(std::iter::once(&self.totals)) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ListRow {
    pub list: String,
    /// Concepts carrying this list's flag.
    pub n_concepts: usize,
    /// Flagged concepts with at least one strong-or-weak effect in the prior
    /// results (zero when no prior results were supplied).
    pub prior_hits: usize,
    /// Flagged concepts with at least one strong-or-weak effect in this run.
    pub new_hits: usize,
    /// Flagged concepts hit in both runs.
    pub replicated: usize,
    /// replicated / prior_hits, as a percentage; zero when prior_hits is zero.
    pub replicated_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListTable {
    pub rows: Vec<ListRow>,
    pub excluded_categories: Vec<String>,
}

fn hit_concepts<'a>(
    results: &'a [EffectResult],
    excluded: &[String],
) -> BTreeSet<&'a str> {
    results
        .iter()
        .filter(|r| {
            matches!(r.classification, EffectClass::Strong | EffectClass::Weak)
                && !excluded.contains(&r.category)
        })
        .map(|r| r.concept.as_str())
        .collect()
}

/// Per basic-vocabulary list (and over all concepts): how many concepts have
/// at least one strong-or-weak effect, optionally against a prior result set
/// and optionally ignoring some categories.
pub fn list_intersection(
    results: &[EffectResult],
    concepts: &[ConceptRecord],
    prior: Option<&[EffectResult]>,
    exclude_categories: &[String],
) -> ListTable {
    let new_hits = hit_concepts(results, exclude_categories);
    let prior_hits = prior.map(|p| hit_concepts(p, exclude_categories));
    let lists: [(&str, Box<dyn Fn(&ConceptRecord) -> bool>); 4] = [
        ("swadesh100", Box::new(|c: &ConceptRecord| c.swadesh100)),
        ("tadmor100", Box::new(|c: &ConceptRecord| c.tadmor100)),
        ("holman40", Box::new(|c: &ConceptRecord| c.holman40)),
        ("all", Box::new(|_| true)),
    ];
    let rows = lists
        .iter()
        .map(|(name, member)| {
            let flagged: Vec<&str> = concepts
                .iter()
                .filter(|c| member(c))
                .map(|c| c.id.as_str())
                .collect();
            let new = flagged.iter().filter(|id| new_hits.contains(*id)).count();
            let (old, both) = match &prior_hits {
                Some(ph) => {
                    let old = flagged.iter().filter(|id| ph.contains(*id)).count();
                    let both = flagged
                        .iter()
                        .filter(|id| ph.contains(*id) && new_hits.contains(*id))
                        .count();
                    (old, both)
                }
                None => (0, 0),
            };
            ListRow {
                list: name.to_string(),
                n_concepts: flagged.len(),
                prior_hits: old,
                new_hits: new,
                replicated: both,
                replicated_pct: if old > 0 {
                    100.0 * both as f64 / old as f64
                } else {
                    0.0
                },
            }
        })
        .collect();
    ListTable {
        rows,
        excluded_categories: exclude_categories.to_vec(),
    }
}

impl ListTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedEffect {
    pub concept: String,
    pub category: String,
    pub level: String,
    pub old_mean: f64,
    pub new_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManhattanRow {
    pub feature_index: usize,
    pub concept: String,
    pub category: String,
    pub level: String,
    pub new_mean: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunComparison {
    pub n_matched: usize,
    pub pearson_r: f64,
    pub matched: Vec<MatchedEffect>,
    pub manhattan: Vec<ManhattanRow>,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Matches two result sets on (concept, category, level), reports Pearson's
/// r over the matched mean effect sizes, and lays the new means out for a
/// scatter plot (matched pairs) and a Manhattan plot (all new results with
/// features numbered in sorted (category, level) order, the five largest
/// absolute means labelled `concept:level`).
pub fn compare_runs(
    old: &[EffectResult],
    new: &[EffectResult],
) -> Result<RunComparison, EvaluateError> {
    let old_by_key: BTreeMap<(&str, &str, &str), f64> = old
        .iter()
        .map(|r| ((r.concept.as_str(), r.category.as_str(), r.level.as_str()), r.mean))
        .collect();
    let mut matched = Vec::new();
    for r in new {
        let key = (r.concept.as_str(), r.category.as_str(), r.level.as_str());
        if let Some(&old_mean) = old_by_key.get(&key) {
            matched.push(MatchedEffect {
                concept: r.concept.clone(),
                category: r.category.clone(),
                level: r.level.clone(),
                old_mean,
                new_mean: r.mean,
            });
        }
    }
    if matched.len() < 10 {
        return Err(EvaluateError::TooFewMatches {
            matched: matched.len(),
        });
    }
    let olds: Vec<f64> = matched.iter().map(|m| m.old_mean).collect();
    let news: Vec<f64> = matched.iter().map(|m| m.new_mean).collect();
    let pearson_r = pearson(&olds, &news);

    let features: BTreeSet<(&str, &str)> = new
        .iter()
        .map(|r| (r.category.as_str(), r.level.as_str()))
        .collect();
    let feature_index: BTreeMap<(&str, &str), usize> = features
        .into_iter()
        .enumerate()
        .map(|(i, f)| (f, i))
        .collect();
    let mut order: Vec<usize> = (0..new.len()).collect();
    order.sort_by(|&a, &b| new[b].mean.abs().total_cmp(&new[a].mean.abs()));
    let labelled: BTreeSet<usize> = order.into_iter().take(5).collect();
    let mut manhattan: Vec<ManhattanRow> = new
        .iter()
        .enumerate()
        .map(|(i, r)| ManhattanRow {
            feature_index: feature_index[&(r.category.as_str(), r.level.as_str())],
            concept: r.concept.clone(),
            category: r.category.clone(),
            level: r.level.clone(),
            new_mean: r.mean,
            label: if labelled.contains(&i) {
                format!("{}:{}", r.concept, r.level)
            } else {
                String::new()
            },
        })
        .collect();
    manhattan.sort_by(|a, b| {
        (a.feature_index, &a.concept, &a.level).cmp(&(b.feature_index, &b.concept, &b.level))
    });
    Ok(RunComparison {
        n_matched: matched.len(),
        pearson_r,
        matched,
        manhattan,
    })
}

impl RunComparison {
    /// Writes correlation.csv, scatter.csv, and manhattan.csv into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), EvaluateError> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("correlation.csv"))?;
        w.write_record(["n_matched", "pearson_r"])?;
        w.write_record([self.n_matched.to_string(), format!("{:?}", self.pearson_r)])?;
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("scatter.csv"))?;
        for row in &self.matched {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("manhattan.csv"))?;
        for row in &self.manhattan {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes effect results with the documented column contract.
pub fn write_results_csv<W: Write>(results: &[EffectResult], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads effect results in the documented column contract; accepts prior
/// result transcriptions as long as the header matches.
pub fn read_results_csv<R: std::io::Read>(input: R) -> Result<Vec<EffectResult>, EvaluateError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize::<EffectResult>() {
        let r = row.map_err(|e| EvaluateError::BadRow(e.to_string()))?;
        if !(r.hpdi_low <= r.hpdi_high) {
            return Err(EvaluateError::BadRow(format!(
                "interval ({}, {}) for {}/{}/{} is inverted",
                r.hpdi_low, r.hpdi_high, r.concept, r.category, r.level
            )));
        }
        out.push(r);
    }
    Ok(out)
}
