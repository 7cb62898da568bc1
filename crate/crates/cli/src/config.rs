//! Config-file schemas for the fit and run subcommands. Both are JSON with
//! every field optional except the input paths; unset fields fall back to
//! library defaults so a minimal config stays minimal.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use soundsym::evaluate::EvaluationConfig;
use soundsym::inference::SamplerSettings;
use soundsym::model::{ControlVariant, Priors};
use soundsym::phonology::Category;

/// Inputs for a single fit: which corpus, which category, and how to sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSpec {
    pub corpus: PathBuf,
    pub category: Category,
    #[serde(default)]
    pub weighted: bool,
    /// Areal masking cutoff in kilometers; the library default applies when
    /// unset.
    #[serde(default)]
    pub cutoff_km: Option<f64>,
    /// Segment-to-profile mapping CSV overriding the built-in classifier.
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub sampler: SamplerSettings,
}

impl FitSpec {
    pub fn read(path: &Path) -> Result<FitSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading fit spec {}", path.display()))?;
        let spec: FitSpec = serde_json::from_str(&text)
            .with_context(|| format!("parsing fit spec {}", path.display()))?;
        Ok(spec)
    }
}

fn default_categories() -> Vec<Category> {
    Category::ALL.to_vec()
}

fn default_variants() -> Vec<ControlVariant> {
    vec![ControlVariant::Full]
}

fn default_list_exclude() -> Vec<Category> {
    vec![Category::ExtremeRoundedness]
}

/// Whole-pipeline configuration: input tables, what to fit, and every knob
/// the stages take. The `run` subcommand echoes this verbatim into the
/// manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub languages: PathBuf,
    pub concepts: PathBuf,
    pub forms: PathBuf,
    /// Language ids to drop, one per line, `#` comments allowed.
    #[serde(default)]
    pub exclude: Option<PathBuf>,
    /// Earlier results to replicate against
    /// (`concept,category,level,mean,hpdi_low,hpdi_high,classification`).
    #[serde(default)]
    pub prior_results: Option<PathBuf>,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default = "default_categories")]
    pub categories: Vec<Category>,
    /// Control variants fitted per category; the first is the one evaluated.
    #[serde(default = "default_variants")]
    pub variants: Vec<ControlVariant>,
    #[serde(default)]
    pub cutoff_km: Option<f64>,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub priors: Priors,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// When positive, draws this many parameter vectors from the priors per
    /// category and writes a prior predictive report.
    #[serde(default)]
    pub prior_simulation_draws: usize,
    /// Categories dropped from the second, filtered list table.
    #[serde(default = "default_list_exclude")]
    pub list_exclude: Vec<Category>,
    /// Keep per-category posterior draws on disk.
    #[serde(default)]
    pub save_draws: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading run config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing run config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in self.input_files() {
            ensure!(path.is_file(), "{name} file {} is missing", path.display());
        }
        ensure!(!self.categories.is_empty(), "categories must not be empty");
        let unique: BTreeSet<&Category> = self.categories.iter().collect();
        ensure!(
            unique.len() == self.categories.len(),
            "categories contain duplicates"
        );
        ensure!(!self.variants.is_empty(), "variants must not be empty");
        let unique: BTreeSet<&str> = self.variants.iter().map(|v| v.name()).collect();
        ensure!(
            unique.len() == self.variants.len(),
            "variants contain duplicates"
        );
        if let Some(cutoff) = self.cutoff_km {
            ensure!(cutoff > 0.0, "cutoff_km must be positive");
        }
        if let Err(e) = self.evaluation.validate() {
            bail!("evaluation config: {e}");
        }
        Ok(())
    }

    /// Input files to hash into the manifest, with stable names.
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let mut files: Vec<(&'static str, &Path)> = vec![
            ("languages", &self.languages),
            ("concepts", &self.concepts),
            ("forms", &self.forms),
        ];
        if let Some(p) = &self.exclude {
            files.push(("exclude", p));
        }
        if let Some(p) = &self.prior_results {
            files.push(("prior_results", p));
        }
        if let Some(p) = &self.classifier {
            files.push(("classifier", p));
        }
        files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_run_config_gets_defaults() {
        let json = r#"{
            "languages": "l.csv",
            "concepts": "c.csv",
            "forms": "f.csv"
        }"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(config.categories.len(), 10);
        assert_eq!(config.variants, vec![ControlVariant::Full]);
        assert_eq!(config.list_exclude, vec![Category::ExtremeRoundedness]);
        assert!(!config.weighted);
        assert!(!config.save_draws);
        assert_eq!(config.seed, None);
        assert_eq!(config.prior_simulation_draws, 0);
    }

    #[test]
    fn selective_run_config_round_trips() {
        let json = r#"{
            "languages": "l.csv",
            "concepts": "c.csv",
            "forms": "f.csv",
            "categories": ["voicing", "manner"],
            "variants": ["full", "none"],
            "sampler": {"chains": 2, "warmup": 100, "draws": 150, "seed": 9},
            "seed": 7
        }"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(
            config.categories,
            vec![Category::Voicing, Category::Manner]
        );
        assert_eq!(
            config.variants,
            vec![ControlVariant::Full, ControlVariant::None]
        );
        assert_eq!(config.sampler.chains, 2);
        let echoed = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(back.categories, config.categories);
        assert_eq!(back.seed, Some(7));
    }

    #[test]
    fn validation_rejects_duplicates_and_missing_files() {
        let json = r#"{
            "languages": "/nonexistent/l.csv",
            "concepts": "/nonexistent/c.csv",
            "forms": "/nonexistent/f.csv"
        }"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        assert!(config.validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        for name in ["l.csv", "c.csv", "f.csv"] {
            std::fs::write(dir.path().join(name), "x").unwrap();
        }
        let json = format!(
            r#"{{
                "languages": "{0}/l.csv",
                "concepts": "{0}/c.csv",
                "forms": "{0}/f.csv",
                "categories": ["voicing", "voicing"]
            }}"#,
            dir.path().display()
        );
        let config: RunConfig = serde_json::from_str(&json).unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("duplicates"), "{err}");
    }
}
