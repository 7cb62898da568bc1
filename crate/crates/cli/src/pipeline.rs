//! Stage implementations behind the subcommands. Each stage is a plain
//! function over paths so it stays independently testable; `run` composes
//! them per category and writes a manifest at the end.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, ensure, Context, Result};
use log::{info, warn};

use soundsym::corpus::{filter_corpus, Corpus};
use soundsym::covariance::{areal_distance, patristic_distance};
use soundsym::evaluate::{
    compare_runs, count_effects, evaluate_category, list_intersection, read_results_csv,
    write_results_csv, EffectResult, EvaluationConfig,
};
use soundsym::inference::{compare_loo, psis_loo, sample, LooResult, PosteriorDraws};
use soundsym::model::{prior_simulate, ControlVariant, ModelSpec};
use soundsym::phonology::{count_features, to_proportions, Category, SegmentClassifier};
use soundsym::simulate::{simulate, SimulationSpec};

use crate::config::{FitSpec, RunConfig};
use crate::manifest::{hash_outputs, sha256_file, FileDigest, Manifest, ToolInfo};

/// Outcome of a command that completed: either everything is trustworthy or
/// some fit diverged too often to interpret (mapped to exit code 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Health {
    Ok,
    Unreliable,
}

impl Health {
    fn and(self, other: Health) -> Health {
        if self == Health::Unreliable || other == Health::Unreliable {
            Health::Unreliable
        } else {
            Health::Ok
        }
    }
}

fn read_exclusions(path: &Path) -> Result<BTreeSet<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeSet::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            out.insert(trimmed.to_string());
        }
    }
    Ok(out)
}

fn load_classifier(path: Option<&Path>) -> Result<Option<SegmentClassifier>> {
    match path {
        Some(p) => {
            let file = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let classifier = SegmentClassifier::read_csv(BufReader::new(file))
                .with_context(|| format!("parsing classifier {}", p.display()))?;
            Ok(Some(classifier))
        }
        None => Ok(None),
    }
}

pub fn ingest(
    languages: &Path,
    concepts: &Path,
    forms: &Path,
    exclude: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let corpus = Corpus::read_csv_files(languages, concepts, forms)?;
    let corpus = match exclude {
        Some(path) => filter_corpus(&corpus, None, &read_exclusions(path)?)?,
        None => corpus,
    };
    corpus.save(out)?;
    info!(
        "ingested {} languages, {} concepts, {} forms -> {}",
        corpus.languages.len(),
        corpus.concepts.len(),
        corpus.forms.len(),
        out.display()
    );
    Ok(())
}

pub fn annotate(
    corpus: &Path,
    category: Category,
    classifier: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    let classifier = load_classifier(classifier)?;
    let table = count_features(&corpus, category, classifier.as_ref());
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    table.write_csv(BufWriter::new(file))?;
    info!(
        "annotated {}: {} rows over {} levels -> {}",
        category.name(),
        table.rows.len(),
        table.levels.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MatrixKind {
    Phylo,
    Areal,
}

pub fn covmat(corpus: &Path, kind: MatrixKind, cutoff_km: f64, out: &Path) -> Result<()> {
    ensure!(cutoff_km > 0.0, "cutoff must be positive");
    let corpus = Corpus::load(corpus)?;
    let matrix = match kind {
        MatrixKind::Phylo => patristic_distance(&corpus.languages),
        MatrixKind::Areal => areal_distance(&corpus.languages, cutoff_km),
    };
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    matrix.write_csv(BufWriter::new(file))?;
    info!(
        "wrote {} x {} distance matrix -> {}",
        matrix.len(),
        matrix.len(),
        out.display()
    );
    Ok(())
}

fn build_model_spec(spec: &FitSpec, category: Category) -> Result<ModelSpec> {
    let corpus = Corpus::load(&spec.corpus)?;
    let classifier = load_classifier(spec.classifier.as_deref())?;
    let table = count_features(&corpus, category, classifier.as_ref());
    let props = to_proportions(&table)?;
    let model_spec =
        ModelSpec::from_proportions(&corpus, &props, spec.priors, spec.cutoff_km, spec.weighted)?;
    Ok(model_spec)
}

fn log_fit_summary(fit: &PosteriorDraws) {
    let d = &fit.diagnostics;
    info!(
        "fit {}/{}: {} chains x {} draws, max rhat {:.4}, min bulk ess {:.0}, divergent {}/{}",
        fit.category,
        fit.variant,
        fit.n_chains,
        fit.n_draws,
        d.max_rhat(),
        d.min_ess_bulk(),
        d.divergent_transitions,
        d.total_transitions,
    );
    if d.unreliable {
        warn!(
            "fit {}/{}: more than 10% of transitions diverged; do not interpret these results",
            fit.category, fit.variant,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fit(
    spec_path: &Path,
    category: Option<Category>,
    variant: ControlVariant,
    chains: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<Health> {
    let mut spec = FitSpec::read(spec_path)?;
    if let Some(c) = chains {
        spec.sampler.chains = c;
    }
    if let Some(s) = seed {
        spec.sampler.seed = s;
    }
    let category = category.unwrap_or(spec.category);
    let model_spec = build_model_spec(&spec, category)?;
    let fit = sample(&model_spec, variant, &spec.sampler)?;
    log_fit_summary(&fit);
    fit.save(out)?;
    info!("saved draws -> {}", out.display());
    Ok(if fit.diagnostics.unreliable {
        Health::Unreliable
    } else {
        Health::Ok
    })
}

pub fn evaluate(
    draws: &Path,
    spec_path: Option<&Path>,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<Health> {
    let fit = PosteriorDraws::load(draws)?;
    if let Some(path) = spec_path {
        let spec = FitSpec::read(path)?;
        ensure!(
            fit.category == spec.category.name(),
            "draws were fitted on {} but the spec says {}",
            fit.category,
            spec.category.name()
        );
    }
    let config = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<EvaluationConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => EvaluationConfig::default(),
    };
    config.validate()?;
    let results = evaluate_category(&fit, &config)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_results_csv(&results, BufWriter::new(file))?;
    info!(
        "classified {} effects of {} -> {}",
        results.len(),
        fit.category,
        out.display()
    );
    Ok(if fit.diagnostics.unreliable {
        Health::Unreliable
    } else {
        Health::Ok
    })
}

pub fn compare(old: &Path, new: &Path, out: &Path) -> Result<()> {
    let old_results = read_results_csv(BufReader::new(
        File::open(old).with_context(|| format!("opening {}", old.display()))?,
    ))?;
    let new_results = read_results_csv(BufReader::new(
        File::open(new).with_context(|| format!("opening {}", new.display()))?,
    ))?;
    let report = compare_runs(&old_results, &new_results)?;
    report.write_csvs(out)?;
    println!(
        "matched {} effects, Pearson r {:.4}",
        report.n_matched, report.pearson_r
    );
    Ok(())
}

pub fn loo(draws: &[PathBuf], out: Option<&Path>) -> Result<()> {
    ensure!(draws.len() >= 2, "need at least two fits to rank");
    let mut entries: Vec<(String, LooResult)> = Vec::with_capacity(draws.len());
    for path in draws {
        let fit = PosteriorDraws::load(path)?;
        let log_lik = fit.log_lik_matrix().ok_or_else(|| {
            anyhow!(
                "{} has no stored log likelihoods; refit with store_log_lik",
                path.display()
            )
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        entries.push((name, psis_loo(&log_lik)?));
    }
    let table = compare_loo(&entries)?;
    match out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            table.write_csv(BufWriter::new(file))?;
        }
        None => table.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

pub fn simulate_cmd(spec_path: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec: SimulationSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = simulate(&spec)?;
    data.write_dataset(out)?;
    info!(
        "simulated {} languages x {} concepts ({} forms) -> {}",
        data.languages.len(),
        data.concepts.len(),
        data.forms.len(),
        out.display()
    );
    Ok(())
}

/// Everything `run` produces for one category.
struct CategoryOutput {
    results: Vec<EffectResult>,
    health: Health,
}

struct RunContext<'a> {
    config: &'a RunConfig,
    corpus: &'a Corpus,
    classifier: Option<&'a SegmentClassifier>,
    seed: u64,
    out: &'a Path,
}

fn run_category(ctx: &RunContext<'_>, category: Category) -> Result<CategoryOutput> {
    let dir = ctx.out.join(category.name());
    std::fs::create_dir_all(&dir)?;
    let table = count_features(ctx.corpus, category, ctx.classifier);
    let file = File::create(dir.join("counts.csv"))?;
    table.write_csv(BufWriter::new(file))?;
    let props = to_proportions(&table)
        .with_context(|| format!("category {} has too little data", category.name()))?;
    let spec = ModelSpec::from_proportions(
        ctx.corpus,
        &props,
        ctx.config.priors,
        ctx.config.cutoff_km,
        ctx.config.weighted,
    )?;
    if ctx.config.prior_simulation_draws > 0 {
        let report = prior_simulate(&spec, ctx.config.prior_simulation_draws, ctx.seed);
        let file = File::create(dir.join("prior_report.csv"))?;
        report.write_csv(BufWriter::new(file))?;
    }
    let mut sampler = ctx.config.sampler;
    sampler.seed = ctx.seed;
    let mut health = Health::Ok;
    let mut loo_entries: Vec<(String, LooResult)> = Vec::new();
    let mut results = None;
    for (i, &variant) in ctx.config.variants.iter().enumerate() {
        let fit = sample(&spec, variant, &sampler)
            .with_context(|| format!("fitting {}/{}", category.name(), variant))?;
        log_fit_summary(&fit);
        if fit.diagnostics.unreliable {
            health = Health::Unreliable;
        }
        if ctx.config.save_draws {
            fit.save(dir.join(format!("draws_{variant}.bin")))?;
        }
        if let Some(log_lik) = fit.log_lik_matrix() {
            loo_entries.push((variant.name().to_string(), psis_loo(&log_lik)?));
        }
        if i == 0 {
            let evaluated = evaluate_category(&fit, &ctx.config.evaluation)?;
            let file = File::create(dir.join("results.csv"))?;
            write_results_csv(&evaluated, BufWriter::new(file))?;
            results = Some(evaluated);
        }
    }
    if loo_entries.len() >= 2 {
        let table = compare_loo(&loo_entries)?;
        let file = File::create(dir.join("loo.csv"))?;
        table.write_csv(BufWriter::new(file))?;
    }
    Ok(CategoryOutput {
        results: results.expect("variants is non-empty, so the first was evaluated"),
        health,
    })
}

/// Runs `f(0..n)` on up to `workers` threads, returning results in index
/// order. Each item's work is internally deterministic, so the schedule
/// cannot change any output.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every index was visited")
        })
        .collect()
}

pub fn run(
    config_path: &Path,
    out: &Path,
    seed_flag: Option<u64>,
    threads_flag: Option<usize>,
    reproducible: bool,
) -> Result<Health> {
    let config = RunConfig::read(config_path)?;
    if out.exists() {
        ensure!(
            std::fs::read_dir(out)?.next().is_none(),
            "output directory {} is not empty",
            out.display()
        );
    }
    std::fs::create_dir_all(out)?;
    match run_stages(&config, out, seed_flag, threads_flag, reproducible) {
        Ok(health) => Ok(health),
        Err(e) => {
            // leave partial artifacts in place, but make the failure obvious
            let _ = std::fs::write(out.join("FAILED"), format!("{e:#}\n"));
            Err(e)
        }
    }
}

fn run_stages(
    config: &RunConfig,
    out: &Path,
    seed_flag: Option<u64>,
    threads_flag: Option<usize>,
    reproducible: bool,
) -> Result<Health> {
    let seed = seed_flag.or(config.seed).unwrap_or(0);
    let threads = if reproducible {
        1
    } else {
        threads_flag.unwrap_or(1)
    };
    ensure!(threads >= 1, "threads must be at least 1");

    // ingest
    let corpus = Corpus::read_csv_files(&config.languages, &config.concepts, &config.forms)?;
    let corpus = match &config.exclude {
        Some(path) => filter_corpus(&corpus, None, &read_exclusions(path)?)?,
        None => corpus,
    };
    corpus.save(&out.join("corpus.bin"))?;
    info!(
        "corpus: {} languages, {} concepts, {} forms",
        corpus.languages.len(),
        corpus.concepts.len(),
        corpus.forms.len()
    );
    let classifier = load_classifier(config.classifier.as_deref())?;

    // covariance inputs, written once for the whole corpus
    let phylo = patristic_distance(&corpus.languages);
    let file = File::create(out.join("phylo.csv"))?;
    phylo.write_csv(BufWriter::new(file))?;
    let areal = areal_distance(&corpus.languages, config.cutoff_km.unwrap_or(1000.0));
    let file = File::create(out.join("areal.csv"))?;
    areal.write_csv(BufWriter::new(file))?;

    // per-category: annotate, (prior-simulate), fit, evaluate
    let ctx = RunContext {
        config,
        corpus: &corpus,
        classifier: classifier.as_ref(),
        seed,
        out,
    };
    let outputs = parallel_map(config.categories.len(), threads, |i| {
        run_category(&ctx, config.categories[i])
    });
    let mut health = Health::Ok;
    let mut all_results = Vec::new();
    for output in outputs {
        let output = output?;
        health = health.and(output.health);
        all_results.extend(output.results);
    }

    // combined tables
    let file = File::create(out.join("results.csv"))?;
    write_results_csv(&all_results, BufWriter::new(file))?;
    let counts = count_effects(&all_results);
    let file = File::create(out.join("effect_counts.csv"))?;
    counts.write_csv(BufWriter::new(file))?;

    let prior_results = match &config.prior_results {
        Some(path) => Some(read_results_csv(BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))?),
        None => None,
    };
    let lists = list_intersection(&all_results, &corpus.concepts, prior_results.as_deref(), &[]);
    let file = File::create(out.join("lists.csv"))?;
    lists.write_csv(BufWriter::new(file))?;
    if !config.list_exclude.is_empty() {
        let excluded: Vec<String> = config
            .list_exclude
            .iter()
            .map(|c| c.name().to_string())
            .collect();
        let filtered = list_intersection(
            &all_results,
            &corpus.concepts,
            prior_results.as_deref(),
            &excluded,
        );
        let file = File::create(out.join("lists_filtered.csv"))?;
        filtered.write_csv(BufWriter::new(file))?;
    }
    if let Some(old) = &prior_results {
        let report = compare_runs(old, &all_results)?;
        report.write_csvs(&out.join("compare"))?;
        info!(
            "compared against prior results: {} matched, Pearson r {:.4}",
            report.n_matched, report.pearson_r
        );
    }

    // manifest last, so it can hash everything else
    let mut inputs = std::collections::BTreeMap::new();
    for (name, path) in config.input_files() {
        inputs.insert(
            name,
            FileDigest {
                path: path.display().to_string(),
                sha256: sha256_file(path)?,
            },
        );
    }
    let manifest = Manifest {
        tool: ToolInfo {
            name: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
        },
        seed,
        reproducible,
        threads,
        config: config.clone(),
        inputs,
        outputs: hash_outputs(out)?,
    };
    manifest.write(&out.join("manifest.json"))?;
    info!("run complete -> {}", out.display());
    Ok(health)
}
