//! Command-line front end: one subcommand per pipeline stage plus `run`,
//! which chains them all from a single JSON config.
//!
//! Exit codes: 0 on success, 1 on any error, 3 when every stage finished but
//! some fit had more than 10% divergent transitions and must not be
//! interpreted.

mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use soundsym::model::ControlVariant;
use soundsym::phonology::Category;

use pipeline::{Health, MatrixKind};

#[derive(Parser)]
#[command(
    name = "soundsym",
    version,
    about = "Sound-symbolism robustness pipeline: wordlists in, classified per-concept feature effects out"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides the seed of any stage that draws random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of categories fitted concurrently in `run`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, fully deterministic execution.
    #[arg(long, global = true)]
    reproducible: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Read wordlist CSV tables into a versioned binary corpus.
    Ingest(IngestArgs),
    /// Count feature levels per (language, concept) for one category.
    Annotate(AnnotateArgs),
    /// Export a phylogenetic or areal distance matrix as labeled CSV.
    Covmat(CovmatArgs),
    /// Fit the Dirichlet multilevel model and save posterior draws.
    Fit(FitArgs),
    /// Classify per-concept effects from saved posterior draws.
    Evaluate(EvaluateArgs),
    /// Correlate two result sets and lay out comparison plot data.
    Compare(CompareArgs),
    /// Rank saved fits by approximate leave-one-out predictive fit.
    Loo(LooArgs),
    /// Generate a synthetic corpus with known ground truth.
    Simulate(SimulateArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    languages: PathBuf,
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    forms: PathBuf,
    /// Language ids to drop, one per line, `#` comments allowed.
    #[arg(long)]
    exclude: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Binary corpus produced by `ingest`.
    #[arg(long)]
    corpus: PathBuf,
    /// One of the ten category names, e.g. `position` or `manner_voicing`.
    #[arg(long)]
    category: Category,
    /// Segment-to-profile mapping CSV overriding the built-in classifier.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CovmatArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    kind: MatrixKind,
    /// Areal masking cutoff in kilometers.
    #[arg(long, default_value_t = 1000.0)]
    cutoff_km: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Fit spec JSON: corpus path, category, priors, sampler settings.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's category.
    #[arg(long)]
    category: Option<Category>,
    /// Which covariance controls stay active.
    #[arg(long, default_value = "full")]
    variant: ControlVariant,
    /// Overrides the spec's chain count.
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Posterior draws produced by `fit`.
    #[arg(long)]
    draws: PathBuf,
    /// Optional fit spec; when given, the draws must match its category.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Evaluation config JSON (interval mass and equivalence bounds).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Prior results CSV.
    #[arg(long)]
    old: PathBuf,
    /// Results CSV from this toolchain.
    #[arg(long)]
    new: PathBuf,
    /// Report directory for correlation.csv, scatter.csv, manhattan.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LooArgs {
    /// Two or more draws files fitted on the same observations.
    #[arg(long, num_args = 2.., required = true)]
    draws: Vec<PathBuf>,
    /// Ranking CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Dataset directory (languages.csv, concepts.csv, forms.csv, truth.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Fresh output directory for all artifacts and the manifest.
    #[arg(long)]
    out: PathBuf,
}

fn dispatch(cli: Cli) -> anyhow::Result<Health> {
    match cli.command {
        Command::Ingest(args) => {
            pipeline::ingest(
                &args.languages,
                &args.concepts,
                &args.forms,
                args.exclude.as_deref(),
                &args.out,
            )?;
            Ok(Health::Ok)
        }
        Command::Annotate(args) => {
            pipeline::annotate(
                &args.corpus,
                args.category,
                args.classifier.as_deref(),
                &args.out,
            )?;
            Ok(Health::Ok)
        }
        Command::Covmat(args) => {
            pipeline::covmat(&args.corpus, args.kind, args.cutoff_km, &args.out)?;
            Ok(Health::Ok)
        }
        Command::Fit(args) => pipeline::fit(
            &args.spec,
            args.category,
            args.variant,
            args.chains,
            cli.seed,
            &args.out,
        ),
        Command::Evaluate(args) => pipeline::evaluate(
            &args.draws,
            args.spec.as_deref(),
            args.config.as_deref(),
            &args.out,
        ),
        Command::Compare(args) => {
            pipeline::compare(&args.old, &args.new, &args.out)?;
            Ok(Health::Ok)
        }
        Command::Loo(args) => {
            pipeline::loo(&args.draws, args.out.as_deref())?;
            Ok(Health::Ok)
        }
        Command::Simulate(args) => {
            pipeline::simulate_cmd(&args.spec, cli.seed, &args.out)?;
            Ok(Health::Ok)
        }
        Command::Run(args) => pipeline::run(
            &args.config,
            &args.out,
            cli.seed,
            cli.threads,
            cli.reproducible,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Health::Ok) => ExitCode::SUCCESS,
        Ok(Health::Unreliable) => {
            log::warn!("finished, but at least one fit was unreliable (exit 3)");
            ExitCode::from(3)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
