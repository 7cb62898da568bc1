//! End-to-end checks driven through the installed binary: the reproducibility
//! criterion for the `run` pipeline, plus a smoke pass over every subcommand
//! on a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn report(index: u32, name: &str, pass: bool, evidence: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {index:02} {name}: {verdict} — {evidence}");
    assert!(pass, "criterion {index:02} {name} failed: {evidence}");
}

fn soundsym(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_soundsym"))
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() && out.status.code() != Some(3) {
        panic!(
            "soundsym {:?} exited with {:?}\nstderr:\n{}",
            args,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

fn write_json(path: &Path, text: &str) {
    fs::write(path, text).expect("write json");
}

fn simulate_dataset(dir: &Path, category: &str, seed: u64) -> PathBuf {
    let spec = dir.join("sim.json");
    write_json(
        &spec,
        &format!(
            r#"{{
  "n_families": 2,
  "langs_per_family": 6,
  "n_areas": 2,
  "n_concepts": 8,
  "category": "{category}",
  "segments_per_form": 8,
  "background_effect_sd": 0.4,
  "tau_language": 0.2,
  "sigma_phylo": 0.4,
  "sigma_areal": 0.3,
  "theta": 20.0,
  "seed": {seed}
}}"#
        ),
    );
    let data = dir.join("data");
    soundsym(&[
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    data
}

#[test]
fn criterion_12_reproducible_run() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate_dataset(tmp.path(), "voicing", 321);
    let config = tmp.path().join("run.json");
    write_json(
        &config,
        &format!(
            r#"{{
  "languages": "{lang}",
  "concepts": "{conc}",
  "forms": "{forms}",
  "categories": ["voicing"],
  "variants": ["full"],
  "sampler": {{ "chains": 2, "warmup": 150, "draws": 200, "target_accept": 0.8 }},
  "prior_simulation_draws": 20,
  "seed": 7
}}"#,
            lang = data.join("languages.csv").display(),
            conc = data.join("concepts.csv").display(),
            forms = data.join("forms.csv").display(),
        ),
    );
    let mut digests: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for pass in 0..2 {
        let out = tmp.path().join(format!("out{pass}"));
        soundsym(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--reproducible",
        ]);
        let results = fs::read(out.join("results.csv")).expect("results.csv written");
        let manifest = fs::read(out.join("manifest.json")).expect("manifest.json written");
        digests.push((results, manifest));
    }
    let results_same = digests[0].0 == digests[1].0;
    let manifest_same = digests[0].1 == digests[1].1;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    report(
        12,
        "reproducible run",
        results_same && manifest_same && minutes <= 10.0,
        &format!(
            "results.csv ({} bytes) identical: {results_same}, manifest.json ({} bytes) \
             identical: {manifest_same}, {minutes:.1} min",
            digests[0].0.len(),
            digests[0].1.len()
        ),
    );
}

#[test]
fn subcommands_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = simulate_dataset(dir, "manner", 654);

    // ingest with a comment-only exclusion file
    let exclude = dir.join("exclude.txt");
    fs::write(&exclude, "# nothing dropped\n").unwrap();
    let corpus = dir.join("corpus.bin");
    soundsym(&[
        "ingest",
        "--languages",
        data.join("languages.csv").to_str().unwrap(),
        "--concepts",
        data.join("concepts.csv").to_str().unwrap(),
        "--forms",
        data.join("forms.csv").to_str().unwrap(),
        "--exclude",
        exclude.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]);
    assert!(corpus.exists());

    // annotate
    let counts = dir.join("counts.csv");
    soundsym(&[
        "annotate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--category",
        "manner",
        "--out",
        counts.to_str().unwrap(),
    ]);
    let counts_text = fs::read_to_string(&counts).unwrap();
    assert!(
        counts_text.starts_with("language_id,concept_id,"),
        "counts header: {}",
        counts_text.lines().next().unwrap_or_default()
    );

    // covmat, both kinds
    for kind in ["phylo", "areal"] {
        let out = dir.join(format!("{kind}.csv"));
        soundsym(&[
            "covmat",
            "--corpus",
            corpus.to_str().unwrap(),
            "--kind",
            kind,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(fs::read_to_string(&out).unwrap().lines().count() > 1);
    }

    // fit (two variants so loo has something to rank)
    let fit_spec = dir.join("fit.json");
    write_json(
        &fit_spec,
        &format!(
            r#"{{
  "corpus": "{corpus}",
  "category": "manner",
  "sampler": {{
    "chains": 2, "warmup": 80, "draws": 120, "seed": 5,
    "target_accept": 0.8, "store_log_lik": true
  }}
}}"#,
            corpus = corpus.display()
        ),
    );
    let draws_full = dir.join("draws_full.bin");
    let draws_none = dir.join("draws_none.bin");
    for (variant, path) in [("full", &draws_full), ("none", &draws_none)] {
        soundsym(&[
            "fit",
            "--spec",
            fit_spec.to_str().unwrap(),
            "--variant",
            variant,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(path.exists());
    }

    // evaluate against the spec's category
    let results = dir.join("results.csv");
    soundsym(&[
        "evaluate",
        "--draws",
        draws_full.to_str().unwrap(),
        "--spec",
        fit_spec.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
    ]);
    let results_text = fs::read_to_string(&results).unwrap();
    assert_eq!(
        results_text.lines().next().unwrap_or_default(),
        "concept,category,level,mean,hpdi_low,hpdi_high,classification"
    );
    // 8 concepts x 5 manner levels
    assert_eq!(results_text.lines().count(), 1 + 8 * 5);

    // loo ranking over the two fits
    let loo = dir.join("loo.csv");
    soundsym(&[
        "loo",
        "--draws",
        draws_full.to_str().unwrap(),
        draws_none.to_str().unwrap(),
        "--out",
        loo.to_str().unwrap(),
    ]);
    let loo_text = fs::read_to_string(&loo).unwrap();
    assert!(loo_text.starts_with("name,elpd,"));
    assert_eq!(loo_text.lines().count(), 3);
    assert!(loo_text.contains("draws_full") && loo_text.contains("draws_none"));

    // compare a result set against itself: perfect correlation
    let cmp = dir.join("cmp");
    soundsym(&[
        "compare",
        "--old",
        results.to_str().unwrap(),
        "--new",
        results.to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    let corr = fs::read_to_string(cmp.join("correlation.csv")).unwrap();
    let row = corr.lines().nth(1).expect("correlation row");
    assert_eq!(row, "40,1.0", "correlation row: {row}");
}
