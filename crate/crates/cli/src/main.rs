//! `rfop`: train, evaluate, synthesize benchmark data, compute EERs, and
//! self-check gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 config/argument error,
//! 3 data error, 4 numerical abort.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;

use config::RunConfig;
use rfop_core::checkpoint::{load_params, save_params};
use rfop_core::error::Error;
use rfop_core::metrics::{cross_config_report, eer_of_scores, format_eer, read_scores, read_trials};
use rfop_core::sampler::{build_trials, LanguageView};
use rfop_core::selfcheck::run_all;
use rfop_core::store::{load_store, save_store, FeatureStore};
use rfop_core::synth::{generate_synthetic, split_identities, SyntheticSpec};
use rfop_core::train::TrainSession;
use rfop_core::Real;

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Number of trials per label in the per-language CSVs `synth` writes.
const SYNTH_TRIALS_PER_LABEL: usize = 500;

/// Fixed seed for the gradcheck command's random inputs.
const GRADCHECK_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "rfop",
    about = "Face-voice association: training, cross-language EER evaluation, and synthetic benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run two-phase training from a JSON config; write checkpoint and log.
    Train {
        /// JSON run configuration (model, loss weights, plan, paths, languages).
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path (RFOP1 format).
        #[arg(long)]
        out: PathBuf,
        /// Training-log CSV path; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides both the init seed and the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a trials file with a checkpoint and report the EER.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        blob: PathBuf,
        /// Trials CSV: face_sample_id,voice_sample_id,label.
        #[arg(long)]
        trials: PathBuf,
        /// Report CSV written as train_lang,test_lang,eer plus an overall row.
        #[arg(long)]
        report: PathBuf,
        /// Label recorded in the report's train_lang column.
        #[arg(long, default_value = "train")]
        train_lang: String,
        /// Label recorded in the report's test_lang column.
        #[arg(long, default_value = "test")]
        test_lang: String,
    },
    /// Generate the synthetic multilingual benchmark: train/validation/test
    /// stores plus per-language trial files.
    Synth {
        /// JSON synthetic spec; missing fields take the benchmark defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute the EER of a scores CSV (score,label).
    Eer {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Check every tape primitive and the full model+loss gradients
    /// against central finite differences.
    Gradcheck {
        /// Max relative error allowed per op.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

/// Training-time errors: NaN aborts get their own exit code, everything
/// else counts as a data problem.
fn data_or_numeric(e: Error) -> Failure {
    match e {
        Error::NonFinite(_) => Failure {
            code: EXIT_NUMERIC,
            message: e.to_string(),
        },
        other => Failure::data(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            log,
            seed,
        } => cmd_train(config, out, log, seed),
        Command::Eval {
            ckpt,
            manifest,
            blob,
            trials,
            report,
            train_lang,
            test_lang,
        } => cmd_eval(ckpt, manifest, blob, trials, report, train_lang, test_lang),
        Command::Synth { spec, out_dir, seed } => cmd_synth(spec, out_dir, seed),
        Command::Eer { scores } => cmd_eer(scores),
        Command::Gradcheck { tol } => cmd_gradcheck(tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_run_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn load_store_or_data_err(manifest: &Path, blob: &Path) -> Result<FeatureStore, Failure> {
    load_store(manifest, blob).map_err(|e| {
        Failure::data(format!(
            "loading store ({}, {}): {e}",
            manifest.display(),
            blob.display()
        ))
    })
}

fn cmd_train(
    config_path: PathBuf,
    out: PathBuf,
    log: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let cfg = load_run_config(&config_path, seed)?;
    let train_store = load_store_or_data_err(&cfg.paths.train_manifest, &cfg.paths.train_blob)?;
    let val_store = load_store_or_data_err(&cfg.paths.val_manifest, &cfg.paths.val_blob)?;

    let session = TrainSession {
        model_cfg: &cfg.model,
        loss_weights: &cfg.loss_weights,
        plan: &cfg.plan,
        sampler: cfg.sampler,
        train_store: &train_store,
        val_store: &val_store,
        train_lang: &cfg.languages.train_lang,
    };
    let outcome = session.two_phase_train().map_err(data_or_numeric)?;

    save_params(&outcome.best.params, &out)
        .map_err(|e| Failure::data(format!("writing checkpoint {}: {e}", out.display())))?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    fs::write(&log_path, outcome.log.to_csv())
        .map_err(|e| Failure::data(format!("writing log {}: {e}", log_path.display())))?;

    eprintln!(
        "best checkpoint: phase {} epoch {} (validation EER {})",
        outcome.best.phase,
        outcome.best.epoch,
        format_eer(outcome.best.val_eer_percent)
    );
    eprintln!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ckpt: PathBuf,
    manifest: PathBuf,
    blob: PathBuf,
    trials_path: PathBuf,
    report: PathBuf,
    train_lang: String,
    test_lang: String,
) -> Result<(), Failure> {
    let params = load_params::<Real>(&ckpt)
        .map_err(|e| Failure::config(format!("checkpoint {}: {e}", ckpt.display())))?;
    let store = load_store_or_data_err(&manifest, &blob)?;
    let trials = read_trials::<Real>(&trials_path)
        .map_err(|e| Failure::data(format!("trials {}: {e}", trials_path.display())))?;

    let matrix = cross_config_report(
        &[(train_lang, &params)],
        &[(test_lang, &store, trials.as_slice())],
    )
    .map_err(|e| Failure::data(e.to_string()))?;

    fs::write(&report, matrix.to_csv())
        .map_err(|e| Failure::data(format!("writing report {}: {e}", report.display())))?;
    println!("EER: {}", format_eer(matrix.cells[0].eer_percent));
    Ok(())
}

fn cmd_synth(spec_path: PathBuf, out_dir: PathBuf, seed: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(&spec_path)
        .map_err(|e| Failure::config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("spec {}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Failure::config(e.to_string()))?;

    let store = generate_synthetic(&spec).map_err(|e| Failure::config(e.to_string()))?;
    let split = split_identities(&store.identities(), spec.seed)
        .map_err(|e| Failure::config(e.to_string()))?;

    fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::data(format!("creating {}: {e}", out_dir.display())))?;

    let splits = [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ];
    for (name, identities) in splits {
        let subset = store
            .subset_by_identity(&|id| identities.iter().any(|k| k == id))
            .map_err(|e| Failure::data(e.to_string()))?;
        let manifest = out_dir.join(format!("{name}.manifest.csv"));
        let blob = out_dir.join(format!("{name}.blob"));
        save_store(&subset, &manifest, &blob)
            .map_err(|e| Failure::data(format!("writing {name} split: {e}")))?;
        eprintln!(
            "{name}: {} identities, {} samples -> {}, {}",
            identities.len(),
            subset.len(),
            manifest.display(),
            blob.display()
        );
        if name == "test" {
            for (lang_idx, lang) in spec.languages.iter().enumerate() {
                let view = LanguageView::build(&subset, lang)
                    .map_err(|e| Failure::data(e.to_string()))?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    spec.seed ^ (0x7e57_0000 + lang_idx as u64),
                );
                let trials = build_trials::<Real>(
                    &view,
                    SYNTH_TRIALS_PER_LABEL,
                    SYNTH_TRIALS_PER_LABEL,
                    &mut rng,
                )
                .map_err(|e| Failure::data(e.to_string()))?;
                let trials_path = out_dir.join(format!("trials_{lang}.csv"));
                rfop_core::metrics::write_trials(&trials, &trials_path)
                    .map_err(|e| Failure::data(e.to_string()))?;
                eprintln!("test trials ({lang}): {}", trials_path.display());
            }
        }
    }
    Ok(())
}

fn cmd_eer(scores: PathBuf) -> Result<(), Failure> {
    let (same, diff) = read_scores(&scores)
        .map_err(|e| Failure::data(format!("scores {}: {e}", scores.display())))?;
    let eer = eer_of_scores(&same, &diff).map_err(|e| Failure::data(e.to_string()))?;
    println!("EER: {:.2}", eer.eer_percent);
    Ok(())
}

fn cmd_gradcheck(tol: f64) -> Result<(), Failure> {
    let checks = run_all::<Real>(tol, GRADCHECK_SEED).map_err(|e| Failure {
        code: EXIT_CHECK_FAILURE,
        message: e.to_string(),
    })?;
    let mut all_pass = true;
    for c in &checks {
        println!(
            "{}: max_rel_err={:.3e} {}",
            c.name,
            c.max_rel_err,
            if c.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= c.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK_FAILURE,
            message: format!("{} of {} gradient checks failed",
                checks.iter().filter(|c| !c.pass).count(), checks.len()),
        })
    }
}
