use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use moe_mos::config::RunConfig;
use moe_mos::dataset::{load_manifest, write_manifest, EmbeddingStorage};
use moe_mos::experiment::{
    evaluate_run, grad_check_run, load_run, load_training_data, read_json, synthesize, train_run,
    write_json, write_run, RunSummary, Subset,
};
use moe_mos::metrics::{build_rank_table, format_3dp, render_rank_table, Level, ReportDocument};
use moe_mos::synthgen::write_ground_truth;
use moe_mos::{Error, Result};

/// Mixture-of-experts MOS prediction: data generation, training,
/// evaluation, ranking and gradient checking.
#[derive(Parser, Debug)]
#[command(name = "moe-mos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: manifests, embeddings and ground truth.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the three training stages and write checkpoints and logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Labeled manifest to train on (overrides data.manifest).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run on a labeled manifest.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Name recorded in the report.
        #[arg(long, default_value = "model")]
        name: String,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank report files against each other.
    Rank {
        #[arg(long, value_enum, default_value_t = LevelArg::Both)]
        level: LevelArg,
        /// Also write the rank tables as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Utterance,
    System,
    Both,
}

/// Outcomes other than success.
enum Failure {
    Usage(String),
    Run(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        // the data seed follows the run seed
        cfg.synth.seed = 0;
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out = Some(out.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    cfg.out
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set `out`".into()))
}

fn generate(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let dir = out_dir(cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let corpus = synthesize(cfg)?;
    let storage = EmbeddingStorage::Binary(PathBuf::from("embeddings.moeb"));
    write_manifest(&corpus.train_pool, &dir.join("manifest.jsonl"), &storage)?;
    write_manifest(
        &corpus.test_pool,
        &dir.join("manifest_test_raters.jsonl"),
        &storage,
    )?;
    write_ground_truth(&dir.join("ground_truth.jsonl"), &corpus.truth)?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.resolved().to_toml_string()?).map_err(|e| Error::Io {
        path: config_path,
        source: e,
    })?;
    eprintln!(
        "generated {} utterances from {} systems in {}",
        corpus.train_pool.len(),
        corpus.train_pool.n_classes(),
        dir.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let dir = out_dir(cfg)?;
    let start = Instant::now();
    let (data, aux) = load_training_data(cfg)?;
    eprintln!("training on {} samples (dim {})", data.len(), data.dim());
    let run = train_run(cfg, &data, aux.as_ref())?;
    for s in &run.outcome.stages {
        eprintln!(
            "stage {}: {} epochs, best epoch {}, {:?}",
            s.stage,
            s.epochs_run,
            s.best_epoch.map_or("-".into(), |e| (e + 1).to_string()),
            s.stop_reason
        );
    }
    write_run(&dir, &run)?;
    let summary = RunSummary::of(&run);
    println!(
        "test accuracy {}  utterance SRCC {}  system SRCC {}  ({:.1} s)",
        format_3dp(summary.test.accuracy),
        summary.test.utterance.srcc.map_or("n/a".into(), format_3dp),
        summary.test.system.srcc.map_or("n/a".into(), format_3dp),
        start.elapsed().as_secs_f64()
    );
    eprintln!("wrote run to {}", dir.display());
    Ok(())
}

fn evaluate(
    run_dir: &Path,
    data: &Path,
    subset: Subset,
    name: String,
    out: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let run = load_run(run_dir)?;
    let dataset = load_manifest(data, true)?;
    let eval = evaluate_run(&run, &dataset, subset)?;
    let doc = ReportDocument {
        name,
        utterance: Some(eval.utterance.clone()),
        system: Some(eval.system.clone()),
        accuracy: Some(eval.accuracy),
    };
    for level in [Level::Utterance, Level::System] {
        let table = build_rank_table(
            level,
            &[(doc.name.clone(), doc.level(level).unwrap().clone())],
        )?;
        print!("{}", render_rank_table(&table));
    }
    println!("accuracy {}", format_3dp(eval.accuracy));
    if let Some(path) = out {
        write_json(path, &doc)?;
    }
    Ok(())
}

fn rank(
    level: LevelArg,
    json: Option<&Path>,
    reports: &[PathBuf],
) -> std::result::Result<(), Failure> {
    let docs = reports
        .iter()
        .map(|p| read_json::<ReportDocument>(p))
        .collect::<Result<Vec<_>>>()?;
    let levels: &[Level] = match level {
        LevelArg::Utterance => &[Level::Utterance],
        LevelArg::System => &[Level::System],
        LevelArg::Both => &[Level::Utterance, Level::System],
    };
    let mut tables = Vec::new();
    for &lvl in levels {
        let entries = docs
            .iter()
            .zip(reports)
            .map(|(d, path)| {
                d.level(lvl)
                    .cloned()
                    .map(|r| (d.name.clone(), r))
                    .ok_or_else(|| {
                        Failure::Usage(format!("{} has no {:?} report", path.display(), lvl))
                    })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let table = build_rank_table(lvl, &entries)?;
        println!("{}", render_rank_table(&table));
        tables.push(table);
    }
    if let Some(path) = json {
        write_json(path, &tables)?;
    }
    Ok(())
}

fn grad_check(cfg: &RunConfig, tolerance: f64) -> std::result::Result<(), Failure> {
    let start = Instant::now();
    let report = grad_check_run(cfg)?;
    println!(
        "max relative error {:e} over {} parameters ({:.1} s)",
        report.max_relative_error,
        report.checked,
        start.elapsed().as_secs_f64()
    );
    for (name, err) in &report.per_tensor {
        eprintln!("  {name:<24} {err:e}");
    }
    if report.max_relative_error > tolerance {
        return Err(Failure::Check(format!(
            "gradient check failed: {:e} exceeds {tolerance:e}",
            report.max_relative_error
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            generate(&load_config(config.as_deref(), seed, out.as_deref())?)
        }
        Command::Train {
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref(), seed, out.as_deref())?;
            if data.is_some() {
                cfg.data.manifest = data;
                cfg.validate()?;
            }
            train(&cfg)
        }
        Command::Evaluate {
            run,
            data,
            subset,
            name,
            out,
        } => evaluate(&run, &data, subset, name, out.as_deref()),
        Command::Rank {
            level,
            json,
            reports,
        } => rank(level, json.as_deref(), &reports),
        Command::GradCheck {
            config,
            seed,
            tolerance,
        } => grad_check(&load_config(config.as_deref(), seed, None)?, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
