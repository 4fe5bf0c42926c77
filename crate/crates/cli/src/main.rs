//! `head2toe`: command-line driver over the h2t-core library.
//!
//! Data goes to stdout and files, logs to stderr. Failures print one JSON
//! line on stderr and exit with 1 (usage), 2 (config), 3 (data) or
//! 4 (numeric).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use h2t_core::data::Task;
use h2t_core::harness::config::ExperimentConfig;
use h2t_core::harness::evaluate::{evaluate_with, load_tasks, obtain_backbone, write_outputs};
use h2t_core::harness::experiments::{domain_affinity, SplitStores};
use h2t_core::harness::report::{emit_report, read_csv, write_rows};
use h2t_core::probes::{fine_tune, head2toe_bundle, train_head_on, RegSpec};
use h2t_core::store::validate_store;
use h2t_core::Error;

#[derive(Parser, Debug)]
#[command(name = "head2toe", version, about = "Feature selection across all layers of a frozen backbone")]
struct Cli {
    /// Experiment config (JSON); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replication seed; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the backbone on the source task and save it.
    Pretrain,
    /// Write train/test activation stores for every task.
    Extract,
    /// Linear probe on the embedding with the fixed hyperparameters.
    Probe,
    /// Select features from all layers and fit a head on them.
    Head2toe,
    /// Fine-tune the backbone with a new head.
    Finetune,
    /// Cross-validated comparison of the configured methods.
    Evaluate,
    /// Linear-probe minus scratch accuracy per task.
    Affinity,
    /// Summary table and charts from an existing results CSV.
    Report {
        /// Results CSV; defaults to `<out-dir>/results.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Check an activation store for corruption and non-finite values.
    ValidateStore { path: PathBuf },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) | Error::Json(_) => ("config", 2),
        Error::NonFinite(_) | Error::Divergence { .. } | Error::Harness(_) => ("numeric", 4),
        Error::Dimension(_)
        | Error::Contract(_)
        | Error::Format(_)
        | Error::UnsupportedVersion { .. }
        | Error::Selection(_)
        | Error::Io(_) => ("data", 3),
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn key_listing() -> String {
    let mut s = String::from("Config keys (dotted path = default):\n");
    for (k, v) in ExperimentConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let matches = match Cli::command().after_long_help(key_listing()).try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", 1, e.to_string().lines().next().unwrap_or("invalid arguments")),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail("usage", 1, &e.to_string()),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => fail("usage", 1, &m),
        Err(Failure::Lib(e)) => {
            let (kind, code) = classify(&e);
            fail(kind, code, &e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    if let Command::ValidateStore { path } = &cli.command {
        return validate(path);
    }
    let cfg = load_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>, Failure> {
    Ok(load_tasks(cfg, seed(cfg))?)
}

/// One JSON object per line on stdout.
fn emit(value: serde_json::Value) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Pretrain => {
            let mut fresh = cfg.clone();
            fresh.backbone.path = None;
            let b = obtain_backbone(&fresh)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("backbone.h2tb");
            b.save_to(&path)?;
            emit(serde_json::json!({
                "backbone": path.display().to_string(),
                "source": b.source.dataset,
                "source_accuracy": b.source.accuracy,
                "params": b.spec.param_count()?,
            }))
        }
        Command::Extract => {
            let b = obtain_backbone(cfg)?;
            std::fs::create_dir_all(out)?;
            for t in tasks(cfg)? {
                let stores = SplitStores::extract(&b, &t)?;
                let train = out.join(format!("{}.train.h2ta", t.id));
                let test = out.join(format!("{}.test.h2ta", t.id));
                stores.train.write(&train)?;
                stores.test.write(&test)?;
                emit(serde_json::json!({
                    "task": t.id,
                    "train": train.display().to_string(),
                    "test": test.display().to_string(),
                    "layers": stores.train.layer_names(),
                }))?;
            }
            Ok(())
        }
        Command::Probe => {
            let b = obtain_backbone(cfg)?;
            let agg = cfg.aggregation(cfg.fixed.target_size);
            for t in tasks(cfg)? {
                let (train, test) = SplitStores::extract(&b, &t)?.bundles(&agg, std::slice::from_ref(&b.spec.embedding))?;
                let head = train_head_on(&train, &RegSpec::none(), &cfg.fixed_train(seed(cfg)))?;
                emit(serde_json::json!({
                    "task": t.id,
                    "method": "linear",
                    "train_acc": head.train_acc,
                    "test_acc": head.accuracy(&test.matrix, &test.labels)?,
                }))?;
            }
            Ok(())
        }
        Command::Head2toe => {
            let b = obtain_backbone(cfg)?;
            let h2t = cfg.fixed_head2toe(seed(cfg));
            std::fs::create_dir_all(out)?;
            for t in tasks(cfg)? {
                let (train, test) = SplitStores::extract(&b, &t)?.bundles(&h2t.aggregation, &h2t.layers)?;
                let r = head2toe_bundle(&train, &h2t)?;
                let path = out.join(format!("{}.h2th", t.id));
                std::fs::write(&path, r.artifact().to_bytes()?)?;
                emit(serde_json::json!({
                    "task": t.id,
                    "method": "head2toe",
                    "features": r.selection.dim(),
                    "kept": r.selection.kept,
                    "fraction": r.selection.fraction,
                    "train_acc": r.head.train_acc,
                    "test_acc": r.evaluate(&test)?,
                    "artifact": path.display().to_string(),
                }))?;
            }
            Ok(())
        }
        Command::Finetune => {
            let b = obtain_backbone(cfg)?;
            let ft = cfg.fixed_finetune(seed(cfg));
            for t in tasks(cfg)? {
                let m = fine_tune(&b, &t.train, &ft)?;
                emit(serde_json::json!({
                    "task": t.id,
                    "method": "finetune",
                    "train_acc": m.head.train_acc,
                    "test_acc": m.evaluate(&t.test)?,
                }))?;
            }
            Ok(())
        }
        Command::Evaluate => {
            let b = obtain_backbone(cfg)?;
            let result = evaluate_with(cfg, &b)?;
            write_outputs(&result, out)?;
            let mut stdout = std::io::stdout().lock();
            write_rows(&mut stdout, &h2t_core::harness::report::SUMMARY_COLUMNS, &result.summary)?;
            if let Some(rho) = result.affinity_gain_spearman {
                log::info!("spearman(affinity, head2toe gain) = {rho:.3}");
            }
            Ok(())
        }
        Command::Affinity => {
            let b = obtain_backbone(cfg)?;
            let acfg = cfg.fixed_affinity(seed(cfg));
            let records = tasks(cfg)?
                .iter()
                .map(|t| domain_affinity(t, &b, &acfg))
                .collect::<Result<Vec<_>, _>>()?;
            std::fs::create_dir_all(out)?;
            let header = ["task", "acc_linear", "acc_scratch", "affinity"];
            write_rows(std::fs::File::create(out.join("affinity.csv"))?, &header, &records)?;
            write_rows(std::io::stdout().lock(), &header, &records)?;
            Ok(())
        }
        Command::Report { input } => {
            let path = input.clone().unwrap_or_else(|| out.join("results.csv"));
            let rows = read_csv(&path)?;
            let summary = emit_report(&rows, out)?;
            write_rows(std::io::stdout().lock(), &h2t_core::harness::report::SUMMARY_COLUMNS, &summary)?;
            Ok(())
        }
        Command::ValidateStore { path } => validate(path),
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let report = validate_store(path)?;
    let mut out = std::io::stdout().lock();
    for issue in &report.issues {
        writeln!(out, "{issue}")?;
    }
    if report.issues.is_empty() {
        writeln!(out, "ok")?;
        return Ok(());
    }
    let all: Vec<String> = report.issues.iter().map(ToString::to_string).collect();
    Err(Failure::Lib(Error::Format(format!(
        "{}: {} issue(s): {}",
        path.display(),
        all.len(),
        all.join("; ")
    ))))
}

