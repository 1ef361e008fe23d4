//! Subcommands of the `d2r` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use d2r_core::attacks::generate;
use d2r_core::eval::class_probabilities;
use d2r_core::gradcheck::run_suite;
use d2r_core::train::train_with;
use d2r_core::{evaluate, AttackConfig, Dataset, EvalAttack, Generator, ModelState, OpKind, Role, Split};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::export::adv_batch_csv;
use crate::metrics::{epoch_rows, MetricsRecord, MetricsWriter};
use crate::plots::{export_plots, probes_csv, probes_path, ProbeRow};

/// Probe samples kept per class for the class-probability export.
pub const PROBES_PER_CLASS: usize = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Checkpoint(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<d2r_core::Error> for CliError {
    fn from(e: d2r_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "d2r", version, about = "Guide/target adversarial training on small datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a guide/target pair and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint with the configured evaluation attacks and append
    /// the results to the metrics file.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate adversarial examples against a checkpoint and write them as CSV.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// fgsm | pgd | trades | cag
        #[arg(long)]
        generator: String,
        /// Guide checkpoint, required by cag.
        #[arg(long)]
        guide: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Attack at most this many evaluation samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare every analytic gradient against central finite differences.
    Gradcheck {
        /// Scale the named op's gradient rule to exercise failure reporting.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Turn metrics files into per-run curves, a comparison table and
    /// class-probability tables.
    ExportPlots {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => train(&config),
        Command::Evaluate { config, checkpoint } => evaluate_checkpoint(&config, &checkpoint),
        Command::Attack {
            config,
            checkpoint,
            generator,
            guide,
            out,
            limit,
        } => attack(&config, &checkpoint, &generator, guide.as_deref(), &out, limit),
        Command::Gradcheck { corrupt_op } => gradcheck(corrupt_op.as_deref()),
        Command::ExportPlots { out, metrics } => {
            let written = export_plots(&metrics, &out).map_err(CliError::Runtime)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

/// The split accuracies are reported on: test samples, or every sample when
/// nothing is held out.
fn eval_split(dataset: &Dataset) -> Dataset {
    let test = dataset.subset(Split::Test);
    if test.is_empty() {
        dataset.subset(Split::Train)
    } else {
        test
    }
}

fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    config.dataset.load().map_err(|e| CliError::Runtime(format!("dataset: {e}")))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn probe_rows(run_id: &str, eval: &Dataset, models: [&ModelState; 2]) -> Result<Vec<ProbeRow>, CliError> {
    let mut seen = vec![0usize; eval.class_count()];
    let picked: Vec<usize> = (0..eval.len())
        .filter(|&i| {
            let c = &mut seen[eval.labels()[i]];
            *c += 1;
            *c <= PROBES_PER_CLASS
        })
        .collect();
    let (x, labels) = eval.batch(&picked)?;
    let mut rows = Vec::new();
    let probs = models.map(|m| class_probabilities(m, &x));
    for (i, &sample) in picked.iter().enumerate() {
        for (model, p) in models.iter().zip(&probs) {
            let p = p.as_ref().map_err(runtime)?;
            let k = p.shape()[1];
            rows.push(ProbeRow {
                run_id: run_id.to_string(),
                sample,
                label: labels[i],
                role: role_name(model.role()).to_string(),
                probabilities: p.data()[i * k..(i + 1) * k].to_vec(),
            });
        }
    }
    Ok(rows)
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Guide => "guide",
        Role::Target => "target",
    }
}

fn train(config_path: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let dataset = load_dataset(&config)?;
    create_dir(&config.output.dir)?;
    create_dir(&config.output.checkpoints)?;
    if let Some(parent) = config.output.metrics.parent() {
        create_dir(parent)?;
    }

    let mut writer = MetricsWriter::create(&config.output.metrics).map_err(runtime)?;
    let mut write_error = None;
    let outcome = train_with(&config.guide, &config.target, &dataset, &config.train, |record| {
        if write_error.is_none() {
            let rows = epoch_rows(&config.run_id, record, &config.train.monitor);
            write_error = writer.write(&rows).err();
        }
        eprintln!(
            "epoch {:>3}  loss {:.4}  target clean {:.3} robust {:.3}  guide clean {:.3} robust {:.3}",
            record.epoch, record.loss.total, record.target.clean, record.target.robust, record.guide.clean,
            record.guide.robust
        );
    })?;
    if let Some(e) = write_error {
        return Err(runtime(e));
    }

    let dir = &config.output.checkpoints;
    save_checkpoint(&outcome.guide, &dir.join("guide_final.ckpt"))?;
    save_checkpoint(&outcome.target, &dir.join("target_final.ckpt"))?;
    if let Some(best) = &outcome.best {
        save_checkpoint(&best.guide, &dir.join("guide_best.ckpt"))?;
        save_checkpoint(&best.target, &dir.join("target_best.ckpt"))?;
    }

    let probes = probe_rows(&config.run_id, &eval_split(&dataset), [&outcome.guide, &outcome.target])?;
    let probes_file = probes_path(&config.output.metrics);
    fs::write(&probes_file, probes_csv(&probes)).map_err(|e| runtime(format!("{}: {e}", probes_file.display())))?;

    println!(
        "{}: {} epochs, gap sign positive {:.3} negative {:.3}",
        config.run_id,
        outcome.records.len(),
        outcome.gap_sign_positive_fraction(),
        outcome.gap_sign_negative_fraction()
    );
    if let Some(best) = &outcome.best {
        println!("best target robust accuracy {} at epoch {}", best.robust_accuracy, best.epoch);
    }
    println!("metrics written to {}", config.output.metrics.display());
    Ok(())
}

fn evaluate_checkpoint(config_path: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let model = load_checkpoint(checkpoint)?;
    let eval = eval_split(&load_dataset(&config)?);

    let mut attacks = vec![EvalAttack::Clean];
    attacks.extend(config.eval.iter().filter(|a| **a != EvalAttack::Clean));
    let run_id = format!("{}-eval", config.run_id);
    let role = role_name(model.role());
    let mut rows = Vec::with_capacity(attacks.len());
    for attack in &attacks {
        let acc = evaluate(&model, &eval, attack)?;
        println!("{role} {} = {acc}", attack.metric_name());
        rows.push(MetricsRecord::accuracy(&run_id, config.train.epochs, role, attack, acc));
    }
    if let Some(parent) = config.output.metrics.parent() {
        create_dir(parent)?;
    }
    MetricsWriter::append(&config.output.metrics)
        .and_then(|mut w| w.write(&rows))
        .map_err(runtime)
}

fn attack(
    config_path: &Path,
    checkpoint: &Path,
    generator: &str,
    guide: Option<&Path>,
    out: &Path,
    limit: Option<usize>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let generator = Generator::from_name(generator).ok_or_else(|| {
        CliError::Config(format!(
            "--generator: unknown generator '{generator}' (expected fgsm, pgd, trades or cag)"
        ))
    })?;
    if generator == Generator::Cag && guide.is_none() {
        return Err(CliError::Config("--guide: the cag generator needs a guide checkpoint".into()));
    }
    let model = load_checkpoint(checkpoint)?;
    let guide = guide.map(load_checkpoint).transpose()?;
    let eval = eval_split(&load_dataset(&config)?);
    let n = limit.map_or(eval.len(), |l| l.min(eval.len()));
    if n == 0 {
        return Err(runtime("no samples to attack"));
    }
    let (x, labels) = eval.batch(&(0..n).collect::<Vec<_>>())?;
    let cfg = match generator {
        Generator::Fgsm => AttackConfig {
            eta: config.train.attack.epsilon,
            ..config.train.attack
        },
        _ => config.train.attack,
    };
    let batch = generate(generator, guide.as_ref(), &model, &x, &labels, &cfg)?;
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    fs::write(out, adv_batch_csv(&batch, &labels)).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    println!(
        "{} adversarial examples ({}) written to {}, max linf {}",
        n,
        generator.as_str(),
        out.display(),
        batch.linf_distance()
    );
    Ok(())
}

fn gradcheck(corrupt_op: Option<&str>) -> Result<(), CliError> {
    let fault = corrupt_op
        .map(|name| {
            OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("--corrupt-op: unknown op '{name}'")))
        })
        .transpose()?;
    let checks = run_suite(fault)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} worst rel err {:.3e}  checked {:>4}  excluded {:>2}  {status}",
            c.name, c.report.worst_rel_err, c.report.checked, c.report.excluded
        );
        if !c.report.passed() {
            failed.push(c.name);
        }
    }
    let worst = checks.iter().map(|c| c.report.worst_rel_err).fold(0.0, f64::max);
    println!("worst relative error {worst:.3e} over {} checks", checks.len());
    if failed.is_empty() {
        return Ok(());
    }
    let culprit = fault.map_or(String::new(), |op| format!(" with corrupted '{}' rule", op.name()));
    Err(runtime(format!("gradient check failed{culprit}: {}", failed.join(", "))))
}
