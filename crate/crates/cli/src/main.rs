//! `ealign`: train the synthetic experiments and apply energy-based logit
//! correction to externally produced logit files.
//!
//! Exit status is zero on success; any contract violation prints one
//! diagnostic line to standard error and exits nonzero.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ealign::aligning::{
    apply_shifts_to_matrix, cluster_shifts, jenks_breaks, select_num_clusters, ShiftVector,
};
use ealign::data::load_logit_file;
use ealign::harness::{eval_block, run_cil, run_lt, write_cil_run_dir, write_lt_run_dir};
use ealign::metrics::energy_bias_diagnostic;
use ealign::numerics::neg_free_energies;

use config::{resolve, CilRunConfig, LtRunConfig};

#[derive(Parser)]
#[command(name = "ealign", version, about = "Energy-aligned classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a long-tailed synthetic set, fit shifts, evaluate both ways
    TrainLt {
        /// JSON config; omitted keys fall back to the stock experiment
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory to create
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file
        #[arg(long)]
        seed: Option<u64>,
        /// Single-key override, e.g. --set epochs=10 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a class-incremental stream with rehearsal and per-step shifts
    TrainCil {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fit cluster shifts to a sampling-set logit file; no training involved
    Align {
        /// Logit file of the balanced sampling set
        #[arg(long)]
        logits: PathBuf,
        /// Per-class training counts, one integer per line
        #[arg(long)]
        counts: PathBuf,
        /// Cluster count, or "auto" to pick by sampling-set accuracy
        #[arg(long)]
        clusters: String,
        /// "few" anchors the lowest-count cluster; an integer picks one
        #[arg(long, default_value = "few")]
        anchor: String,
        /// Output shifts.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a logit file against labels, optionally after applying shifts
    Eval {
        #[arg(long)]
        logits: PathBuf,
        /// True labels, one integer per line
        #[arg(long)]
        labels: PathBuf,
        /// shifts.json to apply before scoring
        #[arg(long)]
        shifts: Option<PathBuf>,
        /// Output metrics.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-class negative free energies of a logit file
    Diagnose {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        counts: PathBuf,
        /// Output CSV: class,count,neg_free_energy
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainLt {
            config,
            out,
            seed,
            set,
        } => train_lt(config.as_deref(), &out, seed, &set),
        Cmd::TrainCil {
            config,
            out,
            seed,
            set,
        } => train_cil(config.as_deref(), &out, seed, &set),
        Cmd::Align {
            logits,
            counts,
            clusters,
            anchor,
            out,
        } => align(&logits, &counts, &clusters, &anchor, &out),
        Cmd::Eval {
            logits,
            labels,
            shifts,
            out,
        } => eval(&logits, &labels, shifts.as_deref(), &out),
        Cmd::Diagnose {
            logits,
            counts,
            out,
        } => diagnose(&logits, &counts, &out),
    }
}

fn train_lt(config: Option<&Path>, out: &Path, seed: Option<u64>, set: &[String]) -> Result<()> {
    let cfg: LtRunConfig = resolve(config, set, seed, "train-lt")?;
    let (train, test) = cfg.datasets()?;
    let outcome = run_lt(&train, &test, &cfg.model_spec(), &cfg.lt(), &cfg.sgd(), cfg.seed)?;
    write_lt_run_dir(out, &outcome, &serde_json::to_value(&cfg)?)?;
    let r = &outcome.report;
    println!(
        "train-lt: {} clusters, top-1 {:.2} -> {:.2}, run dir {}",
        r.selected_clusters,
        r.uncorrected.top1_micro,
        r.corrected.top1_micro,
        out.display()
    );
    Ok(())
}

fn train_cil(config: Option<&Path>, out: &Path, seed: Option<u64>, set: &[String]) -> Result<()> {
    let cfg: CilRunConfig = resolve(config, set, seed, "train-cil")?;
    let (train, test) = cfg.datasets()?;
    let outcome = run_cil(
        &train,
        &test,
        &cfg.model_spec(),
        &cfg.cil(),
        &cfg.ea(),
        &cfg.sgd(),
        cfg.ea_enabled,
        cfg.seed,
    )?;
    write_cil_run_dir(out, &outcome, &serde_json::to_value(&cfg)?)?;
    let r = &outcome.report;
    println!(
        "train-cil: {} steps, avg incremental top-1 {}, run dir {}",
        r.steps.len(),
        r.avg_incremental
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}")),
        out.display()
    );
    Ok(())
}

/// Candidate cluster counts tried by `--clusters auto`.
const AUTO_CANDIDATES: [usize; 5] = [1, 2, 3, 4, 5];

fn align(
    logits_path: &Path,
    counts_path: &Path,
    clusters: &str,
    anchor: &str,
    out: &Path,
) -> Result<()> {
    let (logits, labels) = load_logit_file(logits_path)
        .with_context(|| format!("loading logits {}", logits_path.display()))?;
    let counts = read_integers(counts_path, "counts")?;
    if counts.len() != logits.class_count() {
        bail!(
            "counts file lists {} classes but the logit file has {}",
            counts.len(),
            logits.class_count()
        );
    }
    let m = match clusters {
        "auto" => {
            let labels = labels
                .as_deref()
                .context("--clusters auto needs labels embedded in the logit file")?;
            let mut distinct = counts.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let feasible: Vec<usize> = AUTO_CANDIDATES
                .iter()
                .copied()
                .filter(|&m| m <= distinct.len())
                .collect();
            select_num_clusters(&feasible, &counts, &logits, labels)?
        }
        s => s
            .parse::<usize>()
            .with_context(|| format!("--clusters takes an integer or 'auto', got '{s}'"))?,
    };
    let mut assignment = jenks_breaks(&counts, m)?;
    if anchor != "few" {
        let k = anchor
            .parse::<usize>()
            .with_context(|| format!("--anchor takes 'few' or a cluster index, got '{anchor}'"))?;
        assignment = assignment.with_anchor(k)?;
    }
    let shifts = cluster_shifts(&logits, &assignment)?;
    shifts.save(out)?;
    println!(
        "align: {m} clusters, anchor {}, shifts written to {}",
        assignment.anchor_cluster(),
        out.display()
    );
    Ok(())
}

fn eval(
    logits_path: &Path,
    labels_path: &Path,
    shifts: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (logits, _) = load_logit_file(logits_path)
        .with_context(|| format!("loading logits {}", logits_path.display()))?;
    let labels = read_integers(labels_path, "labels")?;
    if labels.len() != logits.sample_count() {
        bail!(
            "labels file lists {} samples but the logit file has {}",
            labels.len(),
            logits.sample_count()
        );
    }
    let scored = match shifts {
        Some(p) => {
            let sv =
                ShiftVector::load(p).with_context(|| format!("loading shifts {}", p.display()))?;
            apply_shifts_to_matrix(&logits, &sv)?
        }
        None => logits,
    };
    let block = eval_block(&scored, &labels, None)?;
    let mut text = serde_json::to_string_pretty(&block)?;
    text.push('\n');
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "eval: top-1 {:.2}, metrics written to {}",
        block.top1_micro,
        out.display()
    );
    Ok(())
}

fn diagnose(logits_path: &Path, counts_path: &Path, out: &Path) -> Result<()> {
    let (logits, _) = load_logit_file(logits_path)
        .with_context(|| format!("loading logits {}", logits_path.display()))?;
    let counts = read_integers(counts_path, "counts")?;
    if counts.len() != logits.class_count() {
        bail!(
            "counts file lists {} classes but the logit file has {}",
            counts.len(),
            logits.class_count()
        );
    }
    let energies = neg_free_energies(&logits)?;
    let mut f =
        std::fs::File::create(out).with_context(|| format!("writing {}", out.display()))?;
    writeln!(f, "class,count,neg_free_energy")?;
    for (class, (&count, &energy)) in counts.iter().zip(&energies).enumerate() {
        writeln!(f, "{class},{count},{energy}")?;
    }
    match energy_bias_diagnostic(&counts, &energies)? {
        Some(rho) => println!("diagnose: spearman(count, energy) = {rho:.4}"),
        None => println!("diagnose: spearman undefined on constant input"),
    }
    println!("diagnose: table written to {}", out.display());
    Ok(())
}

/// One non-negative integer per line; blank lines are allowed.
fn read_integers(path: &Path, what: &str) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(line.parse::<usize>().with_context(|| {
            format!(
                "{}:{}: expected a non-negative integer, got '{line}'",
                path.display(),
                i + 1
            )
        })?);
    }
    if values.is_empty() {
        bail!("{what} file {} is empty", path.display());
    }
    Ok(values)
}
