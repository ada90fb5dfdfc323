//! Command-line front end: pretraining runs, gradient audits, attention
//! dumps, synthetic data generation and checkpoint evaluation.
//!
//! Exit codes: 0 success, 1 validation or compatibility failure, 2 runtime
//! failure, 3 gradient check over threshold.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use duet::data::{save_dataset, synth_dataset};
use duet::trainer::{
    dump_attention, evaluate, format_attention_dump, load_checkpoint, restore_state,
    run_gradcheck, run_pretrain, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "duet", version, about = "contrastive vision-language pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences on a tiny
    /// probe model built from the config's seed and task composition.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print word-region attention matrices for one pair at selected
    /// fusion layers of a trained checkpoint.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pair: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        /// Write the dump here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic caption/region dataset file.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        vocab: usize,
        #[arg(long, default_value_t = 6)]
        regions: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Score a checkpoint on held-out synthetic pairs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of held-out pairs; defaults to the checkpoint config.
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes, not faults.
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(error_code(&err))
        }
    }
}

fn error_code(err: &TrainError) -> u8 {
    match err {
        TrainError::Validation(_)
        | TrainError::Data(_)
        | TrainError::Incompatible(_)
        | TrainError::Integrity(_) => 1,
        TrainError::Io(_) | TrainError::Numeric(_) => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode, TrainError> {
    match cli.command {
        Command::Pretrain { config, resume } => pretrain(&config, resume.as_deref()),
        Command::Gradcheck { config } => gradcheck(&config),
        Command::DumpAttention {
            ckpt,
            pair,
            layers,
            out,
        } => dump(&ckpt, pair, &layers, out.as_deref()),
        Command::SynthData {
            out,
            pairs,
            seed,
            vocab,
            regions,
            dim,
        } => synth(&out, pairs, seed, vocab, regions, dim),
        Command::Eval { ckpt, pairs } => eval(&ckpt, pairs),
    }
}

fn pretrain(config: &Path, resume: Option<&Path>) -> Result<ExitCode, TrainError> {
    let cfg = TrainConfig::load(config)?;
    let outcome = run_pretrain(&cfg, resume)?;
    println!(
        "trained {} steps ({} per epoch), momentum {}",
        outcome.global_step, outcome.steps_per_epoch, outcome.momentum
    );
    if let Some(report) = &outcome.final_report {
        println!(
            "final losses: mlm {} matching {} contrast {} regression {} label {} total {} rank_acc {}",
            report.mlm,
            report.matching,
            report.contrast,
            report.regression,
            report.label,
            report.total,
            report.positive_rank_acc
        );
    }
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: &Path) -> Result<ExitCode, TrainError> {
    let cfg = TrainConfig::load(config)?;
    let report = run_gradcheck(&cfg)?;
    for group in &report.groups {
        println!(
            "{}: max rel err {} over {} coords",
            group.name, group.max_rel_err, group.coords_checked
        );
    }
    println!(
        "worst {} against threshold {}: {}",
        report.worst,
        report.threshold,
        if report.passed() { "pass" } else { "FAIL" }
    );
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn dump(ckpt: &Path, pair: u64, layers: &[usize], out: Option<&Path>) -> Result<ExitCode, TrainError> {
    let checkpoint = load_checkpoint(ckpt)?;
    let (net, _, _) = restore_state(&checkpoint)?;
    let records = duet::trainer::acquire_records(&checkpoint.config)?;
    let record = records
        .iter()
        .find(|r| r.id == pair)
        .ok_or_else(|| TrainError::Validation(format!("pair {pair} not in the dataset")))?;
    let dump = dump_attention(&net, record, layers)?;
    let text = format_attention_dump(&dump);
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(
    out: &Path,
    pairs: usize,
    seed: u64,
    vocab: usize,
    regions: usize,
    dim: usize,
) -> Result<ExitCode, TrainError> {
    let records = synth_dataset(pairs, vocab, regions, dim, seed)?;
    save_dataset(out, &records, vocab)?;
    println!("wrote {} pairs to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(ckpt: &Path, pairs: Option<usize>) -> Result<ExitCode, TrainError> {
    let checkpoint = load_checkpoint(ckpt)?;
    let n = pairs.unwrap_or(checkpoint.config.eval_pairs);
    let report = evaluate(&checkpoint, n)?;
    println!(
        "pairs {} positive_rank_acc {} mlm_perplexity {} matching_accuracy {}",
        report.pairs, report.positive_rank_acc, report.mlm_perplexity, report.matching_accuracy
    );
    Ok(ExitCode::SUCCESS)
}
