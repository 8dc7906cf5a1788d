//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::data::{generate_dataset, write_manifest, write_sample, ManifestEntry};
use crate::harness::run::{ABLATION_FILE, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE};
use crate::harness::{
    evaluate_checkpoint, gradient_suite, run_ablation, suite_table, train, RunConfig,
};
use crate::model::{count_parameters, estimate_flops, ModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "hftrans",
    version,
    about = "Hybrid-fusion transformer for multimodal 3D segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantoms and a manifest into the output directory.
    GenData(Common),
    /// Train on the configured dataset; writes a checkpoint and a loss log.
    Train(Common),
    /// Evaluate a checkpoint; writes per-sample and per-region metrics.
    Eval(EvalArgs),
    /// Train and evaluate every configured fusion mode on identical splits.
    Ablate(Common),
    /// Finite-difference check of every primitive and loss.
    GradCheck(GradArgs),
    /// Print parameter and multiply-accumulate counts for a configuration.
    Info(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Defaults to the checkpoint inside the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the table to `<out>/grad_check.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = crate::harness::gradsuite::DEFAULT_INSTANCES)]
    instances: usize,
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut run = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(out) = &common.out {
        run.out_dir = out.clone();
    }
    run.validate()?;
    Ok(run)
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<bool> {
    match command {
        Command::GenData(c) => {
            let run = load(&c)?;
            std::fs::create_dir_all(&run.out_dir)?;
            let mut entries = Vec::new();
            for (i, s) in generate_dataset(&run.phantom_config(), run.samples)?
                .iter()
                .enumerate()
            {
                let id = format!("phantom{i:03}");
                let entry = ManifestEntry {
                    intensities: run.out_dir.join(format!("{id}.intensities.hftv")),
                    labels: run.out_dir.join(format!("{id}.labels.hftv")),
                    id,
                };
                write_sample(s, &entry.intensities, &entry.labels)?;
                entries.push(entry);
            }
            let manifest = run.out_dir.join("manifest.txt");
            write_manifest(&manifest, &entries)?;
            writeln!(
                out,
                "wrote {} samples to {}",
                entries.len(),
                manifest.display()
            )?;
        }
        Command::Train(c) => {
            let run = load(&c)?;
            let every = (run.steps / 10).max(1);
            let result = train(&run, |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>5}  loss {loss:.6}");
                }
            })?;
            if let Some(last) = result.losses.last() {
                writeln!(out, "final loss {last:.6}")?;
            }
            writeln!(
                out,
                "wrote {} and {}",
                result.checkpoint.display(),
                run.out_dir.join(LOSS_FILE).display()
            )?;
        }
        Command::Eval(e) => {
            let run = load(&e.common)?;
            let checkpoint = e
                .checkpoint
                .unwrap_or_else(|| run.out_dir.join(CHECKPOINT_FILE));
            let report = evaluate_checkpoint(&run, &checkpoint)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            out.write_all(report.summary_csv().as_bytes())?;
            writeln!(out, "wrote {}", run.out_dir.join(METRICS_FILE).display())?;
        }
        Command::Ablate(c) => {
            let run = load(&c)?;
            let result = run_ablation(&run, |msg| eprintln!("{msg}"))?;
            let mut arms = result.arms.clone();
            arms.sort_by(|a, b| b.dice.total_cmp(&a.dice));
            let order: Vec<String> = arms
                .iter()
                .map(|a| format!("{} ({:.4})", a.mode, a.dice))
                .collect();
            writeln!(out, "dice ordering: {}", order.join(" > "))?;
            writeln!(out, "wrote {}", run.out_dir.join(ABLATION_FILE).display())?;
        }
        Command::GradCheck(a) => {
            let mut seed = 0;
            if let Some(path) = &a.config {
                seed = RunConfig::load(path)?.seed;
            }
            let seed = a.seed.unwrap_or(seed);
            let entries = gradient_suite(a.instances, seed)?;
            let table = suite_table(&entries);
            out.write_all(table.as_bytes())?;
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("grad_check.txt"), &table)?;
            }
            return Ok(entries.iter().all(|e| e.report.passed()));
        }
        Command::Info(c) => {
            let run = load(&c)?;
            let cfg = &run.model;
            let spec = cfg.fusion_spec()?;
            writeln!(out, "fusion: {}", cfg.fusion)?;
            writeln!(out, "encoders: {}", spec.num_encoders())?;
            writeln!(
                out,
                "tokens: {}",
                spec.num_encoders() * cfg.tokens_per_encoder()
            )?;
            writeln!(
                out,
                "parameters: {}",
                count_parameters(&ModelParams::<f32>::init(cfg)?)
            )?;
            writeln!(out, "flops: {}", estimate_flops(cfg)?)?;
        }
    }
    Ok(true)
}

/// Parses `argv` (program name first) and runs the command. Returns 0 on
/// success, 1 on a usage error and 2 when the command fails.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            let _ = writeln!(err, "error: gradient check failed");
            EXIT_FAILURE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_FAILURE
        }
    }
}
