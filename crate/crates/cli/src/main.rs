use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rsak_cli::commands::{self, write_kv, AblationRow, Axis};
use rsak_cli::{CliError, CliResult};
use rsak_core::data::{Metrics, Scenario};
use rsak_core::training::TrainMode;

#[derive(Parser)]
#[command(
    name = "rsak",
    version,
    about = "Train, merge and verify RS adapters on the synthetic grid task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// standard, question-only, random-image-test
        #[arg(long, default_value = "standard", value_parser = parse_scenario)]
        scenario: Scenario,
        /// Seed of the random-image swaps.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fold the RS adapter transforms into the adapter weights.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare logits before and after merging on random inputs.
    VerifyMerge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an ablation grid and print a tab-separated table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Only report parameter counts; do not train.
        #[arg(long)]
        count_only: bool,
    },
    /// Time unmerged against merged forward passes.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient check on a small model.
    Gradcheck {
        #[arg(long, default_value = "rsadapter", value_parser = parse_mode)]
        mode: TrainMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Noise added to every parameter before checking.
        #[arg(long, default_value_t = 0.1)]
        jitter: f64,
    },
    /// Generate a synthetic dataset file (plus vocabulary sidecar).
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        grid_side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the class-token attention map of one sample.
    Attmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        /// Defaults to the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Output prefix: writes <out>.txt, <out>.pgm, <out>.tokens.txt.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::parse(s).ok_or_else(|| format!("unknown scenario `{s}`"))
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| format!("unknown mode `{s}`"))
}

fn print_metrics(out: &mut dyn Write, label: &str, m: &Metrics) -> std::io::Result<()> {
    writeln!(out, "{}", Metrics::tsv_header())?;
    writeln!(out, "{}", m.tsv_row(label))
}

fn run(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Train {
            config,
            out: ckpt,
            seed,
        } => {
            let r = commands::cmd_train(&config, &ckpt, seed)?;
            write_kv(
                out,
                &[
                    ("checkpoint", ckpt.display().to_string()),
                    ("log", commands::log_path(&ckpt).display().to_string()),
                    ("tunable_params", r.tunable_params.to_string()),
                ],
            )?;
            print_metrics(out, "test", &r.test)?;
        }
        Command::Eval {
            ckpt,
            data,
            scenario,
            seed,
        } => {
            let m = commands::cmd_eval(&ckpt, &data, scenario, seed)?;
            print_metrics(out, scenario.name(), &m)?;
        }
        Command::Merge { ckpt, out: dest } => {
            let r = commands::cmd_merge(&ckpt, &dest)?;
            write_kv(
                out,
                &[
                    ("adapters", r.adapters.to_string()),
                    ("tensors_before", r.tensors_before.to_string()),
                    ("tensors_after", r.tensors_after.to_string()),
                    ("params_before", r.params_before.to_string()),
                    ("params_after", r.params_after.to_string()),
                ],
            )?;
        }
        Command::VerifyMerge {
            ckpt,
            trials,
            tol,
            seed,
        } => {
            let r = commands::cmd_verify_merge(&ckpt, trials, tol, seed)?;
            write_kv(
                out,
                &[
                    ("trials", r.trials.to_string()),
                    ("max_abs_diff", format!("{:e}", r.max_abs_diff)),
                    ("tol", format!("{:e}", r.tol)),
                    ("result", if r.passed { "pass" } else { "FAIL" }.into()),
                ],
            )?;
            if !r.passed {
                return Err(CliError::Verification(format!(
                    "merge changed logits by {:e} (> {:e})",
                    r.max_abs_diff, r.tol
                )));
            }
        }
        Command::Ablate {
            config,
            axis,
            count_only,
        } => {
            let rows = commands::cmd_ablate(&config, axis, count_only)?;
            writeln!(out, "{}", AblationRow::tsv_header())?;
            for r in rows {
                writeln!(out, "{}", r.tsv_row())?;
            }
        }
        Command::Bench {
            ckpt,
            batch,
            iters,
            warmup,
            seed,
        } => {
            let r = commands::cmd_bench(&ckpt, batch, iters, warmup, seed)?;
            write_kv(
                out,
                &[
                    ("batch", r.batch.to_string()),
                    ("iters", r.iters.to_string()),
                    ("unmerged_mean_secs", format!("{:.6}", r.unmerged_secs)),
                    ("merged_mean_secs", format!("{:.6}", r.merged_secs)),
                    ("merged_over_unmerged", format!("{:.4}", r.ratio)),
                    ("unmerged_ops_per_sample", r.unmerged_ops.to_string()),
                    ("merged_ops_per_sample", r.merged_ops.to_string()),
                    ("adapters", r.adapters.to_string()),
                    ("tokens", r.tokens.to_string()),
                    ("saved_ops_per_adapter_token", r.saved_per_adapter_token.to_string()),
                    ("expected_2(d'^2+d^2)+(d'+d)", r.expected_saving.to_string()),
                    ("max_abs_logit_diff", format!("{:e}", r.max_abs_diff)),
                ],
            )?;
        }
        Command::Gradcheck {
            mode,
            seed,
            eps,
            tol,
            jitter,
        } => {
            let r = commands::run_gradcheck(mode, seed, eps, tol, jitter)?;
            for (name, err) in &r.per_tensor {
                writeln!(out, "{name}\t{err:e}")?;
            }
            write_kv(
                out,
                &[
                    ("checked", r.checked.to_string()),
                    ("max_rel_err", format!("{:e}", r.max_rel_err)),
                    ("worst", r.worst.clone().unwrap_or_default()),
                    ("result", if r.passed { "pass" } else { "FAIL" }.into()),
                ],
            )?;
            if !r.passed {
                return Err(CliError::Verification(format!(
                    "gradient check failed: {:e} >= {:e}",
                    r.max_rel_err, r.tol
                )));
            }
        }
        Command::GenData {
            n,
            seed,
            grid_side,
            out: path,
        } => {
            let count = commands::cmd_gen_data(n, seed, grid_side, &path)?;
            write_kv(
                out,
                &[("samples", count.to_string()), ("path", path.display().to_string())],
            )?;
        }
        Command::Attmap {
            ckpt,
            data,
            sample,
            layer,
            out: prefix,
        } => {
            let r = commands::cmd_attmap(&ckpt, &data, sample, layer, &prefix)?;
            let image_mass: f64 = r.map.image.data().iter().sum();
            write_kv(
                out,
                &[
                    ("layer", r.layer.to_string()),
                    ("row_sum", format!("{:.17}", r.map.full_row.iter().sum::<f64>())),
                    ("text_mass", format!("{:.17}", r.map.text.iter().sum::<f64>())),
                    ("image_class_mass", format!("{:.17}", r.map.image_class)),
                    ("image_patch_mass", format!("{image_mass:.17}")),
                ],
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli.command, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
