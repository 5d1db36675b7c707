use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use otce::checkpoint;
use otce::harness::{self, verify, Axis, TrainConfig};
use otce::tasks::TaskSpec;
use otce::{DType, Real, Result};

#[derive(Parser)]
#[command(
    name = "otce",
    about = "Train, evaluate and verify small hybrid SSM/attention models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Metrics output, one JSON object per line.
        #[arg(long, default_value = "metrics.jsonl")]
        metrics: PathBuf,
        /// Checkpoint directory written after training.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task, e.g. `mqar` or `mqar:seq_len=64,n_pairs=4`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Run a property suite: rope, duality, grads, moe, cost or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Train one model per value of an axis: rope_mode, moe_sharing or layout.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarise a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn parse_task(text: &str) -> Result<TaskSpec> {
    let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
    let mut lines = format!("task.kind = {kind}\n");
    let base = TaskSpec::new(kind.parse()?);
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        lines.push_str(&format!("task.{kv}\n"));
    }
    let cfg = TrainConfig {
        task: base,
        ..TrainConfig::default()
    };
    Ok(cfg.apply(&lines)?.task)
}

fn train_and_save<T: Real>(
    cfg: &TrainConfig,
    metrics: &PathBuf,
    ckpt: Option<&PathBuf>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(metrics)?);
    let o = harness::train::<T>(cfg, Some(&mut out))?;
    if let Some(last) = o.records.last() {
        println!(
            "step {} eval_loss {:.4} eval_ppl {:.4} accuracy {:.4} ({} params, {} skipped steps)",
            last.step,
            last.eval_loss,
            last.eval_ppl,
            last.task_accuracy,
            o.model.num_params(),
            o.skipped_steps
        );
    }
    if let Some(dir) = ckpt {
        checkpoint::save(&o.model, dir)?;
        println!("checkpoint written to {}", dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train {
            config,
            metrics,
            ckpt,
        } => {
            let cfg = TrainConfig::load(&config)?;
            match cfg.numeric_mode {
                DType::F32 => train_and_save::<f32>(&cfg, &metrics, ckpt.as_ref())?,
                DType::F64 => train_and_save::<f64>(&cfg, &metrics, ckpt.as_ref())?,
            }
        }
        Cmd::Eval {
            ckpt,
            task,
            batches,
            batch,
        } => {
            let model = checkpoint::load::<f64>(&ckpt)?;
            let spec = parse_task(&task)?;
            let r = harness::evaluate(&model, &spec, batches, batch)?;
            println!(
                "eval_loss {:.4} eval_ppl {:.4} accuracy {:.4}",
                r.loss, r.ppl, r.accuracy
            );
        }
        Cmd::Verify { suite } => {
            let checks = verify::run(&suite)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            return Ok(failed == 0);
        }
        Cmd::Ablate { axis, config } => {
            let cfg = TrainConfig::load(&config)?;
            let rows = harness::ablate(&cfg, axis.parse::<Axis>()?)?;
            print!("{}", harness::render_ablation(&axis, &rows));
        }
        Cmd::Report { metrics } => {
            let recs = harness::read_metrics(&std::fs::read_to_string(metrics)?)?;
            print!("{}", harness::report(&recs)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
