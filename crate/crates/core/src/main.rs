use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dlccp::losses::Ablation;
use dlccp::pipeline::{self, TrainOverrides, GRADCHECK_TOLERANCE};
use dlccp::{Error, Result};

#[derive(Parser)]
#[command(name = "dlccp", version, about = "Few-shot charge prediction with content/style disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-style corpus.
    Gen {
        /// Corpus spec (TOML); the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and train one model per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one or more checkpoints; prints mean/std over them.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write content and style vectors as TSV.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ce: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth factor file; runs the disentanglement probe.
        #[arg(long)]
        factors: Option<PathBuf>,
    },
    /// Check the full objective's gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Re-hash the inputs recorded in a manifest.
    Verify { manifest: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let files = pipeline::cmd_gen(spec.as_deref(), &out)?;
            println!("wrote corpus to {} (manifest {})", out.display(), files.manifest.display());
        }
        Command::Train {
            config,
            shots,
            ablation,
            seeds,
            out,
        } => {
            let overrides = TrainOverrides {
                shots,
                ablation,
                seeds,
                out_dir: out,
            };
            let summary = pipeline::cmd_train(&config, &overrides)?;
            for r in &summary.runs {
                println!(
                    "seed {}: best epoch {}, test acc {:.4} f1 {:.4} -> {}",
                    r.seed,
                    r.best_epoch,
                    r.test.acc,
                    r.test.f1,
                    r.dir.display()
                );
            }
            println!("mean test f1 {:.4} (std {:.4})", summary.report.f1.mean, summary.report.f1.std);
        }
        Command::Eval {
            checkpoints,
            data,
            vocab,
            out,
        } => {
            let report = pipeline::cmd_eval(&checkpoints, &data, vocab.as_deref())?;
            let json = report.to_json();
            if let Some(path) = out {
                std::fs::write(&path, &json).map_err(|e| Error::io(path, e))?;
            }
            println!("{json}");
        }
        Command::Dump {
            checkpoint,
            data,
            ce,
            vocab,
            out,
            factors,
        } => {
            let (rows, probe) = pipeline::cmd_dump(&checkpoint, &data, &ce, vocab.as_deref(), &out, factors.as_deref())?;
            println!("wrote {rows} rows to {}", out.display());
            if let Some(p) = probe {
                println!("{}", serde_json::to_string_pretty(&p).expect("serializable"));
            }
        }
        Command::Gradcheck { seed } => {
            let report = pipeline::cmd_gradcheck(seed)?;
            println!(
                "checked {} entries, max relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
                report.checked, report.max_rel_error, report.analytic, report.numeric
            );
            if report.max_rel_error >= GRADCHECK_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::Verify { manifest } => {
            let m = pipeline::cmd_verify(&manifest)?;
            println!("{} inputs match (input hash {})", m.inputs.len(), m.input_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
