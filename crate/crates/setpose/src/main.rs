use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use setpose::bench::{emit_report, run_benchmark, AttnVariant, BenchCase, ReportFormat};
use setpose::error::{Error, Result};
use setpose::harness::{
    evaluate_checkpoint, gen_data, hardware_manifest, load_checkpoint, load_gen_config,
    load_run_config, render_table, run_ablation, train_with, AblationSuite,
};

#[derive(Parser)]
#[command(name = "setpose", version, about = "Multi-person pose estimation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into one self-contained file
    GenData {
        /// JSON scene config (image size, keypoints, instance count, ...)
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing per-epoch JSONL metrics and a final checkpoint
    Train {
        /// JSON run config
        #[arg(long)]
        config: PathBuf,
        /// Override the config's out_dir
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset, printing JSON metrics
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every variant of one ablation suite on the same data and seed
    Ablate {
        /// One of: self_attention, group_components, query_design,
        /// n_instances, across_subsets, sharing
        #[arg(long)]
        suite: String,
        /// Base run config shared by all variants
        #[arg(long)]
        config: PathBuf,
    },
    /// Time one decoder self-attention sublayer per variant
    Bench {
        #[arg(long, default_value = "bench_report.csv")]
        out: PathBuf,
        /// csv or json
        #[arg(long, default_value = "csv")]
        format: String,
        /// Use N=100, K=17, D=256, 8 heads instead of the desk-scale shapes
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = load_gen_config(&config)?;
            gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", cfg.count, out.display());
        }
        Command::Train { config, out } => {
            let mut cfg = load_run_config(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            let result = train_with(&cfg, |log| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  AP {:.4}  AP50 {:.4}  dup {:.4}  {:.1}s",
                    log.epoch, log.train_loss, log.ap, log.ap50, log.duplicate_rate, log.wall_seconds
                );
            })?;
            let last = result.logs.last().expect("training runs at least one epoch");
            println!(
                "final AP {:.4} (AP50 {:.4}, AP75 {:.4}) after {} epochs",
                last.ap, last.ap50, last.ap75, last.epoch
            );
            println!("log: {}", result.log_path.display());
            println!("checkpoint: {}", result.checkpoint_path.display());
        }
        Command::Eval { ckpt, data } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let metrics = evaluate_checkpoint(&checkpoint, &data)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate { suite, config } => {
            let suite: AblationSuite = suite.parse()?;
            let cfg = load_run_config(&config)?;
            let table = run_ablation(suite, &cfg)?;
            print!("{}", render_table(&table));
        }
        Command::Bench { out, format, full, repeats, warmup } => {
            let format: ReportFormat = format.parse()?;
            let (n, k, d, heads) = if full { (100, 17, 256, 8) } else { (20, 5, 16, 2) };
            let cases: Vec<BenchCase> = AttnVariant::ALL
                .into_iter()
                .map(|variant| BenchCase { variant, n, k, d, heads, repeats, warmup })
                .collect();
            let report = run_benchmark(&cases)?;
            for row in &report.rows {
                eprintln!(
                    "{:<8} N={} K={} D={}  median {:>12} ns  min {:>12} ns",
                    row.variant.as_str(),
                    row.n,
                    row.k,
                    row.d,
                    row.median_ns,
                    row.min_ns
                );
            }
            let out_str = out.to_string_lossy().into_owned();
            emit_report(&report, &out_str, format)?;
            let hw_path = out.with_extension("hardware.json");
            std::fs::write(&hw_path, serde_json::to_vec_pretty(&hardware_manifest())?)
                .map_err(|e| Error::Data(format!("writing {}: {e}", hw_path.display())))?;
            println!("report: {}", out.display());
            println!("hardware: {}", hw_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
