use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use negpr::config::ExperimentConfig;
use negpr::error::{NegprError, Result};
use negpr::graph::DensityMetric;
use negpr::harness::{cmd_gradcheck, cmd_partition, cmd_sweep, cmd_train, GradcheckOptions, SweepParam};

const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "negpr",
    version,
    about = "Noise-tolerant dual-branch graph domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, replacing the config's list.
    #[arg(long = "seed", num_args = 1..)]
    seeds: Vec<u64>,
    /// Small synthetic settings for quick runs.
    #[arg(long)]
    desk: bool,
    /// Output directory, replacing the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.desk {
            cfg = cfg.with_desk_preset();
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train over every seed and write summary.json.
    Train(RunArgs),
    /// Train once per value of one parameter and write sweep_<param>.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// zeta or alpha
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Split a TUDataset directory into density quantiles.
    Partition {
        #[arg(long)]
        data: PathBuf,
        /// edge_density, node_count or flux
        #[arg(long, default_value = "flux")]
        metric: String,
        #[arg(long, default_value_t = 4)]
        parts: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let result = cmd_train(&cfg)?;
            for s in &result.per_seed {
                println!(
                    "seed {:>3}  target {}  pretrain {}  source {:.4}",
                    s.seed,
                    fmt_acc(s.target_acc),
                    fmt_acc(s.pretrain_target_acc),
                    s.source_acc
                );
            }
            println!(
                "mean target {} (std {})  elapsed {:.1}s  -> {}",
                fmt_acc(result.target_acc_mean),
                fmt_acc(result.target_acc_std),
                result.elapsed_seconds,
                cfg.output_dir.join("summary.json").display()
            );
            Ok(true)
        }
        Command::Sweep { run, param, values } => {
            let cfg = run.resolve()?;
            let param: SweepParam = param.parse()?;
            let rows = cmd_sweep(&cfg, param, &values)?;
            println!("{:>8} {:>10} {:>10}", param.name(), "mean", "std");
            for r in &rows {
                println!("{:>8} {:>10.4} {:>10.4}", r.value, r.mean_acc, r.std_acc);
            }
            Ok(true)
        }
        Command::Gradcheck {
            trials,
            seed,
            inject_sign_flip,
        } => {
            let report = cmd_gradcheck(GradcheckOptions {
                trials,
                seed,
                flip_reg_sign: inject_sign_flip,
            })?;
            print!("{}", report.render());
            Ok(report.passed)
        }
        Command::Partition {
            data,
            metric,
            parts,
            out,
        } => {
            let metric: DensityMetric = metric.parse()?;
            for dir in cmd_partition(&data, metric, parts, &out)? {
                println!("{}", dir.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &NegprError) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
