mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use sptok_core::gradcheck::suites::{Module, DEFAULT_EPS};
use sptok_oracle::Suite;

#[derive(Debug, Parser)]
#[command(name = "sptok", version, about = "Superpixel-token RGB-D saliency toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predict a saliency map for an RGB (P6) and depth (P5) pair.
    Forward {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every supervised scale as sm1.pgm .. sm4.pgm.
        #[arg(long)]
        dump_scales: Option<PathBuf>,
    },
    /// Cluster an image into superpixels and paint each with its mean color.
    Superpixels {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        cell: usize,
        #[arg(long, default_value_t = 2)]
        radius: usize,
        #[arg(long, default_value_t = 2)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write the soft association matrix here.
        #[arg(long)]
        assoc: Option<PathBuf>,
        /// Resize the input to this square side first.
        #[arg(long)]
        size: Option<usize>,
        /// Seed of the random embedding weights.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the per-stage flop breakdown of a configuration.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        module: ModuleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Run seeded module-versus-oracle comparisons.
    Oracle {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModuleArg {
    Superpixel,
    Sagem,
    Salrm,
    Loss,
    Network,
}

impl From<ModuleArg> for Module {
    fn from(m: ModuleArg) -> Self {
        match m {
            ModuleArg::Superpixel => Module::Superpixel,
            ModuleArg::Sagem => Module::Sagem,
            ModuleArg::Salrm => Module::Salrm,
            ModuleArg::Loss => Module::Loss,
            ModuleArg::Network => Module::Network,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Mask,
    Topk,
    Scatter,
    Sagem,
    Salrm,
    Forward,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Mask => Suite::Mask,
            SuiteArg::Topk => Suite::Topk,
            SuiteArg::Scatter => Suite::Scatter,
            SuiteArg::Sagem => Suite::Sagem,
            SuiteArg::Salrm => Suite::Salrm,
            SuiteArg::Forward => Suite::Forward,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Forward {
            rgb,
            depth,
            config,
            out,
            dump_scales,
        } => commands::forward(&rgb, &depth, &config, &out, dump_scales.as_deref()),
        Command::Superpixels {
            input,
            cell,
            radius,
            iters,
            out,
            assoc,
            size,
            seed,
        } => commands::superpixels(&commands::SuperpixelArgs {
            input,
            cell,
            radius,
            iters,
            out,
            assoc,
            size,
            seed,
        }),
        Command::Flops { config } => commands::flops(&config),
        Command::Gradcheck { module, seed, eps } => commands::gradcheck(module.into(), seed, eps),
        Command::Oracle { suite, trials, seed } => commands::oracle(suite.into(), trials, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sptok: {e}");
            ExitCode::from(e.code())
        }
    }
}
