use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use l1_dilation::runner::{
    emit_report, gen_instance, render_report, run_mc, run_verify, Format, InstanceFile, Kind,
    Report, RunConfig, RunnerError,
};

#[derive(Parser)]
#[command(
    version,
    about = "Build and check L1 dilations of positive contractions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random instance.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = KindArg::Akcoglu)]
        kind: KindArg,
        /// Let columns lose mass instead of preserving integrals.
        #[arg(long)]
        contraction: bool,
    },
    /// Run every check for the instance's kind.
    Verify(RunArgs),
    /// Compare Monte Carlo estimates with the exact iterates.
    Mc(RunArgs),
    /// Run the reversed-martingale checks.
    Rota(RunArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of cells for generated instances.
    #[arg(long, default_value_t = 3)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    horizon: usize,
    /// Monte Carlo samples per cell; 0 skips sampling.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Instance file; a seeded one of `--size` cells is generated when absent.
    instance: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Akcoglu,
    Rota,
}

impl From<KindArg> for Kind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Akcoglu => Kind::Akcoglu,
            KindArg::Rota => Kind::Rota,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        }
    }
}

enum Mode {
    Verify,
    Mc,
    Rota,
}

fn load_or_gen(args: &RunArgs, kind: Kind) -> Result<InstanceFile, RunnerError> {
    match &args.instance {
        Some(path) => InstanceFile::load(path),
        None => {
            if args.common.size == 0 {
                return Err(RunnerError::Malformed("--size must be at least 1".into()));
            }
            Ok(gen_instance(kind, args.common.size, args.common.seed, true))
        }
    }
}

fn run(args: &RunArgs, mode: Mode) -> Result<Report, RunnerError> {
    let cfg = RunConfig {
        horizon: args.common.horizon,
        samples: args.common.samples,
        seed: args.common.seed,
    };
    match mode {
        Mode::Verify => run_verify(&load_or_gen(args, Kind::Akcoglu)?, cfg),
        Mode::Mc => run_mc(&load_or_gen(args, Kind::Akcoglu)?, cfg),
        Mode::Rota => {
            let mut inst = load_or_gen(args, Kind::Rota)?;
            inst.kind = Some(Kind::Rota);
            run_verify(&inst, cfg)
        }
    }
}

fn write(out: Option<&PathBuf>, report: &Report, format: Format) -> Result<(), RunnerError> {
    match out {
        Some(path) => emit_report(report, format, path),
        None => {
            print!("{}", render_report(report, format)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen {
            common,
            kind,
            contraction,
        } => {
            if common.size == 0 {
                Err(RunnerError::Malformed("--size must be at least 1".into()))
            } else {
                let inst = gen_instance((*kind).into(), common.size, common.seed, !*contraction);
                match &common.out {
                    Some(path) => inst.save(path).map(|_| true),
                    None => serde_json::to_string_pretty(&inst)
                        .map(|s| println!("{s}"))
                        .map(|_| true)
                        .map_err(RunnerError::from),
                }
            }
        }
        Command::Verify(args) | Command::Mc(args) | Command::Rota(args) => {
            let mode = match &cli.command {
                Command::Verify(_) => Mode::Verify,
                Command::Mc(_) => Mode::Mc,
                _ => Mode::Rota,
            };
            run(args, mode).and_then(|report| {
                write(args.common.out.as_ref(), &report, args.format.into())?;
                Ok(report.verdict)
            })
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
