use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdr2_cli::commands::{bench, decode, equivalence, gradients, recall, reductions};
use gdr2_cli::report::write_series;
use gdr2_cli::{Report, Result, RunConfig};
use gdr2_core::Precision;

#[derive(Parser)]
#[command(name = "gdr2", version, about = "Verification, benchmarks and toy training for the gated delta rule-2 kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64; overrides the configuration.
    #[arg(long)]
    precision: Option<Precision>,
    /// Benchmark series (bench) or report records (other commands) as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Chunked forward vs the tokenwise recurrence, varlen packing, decoding.
    CheckEquivalence(Common),
    /// Analytic gradients vs finite differences, chunk invariance, controls.
    CheckGradients(Common),
    /// Tied-gate reductions at step, sequence, chunk and layer level.
    CheckReductions(Common),
    /// Tokenwise vs chunked throughput.
    Bench(Common),
    /// Trains the toy associative-recall model.
    TrainRecall(Common),
    /// Greedy decoding from a checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Checkpoint tensor file.
        #[arg(long)]
        params: PathBuf,
        /// Whitespace-separated token ids.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = 0)]
        steps: usize,
        /// Where to dump the final recurrent state.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.precision.is_some() {
        cfg.precision = common.precision;
    }
    Ok(cfg)
}

fn finish(report: &Report, common: &Common) -> Result<()> {
    print!("{report}");
    if let Some(path) = &common.csv {
        report.write_csv(path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let report = match &cli.command {
        Command::CheckEquivalence(c) => {
            let r = equivalence::run(&load(c)?)?;
            finish(&r, c)?;
            r
        }
        Command::CheckGradients(c) => {
            let r = gradients::run(&load(c)?)?;
            finish(&r, c)?;
            r
        }
        Command::CheckReductions(c) => {
            let r = reductions::run(&load(c)?)?;
            finish(&r, c)?;
            r
        }
        Command::TrainRecall(c) => {
            let r = recall::run(&load(c)?)?;
            finish(&r, c)?;
            r
        }
        Command::Bench(c) => {
            let (r, rows) = bench::run(&load(c)?)?;
            print!("{r}");
            if let Some(path) = &c.csv {
                write_series(path, &rows)?;
            }
            r
        }
        Command::Decode {
            common,
            params,
            prompt,
            steps,
            state_out,
        } => {
            let out = decode::run(&load(common)?, params, prompt, *steps)?;
            let join = |t: &[usize]| t.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            println!("# tokens {}", join(&out.tokens));
            println!("# generated {}", join(&out.generated));
            finish(&out.report, common)?;
            if let Some(path) = state_out {
                out.state.write(path)?;
            }
            out.report
        }
    };
    Ok(report.all_pass())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("gdr2: {e}");
            ExitCode::from(2)
        }
    }
}
