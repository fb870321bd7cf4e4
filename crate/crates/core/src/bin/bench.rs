use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use charmlet::bench::{self, Api, BenchConfig, Benchmark, Mode};
use charmlet::cli::CommonArgs;

/// Point-to-point latency and bandwidth between two PEs.
#[derive(Debug, Parser)]
#[command(name = "charmlet-bench", version)]
struct Cli {
    #[arg(long, value_enum)]
    benchmark: Benchmark,
    #[arg(long, value_enum)]
    api: Api,
    #[arg(long, value_enum, default_value = "device")]
    mode: Mode,
    /// START:END:xFACTOR, START:END:+STEP or a comma list.
    #[arg(long, default_value = "1:4194304:x2")]
    sizes: String,
    /// Messages in flight per bandwidth iteration.
    #[arg(long, default_value_t = 64)]
    window: usize,
    /// Timed iterations per size (default depends on size).
    #[arg(long)]
    iterations: Option<usize>,
    /// Untimed iterations per size (default depends on size).
    #[arg(long)]
    warmup: Option<usize>,
    /// Write results here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("charmlet-bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), Box<dyn std::error::Error>> {
    let config = cli.common.config(2)?;
    let mut cfg = BenchConfig::new(cli.benchmark, cli.api, cli.mode);
    cfg.sizes = bench::parse_sizes(&cli.sizes)?;
    cfg.window = cli.window;
    cfg.iterations = cli.iterations;
    cfg.warmup = cli.warmup;
    let rows = bench::run(&config, &cfg)?;
    match &cli.csv {
        Some(path) => bench::write_csv(path, &rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
