use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use charmlet::cli::CommonArgs;
use charmlet::jacobi::{self, JacobiConfig, JacobiMode, JacobiRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scaling {
    /// `--dims` is the global domain for every PE count.
    Strong,
    /// `--dims` is the per-PE block; the domain grows with the PE count.
    Weak,
}

/// 3D Jacobi proxy with one block per PE.
#[derive(Debug, Parser)]
#[command(name = "charmlet-jacobi3d", version)]
struct Cli {
    /// Global domain NX,NY,NZ (per-PE block under --scaling weak).
    #[arg(long, default_value = "64,64,64", value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, value_enum, default_value = "channel-device")]
    mode: JacobiMode,
    /// Compare the final field with the sequential solution.
    #[arg(long)]
    verify: bool,
    /// Run once per PE count in this list instead of once at --pes.
    #[arg(long, value_delimiter = ',')]
    scale_pes: Vec<usize>,
    #[arg(long, value_enum, default_value = "strong")]
    scaling: Scaling,
    /// Write results here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad dimension '{t}'")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected NX,NY,NZ, got '{s}'"))
}

/// Largest tolerated max-norm distance from the sequential solution.
const VERIFY_TOLERANCE: f64 = 1e-12;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("charmlet-jacobi3d: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<bool, Box<dyn std::error::Error>> {
    let base = cli.common.config(1)?;
    let counts = if cli.scale_pes.is_empty() { vec![base.workers] } else { cli.scale_pes.clone() };
    let mut rows = Vec::new();
    let mut ok = true;
    for pes in counts {
        let mut config = base.clone();
        config.workers = pes;
        let dims = match cli.scaling {
            Scaling::Strong => cli.dims,
            Scaling::Weak => jacobi::weak_dims(cli.dims, pes)?,
        };
        let cfg = JacobiConfig {
            dims,
            iters: cli.iters,
            mode: cli.mode,
            gather: cli.verify,
        };
        let r = jacobi::run(&config, &cfg)?;
        if let Some(field) = &r.field {
            let err = jacobi::max_norm_diff(field, &jacobi::sequential(dims, cli.iters));
            let pass = err <= VERIFY_TOLERANCE;
            ok &= pass;
            eprintln!(
                "verify {} pes={pes} grid={:?}: max-norm error {err:e} {}",
                cli.mode.as_str(),
                r.grid,
                if pass { "ok" } else { "FAILED" }
            );
        }
        rows.push(JacobiRow::new(&cfg, pes, &r, config.time_mode.as_str()));
    }
    match &cli.csv {
        Some(path) => jacobi::write_csv(path, &rows)?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(ok)
}
