use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlqg_cli::commands::{self, ExecuteArgs};
use tlqg_cli::validate::ValidateOptions;

/// Belief-space planning with trajectory-optimized LQG.
#[derive(Debug, Parser)]
#[command(name = "tlqg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a nominal trajectory and write the plan file.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Run the closed loop and write the trace file.
    Execute {
        #[arg(long)]
        scenario: PathBuf,
        /// Plan file to track first; planned internally when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Trace file, or output directory with --seeds.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed; first seed of a batch.
        #[arg(long)]
        seed: Option<u64>,
        /// Run this many consecutive seeds in parallel.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, conflicts_with = "seeds")]
        svg: Option<PathBuf>,
    },
    /// Check the closed-form error propagation against simulation.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        systems: usize,
        #[arg(long, default_value_t = 100)]
        realizations: usize,
        /// Monte-Carlo samples for the statistical checks.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Inflate polygons and fit minimum-volume ellipses.
    Mvee {
        /// One `x y` vertex per line, blank line between polygons.
        #[arg(long)]
        vertices: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        inflation: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TLQG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Plan { scenario, out, svg } => commands::plan(scenario, out, svg.as_deref()),
        Command::Execute {
            scenario,
            plan,
            out,
            seed,
            seeds,
            svg,
        } => commands::execute(&ExecuteArgs {
            scenario,
            plan: plan.as_deref(),
            out,
            seed: *seed,
            seeds: *seeds,
            svg: svg.as_deref(),
        }),
        Command::Validate {
            seed,
            systems,
            realizations,
            samples,
            inject_fault,
        } => commands::validate(&ValidateOptions {
            seed: *seed,
            systems: *systems,
            realizations: *realizations,
            samples: *samples,
            inject_fault: *inject_fault,
        }),
        Command::Mvee {
            vertices,
            inflation,
            out,
            svg,
        } => commands::mvee_cmd(vertices, *inflation, out, svg.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
