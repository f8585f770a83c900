use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

/// Trochlear groove planning from orthogonal MR scans.
#[derive(Parser)]
#[command(name = "grooveforge", version, about)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a trochlea phantom, its labels and three thick-slice scans.
    Phantom(commands::PhantomArgs),
    /// Fuse three orthogonal scans into one isotropic volume.
    Fuse(commands::FuseArgs),
    /// Train the wavelet diffusion denoiser on a directory of label volumes.
    TrainWdm(commands::TrainArgs),
    /// Regenerate the trochlear region of a label volume.
    Inpaint(commands::InpaintArgs),
    /// Extract one label's surface as PLY or STL.
    Mesh(commands::MeshArgs),
    /// Per-vertex signed distance from mesh B to mesh A.
    Diffmap(commands::DiffmapArgs),
    /// Sulcus angle and groove depth of a label volume.
    Measure(commands::MeasureArgs),
    /// Paired before/after measurements over two directories.
    Compare(commands::CompareArgs),
    /// Execute a configured end-to-end run.
    Run(commands::RunArgs),
    /// Aggregate run manifests into a before/after table.
    Report(commands::ReportArgs),
    /// Wavelet transform diagnostics.
    Dwt {
        /// Forward and inverse transform this GVOL file and print the error.
        #[arg(long, value_name = "FILE")]
        roundtrip: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GROOVEFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("GROOVEFORGE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::TrainWdm(a) => commands::train_wdm(a),
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Mesh(a) => commands::mesh(a),
        Command::Diffmap(a) => commands::diffmap(a),
        Command::Measure(a) => commands::measure(a),
        Command::Compare(a) => commands::compare(a),
        Command::Run(a) => commands::run(a),
        Command::Report(a) => commands::report(a),
        Command::Dwt { roundtrip } => commands::dwt_roundtrip(&roundtrip),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
