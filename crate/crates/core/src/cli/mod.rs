//! `kvcore` command line.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kvcore::error::ErrorClass;
use kvcore::{Error, Result};

use config::{
    AnalyzeArgs, AnalyzeSettings, CompressArgs, CompressSettings, ConfigFile, GenArgs, GenSettings,
    NdPplArgs, NdPplSettings, PplGridArgs, PplGridSettings,
};

#[derive(Debug, Parser)]
#[command(
    name = "kvcore",
    version,
    about = "KV-cache rank analysis and low-rank compression"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "KVCORE_THREADS")]
    threads: Option<usize>,
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus, a small trained model, and its key/value streams.
    GenSynthetic(GenArgs),
    /// Spectra and normalized effective rank of every stream.
    Analyze(AnalyzeArgs),
    /// Low-rank factors with predicted and measured errors.
    Compress(CompressArgs),
    /// Perplexity over a grid of key and value retain ratios.
    Pplgrid(PplGridArgs),
    /// Normalized degradation from a perplexity grid.
    Ndppl(NdPplArgs),
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(manifest) => {
            print!("{manifest}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Input => 3,
                ErrorClass::Numerical => 4,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::GenSynthetic(a) => {
            commands::gen_synthetic(&GenSettings::resolve(a, file.gen_synthetic)?)
        }
        Command::Analyze(a) => commands::analyze(&AnalyzeSettings::resolve(a, file.analyze)?),
        Command::Compress(a) => commands::compress(&CompressSettings::resolve(a, file.compress)?),
        Command::Pplgrid(a) => commands::pplgrid(&PplGridSettings::resolve(a, file.pplgrid)?),
        Command::Ndppl(a) => commands::ndppl(&NdPplSettings::resolve(a, file.ndppl)?),
    }
}
