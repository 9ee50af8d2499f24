use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssae_cli::commands;
use ssae_cli::RunConfig;
use ssae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ssae", version, about = "Degradation-aware self-supervised pre-training and probing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the pretext corpus and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder on a corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Linear/MLP probes per block, pretrained vs random init.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blocks as a range `1..5` or a list `1,3,5`.
        #[arg(long, value_parser = parse_blocks)]
        blocks: Option<Blocks>,
    },
    /// Probe accuracy against the fraction of labelled training data.
    Lowdata {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Finite-difference check of the reverse pass.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render Markdown and CSV from probe/lowdata output directories.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parsed `--blocks` value; a newtype so clap takes it as one argument.
#[derive(Debug, Clone)]
struct Blocks(Vec<usize>);

fn parse_blocks(s: &str) -> std::result::Result<Blocks, String> {
    let bad = || format!("'{s}' is not a block range like 1..5 or a list like 1,3");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok(Blocks((a..=b).collect()));
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>().map(Blocks)
}

fn config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SSAE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("SSAE_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Synth { config: c, out } => {
            let n = commands::synth(&config(&c)?, &out)?;
            println!("wrote {n} patches to {}", out.display());
        }
        Cmd::Pretrain { config: c, corpus, out, quiet } => {
            commands::pretrain(&config(&c)?, &corpus, &out, !quiet)?;
            println!("wrote {}", out.display());
        }
        Cmd::Probe { config: c, checkpoint, out, blocks } => {
            let r = commands::probe(&config(&c)?, &checkpoint, &out, blocks.map(|b| b.0))?;
            for (a, b) in r.pretrained.iter().zip(&r.random_init) {
                println!(
                    "conv{}: pretrained {:.3}  random-init {:.3}",
                    a.block_index, a.test_accuracy, b.test_accuracy
                );
            }
        }
        Cmd::Lowdata { config: c, checkpoint, out, fractions } => {
            let r = commands::lowdata(&config(&c)?, &checkpoint, &out, fractions)?;
            for (a, b) in r.pretrained.iter().zip(&r.random_init) {
                println!(
                    "fraction {}: pretrained {:.3}  random-init {:.3}",
                    a.label_fraction, a.test_accuracy, b.test_accuracy
                );
            }
        }
        Cmd::Gradcheck { config: c, out } => {
            let r = commands::gradcheck(&config(&c)?, out.as_deref())?;
            println!(
                "{} parameters checked, {} resampled, max relative error {:.3e} (tolerance {:e})",
                r.checks.len(),
                r.resampled,
                r.max_rel_error,
                r.tolerance
            );
            if !r.passed {
                eprintln!("gradient check FAILED");
                return Ok(5);
            }
        }
        Cmd::Report { inputs, out } => {
            commands::report(&inputs, &out)?;
            println!("wrote report to {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
