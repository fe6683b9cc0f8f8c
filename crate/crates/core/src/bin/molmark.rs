use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use molmark::codec::Watermark;
use molmark::harness::{self, MarkSource, RunConfig};
use molmark::transform::SweepSpec;
use molmark::Error;

#[derive(Parser)]
#[command(name = "molmark", version, about = "Embed, extract and audit watermarks in 3D molecules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Watermark every molecule of a corpus and write a manifest.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bits for every molecule, e.g. 1010, 0b1010 or 0xA:4.
        #[arg(long, conflicts_with = "seed")]
        watermark: Option<String>,
        /// Draw independent random bits per molecule from this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Expected watermark length; must match the checkpoint.
        #[arg(long)]
        capacity: Option<usize>,
    },
    /// Read the bits back out of a corpus.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score extraction against this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rotation, translation and reflection sweeps over a watermarked corpus.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the sweeps from this run config instead of the full suite.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare basic properties of a corpus and its watermarked copy.
    Evaluate {
        /// The original corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        watermarked: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reference set for novelty.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n_types: usize,
    },
    /// Train the original model and the three embedder ablations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, corpus: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> molmark::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(c) = corpus {
        cfg.corpus = c;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json<S: serde::Serialize>(value: &S) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            corpus,
            out,
            seed,
        } => {
            let cfg = load_config(&config, corpus, out, seed)?;
            let s = harness::cmd_train(&cfg, checkpoint.as_deref())?;
            print_json(&s)?;
        }
        Command::Embed {
            checkpoint,
            corpus,
            out,
            watermark,
            seed,
            capacity,
        } => {
            let source = match (watermark, seed) {
                (Some(w), _) => MarkSource::Fixed(Watermark::parse(&w)?),
                (None, Some(s)) => MarkSource::Seeded(s),
                (None, None) => return Err(Error::Config("embed needs --watermark or --seed".into()).into()),
            };
            let e = harness::cmd_embed(&checkpoint, &corpus, &source, capacity, &out)?;
            println!("embedded {} molecules into {}", e.molecules.len(), out.display());
        }
        Command::Extract {
            checkpoint,
            corpus,
            out,
            manifest,
        } => {
            let r = harness::cmd_extract(&checkpoint, &corpus, manifest.as_deref(), &out)?;
            for row in &r.extracted {
                println!("{},{}", row.molecule_id, row.bits);
            }
            if let Some(a) = r.bit_accuracy {
                println!("bit accuracy {a:.4}");
            }
        }
        Command::Attack {
            checkpoint,
            corpus,
            manifest,
            out,
            config,
        } => {
            let sweeps = match config {
                Some(p) => RunConfig::load(&p)?.sweeps,
                None => SweepSpec::full_suite(),
            };
            let r = harness::cmd_attack(&checkpoint, &corpus, &manifest, &sweeps, &out)?;
            println!(
                "{} molecules x {} transforms: baseline {:.4}, constant {:.3}",
                r.molecules.len(),
                r.transforms.len(),
                r.baseline_mean,
                r.constant_fraction
            );
        }
        Command::Evaluate {
            corpus,
            watermarked,
            out,
            reference,
            n_types,
        } => {
            let vocab = harness::vocabulary_for(n_types)?;
            let r = harness::cmd_evaluate(&corpus, &watermarked, reference.as_deref(), &vocab, &out)?;
            print_json(&r.deltas)?;
            println!("molecular weight (original): {}", r.weight_original);
            println!("molecular weight (watermarked): {}", r.weight_watermarked);
        }
        Command::Ablate { config, out, seed } => {
            let cfg = load_config(&config, None, out, seed)?;
            let rows = harness::cmd_ablate(&cfg)?;
            print_json(&rows)?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) => err.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).context("molmark failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
