use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slidexfer::metrics::Level;
use slidexfer::pipeline::{self, Init, PipelineConfig, Regime, TrainOptions};
use slidexfer::synth::Domain;
use slidexfer::Error;

#[derive(Parser)]
#[command(name = "slidexfer", version, about = "Slide tiling, tile classifier training with weight transfer, and AUC evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run every data-parallel stage on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohorts listed in the config.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides paths.data_root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build tile stores, masks, tile labels, slide split and sample manifests.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Overrides sampling.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides paths.output_root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the classifier from scratch or from a checkpoint's conv weights.
    Train {
        #[command(flatten)]
        common: Common,
        /// `scratch` or the path of a checkpoint to transfer conv weights from.
        #[arg(long, default_value = "scratch")]
        init: Init,
        /// Domain to train on (defaults to the target domain).
        #[arg(long)]
        domain: Option<Domain>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoint.bin and history.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tile- and pixel-level AUC on the held-out slides, plus heatmaps.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Regime label written into the report.
        #[arg(long, default_value = "model")]
        regime: String,
        /// Score pixels of background tiles as 0 instead of excluding them.
        #[arg(long)]
        include_background: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability-map PNGs, one pixel per tile.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target-domain slide ids (defaults to the held-out slides).
        #[arg(long = "slide")]
        slides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scratch, generic-pretrained and cross-domain-pretrained regimes across seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Replaces experiment.seeds; repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Maximum concurrently running cells.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> slidexfer::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if common.sequential {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> slidexfer::Result<()> {
    match cli.command {
        Command::Synth { common, seed, out } => {
            let mut cfg = load(&common)?;
            if let Some(out) = out {
                cfg.paths.data_root = out;
            }
            if let (Some(seed), Some(s)) = (seed, cfg.synth.as_mut()) {
                s.seed = seed;
            }
            for m in pipeline::cmd_synth(&cfg)? {
                println!("domain {}: {} slides", m.domain.as_str(), m.slides.len());
            }
        }
        Command::Prepare { common, seed, out } => {
            let mut cfg = load(&common)?;
            if let Some(out) = out {
                cfg.paths.output_root = out;
            }
            if let Some(seed) = seed {
                cfg.sampling.seed = seed;
            }
            for d in pipeline::cmd_prepare(&cfg)? {
                let counts: Vec<String> = d.label_counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "domain {}: {} slides, tiles [{}], {} sampled, test slides [{}]",
                    d.domain.as_str(),
                    d.slides,
                    counts.join(" "),
                    d.sampled,
                    d.test_slides.join(" ")
                );
            }
        }
        Command::Train { common, init, domain, seed, out } => {
            let cfg = load(&common)?;
            let m = pipeline::cmd_train(&cfg, &TrainOptions { domain, init, seed, out })?;
            println!(
                "{} (sha256 {}) provenance {} best epoch {} val loss {:.5}",
                m.path.display(),
                m.digest,
                m.checkpoint.provenance.as_str(),
                m.checkpoint.epoch,
                m.checkpoint.val_loss
            );
        }
        Command::Evaluate { common, checkpoint, regime, include_background, out } => {
            let mut cfg = load(&common)?;
            cfg.evaluation.include_background |= include_background;
            let report = pipeline::cmd_evaluate(&cfg, &checkpoint, &regime, out.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Heatmap { common, checkpoint, slides, out } => {
            let cfg = load(&common)?;
            let slides = (!slides.is_empty()).then_some(slides.as_slice());
            for p in pipeline::cmd_heatmap(&cfg, &checkpoint, slides, out.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Experiment { common, seeds, jobs, out } => {
            let mut cfg = load(&common)?;
            if !seeds.is_empty() {
                cfg.experiment.seeds = seeds;
            }
            let outcome = pipeline::cmd_experiment(&cfg, jobs, out.as_deref())?;
            for level in [Level::Tile, Level::Pixel] {
                for &r in &cfg.experiment.regimes {
                    if r != Regime::Scratch {
                        println!(
                            "{} median delta {} vs scratch: {}",
                            level.as_str(),
                            r.as_str(),
                            fmt_auc(outcome.median_delta(r, level))
                        );
                    }
                }
            }
            let failed: Vec<_> = outcome.cells.iter().filter(|c| c.error.is_some()).collect();
            if !failed.is_empty() {
                for c in &failed {
                    eprintln!("seed {} {}: {}", c.seed, c.regime.as_str(), c.error.as_deref().unwrap_or(""));
                }
                return Err(Error::InvalidArgument(format!("{} experiment cell(s) failed", failed.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
