use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use stepdraw::evalkit::{
    evaluate_model, Detector, EvalOptions, Localizer, LocalizerConfig, TemplateDetector,
};
use stepdraw::scenegen::{Dataset, GenConfig, Split};
use stepdraw::service::{serve, SessionManager};
use stepdraw::training::{
    fit, train_localizer, FitOptions, TrainConfig, TrainData, ValidationDetector,
};
use stepdraw::{Ablation, Checkpoint, ModelConfig};

#[derive(Parser)]
#[command(name = "stepdraw", version, about = "Instruction-driven iterative canvas generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorKind {
    Localizer,
    Template,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Train (or resume training) on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// no_history | no_increment | split_encoders
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Validation episodes scored after each epoch (0 disables).
        #[arg(long, default_value_t = 200)]
        val_episodes: usize,
        #[arg(long, value_enum, default_value_t = DetectorKind::Localizer)]
        detector: DetectorKind,
        /// Use a localizer saved by `train-localizer` instead of training one.
        #[arg(long)]
        localizer: Option<PathBuf>,
        /// Stop each epoch after this many batches.
        #[arg(long, hide = true)]
        max_batches: Option<usize>,
    },
    /// Evaluate a checkpoint with own-output rollouts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        /// Write ground-truth / generated contact sheets here.
        #[arg(long)]
        sheets: Option<PathBuf>,
        /// Evaluate at most this many episodes.
        #[arg(long)]
        limit: Option<usize>,
        /// Require matched centers closer than this (normalized units).
        #[arg(long)]
        positional_gate: Option<f64>,
        #[arg(long, value_enum, default_value_t = DetectorKind::Localizer)]
        detector: DetectorKind,
        /// Localizer directory overriding the one stored in the checkpoint.
        #[arg(long)]
        localizer: Option<PathBuf>,
    },
    /// Serve interactive sessions over HTTP.
    Serve {
        #[arg(long, env = "STEPDRAW_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "STEPDRAW_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "STEPDRAW_HOST", default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Append-only session log, replayed on startup.
        #[arg(long)]
        persist: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DetectorKind::Localizer)]
        detector: DetectorKind,
        #[arg(long, env = "STEPDRAW_LOCALIZER")]
        localizer: Option<PathBuf>,
    },
    /// Train the grid localizer on clean renders and save it.
    TrainLocalizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = LocalizerConfig::default().max_epochs)]
        epochs: usize,
    },
}

fn detector_for(
    ck: &Checkpoint,
    kind: DetectorKind,
    localizer: Option<&PathBuf>,
) -> Result<(Arc<dyn Detector>, &'static str)> {
    let loc = match localizer {
        Some(dir) => Some(Localizer::load(dir)?),
        None => ck.localizer()?,
    };
    match (kind, loc) {
        (DetectorKind::Localizer, Some(l)) => Ok((Arc::new(l), "localizer")),
        (DetectorKind::Localizer, None) => bail!("checkpoint carries no localizer; use --detector template"),
        (DetectorKind::Template, _) => Ok((
            Arc::new(TemplateDetector { catalog: ck.manifest.model.catalog.clone() }),
            "template",
        )),
    }
}

fn preset(p: Preset) -> ModelConfig {
    match p {
        Preset::Desk => ModelConfig::desk(),
        Preset::Paper => ModelConfig::paper(),
        Preset::Tiny => ModelConfig::tiny(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, episodes, steps, out, size } => {
            let cfg = GenConfig { steps, max_objects: steps.max(5), canvas_size: size, ..GenConfig::default() };
            let ds = Dataset::generate(seed, episodes, &cfg, size)?;
            ds.export(&out)?;
            println!("wrote {} episodes to {}", ds.episodes.len(), out.display());
        }
        Command::Train {
            data,
            out,
            epochs,
            batch,
            seed,
            ablation,
            preset: p,
            val_episodes,
            detector,
            localizer,
            max_batches,
        } => {
            let data = TrainData::load(&data)?;
            let cfg = TrainConfig { epochs, batch_size: batch, seed, ablation, val_episodes, ..TrainConfig::default() };
            let mut opts = FitOptions::desk();
            opts.model = ModelConfig { image_size: data.dataset.image_size() as usize, ..preset(p) };
            opts.detector = match (detector, localizer) {
                (DetectorKind::Template, _) => ValidationDetector::Template,
                (DetectorKind::Localizer, Some(dir)) => ValidationDetector::Pretrained(dir),
                (DetectorKind::Localizer, None) => opts.detector,
            };
            opts.max_batches = max_batches;
            let report = fit(&data, &out, &cfg, &opts)?;
            for e in &report.epochs {
                println!(
                    "epoch {:>3}  L_D {:.4}  L_G {:.4}  kl {:.4}  val P {:.4} R {:.4} F1 {:.4} rsim {:.4}",
                    e.epoch, e.d_total, e.g, e.kl, e.val_precision, e.val_recall, e.val_f1, e.val_rsim
                );
            }
            if let Some(ck) = report.last_checkpoint {
                println!("checkpoint: {}", ck.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            sheets,
            limit,
            positional_gate,
            detector,
            localizer,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.build_model()?;
            let ds = Dataset::load(&data)?;
            let mut eps = ds.split(split);
            if let Some(n) = limit {
                eps.truncate(n);
            }
            let (det, name) = detector_for(&ck, detector, localizer.as_ref())
                .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
            let opts = EvalOptions { positional_gate, sheets, ..EvalOptions::default() };
            let mut r = evaluate_model(&model, &eps, det.as_ref(), name, &opts)?;
            r.split = Some(split.to_string());
            r.config = serde_json::json!({
                "checkpoint": checkpoint,
                "epoch": ck.manifest.epoch,
                "seed": ck.manifest.seed,
                "model": model.config,
            });
            r.save(&report).with_context(|| format!("writing {}", report.display()))?;
            let m = r.metrics;
            println!(
                "{} episodes: P {:.4} R {:.4} F1 {:.4} rsim {:.4}",
                eps.len(),
                m.precision,
                m.recall,
                m.f1,
                m.rsim
            );
        }
        Command::Serve { checkpoint, port, host, persist, detector, localizer } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = Arc::new(ck.build_model()?);
            let (det, name) = detector_for(&ck, detector, localizer.as_ref())?;
            let info = serde_json::json!({
                "path": checkpoint,
                "epoch": ck.manifest.epoch,
                "seed": ck.manifest.seed,
                "detector": name,
            });
            let mgr = Arc::new(SessionManager::new(model, det, info, persist.as_deref())?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(mgr, std::net::SocketAddr::new(host, port)))?;
        }
        Command::TrainLocalizer { data, out, epochs } => {
            let data = TrainData::load(&data)?;
            let cfg = LocalizerConfig { max_epochs: epochs, ..LocalizerConfig::default() };
            let (loc, fit) = train_localizer(&data, cfg)?;
            loc.save(&out)?;
            println!(
                "localizer: {} epochs, val exact match {:.4}, saved to {}",
                fit.epochs,
                fit.val_exact_match,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
