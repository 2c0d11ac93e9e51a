use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_sequence, Optimizers, SequenceBatch, TrainConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta, MANIFEST_FILE};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_model, Detector, EvalOptions, Localizer, LocalizerConfig, LocalizerFit, TemplateDetector,
};
use crate::model::{image_to_tensor, Model, ModelConfig};
use crate::scenegen::{
    episode_seed, manifest_hash, render_scene, Dataset, EpisodeRecord, ObjectInstance, Scene,
    Split,
};

pub const METRICS_FILE: &str = "metrics.csv";

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "d_real",
    "d_fake",
    "d_inconsistent",
    "d_total",
    "g",
    "kl",
    "val_precision",
    "val_recall",
    "val_f1",
    "val_rsim",
    "seconds",
];

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dir: PathBuf,
    pub dataset: Dataset,
    pub manifest_hash: String,
}

impl TrainData {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            dataset: Dataset::load(dir)?,
            manifest_hash: manifest_hash(dir)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_inconsistent: f64,
    pub d_total: f64,
    pub g: f64,
    pub kl: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_rsim: f64,
    pub seconds: f64,
}

/// Which detector scores validation rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ValidationDetector {
    /// Train the grid localizer on the training split before the first epoch.
    Localizer(LocalizerConfig),
    /// Load a localizer saved by [`Localizer::save`].
    Pretrained(PathBuf),
    /// Exact template matching (only meaningful for tiny runs and tests).
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub model: ModelConfig,
    pub detector: ValidationDetector,
    /// Stop each epoch after this many batches (tests and timing only).
    pub max_batches: Option<usize>,
}

impl FitOptions {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            detector: ValidationDetector::Localizer(LocalizerConfig::default()),
            max_batches: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochMetrics>,
    pub resumed_from: Option<usize>,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}"))
}

/// Highest-numbered complete checkpoint in `out`.
pub fn latest_checkpoint(out: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().join(MANIFEST_FILE).exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best)
}

/// Rendered step images of the episodes, index 0 being the empty canvas.
fn render_episodes(recs: &[&EpisodeRecord], size: u32) -> Vec<Vec<RgbImage>> {
    let empty = render_scene(&Scene::empty(size), size);
    recs.iter()
        .map(|r| {
            std::iter::once(empty.clone())
                .chain(r.episode.steps.iter().map(|s| render_scene(&s.scene, size)))
                .collect()
        })
        .collect()
}

/// Train the grid localizer on clean renders of the training split,
/// validating on the val split.
pub fn train_localizer(data: &TrainData, cfg: LocalizerConfig) -> Result<(Localizer, LocalizerFit)> {
    let size = data.dataset.image_size();
    let mut loc = Localizer::new(cfg, data.dataset.manifest.config.catalog.clone(), size as usize)?;
    let train = data.dataset.split(Split::Train);
    let val = data.dataset.split(Split::Val);
    let fit = loc.train(&labelled_images(&train, size), &labelled_images(&val, size))?;
    log::info!(
        "localizer trained for {} epochs, val exact match {:.4}",
        fit.epochs,
        fit.val_exact_match
    );
    Ok((loc, fit))
}

fn labelled_images(recs: &[&EpisodeRecord], size: u32) -> Vec<(RgbImage, Vec<ObjectInstance>)> {
    let mut out = vec![(render_scene(&Scene::empty(size), size), Vec::new())];
    for r in recs {
        for s in &r.episode.steps {
            out.push((render_scene(&s.scene, size), s.scene.objects.clone()));
        }
    }
    out
}

fn make_batch(
    model: &Model,
    recs: &[&EpisodeRecord],
    images: &[&Vec<RgbImage>],
) -> Result<SequenceBatch> {
    let t = recs[0].episode.len();
    if recs.iter().any(|r| r.episode.len() != t) {
        return Err(Error::Contract("episodes in a batch must share their length".into()));
    }
    let dtype = model.params.dtype();
    let images = (0..=t)
        .map(|k| {
            let ts = images
                .iter()
                .map(|imgs| image_to_tensor(&imgs[k], dtype))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&ts, 0)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = (0..t)
        .map(|k| {
            let texts: Vec<&str> = recs.iter().map(|r| r.episode.steps[k].instruction.as_str()).collect();
            model.tokenize_batch(&texts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBatch { images, tokens })
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let fresh = fs::metadata(path).map(|md| md.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| Error::Format { path: path.to_path_buf(), reason: e.to_string() };
    if fresh {
        w.write_record(METRICS_HEADER).map_err(io)?;
    }
    w.serialize(m).map_err(io)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() }))
        .collect()
}

/// Epoch loop with per-epoch validation, checkpointing and an append-only
/// metrics log. Resumes from the latest checkpoint in `out` if present.
pub fn fit(data: &TrainData, out: &Path, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut mcfg = opts.model.clone();
    mcfg.ablation = cfg.ablation;
    let size = data.dataset.image_size();
    if mcfg.image_size != size as usize {
        return Err(Error::Config(format!(
            "model expects {} px images, dataset has {size} px",
            mcfg.image_size
        )));
    }
    let train = data.dataset.split(Split::Train);
    let val = data.dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let resume = latest_checkpoint(out)?;
    let (model, mut opt, localizer, start) = match &resume {
        Some((epoch, dir)) => {
            log::info!("resuming from {}", dir.display());
            let ck = Checkpoint::load(dir)?;
            if ck.manifest.dataset_hash.as_deref() != Some(data.manifest_hash.as_str()) {
                log::warn!("checkpoint was trained on a different dataset manifest");
            }
            let model = ck.build_model_with(mcfg.clone())?;
            let mut opt = Optimizers::new(&model, cfg)?;
            ck.restore_optimizers(&model, &mut opt)?;
            (model, opt, ck.localizer()?, *epoch)
        }
        None => {
            let vocab = Vocabulary::from_grammar(&mcfg.catalog);
            let model = Model::new(mcfg.clone(), vocab, cfg.seed, DType::F32)?;
            let opt = Optimizers::new(&model, cfg)?;
            let localizer = match &opts.detector {
                ValidationDetector::Localizer(lc) => Some(train_localizer(data, lc.clone())?.0),
                ValidationDetector::Pretrained(dir) => {
                    let loc = Localizer::load(dir)?;
                    if loc.catalog != mcfg.catalog || loc.image_size != size as usize {
                        return Err(Error::Config(format!(
                            "localizer in {} does not match the dataset catalog or resolution",
                            dir.display()
                        )));
                    }
                    Some(loc)
                }
                ValidationDetector::Template => None,
            };
            (model, opt, localizer, 0)
        }
    };
    let template = TemplateDetector { catalog: mcfg.catalog.clone() };
    let (detector, detector_name): (&dyn Detector, &str) = match &localizer {
        Some(l) => (l, "localizer"),
        None => (&template, "template"),
    };

    let train_images = render_episodes(&train, size);
    let val_eps: Vec<&EpisodeRecord> = val.iter().take(cfg.val_episodes).copied().collect();
    let metrics_path = out.join(METRICS_FILE);
    let mut report = FitReport {
        epochs: Vec::new(),
        resumed_from: resume.as_ref().map(|r| r.0),
        last_checkpoint: resume.map(|r| r.1),
    };
    for epoch in start + 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if opts.max_batches.is_some_and(|m| batches >= m) {
                break;
            }
            let recs: Vec<&EpisodeRecord> = chunk.iter().map(|&i| train[i]).collect();
            let imgs: Vec<&Vec<RgbImage>> = chunk.iter().map(|&i| &train_images[i]).collect();
            let batch = make_batch(&model, &recs, &imgs)?;
            let rep = train_sequence(&model, &mut opt, &batch, cfg, &mut rng, epoch, &mut |_, _| {})?;
            let m = rep.mean();
            for (s, v) in sums.iter_mut().zip([m.d_real, m.d_fake, m.d_inconsistent, m.d_total, m.g, m.kl]) {
                *s += v;
            }
            batches += 1;
            if batches % 10 == 0 {
                log::info!(
                    "epoch {epoch} batch {batches}: d {:.4} g {:.4} kl {:.4} ({:.1}s)",
                    m.d_total,
                    m.g,
                    m.kl,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        let n = batches.max(1) as f64;
        let (p, r, f1, rs) = if val_eps.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let ev = evaluate_model(&model, &val_eps, detector, detector_name, &EvalOptions::default())?;
            (ev.metrics.precision, ev.metrics.recall, ev.metrics.f1, ev.metrics.rsim)
        };
        let em = EpochMetrics {
            epoch,
            d_real: sums[0] / n,
            d_fake: sums[1] / n,
            d_inconsistent: sums[2] / n,
            d_total: sums[3] / n,
            g: sums[4] / n,
            kl: sums[5] / n,
            val_precision: p,
            val_recall: r,
            val_f1: f1,
            val_rsim: rs,
            seconds: started.elapsed().as_secs_f64(),
        };
        if val_eps.is_empty() {
            log::info!("epoch {epoch} done in {:.0}s (validation disabled)", em.seconds);
        } else {
            log::info!(
                "epoch {epoch} done in {:.0}s: val P {p:.4} R {r:.4} F1 {f1:.4} rsim {rs:.4}",
                em.seconds
            );
        }
        let dir = checkpoint_dir(out, epoch);
        let meta = CheckpointMeta {
            epoch,
            seed: cfg.seed,
            dataset_hash: Some(data.manifest_hash.clone()),
            train: Some(cfg.clone()),
        };
        Checkpoint::capture(&model, Some(&opt), localizer.as_ref(), meta)?.save(&dir)?;
        append_metrics(&metrics_path, &em)?;
        report.epochs.push(em);
        report.last_checkpoint = Some(dir);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::GenConfig;

    fn tiny_data(dir: &Path, episodes: usize) -> TrainData {
        let gc = GenConfig { canvas_size: 32, ..GenConfig::default() };
        Dataset::generate(9, episodes, &gc, 32).unwrap().export(dir).unwrap();
        TrainData::load(dir).unwrap()
    }

    fn tiny_opts() -> FitOptions {
        let model = ModelConfig {
            image_size: 32,
            encoder_channels: vec![4, 4, 4],
            downsample: vec![true, true, true],
            decoder_channels: vec![4, 4, 4],
            ..ModelConfig::tiny()
        };
        FitOptions { model, detector: ValidationDetector::Template, max_batches: None }
    }

    #[test]
    fn one_epoch_writes_checkpoint_and_metrics_then_resumes() {
        let data_dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let data = tiny_data(data_dir.path(), 10);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, val_episodes: 1, ..TrainConfig::default() };
        let rep = fit(&data, out.path(), &cfg, &tiny_opts()).unwrap();
        assert_eq!(rep.epochs.len(), 1);
        assert!(checkpoint_dir(out.path(), 1).join(MANIFEST_FILE).exists());
        let rows = read_metrics(&out.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 1);

        let ck = Checkpoint::load(&checkpoint_dir(out.path(), 1)).unwrap();
        assert_eq!(ck.manifest.epoch, 1);
        let model = ck.build_model().unwrap();
        let restored = Checkpoint::capture(&model, None, None, CheckpointMeta::default()).unwrap();
        for (name, t) in &restored.tensors {
            let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = ck.tensors[name].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }

        let cfg2 = TrainConfig { epochs: 2, ..cfg };
        let rep2 = fit(&data, out.path(), &cfg2, &tiny_opts()).unwrap();
        assert_eq!(rep2.resumed_from, Some(1));
        assert_eq!(rep2.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2]);
        assert_eq!(read_metrics(&out.path().join(METRICS_FILE)).unwrap().len(), 2);
    }
}
