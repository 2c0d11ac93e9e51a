//! Detector-based precision/recall/F1 and scene-graph relational similarity
//! over own-output rollouts.

mod detect;
mod graph;
mod metrics;

pub use detect::{
    Detection, Detector, Localizer, LocalizerConfig, LocalizerFit, TemplateDetector,
    MIN_LOCALIZER_IMAGES,
};
pub use graph::{build_scene_graph, rsim, Edge, EdgeLabel, SceneGraph, VertexLabel, DEFAULT_TAU};
pub use metrics::{match_counts, prf1, Counts, Prf1};

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scenegen::{render_scene, EpisodeRecord, ObjectInstance, Scene};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau: f64,
    /// Center-distance gate for a match; `None` matches on type only.
    pub positional_gate: Option<f64>,
    pub sheets: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, positional_gate: None, sheets: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over episodes of rsim on the final step image.
    pub rsim: f64,
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rsim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rsim_final: f64,
    pub rsim_steps: Vec<f64>,
    pub detections: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub split: Option<String>,
    pub detector: String,
    pub options: EvalOptions,
    pub metrics: Metrics,
    pub per_step: Vec<StepMetrics>,
    pub episodes: Vec<EpisodeMetrics>,
    /// Free-form echo of the model / checkpoint configuration.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::scenegen::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = crate::scenegen::read_json(path)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("report version {} (expected {REPORT_VERSION})", r.version),
            });
        }
        Ok(r)
    }
}

fn graph_of_scene(scene: &Scene, tau: f64) -> Result<SceneGraph> {
    let items: Vec<_> = scene.objects.iter().map(|o| (o.otype, o.position)).collect();
    build_scene_graph(&items, tau)
}

/// Per-image counts and rsim of one detection list against the truth scene.
pub fn score_image(
    dets: &[Detection],
    truth: &Scene,
    opts: &EvalOptions,
) -> Result<(Counts, f64)> {
    let counts = match_counts(dets, &truth.objects, opts.positional_gate);
    let gt = graph_of_scene(truth, opts.tau)?;
    let items: Vec<_> = dets.iter().map(|d| (d.otype, d.position)).collect();
    let gen = build_scene_graph(&items, opts.tau)?;
    Ok((counts, rsim(&gt, &gen, counts.image_recall())))
}

/// Score per-step detections (`detections[e][t]` for episode `e`) against
/// the symbolic truth scenes.
pub fn evaluate_detections(
    episodes: &[&EpisodeRecord],
    detections: Vec<Vec<Vec<Detection>>>,
    detector_name: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if episodes.len() != detections.len() {
        return Err(Error::Contract(format!(
            "{} episodes but {} detection sequences",
            episodes.len(),
            detections.len()
        )));
    }
    let mut total = Counts::default();
    let mut per_step_counts: Vec<Counts> = Vec::new();
    let mut per_step_rsim: Vec<(f64, usize)> = Vec::new();
    let mut out = Vec::with_capacity(episodes.len());
    let mut rsim_sum = 0.0;
    for (rec, dets) in episodes.iter().zip(detections) {
        let steps = &rec.episode.steps;
        if dets.len() != steps.len() {
            return Err(Error::Contract(format!(
                "episode {}: {} steps but {} detection lists",
                rec.id,
                steps.len(),
                dets.len()
            )));
        }
        let mut ep_counts = Counts::default();
        let mut rs = Vec::with_capacity(steps.len());
        for (t, (d, step)) in dets.iter().zip(steps).enumerate() {
            let (c, r) = score_image(d, &step.scene, opts)?;
            ep_counts.add(c);
            if per_step_counts.len() <= t {
                per_step_counts.push(Counts::default());
                per_step_rsim.push((0.0, 0));
            }
            per_step_counts[t].add(c);
            per_step_rsim[t].0 += r;
            per_step_rsim[t].1 += 1;
            rs.push(r);
        }
        total.add(ep_counts);
        let s = ep_counts.scores();
        let rsim_final = rs.last().copied().unwrap_or(0.0);
        rsim_sum += rsim_final;
        out.push(EpisodeMetrics {
            id: rec.id.clone(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            rsim_final,
            rsim_steps: rs,
            detections: dets,
        });
    }
    let s = total.scores();
    Ok(EvalReport {
        version: REPORT_VERSION,
        split: None,
        detector: detector_name.to_string(),
        options: opts.clone(),
        metrics: Metrics {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            rsim: rsim_sum / episodes.len().max(1) as f64,
            counts: total,
        },
        per_step: per_step_counts
            .iter()
            .zip(&per_step_rsim)
            .enumerate()
            .map(|(t, (c, r))| {
                let s = c.scores();
                StepMetrics {
                    t: t + 1,
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    rsim: r.0 / r.1.max(1) as f64,
                }
            })
            .collect(),
        episodes: out,
        config: serde_json::Value::Null,
    })
}

/// Detect on generated step images (`generated[e][t]`) and score them.
/// Writes contact sheets when `opts.sheets` is set.
pub fn evaluate_generated(
    episodes: &[&EpisodeRecord],
    generated: &[Vec<RgbImage>],
    detector: &dyn Detector,
    detector_name: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if episodes.len() != generated.len() {
        return Err(Error::Contract(format!(
            "{} episodes but {} generated sequences",
            episodes.len(),
            generated.len()
        )));
    }
    let mut detections = Vec::with_capacity(generated.len());
    for (rec, imgs) in episodes.iter().zip(generated) {
        detections.push(detector.detect_many(imgs)?);
        if let Some(dir) = &opts.sheets {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let truth: Vec<RgbImage> = rec
                .episode
                .steps
                .iter()
                .map(|st| render_scene(&st.scene, st.scene.canvas_size))
                .collect();
            contact_sheet(&truth, imgs).save(dir.join(format!("{}.png", rec.id)))?;
        }
    }
    evaluate_detections(episodes, detections, detector_name, opts)
}

/// Roll the model forward on its own outputs (no teacher forcing) for every
/// episode and score the step images.
pub fn evaluate_model(
    model: &Model,
    episodes: &[&EpisodeRecord],
    detector: &dyn Detector,
    detector_name: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let generated = episodes
        .iter()
        .map(|rec| {
            let ins: Vec<&str> = rec.episode.instructions().collect();
            model.rollout(&ins)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_generated(episodes, &generated, detector, detector_name, opts)?;
    report.config = serde_json::to_value(&model.config).unwrap_or(serde_json::Value::Null);
    Ok(report)
}

/// Ground truth (top row) above generated images (bottom row).
pub fn contact_sheet(truth: &[RgbImage], generated: &[RgbImage]) -> RgbImage {
    let size = truth
        .iter()
        .chain(generated)
        .map(|i| i.width().max(i.height()))
        .max()
        .unwrap_or(1);
    let gap = 2;
    let cols = truth.len().max(generated.len()) as u32;
    let w = cols * size + (cols + 1) * gap;
    let h = 2 * size + 3 * gap;
    let mut sheet = RgbImage::from_pixel(w.max(1), h, Rgb([255, 255, 255]));
    for (row, imgs) in [truth, generated].into_iter().enumerate() {
        for (col, img) in imgs.iter().enumerate() {
            let (ox, oy) = (gap + col as u32 * (size + gap), gap + row as u32 * (size + gap));
            image::imageops::replace(&mut sheet, img, ox as i64, oy as i64);
        }
    }
    sheet
}

/// Truth objects of a scene as detections (confidence 1).
pub fn scene_detections(objects: &[ObjectInstance]) -> Vec<Detection> {
    objects
        .iter()
        .map(|o| Detection { otype: o.otype, position: o.position, confidence: 1.0 })
        .collect()
}
