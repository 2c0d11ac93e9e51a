//! Fixtures shared by the benchmarks.

use candle_core::{DType, Tensor};
use stepdraw::encoder::tokenize;
use stepdraw::model::{image_to_tensor, Model};
use stepdraw::scenegen::{render_scene, sample_episode, GenConfig, Scene};
use stepdraw::training::SequenceBatch;
use stepdraw::Result;

/// A batch of `b` freshly sampled episodes rendered at the model's size.
pub fn synthetic_batch(model: &Model, b: usize, seed: u64) -> Result<SequenceBatch> {
    let gc = GenConfig::default();
    let size = model.config.image_size as u32;
    let eps = (0..b as u64)
        .map(|s| sample_episode(seed + s, &gc))
        .collect::<Result<Vec<_>>>()?;
    let steps = gc.steps;
    let mut images = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let ts = eps
            .iter()
            .map(|e| {
                let scene = if t == 0 { Scene::empty(size) } else { e.steps[t - 1].scene.clone() };
                image_to_tensor(&render_scene(&scene, size), DType::F32)
            })
            .collect::<Result<Vec<_>>>()?;
        images.push(Tensor::stack(&ts, 0)?);
    }
    let tokens = (0..steps)
        .map(|t| {
            eps.iter()
                .map(|e| tokenize(&e.steps[t].instruction, &model.vocab))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBatch { images, tokens })
}
