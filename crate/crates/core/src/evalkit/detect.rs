use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::image_to_tensor;
use crate::nn::ops::sigmoid;
use crate::nn::{Adam, AdamConfig, Conv2d, Mode, ParamStore};
use crate::scenegen::{template_detect, Catalog, ObjectInstance, ObjectType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub otype: ObjectType,
    pub position: (f64, f64),
    pub confidence: f64,
}

pub trait Detector: Send + Sync {
    fn detect(&self, img: &RgbImage) -> Result<Vec<Detection>>;

    fn detect_many(&self, imgs: &[RgbImage]) -> Result<Vec<Vec<Detection>>> {
        imgs.iter().map(|i| self.detect(i)).collect()
    }
}

/// Exact connected-component matching; reliable on clean renders only.
#[derive(Debug, Clone)]
pub struct TemplateDetector {
    pub catalog: Catalog,
}

impl Detector for TemplateDetector {
    fn detect(&self, img: &RgbImage) -> Result<Vec<Detection>> {
        let mut out: Vec<Detection> = template_detect(img, &self.catalog)
            .into_iter()
            .map(|m| Detection { otype: m.otype, position: m.position, confidence: 1.0 })
            .collect();
        out.sort_by_key(|d| d.otype);
        out.dedup_by_key(|d| d.otype);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub grid: usize,
    pub threshold: f64,
    /// Convolution widths; each stage halves the resolution.
    pub channels: Vec<usize>,
    pub max_epochs: usize,
    /// Epochs without improvement of the validation exact-match rate.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Std of Gaussian pixel noise added to half of the training images.
    pub noise: f64,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            threshold: 0.5,
            channels: vec![16, 32, 64],
            max_epochs: 12,
            patience: 2,
            batch_size: 32,
            lr: 2e-3,
            lr_decay: 0.85,
            noise: 0.05,
            seed: 0,
        }
    }
}

const POSITIVE_WEIGHT: f64 = 4.0;

const LOCALIZER_META: &str = "localizer.json";
const LOCALIZER_WEIGHTS: &str = "localizer.safetensors";

#[derive(Serialize, Deserialize)]
struct LocalizerFile {
    config: LocalizerConfig,
    catalog: Catalog,
    image_size: usize,
}

/// Minimum number of training images for [`Localizer::train`].
pub const MIN_LOCALIZER_IMAGES: usize = 100;

/// Grid detector: per cell an objectness logit, class logits over all
/// (shape, color) pairs and a center offset inside the cell.
#[derive(Debug)]
pub struct Localizer {
    pub config: LocalizerConfig,
    pub catalog: Catalog,
    pub image_size: usize,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    mix: Conv2d,
    head: Conv2d,
}

/// Per-cell training targets for one batch.
struct Targets {
    obj: Tensor,
    onehot: Tensor,
    offset: Tensor,
    mask: Tensor,
    positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerFit {
    pub epochs: usize,
    pub val_exact_match: f64,
}

impl Localizer {
    pub fn new(config: LocalizerConfig, catalog: Catalog, image_size: usize) -> Result<Self> {
        catalog.validate()?;
        let stages = config.channels.len();
        if config.grid == 0 || image_size != config.grid << stages {
            return Err(Error::Config(format!(
                "localizer with {stages} stages maps {image_size} px to a {} grid, expected {}",
                image_size >> stages,
                config.grid
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new(DType::F32);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &mut rng, &format!("loc.conv{i}a"), cin, c, 3, 1, false)?);
            convs.push(Conv2d::new(&mut ps, &mut rng, &format!("loc.conv{i}b"), c, c, 3, 1, false)?);
            cin = c;
        }
        let mix = Conv2d::new(&mut ps, &mut rng, "loc.mix", cin, cin, 3, 1, false)?;
        let outs = 1 + catalog.num_pairs() + 2;
        let head = Conv2d::new(&mut ps, &mut rng, "loc.head", cin, outs, 1, 1, false)?;
        Ok(Self { config, catalog, image_size, params: ps, convs, mix, head })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        // Two convolutions per stage at full resolution, then max pooling:
        // circles and squares of the same color differ only in their corners.
        for pair in self.convs.chunks(2) {
            h = pair[0].forward(&self.params, &h, mode)?.relu()?;
            h = pair[1].forward(&self.params, &h, mode)?.relu()?;
            h = h.max_pool2d(2)?;
        }
        h = self.mix.forward(&self.params, &h, mode)?.relu()?;
        self.head.forward(&self.params, &h, mode)
    }

    fn batch_tensor(&self, imgs: &[&RgbImage], noise: Option<(&mut ChaCha8Rng, f64)>) -> Result<Tensor> {
        let ts = imgs
            .iter()
            .map(|i| image_to_tensor(i, DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&ts, 0)?;
        match noise {
            Some((rng, std)) if std > 0.0 => {
                let n = Normal::new(0.0, std).expect("positive std");
                let mut v = Vec::with_capacity(x.elem_count());
                let per = x.elem_count() / imgs.len();
                for _ in 0..imgs.len() {
                    let on = rand::Rng::random_bool(rng, 0.5);
                    v.extend((0..per).map(|_| if on { n.sample(rng) as f32 } else { 0.0 }));
                }
                let noise = Tensor::from_vec(v, x.shape(), x.device())?;
                Ok((x + noise)?)
            }
            _ => Ok(x),
        }
    }

    fn targets(&self, scenes: &[&[ObjectInstance]]) -> Result<Targets> {
        let g = self.config.grid;
        let p = self.catalog.num_pairs();
        let b = scenes.len();
        let mut obj = vec![0f32; b * g * g];
        let mut onehot = vec![0f32; b * p * g * g];
        let mut offset = vec![0f32; b * 2 * g * g];
        let mut positives = 0;
        for (bi, objs) in scenes.iter().enumerate() {
            for o in *objs {
                let fx = o.position.0 * g as f64;
                let fy = o.position.1 * g as f64;
                let (cx, cy) = ((fx as usize).min(g - 1), (fy as usize).min(g - 1));
                let cell = cy * g + cx;
                let k = self
                    .catalog
                    .pair_index(o.otype)
                    .ok_or_else(|| Error::Contract(format!("{} not in catalog", o.otype)))?;
                obj[bi * g * g + cell] = 1.0;
                onehot[(bi * p + k) * g * g + cell] = 1.0;
                offset[(bi * 2) * g * g + cell] = (fx - cx as f64) as f32;
                offset[(bi * 2 + 1) * g * g + cell] = (fy - cy as f64) as f32;
                positives += 1;
            }
        }
        let dev = self.params.device();
        let obj = Tensor::from_vec(obj, (b, 1, g, g), dev)?;
        Ok(Targets {
            mask: obj.clone(),
            obj,
            onehot: Tensor::from_vec(onehot, (b, p, g, g), dev)?,
            offset: Tensor::from_vec(offset, (b, 2, g, g), dev)?,
            positives,
        })
    }

    fn loss(&self, out: &Tensor, t: &Targets) -> Result<Tensor> {
        let p = self.catalog.num_pairs();
        let o = out.narrow(1, 0, 1)?;
        // Binary cross-entropy with logits: softplus(o) - y * o.
        let softplus = (o.relu()? + (o.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
        // Positive cells are rare; weight them up so objectness is not
        // dominated by background.
        let w = ((&t.obj * (POSITIVE_WEIGHT - 1.0))? + 1.0)?;
        let bce = ((softplus - (&t.obj * &o)?)? * w)?.mean_all()?;
        let logits = out.narrow(1, 1, p)?;
        let m = logits.max_keepdim(1)?.detach();
        let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + &m)?;
        let logp = logits.broadcast_sub(&lse)?;
        let npos = t.positives.max(1) as f64;
        let ce = ((logp * &t.onehot)?.sum_all()? * (-1.0 / npos))?;
        let off = sigmoid(&out.narrow(1, 1 + p, 2)?)?;
        let se = (off - &t.offset)?.sqr()?.broadcast_mul(&t.mask)?.sum_all()?;
        let mse = (se * (1.0 / npos))?;
        Ok((bce + ce + (mse * 5.0)?)?)
    }

    /// Train on clean renders until the validation exact-match rate stops
    /// improving. Keeps the best parameters seen.
    pub fn train(
        &mut self,
        train: &[(RgbImage, Vec<ObjectInstance>)],
        val: &[(RgbImage, Vec<ObjectInstance>)],
    ) -> Result<LocalizerFit> {
        if train.len() < MIN_LOCALIZER_IMAGES {
            return Err(Error::Config(format!(
                "localizer needs at least {MIN_LOCALIZER_IMAGES} training images, got {}",
                train.len()
            )));
        }
        let cfg = self.config.clone();
        let names: Vec<String> = self.params.params().map(|(n, _)| n.clone()).collect();
        let mut opt = Adam::new(AdamConfig::new(cfg.lr, 0.9, 0.999), &self.params, names)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best = (-1.0, self.params.deep_clone()?);
        let mut since_best = 0;
        let mut epochs = 0;
        for epoch in 0..cfg.max_epochs {
            epochs = epoch + 1;
            opt.config.lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let imgs: Vec<&RgbImage> = chunk.iter().map(|&i| &train[i].0).collect();
                let scenes: Vec<&[ObjectInstance]> = chunk.iter().map(|&i| train[i].1.as_slice()).collect();
                let x = self.batch_tensor(&imgs, Some((&mut rng, cfg.noise)))?;
                let t = self.targets(&scenes)?;
                let loss = self.loss(&self.forward(&x, Mode::Train)?, &t)?;
                total += loss.to_scalar::<f32>()? as f64;
                let grads = loss.backward()?;
                let g = opt.collect(&self.params, &grads)?;
                opt.step(&self.params, &g)?;
            }
            let rate = if val.is_empty() { 0.0 } else { self.exact_match_rate(val)? };
            log::info!(
                "localizer epoch {epochs}: loss {:.4}, val exact match {rate:.4}",
                total / order.chunks(cfg.batch_size).len() as f64
            );
            if rate > best.0 {
                best = (rate, self.params.deep_clone()?);
                since_best = 0;
                if rate >= 1.0 {
                    break;
                }
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
        self.params = best.1;
        Ok(LocalizerFit { epochs, val_exact_match: best.0.max(0.0) })
    }

    /// Share of images whose detections equal the truth types exactly, each
    /// within 1.5 cells of its true center.
    pub fn exact_match_rate(&self, data: &[(RgbImage, Vec<ObjectInstance>)]) -> Result<f64> {
        let imgs: Vec<RgbImage> = data.iter().map(|d| d.0.clone()).collect();
        let dets = self.detect_many(&imgs)?;
        let tol = 1.5 / self.config.grid as f64;
        let ok = dets
            .iter()
            .zip(data)
            .filter(|(d, (_, truth))| {
                d.len() == truth.len()
                    && truth.iter().all(|o| {
                        d.iter().any(|x| {
                            x.otype == o.otype
                                && (x.position.0 - o.position.0).abs() <= tol
                                && (x.position.1 - o.position.1).abs() <= tol
                        })
                    })
            })
            .count();
        Ok(ok as f64 / data.len().max(1) as f64)
    }

    fn decode(&self, out: &[f32], p: usize) -> Vec<Detection> {
        let g = self.config.grid;
        let gg = g * g;
        let sig = |v: f32| 1.0 / (1.0 + (-(v as f64)).exp());
        let mut best: BTreeMap<ObjectType, Detection> = BTreeMap::new();
        for cell in 0..gg {
            let conf = sig(out[cell]);
            if conf < self.config.threshold {
                continue;
            }
            let k = (0..p)
                .max_by(|&a, &b| out[(1 + a) * gg + cell].total_cmp(&out[(1 + b) * gg + cell]))
                .expect("catalog is non-empty");
            let (cx, cy) = ((cell % g) as f64, (cell / g) as f64);
            let position = (
                (cx + sig(out[(1 + p) * gg + cell])) / g as f64,
                (cy + sig(out[(2 + p) * gg + cell])) / g as f64,
            );
            let otype = self.catalog.pair_at(k);
            let cand = Detection { otype, position, confidence: conf };
            match best.get(&otype) {
                Some(d) if d.confidence >= conf => {}
                _ => {
                    best.insert(otype, cand);
                }
            }
        }
        best.into_values().collect()
    }

    /// Tensors of the localizer, all in group `loc`.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .params()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Write `localizer.json` and `localizer.safetensors` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = dir.join(LOCALIZER_WEIGHTS);
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, &weights).map_err(|e| Error::Format {
            path: weights.clone(),
            reason: e.to_string(),
        })?;
        let meta = LocalizerFile {
            config: self.config.clone(),
            catalog: self.catalog.clone(),
            image_size: self.image_size,
        };
        let path = dir.join(LOCALIZER_META);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCALIZER_META);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: LocalizerFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let loc = Localizer::new(meta.config, meta.catalog, meta.image_size)?;
        let weights = dir.join(LOCALIZER_WEIGHTS);
        let tensors = candle_core::safetensors::load(&weights, loc.params.device()).map_err(|e| {
            Error::Format { path: weights.clone(), reason: e.to_string() }
        })?;
        loc.load_tensors(&tensors.into_iter().collect())?;
        Ok(loc)
    }

    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, _) in self.params.params() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::NotFound(format!("localizer tensor {name}")))?;
            self.params.assign(name, t)?;
        }
        Ok(())
    }
}

impl Detector for Localizer {
    fn detect(&self, img: &RgbImage) -> Result<Vec<Detection>> {
        Ok(self.detect_many(std::slice::from_ref(img))?.remove(0))
    }

    fn detect_many(&self, imgs: &[RgbImage]) -> Result<Vec<Vec<Detection>>> {
        let p = self.catalog.num_pairs();
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(64) {
            for img in chunk {
                if img.width() as usize != self.image_size || img.height() as usize != self.image_size {
                    return Err(Error::shape(
                        "localizer input",
                        &[self.image_size, self.image_size],
                        &[img.height() as usize, img.width() as usize],
                    ));
                }
            }
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let y = self.forward(&self.batch_tensor(&refs, None)?, Mode::Eval)?;
            let y = y.to_dtype(DType::F32)?;
            for i in 0..chunk.len() {
                let v: Vec<f32> = y.get(i)?.flatten_all()?.to_vec1()?;
                out.push(self.decode(&v, p));
            }
        }
        Ok(out)
    }
}
