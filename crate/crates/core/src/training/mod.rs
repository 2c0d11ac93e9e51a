//! Adversarial objectives and the per-sequence update schedule.
//!
//! Within a sequence the discriminator and generator are updated at every
//! timestep. Instruction-encoder gradients come only from the discriminator
//! objective; they are summed over the timesteps and applied once when the
//! sequence ends.

mod fit;
mod losses;

pub use fit::{
    checkpoint_dir, fit, latest_checkpoint, read_metrics, train_localizer, EpochMetrics, FitOptions, FitReport,
    TrainData, ValidationDetector, METRICS_FILE, METRICS_HEADER,
};
pub use losses::{
    d_loss_fake, d_loss_inconsistent, d_loss_real, g_loss, make_mismatched, total_d_loss,
    LossWeights,
};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, Model};
use crate::nn::{accumulate, clip_global_norm, Adam, AdamConfig, Grads, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_word_encoder: f64,
    pub lr_history_encoder: f64,
    /// Adam (beta1, beta2) for generator and discriminator.
    pub betas_gan: (f64, f64),
    /// Adam (beta1, beta2) for the instruction encoder.
    pub betas_encoder: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub ablation: Option<Ablation>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global-norm clip for the accumulated encoder gradient.
    pub encoder_clip: f64,
    /// Validation episodes evaluated after each epoch (0 disables).
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            lr_word_encoder: 3e-3,
            lr_history_encoder: 6e-3,
            betas_gan: (0.0, 0.9),
            betas_encoder: (0.999, 0.9),
            batch_size: 16,
            epochs: 20,
            ablation: None,
            seed: 0,
            weights: LossWeights::default(),
            encoder_clip: 10.0,
            val_episodes: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One Adam per parameter group.
#[derive(Debug)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
    pub words: Adam,
    pub history: Adam,
    /// Generator-side encoder (split-encoder ablation only).
    pub gen_words: Option<Adam>,
    pub gen_history: Option<Adam>,
}

fn names(model: &Model, group: &str) -> Vec<String> {
    model
        .params
        .group(group)
        .into_iter()
        .map(|(n, _)| n.clone())
        .collect()
}

impl Optimizers {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let ps = &model.params;
        let (g1, g2) = cfg.betas_gan;
        let (e1, e2) = cfg.betas_encoder;
        let mk = |lr: f64, b1: f64, b2: f64, group: &str| {
            Adam::new(AdamConfig::new(lr, b1, b2), ps, names(model, group))
        };
        let split = model.gen_encoder.is_some();
        Ok(Self {
            generator: mk(cfg.lr_generator, g1, g2, "gen")?,
            discriminator: mk(cfg.lr_discriminator, g1, g2, "disc")?,
            words: mk(cfg.lr_word_encoder, e1, e2, "words")?,
            history: mk(cfg.lr_history_encoder, e1, e2, "history")?,
            gen_words: if split {
                Some(mk(cfg.lr_word_encoder, e1, e2, "gwords")?)
            } else {
                None
            },
            gen_history: if split {
                Some(mk(cfg.lr_history_encoder, e1, e2, "ghistory")?)
            } else {
                None
            },
        })
    }

    /// `(group name, optimizer)` pairs in a fixed order.
    pub fn all(&self) -> Vec<(&'static str, &Adam)> {
        let mut v = vec![
            ("gen", &self.generator),
            ("disc", &self.discriminator),
            ("words", &self.words),
            ("history", &self.history),
        ];
        if let Some(o) = &self.gen_words {
            v.push(("gwords", o));
        }
        if let Some(o) = &self.gen_history {
            v.push(("ghistory", o));
        }
        v
    }

    pub fn all_mut(&mut self) -> Vec<(&'static str, &mut Adam)> {
        let mut v = vec![
            ("gen", &mut self.generator),
            ("disc", &mut self.discriminator),
            ("words", &mut self.words),
            ("history", &mut self.history),
        ];
        if let Some(o) = self.gen_words.as_mut() {
            v.push(("gwords", o));
        }
        if let Some(o) = self.gen_history.as_mut() {
            v.push(("ghistory", o));
        }
        v
    }
}

/// A batch of equal-length episodes, time-major.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `T + 1` tensors of shape `(B, 3, H, W)`; index 0 is the empty canvas.
    pub images: Vec<Tensor>,
    /// `T` entries of `B` token sequences.
    pub tokens: Vec<Vec<Vec<u32>>>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.images.first().map(|t| t.dims()[0]).unwrap_or(0)
    }
}

/// Update points inside [`train_sequence`], reported to an observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    DiscriminatorUpdate { t: usize },
    GeneratorUpdate { t: usize },
    EncoderUpdate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_real: f64,
    pub d_fake: f64,
    pub d_inconsistent: f64,
    pub d_total: f64,
    pub g: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    /// Losses per timestep.
    pub steps: Vec<StepLosses>,
    /// Encoder gradient norm before clipping.
    pub encoder_grad_norm: f64,
}

impl SequenceReport {
    pub fn mean(&self) -> StepLosses {
        let n = self.steps.len().max(1) as f64;
        let mut m = StepLosses::default();
        for s in &self.steps {
            m.d_real += s.d_real / n;
            m.d_fake += s.d_fake / n;
            m.d_inconsistent += s.d_inconsistent / n;
            m.d_total += s.d_total / n;
            m.g += s.g / n;
            m.kl += s.kl / n;
        }
        m
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn finite(value: f64, epoch: usize, t: usize, component: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged {
            epoch,
            t,
            component: component.to_string(),
        })
    }
}

fn add_group(
    acc: &mut Grads,
    opt: &Adam,
    model: &Model,
    grads: &candle_core::backprop::GradStore,
) -> Result<()> {
    accumulate(acc, opt.collect(&model.params, grads)?)
}

/// Train on one batch of sequences with teacher forcing. `observer` is
/// called after every parameter update.
pub fn train_sequence(
    model: &Model,
    opt: &mut Optimizers,
    batch: &SequenceBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    observer: &mut dyn FnMut(Phase, &Model),
) -> Result<SequenceReport> {
    let ps = &model.params;
    let b = batch.batch_size();
    let w = &cfg.weights;
    let split = model.gen_encoder.is_some();
    let mut h = model.initial_history(b)?;
    let mut hg = if split {
        Some(model.initial_history(b)?)
    } else {
        None
    };
    let mut enc_acc = Grads::new();
    let mut genc_acc = Grads::new();
    let mut report = SequenceReport::default();

    for t in 0..batch.len() {
        let tokens = &batch.tokens[t];
        let i_prev = &batch.images[t];
        let i_t = &batch.images[t + 1];

        let (d, h_new) = model.encode_step(&model.encoder, tokens, &h, Mode::Train)?;
        // Generator condition: detached from the shared encoder so the
        // generator objective never reaches it.
        let (cond_src, hg_new) = match (&model.gen_encoder, &hg) {
            (Some(genc), Some(hg_prev)) => {
                let (dg, hg2) = model.encode_step(genc, tokens, hg_prev, Mode::Train)?;
                (model.ca_input(&dg, &hg2).clone(), Some(hg2))
            }
            _ => (model.ca_input(&d, &h_new).detach(), None),
        };
        let (c, kl) = model.ca.augment(ps, &cond_src, Some(rng), Mode::Train)?;
        let fake = model.generator.generate(ps, i_prev, &c, Mode::Train)?;

        // Discriminator step on real, generated (detached) and mismatched.
        let disc = &model.discriminator;
        let v = disc.encode_image_d(
            ps,
            &Tensor::cat(&[i_prev, i_t, &fake.detach()], 0)?,
            Mode::Train,
        )?;
        let vp = v.narrow(0, 0, b)?;
        let vt = v.narrow(0, b, b)?;
        let vf = v.narrow(0, 2 * b, b)?;
        let r_real = disc.score(ps, &vt, &vp, &h_new, Mode::Train)?;
        let r_fake = disc.score(ps, &vf, &vp, &h_new, Mode::Train)?;
        let l_real = d_loss_real(&r_real)?;
        let l_fake = d_loss_fake(&r_fake)?;
        let l_inc = match make_mismatched(&h_new)? {
            Some(hm) => Some(d_loss_inconsistent(&disc.score(
                ps,
                &vt,
                &vp,
                &hm,
                Mode::Train,
            )?)?),
            None => None,
        };
        let l_d = total_d_loss(&l_real, &l_fake, l_inc.as_ref(), None, w)?;
        let mut losses = StepLosses {
            d_real: finite(scalar(&l_real)?, epoch, t, "d_real")?,
            d_fake: finite(scalar(&l_fake)?, epoch, t, "d_fake")?,
            d_inconsistent: match &l_inc {
                Some(l) => finite(scalar(l)?, epoch, t, "d_inconsistent")?,
                None => 0.0,
            },
            d_total: finite(scalar(&l_d)?, epoch, t, "d_total")?,
            ..Default::default()
        };
        let grads = l_d.backward()?;
        let d_grads = opt.discriminator.collect(ps, &grads)?;
        add_group(&mut enc_acc, &opt.words, model, &grads)?;
        add_group(&mut enc_acc, &opt.history, model, &grads)?;
        drop(grads);
        opt.discriminator.step(ps, &d_grads)?;
        observer(Phase::DiscriminatorUpdate { t }, model);

        // Generator step against the just-updated, frozen discriminator.
        let v2 = disc.encode_image_d(ps, &Tensor::cat(&[i_prev, &fake], 0)?, Mode::Frozen)?;
        let r_g = disc.score(
            ps,
            &v2.narrow(0, b, b)?,
            &v2.narrow(0, 0, b)?,
            &h_new.detach(),
            Mode::Frozen,
        )?;
        let l_adv = g_loss(&r_g)?;
        let l_g = (&l_adv + (&kl * w.lambda_kl)?)?;
        losses.g = finite(scalar(&l_adv)?, epoch, t, "g")?;
        losses.kl = finite(scalar(&kl)?, epoch, t, "kl")?;
        let grads = l_g.backward()?;
        let g_grads = opt.generator.collect(ps, &grads)?;
        if let (Some(ow), Some(oh)) = (&opt.gen_words, &opt.gen_history) {
            add_group(&mut genc_acc, ow, model, &grads)?;
            add_group(&mut genc_acc, oh, model, &grads)?;
        }
        drop(grads);
        opt.generator.step(ps, &g_grads)?;
        observer(Phase::GeneratorUpdate { t }, model);

        report.steps.push(losses);
        h = h_new;
        hg = hg_new;
    }

    // Encoder update, once per sequence.
    report.encoder_grad_norm = clip_global_norm(&mut enc_acc, cfg.encoder_clip)?;
    if !report.encoder_grad_norm.is_finite() {
        return Err(Error::Diverged {
            epoch,
            t: batch.len(),
            component: "encoder gradient".into(),
        });
    }
    opt.words.step(ps, &enc_acc)?;
    opt.history.step(ps, &enc_acc)?;
    if let (Some(ow), Some(oh)) = (opt.gen_words.as_mut(), opt.gen_history.as_mut()) {
        clip_global_norm(&mut genc_acc, cfg.encoder_clip)?;
        ow.step(ps, &genc_acc)?;
        oh.step(ps, &genc_acc)?;
    }
    observer(Phase::EncoderUpdate, model);
    Ok(report)
}
