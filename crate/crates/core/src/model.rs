//! Model assembly, configuration presets and the inference step shared by
//! the evaluator and the session service.

use std::str::FromStr;

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, CondAug, InstructionEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::gancore::{Discriminator, DiscriminatorSpec, EncoderSpec, Generator, GeneratorSpec};
use crate::nn::{Mode, ParamStore};
use crate::scenegen::{render_scene, Catalog, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Concatenation instead of addition/subtraction of feature maps.
    NoIncrementReasoning,
    /// `h_t := d_t`; no instruction-level recurrence.
    NoHistory,
    /// Separate instruction encoders for generator and discriminator.
    SplitEncoders,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoIncrementReasoning => "no_increment",
            Ablation::NoHistory => "no_history",
            Ablation::SplitEncoders => "split_encoders",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_increment" | "no_increment_reasoning" => Ok(Ablation::NoIncrementReasoning),
            "no_history" => Ok(Ablation::NoHistory),
            "split_encoders" => Ok(Ablation::SplitEncoders),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected no_history, no_increment or split_encoders)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub catalog: Catalog,
    /// Word embedding width K.
    pub embed_dim: usize,
    /// Word-level state width N (both directions together).
    pub word_hidden: usize,
    /// Instruction-level state width M.
    pub history_hidden: usize,
    /// Conditional-augmentation output width M_c.
    pub cond_dim: usize,
    pub max_len: usize,
    /// Image-encoder block widths; the last one is the feature depth C.
    pub encoder_channels: Vec<usize>,
    pub downsample: Vec<bool>,
    pub decoder_channels: Vec<usize>,
    /// Hidden width of the intent MLP (0 = single linear layer).
    pub intent_hidden: usize,
    /// Hidden width of the discriminator fusion MLP.
    pub phi_hidden: usize,
    /// Apply conditional augmentation to `d_t` instead of `h_t`.
    pub augment_words: bool,
    pub ablation: Option<Ablation>,
}

impl ModelConfig {
    /// 64-pixel default used for training runs on one machine.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            catalog: Catalog::default(),
            embed_dim: 64,
            word_hidden: 256,
            history_hidden: 256,
            cond_dim: 256,
            max_len: 16,
            encoder_channels: vec![16, 32, 64, 128],
            downsample: vec![true, true, true, false],
            decoder_channels: vec![64, 32, 16],
            intent_hidden: 256,
            phi_hidden: 256,
            augment_words: false,
            ablation: None,
        }
    }

    /// Large-scale widths (128 px, 256x16x16 feature maps).
    pub fn paper() -> Self {
        Self {
            image_size: 128,
            embed_dim: 300,
            word_hidden: 1024,
            history_hidden: 1024,
            cond_dim: 1024,
            encoder_channels: vec![64, 128, 256, 256],
            decoder_channels: vec![256, 128, 64],
            intent_hidden: 1024,
            phi_hidden: 1024,
            ..Self::desk()
        }
    }

    /// 8-pixel instance with C = 4, S = 2 for numerical gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            catalog: Catalog::default(),
            embed_dim: 4,
            word_hidden: 4,
            history_hidden: 4,
            cond_dim: 4,
            max_len: 16,
            encoder_channels: vec![4, 4],
            downsample: vec![true, true],
            decoder_channels: vec![4, 4],
            intent_hidden: 8,
            phi_hidden: 8,
            augment_words: false,
            ablation: None,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn feature_size(&self) -> usize {
        self.image_size >> self.downsample.iter().filter(|d| **d).count()
    }

    pub fn increment_reasoning(&self) -> bool {
        self.ablation != Some(Ablation::NoIncrementReasoning)
    }

    pub fn uses_history(&self) -> bool {
        self.ablation != Some(Ablation::NoHistory)
    }

    pub fn split_encoders(&self) -> bool {
        self.ablation == Some(Ablation::SplitEncoders)
    }

    /// Width of the condition seen by the discriminator projection.
    pub fn condition_width(&self) -> usize {
        if self.uses_history() {
            self.history_hidden
        } else {
            self.word_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        if self.word_hidden % 2 != 0 {
            return Err(Error::Config("word_hidden must be even".into()));
        }
        if self.encoder_channels.len() != self.downsample.len() || self.encoder_channels.is_empty()
        {
            return Err(Error::Config(
                "encoder_channels and downsample must have the same non-zero length".into(),
            ));
        }
        let s = self.feature_size();
        if s == 0 || s << self.decoder_channels.len() != self.image_size {
            return Err(Error::Config(format!(
                "{} decoder stages cannot upsample {s} to {}",
                self.decoder_channels.len(),
                self.image_size
            )));
        }
        if self.augment_words && !self.uses_history() {
            return Err(Error::Config(
                "augment_words has no effect without history; drop one of them".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to run the model: configuration, vocabulary,
/// parameters and the layer structure over them.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub encoder: InstructionEncoder,
    /// Generator-side encoder, present only with split encoders.
    pub gen_encoder: Option<InstructionEncoder>,
    pub ca: CondAug,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new(dtype);
        let c = &config;
        let encoder = InstructionEncoder::new(
            &mut ps,
            &mut rng,
            "words",
            "history",
            vocab.len(),
            c.embed_dim,
            c.word_hidden,
            c.history_hidden,
            c.max_len,
        )?;
        let gen_encoder = if c.split_encoders() {
            Some(InstructionEncoder::new(
                &mut ps,
                &mut rng,
                "gwords",
                "ghistory",
                vocab.len(),
                c.embed_dim,
                c.word_hidden,
                c.history_hidden,
                c.max_len,
            )?)
        } else {
            None
        };
        let ca_in = if c.augment_words || !c.uses_history() {
            c.word_hidden
        } else {
            c.history_hidden
        };
        let ca = CondAug::new(&mut ps, &mut rng, "gen.ca", ca_in, c.cond_dim)?;
        let enc = |bn: bool, sn: bool| EncoderSpec {
            image_size: c.image_size,
            channels: c.encoder_channels.clone(),
            downsample: c.downsample.clone(),
            batch_norm: bn,
            spectral_norm: sn,
        };
        let generator = Generator::new(
            &mut ps,
            &mut rng,
            GeneratorSpec {
                encoder: enc(true, false),
                cond_dim: c.cond_dim,
                intent_hidden: c.intent_hidden,
                decoder_channels: c.decoder_channels.clone(),
                increment_reasoning: c.increment_reasoning(),
            },
        )?;
        let discriminator = Discriminator::new(
            &mut ps,
            &mut rng,
            DiscriminatorSpec {
                encoder: enc(false, true),
                phi_hidden: c.phi_hidden,
                proj_dim: c.condition_width(),
                increment_reasoning: c.increment_reasoning(),
            },
        )?;
        Ok(Self {
            config,
            vocab,
            params: ps,
            encoder,
            gen_encoder,
            ca,
            generator,
            discriminator,
        })
    }

    pub fn tokenize_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<u32>>> {
        texts
            .iter()
            .map(|t| tokenize(t.as_ref(), &self.vocab))
            .collect()
    }

    /// Advance one instruction-encoder stack: returns `(d_t, h_t)`. Without
    /// history `h_t` is `d_t`.
    pub fn encode_step(
        &self,
        enc: &InstructionEncoder,
        tokens: &[Vec<u32>],
        h_prev: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let d = enc.words.encode(&self.params, tokens, mode)?;
        let h = if self.config.uses_history() {
            enc.history.advance(&self.params, &d, h_prev, mode)?
        } else {
            d.clone()
        };
        Ok((d, h))
    }

    /// Zero state of the condition recurrence for a batch.
    pub fn initial_history(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(
            (batch, self.config.condition_width()),
            self.params.dtype(),
            self.params.device(),
        )?)
    }

    /// Source for conditional augmentation given `(d_t, h_t)`.
    pub fn ca_input<'a>(&self, d: &'a Tensor, h: &'a Tensor) -> &'a Tensor {
        if self.config.augment_words {
            d
        } else {
            h
        }
    }

    pub fn empty_canvas(&self) -> RgbImage {
        let n = self.config.image_size as u32;
        render_scene(&Scene::empty(n), n)
    }

    pub fn image_tensor(&self, img: &RgbImage) -> Result<Tensor> {
        image_to_tensor(img, self.params.dtype())
    }

    pub fn initial_state(&self) -> Result<RolloutState> {
        let image = self.image_tensor(&self.empty_canvas())?.unsqueeze(0)?;
        let h = self.initial_history(1)?;
        let h_gen = if self.gen_encoder.is_some() {
            Some(self.initial_history(1)?)
        } else {
            None
        };
        Ok(RolloutState {
            image,
            h,
            h_gen,
            t: 0,
        })
    }

    /// One deterministic inference step: encode the instruction, advance the
    /// history, take the mean condition and generate from the current image.
    /// The evaluator and the session service both call exactly this.
    pub fn rollout_step(&self, state: &RolloutState, instruction: &str) -> Result<RolloutState> {
        let mode = Mode::Frozen;
        let tokens = vec![tokenize(instruction, &self.vocab)?];
        let (d, h) = self.encode_step(&self.encoder, &tokens, &state.h, mode)?;
        let (cond_src, h_gen) = match (&self.gen_encoder, &state.h_gen) {
            (Some(genc), Some(hg)) => {
                let (dg, hg2) = self.encode_step(genc, &tokens, hg, mode)?;
                (self.ca_input(&dg, &hg2).clone(), Some(hg2))
            }
            _ => (self.ca_input(&d, &h).clone(), None),
        };
        let (c, _) = self.ca.augment(&self.params, &cond_src, None, mode)?;
        let image = self
            .generator
            .generate(&self.params, &state.image, &c, mode)?;
        Ok(RolloutState {
            image,
            h,
            h_gen,
            t: state.t + 1,
        })
    }

    /// Run a whole instruction sequence from the empty canvas.
    pub fn rollout<S: AsRef<str>>(&self, instructions: &[S]) -> Result<Vec<RgbImage>> {
        let mut state = self.initial_state()?;
        let mut out = Vec::with_capacity(instructions.len());
        for ins in instructions {
            state = self.rollout_step(&state, ins.as_ref())?;
            out.push(state.rgb()?);
        }
        Ok(out)
    }
}

/// Per-episode inference state: current canvas, condition state(s), step.
#[derive(Debug, Clone)]
pub struct RolloutState {
    /// `(1, 3, H, W)` in `[-1, 1]`.
    pub image: Tensor,
    pub h: Tensor,
    pub h_gen: Option<Tensor>,
    pub t: usize,
}

impl RolloutState {
    pub fn rgb(&self) -> Result<RgbImage> {
        tensor_to_image(&self.image.squeeze(0)?)
    }
}

/// `(3, H, W)` tensor with values `v / 127.5 - 1`.
pub fn image_to_tensor(img: &RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`] with clamping and rounding.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("image tensor", &[3, h, w], t.dims()));
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let s = v[(ch * h + y as usize) * w + x as usize];
            ((s + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::desk().feature_size(), 8);
        assert_eq!(ModelConfig::paper().feature_size(), 16);
        assert_eq!(ModelConfig::tiny().feature_size(), 2);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 50, y as u8 * 60, 255]));
        let t = image_to_tensor(&img, DType::F32).unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    #[test]
    fn ablation_names_parse() {
        for a in [
            Ablation::NoIncrementReasoning,
            Ablation::NoHistory,
            Ablation::SplitEncoders,
        ] {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn decoder_stage_mismatch_is_config_error() {
        let cfg = ModelConfig {
            decoder_channels: vec![8],
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
