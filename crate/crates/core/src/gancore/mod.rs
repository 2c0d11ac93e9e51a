//! Generator and increment-reasoning discriminator.
//!
//! Feature maps are `(B, C, S, S)` tensors. The generator adds a projected
//! instruction map to the source-image features; the discriminator subtracts
//! source features from target features and scores the difference against
//! the instruction state with a projection head.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ops, BatchNorm, CondBatchNorm, Conv2d, ConvT2d, Linear, Mode, ParamStore};

pub use crate::nn::spectral_normalize;

/// Alias documenting intent: a `(B, C, S, S)` activation grid.
pub type FeatureMap = Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `S = V + L`.
pub fn compose(v: &FeatureMap, l: &FeatureMap) -> Result<FeatureMap> {
    same_shape(v, l, "compose")?;
    Ok((v + l)?)
}

/// `L_D = V_t - V_prev`.
pub fn visual_increment(v_t: &FeatureMap, v_prev: &FeatureMap) -> Result<FeatureMap> {
    same_shape(v_t, v_prev, "visual_increment")?;
    Ok((v_t - v_prev)?)
}

#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub downsample: Vec<bool>,
    pub batch_norm: bool,
    pub spectral_norm: bool,
}

impl EncoderSpec {
    pub fn out_size(&self) -> usize {
        self.image_size >> self.downsample.iter().filter(|d| **d).count()
    }
}

/// Pre-activation residual block: `[BN] ReLU conv3x3 [BN] ReLU [pool] conv3x3`
/// plus a `[pool] conv1x1` shortcut. The first block of an encoder skips the
/// leading activation so the raw image is not rectified.
#[derive(Debug, Clone)]
struct ResBlock {
    first: bool,
    down: bool,
    bn1: Option<BatchNorm>,
    conv1: Conv2d,
    bn2: Option<BatchNorm>,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        first: bool,
        down: bool,
        bn: bool,
        sn: bool,
    ) -> Result<Self> {
        Ok(Self {
            first,
            down,
            bn1: if bn && !first {
                Some(BatchNorm::new(ps, &format!("{name}.bn1"), cin, true)?)
            } else {
                None
            },
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, 1, sn)?,
            bn2: if bn {
                Some(BatchNorm::new(ps, &format!("{name}.bn2"), cout, true)?)
            } else {
                None
            },
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, sn)?,
            shortcut: Conv2d::new(ps, rng, &format!("{name}.shortcut"), cin, cout, 1, 1, sn)?,
        })
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        if !self.first {
            if let Some(bn) = &self.bn1 {
                h = bn.forward(ps, &h, mode)?;
            }
            h = h.relu()?;
        }
        h = self.conv1.forward(ps, &h, mode)?;
        if let Some(bn) = &self.bn2 {
            h = bn.forward(ps, &h, mode)?;
        }
        h = h.relu()?;
        if self.down {
            h = ops::avg_pool2(&h)?;
        }
        h = self.conv2.forward(ps, &h, mode)?;
        let s = if self.down {
            ops::avg_pool2(x)?
        } else {
            x.clone()
        };
        let s = self.shortcut.forward(ps, &s, mode)?;
        Ok((h + s)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub spec: EncoderSpec,
    blocks: Vec<ResBlock>,
}

impl ImageEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        spec: EncoderSpec,
    ) -> Result<Self> {
        if spec.channels.len() != spec.downsample.len() || spec.channels.is_empty() {
            return Err(Error::Config(
                "image encoder needs one downsample flag per block".into(),
            ));
        }
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, (&cout, &down)) in spec.channels.iter().zip(&spec.downsample).enumerate() {
            blocks.push(ResBlock::new(
                ps,
                rng,
                &format!("{prefix}.block{i}"),
                cin,
                cout,
                i == 0,
                down,
                spec.batch_norm,
                spec.spectral_norm,
            )?);
            cin = cout;
        }
        Ok(Self { spec, blocks })
    }

    pub fn forward(&self, ps: &ParamStore, img: &Tensor, mode: Mode) -> Result<FeatureMap> {
        let (_, c, h, w) = img.dims4()?;
        let n = self.spec.image_size;
        if c != 3 || h != n || w != n {
            return Err(Error::Contract(format!(
                "image encoder expects (B, 3, {n}, {n}) images, got {:?}",
                img.dims()
            )));
        }
        let mut x = img.clone();
        for b in &self.blocks {
            x = b.forward(ps, &x, mode)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub encoder: EncoderSpec,
    pub cond_dim: usize,
    /// Hidden width of the intent MLP; 0 means a single linear layer.
    pub intent_hidden: usize,
    pub decoder_channels: Vec<usize>,
    /// Decoder input is `[V + L; V]` when true, `[L; V]` otherwise.
    pub increment_reasoning: bool,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub encoder: ImageEncoder,
    intent: Vec<Linear>,
    stages: Vec<(ConvT2d, CondBatchNorm)>,
    out: Conv2d,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, spec: GeneratorSpec) -> Result<Self> {
        let c = *spec.encoder.channels.last().unwrap_or(&0);
        let s = spec.encoder.out_size();
        let stages_needed = (spec.encoder.image_size / s.max(1)).trailing_zeros() as usize;
        if s == 0 || s << spec.decoder_channels.len() != spec.encoder.image_size {
            return Err(Error::Config(format!(
                "decoder has {} upsampling stages but {} are needed to go from {s} to {}",
                spec.decoder_channels.len(),
                stages_needed,
                spec.encoder.image_size
            )));
        }
        let encoder = ImageEncoder::new(ps, rng, "gen.enc", spec.encoder.clone())?;
        let css = c * s * s;
        let intent = if spec.intent_hidden == 0 {
            vec![Linear::new(
                ps,
                rng,
                "gen.intent0",
                spec.cond_dim,
                css,
                true,
                false,
            )?]
        } else {
            vec![
                Linear::new(
                    ps,
                    rng,
                    "gen.intent0",
                    spec.cond_dim,
                    spec.intent_hidden,
                    true,
                    false,
                )?,
                Linear::new(ps, rng, "gen.intent1", spec.intent_hidden, css, true, false)?,
            ]
        };
        let mut stages = Vec::new();
        let mut cin = 2 * c;
        for (i, &co) in spec.decoder_channels.iter().enumerate() {
            stages.push((
                ConvT2d::new(ps, rng, &format!("gen.dec{i}.up"), cin, co, true)?,
                CondBatchNorm::new(ps, rng, &format!("gen.dec{i}.cbn"), co, spec.cond_dim)?,
            ));
            cin = co;
        }
        let out = Conv2d::new(ps, rng, "gen.out", cin, 3, 3, 1, true)?;
        Ok(Self {
            spec,
            encoder,
            intent,
            stages,
            out,
        })
    }

    pub fn feature_shape(&self) -> (usize, usize) {
        (
            *self.spec.encoder.channels.last().unwrap(),
            self.spec.encoder.out_size(),
        )
    }

    pub fn encode_image_g(&self, ps: &ParamStore, img: &Tensor, mode: Mode) -> Result<FeatureMap> {
        self.encoder.forward(ps, img, mode)
    }

    /// Semantic increment `L_G`: MLP of the condition reshaped to `(B, C, S, S)`.
    pub fn project_intent(&self, ps: &ParamStore, c: &Tensor, mode: Mode) -> Result<FeatureMap> {
        let (ch, s) = self.feature_shape();
        let b = c.dims()[0];
        let mut x = c.clone();
        for (i, l) in self.intent.iter().enumerate() {
            if i > 0 {
                x = x.relu()?;
            }
            x = l.forward(ps, &x, mode)?;
        }
        Ok(x.reshape((b, ch, s, s))?)
    }

    /// Decoder over `[first; v]` with every stage conditioned on `c`.
    pub fn decode(
        &self,
        ps: &ParamStore,
        first: &FeatureMap,
        v: &FeatureMap,
        c: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        same_shape(first, v, "decode")?;
        let mut x = Tensor::cat(&[first, v], 1)?;
        for (up, cbn) in &self.stages {
            x = up.forward(ps, &x, mode)?;
            x = cbn.forward(ps, &x, c, mode)?.relu()?;
        }
        Ok(self.out.forward(ps, &x, mode)?.tanh()?)
    }

    /// `decode(compose(V, L), V, c)` with `V` computed once.
    pub fn generate(
        &self,
        ps: &ParamStore,
        i_prev: &Tensor,
        c: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let v = self.encode_image_g(ps, i_prev, mode)?;
        let l = self.project_intent(ps, c, mode)?;
        let first = if self.spec.increment_reasoning {
            compose(&v, &l)?
        } else {
            l
        };
        self.decode(ps, &first, &v, c, mode)
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorSpec {
    pub encoder: EncoderSpec,
    pub phi_hidden: usize,
    /// Width of `x_t`; must equal the condition width `h`.
    pub proj_dim: usize,
    /// `phi([V_t - V_prev; V_prev])` when true, `phi([V_t; V_prev])` otherwise.
    pub increment_reasoning: bool,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub encoder: ImageEncoder,
    phi: Vec<Linear>,
    psi: Linear,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, spec: DiscriminatorSpec) -> Result<Self> {
        let c = *spec.encoder.channels.last().unwrap_or(&0);
        let s = spec.encoder.out_size();
        let encoder = ImageEncoder::new(ps, rng, "disc.enc", spec.encoder.clone())?;
        let fused = 2 * c * s * s;
        let phi = vec![
            Linear::new(ps, rng, "disc.phi0", fused, spec.phi_hidden, true, true)?,
            Linear::new(
                ps,
                rng,
                "disc.phi1",
                spec.phi_hidden,
                spec.proj_dim,
                true,
                true,
            )?,
        ];
        let psi = Linear::new(ps, rng, "disc.psi", spec.proj_dim, 1, true, true)?;
        Ok(Self {
            spec,
            encoder,
            phi,
            psi,
        })
    }

    pub fn encode_image_d(&self, ps: &ParamStore, img: &Tensor, mode: Mode) -> Result<FeatureMap> {
        self.encoder.forward(ps, img, mode)
    }

    /// `x_t = phi([first; v_prev])`, flattened channel concatenation.
    pub fn fuse(
        &self,
        ps: &ParamStore,
        first: &FeatureMap,
        v_prev: &FeatureMap,
        mode: Mode,
    ) -> Result<Tensor> {
        same_shape(first, v_prev, "fuse")?;
        let b = first.dims()[0];
        let mut x = Tensor::cat(&[first, v_prev], 1)?.reshape((b, ()))?;
        for (i, l) in self.phi.iter().enumerate() {
            if i > 0 {
                x = x.relu()?;
            }
            x = l.forward(ps, &x, mode)?;
        }
        Ok(x)
    }

    /// `r = <h, x> + psi(x)` per batch row.
    pub fn project(&self, ps: &ParamStore, x: &Tensor, h: &Tensor, mode: Mode) -> Result<Tensor> {
        same_shape(x, h, "projection score")?;
        let inner = (x * h)?.sum(1)?;
        let uncond = self.psi.forward(ps, x, mode)?.squeeze(1)?;
        Ok((inner + uncond)?)
    }

    /// Score from discriminator features of target and source.
    pub fn score(
        &self,
        ps: &ParamStore,
        v_t: &FeatureMap,
        v_prev: &FeatureMap,
        h: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let first = if self.spec.increment_reasoning {
            visual_increment(v_t, v_prev)?
        } else {
            v_t.clone()
        };
        let x = self.fuse(ps, &first, v_prev, mode)?;
        self.project(ps, &x, h, mode)
    }

    pub fn discriminate(
        &self,
        ps: &ParamStore,
        i_t: &Tensor,
        i_prev: &Tensor,
        h: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let b = i_t.dims()[0];
        // One encoder pass over both images: they share parameters, and
        // without batch norm the result is identical to two passes.
        let v = self.encode_image_d(ps, &Tensor::cat(&[i_t, i_prev], 0)?, mode)?;
        self.score(ps, &v.narrow(0, 0, b)?, &v.narrow(0, b, b)?, h, mode)
    }
}
