//! Hierarchical instruction encoder: bidirectional word-level GRU, an
//! instruction-level GRU accumulating history, and conditional augmentation.

mod vocab;

pub use vocab::{tokenize, Vocabulary, PAD, UNK};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{normal, ops, orthogonal, Embedding, LayerNorm, Linear, Mode, ParamStore};

/// GRU cell with layer normalization on both pre-activation streams:
///
/// ```text
/// gx = LN_x(W x)    gh = LN_h(U h)          (each 3H wide: r | z | n)
/// r = sigmoid(gx_r + gh_r)   z = sigmoid(gx_z + gh_z)
/// n = tanh(gx_n + r * gh_n)  h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
    wx: Linear,
    uh: Linear,
    ln_x: LayerNorm,
    ln_h: LayerNorm,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        let wx = Linear::new(
            ps,
            rng,
            &format!("{name}.wx"),
            input,
            3 * hidden,
            false,
            false,
        )?;
        let uh = Linear::new(
            ps,
            rng,
            &format!("{name}.uh"),
            hidden,
            3 * hidden,
            false,
            false,
        )?;
        // Recurrent weights: one orthogonal HxH block per gate.
        let mut u = Vec::with_capacity(3 * hidden * hidden);
        for _ in 0..3 {
            u.extend(orthogonal(rng, hidden, hidden));
        }
        let u = Tensor::from_vec(u, (3 * hidden, hidden), ps.device())?;
        ps.assign(&format!("{name}.uh.weight"), &u)?;
        Ok(Self {
            name: name.to_string(),
            input,
            hidden,
            wx,
            uh,
            ln_x: LayerNorm::new(ps, &format!("{name}.ln_x"), 3 * hidden)?,
            ln_h: LayerNorm::new(ps, &format!("{name}.ln_h"), 3 * hidden)?,
        })
    }

    /// Input contribution `LN_x(W x)` for `x: (B, input)`.
    pub fn input_gates(&self, ps: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let gx = self.wx.forward(ps, x, mode)?;
        self.ln_x.forward(ps, &gx, mode)
    }

    /// One recurrent update given precomputed input gates.
    pub fn step(&self, ps: &ParamStore, gx: &Tensor, h: &Tensor, mode: Mode) -> Result<Tensor> {
        let hd = self.hidden;
        let gh = self
            .ln_h
            .forward(ps, &self.uh.forward(ps, h, mode)?, mode)?;
        let rz = ops::sigmoid(&(gx.narrow(1, 0, 2 * hd)? + gh.narrow(1, 0, 2 * hd)?)?)?;
        let r = rz.narrow(1, 0, hd)?;
        let z = rz.narrow(1, hd, hd)?;
        let n = (gx.narrow(1, 2 * hd, hd)? + (r * gh.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
        // (1 - z) * n + z * h  ==  n + z * (h - n)
        Ok((&n + (z * (h - &n)?)?)?)
    }
}

/// Bidirectional word-level encoder producing `d_t` of width `N`
/// (forward-final and backward-final states concatenated).
#[derive(Debug, Clone)]
pub struct WordEncoder {
    pub embedding: Embedding,
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
    pub max_len: usize,
}

impl WordEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
    ) -> Result<Self> {
        if hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "word encoder width {hidden} must be even (two directions)"
            )));
        }
        Ok(Self {
            embedding: Embedding::new(
                ps,
                rng,
                &format!("{prefix}.embedding"),
                vocab_size,
                embed_dim,
            )?,
            forward_cell: GruCell::new(ps, rng, &format!("{prefix}.fwd"), embed_dim, hidden / 2)?,
            backward_cell: GruCell::new(ps, rng, &format!("{prefix}.bwd"), embed_dim, hidden / 2)?,
            max_len,
        })
    }

    pub fn width(&self) -> usize {
        2 * self.forward_cell.hidden
    }

    /// Encode a batch of token sequences; shorter sequences are padded and
    /// masked. Sequences longer than `max_len` are truncated with a warning.
    pub fn encode(&self, ps: &ParamStore, batch: &[Vec<u32>], mode: Mode) -> Result<Tensor> {
        if batch.is_empty() || batch.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract(
                "word encoder needs non-empty sequences".into(),
            ));
        }
        let dev = ps.device();
        let dtype = ps.dtype();
        let b = batch.len();
        let l = batch
            .iter()
            .map(|s| s.len().min(self.max_len))
            .max()
            .unwrap_or(1);
        let mut ids = vec![PAD; b * l];
        let mut mask = vec![0.0f64; b * l];
        for (i, seq) in batch.iter().enumerate() {
            if seq.len() > self.max_len {
                log::warn!(
                    "instruction of {} tokens truncated to {}",
                    seq.len(),
                    self.max_len
                );
            }
            for (t, &id) in seq.iter().take(self.max_len).enumerate() {
                ids[i * l + t] = id;
                mask[i * l + t] = 1.0;
            }
        }
        let ids = Tensor::from_vec(ids, (b, l), dev)?;
        let mask = Tensor::from_vec(mask, (b, l), dev)?.to_dtype(dtype)?;
        let emb = self.embedding.forward(ps, &ids, mode)?;
        let k = self.embedding.dim;
        let flat = emb.reshape((b * l, k))?;
        let hd = self.forward_cell.hidden;
        let gf = self
            .forward_cell
            .input_gates(ps, &flat, mode)?
            .reshape((b, l, 3 * hd))?;
        let gb = self
            .backward_cell
            .input_gates(ps, &flat, mode)?
            .reshape((b, l, 3 * hd))?;
        let zeros = Tensor::zeros((b, hd), dtype, dev)?;
        let run = |cell: &GruCell, g: &Tensor, order: Vec<usize>| -> Result<Tensor> {
            let mut h = zeros.clone();
            for t in order {
                let hn = cell.step(ps, &g.narrow(1, t, 1)?.squeeze(1)?, &h, mode)?;
                let m = mask.narrow(1, t, 1)?;
                h = (&h + (hn - &h)?.broadcast_mul(&m)?)?;
            }
            Ok(h)
        };
        let hf = run(&self.forward_cell, &gf, (0..l).collect())?;
        let hb = run(&self.backward_cell, &gb, (0..l).rev().collect())?;
        Ok(Tensor::cat(&[hf, hb], 1)?)
    }
}

/// Instruction-level recurrence `h_t = GRU(d_t, h_{t-1})`.
#[derive(Debug, Clone)]
pub struct HistoryEncoder {
    pub cell: GruCell,
}

impl HistoryEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            cell: GruCell::new(ps, rng, &format!("{prefix}.gru"), input, hidden)?,
        })
    }

    pub fn width(&self) -> usize {
        self.cell.hidden
    }

    pub fn initial(&self, ps: &ParamStore, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(
            (batch, self.cell.hidden),
            ps.dtype(),
            ps.device(),
        )?)
    }

    pub fn advance(
        &self,
        ps: &ParamStore,
        d: &Tensor,
        h_prev: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        let (bd, nd) = d.dims2()?;
        let (bh, mh) = h_prev.dims2()?;
        if nd != self.cell.input || mh != self.cell.hidden || bd != bh {
            return Err(Error::Contract(format!(
                "advance_history expects d: (B, {}), h: (B, {}); got {:?} and {:?}",
                self.cell.input,
                self.cell.hidden,
                d.dims(),
                h_prev.dims()
            )));
        }
        let gx = self.cell.input_gates(ps, d, mode)?;
        self.cell.step(ps, &gx, h_prev, mode)
    }
}

/// Word encoder plus history encoder sharing one parameter-name prefix pair.
#[derive(Debug, Clone)]
pub struct InstructionEncoder {
    pub words: WordEncoder,
    pub history: HistoryEncoder,
}

impl InstructionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        words_prefix: &str,
        history_prefix: &str,
        vocab_size: usize,
        embed_dim: usize,
        word_hidden: usize,
        history_hidden: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Self {
            words: WordEncoder::new(
                ps,
                rng,
                words_prefix,
                vocab_size,
                embed_dim,
                word_hidden,
                max_len,
            )?,
            history: HistoryEncoder::new(ps, rng, history_prefix, word_hidden, history_hidden)?,
        })
    }
}

/// Conditional augmentation: `h -> (mu, log sigma^2)`, sampled condition
/// and its KL divergence from the standard normal.
#[derive(Debug, Clone)]
pub struct CondAug {
    pub proj: Linear,
    pub out_dim: usize,
}

impl CondAug {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, rng, name, in_dim, 2 * out_dim, true, false)?,
            out_dim,
        })
    }

    pub fn moments(&self, ps: &ParamStore, h: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let y = self.proj.forward(ps, h, mode)?;
        Ok((
            y.narrow(1, 0, self.out_dim)?,
            y.narrow(1, self.out_dim, self.out_dim)?,
        ))
    }

    /// Training mode: `c = mu + sigma * eps`, KL averaged over the batch.
    /// Other modes: `c = mu`, KL = 0.
    pub fn augment(
        &self,
        ps: &ParamStore,
        h: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let (mu, logvar) = self.moments(ps, h, mode)?;
        if !mode.is_train() {
            let zero = Tensor::zeros((), mu.dtype(), mu.device())?;
            return Ok((mu, zero));
        }
        let rng = rng.ok_or_else(|| {
            Error::Contract("conditional augmentation in training mode needs an rng".into())
        })?;
        let eps = Tensor::from_vec(normal(rng, mu.elem_count(), 1.0), mu.dims(), mu.device())?
            .to_dtype(mu.dtype())?;
        let c = (&mu + (logvar.clone() * 0.5)?.exp()?.mul(&eps)?)?;
        let kl = kl_divergence(&mu, &logvar)?;
        Ok((c, kl))
    }
}

/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)` per row, averaged over rows.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let b = mu.dims()[0] as f64;
    let terms = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    Ok((((terms - 1.0)?.sum_all()? * 0.5)? / b)?)
}

/// Helper for tests and tools: a `(1, n)` row tensor.
pub fn row(values: &[f64], ps: &ParamStore) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (1, values.len()), ps.device())?.to_dtype(ps.dtype())?)
}

#[cfg(test)]
pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64)
    }

    fn zero_all(ps: &ParamStore, prefix: &str) {
        for (name, v) in ps.params() {
            if name.starts_with(prefix) && !name.ends_with("gain") {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn ln(v: &[f64]) -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) / (var + 1e-5).sqrt()).collect()
    }

    fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
        let cols = x.len();
        (0..rows)
            .map(|i| (0..cols).map(|j| w[i * cols + j] * x[j]).sum())
            .collect()
    }

    /// Independent scalar LN-GRU step.
    fn reference_step(wx: &[f64], uh: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let gx = ln(&matvec(wx, 3 * hd, x));
        let gh = ln(&matvec(uh, 3 * hd, h));
        (0..hd)
            .map(|i| {
                let r = sig(gx[i] + gh[i]);
                let z = sig(gx[hd + i] + gh[hd + i]);
                let n = (gx[2 * hd + i] + r * gh[2 * hd + i]).tanh();
                (1.0 - z) * n + z * h[i]
            })
            .collect()
    }

    #[test]
    fn seven_tokens_give_width_n() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = WordEncoder::new(&mut ps, &mut rng, "words", 30, 8, 12, 16).unwrap();
        let d = enc
            .encode(&ps, &[vec![2, 3, 4, 5, 6, 7, 8]], Mode::Eval)
            .unwrap();
        assert_eq!(d.dims(), &[1, 12]);
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = WordEncoder::new(&mut ps, &mut rng, "words", 30, 8, 12, 16).unwrap();
        zero_all(&ps, "words");
        let d = enc.encode(&ps, &[vec![2, 3, 4]], Mode::Eval).unwrap();
        assert!(to_f64_vec(&d).unwrap().iter().all(|x| *x == 0.0));
        let hist = HistoryEncoder::new(&mut ps, &mut rng, "history", 12, 6).unwrap();
        zero_all(&ps, "history");
        let h0 = hist.initial(&ps, 1).unwrap();
        let h = hist.advance(&ps, &d, &h0, Mode::Eval).unwrap();
        assert!(to_f64_vec(&h).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_token_matches_hand_recurrence() {
        // N = 4 (two directions of width 2), K = 2.
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = WordEncoder::new(&mut ps, &mut rng, "words", 5, 2, 4, 16).unwrap();
        let emb: Vec<f64> = to_f64_vec(ps.var("words.embedding.weight").unwrap()).unwrap();
        let x = &emb[3 * 2..4 * 2];
        let d = to_f64_vec(&enc.encode(&ps, &[vec![3]], Mode::Eval).unwrap()).unwrap();
        let mut want = Vec::new();
        for dir in ["fwd", "bwd"] {
            let wx = to_f64_vec(ps.var(&format!("words.{dir}.wx.weight")).unwrap()).unwrap();
            let uh = to_f64_vec(ps.var(&format!("words.{dir}.uh.weight")).unwrap()).unwrap();
            want.extend(reference_step(&wx, &uh, x, &[0.0, 0.0]));
        }
        for (a, b) in d.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{d:?} vs {want:?}");
        }
    }

    #[test]
    fn padding_does_not_change_encoding() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = WordEncoder::new(&mut ps, &mut rng, "words", 30, 8, 12, 16).unwrap();
        let alone = enc.encode(&ps, &[vec![4, 5, 6]], Mode::Eval).unwrap();
        let batched = enc
            .encode(&ps, &[vec![4, 5, 6], vec![7, 8, 9, 10, 11, 12]], Mode::Eval)
            .unwrap();
        let a = to_f64_vec(&alone).unwrap();
        let b = to_f64_vec(&batched.narrow(0, 0, 1).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn history_step_matches_hand_recurrence() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hist = HistoryEncoder::new(&mut ps, &mut rng, "history", 4, 3).unwrap();
        let d = [0.3, -0.7, 1.1, 0.2];
        let hp = [0.5, -0.1, 0.25];
        let h = hist
            .advance(
                &ps,
                &row(&d, &ps).unwrap(),
                &row(&hp, &ps).unwrap(),
                Mode::Eval,
            )
            .unwrap();
        let wx = to_f64_vec(ps.var("history.gru.wx.weight").unwrap()).unwrap();
        let uh = to_f64_vec(ps.var("history.gru.uh.weight").unwrap()).unwrap();
        let want = reference_step(&wx, &uh, &d, &hp);
        for (a, b) in to_f64_vec(&h).unwrap().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn open_update_gate_yields_candidate() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hist = HistoryEncoder::new(&mut ps, &mut rng, "history", 4, 3).unwrap();
        // Drive z to 0 through the input-stream LN bias of the z block.
        let mut bias = vec![0.0; 9];
        for b in &mut bias[3..6] {
            *b = -60.0;
        }
        ps.assign(
            "history.gru.ln_x.bias",
            &Tensor::new(bias.as_slice(), ps.device()).unwrap(),
        )
        .unwrap();
        let d = [0.3, -0.7, 1.1, 0.2];
        let h0 = hist.initial(&ps, 1).unwrap();
        let h = to_f64_vec(
            &hist
                .advance(&ps, &row(&d, &ps).unwrap(), &h0, Mode::Eval)
                .unwrap(),
        )
        .unwrap();
        // Candidate with h = 0: gh = LN(0) = 0, so n = tanh(gx_n).
        let wx = to_f64_vec(ps.var("history.gru.wx.weight").unwrap()).unwrap();
        let gx = ln(&matvec(&wx, 9, &d));
        for i in 0..3 {
            assert!((h[i] - gx[6 + i].tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hist = HistoryEncoder::new(&mut ps, &mut rng, "history", 4, 3).unwrap();
        let err = hist.advance(
            &ps,
            &row(&[1.0, 2.0], &ps).unwrap(),
            &hist.initial(&ps, 1).unwrap(),
            Mode::Eval,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn kl_closed_forms() {
        let ps = store();
        let zero = row(&[0.0, 0.0, 0.0], &ps).unwrap();
        let kl = kl_divergence(&zero, &zero)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(kl.abs() < 1e-9);
        let mu = row(&[1.0, 0.0, 0.0], &ps).unwrap();
        let kl = kl_divergence(&mu, &zero)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((kl - 0.5).abs() < 1e-9);
    }

    #[test]
    fn eval_augmentation_is_deterministic_mean() {
        let mut ps = store();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ca = CondAug::new(&mut ps, &mut rng, "gen.ca", 4, 3).unwrap();
        let h = row(&[0.1, 0.2, -0.3, 0.4], &ps).unwrap();
        let (c1, kl) = ca.augment(&ps, &h, None, Mode::Eval).unwrap();
        let (c2, _) = ca.augment(&ps, &h, None, Mode::Eval).unwrap();
        let (mu, _) = ca.moments(&ps, &h, Mode::Eval).unwrap();
        assert_eq!(to_f64_vec(&c1).unwrap(), to_f64_vec(&c2).unwrap());
        assert_eq!(to_f64_vec(&c1).unwrap(), to_f64_vec(&mu).unwrap());
        assert_eq!(kl.to_scalar::<f64>().unwrap(), 0.0);
        let (ct, klt) = ca.augment(&ps, &h, Some(&mut rng), Mode::Train).unwrap();
        assert_ne!(to_f64_vec(&ct).unwrap(), to_f64_vec(&mu).unwrap());
        assert!(klt.to_scalar::<f64>().unwrap() >= 0.0);
    }
}
