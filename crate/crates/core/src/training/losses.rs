use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the fake-image hinge term.
    pub alpha: f64,
    /// Weight of the mismatched-instruction hinge term.
    pub beta: f64,
    /// Weight of the conditional-augmentation KL term.
    pub lambda_kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_kl: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// `mean(max(0, 1 - r))` over real (source, target, instruction) triples.
pub fn d_loss_real(r: &Tensor) -> Result<Tensor> {
    Ok(r.affine(-1.0, 1.0)?.relu()?.mean_all()?)
}

/// `mean(max(0, 1 + r))` over generated targets.
pub fn d_loss_fake(r: &Tensor) -> Result<Tensor> {
    Ok(r.affine(1.0, 1.0)?.relu()?.mean_all()?)
}

/// Same hinge as [`d_loss_fake`], on real images with mismatched conditions.
pub fn d_loss_inconsistent(r: &Tensor) -> Result<Tensor> {
    d_loss_fake(r)
}

/// `real + alpha * fake + beta * inconsistent + lambda_kl * kl`. A missing
/// inconsistent term (batch of one) contributes nothing.
pub fn total_d_loss(
    real: &Tensor,
    fake: &Tensor,
    inconsistent: Option<&Tensor>,
    kl: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total = (real + (fake * w.alpha)?)?;
    if let Some(inc) = inconsistent {
        total = (total + (inc * w.beta)?)?;
    }
    if let Some(kl) = kl {
        total = (total + (kl * w.lambda_kl)?)?;
    }
    Ok(total)
}

/// `mean(-r)` over generated samples.
pub fn g_loss(r_fake: &Tensor) -> Result<Tensor> {
    Ok(r_fake.neg()?.mean_all()?)
}

/// Cyclic shift by one along the batch: `[h1, h2, h3] -> [h2, h3, h1]`.
/// Returns `None` for a batch of one, where no mismatch exists.
pub fn make_mismatched(h: &Tensor) -> Result<Option<Tensor>> {
    let b = h.dims()[0];
    if b < 2 {
        log::warn!("batch of one: inconsistent-pair term skipped");
        return Ok(None);
    }
    Ok(Some(Tensor::cat(
        &[h.narrow(0, 1, b - 1)?, h.narrow(0, 0, 1)?],
        0,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn mismatch_has_no_fixed_point() {
        let h = Tensor::new(&[[1.0f64, 0.0], [2.0, 0.0], [3.0, 0.0]], &Device::Cpu).unwrap();
        let m = make_mismatched(&h).unwrap().unwrap();
        assert_eq!(
            m.to_vec2::<f64>().unwrap(),
            vec![vec![2.0, 0.0], vec![3.0, 0.0], vec![1.0, 0.0]]
        );
        assert!(make_mismatched(&h.narrow(0, 0, 1).unwrap())
            .unwrap()
            .is_none());
    }

    #[test]
    fn batch_of_one_reduces_to_real_plus_fake() {
        let w = LossWeights::default();
        let total = total_d_loss(
            &t(&[1.0]).sum_all().unwrap(),
            &t(&[2.0]).sum_all().unwrap(),
            None,
            None,
            &w,
        )
        .unwrap();
        assert_eq!(s(total), 3.0);
    }

    #[test]
    fn g_loss_batch_mean() {
        assert_eq!(s(g_loss(&t(&[1.0, 3.0])).unwrap()), -2.0);
    }
}
