//! Training objectives recorded on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{GlksError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which objective terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_mle: bool,
    pub use_ds: bool,
    pub use_mce: bool,
    pub w_mle: f64,
    pub w_ds: f64,
    pub w_mce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_mle: true,
            use_ds: true,
            use_mce: true,
            w_mle: 1.0,
            w_ds: 1.0,
            w_mce: 1.0,
        }
    }
}

impl LossConfig {
    pub fn ds_only() -> Self {
        LossConfig {
            use_mle: false,
            use_mce: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_mle || self.use_ds || self.use_mce) {
            return Err(GlksError::Config(
                "at least one of use_mle, use_ds, use_mce must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// Whether any active term needs the decoder.
    pub fn needs_decoder(&self) -> bool {
        self.use_mle || self.use_mce
    }
}

/// Per-batch loss values. Inactive terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle: f64,
    pub ds: f64,
    pub mce: f64,
    pub total: f64,
}

fn mask_tensor<T: Scalar>(mask: &[bool], rows: usize) -> Result<Tensor<T>> {
    Tensor::new(
        vec![rows, 1],
        mask.iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect(),
    )
}

/// Stacks per-step `[B, n]` distributions time-major and returns the matching
/// time-major reorder of a batch-major `[B, T]` array.
fn time_major<X: Copy>(batch_major: &[X], batch: usize, steps: usize) -> Vec<X> {
    (0..steps * batch)
        .map(|r| batch_major[(r % batch) * steps + r / batch])
        .collect()
}

/// `−(1/M) Σ_b Σ_t log P_t(y_t)` over unmasked steps, `M = batch`.
/// `targets` and `mask` are batch-major `[batch, dists.len()]`.
pub fn mle_loss<T: Scalar>(
    tape: &mut Tape<T>,
    dists: &[Var],
    targets: &[usize],
    mask: &[bool],
    batch: usize,
) -> Result<Var> {
    let steps = dists.len();
    if targets.len() != batch * steps || mask.len() != targets.len() {
        return Err(GlksError::shape(
            "mle_loss",
            &[batch, steps],
            &[targets.len(), mask.len()],
        ));
    }
    let all = tape.concat_rows(dists)?;
    let picked = tape.pick_cols(all, &time_major(targets, batch, steps))?;
    let logp = tape.log_floor(picked, T::of(T::FLOOR));
    let m = tape.constant(
        mask_tensor(&time_major(mask, batch, steps), batch * steps)?.reshape(&[batch * steps])?,
    );
    let masked = tape.mul(logp, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, T::of(-1.0 / batch as f64)))
}

/// `(1/M) Σ_b KL(P_b ‖ Q_b)` for `p: [B, W]` and batch-major `q`. `Q` is
/// floored at 1e-12; positions where `P = 0` contribute nothing.
pub fn ds_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, q: &[f64]) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if tape.value(p).numel() != q.len() {
        return Err(GlksError::shape("ds_loss", &shape, &[q.len()]));
    }
    let batch = shape[0];
    let log_q = Tensor::new(shape, q.iter().map(|&v| T::of(v.max(1e-12).ln())).collect())?;
    let log_q = tape.constant(log_q);
    let log_p = tape.log_floor(p, T::of(T::FLOOR));
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, T::of(1.0 / batch as f64)))
}

/// `(1/M) Σ_b Σ_t Σ_{w∈V} P_t(w) log P_t(w)` over unmasked steps, reading the
/// first `vocab_size` columns of each step distribution.
pub fn mce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    dists: &[Var],
    vocab_size: usize,
    mask: &[bool],
    batch: usize,
) -> Result<Var> {
    let steps = dists.len();
    if mask.len() != batch * steps {
        return Err(GlksError::shape("mce_loss", &[batch, steps], &[mask.len()]));
    }
    let all = tape.concat_rows(dists)?;
    let p = tape.slice_cols(all, 0, vocab_size)?;
    let log_p = tape.log_floor(p, T::of(T::FLOOR));
    let plogp = tape.mul(p, log_p)?;
    let m = tape.constant(mask_tensor(&time_major(mask, batch, steps), batch * steps)?);
    let masked = tape.mul_col(plogp, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, T::of(1.0 / batch as f64)))
}

/// The active terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mle: Option<Var>,
    pub ds: Option<Var>,
    pub mce: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item().as_f64());
        LossBreakdown {
            mle: v(self.mle),
            ds: v(self.ds),
            mce: v(self.mce),
            total: tape.value(self.total).item().as_f64(),
        }
    }
}

/// Weighted sum of the present terms; errors if none is present.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &LossConfig,
    mle: Option<Var>,
    ds: Option<Var>,
    mce: Option<Var>,
) -> Result<LossVars> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for (part, w) in [(mle, cfg.w_mle), (ds, cfg.w_ds), (mce, cfg.w_mce)] {
        let Some(part) = part else { continue };
        let term = if w == 1.0 {
            part
        } else {
            tape.scale(part, T::of(w))
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total =
        total.ok_or_else(|| GlksError::Config("no loss term available to optimise".into()))?;
    Ok(LossVars {
        mle,
        ds,
        mce,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(tape: &mut Tape<f64>, rows: usize, n: usize) -> Var {
        tape.constant(Tensor::full(&[rows, n], 1.0 / n as f64))
    }

    #[test]
    fn mle_fixtures() {
        let mut tape = Tape::new();
        let dists: Vec<Var> = (0..5).map(|_| uniform(&mut tape, 1, 100)).collect();
        let l = mle_loss(&mut tape, &dists, &[3, 7, 9, 1, 0], &[true; 5], 1).unwrap();
        assert!((tape.value(l).item() - 5.0 * 100f64.ln()).abs() < 1e-9);

        let one_hot = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let l = mle_loss(&mut tape, &[one_hot, one_hot], &[1, 1], &[true, true], 1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn mle_respects_mask_and_batch_mean() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap());
        // two episodes, two steps; episode 1's second step is padding
        let l = mle_loss(
            &mut tape,
            &[d, d],
            &[0, 1, 1, 0],
            &[true, true, true, false],
            2,
        )
        .unwrap();
        let expect = -(0.5f64.ln() + 0.5f64.ln() + 0.75f64.ln()) / 2.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ds_fixtures() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap());
        let l = ds_loss(&mut tape, p, &[0.2, 0.3, 0.5]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = ds_loss(&mut tape, p, &[0.5, 0.5]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let p = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let l = ds_loss(&mut tape, p, &[1.0, 0.0]).unwrap();
        assert!(tape.value(l).item().is_finite());
    }

    #[test]
    fn mce_fixtures() {
        let mut tape = Tape::new();
        let d = uniform(&mut tape, 1, 8);
        let l = mce_loss(&mut tape, &[d], 8, &[true], 1).unwrap();
        assert!((tape.value(l).item() + 8f64.ln()).abs() < 1e-12);
        let oh = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap());
        let l = mce_loss(&mut tape, &[oh, oh], 3, &[true, true], 1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // columns past the base vocabulary are ignored
        let ext = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5, 0.0, 0.0]]).unwrap());
        let l = mce_loss(&mut tape, &[ext], 2, &[true], 1).unwrap();
        assert!((tape.value(l).item() + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_combinations() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.5));
        let b = tape.constant(Tensor::scalar(0.25));
        let c = tape.constant(Tensor::scalar(-2.0));
        let all = total_loss(&mut tape, &LossConfig::default(), Some(a), Some(b), Some(c)).unwrap();
        assert_eq!(tape.value(all.total).item(), 1.5 + 0.25 - 2.0);
        let no_ds = total_loss(&mut tape, &LossConfig::default(), Some(a), None, Some(c)).unwrap();
        assert_eq!(tape.value(no_ds.total).item(), -0.5);
        let no_mce = total_loss(&mut tape, &LossConfig::default(), Some(a), Some(b), None).unwrap();
        assert_eq!(tape.value(no_mce.total).item(), 1.75);
        let off = LossConfig {
            use_mle: false,
            use_ds: false,
            use_mce: false,
            ..LossConfig::default()
        };
        assert!(matches!(
            total_loss(&mut tape, &off, Some(a), None, None),
            Err(GlksError::Config(_))
        ));
    }
}
