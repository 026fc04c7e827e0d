//! Class-balanced cross-entropy with deep supervision.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-6;

/// Number of side outputs supervised alongside the fused map.
pub const SIDE_OUTPUTS: usize = 6;

/// Per-image class weights: `alpha` scales the edge term, `beta` the
/// background term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    /// `alpha = |Y-| / |Y|`, `beta = |Y+| / |Y|`. When one class is absent the
    /// surviving term gets weight 1.
    pub fn from_gt<T: Real>(gt: &Tensor<T>) -> Self {
        let n = gt.len();
        let pos = gt.data().iter().filter(|v| v.f64() > 0.5).count();
        let neg = n - pos;
        if pos == 0 {
            return Self {
                alpha: 0.0,
                beta: 1.0,
            };
        }
        if neg == 0 {
            return Self {
                alpha: 1.0,
                beta: 0.0,
            };
        }
        Self {
            alpha: neg as f64 / n as f64,
            beta: pos as f64 / n as f64,
        }
    }
}

/// Rejects ground truth that is not (numerically) binary.
pub fn check_binary<T: Real>(gt: &Tensor<T>) -> Result<()> {
    match gt.data().iter().position(|v| {
        let v = v.f64();
        v.abs() > 1e-6 && (v - 1.0).abs() > 1e-6
    }) {
        Some(i) => Err(Error::Data(format!(
            "ground truth value {} at index {i} is not binary",
            gt.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Balanced BCE between a probability map on the tape and a binary map.
pub fn balanced_bce<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape(
            "balanced_bce",
            format!(
                "prediction {:?} vs ground truth {:?}",
                tape.shape(pred),
                gt.shape()
            ),
        ));
    }
    let w = LossWeights::from_gt(gt);
    let g = tape.constant(gt.clone());
    tape.balanced_bce(pred, g, w.alpha, w.beta, PROB_CLAMP)
}

/// Per-term breakdown of [`total_loss`].
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub sides: [Var; SIDE_OUTPUTS],
    pub fused: Var,
}

/// Sum of the six side-output losses and the fused-output loss.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    sides: &[Var],
    fused: Var,
    gt: &Tensor<T>,
) -> Result<TotalLoss> {
    if sides.len() != SIDE_OUTPUTS {
        return Err(Error::Contract(format!(
            "expected {SIDE_OUTPUTS} side maps, got {}",
            sides.len()
        )));
    }
    let mut terms = [fused; SIDE_OUTPUTS];
    for (t, &s) in terms.iter_mut().zip(sides) {
        *t = balanced_bce(tape, s, gt)?;
    }
    let fused_term = balanced_bce(tape, fused, gt)?;
    let mut total = fused_term;
    for &t in &terms {
        total = tape.add(total, t)?;
    }
    Ok(TotalLoss {
        total,
        sides: terms,
        fused: fused_term,
    })
}

/// Loss value without recording gradients.
pub fn balanced_bce_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = balanced_bce(&mut tape, p, gt)?;
    Ok(tape.value(l).data()[0].f64())
}
