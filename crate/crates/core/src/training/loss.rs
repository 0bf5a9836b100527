use candle_core::Tensor;

use crate::depth3d::EPS_SMOOTH;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Loss2d {
    pub total: Tensor,
    pub ce: Tensor,
    pub dice: Tensor,
}

/// Pixelwise two-class cross-entropy plus soft Dice on the foreground
/// softmax channel. `logits`: `(B, 2, S, S)`; `target`: `(B, S, S)` of 0/1 in
/// the logits' dtype. Dice is `1 − (2Σpg + ε)/(Σp² + Σg² + ε)` with sums
/// over the whole batch, so slices without foreground do not saturate it.
pub fn loss_2d(logits: &Tensor, target: &Tensor) -> Result<Loss2d> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 || target.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "logits {:?} do not match target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let lp0 = logp.narrow(1, 0, 1)?.squeeze(1)?;
    let lp1 = logp.narrow(1, 1, 1)?.squeeze(1)?;
    let ce = ((target * &lp1)? + ((1.0 - target)? * &lp0)?)?.mean_all()?.neg()?;
    let p = lp1.exp()?;
    let inter = (&p * target)?.sum_all()?;
    let den = ((p.sqr()?.sum_all()? + target.sqr()?.sum_all()?)? + EPS_SMOOTH)?;
    let ratio = (((inter * 2.0)? + EPS_SMOOTH)? / den)?;
    let dice = (1.0 - ratio)?;
    Ok(Loss2d {
        total: (&ce + &dice)?,
        ce,
        dice,
    })
}
