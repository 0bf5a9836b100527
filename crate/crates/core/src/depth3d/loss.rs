use candle_core::Tensor;

use crate::error::{Error, Result};

/// Smoothing added to overlap-ratio numerators and denominators.
pub const EPS_SMOOTH: f64 = 1e-5;
/// Probability clamp used by the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-6;

fn check_same(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            p.dims(),
            g.dims()
        )));
    }
    Ok(())
}

/// `1 − (TP + ε) / (TP + α·FP + β·FN + ε)` over all elements.
pub fn tversky_loss(p: &Tensor, g: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    check_same(p, g)?;
    let tp = (p * g)?.sum_all()?;
    let fp = (p * (1.0 - g)?)?.sum_all()?;
    let fn_ = ((1.0 - p)? * g)?.sum_all()?;
    let den = (((&tp + (fp * alpha)?)? + (fn_ * beta)?)? + EPS_SMOOTH)?;
    Ok((1.0 - ((tp + EPS_SMOOTH)? / den)?)?)
}

/// Soft Dice loss `1 − (TP + ε) / ((Σp + Σg)/2 + ε)`, which is the Tversky
/// loss at `α = β = 1/2` with the same smoothing.
pub fn soft_dice_loss(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_same(p, g)?;
    let tp = (p * g)?.sum_all()?;
    let half = ((p.sum_all()? + g.sum_all()?)? * 0.5)?;
    Ok((1.0 - ((tp + EPS_SMOOTH)? / (half + EPS_SMOOTH)?)?)?)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-6, 1 − 1e-6]`.
pub fn bce_loss(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_same(p, g)?;
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let l = ((g * pc.log()?)? + ((1.0 - g)? * (1.0 - &pc)?.log()?)?)?;
    Ok(l.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct Loss3d {
    pub total: Tensor,
    pub bce: Tensor,
    pub tversky: Tensor,
}

pub const TVERSKY_ALPHA: f64 = 0.7;
pub const TVERSKY_BETA: f64 = 0.3;

pub fn loss_3d(p: &Tensor, g: &Tensor) -> Result<Loss3d> {
    let bce = bce_loss(p, g)?;
    let tversky = tversky_loss(p, g, TVERSKY_ALPHA, TVERSKY_BETA)?;
    Ok(Loss3d {
        total: (&bce + &tversky)?,
        bce,
        tversky,
    })
}

/// Mean binary cross-entropy from logits, `max(x,0) − x·g + ln(1 + e^−|x|)`.
/// Equal to [`bce_loss`] on `σ(x)` while `σ(x)` stays inside the clamp, but
/// its gradient `σ(x) − g` survives saturation, where the clamped form has
/// none.
pub fn bce_with_logits(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_same(x, g)?;
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((x.relu()? - (x * g)?)? + softplus)?;
    Ok(l.mean_all()?)
}

/// [`loss_3d`] evaluated on logits; used for training.
pub fn loss_3d_from_logits(x: &Tensor, g: &Tensor) -> Result<Loss3d> {
    let bce = bce_with_logits(x, g)?;
    let p = candle_nn::ops::sigmoid(x)?;
    let tversky = tversky_loss(&p, g, TVERSKY_ALPHA, TVERSKY_BETA)?;
    Ok(Loss3d {
        total: (&bce + &tversky)?,
        bce,
        tversky,
    })
}
