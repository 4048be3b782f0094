//! Segmentation losses on sigmoid probabilities.
//!
//! The default combines mean binary cross-entropy with a soft Dice term:
//! `BC(p, t) - D(p, t) + 1`. Reductions run over every element of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[δ, 1 - δ]` inside the logarithms.
pub const CLAMP_DELTA: f64 = 1e-7;
/// Additive smoothing in the soft Dice numerator and denominator.
pub const DICE_SMOOTHING: f64 = 1.0;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    BceDice,
    Bce,
    Dice,
    Focal,
}

fn pairs<'a, T: Element>(pred: &'a Tensor<T>, target: &'a Tensor<T>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.expect_same_shape(target)
        .map_err(|e| Error::Contract(format!("prediction and target shapes differ ({e})")))?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64(), t.as_f64())))
}

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP_DELTA, 1.0 - CLAMP_DELTA)
}

/// Soft Dice `(2·Σpt + ε) / (Σp + Σt + ε)`.
pub fn soft_dice<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let (inter, total) = dice_sums(pred, target)?;
    Ok((2.0 * inter + DICE_SMOOTHING) / (total + DICE_SMOOTHING))
}

fn dice_sums<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, f64)> {
    Ok(pairs(pred, target)?.fold((0.0, 0.0), |(i, s), (p, t)| (i + p * t, s + p + t)))
}

pub fn binary_cross_entropy<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.numel() as f64;
    let total: f64 = pairs(pred, target)?
        .map(|(p, t)| {
            let p = clamp(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

fn focal<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.numel() as f64;
    let total: f64 = pairs(pred, target)?
        .map(|(p, t)| {
            let p = clamp(p);
            -(t * (1.0 - p).powf(FOCAL_GAMMA) * p.ln() + (1.0 - t) * p.powf(FOCAL_GAMMA) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

/// Binary cross-entropy minus soft Dice plus one.
pub fn loss_bce_dice<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    loss_value(pred, target, LossKind::BceDice)
}

pub fn loss_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::BceDice => Ok(binary_cross_entropy(pred, target)? - soft_dice(pred, target)? + 1.0),
        LossKind::Bce => binary_cross_entropy(pred, target),
        LossKind::Dice => Ok(1.0 - soft_dice(pred, target)?),
        LossKind::Focal => focal(pred, target),
    }
}

/// Derivative of the loss with respect to each prediction.
pub(crate) fn loss_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<Tensor<T>> {
    let n = pred.numel() as f64;
    let (inter, total) = dice_sums(pred, target)?;
    let num = 2.0 * inter + DICE_SMOOTHING;
    let den = total + DICE_SMOOTHING;
    let in_clamp = |p: f64| (CLAMP_DELTA..=1.0 - CLAMP_DELTA).contains(&p);
    let bce = |p: f64, t: f64| {
        if in_clamp(p) {
            -(t / p - (1.0 - t) / (1.0 - p)) / n
        } else {
            0.0
        }
    };
    let dice = |t: f64| (2.0 * t * den - num) / (den * den);
    let focal = |p: f64, t: f64| {
        if !in_clamp(p) {
            return 0.0;
        }
        let g = FOCAL_GAMMA;
        let pos = g * (1.0 - p).powf(g - 1.0) * p.ln() - (1.0 - p).powf(g) / p;
        let neg = -g * p.powf(g - 1.0) * (1.0 - p).ln() + p.powf(g) / (1.0 - p);
        (t * pos + (1.0 - t) * neg) / n
    };
    let data = pairs(pred, target)?
        .map(|(p, t)| {
            let d = match kind {
                LossKind::BceDice => bce(p, t) - dice(t),
                LossKind::Bce => bce(p, t),
                LossKind::Dice => -dice(t),
                LossKind::Focal => focal(p, t),
            };
            T::from_f64(d)
        })
        .collect();
    Tensor::new(pred.shape(), data)
}

/// Derivative of the loss with respect to the logits `z` of `pred = sigmoid(z)`,
/// without the probability clamp.
pub(crate) fn loss_grad_logits<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<Tensor<T>> {
    let n = pred.numel() as f64;
    let (inter, total) = dice_sums(pred, target)?;
    let num = 2.0 * inter + DICE_SMOOTHING;
    let den = total + DICE_SMOOTHING;
    let dice = |p: f64, t: f64| (2.0 * t * den - num) / (den * den) * p * (1.0 - p);
    let focal = |p: f64, t: f64| {
        let g = FOCAL_GAMMA;
        let pos = g * p * (1.0 - p).powf(g) * p.ln() - (1.0 - p).powf(g + 1.0);
        let neg = p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * (1.0 - p).ln();
        (t * pos + (1.0 - t) * neg) / n
    };
    let data = pairs(pred, target)?
        .map(|(p, t)| {
            let d = match kind {
                LossKind::BceDice => (p - t) / n - dice(p, t),
                LossKind::Bce => (p - t) / n,
                LossKind::Dice => -dice(p, t),
                LossKind::Focal => focal(p, t),
            };
            T::from_f64(d)
        })
        .collect();
    Tensor::new(pred.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_ones_closed_form() {
        let pred = Tensor::<f64>::full(&[1, 1, 4, 16, 16], 0.5);
        let target = Tensor::from_fn(&[1, 1, 4, 16, 16], |i| (i % 2) as f64);
        let v = 1024.0;
        let expected = 2f64.ln() - (0.5 * v + 1.0) / (v + 1.0) + 1.0;
        let got = loss_bce_dice(&pred, &target).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - (2f64.ln() + 0.5)).abs() < 1e-3);
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let target = Tensor::from_fn(&[1, 1, 2, 8, 8], |i| ((i / 3) % 2) as f64);
        let pred = target.map(|t| if t > 0.5 { 1.0 - CLAMP_DELTA } else { CLAMP_DELTA });
        let l = loss_bce_dice(&pred, &target).unwrap();
        assert!((0.0..1e-3).contains(&l), "{l}");
    }

    #[test]
    fn empty_target_is_finite() {
        let target = Tensor::<f32>::zeros(&[1, 1, 2, 4, 4]);
        let pred = Tensor::full(&[1, 1, 2, 4, 4], 1e-7f32);
        let bce = binary_cross_entropy(&pred, &target).unwrap();
        let l = loss_bce_dice(&pred, &target).unwrap();
        assert!(l.is_finite());
        // Dice = ε / (Σp + ε) ≈ 1 with ε = 1 and Σp ≈ 3e-6, so the loss ≈ BC.
        let d = soft_dice(&pred, &target).unwrap();
        assert!((l - (bce - d + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = Tensor::<f32>::zeros(&[2, 2]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(loss_bce_dice(&a, &b), Err(Error::Contract(_))));
    }
}
