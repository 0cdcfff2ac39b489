//! Soft dice losses with closed-form gradients. Everything is generic over
//! the engine scalar so the same code runs in f32 for training and f64 for
//! gradient checks.

use suseg_nn::Float;

use crate::{Error, Result};

/// Smoothing added to numerator and denominator of the soft dice.
pub const DICE_EPS: f64 = 1e-5;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("loss shape mismatch: {a} vs {b} elements")));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` and its gradient w.r.t. `pred`.
pub fn dice_loss_grad<T: Float>(pred: &[T], gt: &[T]) -> Result<(T, Vec<T>)> {
    same_len(pred.len(), gt.len())?;
    let eps = T::from_f64(DICE_EPS);
    let two = T::from_f64(2.0);
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = two * inter + eps;
    let den = sp + sg + eps;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = gt.iter().map(|&g| -(two * g * den - num) / den2).collect();
    Ok((loss, grad))
}

pub fn dice_loss<T: Float>(pred: &[T], gt: &[T]) -> Result<T> {
    dice_loss_grad(pred, gt).map(|(l, _)| l)
}

/// Deep-supervision objective: dice of the main output plus, when present,
/// the dice of each upsampled subscale output, all weighted 1.
pub struct IsNetLoss<T> {
    pub value: T,
    pub main_grad: Vec<T>,
    pub sub_grads: Vec<Vec<T>>,
}

pub fn isnet_loss<T: Float>(main: &[T], subs: &[&[T]], gt: &[T]) -> Result<IsNetLoss<T>> {
    let (mut value, main_grad) = dice_loss_grad(main, gt)?;
    let mut sub_grads = Vec::with_capacity(subs.len());
    for s in subs {
        let (l, g) = dice_loss_grad(s, gt)?;
        value += l;
        sub_grads.push(g);
    }
    Ok(IsNetLoss {
        value,
        main_grad,
        sub_grads,
    })
}

/// Two-class (foreground/background) generalized dice loss with class
/// weights `1 / (sum g_c)^2`; a class with no ground-truth mass gets weight 0.
pub fn generalized_dice_loss_grad<T: Float>(pred: &[T], gt: &[T]) -> Result<(T, Vec<T>)> {
    same_len(pred.len(), gt.len())?;
    let one = T::one();
    let two = T::from_f64(2.0);
    let (mut gf, mut gb) = (T::zero(), T::zero());
    let (mut inter_f, mut inter_b) = (T::zero(), T::zero());
    let (mut sum_f, mut sum_b) = (T::zero(), T::zero());
    for (&p, &g) in pred.iter().zip(gt) {
        gf += g;
        gb += one - g;
        inter_f += p * g;
        inter_b += (one - p) * (one - g);
        sum_f += p + g;
        sum_b += (one - p) + (one - g);
    }
    let weight = |mass: T| {
        if mass > T::zero() {
            one / (mass * mass)
        } else {
            T::zero()
        }
    };
    let (wf, wb) = (weight(gf), weight(gb));
    let num = wf * inter_f + wb * inter_b;
    let den = wf * sum_f + wb * sum_b;
    if den <= T::zero() {
        return Err(Error::Data("generalized dice: empty input".into()));
    }
    let loss = one - two * num / den;
    let dden = wf - wb;
    let grad = gt
        .iter()
        .map(|&g| {
            let dnum = wf * g - wb * (one - g);
            -two * (dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

pub fn generalized_dice_loss<T: Float>(pred: &[T], gt: &[T]) -> Result<T> {
    generalized_dice_loss_grad(pred, gt).map(|(l, _)| l)
}
