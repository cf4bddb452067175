//! Output heads and losses.

use crate::autograd::{Tensor, Var};
use crate::config::ItemLoss;
use crate::error::{Error, Result};
use crate::scope::Scope;

pub const PROB_FLOOR: f64 = 1e-12;

/// Logits `x · tableᵀ` and their softmax, both `[1, rows(table)]`.
pub fn score_against(s: &mut Scope<'_, '_>, x: Var, table: usize) -> Result<(Var, Var)> {
    let logits = s.linear(x, table)?;
    let probs = s.tape.softmax(logits, None)?;
    Ok((logits, probs))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `-Σ_i [w_i y_i log p_i + (1 - y_i) log(1 - p_i)]` for a one-hot `y`,
/// with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn binary_sum_loss(s: &mut Scope<'_, '_>, probs: Var, target: usize, positive_weight: &[f64]) -> Result<Var> {
    let n = s.tape.shape(probs)[1];
    if target >= n || positive_weight.len() != n {
        return Err(Error::shape("binary_sum_loss", format!("target {target}, {} weights over {n}", positive_weight.len())));
    }
    let mut pos = vec![0.0; n];
    pos[target] = positive_weight[target];
    let mut neg = vec![1.0; n];
    neg[target] = 0.0;
    let p = s.tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lp = s.tape.log(p)?;
    let q = s.tape.affine(p, -1.0, 1.0)?;
    let lq = s.tape.log(q)?;
    let pos = s.tape.constant(Tensor::row(pos));
    let neg = s.tape.constant(Tensor::row(neg));
    let a = s.tape.dot(pos, lp)?;
    let b = s.tape.dot(neg, lq)?;
    let sum = s.tape.add(a, b)?;
    s.tape.scalar_mul(sum, -1.0)
}

/// `-log p_target` with the same clamp.
pub fn categorical_loss(s: &mut Scope<'_, '_>, probs: Var, target: usize) -> Result<Var> {
    let n = s.tape.shape(probs)[1];
    if target >= n {
        return Err(Error::shape("categorical_loss", format!("target {target} over {n}")));
    }
    let mut y = vec![0.0; n];
    y[target] = 1.0;
    let p = s.tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lp = s.tape.log(p)?;
    let y = s.tape.constant(Tensor::row(y));
    let l = s.tape.dot(y, lp)?;
    s.tape.scalar_mul(l, -1.0)
}

pub fn item_loss(s: &mut Scope<'_, '_>, probs: Var, target: usize, kind: ItemLoss) -> Result<Var> {
    match kind {
        ItemLoss::BinarySum => {
            let n = s.tape.shape(probs)[1];
            binary_sum_loss(s, probs, target, &vec![1.0; n])
        }
        ItemLoss::Categorical => categorical_loss(s, probs, target),
    }
}

/// Behavior loss; `lambda` weights only the positive term.
pub fn behavior_loss(s: &mut Scope<'_, '_>, probs: Var, target: usize, lambda: &[f64]) -> Result<Var> {
    binary_sum_loss(s, probs, target, lambda)
}
