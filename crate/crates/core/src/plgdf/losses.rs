use super::ProbMap;
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_target(probs: &ProbMap, target: &[u8], context: &'static str) -> Result<()> {
    if target.len() != probs.voxels() {
        return Err(Error::shape(context, &[probs.voxels()], &[target.len()]));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= probs.classes()) {
        return Err(Error::InvalidArgument(format!(
            "{context}: label {bad} outside {} classes",
            probs.classes()
        )));
    }
    Ok(())
}

/// Mean over voxels of `-ln max(p[target], 1e-12)`.
pub fn ce_loss(probs: &ProbMap, target: &[u8]) -> Result<f64> {
    check_target(probs, target, "cross-entropy target")?;
    let n = probs.voxels();
    let sum: f64 = target
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.get(t as usize, i).max(PROB_FLOOR).ln())
        .sum();
    Ok(sum / n as f64)
}

pub fn ce_loss_grad(probs: &ProbMap, target: &[u8]) -> Result<ProbMap> {
    check_target(probs, target, "cross-entropy target")?;
    let n = probs.voxels();
    let mut g = ProbMap::zeros(probs.classes(), n);
    for (i, &t) in target.iter().enumerate() {
        let p = probs.get(t as usize, i);
        if p > PROB_FLOOR {
            g.data_mut()[t as usize * n + i] = -1.0 / (n as f64 * p);
        }
    }
    Ok(g)
}

/// Soft Dice over the foreground classes `1..C`, averaged:
/// `1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)`.
pub fn dice_loss(probs: &ProbMap, target: &[u8], eps: f64) -> Result<f64> {
    check_target(probs, target, "dice target")?;
    let classes = probs.classes();
    let mut total = 0.0;
    for c in 1..classes {
        let (inter, denom) = dice_sums(probs, target, c);
        total += 1.0 - (2.0 * inter + eps) / (denom + eps);
    }
    Ok(total / (classes - 1).max(1) as f64)
}

fn dice_sums(probs: &ProbMap, target: &[u8], c: usize) -> (f64, f64) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let p = probs.get(c, i);
        let g = (t as usize == c) as u8 as f64;
        inter += p * g;
        denom += p * p + g;
    }
    (inter, denom)
}

pub fn dice_loss_grad(probs: &ProbMap, target: &[u8], eps: f64) -> Result<ProbMap> {
    check_target(probs, target, "dice target")?;
    let (classes, n) = (probs.classes(), probs.voxels());
    let mut grad = ProbMap::zeros(classes, n);
    let k = 1.0 / (classes - 1).max(1) as f64;
    for c in 1..classes {
        let (inter, denom) = dice_sums(probs, target, c);
        let s = denom + eps;
        let num = 2.0 * inter + eps;
        for (i, &t) in target.iter().enumerate() {
            let g = (t as usize == c) as u8 as f64;
            let p = probs.get(c, i);
            grad.data_mut()[c * n + i] = -k * (2.0 * g * s - num * 2.0 * p) / (s * s);
        }
    }
    Ok(grad)
}

/// `0.5 * CE + 0.5 * Dice`.
pub fn sup_loss(probs: &ProbMap, target: &[u8], eps: f64) -> Result<f64> {
    Ok(0.5 * ce_loss(probs, target)? + 0.5 * dice_loss(probs, target, eps)?)
}

pub fn sup_loss_grad(probs: &ProbMap, target: &[u8], eps: f64) -> Result<ProbMap> {
    let mut g = ce_loss_grad(probs, target)?;
    g.add_assign(&dice_loss_grad(probs, target, eps)?);
    g.scale(0.5);
    Ok(g)
}

/// Supervised-style loss of both the unlabeled and the mixed prediction
/// against the same pseudo label.
pub fn semi_loss(probs_u: &ProbMap, probs_mix: &ProbMap, pseudo: &[u8], eps: f64) -> Result<f64> {
    probs_u.check_same_shape(probs_mix, "semi-supervised predictions")?;
    Ok(sup_loss(probs_u, pseudo, eps)? + sup_loss(probs_mix, pseudo, eps)?)
}

/// Gradients with respect to `probs_u` and `probs_mix`.
pub fn semi_loss_grad(
    probs_u: &ProbMap,
    probs_mix: &ProbMap,
    pseudo: &[u8],
    eps: f64,
) -> Result<(ProbMap, ProbMap)> {
    probs_u.check_same_shape(probs_mix, "semi-supervised predictions")?;
    Ok((sup_loss_grad(probs_u, pseudo, eps)?, sup_loss_grad(probs_mix, pseudo, eps)?))
}

/// Mean squared difference over all voxels and channels.
pub fn sharp_loss(probs: &ProbMap, soft: &ProbMap) -> Result<f64> {
    probs.check_same_shape(soft, "sharpening target")?;
    let m = probs.data().len().max(1) as f64;
    Ok(probs
        .data()
        .iter()
        .zip(soft.data())
        .map(|(p, s)| (p - s) * (p - s))
        .sum::<f64>()
        / m)
}

pub fn sharp_loss_grad(probs: &ProbMap, soft: &ProbMap) -> Result<ProbMap> {
    probs.check_same_shape(soft, "sharpening target")?;
    let m = probs.data().len().max(1) as f64;
    let data = probs
        .data()
        .iter()
        .zip(soft.data())
        .map(|(p, s)| 2.0 * (p - s) / m)
        .collect();
    ProbMap::new(probs.classes(), probs.voxels(), data)
}
