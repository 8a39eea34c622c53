use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ProbMap;
use crate::error::{Error, Result};
use crate::volume::{Role, Volume};

/// Adds `clamp(N(0, sigma), -clip, clip)` to every voxel.
pub fn add_noise(patch: &Volume, sigma: f64, clip: f64, rng: &mut impl Rng) -> Result<Volume> {
    if !(sigma >= 0.0) || !(clip >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise needs sigma >= 0 and clip >= 0, got {sigma}, {clip}"
        )));
    }
    let mut out = patch.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for v in out.values_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += (sigma * z).clamp(-clip, clip) as f32;
    }
    Ok(out)
}

/// Argmax of the mean of two teacher maps (lowest class wins ties).
pub fn make_pseudo_label(first: &ProbMap, second: &ProbMap) -> Result<Vec<u8>> {
    first.check_same_shape(second, "pseudo-label inputs")?;
    let n = first.voxels();
    let classes = first.classes();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_p = 0.5 * (first.get(0, i) + second.get(0, i));
            for c in 1..classes {
                let p = 0.5 * (first.get(c, i) + second.get(c, i));
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            best as u8
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub mix_alpha: f64,
    pub lambda_raw: f64,
    /// `max(lambda_raw, 1 - lambda_raw)`, the weight on the unlabeled patch.
    pub lambda_eff: f64,
}

pub fn sample_mix_lambda(mix_alpha: f64, rng: &mut impl Rng) -> Result<MixParams> {
    let beta = Beta::new(mix_alpha, mix_alpha).map_err(|e| {
        Error::InvalidArgument(format!("invalid mix_alpha {mix_alpha}: {e}"))
    })?;
    let lambda_raw: f64 = beta.sample(rng);
    Ok(MixParams {
        mix_alpha,
        lambda_raw,
        lambda_eff: lambda_raw.max(1.0 - lambda_raw),
    })
}

/// Blends with a given raw mixing coefficient.
pub fn mix_with_lambda(
    unlabeled: &Volume,
    labeled: &Volume,
    mix_alpha: f64,
    lambda_raw: f64,
) -> Result<(Volume, MixParams)> {
    if unlabeled.dims() != labeled.dims() || unlabeled.channels() != labeled.channels() {
        return Err(Error::shape("mix inputs", &unlabeled.dims(), &labeled.dims()));
    }
    if unlabeled.role() != Role::Image || labeled.role() != Role::Image {
        return Err(Error::InvalidArgument("mix expects two image volumes".into()));
    }
    if !(0.0..=1.0).contains(&lambda_raw) {
        return Err(Error::InvalidArgument(format!(
            "mixing coefficient {lambda_raw} outside [0, 1]"
        )));
    }
    let params = MixParams {
        mix_alpha,
        lambda_raw,
        lambda_eff: lambda_raw.max(1.0 - lambda_raw),
    };
    let w = params.lambda_eff;
    let mut out = labeled.clone();
    for (o, &u) in out.values_mut().iter_mut().zip(unlabeled.values()) {
        // l + w (u - l) in f64 stays within [min, max] after rounding
        let l = *o as f64;
        *o = (l + w * (u as f64 - l)) as f32;
    }
    Ok((out, params))
}

/// Mix-up weighted towards the unlabeled patch: draws `lambda ~ Beta(a, a)`
/// and returns `lambda' * unlabeled + (1 - lambda') * labeled` with
/// `lambda' = max(lambda, 1 - lambda)`.
pub fn mix(
    unlabeled: &Volume,
    labeled: &Volume,
    mix_alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Volume, MixParams)> {
    let p = sample_mix_lambda(mix_alpha, rng)?;
    mix_with_lambda(unlabeled, labeled, mix_alpha, p.lambda_raw)
}
