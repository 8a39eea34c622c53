use serde::{Deserialize, Serialize};

use super::consistency::{consis_frozen, consis_surrogate, ConsisFrozen, ConsisOptions};
use super::losses::{semi_loss, semi_loss_grad, sharp_loss, sharp_loss_grad, sup_loss, sup_loss_grad};
use super::ProbMap;
use crate::error::{Error, Result};

/// Ablation switches for the unsupervised terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub semi: bool,
    pub mix: bool,
    pub consis: bool,
    pub sharp: bool,
}

impl LossToggles {
    pub const ALL: Self = Self {
        semi: true,
        mix: true,
        consis: true,
        sharp: true,
    };
    pub const NONE: Self = Self {
        semi: false,
        mix: false,
        consis: false,
        sharp: false,
    };

    pub fn any(&self) -> bool {
        self.semi || self.mix || self.consis || self.sharp
    }
}

/// Student predictions and constant targets of one batch. Head lists are
/// ordered top (full resolution) first; patches are concatenated along the
/// voxel axis.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub labeled: &'a ProbMap,
    pub gt: &'a [u8],
    pub unlabeled: &'a [ProbMap],
    pub mixed: &'a [ProbMap],
    pub pseudo: Option<&'a [u8]>,
    pub soft: Option<&'a ProbMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub toggles: LossToggles,
    pub dice_eps: f64,
    pub consis: ConsisOptions,
    /// Ramp-up weight on the sharpening and consistency terms.
    pub lambda: f64,
    /// Weight on the pseudo-label term, 1 unless it is ramped as well.
    pub semi_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup: f64,
    pub l_semi: f64,
    pub l_sharp: f64,
    pub l_consis: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub semi_weight: f64,
}

impl LossReport {
    pub fn new(l_sup: f64, l_semi: f64, l_sharp: f64, l_consis: f64, lambda: f64, semi_weight: f64) -> Self {
        Self {
            l_sup,
            l_semi,
            l_sharp,
            l_consis,
            l_total: l_sup + semi_weight * l_semi + lambda * (l_sharp + l_consis),
            lambda,
            semi_weight,
        }
    }
}

/// Gradients of `l_total` with respect to each supplied probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub labeled: ProbMap,
    pub unlabeled: Vec<ProbMap>,
    pub mixed: Vec<ProbMap>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("loss term {name} is not finite ({v})")))
    }
}

fn axpy(dst: &mut ProbMap, a: f64, src: &ProbMap) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += a * s;
    }
}

pub fn total_loss(inputs: &LossInputs, settings: &LossSettings) -> Result<(LossReport, LossGrads)> {
    total_loss_frozen(inputs, settings, None)
}

/// Like [`total_loss`], with the consistency constants optionally supplied
/// instead of derived from the current predictions.
pub fn total_loss_frozen(
    inputs: &LossInputs,
    settings: &LossSettings,
    frozen: Option<&ConsisFrozen>,
) -> Result<(LossReport, LossGrads)> {
    let t = settings.toggles;
    let eps = settings.dice_eps;
    let zeros = |maps: &[ProbMap]| -> Vec<ProbMap> {
        maps.iter().map(|m| ProbMap::zeros(m.classes(), m.voxels())).collect()
    };
    let mut grads = LossGrads {
        labeled: sup_loss_grad(inputs.labeled, inputs.gt, eps)?,
        unlabeled: zeros(inputs.unlabeled),
        mixed: zeros(inputs.mixed),
    };
    let l_sup = finite("l_sup", sup_loss(inputs.labeled, inputs.gt, eps)?)?;

    let use_mix = t.mix && (t.semi || t.consis);
    if (t.semi || t.consis || t.sharp) && inputs.unlabeled.is_empty() {
        return Err(Error::InvalidArgument("unsupervised terms need unlabeled predictions".into()));
    }
    if use_mix && inputs.mixed.len() != inputs.unlabeled.len() {
        return Err(Error::shape(
            "mixed head count",
            &[inputs.unlabeled.len()],
            &[inputs.mixed.len()],
        ));
    }

    let mut l_semi = 0.0;
    if t.semi {
        let pseudo = inputs
            .pseudo
            .ok_or_else(|| Error::InvalidArgument("pseudo-label term needs pseudo labels".into()))?;
        let u = &inputs.unlabeled[0];
        let w = settings.semi_weight;
        if use_mix {
            let m = &inputs.mixed[0];
            l_semi = semi_loss(u, m, pseudo, eps)?;
            let (gu, gm) = semi_loss_grad(u, m, pseudo, eps)?;
            axpy(&mut grads.unlabeled[0], w, &gu);
            axpy(&mut grads.mixed[0], w, &gm);
        } else {
            l_semi = sup_loss(u, pseudo, eps)?;
            axpy(&mut grads.unlabeled[0], w, &sup_loss_grad(u, pseudo, eps)?);
        }
        finite("l_semi", l_semi)?;
    }

    let mut l_sharp = 0.0;
    if t.sharp {
        let soft = inputs
            .soft
            .ok_or_else(|| Error::InvalidArgument("sharpening term needs soft labels".into()))?;
        let u = &inputs.unlabeled[0];
        l_sharp = finite("l_sharp", sharp_loss(u, soft)?)?;
        axpy(&mut grads.unlabeled[0], settings.lambda, &sharp_loss_grad(u, soft)?);
    }

    let mut l_consis = 0.0;
    if t.consis {
        let n_u = inputs.unlabeled[0].voxels();
        let scales: Vec<ProbMap> = if use_mix {
            inputs
                .unlabeled
                .iter()
                .zip(inputs.mixed)
                .map(|(u, m)| ProbMap::concat(&[u, m]))
                .collect::<Result<_>>()?
        } else {
            inputs.unlabeled.to_vec()
        };
        let refs: Vec<&ProbMap> = scales.iter().collect();
        let owned;
        let frozen = match frozen {
            Some(f) => f,
            None => {
                owned = consis_frozen(&refs)?;
                &owned
            }
        };
        let (value, scale_grads) = consis_surrogate(&refs, frozen, settings.consis)?;
        l_consis = finite("l_consis", value)?;
        for (k, g) in scale_grads.iter().enumerate() {
            if use_mix {
                let parts = g.split(&[n_u, g.voxels() - n_u])?;
                axpy(&mut grads.unlabeled[k], settings.lambda, &parts[0]);
                axpy(&mut grads.mixed[k], settings.lambda, &parts[1]);
            } else {
                axpy(&mut grads.unlabeled[k], settings.lambda, g);
            }
        }
    }

    let report = LossReport::new(l_sup, l_semi, l_sharp, l_consis, settings.lambda, settings.semi_weight);
    finite("l_total", report.l_total)?;
    Ok((report, grads))
}
