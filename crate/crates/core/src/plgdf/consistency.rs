use serde::{Deserialize, Serialize};

use super::{ProbMap, PROB_FLOOR};
use crate::error::{Error, Result};

/// Per-voxel distance between a scale and the scale average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    L2,
    SquaredL2,
}

/// How the divergence term is reduced over voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DTerm {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsisOptions {
    pub norm: NormKind,
    pub d_term: DTerm,
}

/// Quantities held constant when differentiating the consistency loss:
/// the log of the floored scale average inside the divergence, and the
/// rectification weights `exp(-D)` normalized over voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsisFrozen {
    pub ln_mean: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

fn check_scales(scales: &[&ProbMap]) -> Result<()> {
    if scales.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least 2 scales, got {}",
            scales.len()
        )));
    }
    for s in &scales[1..] {
        scales[0].check_same_shape(s, "consistency scales")?;
    }
    Ok(())
}

fn mean_of(scales: &[&ProbMap]) -> Vec<f64> {
    let inv = 1.0 / scales.len() as f64;
    let mut m = vec![0.0; scales[0].data().len()];
    for s in scales {
        for (a, b) in m.iter_mut().zip(s.data()) {
            *a += b * inv;
        }
    }
    m
}

/// `D_s^i = sum_j P ln(P / mean)` using a supplied log-mean.
fn divergences(scale: &ProbMap, ln_mean: &[f64]) -> Vec<f64> {
    let n = scale.voxels();
    let mut d = vec![0.0; n];
    for c in 0..scale.classes() {
        for (i, di) in d.iter_mut().enumerate() {
            let p = scale.get(c, i);
            *di += p * (p.max(PROB_FLOOR).ln() - ln_mean[c * n + i]);
        }
    }
    d
}

pub fn consis_frozen(scales: &[&ProbMap]) -> Result<ConsisFrozen> {
    check_scales(scales)?;
    let ln_mean: Vec<f64> = mean_of(scales).iter().map(|m| m.max(PROB_FLOOR).ln()).collect();
    let weights = scales
        .iter()
        .map(|s| {
            let d = divergences(s, &ln_mean);
            let d_min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            // shifting by the minimum leaves the normalized weights unchanged
            let e: Vec<f64> = d.iter().map(|v| (d_min - v).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect();
    Ok(ConsisFrozen { ln_mean, weights })
}

/// Loss value and per-scale gradients with the frozen quantities held fixed.
///
/// When `frozen` was computed from `scales` the value equals
/// [`consis_loss`].
pub fn consis_surrogate(
    scales: &[&ProbMap],
    frozen: &ConsisFrozen,
    opts: ConsisOptions,
) -> Result<(f64, Vec<ProbMap>)> {
    check_scales(scales)?;
    let (classes, n) = (scales[0].classes(), scales[0].voxels());
    if frozen.ln_mean.len() != classes * n || frozen.weights.len() != scales.len() {
        return Err(Error::shape(
            "frozen consistency state",
            &[scales.len(), classes * n],
            &[frozen.weights.len(), frozen.ln_mean.len()],
        ));
    }
    let ns = scales.len() as f64;
    let d_scale = match opts.d_term {
        DTerm::Sum => 1.0,
        DTerm::Mean => 1.0 / n as f64,
    };
    let mean = mean_of(scales);

    // per-scale, per-voxel norm-term gradient direction w * g
    let mut wg: Vec<Vec<f64>> = Vec::with_capacity(scales.len());
    let mut wg_sum = vec![0.0; classes * n];
    let mut value = 0.0;
    for (s, w) in scales.iter().zip(&frozen.weights) {
        let mut g = vec![0.0; classes * n];
        for i in 0..n {
            let mut sq = 0.0;
            for c in 0..classes {
                let r = s.get(c, i) - mean[c * n + i];
                sq += r * r;
            }
            let (dist, scale) = match opts.norm {
                NormKind::L2 => {
                    let norm = sq.sqrt();
                    (norm, if norm > 0.0 { 1.0 / norm } else { 0.0 })
                }
                NormKind::SquaredL2 => (sq, 2.0),
            };
            value += w[i] * dist;
            for c in 0..classes {
                let r = s.get(c, i) - mean[c * n + i];
                g[c * n + i] = w[i] * r * scale;
            }
        }
        value += d_scale * divergences(s, &frozen.ln_mean).iter().sum::<f64>();
        for (a, b) in wg_sum.iter_mut().zip(&g) {
            *a += b;
        }
        wg.push(g);
    }

    let grads = scales
        .iter()
        .zip(wg)
        .map(|(s, g)| {
            let data = g
                .iter()
                .zip(&wg_sum)
                .enumerate()
                .map(|(k, (gq, gs))| {
                    let p = s.data()[k];
                    let d_grad = p.max(PROB_FLOOR).ln() - frozen.ln_mean[k]
                        + if p > PROB_FLOOR { 1.0 } else { 0.0 };
                    (gq - gs / ns) / ns + d_grad * d_scale / ns
                })
                .collect();
            ProbMap::new(classes, n, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value / ns, grads))
}

/// Rectified multi-scale consistency:
/// `(1/n) sum_s [ sum_i w_s^i |P_s^i - mean^i| + reduce_i D_s^i ]`
/// with `w_s^i = exp(-D_s^i) / sum_i exp(-D_s^i)`.
pub fn consis_loss(scales: &[&ProbMap], opts: ConsisOptions) -> Result<f64> {
    let frozen = consis_frozen(scales)?;
    Ok(consis_surrogate(scales, &frozen, opts)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plgdf::losses::tests::{assert_grad, random_probs};
    use proptest::prelude::*;

    fn one(p: f64) -> ProbMap {
        ProbMap::from_rows(&[vec![p, 1.0 - p]]).unwrap()
    }

    #[test]
    fn worked_example() {
        let (a, b) = (one(0.6), one(0.8));
        let d1 = 0.6 * (0.6f64 / 0.7).ln() + 0.4 * (0.4f64 / 0.3).ln();
        let d2 = 0.8 * (0.8f64 / 0.7).ln() + 0.2 * (0.2f64 / 0.3).ln();
        assert!((d1 - 0.02258).abs() < 1e-5 && (d2 - 0.02573).abs() < 1e-5);
        let norm = 0.02f64.sqrt();
        let oracle = 0.5 * ((norm + d1) + (norm + d2));
        let l = consis_loss(&[&a, &b], ConsisOptions::default()).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.16558).abs() / 0.16558 < 1e-4);
        let sq = consis_loss(&[&a, &b], ConsisOptions { norm: NormKind::SquaredL2, d_term: DTerm::Mean }).unwrap();
        assert!((sq - 0.5 * (0.04 + d1 + d2)).abs() < 1e-12);
    }

    #[test]
    fn identical_scales_give_zero() {
        let p = random_probs(3, 10, 1);
        assert!(consis_loss(&[&p, &p, &p, &p], ConsisOptions::default()).unwrap().abs() < 1e-14);
    }

    #[test]
    fn fewer_than_two_scales_is_an_error() {
        let p = random_probs(2, 3, 1);
        assert!(consis_loss(&[&p], ConsisOptions::default()).is_err());
        let q = random_probs(2, 4, 1);
        assert!(consis_loss(&[&p, &q], ConsisOptions::default()).is_err());
    }

    #[test]
    fn disagreement_costs_more_than_near_agreement() {
        let hot = ProbMap::one_hot(&[1, 0, 1], 2);
        let uni = ProbMap::new(2, 3, vec![0.5; 6]).unwrap();
        let a = random_probs(2, 3, 7);
        let mut b = a.clone();
        b.data_mut().iter_mut().enumerate().for_each(|(k, v)| *v += if k < 3 { 1e-3 } else { -1e-3 });
        let opts = ConsisOptions::default();
        assert!(consis_loss(&[&hot, &uni], opts).unwrap() > consis_loss(&[&a, &b], opts).unwrap());
    }

    #[test]
    fn d_term_reduction() {
        let (a, b) = (random_probs(2, 5, 2), random_probs(2, 5, 3));
        let f = consis_frozen(&[&a, &b]).unwrap();
        let d: f64 = [&a, &b].iter().map(|s| divergences(s, &f.ln_mean).iter().sum::<f64>()).sum();
        let opts = |d_term| ConsisOptions { norm: NormKind::L2, d_term };
        let sum = consis_loss(&[&a, &b], opts(DTerm::Sum)).unwrap();
        let mean = consis_loss(&[&a, &b], opts(DTerm::Mean)).unwrap();
        assert!((sum - mean - 0.5 * d * (1.0 - 1.0 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        for (classes, norm, d_term) in [
            (2, NormKind::L2, DTerm::Mean),
            (2, NormKind::SquaredL2, DTerm::Sum),
            (3, NormKind::L2, DTerm::Sum),
            (3, NormKind::SquaredL2, DTerm::Mean),
        ] {
            let opts = ConsisOptions { norm, d_term };
            let scales: Vec<ProbMap> = (0..4).map(|s| random_probs(classes, 8, 40 + s)).collect();
            let refs: Vec<&ProbMap> = scales.iter().collect();
            let frozen = consis_frozen(&refs).unwrap();
            let (_, grads) = consis_surrogate(&refs, &frozen, opts).unwrap();
            for q in 0..4 {
                let f = |x: &ProbMap| {
                    let mut r = refs.clone();
                    r[q] = x;
                    consis_surrogate(&r, &frozen, opts).unwrap().0
                };
                assert_grad(f, &scales[q], &grads[q]);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..500, rot in 1usize..4) {
            let scales: Vec<ProbMap> = (0..4).map(|s| random_probs(3, 6, seed * 4 + s)).collect();
            let a: Vec<&ProbMap> = scales.iter().collect();
            let mut b = a.clone();
            b.rotate_left(rot);
            b.swap(0, 3);
            let la = consis_loss(&a, ConsisOptions::default()).unwrap();
            let lb = consis_loss(&b, ConsisOptions::default()).unwrap();
            prop_assert!((la - lb).abs() < 1e-12 * la.max(1.0));
            prop_assert!(la > 0.0);
        }
    }
}
