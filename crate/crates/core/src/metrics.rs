//! Overlap and surface-distance metrics for label volumes.
//!
//! Undefined values (empty sets or surfaces) are `None` rather than errors
//! and are left out of averages. Multi-class volumes are scored per
//! foreground class and macro-averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Role, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

/// Number of records in which each metric was undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UndefinedCounts {
    pub dice: usize,
    pub jaccard: usize,
    pub hd95: usize,
    pub asd: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub mean: MetricsRecord,
    pub undefined: UndefinedCounts,
}

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("prediction vs ground truth", &gt.dims(), &pred.dims()));
    }
    if pred.role() != Role::Label || gt.role() != Role::Label {
        return Err(Error::InvalidArgument("metrics expect label volumes".into()));
    }
    Ok(())
}

fn mask(v: &Volume, class_id: u8) -> Vec<bool> {
    v.values().iter().map(|&l| l as u8 == class_id).collect()
}

/// Dice and Jaccard of two boolean masks; `None` when both are empty.
pub fn mask_dice_jaccard(pred: &[bool], gt: &[bool]) -> (Option<f64>, Option<f64>) {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return (None, None);
    }
    let dice = 2.0 * both as f64 / (p + g) as f64;
    let jaccard = both as f64 / (p + g - both) as f64;
    (Some(dice), Some(jaccard))
}

pub fn dice_jaccard(pred: &Volume, gt: &Volume, class_id: u8) -> Result<(Option<f64>, Option<f64>)> {
    check_pair(pred, gt)?;
    Ok(mask_dice_jaccard(&mask(pred, class_id), &mask(gt, class_id)))
}

/// Foreground voxels with at least one background 6-neighbour; outside the
/// volume counts as background.
pub fn boundary(m: &[bool], dims: Dims) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; m.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !m[i] {
                    continue;
                }
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !m[i - 1]
                    || !m[i + 1]
                    || !m[i - nx]
                    || !m[i + nx]
                    || !m[i - nx * ny]
                    || !m[i + nx * ny];
            }
        }
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb–Huttenlocher) along one line.
fn edt_line(f: &[f64], s2: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let sect = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if sect <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(sect);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest
/// `true` voxel of `features`, with per-axis spacing.
pub fn squared_edt(features: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let n = voxel_count(dims);
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let s2 = spacing[axis] * spacing[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..n {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            edt_line(&line, s2, &mut out, &mut v, &mut z);
            for (k, &o) in out.iter().enumerate() {
                d[start + k * stride] = o;
            }
        }
    }
    d
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn summarize(mut pooled: Vec<f64>) -> SurfaceDistances {
    pooled.sort_by(|a, b| a.total_cmp(b));
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    SurfaceDistances {
        hd95: percentile(&pooled, 95.0),
        asd,
    }
}

/// Pooled bidirectional surface distances of two masks; `None` when either
/// surface is empty.
pub fn mask_surface_distances(
    pred: &[bool],
    gt: &[bool],
    dims: Dims,
    spacing: [f64; 3],
) -> Option<SurfaceDistances> {
    let sp = boundary(pred, dims);
    let sg = boundary(gt, dims);
    if !sp.contains(&true) || !sg.contains(&true) {
        return None;
    }
    let to_g = squared_edt(&sg, dims, spacing);
    let to_p = squared_edt(&sp, dims, spacing);
    let pooled = sp
        .iter()
        .zip(&to_g)
        .chain(sg.iter().zip(&to_p))
        .filter(|(&on, _)| on)
        .map(|(_, d)| d.sqrt())
        .collect();
    Some(summarize(pooled))
}

pub fn surface_distances(
    pred: &Volume,
    gt: &Volume,
    class_id: u8,
    spacing: [f64; 3],
) -> Result<Option<SurfaceDistances>> {
    check_pair(pred, gt)?;
    Ok(mask_surface_distances(&mask(pred, class_id), &mask(gt, class_id), gt.dims(), spacing))
}

/// Exhaustive pairwise reference for [`mask_surface_distances`].
pub fn mask_brute_force(
    pred: &[bool],
    gt: &[bool],
    dims: Dims,
    spacing: [f64; 3],
) -> Option<SurfaceDistances> {
    let points = |m: &[bool]| -> Vec<[f64; 3]> {
        boundary(m, dims)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| {
                let x = i % dims[0];
                let y = (i / dims[0]) % dims[1];
                let z = i / (dims[0] * dims[1]);
                [x as f64, y as f64, z as f64]
            })
            .collect()
    };
    let (a, b) = (points(pred), points(gt));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] - q[k]) * spacing[k]).powi(2))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let pooled = a
        .iter()
        .map(|p| nearest(p, &b))
        .chain(b.iter().map(|p| nearest(p, &a)))
        .collect();
    Some(summarize(pooled))
}

pub fn brute_force_oracle(
    pred: &Volume,
    gt: &Volume,
    class_id: u8,
    spacing: [f64; 3],
) -> Result<Option<SurfaceDistances>> {
    check_pair(pred, gt)?;
    Ok(mask_brute_force(&mask(pred, class_id), &mask(gt, class_id), gt.dims(), spacing))
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// All four metrics, macro-averaged over foreground classes `1..C`.
pub fn evaluate(pred: &Volume, gt: &Volume, spacing: [f64; 3]) -> Result<MetricsRecord> {
    check_pair(pred, gt)?;
    let classes = gt.class_count().unwrap_or(2).max(pred.class_count().unwrap_or(2));
    let per_class: Vec<MetricsRecord> = (1..classes as u8)
        .map(|c| {
            let (p, g) = (mask(pred, c), mask(gt, c));
            let (dice, jaccard) = mask_dice_jaccard(&p, &g);
            let sd = mask_surface_distances(&p, &g, gt.dims(), spacing);
            MetricsRecord {
                dice,
                jaccard,
                hd95: sd.map(|s| s.hd95),
                asd: sd.map(|s| s.asd),
            }
        })
        .collect();
    Ok(MetricsRecord {
        dice: mean_defined(per_class.iter().map(|r| r.dice)),
        jaccard: mean_defined(per_class.iter().map(|r| r.jaccard)),
        hd95: mean_defined(per_class.iter().map(|r| r.hd95)),
        asd: mean_defined(per_class.iter().map(|r| r.asd)),
    })
}

/// Mean of each metric over the records where it is defined.
pub fn aggregate(records: &[MetricsRecord]) -> MetricsSummary {
    let undef = |f: fn(&MetricsRecord) -> Option<f64>| records.iter().filter(|r| f(r).is_none()).count();
    MetricsSummary {
        count: records.len(),
        mean: MetricsRecord {
            dice: mean_defined(records.iter().map(|r| r.dice)),
            jaccard: mean_defined(records.iter().map(|r| r.jaccard)),
            hd95: mean_defined(records.iter().map(|r| r.hd95)),
            asd: mean_defined(records.iter().map(|r| r.asd)),
        },
        undefined: UndefinedCounts {
            dice: undef(|r| r.dice),
            jaccard: undef(|r| r.jaccard),
            hd95: undef(|r| r.hd95),
            asd: undef(|r| r.asd),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn label(dims: Dims, on: impl Fn(usize, usize, usize) -> bool) -> Volume {
        let mut l = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    l.push(on(x, y, z) as u8);
                }
            }
        }
        Volume::label(dims, [1.0; 3], 2, &l).unwrap()
    }

    fn cube(lo: usize, hi: usize) -> impl Fn(usize, usize, usize) -> bool {
        move |x, y, z| (lo..hi).contains(&x) && (lo..hi).contains(&y) && (lo..hi).contains(&z)
    }

    #[test]
    fn overlap_examples() {
        let a = label([6, 6, 6], cube(1, 4));
        assert_eq!(dice_jaccard(&a, &a, 1).unwrap(), (Some(1.0), Some(1.0)));
        let b = label([6, 6, 6], |x, y, z| x == 5 && y == 5 && z == 5);
        assert_eq!(dice_jaccard(&a, &b, 1).unwrap(), (Some(0.0), Some(0.0)));
        let p = label([8, 2, 1], |x, _, _| x < 4);
        let g = label([8, 2, 1], |x, _, _| x >= 2 && x < 6);
        let (d, j) = dice_jaccard(&p, &g, 1).unwrap();
        assert_eq!(d, Some(0.5));
        assert!((j.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = label([2, 2, 2], |_, _, _| false);
        assert_eq!(dice_jaccard(&empty, &empty, 1).unwrap(), (None, None));
    }

    #[test]
    fn surface_examples() {
        let a = label([6, 6, 6], cube(1, 4));
        let sd = surface_distances(&a, &a, 1, [1.0; 3]).unwrap().unwrap();
        assert_eq!((sd.hd95, sd.asd), (0.0, 0.0));
        let p = label([7, 3, 3], |x, y, z| x == 1 && y == 1 && z == 1);
        let g = label([7, 3, 3], |x, y, z| x == 4 && y == 1 && z == 1);
        let sd = surface_distances(&p, &g, 1, [1.0; 3]).unwrap().unwrap();
        assert_eq!((sd.hd95, sd.asd), (3.0, 3.0));
        let shifted = label([6, 6, 6], cube(2, 5));
        let fast = surface_distances(&a, &shifted, 1, [1.0; 3]).unwrap().unwrap();
        let slow = brute_force_oracle(&a, &shifted, 1, [1.0; 3]).unwrap().unwrap();
        assert_eq!(fast, slow);
        let empty = label([6, 6, 6], |_, _, _| false);
        assert!(surface_distances(&a, &empty, 1, [1.0; 3]).unwrap().is_none());
        assert!(brute_force_oracle(&a, &empty, 1, [1.0; 3]).unwrap().is_none());
        let one = label([3, 3, 3], |x, y, z| x == 1 && y == 1 && z == 1);
        assert_eq!(brute_force_oracle(&one, &one, 1, [1.0; 3]).unwrap().unwrap().hd95, 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let d: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile(&d, 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[2.0], 95.0), 2.0);
    }

    #[test]
    fn edt_matches_brute_force_on_random_features() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dims = [7, 5, 6];
        let spacing = [0.7, 1.3, 2.0];
        let f: Vec<bool> = (0..210).map(|_| rng.gen_bool(0.05)).collect();
        let d = squared_edt(&f, dims, spacing);
        for (i, &di) in d.iter().enumerate() {
            let c = [i % 7, (i / 7) % 5, i / 35];
            let mut best = f64::INFINITY;
            for (j, &on) in f.iter().enumerate() {
                if on {
                    let q = [j % 7, (j / 7) % 5, j / 35];
                    let s: f64 = (0..3).map(|k| ((c[k] as f64 - q[k] as f64) * spacing[k]).powi(2)).sum();
                    best = best.min(s);
                }
            }
            assert!((di - best).abs() < 1e-9, "voxel {i}: {di} vs {best}");
        }
    }

    #[test]
    fn multiclass_macro_average_and_aggregation() {
        let dims = [4, 1, 1];
        let gt = Volume::label(dims, [1.0; 3], 3, &[1, 1, 2, 0]).unwrap();
        let pred = Volume::label(dims, [1.0; 3], 3, &[1, 0, 2, 2]).unwrap();
        let r = evaluate(&pred, &gt, [1.0; 3]).unwrap();
        let d1 = 2.0 / 3.0;
        let d2 = 2.0 / 3.0;
        assert!((r.dice.unwrap() - 0.5 * (d1 + d2)).abs() < 1e-12);
        let empty = Volume::label(dims, [1.0; 3], 3, &[0; 4]).unwrap();
        let r0 = evaluate(&empty, &gt, [1.0; 3]).unwrap();
        assert_eq!(r0.dice, Some(0.0));
        assert_eq!(r0.hd95, None);
        let s = aggregate(&[r, r0]);
        assert_eq!(s.count, 2);
        assert_eq!(s.undefined.hd95, 1);
        assert!((s.mean.dice.unwrap() - 0.5 * (r.dice.unwrap() + 0.0)).abs() < 1e-12);
        assert_eq!(s.mean.hd95, r.hd95);
    }

    fn mask_strategy() -> impl Strategy<Value = (Dims, Vec<bool>, Vec<bool>)> {
        (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(x, y, z)| {
            let n = x * y * z;
            (
                Just([x, y, z]),
                prop::collection::vec(prop::bool::weighted(0.4), n),
                prop::collection::vec(prop::bool::weighted(0.4), n),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_spacing_scaled((dims, p, g) in mask_strategy(), s in 0.25f64..3.0) {
            let spacing = [s, 1.0, 0.5 * s];
            let a = mask_surface_distances(&p, &g, dims, spacing);
            let b = mask_surface_distances(&g, &p, dims, spacing);
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a.hd95 - b.hd95).abs() < 1e-9 && (a.asd - b.asd).abs() < 1e-9);
                let doubled = mask_surface_distances(&p, &g, dims, spacing.map(|v| 2.0 * v)).unwrap();
                prop_assert_eq!(doubled.hd95, 2.0 * a.hd95);
                prop_assert_eq!(doubled.asd, 2.0 * a.asd);
            }
        }

        #[test]
        fn jaccard_dice_identity((_dims, p, g) in mask_strategy()) {
            if let (Some(d), Some(j)) = mask_dice_jaccard(&p, &g) {
                prop_assert!((j - d / (2.0 - d)).abs() < 1e-9);
            }
        }

        #[test]
        fn growing_difference_never_raises_dice((_dims, p, g) in mask_strategy(), k in 0usize..512) {
            let mut q = p.clone();
            let i = k % q.len();
            if q[i] == g[i] {
                q[i] = !q[i];
                if let (Some(before), Some(after)) = (mask_dice_jaccard(&p, &g).0, mask_dice_jaccard(&q, &g).0) {
                    prop_assert!(after <= before + 1e-15);
                }
            }
        }

        #[test]
        fn translation_invariant((dims, p, g) in mask_strategy()) {
            // embed both masks away from the border at two offsets
            let big = dims.map(|d| d + 4);
            let place = |m: &[bool], o: [usize; 3]| {
                let mut out = vec![false; voxel_count(big)];
                for z in 0..dims[2] { for y in 0..dims[1] { for x in 0..dims[0] {
                    out[(x + o[0]) + big[0] * ((y + o[1]) + big[1] * (z + o[2]))] =
                        m[x + dims[0] * (y + dims[1] * z)];
                }}}
                out
            };
            let a = mask_surface_distances(&place(&p, [1, 1, 1]), &place(&g, [1, 1, 1]), big, [1.0; 3]);
            let b = mask_surface_distances(&place(&p, [3, 2, 3]), &place(&g, [3, 2, 3]), big, [1.0; 3]);
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a.hd95 - b.hd95).abs() < 1e-12 && (a.asd - b.asd).abs() < 1e-12);
            }
            prop_assert_eq!(mask_dice_jaccard(&place(&p, [1, 1, 1]), &place(&g, [1, 1, 1])),
                            mask_dice_jaccard(&place(&p, [3, 2, 3]), &place(&g, [3, 2, 3])));
        }
    }
}
