use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, Role, Volume};

/// Clamps intensities to `[lo, hi]` and rescales them to `[0, 1]`.
pub fn clip_and_normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "clip window requires lo < hi, got [{lo}, {hi}]"
        )));
    }
    if v.role() != Role::Image {
        return Err(Error::InvalidArgument(format!(
            "clip_and_normalize expects an image volume, got {:?}",
            v.role()
        )));
    }
    let dims = v.dims();
    let range = hi - lo;
    let mut out = Vec::with_capacity(v.voxels());
    for (i, &x) in v.values().iter().enumerate() {
        if !x.is_finite() {
            let xi = i % dims[0];
            let yi = (i / dims[0]) % dims[1];
            let zi = i / (dims[0] * dims[1]);
            return Err(Error::NonFiniteVoxel {
                index: [xi, yi, zi],
                value: x,
            });
        }
        out.push((x.clamp(lo, hi) - lo) / range);
    }
    Volume::image(dims, v.spacing(), out)
}

/// Source coordinates and weights along one axis (origin-aligned grids).
fn axis_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = (o as f64 * ratio).min((n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples to an isotropic grid of `target` millimetres.
///
/// Output voxel `o` sits at physical offset `o * target` from the first
/// voxel centre. Images and probabilities are interpolated trilinearly,
/// labels by nearest neighbour.
pub fn resample_isotropic(v: &Volume, target: f64) -> Result<Volume> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target}"
        )));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let mut out_dims: Dims = [0; 3];
    for a in 0..3 {
        out_dims[a] = (dims[a] as f64 * spacing[a] / target).round() as usize;
        if out_dims[a] == 0 {
            return Err(Error::InvalidArgument(format!(
                "resampling axis {a} ({} voxels at {} mm) to {target} mm leaves no voxels",
                dims[a], spacing[a]
            )));
        }
    }
    let taps: Vec<_> = (0..3)
        .map(|a| axis_taps(dims[a], out_dims[a], target / spacing[a]))
        .collect();
    let n_in = voxel_count(dims);
    let n_out = voxel_count(out_dims);
    let channels = v.channels();
    let mut out = vec![0f32; n_out * channels];
    let src = v.values();

    if v.role() == Role::Label {
        let nearest = |t: &(usize, usize, f64)| if t.2 >= 0.5 { t.1 } else { t.0 };
        for z in 0..out_dims[2] {
            let zs = nearest(&taps[2][z]);
            for y in 0..out_dims[1] {
                let ys = nearest(&taps[1][y]);
                for x in 0..out_dims[0] {
                    let xs = nearest(&taps[0][x]);
                    out[linear_index(out_dims, x, y, z)] = src[linear_index(dims, xs, ys, zs)];
                }
            }
        }
    } else {
        for c in 0..channels {
            let s = &src[c * n_in..(c + 1) * n_in];
            let o = &mut out[c * n_out..(c + 1) * n_out];
            for z in 0..out_dims[2] {
                let (z0, z1, wz) = taps[2][z];
                for y in 0..out_dims[1] {
                    let (y0, y1, wy) = taps[1][y];
                    for x in 0..out_dims[0] {
                        let (x0, x1, wx) = taps[0][x];
                        let at = |xi, yi, zi| s[linear_index(dims, xi, yi, zi)] as f64;
                        let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                        let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                        let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                        let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                        let c0 = c00 * (1.0 - wy) + c10 * wy;
                        let c1 = c01 * (1.0 - wy) + c11 * wy;
                        o[linear_index(out_dims, x, y, z)] = (c0 * (1.0 - wz) + c1 * wz) as f32;
                    }
                }
            }
        }
        if v.role() == Role::Probability {
            // renormalize away interpolation rounding
            for i in 0..n_out {
                let sum: f32 = (0..channels).map(|c| out[c * n_out + i]).sum();
                for c in 0..channels {
                    out[c * n_out + i] /= sum;
                }
            }
        }
    }
    Volume::from_raw_parts(
        out_dims,
        channels,
        [target; 3],
        v.role(),
        v.class_count(),
        out,
    )
}
