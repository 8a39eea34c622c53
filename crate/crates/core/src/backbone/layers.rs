//! Layer kernels with hand-written backward passes.
//!
//! All feature maps are `[channels, z, y, x]` with x fastest.

use super::real::{gemm, Mat, Real};
use crate::volume::{voxel_count, Dims};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Feature<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn half(d: Dims) -> Dims {
    [d[0] / 2, d[1] / 2, d[2] / 2]
}

fn double(d: Dims) -> Dims {
    [d[0] * 2, d[1] * 2, d[2] * 2]
}

/// Unfolds a 3x3x3 zero-padded neighbourhood: `cols[ci * 27 + k][voxel]`.
pub fn im2col3<T: Real>(x: &Feature<T>, cols: &mut Vec<T>) {
    let [nx, ny, nz] = x.dims;
    let n = x.voxels();
    cols.clear();
    cols.resize(x.channels * 27 * n, T::zero());
    for ci in 0..x.channels {
        let src = &x.data[ci * n..(ci + 1) * n];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 27 + kz * 9 + ky * 3 + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (nx + 1 - kx).min(nx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for z in 0..nz {
                        let zs = z + kz;
                        if zs < 1 || zs > nz {
                            continue;
                        }
                        let zs = zs - 1;
                        for y in 0..ny {
                            let ys = y + ky;
                            if ys < 1 || ys > ny {
                                continue;
                            }
                            let ys = ys - 1;
                            let d0 = (z * ny + y) * nx;
                            let s0 = (zs * ny + ys) * nx;
                            dst[d0 + x_lo..d0 + x_hi]
                                .copy_from_slice(&src[s0 + x_lo + kx - 1..s0 + x_hi + kx - 1]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-adds columns back onto the grid.
pub fn col2im3<T: Real>(cols: &[T], channels: usize, dims: Dims) -> Feature<T> {
    let [nx, ny, nz] = dims;
    let n = voxel_count(dims);
    let mut out = Feature::zeros(channels, dims);
    for ci in 0..channels {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 27 + kz * 9 + ky * 3 + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = (nx + 1 - kx).min(nx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for z in 0..nz {
                        let zs = z + kz;
                        if zs < 1 || zs > nz {
                            continue;
                        }
                        let zs = zs - 1;
                        for y in 0..ny {
                            let ys = y + ky;
                            if ys < 1 || ys > ny {
                                continue;
                            }
                            let ys = ys - 1;
                            let s0 = (z * ny + y) * nx;
                            let d0 = (zs * ny + ys) * nx;
                            let d = &mut dst[d0 + x_lo + kx - 1..d0 + x_hi + kx - 1];
                            for (a, &b) in d.iter_mut().zip(&src[s0 + x_lo..s0 + x_hi]) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Groups each 2x2x2 block into channels: `out[c * 8 + k][coarse voxel]`.
pub fn space_to_depth<T: Real>(x: &Feature<T>) -> Feature<T> {
    let [nx, ny, _] = x.dims;
    let od = half(x.dims);
    let n_in = x.voxels();
    let n_out = voxel_count(od);
    let mut out = Feature::zeros(x.channels * 8, od);
    for c in 0..x.channels {
        let src = &x.data[c * n_in..(c + 1) * n_in];
        for k in 0..8 {
            let (dz, dy, dx) = (k / 4, (k / 2) % 2, k % 2);
            let dst = &mut out.data[(c * 8 + k) * n_out..(c * 8 + k + 1) * n_out];
            let mut o = 0;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let row = ((2 * z + dz) * ny + 2 * y + dy) * nx + dx;
                    for x in 0..od[0] {
                        dst[o] = src[row + 2 * x];
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Real>(x: &Feature<T>) -> Feature<T> {
    let channels = x.channels / 8;
    let od = double(x.dims);
    let [nx, ny, _] = od;
    let n_in = x.voxels();
    let n_out = voxel_count(od);
    let mut out = Feature::zeros(channels, od);
    for c in 0..channels {
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for k in 0..8 {
            let (dz, dy, dx) = (k / 4, (k / 2) % 2, k % 2);
            let src = &x.data[(c * 8 + k) * n_in..(c * 8 + k + 1) * n_in];
            let mut i = 0;
            for z in 0..x.dims[2] {
                for y in 0..x.dims[1] {
                    let row = ((2 * z + dz) * ny + 2 * y + dy) * nx + dx;
                    for xx in 0..x.dims[0] {
                        dst[row + 2 * xx] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Shared linear core of the three convolution kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 3x3x3, stride 1, zero padding 1.
    Same3,
    /// 2x2x2, stride 2.
    Down2,
    /// Transposed 2x2x2, stride 2.
    Up2,
}

impl ConvKind {
    /// Weight matrix shape as `(rows, cols)`.
    pub fn weight_shape(self, cin: usize, cout: usize) -> (usize, usize) {
        match self {
            ConvKind::Same3 => (cout, cin * 27),
            ConvKind::Down2 => (cout, cin * 8),
            ConvKind::Up2 => (cout * 8, cin),
        }
    }

    pub fn fan_in(self, cin: usize) -> usize {
        match self {
            ConvKind::Same3 => cin * 27,
            ConvKind::Down2 => cin * 8,
            ConvKind::Up2 => cin,
        }
    }

    pub fn out_dims(self, d: Dims) -> Dims {
        match self {
            ConvKind::Same3 => d,
            ConvKind::Down2 => half(d),
            ConvKind::Up2 => double(d),
        }
    }
}

/// Bias-free convolution forward.
pub fn conv_forward<T: Real>(
    kind: ConvKind,
    w: &[T],
    cout: usize,
    x: &Feature<T>,
    scratch: &mut Vec<T>,
) -> Feature<T> {
    let cin = x.channels;
    let (wr, wc) = kind.weight_shape(cin, cout);
    let wm = Mat::rm(w, wr, wc);
    match kind {
        ConvKind::Same3 => {
            im2col3(x, scratch);
            let n = x.voxels();
            let mut out = Feature::zeros(cout, x.dims);
            gemm(T::one(), wm, Mat::rm(scratch, cin * 27, n), T::zero(), &mut out.data);
            out
        }
        ConvKind::Down2 => {
            let cols = space_to_depth(x);
            let n = cols.voxels();
            let mut out = Feature::zeros(cout, cols.dims);
            gemm(T::one(), wm, Mat::rm(&cols.data, cin * 8, n), T::zero(), &mut out.data);
            out
        }
        ConvKind::Up2 => {
            let n = x.voxels();
            let mut cols = Feature::zeros(cout * 8, x.dims);
            gemm(T::one(), wm, Mat::rm(&x.data, cin, n), T::zero(), &mut cols.data);
            depth_to_space(&cols)
        }
    }
}

/// Backward of [`conv_forward`]: accumulates into `dw`, returns input grad.
pub fn conv_backward<T: Real>(
    kind: ConvKind,
    w: &[T],
    x: &Feature<T>,
    dy: &Feature<T>,
    dw: &mut [T],
    scratch: &mut Vec<T>,
    need_dx: bool,
) -> Option<Feature<T>> {
    let cin = x.channels;
    let cout = dy.channels;
    let (wr, wc) = kind.weight_shape(cin, cout);
    let wm = Mat::rm(w, wr, wc);
    match kind {
        ConvKind::Same3 => {
            let n = x.voxels();
            im2col3(x, scratch);
            gemm(
                T::one(),
                Mat::rm(&dy.data, cout, n),
                Mat::rm(scratch, cin * 27, n).t(),
                T::one(),
                dw,
            );
            if !need_dx {
                return None;
            }
            gemm(T::one(), wm.t(), Mat::rm(&dy.data, cout, n), T::zero(), scratch);
            Some(col2im3(scratch, cin, x.dims))
        }
        ConvKind::Down2 => {
            let cols = space_to_depth(x);
            let n = cols.voxels();
            gemm(
                T::one(),
                Mat::rm(&dy.data, cout, n),
                Mat::rm(&cols.data, cin * 8, n).t(),
                T::one(),
                dw,
            );
            if !need_dx {
                return None;
            }
            let mut dcols = Feature::zeros(cin * 8, cols.dims);
            gemm(T::one(), wm.t(), Mat::rm(&dy.data, cout, n), T::zero(), &mut dcols.data);
            Some(depth_to_space(&dcols))
        }
        ConvKind::Up2 => {
            let n = x.voxels();
            let dcols = space_to_depth(dy);
            gemm(
                T::one(),
                Mat::rm(&dcols.data, cout * 8, n),
                Mat::rm(&x.data, cin, n).t(),
                T::one(),
                dw,
            );
            if !need_dx {
                return None;
            }
            let mut dx = Feature::zeros(cin, x.dims);
            gemm(T::one(), wm.t(), Mat::rm(&dcols.data, cout * 8, n), T::zero(), &mut dx.data);
            Some(dx)
        }
    }
}

/// Saved statistics of an instance-norm + ReLU pair.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `y = relu(gamma * (z - mean) / std + beta)` per channel, in place.
pub fn norm_relu_forward<T: Real>(z: &mut Feature<T>, gamma: &[T], beta: &[T]) -> NormCache<T> {
    let n = z.voxels();
    let inv_n = T::of(1.0 / n as f64);
    let mut xhat = vec![T::zero(); z.data.len()];
    let mut inv_std = vec![T::zero(); z.channels];
    for c in 0..z.channels {
        let zc = &mut z.data[c * n..(c + 1) * n];
        let mean = zc.iter().copied().sum::<T>() * inv_n;
        let var = zc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
        inv_std[c] = is;
        let xh = &mut xhat[c * n..(c + 1) * n];
        for (h, v) in xh.iter_mut().zip(zc.iter_mut()) {
            *h = (*v - mean) * is;
            let y = gamma[c] * *h + beta[c];
            *v = if y > T::zero() { y } else { T::zero() };
        }
    }
    NormCache { xhat, inv_std }
}

/// Backward of [`norm_relu_forward`]; `dy` becomes the pre-norm gradient.
pub fn norm_relu_backward<T: Real>(
    y: &Feature<T>,
    cache: &NormCache<T>,
    gamma: &[T],
    dy: &mut Feature<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let n = y.voxels();
    let inv_n = T::of(1.0 / n as f64);
    for c in 0..y.channels {
        let r = c * n..(c + 1) * n;
        let yc = &y.data[r.clone()];
        let xh = &cache.xhat[r.clone()];
        let d = &mut dy.data[r];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..n {
            if yc[i] <= T::zero() {
                d[i] = T::zero();
            }
            sum_d += d[i];
            sum_dx += d[i] * xh[i];
        }
        dgamma[c] += sum_dx;
        dbeta[c] += sum_d;
        let scale = gamma[c] * cache.inv_std[c];
        let mean_d = sum_d * inv_n;
        let mean_dx = sum_dx * inv_n;
        for i in 0..n {
            d[i] = scale * (d[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

/// Pointwise linear map with bias: `out[co] = b[co] + sum_ci w[co, ci] x[ci]`.
pub fn pointwise_forward<T: Real>(w: &[T], b: &[T], cout: usize, x: &Feature<T>) -> Feature<T> {
    let n = x.voxels();
    let mut out = Feature::zeros(cout, x.dims);
    for (chunk, &bias) in out.data.chunks_mut(n).zip(&b[..cout]) {
        chunk.fill(bias);
    }
    gemm(
        T::one(),
        Mat::rm(w, cout, x.channels),
        Mat::rm(&x.data, x.channels, n),
        T::one(),
        &mut out.data,
    );
    out
}

pub fn pointwise_backward<T: Real>(
    w: &[T],
    x: &Feature<T>,
    dy: &Feature<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Feature<T> {
    let n = x.voxels();
    let cout = dy.channels;
    for (d, chunk) in db[..cout].iter_mut().zip(dy.data.chunks(n)) {
        *d += chunk.iter().copied().sum::<T>();
    }
    gemm(
        T::one(),
        Mat::rm(&dy.data, cout, n),
        Mat::rm(&x.data, x.channels, n).t(),
        T::one(),
        dw,
    );
    let mut dx = Feature::zeros(x.channels, x.dims);
    gemm(
        T::one(),
        Mat::rm(w, cout, x.channels).t(),
        Mat::rm(&dy.data, cout, n),
        T::zero(),
        &mut dx.data,
    );
    dx
}

/// Linear-interpolation taps for integer upsampling with half-pixel centres.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn axis_geometry(dims: Dims, axis: usize) -> (usize, usize, usize) {
    // (stride of axis, length of axis, number of independent lines)
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (stride, dims[axis], voxel_count(dims) / dims[axis])
}

fn upsample_axis<T: Real>(x: &Feature<T>, axis: usize, factor: usize) -> Feature<T> {
    let mut od = x.dims;
    od[axis] *= factor;
    let taps = upsample_taps(x.dims[axis], factor);
    let (s_in, len_in, _) = axis_geometry(x.dims, axis);
    let (s_out, _, _) = axis_geometry(od, axis);
    let n_in = x.voxels();
    let n_out = voxel_count(od);
    let mut out = Feature::zeros(x.channels, od);
    for c in 0..x.channels {
        let src = &x.data[c * n_in..(c + 1) * n_in];
        let dst = &mut out.data[c * n_out..(c + 1) * n_out];
        for base in 0..n_in {
            // visit each line once via its first element
            if (base / s_in) % len_in != 0 {
                continue;
            }
            let outer = base / (s_in * len_in);
            let inner = base % s_in;
            let obase = outer * s_out * len_in * factor + inner;
            for (o, &(i0, i1, w)) in taps.iter().enumerate() {
                let a = src[base + i0 * s_in];
                let b = src[base + i1 * s_in];
                let wt = T::of(w);
                dst[obase + o * s_out] = a + (b - a) * wt;
            }
        }
    }
    out
}

fn upsample_axis_backward<T: Real>(dy: &Feature<T>, in_dims: Dims, axis: usize, factor: usize) -> Feature<T> {
    let taps = upsample_taps(in_dims[axis], factor);
    let (s_in, len_in, _) = axis_geometry(in_dims, axis);
    let (s_out, _, _) = axis_geometry(dy.dims, axis);
    let n_in = voxel_count(in_dims);
    let n_out = dy.voxels();
    let mut dx = Feature::zeros(dy.channels, in_dims);
    for c in 0..dy.channels {
        let src = &dy.data[c * n_out..(c + 1) * n_out];
        let dst = &mut dx.data[c * n_in..(c + 1) * n_in];
        for base in 0..n_in {
            if (base / s_in) % len_in != 0 {
                continue;
            }
            let outer = base / (s_in * len_in);
            let inner = base % s_in;
            let obase = outer * s_out * len_in * factor + inner;
            for (o, &(i0, i1, w)) in taps.iter().enumerate() {
                let g = src[obase + o * s_out];
                let wt = T::of(w);
                dst[base + i0 * s_in] += g * (T::one() - wt);
                dst[base + i1 * s_in] += g * wt;
            }
        }
    }
    dx
}

/// Trilinear upsampling by an integer factor (half-pixel aligned).
pub fn upsample<T: Real>(x: &Feature<T>, factor: usize) -> Feature<T> {
    if factor == 1 {
        return x.clone();
    }
    let a = upsample_axis(x, 0, factor);
    let b = upsample_axis(&a, 1, factor);
    upsample_axis(&b, 2, factor)
}

pub fn upsample_backward<T: Real>(dy: &Feature<T>, in_dims: Dims, factor: usize) -> Feature<T> {
    if factor == 1 {
        return dy.clone();
    }
    let d1 = [in_dims[0] * factor, in_dims[1] * factor, in_dims[2]];
    let d0 = [in_dims[0] * factor, in_dims[1], in_dims[2]];
    let g2 = upsample_axis_backward(dy, d1, 2, factor);
    let g1 = upsample_axis_backward(&g2, d0, 1, factor);
    upsample_axis_backward(&g1, in_dims, 0, factor)
}

/// Per-voxel softmax over channels, in place.
pub fn softmax<T: Real>(x: &mut Feature<T>) {
    let n = x.voxels();
    let c = x.channels;
    for i in 0..n {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(x.data[k * n + i]);
        }
        let mut s = T::zero();
        for k in 0..c {
            let e = (x.data[k * n + i] - m).exp();
            x.data[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            x.data[k * n + i] = x.data[k * n + i] / s;
        }
    }
}

/// Converts a probability gradient into a logit gradient, in place.
pub fn softmax_backward<T: Real>(p: &Feature<T>, dp: &mut Feature<T>) {
    let n = p.voxels();
    let c = p.channels;
    for i in 0..n {
        let mut dot = T::zero();
        for k in 0..c {
            dot += p.data[k * n + i] * dp.data[k * n + i];
        }
        for k in 0..c {
            dp.data[k * n + i] = p.data[k * n + i] * (dp.data[k * n + i] - dot);
        }
    }
}
