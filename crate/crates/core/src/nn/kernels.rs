//! Forward and backward kernels for the 3D layers of the light UNet.
//!
//! All kernels are single-threaded and accumulate in a fixed order, so a
//! given input always produces bit-identical output.

use super::tensor::Tensor;
use crate::volume::{voxel_count, Shape3};

#[cfg(not(test))]
#[inline]
fn leaky_slope() -> f32 {
    super::spec::LEAKY_SLOPE
}

#[cfg(test)]
thread_local! {
    /// Lets whole-network gradient tests swap in a smooth (linear) activation.
    pub(crate) static SLOPE_OVERRIDE: std::cell::Cell<Option<f32>> = const { std::cell::Cell::new(None) };
}

#[cfg(test)]
fn leaky_slope() -> f32 {
    SLOPE_OVERRIDE.with(|s| s.get()).unwrap_or(super::spec::LEAKY_SLOPE)
}

/// `C = A·B + beta·C` for row-major `C` (m×n); `A` and `B` take explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a "same"-padded convolution with odd kernel `k`.
pub(crate) fn conv_out_dim(n: usize, k: usize, s: usize) -> usize {
    let pad = k / 2;
    (n + 2 * pad - k) / s + 1
}

pub(crate) fn conv_out_shape(shape: Shape3, k: usize, stride: [usize; 3]) -> Shape3 {
    [
        conv_out_dim(shape[0], k, stride[0]),
        conv_out_dim(shape[1], k, stride[1]),
        conv_out_dim(shape[2], k, stride[2]),
    ]
}

/// Output indices `o` in `[lo, hi)` with `0 <= o*s + d < n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, s: usize, d: i64) -> (usize, usize) {
    let s_i = s as i64;
    let lo = if d >= 0 { 0 } else { (-d + s_i - 1) / s_i };
    let hi = if (n_in as i64) <= d {
        0
    } else {
        ((n_in as i64 - d + s_i - 1) / s_i).min(n_out as i64)
    };
    (lo as usize, (hi.max(lo)) as usize)
}

/// Precomputed tap geometry shared by depthwise and im2col kernels.
struct TapGrid {
    in_shape: Shape3,
    out_shape: Shape3,
    stride: [usize; 3],
    k: usize,
}

impl TapGrid {
    fn new(in_shape: Shape3, k: usize, stride: [usize; 3]) -> Self {
        Self {
            in_shape,
            out_shape: conv_out_shape(in_shape, k, stride),
            stride,
            k,
        }
    }

    fn taps(&self) -> usize {
        self.k.pow(3)
    }

    /// Calls `f(out_row_offset, in_row_offset, ox_lo, ox_hi, dx)` for every
    /// valid (oz, oy) row of tap `t`.
    #[inline]
    fn for_rows(&self, t: usize, mut f: impl FnMut(usize, usize, usize, usize, i64)) {
        let k = self.k;
        let pad = (k / 2) as i64;
        let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
        let (dz, dy, dx) = (kz as i64 - pad, ky as i64 - pad, kx as i64 - pad);
        let [iz_n, iy_n, ix_n] = self.in_shape;
        let [oz_n, oy_n, ox_n] = self.out_shape;
        let [sz, sy, sx] = self.stride;
        let (z0, z1) = valid_range(iz_n, oz_n, sz, dz);
        let (y0, y1) = valid_range(iy_n, oy_n, sy, dy);
        let (x0, x1) = valid_range(ix_n, ox_n, sx, dx);
        if x0 >= x1 {
            return;
        }
        for oz in z0..z1 {
            let iz = (oz as i64 * sz as i64 + dz) as usize;
            for oy in y0..y1 {
                let iy = (oy as i64 * sy as i64 + dy) as usize;
                f((oz * oy_n + oy) * ox_n, (iz * iy_n + iy) * ix_n, x0, x1, dx);
            }
        }
    }
}

/// Copies one channel into a buffer with a `pad`-voxel zero border.
fn pad_channel(src: &[f32], shape: Shape3, pad: usize, dst: &mut [f32]) {
    let [d, h, w] = shape;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    for z in 0..d {
        for y in 0..h {
            let o = ((z + pad) * hp + y + pad) * wp + pad;
            dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
        }
    }
}

/// Dot product with independent lane accumulators so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const L: usize = 16;
    let mut lanes = [0.0f32; L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..L {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn padded_len(shape: Shape3, pad: usize) -> usize {
    shape.iter().map(|&n| n + 2 * pad).product()
}

/// Length of a field laid out with row pitch `wp` and plane pitch `hp·wp`,
/// up to and including its last voxel.
fn pitched_span(shape: Shape3, hp: usize, wp: usize) -> usize {
    let [d, h, w] = shape;
    ((d - 1) * hp + h - 1) * wp + w
}

fn tap_offset(t: usize, k: usize, hp: usize, wp: usize) -> usize {
    ((t / (k * k)) * hp + (t / k) % k) * wp + t % k
}

fn unpitch(src: &[f32], shape: Shape3, hp: usize, wp: usize, dst: &mut [f32]) {
    let [d, h, w] = shape;
    for z in 0..d {
        for y in 0..h {
            let o = (z * hp + y) * wp;
            dst[(z * h + y) * w..(z * h + y + 1) * w].copy_from_slice(&src[o..o + w]);
        }
    }
}

/// Inverse of [`unpitch`]; the gaps are zeroed.
fn pitch(src: &[f32], shape: Shape3, hp: usize, wp: usize, dst: &mut [f32]) {
    let [d, h, w] = shape;
    dst.fill(0.0);
    for z in 0..d {
        for y in 0..h {
            let o = (z * hp + y) * wp;
            dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
        }
    }
}

/// Per-channel k³ convolution; `w` is `[channels, k³]`.
pub(crate) fn depthwise_forward(x: &Tensor, w: &[f32], k: usize, stride: [usize; 3]) -> Tensor {
    let pad = k / 2;
    let out_shape = conv_out_shape(x.shape, k, stride);
    let [od, oh, ow] = out_shape;
    let (hp, wp) = (x.shape[1] + 2 * pad, x.shape[2] + 2 * pad);
    let [sz, sy, sx] = stride;
    let mut out = Tensor::zeros(x.channels, out_shape);
    let (vi, vo) = (x.voxels(), out.voxels());
    let mut buf = vec![0.0f32; padded_len(x.shape, pad)];
    if stride == [1, 1, 1] {
        // Work in padded-pitch coordinates: each tap is then a single shifted
        // axpy over the whole channel; border columns are dropped afterwards.
        let span = pitched_span(out_shape, hp, wp);
        let mut acc = vec![0.0f32; span];
        for c in 0..x.channels {
            pad_channel(&x.data[c * vi..(c + 1) * vi], x.shape, pad, &mut buf);
            acc.fill(0.0);
            for (t, &wt) in w[c * k * k * k..(c + 1) * k * k * k].iter().enumerate() {
                let off = tap_offset(t, k, hp, wp);
                for (a, &b) in acc.iter_mut().zip(&buf[off..off + span]) {
                    *a += wt * b;
                }
            }
            unpitch(&acc, out_shape, hp, wp, &mut out.data[c * vo..(c + 1) * vo]);
        }
        return out;
    }
    for c in 0..x.channels {
        pad_channel(&x.data[c * vi..(c + 1) * vi], x.shape, pad, &mut buf);
        let wc = &w[c * k * k * k..(c + 1) * k * k * k];
        let dst = &mut out.data[c * vo..(c + 1) * vo];
        for oz in 0..od {
            for oy in 0..oh {
                let o = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                for kz in 0..k {
                    for ky in 0..k {
                        let base = ((oz * sz + kz) * hp + oy * sy + ky) * wp;
                        for kx in 0..k {
                            let wt = wc[(kz * k + ky) * k + kx];
                            let row = &buf[base + kx..];
                            if sx == 1 {
                                for (a, &b) in o.iter_mut().zip(&row[..ow]) {
                                    *a += wt * b;
                                }
                            } else {
                                for (a, &b) in o.iter_mut().zip(row.iter().step_by(sx)) {
                                    *a += wt * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient and accumulates weight gradients into `dw`.
pub(crate) fn depthwise_backward(
    x: &Tensor,
    w: &[f32],
    k: usize,
    stride: [usize; 3],
    dy: &Tensor,
    dw: &mut [f32],
) -> Tensor {
    let pad = k / 2;
    let [d, h, wd] = x.shape;
    let [od, oh, ow] = dy.shape;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let [sz, sy, sx] = stride;
    let taps = k * k * k;
    let mut dx = Tensor::zeros(x.channels, x.shape);
    let (vi, vo) = (x.voxels(), dy.voxels());
    let n = padded_len(x.shape, pad);
    let mut buf = vec![0.0f32; n];
    let mut dbuf = vec![0.0f32; n];
    let mut acc = vec![0.0f32; taps];
    let pitched = stride == [1, 1, 1];
    let span = pitched_span(dy.shape, hp, wp);
    let mut gp = if pitched { vec![0.0f32; span] } else { Vec::new() };
    for c in 0..x.channels {
        pad_channel(&x.data[c * vi..(c + 1) * vi], x.shape, pad, &mut buf);
        dbuf.fill(0.0);
        acc.fill(0.0);
        let wc = &w[c * taps..(c + 1) * taps];
        let g = &dy.data[c * vo..(c + 1) * vo];
        if pitched {
            pitch(g, dy.shape, hp, wp, &mut gp);
            for (t, &wt) in wc.iter().enumerate() {
                let off = tap_offset(t, k, hp, wp);
                for (dv, &gv) in dbuf[off..off + span].iter_mut().zip(&gp) {
                    *dv += wt * gv;
                }
                acc[t] = dot(&buf[off..off + span], &gp);
            }
        } else {
            for oz in 0..od {
                for oy in 0..oh {
                    let go = &g[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                    for t in 0..taps {
                        let (kz, ky, kx) = (t / (k * k), (t / k) % k, t % k);
                        let base = ((oz * sz + kz) * hp + oy * sy + ky) * wp + kx;
                        let wt = wc[t];
                        let mut a = 0.0f32;
                        for (j, &gv) in go.iter().enumerate() {
                            let i = base + j * sx;
                            dbuf[i] += wt * gv;
                            a += gv * buf[i];
                        }
                        acc[t] += a;
                    }
                }
            }
        }
        dw[c * taps..(c + 1) * taps].iter_mut().zip(&acc).for_each(|(a, b)| *a += b);
        let dsrc = &mut dx.data[c * vi..(c + 1) * vi];
        for z in 0..d {
            for y in 0..h {
                let o = ((z + pad) * hp + y + pad) * wp + pad;
                dsrc[(z * h + y) * wd..(z * h + y + 1) * wd].copy_from_slice(&dbuf[o..o + wd]);
            }
        }
    }
    dx
}

/// Unfolds `x` into a `[channels·k³, out_voxels]` matrix.
fn im2col(x: &Tensor, grid: &TapGrid) -> Vec<f32> {
    let taps = grid.taps();
    let (vi, vo) = (x.voxels(), voxel_count(grid.out_shape));
    let sx = grid.stride[2];
    let mut col = vec![0.0f32; x.channels * taps * vo];
    for c in 0..x.channels {
        let src = &x.data[c * vi..(c + 1) * vi];
        for t in 0..taps {
            let row = &mut col[(c * taps + t) * vo..(c * taps + t + 1) * vo];
            grid.for_rows(t, |orow, irow, x0, x1, dx| {
                let ib = (irow as i64 + x0 as i64 * sx as i64 + dx) as usize;
                let o = &mut row[orow + x0..orow + x1];
                if sx == 1 {
                    o.copy_from_slice(&src[ib..ib + (x1 - x0)]);
                } else {
                    for (j, a) in o.iter_mut().enumerate() {
                        *a = src[ib + j * sx];
                    }
                }
            });
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f32], channels: usize, grid: &TapGrid) -> Tensor {
    let taps = grid.taps();
    let vo = voxel_count(grid.out_shape);
    let sx = grid.stride[2];
    let mut dx = Tensor::zeros(channels, grid.in_shape);
    let vi = dx.voxels();
    for c in 0..channels {
        let dst = &mut dx.data[c * vi..(c + 1) * vi];
        for t in 0..taps {
            let row = &col[(c * taps + t) * vo..(c * taps + t + 1) * vo];
            grid.for_rows(t, |orow, irow, x0, x1, dxo| {
                let ib = (irow as i64 + x0 as i64 * sx as i64 + dxo) as usize;
                let g = &row[orow + x0..orow + x1];
                if sx == 1 {
                    for (d, gv) in dst[ib..ib + (x1 - x0)].iter_mut().zip(g) {
                        *d += gv;
                    }
                } else {
                    for (j, gv) in g.iter().enumerate() {
                        dst[ib + j * sx] += gv;
                    }
                }
            });
        }
    }
    dx
}

/// Cached state of a dense convolution needed by its backward pass.
pub(crate) struct DenseCache {
    /// Unfolded input (`[cin·k³, out_voxels]`).
    col: Vec<f32>,
    in_shape: Shape3,
    cin: usize,
}

/// Dense k³ convolution with "same" padding; `w` is `[cout, cin·k³]`.
pub(crate) fn dense_forward(
    x: &Tensor,
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    k: usize,
    stride: [usize; 3],
) -> (Tensor, DenseCache) {
    let grid = TapGrid::new(x.shape, k, stride);
    let kk = x.channels * grid.taps();
    let col = if k == 1 && stride == [1, 1, 1] {
        x.data.clone()
    } else {
        im2col(x, &grid)
    };
    let mut out = Tensor::zeros(cout, grid.out_shape);
    let vo = out.voxels();
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out.data[o * vo..(o + 1) * vo].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    sgemm(cout, kk, vo, w, (kk, 1), &col, (vo, 1), &mut out.data, beta);
    (
        out,
        DenseCache {
            col,
            in_shape: x.shape,
            cin: x.channels,
        },
    )
}

/// Returns `dx`; accumulates into `dw` and `db`.
pub(crate) fn dense_backward(
    cache: &DenseCache,
    w: &[f32],
    k: usize,
    stride: [usize; 3],
    dy: &Tensor,
    dw: &mut [f32],
    db: Option<&mut [f32]>,
) -> Tensor {
    let grid = TapGrid::new(cache.in_shape, k, stride);
    let kk = cache.cin * grid.taps();
    let cout = dy.channels;
    let vo = dy.voxels();
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dy.data[o * vo..(o + 1) * vo].iter().sum::<f32>();
        }
    }
    // dW += dY · colᵀ
    sgemm(cout, vo, kk, &dy.data, (vo, 1), &cache.col, (1, vo), dw, 1.0);
    // dcol = Wᵀ · dY
    let mut dcol = vec![0.0f32; kk * vo];
    sgemm(kk, cout, vo, w, (1, kk), &dy.data, (vo, 1), &mut dcol, 0.0);
    if k == 1 && stride == [1, 1, 1] {
        Tensor::from_data(cache.cin, cache.in_shape, dcol)
    } else {
        col2im(&dcol, cache.cin, &grid)
    }
}

/// Transposed convolution with kernel equal to stride; `w` is `[cin, cout·taps]`.
pub(crate) fn upsample_forward(x: &Tensor, w: &[f32], b: &[f32], cout: usize, stride: [usize; 3]) -> Tensor {
    let taps: usize = stride.iter().product();
    let v = x.voxels();
    let rows = cout * taps;
    let mut t_mat = vec![0.0f32; rows * v];
    sgemm(rows, x.channels, v, w, (1, rows), &x.data, (v, 1), &mut t_mat, 0.0);
    let out_shape = [x.shape[0] * stride[0], x.shape[1] * stride[1], x.shape[2] * stride[2]];
    let mut out = Tensor::zeros(cout, out_shape);
    let vo = out.voxels();
    for_each_tap(x.shape, stride, cout, |co, row_idx, out_idx| {
        out.data[co * vo + out_idx] = t_mat[row_idx] + b[co];
    });
    out
}

/// Visits `(co, index into the [cout·taps, in_voxels] matrix, output voxel index)`.
fn for_each_tap(in_shape: Shape3, stride: [usize; 3], cout: usize, mut f: impl FnMut(usize, usize, usize)) {
    let taps: usize = stride.iter().product();
    let v = voxel_count(in_shape);
    let out_shape = [in_shape[0] * stride[0], in_shape[1] * stride[1], in_shape[2] * stride[2]];
    for co in 0..cout {
        for t in 0..taps {
            let (tz, ty, tx) = (t / (stride[1] * stride[2]), (t / stride[2]) % stride[1], t % stride[2]);
            let row = (co * taps + t) * v;
            for z in 0..in_shape[0] {
                for y in 0..in_shape[1] {
                    let base = ((z * stride[0] + tz) * out_shape[1] + y * stride[1] + ty) * out_shape[2] + tx;
                    let r = row + (z * in_shape[1] + y) * in_shape[2];
                    for xi in 0..in_shape[2] {
                        f(co, r + xi, base + xi * stride[2]);
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_backward(
    x: &Tensor,
    w: &[f32],
    stride: [usize; 3],
    dy: &Tensor,
    dw: &mut [f32],
    db: &mut [f32],
) -> Tensor {
    let taps: usize = stride.iter().product();
    let cout = dy.channels;
    let v = x.voxels();
    let vo = dy.voxels();
    let rows = cout * taps;
    for (co, d) in db.iter_mut().enumerate() {
        *d += dy.data[co * vo..(co + 1) * vo].iter().sum::<f32>();
    }
    // gather dT from the output gradient
    let mut dt = vec![0.0f32; rows * v];
    for_each_tap(x.shape, stride, cout, |co, row_idx, out_idx| {
        dt[row_idx] = dy.data[co * vo + out_idx];
    });
    // dW[ci, r] += Σ_v x[ci, v] · dT[r, v]
    sgemm(x.channels, v, rows, &x.data, (v, 1), &dt, (1, v), dw, 1.0);
    let mut dx = Tensor::zeros(x.channels, x.shape);
    sgemm(x.channels, rows, v, w, (rows, 1), &dt, (v, 1), &mut dx.data, 0.0);
    dx
}

/// Cached normalized activations of an instance-norm + leaky-ReLU unit.
pub(crate) struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Per-channel instance normalization followed by leaky ReLU.
pub(crate) fn norm_act_forward(x: &Tensor, scale: &[f32], shift: &[f32], eps: f32) -> (Tensor, NormCache) {
    let v = x.voxels();
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut out = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; x.channels];
    let slope = leaky_slope();
    for c in 0..x.channels {
        let src = &x.data[c * v..(c + 1) * v];
        let mean = src.iter().map(|&a| a as f64).sum::<f64>() / v as f64;
        let var = src.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / v as f64;
        let inv = (1.0 / (var + eps as f64).sqrt()) as f32;
        let mean = mean as f32;
        inv_std[c] = inv;
        let (g, b) = (scale[c], shift[c]);
        for ((h, o), &a) in xhat[c * v..(c + 1) * v]
            .iter_mut()
            .zip(&mut out[c * v..(c + 1) * v])
            .zip(src)
        {
            *h = (a - mean) * inv;
            let y = g * *h + b;
            *o = if y > 0.0 { y } else { slope * y };
        }
    }
    (Tensor::from_data(x.channels, x.shape, out), NormCache { xhat, inv_std })
}

pub(crate) fn norm_act_backward(
    cache: &NormCache,
    scale: &[f32],
    shift: &[f32],
    dy: &Tensor,
    dscale: &mut [f32],
    dshift: &mut [f32],
) -> Tensor {
    let v = dy.voxels();
    let n = v as f64;
    let mut dx = vec![0.0f32; dy.data.len()];
    let mut dpre = vec![0.0f32; v];
    let slope = leaky_slope();
    for c in 0..dy.channels {
        let (g, b) = (scale[c], shift[c]);
        let xh = &cache.xhat[c * v..(c + 1) * v];
        let go = &dy.data[c * v..(c + 1) * v];
        let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
        for ((p, &h), &gv) in dpre.iter_mut().zip(xh).zip(go) {
            let y = g * h + b;
            *p = if y > 0.0 { gv } else { slope * gv };
            sum_d += *p as f64;
            sum_dx += (*p * h) as f64;
        }
        dscale[c] += sum_dx as f32;
        dshift[c] += sum_d as f32;
        // gradient w.r.t. x̂ is g·dpre; project out the mean and x̂ directions
        let mean_d = (sum_d / n) as f32;
        let mean_dx = (sum_dx / n) as f32;
        let k = g * cache.inv_std[c];
        for ((d, &p), &h) in dx[c * v..(c + 1) * v].iter_mut().zip(&dpre).zip(xh) {
            *d = k * (p - mean_d - h * mean_dx);
        }
    }
    Tensor::from_data(dy.channels, dy.shape, dx)
}

/// Softmax over the channel axis at every voxel.
pub(crate) fn softmax_channels(logits: &Tensor) -> Vec<f32> {
    let v = logits.voxels();
    let c = logits.channels;
    let mut out = vec![0.0f32; logits.data.len()];
    let mut m = vec![f32::NEG_INFINITY; v];
    for k in 0..c {
        for (mv, &l) in m.iter_mut().zip(&logits.data[k * v..(k + 1) * v]) {
            *mv = mv.max(l);
        }
    }
    let mut sum = vec![0.0f32; v];
    for k in 0..c {
        for (((o, &l), &mv), s) in out[k * v..(k + 1) * v]
            .iter_mut()
            .zip(&logits.data[k * v..(k + 1) * v])
            .zip(&m)
            .zip(sum.iter_mut())
        {
            *o = (l - mv).exp();
            *s += *o;
        }
    }
    for k in 0..c {
        for (o, &s) in out[k * v..(k + 1) * v].iter_mut().zip(&sum) {
            *o /= s;
        }
    }
    out
}

/// Back-propagates `dprob` through the channel softmax with output `prob`.
pub(crate) fn softmax_backward(prob: &[f32], dprob: &[f32], channels: usize) -> Vec<f32> {
    let v = prob.len() / channels;
    let mut dot = vec![0.0f32; v];
    for k in 0..channels {
        for ((d, &p), &g) in dot.iter_mut().zip(&prob[k * v..(k + 1) * v]).zip(&dprob[k * v..(k + 1) * v]) {
            *d += p * g;
        }
    }
    let mut out = vec![0.0f32; prob.len()];
    for k in 0..channels {
        for (((o, &p), &g), &d) in out[k * v..(k + 1) * v]
            .iter_mut()
            .zip(&prob[k * v..(k + 1) * v])
            .zip(&dprob[k * v..(k + 1) * v])
            .zip(&dot)
        {
            *o = p * (g - d);
        }
    }
    out
}
