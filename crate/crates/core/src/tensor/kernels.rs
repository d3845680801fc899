//! Element-generic forward kernels.
//!
//! Every kernel is written once over [`El`] and instantiated at `f32` for the
//! tape's forward pass and at `f64` for the finite-difference replay used by
//! the gradient checker.

/// Minimal scalar abstraction over `f32`/`f64`.
pub trait El:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn round_half(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn minv(self, o: Self) -> Self;
    fn absv(self) -> Self;
}

impl El for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn round_half(self) -> Self {
        f32::round(self)
    }
    fn maxv(self, o: Self) -> Self {
        f32::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f32::min(self, o)
    }
    fn absv(self) -> Self {
        f32::abs(self)
    }
}

impl El for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn round_half(self) -> Self {
        f64::round(self)
    }
    fn maxv(self, o: Self) -> Self {
        f64::max(self, o)
    }
    fn minv(self, o: Self) -> Self {
        f64::min(self, o)
    }
    fn absv(self) -> Self {
        f64::abs(self)
    }
}

/// C = A (m x k) * B (k x n), row-major.
pub fn matmul<T: El>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// im2col for a single image (c x h x w) -> (c*k*k) x (oh*ow).
pub fn im2col<T: El>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, pad);
    let cols = oh * ow;
    let mut out = vec![T::ZERO; c * k * k * cols];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * cols..][..cols];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[idx] = src[ix as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of a column matrix back to image layout (inverse of `im2col`).
pub fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, pad);
    let cols = oh * ow;
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Conv2d over a batch: x (n,c,h,w), weights (o,c,k,k) -> (n,o,oh,ow).
pub fn conv2d<T: El>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_out_dims(h, w, k, stride, pad);
    let mut out = vec![T::ZERO; n * o * oh * ow];
    let plane = c * h * w;
    for ni in 0..n {
        let col = im2col(&x[ni * plane..(ni + 1) * plane], c, h, w, k, stride, pad);
        let y = matmul(wgt, &col, o, c * k * k, oh * ow);
        out[ni * o * oh * ow..(ni + 1) * o * oh * ow].copy_from_slice(&y);
    }
    out
}

/// Transposed conv: x (n,c,h,w), weights (c,o,k,k) -> (n,o,oh,ow) where
/// oh = (h-1)*stride - 2*pad + k. Direct scatter loops.
pub fn transpose_conv2d<T: El>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (w - 1) * stride + k - 2 * pad;
    let mut out = vec![T::ZERO; n * o * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let xp = &x[(ni * c + ci) * h * w..][..h * w];
            for oi in 0..o {
                let wp = &wgt[(ci * o + oi) * k * k..][..k * k];
                let op_base = (ni * o + oi) * oh * ow;
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xp[iy * w + ix];
                        for ky in 0..k {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[op_base + oy as usize * ow + ox as usize] += v * wp[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping average pool with square window k (h, w divisible by k).
pub fn avg_pool2d<T: El>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let oh = h / k;
    let ow = w / k;
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::ZERO;
                for ky in 0..k {
                    for kx in 0..k {
                        s += src[(oy * k + ky) * w + ox * k + kx];
                    }
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    out
}

pub fn nearest_upsample2d<T: El>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let oh = h * f;
    let ow = w * f;
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[sy * w + ox / f];
            }
        }
    }
    out
}

/// Orthonormal 8x8 DCT-II basis matrix, row u, column x.
pub fn dct8_basis<T: El>() -> [T; 64] {
    let mut d = [T::ZERO; 64];
    for u in 0..8 {
        let cu = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for x in 0..8 {
            let theta = ((2 * x + 1) as f64) * (u as f64) * std::f64::consts::PI / 16.0;
            d[u * 8 + x] = T::from_f64(cu * theta.cos());
        }
    }
    d
}

/// Per-channel blockwise 8x8 DCT (or inverse). h, w must be multiples of 8.
pub fn block_dct8<T: El>(x: &[T], c: usize, h: usize, w: usize, inverse: bool) -> Vec<T> {
    let d = dct8_basis::<T>();
    let mut out = vec![T::ZERO; c * h * w];
    let mut block = [T::ZERO; 64];
    let mut tmp = [T::ZERO; 64];
    for ci in 0..c {
        let src = &x[ci * h * w..][..h * w];
        let dst = &mut out[ci * h * w..][..h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for r in 0..8 {
                    block[r * 8..r * 8 + 8].copy_from_slice(&src[(by + r) * w + bx..][..8]);
                }
                // forward: D * B * D^T; inverse: D^T * B * D
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = T::ZERO;
                        for t in 0..8 {
                            let m = if inverse { d[t * 8 + i] } else { d[i * 8 + t] };
                            s += m * block[t * 8 + j];
                        }
                        tmp[i * 8 + j] = s;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = T::ZERO;
                        for t in 0..8 {
                            let m = if inverse { d[t * 8 + j] } else { d[j * 8 + t] };
                            s += tmp[i * 8 + t] * m;
                        }
                        dst[(by + i) * w + bx + j] = s;
                    }
                }
            }
        }
    }
    out
}

/// Numerically stable softplus: ln(1 + e^x).
pub fn softplus<T: El>(x: T) -> T {
    x.maxv(T::ZERO) + ((-(x.absv())).exp() + T::ONE).ln()
}

pub fn sigmoid<T: El>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}
