//! Dense row-major tensors and the raw kernels the autodiff graph is built on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Row-major `f64` tensor. Images and feature maps are `(C, H, W)`,
/// token matrices are `(N, D)`, vectors are `(D,)` and scalars `(1,)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected (C, H, W), got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn rc(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected (N, D), got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channel `c` of a `(C, H, W)` tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn ensure_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(op, &self.shape, shape));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }
}

/// Four-accumulator dot product; fixed association order keeps results
/// reproducible across runs.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out (n, m) += a (n, k) · b (k, m)`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(row, av, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `out (n, m) += a (n, k) · bᵀ` with `b` stored `(m, k)`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (k, m) += aᵀ · b` with `a` stored `(n, k)` and `b` stored `(n, m)`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut out[p * m..(p + 1) * m], av, br);
            }
        }
    }
}

/// Geometry of a square-kernel 2-D convolution over one `(C, H, W)` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Valid output-column range for kernel column `kx`, plus the matching
    /// input column of the first valid output.
    #[inline]
    fn ox_range(&self, kx: usize, wo: usize) -> (usize, usize) {
        // ix = ox*s + kx - pad must lie in [0, w)
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        let hi_excl = {
            // largest ox with ox*s + kx - pad <= w - 1
            let lim = self.w + self.pad;
            if kx >= lim {
                0
            } else {
                ((lim - kx - 1) / s + 1).min(wo)
            }
        };
        (lo, hi_excl.max(lo))
    }
}

/// Unfolds the receptive fields into a `(cin·k·k, ho·wo)` matrix.
fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let ConvGeom { cin, h, w, k, stride: s, pad, .. } = g;
    let p = ho * wo;
    let mut col = vec![0.0; cin * k * k * p];
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = g.ox_range(kx, wo);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xr = &xc[iy as usize * w..][..w];
                    let orow = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        orow[ox] = xr[ox * s + kx - pad];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `(cin·k·k, ho·wo)` column matrix back onto the input.
fn col2im(col: &[f64], dx: &mut [f64], g: ConvGeom) {
    let (ho, wo) = g.out_hw();
    let ConvGeom { cin, h, w, k, stride: s, pad, .. } = g;
    let p = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                let (lo, hi) = g.ox_range(kx, wo);
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in lo..hi {
                        dx[base + ox * s + kx - pad] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    let mut out = vec![0.0; g.cout * p];
    if let Some(b) = bias {
        for (co, oc) in out.chunks_mut(p).enumerate() {
            oc.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        mm_nn(wt, x, &mut out, g.cout, kk, p);
    } else {
        let col = im2col(x, g);
        mm_nn(wt, &col, &mut out, g.cout, kk, p);
    }
    out
}

/// Accumulates input and/or weight gradients of a convolution.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    dout: &[f64],
    g: ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.cin * g.k * g.k;
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    if let Some(dw) = dw {
        if pointwise {
            mm_nt(dout, x, dw, g.cout, p, kk);
        } else {
            let col = im2col(x, g);
            mm_nt(dout, &col, dw, g.cout, p, kk);
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            mm_tn(wt, dout, dx, g.cout, kk, p);
        } else {
            let mut dcol = vec![0.0; kk * p];
            mm_tn(wt, dout, &mut dcol, g.cout, kk, p);
            col2im(&dcol, dx, g);
        }
    }
}

/// Bilinear sampling weights along one axis (half-pixel centres, edge clamped).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            (i0, i1, f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.cout * ho * wo];
        for co in 0..g.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += wt[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_pads() {
        for &(k, stride, pad, h, w) in &[
            (3, 1, 1, 5, 7),
            (3, 2, 1, 8, 8),
            (1, 1, 0, 4, 3),
            (3, 2, 1, 7, 5),
            (3, 1, 0, 6, 6),
        ] {
            let g = ConvGeom {
                cin: 2,
                cout: 3,
                h,
                w,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let fast = conv2d_forward(&x, &wt, None, g);
            let slow = naive_conv(&x, &wt, g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let (n, k, m) = (3, 4, 5);
        let a: Vec<f64> = (0..n * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i % 3) as f64 - 1.0).collect();
        let mut c = vec![0.0; n * m];
        mm_nn(&a, &b, &mut c, n, k, m);
        // bt is (m, k)
        let mut bt = vec![0.0; m * k];
        for p in 0..k {
            for j in 0..m {
                bt[j * k + p] = b[p * m + j];
            }
        }
        let mut c2 = vec![0.0; n * m];
        mm_nt(&a, &bt, &mut c2, n, k, m);
        assert_eq!(c, c2);
        // at is (k, n); aᵀᵀ·b
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for p in 0..k {
                at[p * n + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; n * m];
        mm_tn(&at, &b, &mut c3, k, n, m);
        assert_eq!(c, c3);
    }
}
