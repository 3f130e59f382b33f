//! Define-by-run reverse-mode autodiff over single-image tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`].
//! Nodes built only from constants and frozen parameters carry no gradient
//! and are skipped during the reverse pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, bilinear_taps, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Exp,
    Ln,
    Sqrt,
    Clamp01,
}

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x))),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => libm::tanh(x),
            Unary::Softplus => x.max(0.0) + libm::log1p(libm::exp(-x.abs())),
            Unary::Abs => x.abs(),
            Unary::Exp => libm::exp(x),
            Unary::Ln => libm::log(x),
            Unary::Sqrt => libm::sqrt(x),
            Unary::Clamp01 => x.clamp(0.0, 1.0),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let t = libm::tanh(u);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Clamp01 => {
                if (0.0..=1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ChannelAdd(Var, Var),
    ChannelMul(Var, Var),
    RowAdd(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Gap(Var),
    Gmp(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    ResizeBilinear(Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    store_tag: Option<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            store_tag: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (images in gradient checks, etc.).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies a parameter into the graph. Frozen parameters become constants.
    /// At most one store may contribute trainable parameters to a graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        if trainable {
            match self.store_tag {
                None => self.store_tag = Some(store.tag()),
                Some(t) => assert_eq!(t, store.tag(), "two trainable parameter stores in one graph"),
            }
        }
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), grad)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Div(a, b), grad)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let grad = self.g(a);
        self.push(v, Op::Scale(a, k), grad)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let grad = self.g(a);
        self.push(v, Op::AddConst(a), grad)
    }

    pub fn sum_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// `x (C, ...) + b (C)` broadcast over trailing dims.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x);
        let c = xs.shape()[0];
        assert_eq!(self.shape(b), &[c], "channel_add bias shape");
        let per = xs.len() / c;
        let bv = self.value(b).data();
        let mut out = xs.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[ci]);
        }
        let grad = self.g(x) || self.g(b);
        self.push(out, Op::ChannelAdd(x, b), grad)
    }

    /// `x (C, ...) * w (C)` broadcast over trailing dims.
    pub fn channel_mul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.value(x);
        let c = xs.shape()[0];
        assert_eq!(self.shape(w), &[c], "channel_mul weight shape");
        let per = xs.len() / c;
        let wv = self.value(w).data();
        let mut out = xs.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= wv[ci]);
        }
        let grad = self.g(x) || self.g(w);
        self.push(out, Op::ChannelMul(x, w), grad)
    }

    /// `x (N, D) + b (D)` broadcast over rows.
    pub fn row_add(&mut self, x: Var, b: Var) -> Var {
        let (_, d) = self.value(x).rc();
        assert_eq!(self.shape(b), &[d], "row_add bias shape");
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let grad = self.g(x) || self.g(b);
        self.push(out, Op::RowAdd(x, b), grad)
    }

    /// `a (N, K) · b (K, M)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).rc();
        let (k2, m) = self.value(b).rc();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        tensor::mm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let grad = self.g(a) || self.g(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMul(a, b), grad)
    }

    /// `a (N, K) · bᵀ` with `b (M, K)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).rc();
        let (m, k2) = self.value(b).rc();
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; n * m];
        tensor::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let grad = self.g(a) || self.g(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMulNT(a, b), grad)
    }

    /// Square-kernel convolution of one `(Cin, H, W)` image with weights
    /// `(Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight rank");
        assert_eq!(ws[1], cin, "conv input channels: weight {:?} vs input {}", ws, cin);
        assert_eq!(ws[2], ws[3]);
        let geom = ConvGeom {
            cin,
            cout: ws[0],
            h,
            w: wd,
            k: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = tensor::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push(
            Tensor::from_vec(&[geom.cout, ho, wo], out).unwrap(),
            Op::Conv { x, w, b, geom },
            grad,
        )
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x).map(|a| f.apply(a));
        let grad = self.g(x);
        self.push(v, Op::Unary(x, f), grad)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.value(x).rc();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let grad = self.g(x);
        self.push(out, Op::SoftmaxRows(x), grad)
    }

    /// Row-wise layer normalisation of `x (N, D)` with affine `gamma, beta (D)`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, d) = self.value(x).rc();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(
            Tensor::from_vec(&[n, d], out).unwrap(),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            grad,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let grad = self.g(x);
        self.push(Tensor::scalar(m), Op::Mean(x), grad)
    }

    /// Global average pooling `(C, H, W) -> (C)`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let out = Tensor::from_fn(&[c], |ci| self.value(x).channel(ci).iter().sum::<f64>() / n);
        let grad = self.g(x);
        self.push(out, Op::Gap(x), grad)
    }

    /// Global max pooling `(C, H, W) -> (C)`; ties resolve to the first index.
    pub fn gmp(&mut self, x: Var) -> Var {
        let (c, _, _) = self.value(x).chw();
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = self.value(x).channel(ci);
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            arg.push(bi);
            out.push(bv);
        }
        let grad = self.g(x);
        self.push(Tensor::from_vec(&[c], out).unwrap(), Op::Gmp(x, arg), grad)
    }

    /// `out[i] = x[idx[i]]` reshaped to `shape`; the building block of every
    /// reshape, transpose, slice and upsampling.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let out = Tensor::from_vec(shape, idx.iter().map(|&i| xv[i]).collect()).unwrap();
        let grad = self.g(x);
        self.push(out, Op::Gather(x, idx), grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n = self.value(x).len();
        assert_eq!(n, shape.iter().product::<usize>(), "reshape size");
        self.gather(x, (0..n).collect(), shape)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = self.value(x).rc();
        let idx = (0..m).flat_map(|j| (0..n).map(move |i| i * m + j)).collect();
        self.gather(x, idx, &[m, n])
    }

    /// `(C, H, W) -> (H·W, C)`
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let idx = (0..hw).flat_map(|p| (0..c).map(move |ci| ci * hw + p)).collect();
        self.gather(x, idx, &[hw, c])
    }

    /// `(H·W, C) -> (C, H, W)`
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (hw, c) = self.value(x).rc();
        assert_eq!(hw, h * w);
        let idx = (0..c).flat_map(|ci| (0..hw).map(move |p| p * c + ci)).collect();
        self.gather(x, idx, &[c, h, w])
    }

    /// `(C, H, W) -> (H/p · W/p, p·p·C)`; feature layout `(dy, dx, c)`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(h % p == 0 && w % p == 0, "patchify: {h}x{w} not divisible by {p}");
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(c * h * w);
        for ty in 0..gh {
            for tx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        for ci in 0..c {
                            idx.push((ci * h + ty * p + dy) * w + tx * p + dx);
                        }
                    }
                }
            }
        }
        self.gather(x, idx, &[gh * gw, p * p * c])
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, p: usize, c: usize, h: usize, w: usize) -> Var {
        let (gh, gw) = (h / p, w / p);
        let d = p * p * c;
        assert_eq!(self.shape(x), &[gh * gw, d]);
        let mut idx = vec![0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let t = (y / p) * gw + xx / p;
                    let f = ((y % p) * p + xx % p) * c + ci;
                    idx[(ci * h + y) * w + xx] = t * d + f;
                }
            }
        }
        self.gather(x, idx, &[c, h, w])
    }

    /// Nearest-neighbour 2× upsampling of `(C, H, W)`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (h2, w2) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(c * h2 * w2);
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    idx.push((ci * h + y / 2) * w + xx / 2);
                }
            }
        }
        self.gather(x, idx, &[c, h2, w2])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(start + len <= c);
        let hw = h * w;
        self.gather(x, (start * hw..(start + len) * hw).collect(), &[len, h, w])
    }

    /// Column slice of `(N, D)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).rc();
        assert!(start + len <= d);
        let idx = (0..n).flat_map(|i| (start..start + len).map(move |j| i * d + j)).collect();
        self.gather(x, idx, &[n, len])
    }

    /// Concatenation along the leading axis (channels for feature maps,
    /// elements for vectors). Trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat trailing dims");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let grad = parts.iter().any(|&p| self.g(p));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat(parts.to_vec()), grad)
    }

    /// Concatenation of `(N, D_i)` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<Var> = parts.iter().map(|&p| self.transpose(p)).collect();
        let cat = self.concat(&ts);
        self.transpose(cat)
    }

    /// Bilinear resize of `(C, H, W)` to `(C, oh, ow)`; half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let at = |y: usize, xx: usize| xv[(ci * h + y) * w + xx];
                    out[(ci * oh + oy) * ow + ox] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                }
            }
        }
        let grad = self.g(x);
        self.push(Tensor::from_vec(&[c, oh, ow], out).unwrap(), Op::ResizeBilinear(x), grad)
    }

    /// Mean per-pixel cross-entropy of class logits `(K, H, W)` against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (k, h, w) = self.value(logits).chw();
        let hw = h * w;
        assert_eq!(labels.len(), hw, "cross_entropy labels");
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            assert!(lab < k, "label {lab} out of range");
            let mx = (0..k).map(|c| lv[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log((0..k).map(|c| libm::exp(lv[c * hw + p] - mx)).sum::<f64>());
            total += lse - lv[lab * hw + p];
        }
        let grad = self.g(logits);
        self.push(
            Tensor::scalar(total / hw as f64),
            Op::CrossEntropy(logits, labels.to_vec()),
            grad,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, val(*a).shape(), |g| g.add_assign(dy));
                }
                if want(*b) {
                    acc(grads, *b, val(*b).shape(), |g| g.add_assign(dy));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, val(*a).shape(), |g| g.add_assign(dy));
                }
                if want(*b) {
                    acc(grads, *b, val(*b).shape(), |g| {
                        g.data_mut().iter_mut().zip(dy.data()).for_each(|(g, d)| *g -= d)
                    });
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = val(*b).data();
                    acc(grads, *a, val(*a).shape(), |g| {
                        for ((g, d), y) in g.data_mut().iter_mut().zip(dy.data()).zip(bv) {
                            *g += d * y;
                        }
                    });
                }
                if want(*b) {
                    let av = val(*a).data();
                    acc(grads, *b, val(*b).shape(), |g| {
                        for ((g, d), x) in g.data_mut().iter_mut().zip(dy.data()).zip(av) {
                            *g += d * x;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    acc(grads, *a, val(*a).shape(), |g| {
                        for ((g, d), y) in g.data_mut().iter_mut().zip(dy.data()).zip(bv) {
                            *g += d / y;
                        }
                    });
                }
                if want(*b) {
                    acc(grads, *b, val(*b).shape(), |g| {
                        for (((g, d), x), y) in g.data_mut().iter_mut().zip(dy.data()).zip(av).zip(bv) {
                            *g -= d * x / (y * y);
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                acc(grads, *a, val(*a).shape(), |g| {
                    for (g, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *g += k * d;
                    }
                });
            }
            Op::AddConst(a) => acc(grads, *a, val(*a).shape(), |g| g.add_assign(dy)),
            Op::ChannelAdd(x, b) => {
                if want(*x) {
                    acc(grads, *x, val(*x).shape(), |g| g.add_assign(dy));
                }
                if want(*b) {
                    let c = val(*b).len();
                    let per = dy.len() / c;
                    acc(grads, *b, &[c], |g| {
                        for (ci, ch) in dy.data().chunks(per).enumerate() {
                            g.data_mut()[ci] += ch.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::ChannelMul(x, w) => {
                let c = val(*w).len();
                let per = dy.len() / c;
                if want(*x) {
                    let wv = val(*w).data();
                    acc(grads, *x, val(*x).shape(), |g| {
                        for (ci, (gc, dc)) in g.data_mut().chunks_mut(per).zip(dy.data().chunks(per)).enumerate() {
                            tensor::axpy(gc, wv[ci], dc);
                        }
                    });
                }
                if want(*w) {
                    let xv = val(*x).data();
                    acc(grads, *w, &[c], |g| {
                        for (ci, (xc, dc)) in xv.chunks(per).zip(dy.data().chunks(per)).enumerate() {
                            g.data_mut()[ci] += tensor::dot(xc, dc);
                        }
                    });
                }
            }
            Op::RowAdd(x, b) => {
                if want(*x) {
                    acc(grads, *x, val(*x).shape(), |g| g.add_assign(dy));
                }
                if want(*b) {
                    let d = val(*b).len();
                    acc(grads, *b, &[d], |g| {
                        for row in dy.data().chunks(d) {
                            g.data_mut().iter_mut().zip(row).for_each(|(g, r)| *g += r);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).rc();
                let (_, m) = val(*b).rc();
                if want(*a) {
                    let bv = val(*b).data();
                    acc(grads, *a, &[n, k], |g| tensor::mm_nt(dy.data(), bv, g.data_mut(), n, m, k));
                }
                if want(*b) {
                    let av = val(*a).data();
                    acc(grads, *b, &[k, m], |g| tensor::mm_tn(av, dy.data(), g.data_mut(), n, k, m));
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = val(*a).rc();
                let (m, _) = val(*b).rc();
                if want(*a) {
                    let bv = val(*b).data();
                    acc(grads, *a, &[n, k], |g| tensor::mm_nn(dy.data(), bv, g.data_mut(), n, m, k));
                }
                if want(*b) {
                    let av = val(*a).data();
                    acc(grads, *b, &[m, k], |g| tensor::mm_tn(dy.data(), av, g.data_mut(), n, m, k));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (wx, ww) = (want(*x), want(*w));
                if wx || ww {
                    let mut dx = if wx { Some(take_or_zero(grads, *x, val(*x).shape())) } else { None };
                    let mut dw = if ww { Some(take_or_zero(grads, *w, val(*w).shape())) } else { None };
                    tensor::conv2d_backward(
                        val(*x).data(),
                        val(*w).data(),
                        dy.data(),
                        *geom,
                        dx.as_mut().map(|t| t.data_mut()),
                        dw.as_mut().map(|t| t.data_mut()),
                    );
                    if let Some(t) = dx {
                        grads[x.0] = Some(t);
                    }
                    if let Some(t) = dw {
                        grads[w.0] = Some(t);
                    }
                }
                if let Some(b) = b {
                    if want(*b) {
                        let per = dy.len() / geom.cout;
                        acc(grads, *b, &[geom.cout], |g| {
                            for (ci, ch) in dy.data().chunks(per).enumerate() {
                                g.data_mut()[ci] += ch.iter().sum::<f64>();
                            }
                        });
                    }
                }
            }
            Op::Unary(x, f) => {
                let xv = val(*x).data();
                let yv = node.value.data();
                acc(grads, *x, val(*x).shape(), |g| {
                    for (((g, d), &xi), &yi) in g.data_mut().iter_mut().zip(dy.data()).zip(xv).zip(yv) {
                        *g += d * f.deriv(xi, yi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (_, m) = node.value.rc();
                let yv = node.value.data();
                acc(grads, *x, node.value.shape(), |g| {
                    for ((gr, dr), yr) in g.data_mut().chunks_mut(m).zip(dy.data().chunks(m)).zip(yv.chunks(m)) {
                        let s = tensor::dot(dr, yr);
                        for j in 0..m {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = node.value.rc();
                let gv = val(*gamma).data();
                if want(*x) {
                    acc(grads, *x, &[n, d], |g| {
                        for r in 0..n {
                            let dyr = &dy.data()[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dxh = dyr[j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let gr = &mut g.data_mut()[r * d..(r + 1) * d];
                            for j in 0..d {
                                gr[j] += rstd[r] * (dyr[j] * gv[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
                }
                if want(*gamma) {
                    acc(grads, *gamma, &[d], |g| {
                        for (dr, xr) in dy.data().chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                g.data_mut()[j] += dr[j] * xr[j];
                            }
                        }
                    });
                }
                if want(*beta) {
                    acc(grads, *beta, &[d], |g| {
                        for dr in dy.data().chunks(d) {
                            g.data_mut().iter_mut().zip(dr).for_each(|(g, r)| *g += r);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let d = dy.item();
                acc(grads, *x, val(*x).shape(), |g| g.data_mut().iter_mut().for_each(|v| *v += d));
            }
            Op::Mean(x) => {
                let d = dy.item() / val(*x).len() as f64;
                acc(grads, *x, val(*x).shape(), |g| g.data_mut().iter_mut().for_each(|v| *v += d));
            }
            Op::Gap(x) => {
                let (_, h, w) = val(*x).chw();
                let per = h * w;
                acc(grads, *x, val(*x).shape(), |g| {
                    for (ci, ch) in g.data_mut().chunks_mut(per).enumerate() {
                        let d = dy.data()[ci] / per as f64;
                        ch.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::Gmp(x, arg) => {
                let (_, h, w) = val(*x).chw();
                let per = h * w;
                acc(grads, *x, val(*x).shape(), |g| {
                    for (ci, &a) in arg.iter().enumerate() {
                        g.data_mut()[ci * per + a] += dy.data()[ci];
                    }
                });
            }
            Op::Gather(x, idx) => {
                acc(grads, *x, val(*x).shape(), |g| {
                    let gd = g.data_mut();
                    for (&j, d) in idx.iter().zip(dy.data()) {
                        gd[j] += d;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if want(p) {
                        let slice = &dy.data()[off..off + n];
                        acc(grads, p, val(p).shape(), |g| {
                            g.data_mut().iter_mut().zip(slice).for_each(|(g, d)| *g += d)
                        });
                    }
                    off += n;
                }
            }
            Op::ResizeBilinear(x) => {
                let (c, h, w) = val(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                acc(grads, *x, val(*x).shape(), |g| {
                    let gd = g.data_mut();
                    for ci in 0..c {
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let d = dy.data()[(ci * oh + oy) * ow + ox];
                                gd[(ci * h + y0) * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                                gd[(ci * h + y0) * w + x1] += d * (1.0 - fy) * fx;
                                gd[(ci * h + y1) * w + x0] += d * fy * (1.0 - fx);
                                gd[(ci * h + y1) * w + x1] += d * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels) => {
                let (k, h, w) = val(*logits).chw();
                let hw = h * w;
                let lv = val(*logits).data();
                let scale = dy.item() / hw as f64;
                acc(grads, *logits, &[k, h, w], |g| {
                    let gd = g.data_mut();
                    for (p, &lab) in labels.iter().enumerate() {
                        let mx = (0..k).map(|c| lv[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = (0..k).map(|c| libm::exp(lv[c * hw + p] - mx)).sum();
                        for c in 0..k {
                            let pr = libm::exp(lv[c * hw + p] - mx) / s;
                            let t = if c == lab { 1.0 } else { 0.0 };
                            gd[c * hw + p] += scale * (pr - t);
                        }
                    }
                });
            }
        }
    }
}

fn take_or_zero(grads: &mut [Option<Tensor>], v: Var, shape: &[usize]) -> Tensor {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut Tensor)) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap());
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients summed over every use of each parameter in `graph`,
    /// sorted by parameter id.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(v, id) in &graph.params {
            let Some(g) = self.wrt(v) else { continue };
            match out.iter_mut().find(|(i, _)| *i == id) {
                Some((_, t)) => t.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
