//! Parameterised building blocks shared by every network in the crate.

use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::param::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.uniform_fan_in("weight", &[cout, cin, k, k], cin * k * k, 1.0);
        let bias = Some(s.zeros("bias", &[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Zero weights and zero bias: outputs exactly zero until trained.
    pub fn zeroed(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.zeros("weight", &[cout, cin, k, k]);
        let bias = Some(s.zeros("bias", &[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn no_bias(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.uniform_fan_in("weight", &[cout, cin, k, k], cin * k * k, 1.0);
        Self {
            weight,
            bias: None,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `y = x W + b` over rows of `(N, in)`; weight stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.uniform_fan_in("weight", &[din, dout], din, 1.0);
        let bias = s.zeros("bias", &[dout]);
        Self { weight, bias }
    }

    pub fn zeroed(init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        let weight = s.zeros("weight", &[din, dout]);
        let bias = s.zeros("bias", &[dout]);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w);
        g.row_add(y, b)
    }

    /// Applies the layer to a vector `(in)`, returning `(out)`.
    pub fn forward_vec(&self, g: &mut Graph, ps: &ParamStore, v: Var) -> Var {
        let n = g.shape(v)[0];
        let row = g.reshape(v, &[1, n]);
        let y = self.forward(g, ps, row);
        let m = g.shape(y)[1];
        g.reshape(y, &[m])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gamma: s.ones("gamma", &[d]),
            beta: s.zeros("beta", &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let ga = g.param(ps, self.gamma);
        let be = g.param(ps, self.beta);
        g.layer_norm_rows(x, ga, be)
    }
}

/// Two-layer GELU MLP over rows (or a single vector).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", din, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, dout),
        }
    }

    /// Output layer zero-initialised, so the MLP starts as the zero map.
    pub fn zero_head(init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", din, hidden),
            fc2: Linear::zeroed(&mut s, "fc2", hidden, dout),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, ps, x);
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }

    pub fn forward_vec(&self, g: &mut Graph, ps: &ParamStore, v: Var) -> Var {
        let h = self.fc1.forward_vec(g, ps, v);
        let h = g.gelu(h);
        self.fc2.forward_vec(g, ps, h)
    }
}

/// Per-pixel two-layer MLP on a `(C, H, W)` map, built from 1×1 convolutions.
#[derive(Clone, Debug)]
pub struct PixelMlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl PixelMlp {
    pub fn new(init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            fc1: Conv2d::new(&mut s, "fc1", din, hidden, 1, 1),
            fc2: Conv2d::new(&mut s, "fc2", hidden, dout, 1, 1),
        }
    }

    pub fn zero_head(init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            fc1: Conv2d::new(&mut s, "fc1", din, hidden, 1, 1),
            fc2: Conv2d::zeroed(&mut s, "fc2", hidden, dout, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, ps, x);
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Squeeze-and-excitation style gate: `sigmoid(MLP(GAP(x)))`, one value per channel.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub mlp: Mlp,
}

impl ChannelGate {
    pub fn new(init: &mut Init, name: &str, c: usize, reduction: usize) -> Self {
        let hidden = (c / reduction).max(1);
        Self {
            mlp: Mlp::new(init, name, c, hidden, c),
        }
    }

    /// Returns the `(C)` gate vector.
    pub fn gate(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let pooled = g.gap(x);
        let z = self.mlp.forward_vec(g, ps, pooled);
        g.sigmoid(z)
    }
}

/// Multi-head self-attention over token rows `(N, D)`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        assert!(d % heads == 0);
        let mut s = init.sub(name);
        Self {
            qkv: Linear::new(&mut s, "qkv", d, 3 * d),
            proj: Linear::new(&mut s, "proj", d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let d = g.shape(x)[1];
        let hd = d / self.heads;
        let qkv = self.qkv.forward(g, ps, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * hd, hd);
            let k = g.slice_cols(qkv, d + h * hd, hd);
            let v = g.slice_cols(qkv, 2 * d + h * hd, hd);
            outs.push(attend(g, q, k, v));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.proj.forward(g, ps, cat)
    }
}

/// Scaled dot-product attention: `softmax(q kᵀ / sqrt(d)) v`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Var {
    let d = g.shape(q)[1];
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let p = g.softmax_rows(scores);
    g.matmul(p, v)
}

/// Pre-norm transformer block on 2×2-patch tokens. Each patch is embedded to
/// `channels` dimensions, attended and mixed at that width, then projected
/// back to the patch and added to the input map.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub embed: Linear,
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub unembed: Linear,
    pub patch: usize,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, channels: usize, heads: usize, expansion: usize) -> Self {
        let patch = 2;
        let pd = patch * patch * channels;
        let d = channels;
        let mut s = init.sub(name);
        Self {
            embed: Linear::new(&mut s, "embed", pd, d),
            norm1: LayerNorm::new(&mut s, "norm1", d),
            attn: SelfAttention::new(&mut s, "attn", d, heads),
            norm2: LayerNorm::new(&mut s, "norm2", d),
            mlp: Mlp::new(&mut s, "mlp", d, expansion * d, d),
            unembed: Linear::new(&mut s, "unembed", d, pd),
            patch,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let (c, h, w) = g.value(x).chw();
        let p = g.patchify(x, self.patch);
        let t = self.embed.forward(g, ps, p);
        let n = self.norm1.forward(g, ps, t);
        let a = self.attn.forward(g, ps, n);
        let t = g.add(t, a);
        let n = self.norm2.forward(g, ps, t);
        let m = self.mlp.forward(g, ps, n);
        let t = g.add(t, m);
        let u = self.unembed.forward(g, ps, t);
        let y = g.unpatchify(u, self.patch, c, h, w);
        g.add(x, y)
    }
}
