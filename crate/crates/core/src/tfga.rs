//! Task feedback-guided adaptation.
//!
//! Features of the initial dehazed image (`F_id`) and of the downstream
//! task's response to it (`F_down`) interact through bidirectional cross
//! attention. The result is distilled by two channel-wise fusion blocks into
//! `F_idd`, which also yields per-element softmax weights `Q_id`/`Q_down`:
//!
//! `F_id,dow = Conv(F_id ⊙ Q_id + F_down ⊙ Q_down + F_idd)`
//!
//! The fused feature is concatenated with the deepest encoder output,
//! projected by a convolution and scaled per channel into the deep FFM
//! injection. The scale starts at zero.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::downstream::{FeedbackKind, TaskFeedback};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{attend, ChannelGate, Conv2d, Linear, PixelMlp};
use crate::param::{Init, ParamId, ParamStore};

pub const NAMESPACE: &str = "tfga";

/// Channel-wise feature fusion block: `conv3x3(x + x ⊙ gate(x))`, where the
/// gate is GAP → 2-layer MLP (reduction 4) → sigmoid.
#[derive(Clone, Debug)]
pub struct Cffb {
    pub gate: ChannelGate,
    pub conv: Conv2d,
}

impl Cffb {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gate: ChannelGate::new(&mut s, "gate", c, 4),
            conv: Conv2d::new(&mut s, "conv", c, c, 3, 1),
        }
    }

    /// Output convolution zero-initialised: the block starts as the zero map.
    pub fn zero_out(init: &mut Init, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gate: ChannelGate::new(&mut s, "gate", c, 4),
            conv: Conv2d::zeroed(&mut s, "conv", c, c, 3),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let gate = self.gate.gate(g, ps, x);
        let gated = g.channel_mul(x, gate);
        let y = g.add(x, gated);
        self.conv.forward(g, ps, y)
    }
}

/// Single-head cross attention between two token sets; no positional encoding.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            q: Linear::new(&mut s, "q", c, c),
            k: Linear::new(&mut s, "k", c, c),
            v: Linear::new(&mut s, "v", c, c),
        }
    }

    /// `query_src` and `kv_src` are token matrices `(N, C)`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, query_src: Var, kv_src: Var) -> Var {
        let q = self.q.forward(g, ps, query_src);
        let k = self.k.forward(g, ps, kv_src);
        let v = self.v.forward(g, ps, kv_src);
        attend(g, q, k, v)
    }
}

/// The four directional cross-attention outputs, as `(C, H', W')` maps.
#[derive(Clone, Copy, Debug)]
pub struct CrossOutputs {
    /// `F_id,down`: conv + linear projection of `[F_id, F_down]`.
    pub fused: Var,
    pub id_to_c: Var,
    pub c_to_id: Var,
    pub down_id_to_c: Var,
    pub down_c_to_id: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct WeightPair {
    pub q_id: Var,
    pub q_down: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TfgaOutput {
    pub f_id: Var,
    pub f_down: Var,
    pub f_idd: Var,
    pub weights: WeightPair,
    /// `F_id,dow`
    pub fused: Var,
    /// Deep FFM modulation tensor.
    pub injection: Var,
}

#[derive(Clone, Debug)]
pub struct Tfga {
    pub channels: usize,
    pub image_adapter: [Conv2d; 3],
    pub feedback_adapters: Vec<(FeedbackKind, Conv2d)>,
    pub fuse_conv: Conv2d,
    pub fuse_linear: Linear,
    /// Query from the fused feature, keys/values from `F_id` (id → c).
    pub id_from_fused: CrossAttention,
    /// Query from `F_id`, keys/values from the fused feature (c → id).
    pub id_to_fused: CrossAttention,
    pub down_from_fused: CrossAttention,
    pub down_to_fused: CrossAttention,
    pub mix_a: Conv2d,
    pub mix_b: Conv2d,
    pub cffb1: Cffb,
    pub cffb2: Cffb,
    pub head_id: PixelMlp,
    pub head_down: PixelMlp,
    pub out_conv: Conv2d,
    pub inject: Conv2d,
    pub inject_scale: ParamId,
}

impl Tfga {
    /// `feedback` lists every payload kind this instance accepts together with
    /// its channel count.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, feedback: &[(FeedbackKind, usize)]) -> Self {
        let c = channels;
        let mut init = Init::new(store, rng, NAMESPACE);
        let i = &mut init;
        let image_adapter = {
            let mut s = i.sub("adapt_img");
            [
                Conv2d::new(&mut s, "conv1", 3, 16, 3, 2),
                Conv2d::new(&mut s, "conv2", 16, 32, 3, 2),
                Conv2d::new(&mut s, "conv3", 32, c, 3, 1),
            ]
        };
        let feedback_adapters = {
            let mut s = i.sub("adapt_fb");
            feedback
                .iter()
                .map(|&(k, ch)| (k, Conv2d::new(&mut s, k.name(), ch, c, 1, 1)))
                .collect()
        };
        Self {
            channels: c,
            image_adapter,
            feedback_adapters,
            fuse_conv: Conv2d::new(i, "fuse_conv", 2 * c, c, 1, 1),
            fuse_linear: Linear::new(i, "fuse_linear", c, c),
            id_from_fused: CrossAttention::new(i, "attn_id_fwd", c),
            id_to_fused: CrossAttention::new(i, "attn_id_rev", c),
            down_from_fused: CrossAttention::new(i, "attn_down_fwd", c),
            down_to_fused: CrossAttention::new(i, "attn_down_rev", c),
            mix_a: Conv2d::new(i, "mix_a", 2 * c, c, 3, 1),
            mix_b: Conv2d::new(i, "mix_b", 2 * c, c, 3, 1),
            cffb1: Cffb::new(i, "cffb1", c),
            cffb2: Cffb::new(i, "cffb2", c),
            head_id: PixelMlp::zero_head(i, "head_id", c, c, c),
            head_down: PixelMlp::zero_head(i, "head_down", c, c, c),
            out_conv: Conv2d::new(i, "out_conv", c, c, 3, 1),
            inject: Conv2d::new(i, "inject", 2 * c, c, 3, 1),
            inject_scale: i.zeros("inject_scale", &[c]),
        }
    }

    /// `F_id`: three strided convolutions (strides 2, 2, 1) to `(C, H/4, W/4)`.
    pub fn adapt_image(&self, g: &mut Graph, ps: &ParamStore, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::Input(format!("feature adapter needs (3, H, W) with H, W divisible by 4, got {s:?}")));
        }
        let mut x = image;
        for (n, conv) in self.image_adapter.iter().enumerate() {
            x = conv.forward(g, ps, x);
            if n + 1 < self.image_adapter.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    /// `F_down`: bilinear resize of the payload to `(h, w)` followed by a 1×1
    /// projection to `C` channels (the two commute).
    pub fn adapt_feedback(&self, g: &mut Graph, ps: &ParamStore, feedback: &TaskFeedback, h: usize, w: usize) -> Result<Var> {
        let kind = feedback.kind();
        let conv = self
            .feedback_adapters
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Adapter(format!("no feedback adapter for {kind:?} payloads")))?;
        let payload = feedback.tensor();
        let want_c = ps.get(conv.weight).shape()[1];
        if payload.rank() != 3 || payload.shape()[0] != want_c {
            return Err(Error::Adapter(format!(
                "{kind:?} payload has shape {:?}, adapter expects {want_c} channels",
                payload.shape()
            )));
        }
        let x = g.constant(payload.clone());
        let x = g.resize_bilinear(x, h, w);
        Ok(conv.forward(g, ps, x))
    }

    pub fn cross_attention(&self, g: &mut Graph, ps: &ParamStore, f_id: Var, f_down: Var) -> Result<CrossOutputs> {
        if g.shape(f_id) != g.shape(f_down) {
            return Err(shape_err("bidirectional_cross_attention", g.shape(f_id), g.shape(f_down)));
        }
        Ok(self.cross_attention_unchecked(g, ps, f_id, f_down))
    }

    fn cross_attention_unchecked(&self, g: &mut Graph, ps: &ParamStore, f_id: Var, f_down: Var) -> CrossOutputs {
        let (_, h, w) = g.value(f_id).chw();
        let cat = g.concat(&[f_id, f_down]);
        let fused = self.fuse_conv.forward(g, ps, cat);
        let fused_t = g.to_tokens(fused);
        let fused_t = self.fuse_linear.forward(g, ps, fused_t);
        let id_t = g.to_tokens(f_id);
        let down_t = g.to_tokens(f_down);

        let a = self.id_from_fused.forward(g, ps, fused_t, id_t);
        let b = self.id_to_fused.forward(g, ps, id_t, fused_t);
        let c = self.down_from_fused.forward(g, ps, fused_t, down_t);
        let d = self.down_to_fused.forward(g, ps, down_t, fused_t);
        CrossOutputs {
            fused: g.from_tokens(fused_t, h, w),
            id_to_c: g.from_tokens(a, h, w),
            c_to_id: g.from_tokens(b, h, w),
            down_id_to_c: g.from_tokens(c, h, w),
            down_c_to_id: g.from_tokens(d, h, w),
        }
    }

    /// Softmax across the two branches, per element.
    pub fn weight_generation(&self, g: &mut Graph, ps: &ParamStore, f_idd: Var) -> WeightPair {
        let a = self.head_id.forward(g, ps, f_idd);
        let b = self.head_down.forward(g, ps, f_idd);
        pair_softmax(g, a, b)
    }

    /// `F_idd` from the four attention outputs.
    pub fn distill(&self, g: &mut Graph, ps: &ParamStore, x: &CrossOutputs) -> Var {
        let ca = g.concat(&[x.id_to_c, x.down_c_to_id]);
        let ca = self.mix_a.forward(g, ps, ca);
        let cb = g.concat(&[x.c_to_id, x.down_id_to_c]);
        let cb = self.mix_b.forward(g, ps, cb);
        let s = g.add(ca, cb);
        let s = self.cffb1.forward(g, ps, s);
        self.cffb2.forward(g, ps, s)
    }

    /// `Conv(F_id ⊙ Q_id + F_down ⊙ Q_down + F_idd)`
    pub fn combine(&self, g: &mut Graph, ps: &ParamStore, f_id: Var, f_down: Var, q: WeightPair, f_idd: Var) -> Var {
        let s = weighted_sum(g, f_id, f_down, q, f_idd);
        self.out_conv.forward(g, ps, s)
    }

    /// Full fusion `F_id,dow` for an adapted feature pair.
    pub fn fuse(&self, g: &mut Graph, ps: &ParamStore, f_id: Var, f_down: Var) -> Result<(Var, Var, WeightPair)> {
        let x = self.cross_attention(g, ps, f_id, f_down)?;
        let f_idd = self.distill(g, ps, &x);
        let q = self.weight_generation(g, ps, f_idd);
        Ok((self.combine(g, ps, f_id, f_down, q, f_idd), f_idd, q))
    }

    /// Deep FFM modulation: conv over `[F_id,dow, F_e^l]` times a
    /// zero-initialised per-channel scale.
    /// The previous encoder scale joins inside the FFM on the network side.
    pub fn inject_to_ffm(&self, g: &mut Graph, ps: &ParamStore, fused: Var, deepest: Var) -> Result<Var> {
        if g.shape(fused) != g.shape(deepest) {
            return Err(shape_err("inject_to_ffm", g.shape(fused), g.shape(deepest)));
        }
        let cat = g.concat(&[fused, deepest]);
        let y = self.inject.forward(g, ps, cat);
        let scale = g.param(ps, self.inject_scale);
        Ok(g.channel_mul(y, scale))
    }

    /// Feedback-to-injection pipeline for one dehazed image.
    pub fn run(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        dehazed: Var,
        feedback: &TaskFeedback,
        deepest: Var,
    ) -> Result<TfgaOutput> {
        let f_id = self.adapt_image(g, ps, dehazed)?;
        let (_, h, w) = g.value(f_id).chw();
        let f_down = self.adapt_feedback(g, ps, feedback, h, w)?;
        let (fused, f_idd, weights) = self.fuse(g, ps, f_id, f_down)?;
        let injection = self.inject_to_ffm(g, ps, fused, deepest)?;
        Ok(TfgaOutput {
            f_id,
            f_down,
            f_idd,
            weights,
            fused,
            injection,
        })
    }
}

/// `(σ(a − b), σ(b − a))`: the two-way softmax of `a` and `b`.
pub fn pair_softmax(g: &mut Graph, a: Var, b: Var) -> WeightPair {
    let d = g.sub(a, b);
    let q_id = g.sigmoid(d);
    let nd = g.scale(d, -1.0);
    let q_down = g.sigmoid(nd);
    WeightPair { q_id, q_down }
}

/// `F_id ⊙ Q_id + F_down ⊙ Q_down + F_idd`
pub fn weighted_sum(g: &mut Graph, f_id: Var, f_down: Var, q: WeightPair, f_idd: Var) -> Var {
    let a = g.mul(f_id, q.q_id);
    let b = g.mul(f_down, q.q_down);
    let s = g.add(a, b);
    g.add(s, f_idd)
}
