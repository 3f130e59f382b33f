//! Initial dehazing network: three transformer encoder stages, two decoder
//! stages and two feature fusion modules (FFMs), with hooks through which the
//! closed loop injects task feedback and instruction modulation.
//!
//! Layout for an `H × W` input and widths `[c1, c2, c3]`:
//!
//! ```text
//! enc1  (c1, H,   W  )  conv3x3 → transformer
//! enc2  (c2, H/2, W/2)  strided conv → transformer
//! enc3  (c3, H/4, W/4)  strided conv → transformer          = F_e^l
//! ffm_deep(enc3', lateral(resize(enc2)), injection?)         (c3, H/4, W/4)
//! dec1  (c2, H/2, W/2)  nearest up + conv → transformer       = F̃_d,1
//! ffm_mid(enc2, dec1')                                       (c2, H/2, W/2)
//! dec2  (c1, H,   W  )  nearest up + conv → transformer, + enc1
//! head  conv3x3 → 3, + hazy input, clamp [0, 1] (skipped by decode_raw)
//! ```
//!
//! `enc3'` and `dec1'` are the features after the optional site modulator.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ChannelGate, Conv2d, TransformerBlock};
use crate::param::{Init, ParamStore};
use crate::tensor::Tensor;

pub const NAMESPACE: &str = "idn";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdnConfig {
    pub channels: [usize; 3],
    pub heads: usize,
    pub mlp_expansion: usize,
}

impl Default for IdnConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            heads: 2,
            mlp_expansion: 2,
        }
    }
}

impl IdnConfig {
    pub fn validate(&self) -> Result<()> {
        for &c in &self.channels {
            if c == 0 || (4 * c) % self.heads != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} incompatible with {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn deep_channels(&self) -> usize {
        self.channels[2]
    }
}

/// Where an instruction modulator acts inside the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    /// Deepest encoder output, F̃_e,3.
    EncoderExit,
    /// First decoder stage output, F̃_d,1.
    DecoderFirst,
}

/// Replaces a decoder-side feature with a modulated version.
pub trait SiteModulator {
    fn modulate(&self, g: &mut Graph, site: Site, feature: Var) -> Var;
}

/// Leaves every site untouched.
pub struct IdentityModulator;

impl SiteModulator for IdentityModulator {
    fn modulate(&self, _g: &mut Graph, _site: Site, feature: Var) -> Var {
        feature
    }
}

/// Closed-loop inputs to the decoder. With both parts absent the decoder is
/// exactly the open-loop decoder.
#[derive(Clone, Copy, Default)]
pub struct ModulationBundle<'a> {
    /// Deep-scale FFM injection, `(c3, H/4, W/4)`.
    pub injection: Option<Var>,
    pub sites: Option<&'a dyn SiteModulator>,
}

/// Encoder outputs at the three scales, plus the input they came from.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub input: Var,
    pub scales: [Var; 3],
}

impl EncoderFeatures {
    /// F_e^l, the deepest encoder output.
    pub fn deepest(&self) -> Var {
        self.scales[2]
    }
}

/// Detached encoder activations, reusable across graphs (the closed loop
/// caches these because the hazy input never changes).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderCache {
    pub input: Tensor,
    pub scales: [Tensor; 3],
}

impl EncoderCache {
    pub fn attach(&self, g: &mut Graph) -> EncoderFeatures {
        EncoderFeatures {
            input: g.constant(self.input.clone()),
            scales: [
                g.constant(self.scales[0].clone()),
                g.constant(self.scales[1].clone()),
                g.constant(self.scales[2].clone()),
            ],
        }
    }
}

/// Feature fusion module.
#[derive(Clone, Debug)]
pub struct Ffm {
    pub merge: Conv2d,
    pub gate: ChannelGate,
    pub refine: Conv2d,
}

impl Ffm {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            merge: Conv2d::new(&mut s, "merge", 2 * c, c, 1, 1),
            gate: ChannelGate::new(&mut s, "gate", c, 4),
            refine: Conv2d::new(&mut s, "refine", c, c, 3, 1),
        }
    }

    /// Residual sum `enc + dec`, 1×1 merge of their concatenation, optional
    /// additive modulation, then a channel-gated 3×3 refinement with skip.
    pub fn fuse(&self, g: &mut Graph, ps: &ParamStore, enc: Var, dec: Var, modulation: Option<Var>) -> Var {
        let s = g.add(enc, dec);
        let cat = g.concat(&[enc, dec]);
        let m = self.merge.forward(g, ps, cat);
        let mut y = g.add(m, s);
        if let Some(md) = modulation {
            y = g.add(y, md);
        }
        let gate = self.gate.gate(g, ps, y);
        let gated = g.channel_mul(y, gate);
        let r = self.refine.forward(g, ps, gated);
        g.add(y, r)
    }

    /// Shape-checked entry point for [`Ffm::fuse`].
    pub fn try_fuse(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        enc: Var,
        dec: Var,
        modulation: Option<Var>,
    ) -> Result<Var> {
        if g.shape(enc) != g.shape(dec) {
            return Err(shape_err("ffm_fuse", g.shape(enc), g.shape(dec)));
        }
        if let Some(m) = modulation {
            if g.shape(m) != g.shape(enc) {
                return Err(shape_err("ffm_fuse modulation", g.shape(m), g.shape(enc)));
            }
        }
        let c = g.shape(enc)[0];
        let expect = ps.get(self.refine.weight).shape()[0];
        if c != expect {
            return Err(shape_err("ffm_fuse channels", &[c], &[expect]));
        }
        Ok(self.fuse(g, ps, enc, dec, modulation))
    }
}

#[derive(Clone, Debug)]
pub struct Idn {
    pub config: IdnConfig,
    pub embed: Conv2d,
    pub enc1: TransformerBlock,
    pub down2: Conv2d,
    pub enc2: TransformerBlock,
    pub down3: Conv2d,
    pub enc3: TransformerBlock,
    pub lateral: Conv2d,
    pub ffm_deep: Ffm,
    pub up1: Conv2d,
    pub dec1: TransformerBlock,
    pub ffm_mid: Ffm,
    pub up2: Conv2d,
    pub dec2: TransformerBlock,
    pub head: Conv2d,
}

impl Idn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: IdnConfig) -> Self {
        let [c1, c2, c3] = config.channels;
        let (nh, ex) = (config.heads, config.mlp_expansion);
        let mut init = Init::new(store, rng, NAMESPACE);
        let i = &mut init;
        Self {
            config,
            embed: Conv2d::new(i, "embed", 3, c1, 3, 1),
            enc1: TransformerBlock::new(i, "enc1", c1, nh, ex),
            down2: Conv2d::new(i, "down2", c1, c2, 3, 2),
            enc2: TransformerBlock::new(i, "enc2", c2, nh, ex),
            down3: Conv2d::new(i, "down3", c2, c3, 3, 2),
            enc3: TransformerBlock::new(i, "enc3", c3, nh, ex),
            lateral: Conv2d::new(i, "lateral", c2, c3, 1, 1),
            ffm_deep: Ffm::new(i, "ffm_deep", c3),
            up1: Conv2d::new(i, "up1", c3, c2, 3, 1),
            dec1: TransformerBlock::new(i, "dec1", c2, nh, ex),
            ffm_mid: Ffm::new(i, "ffm_mid", c2),
            up2: Conv2d::new(i, "up2", c2, c1, 3, 1),
            dec2: TransformerBlock::new(i, "dec2", c1, nh, ex),
            head: Conv2d::zeroed(i, "head", c1, 3, 3),
        }
    }

    pub fn check_input(image: &Tensor) -> Result<()> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::Input(format!("expected a (3, H, W) image, got {:?}", image.shape())));
        }
        let (_, h, w) = image.chw();
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Input(format!("image size {h}x{w} is not divisible by 4")));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> EncoderFeatures {
        let e = self.embed.forward(g, ps, x);
        let f1 = self.enc1.forward(g, ps, e);
        let d = self.down2.forward(g, ps, f1);
        let f2 = self.enc2.forward(g, ps, d);
        let d = self.down3.forward(g, ps, f2);
        let f3 = self.enc3.forward(g, ps, d);
        EncoderFeatures {
            input: x,
            scales: [f1, f2, f3],
        }
    }

    /// Validates bundle shapes against the encoder features.
    pub fn check_bundle(&self, g: &Graph, feats: &EncoderFeatures, bundle: &ModulationBundle) -> Result<()> {
        if let Some(inj) = bundle.injection {
            let want = g.shape(feats.deepest());
            if g.shape(inj) != want {
                return Err(shape_err("modulation injection", g.shape(inj), want));
            }
        }
        Ok(())
    }

    /// Decoded image clamped to `[0, 1]`.
    pub fn decode(&self, g: &mut Graph, ps: &ParamStore, feats: &EncoderFeatures, bundle: Option<&ModulationBundle>) -> Var {
        let y = self.decode_raw(g, ps, feats, bundle);
        g.unary(y, crate::graph::Unary::Clamp01)
    }

    /// Decoded image before the final clamp. Stage-1 training optimises this
    /// so that saturated pixels still receive gradient.
    pub fn decode_raw(&self, g: &mut Graph, ps: &ParamStore, feats: &EncoderFeatures, bundle: Option<&ModulationBundle>) -> Var {
        let [f1, f2, f3] = feats.scales;
        let sites = bundle.and_then(|b| b.sites);
        let injection = bundle.and_then(|b| b.injection);

        let enc_exit = match sites {
            Some(m) => m.modulate(g, Site::EncoderExit, f3),
            None => f3,
        };
        let (_, h3, w3) = g.value(f3).chw();
        let prev = g.resize_bilinear(f2, h3, w3);
        let lateral = self.lateral.forward(g, ps, prev);
        let deep = self.ffm_deep.fuse(g, ps, enc_exit, lateral, injection);

        let u = g.upsample2(deep);
        let u = self.up1.forward(g, ps, u);
        let d1 = self.dec1.forward(g, ps, u);
        let d1 = match sites {
            Some(m) => m.modulate(g, Site::DecoderFirst, d1),
            None => d1,
        };
        let mid = self.ffm_mid.fuse(g, ps, f2, d1, None);

        let u = g.upsample2(mid);
        let u = self.up2.forward(g, ps, u);
        let d2 = self.dec2.forward(g, ps, u);
        let d2 = g.add(d2, f1);
        let r = self.head.forward(g, ps, d2);
        g.add(r, feats.input)
    }

    /// Full pass on a graph: `decode(encode(x), bundle)`.
    pub fn forward_graph(&self, g: &mut Graph, ps: &ParamStore, x: Var, bundle: Option<&ModulationBundle>) -> Var {
        let feats = self.encode(g, ps, x);
        self.decode(g, ps, &feats, bundle)
    }

    /// Encoder activations of `hazy`, detached from any graph.
    pub fn encode_cached(&self, ps: &ParamStore, hazy: &Tensor) -> Result<EncoderCache> {
        Self::check_input(hazy)?;
        let mut g = Graph::new();
        let x = g.constant(hazy.clone());
        let f = self.encode(&mut g, ps, x);
        Ok(EncoderCache {
            input: hazy.clone(),
            scales: [
                g.value(f.scales[0]).clone(),
                g.value(f.scales[1]).clone(),
                g.value(f.scales[2]).clone(),
            ],
        })
    }

    /// Open-loop dehazing of one image, `J'`.
    pub fn dehaze(&self, ps: &ParamStore, hazy: &Tensor) -> Result<Tensor> {
        Self::check_input(hazy)?;
        let mut g = Graph::new();
        let x = g.constant(hazy.clone());
        let y = self.forward_graph(&mut g, ps, x, None);
        let out = g.value(y).clone();
        out.ensure_finite("idn output")?;
        Ok(out)
    }
}
