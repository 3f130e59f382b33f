//! Instruction-guided modulation.
//!
//! An instruction embedding `f_t` is adapted into channel space (`f'_t`),
//! combined with a pooled summary of the image feature (`f̃_s`) by the weight
//! generation block, and the resulting per-channel weights `W ∈ (0, 2)`
//! modulate the feature before a residual channel-wise fusion block:
//!
//! `F = CFFB(W ⊙ F̃) + F̃`
//!
//! Two independent sites exist: the encoder exit and the first decoder stage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::idn::{Site, SiteModulator};
use crate::layers::{Mlp, PixelMlp};
use crate::param::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::tfga::Cffb;

pub const NAMESPACE: &str = "igm";
pub const DEFAULT_TEXT_DIM: usize = 64;
pub const HIDDEN: usize = 128;

/// Unit-norm instruction vector `f_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding(Vec<f64>);

impl InstructionEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("instruction embedding must be non-empty and finite".into()));
        }
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.0.len()], self.0.clone()).unwrap()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = libm::sqrt(self.0.iter().map(|a| a * a).sum::<f64>());
        let nb = libm::sqrt(other.0.iter().map(|b| b * b).sum::<f64>());
        dot / (na * nb)
    }
}

/// Turns instruction text into an embedding.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<InstructionEmbedding>;
}

/// Case-folded token hashing into `dim` bins, a fixed seeded random
/// projection, then L2 normalisation.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl HashTextEncoder {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = libm::sqrt(3.0 / dim as f64);
        let projection = (0..dim * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { dim, projection }
    }

    fn bins(&self, text: &str) -> Vec<f64> {
        let mut counts = alloc::vec![0.0; self.dim];
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let lower: String = tok.chars().flat_map(char::to_lowercase).collect();
            let h = lower
                .bytes()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
            counts[(h % self.dim as u64) as usize] += 1.0;
        }
        counts
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<InstructionEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        let counts = self.bins(text);
        if counts.iter().all(|&c| c == 0.0) {
            return Err(Error::Input(format!("instruction {text:?} contains no word tokens")));
        }
        let d = self.dim;
        let mut v: Vec<f64> = (0..d)
            .map(|i| crate::tensor::dot(&self.projection[i * d..(i + 1) * d], &counts))
            .collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            return Err(Error::NonFinite("zero-norm instruction projection".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        InstructionEmbedding::new(v)
    }
}

/// Precomputed embeddings keyed by exact instruction string.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, text: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding for {text:?} has dim {}, table dim is {}",
                v.len(),
                self.dim
            )));
        }
        match self.entries.iter_mut().find(|(k, _)| k == text) {
            Some((_, old)) => *old = v,
            None => self.entries.push((String::from(text), v)),
        }
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl TextEncoder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<InstructionEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::Input("instruction text is empty".into()));
        }
        self.entries
            .iter()
            .find(|(k, _)| k == text)
            .map(|(_, v)| InstructionEmbedding::new(v.clone()))
            .unwrap_or_else(|| Err(Error::Lookup(String::from(text))))
    }
}

/// One modulation site.
#[derive(Clone, Debug)]
pub struct IgmSite {
    pub channels: usize,
    pub text_adapter: Mlp,
    pub refine_avg: PixelMlp,
    pub refine_max: PixelMlp,
    pub wgb: Mlp,
    pub cffb: Cffb,
}

impl IgmSite {
    pub fn new(init: &mut Init, name: &str, text_dim: usize, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            channels: c,
            text_adapter: Mlp::new(&mut s, "text_adapter", text_dim, HIDDEN, c),
            refine_avg: PixelMlp::new(&mut s, "refine_avg", c, HIDDEN, c),
            refine_max: PixelMlp::new(&mut s, "refine_max", c, HIDDEN, c),
            wgb: Mlp::zero_head(&mut s, "wgb", 2 * c, HIDDEN, c),
            cffb: Cffb::zero_out(&mut s, "cffb", c),
        }
    }

    /// `f'_t`: text embedding projected to this site's channel count.
    pub fn adapt_text(&self, g: &mut Graph, ps: &ParamStore, f_t: Var) -> Var {
        self.text_adapter.forward_vec(g, ps, f_t)
    }

    /// `f̃_s = GAP(MLP_avg(F)) + GMP(MLP_max(F))`.
    pub fn refine_image(&self, g: &mut Graph, ps: &ParamStore, f: Var) -> Var {
        let a = self.refine_avg.forward(g, ps, f);
        let m = self.refine_max.forward(g, ps, f);
        pooled_sum(g, a, m)
    }

    /// `W = 2·σ(MLP([f'_t, f̃_s]))`, one weight per channel.
    pub fn weights(&self, g: &mut Graph, ps: &ParamStore, text: Var, summary: Var) -> Var {
        let cat = g.concat(&[text, summary]);
        let z = self.wgb.forward_vec(g, ps, cat);
        let s = g.sigmoid(z);
        g.scale(s, 2.0)
    }

    /// `F = CFFB(W ⊙ F̃) + F̃`.
    pub fn apply_weights(&self, g: &mut Graph, ps: &ParamStore, f: Var, w: Var) -> Var {
        let bar = g.channel_mul(f, w);
        let c = self.cffb.forward(g, ps, bar);
        g.add(c, f)
    }

    pub fn modulate(&self, g: &mut Graph, ps: &ParamStore, f: Var, f_t: Var) -> Result<Var> {
        let c = g.shape(f)[0];
        if c != self.channels {
            return Err(Error::Config(format!(
                "IGM site built for {} channels applied to a {c}-channel feature",
                self.channels
            )));
        }
        let text_dim = ps.get(self.text_adapter.fc1.weight).shape()[0];
        if g.shape(f_t) != [text_dim] {
            return Err(Error::Config(format!(
                "instruction embedding shape {:?}, site expects [{text_dim}]",
                g.shape(f_t)
            )));
        }
        let text = self.adapt_text(g, ps, f_t);
        let summary = self.refine_image(g, ps, f);
        let w = self.weights(g, ps, text, summary);
        Ok(self.apply_weights(g, ps, f, w))
    }
}

/// `GAP(avg_branch) + GMP(max_branch)`
pub fn pooled_sum(g: &mut Graph, avg_branch: Var, max_branch: Var) -> Var {
    let a = g.gap(avg_branch);
    let m = g.gmp(max_branch);
    g.add(a, m)
}

#[derive(Clone, Debug)]
pub struct Igm {
    pub text_dim: usize,
    pub encoder_site: IgmSite,
    pub decoder_site: IgmSite,
}

impl Igm {
    /// `encoder_channels` is the deepest IDN width, `decoder_channels` the
    /// width of the first decoder stage.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, text_dim: usize, encoder_channels: usize, decoder_channels: usize) -> Self {
        let mut init = Init::new(store, rng, NAMESPACE);
        Self {
            text_dim,
            encoder_site: IgmSite::new(&mut init, "enc", text_dim, encoder_channels),
            decoder_site: IgmSite::new(&mut init, "dec", text_dim, decoder_channels),
        }
    }

    pub fn site(&self, site: Site) -> &IgmSite {
        match site {
            Site::EncoderExit => &self.encoder_site,
            Site::DecoderFirst => &self.decoder_site,
        }
    }
}

/// Adapts an [`Igm`] with a fixed instruction into the decoder's site hook.
pub struct IgmModulator<'a> {
    pub igm: &'a Igm,
    pub store: &'a ParamStore,
    pub instruction: Var,
}

impl SiteModulator for IgmModulator<'_> {
    fn modulate(&self, g: &mut Graph, site: Site, feature: Var) -> Var {
        self.igm
            .site(site)
            .modulate(g, self.store, feature, self.instruction)
            .expect("IGM sites are built from the IDN widths")
    }
}
