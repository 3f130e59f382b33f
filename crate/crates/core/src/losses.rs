//! Training objectives and the frozen perceptual feature extractor.
//!
//! All norms are means over elements so that the weights `λ`, `β1`, `β2` and
//! `γ` do not depend on image resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::tensor::Tensor;

/// Guard added to the contrastive denominator.
pub const RATIO_EPS: f64 = 1e-8;

/// Per-level weights of the default five-level extractor.
pub const DEFAULT_LEVEL_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta1: 0.1,
            beta2: 0.3,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        check_margins(self.beta1, self.beta2)
    }
}

fn check_margins(beta1: f64, beta2: f64) -> Result<()> {
    if !(beta1 < beta2) {
        return Err(Error::Config(format!("ranking margins need beta1 < beta2, got {beta1} >= {beta2}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Gelu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorLevel {
    /// `(Cout, Cin, k, k)`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Frozen multi-level feature pyramid. Level `v` consumes the output of level
/// `v − 1`; every level is reported.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    levels: Vec<ExtractorLevel>,
    weights: Vec<f64>,
    activation: Activation,
}

impl PerceptualExtractor {
    pub fn new(levels: Vec<ExtractorLevel>, weights: Vec<f64>, activation: Activation) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("perceptual extractor needs at least one level".into()));
        }
        if levels.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} extractor levels but {} level weights",
                levels.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("extractor level weights must be positive".into()));
        }
        let mut cin = 3;
        for (i, l) in levels.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 4 || s[1] != cin || s[2] != s[3] || l.bias.shape() != [s[0]] || l.stride == 0 {
                return Err(Error::Config(format!("extractor level {i} has inconsistent shape {s:?}")));
            }
            cin = s[0];
        }
        Ok(Self {
            levels,
            weights,
            activation,
        })
    }

    /// Seeded random five-level pyramid: widths 8, 16, 16, 32, 32; stride 1
    /// at the first level and 2 after.
    pub fn toy(rng: &mut ChaCha8Rng) -> Self {
        let widths = [8, 16, 16, 32, 32];
        let mut cin = 3;
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let fan_in = cin * 9;
                let bound = libm::sqrt(6.0 / fan_in as f64);
                let weight = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..bound));
                let bias = Tensor::from_fn(&[cout], |_| rng.gen_range(-0.1..0.1));
                cin = cout;
                ExtractorLevel {
                    weight,
                    bias,
                    stride: if i == 0 { 1 } else { 2 },
                }
            })
            .collect();
        Self::new(levels, DEFAULT_LEVEL_WEIGHTS.to_vec(), Activation::Gelu).expect("toy extractor is well formed")
    }

    /// One level, identity 1×1 map, weight 1. `φ(x) = x`.
    pub fn identity() -> Self {
        let weight = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let level = ExtractorLevel {
            weight,
            bias: Tensor::zeros(&[3]),
            stride: 1,
        };
        Self::new(vec![level], vec![1.0], Activation::Linear).unwrap()
    }

    pub fn levels(&self) -> &[ExtractorLevel] {
        &self.levels
    }

    pub fn level_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for l in &self.levels {
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            let k = l.weight.shape()[2];
            h = g.conv2d(h, w, Some(b), l.stride, k / 2);
            if self.activation == Activation::Gelu {
                h = g.unary(h, Unary::Gelu);
            }
            out.push(h);
        }
        out
    }

    pub fn features_of(&self, image: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        self.features(&mut g, x).into_iter().map(|v| g.value(v).clone()).collect()
    }
}

/// Mean absolute difference.
pub fn l1_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("l1_loss", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `Σ_v β_v · ‖φ_v(J) − φ_v(Ĵ)‖₁ / (‖φ_v(Ĵ) − φ_v(J̃)‖₁ + ε)` on a graph,
/// with `clear` and `hazy` constant.
pub fn contrastive_ratio_var(g: &mut Graph, extractor: &PerceptualExtractor, clear: Var, pred: Var, hazy: Var) -> Var {
    let fc = extractor.features(g, clear);
    let fp = extractor.features(g, pred);
    let fh = extractor.features(g, hazy);
    let mut terms = Vec::with_capacity(fc.len());
    for (v, &beta) in extractor.level_weights().iter().enumerate() {
        let num = l1_var(g, fc[v], fp[v]);
        let den = l1_var(g, fp[v], fh[v]);
        let den = g.add_const(den, RATIO_EPS);
        let r = g.div(num, den);
        terms.push(g.scale(r, beta));
    }
    g.sum_all(&terms)
}

fn check3(op: &'static str, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    if a.shape() != c.shape() {
        return Err(shape_err(op, a.shape(), c.shape()));
    }
    Ok(())
}

pub fn contrastive_ratio(clear: &Tensor, pred: &Tensor, hazy: &Tensor, extractor: &PerceptualExtractor) -> Result<f64> {
    check3("contrastive_ratio", clear, pred, hazy)?;
    let mut g = Graph::new();
    let (c, p, h) = (g.constant(clear.clone()), g.constant(pred.clone()), g.constant(hazy.clone()));
    let r = contrastive_ratio_var(&mut g, extractor, c, p, h);
    Ok(g.value(r).item())
}

/// `l1(Ĵ, J) + λ · contrastive_ratio(J, Ĵ, J̃)`; returns `(total, l1, ratio)`.
/// The contrastive branch is skipped entirely when `λ = 0`.
pub fn reconstruction_var(
    g: &mut Graph,
    extractor: &PerceptualExtractor,
    lambda: f64,
    clear: Var,
    pred: Var,
    hazy: Var,
) -> (Var, Var, Option<Var>) {
    let l1 = l1_var(g, pred, clear);
    if lambda == 0.0 {
        return (l1, l1, None);
    }
    let ratio = contrastive_ratio_var(g, extractor, clear, pred, hazy);
    let weighted = g.scale(ratio, lambda);
    (g.add(l1, weighted), l1, Some(ratio))
}

/// Stage-1 objective on the open-loop output `J'`.
pub fn predeh_loss(pred: &Tensor, clear: &Tensor, hazy: &Tensor, extractor: &PerceptualExtractor, lambda: f64) -> Result<f64> {
    check3("predeh_loss", clear, pred, hazy)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut g = Graph::new();
    let (c, p, h) = (g.constant(clear.clone()), g.constant(pred.clone()), g.constant(hazy.clone()));
    let (t, _, _) = reconstruction_var(&mut g, extractor, lambda, c, p, h);
    Ok(g.value(t).item())
}

/// Same objective applied to the modulated output `J'_w`.
pub fn dehaze_loss(modulated: &Tensor, clear: &Tensor, hazy: &Tensor, extractor: &PerceptualExtractor, lambda: f64) -> Result<f64> {
    predeh_loss(modulated, clear, hazy, extractor, lambda)
}

/// `max(ℓ_w − ℓ_p + β1, 0) + max(ℓ_w − ℓ_h + β2, 0)`
pub fn mcr_loss(l_w: f64, l_p: f64, l_h: f64, beta1: f64, beta2: f64) -> Result<f64> {
    check_margins(beta1, beta2)?;
    if [l_w, l_p, l_h].iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Input(format!("ranking terms must be >= 0: {l_w}, {l_p}, {l_h}")));
    }
    Ok((l_w - l_p + beta1).max(0.0) + (l_w - l_h + beta2).max(0.0))
}

/// Graph form of [`mcr_loss`]; `ℓ_p`, `ℓ_h` are constants of the sample.
pub fn mcr_var(g: &mut Graph, l_w: Var, l_p: f64, l_h: f64, beta1: f64, beta2: f64) -> Var {
    let a = g.add_const(l_w, beta1 - l_p);
    let a = g.relu(a);
    let b = g.add_const(l_w, beta2 - l_h);
    let b = g.relu(b);
    g.add(a, b)
}

/// Per-sample loss terms of the closed-loop objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ratio: f64,
    pub dehaze: f64,
    pub mcr: f64,
    pub down: f64,
    pub total: f64,
    pub l_w: f64,
    pub l_p: f64,
    pub l_h: f64,
}

impl LossBreakdown {
    /// Whether `ℓ_w < ℓ_p < ℓ_h` holds for this sample.
    pub fn ordered(&self) -> bool {
        self.l_w < self.l_p && self.l_p < self.l_h
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l1 += other.l1;
        self.ratio += other.ratio;
        self.dehaze += other.dehaze;
        self.mcr += other.mcr;
        self.down += other.down;
        self.total += other.total;
        self.l_w += other.l_w;
        self.l_p += other.l_p;
        self.l_h += other.l_h;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1 * k,
            ratio: self.ratio * k,
            dehaze: self.dehaze * k,
            mcr: self.mcr * k,
            down: self.down * k,
            total: self.total * k,
            l_w: self.l_w * k,
            l_p: self.l_p * k,
            l_h: self.l_h * k,
        }
    }
}

/// Inputs to the overall objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub ratio: f64,
    pub dehaze: f64,
    pub mcr: f64,
    pub down: f64,
    pub l_w: f64,
    pub l_p: f64,
    pub l_h: f64,
}

/// `total = dehaze + mcr + γ · down`
pub fn total_loss(parts: LossParts, gamma: f64) -> Result<LossBreakdown> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let total = parts.dehaze + parts.mcr + gamma * parts.down;
    let b = LossBreakdown {
        l1: parts.l1,
        ratio: parts.ratio,
        dehaze: parts.dehaze,
        mcr: parts.mcr,
        down: parts.down,
        total,
        l_w: parts.l_w,
        l_p: parts.l_p,
        l_h: parts.l_h,
    };
    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Tensor {
        Tensor::full(&[3, 4, 4], v)
    }

    #[test]
    fn l1_cases() {
        assert_eq!(l1_loss(&img(0.3), &img(0.3)).unwrap(), 0.0);
        assert!((l1_loss(&img(0.2), &img(0.5)).unwrap() - 0.3).abs() < 1e-12);
        let a = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37) % 1.0);
        let b = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.11) % 1.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        assert!(l1_loss(&img(0.0), &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn ratio_cases() {
        let id = PerceptualExtractor::identity();
        assert_eq!(contrastive_ratio(&img(0.4), &img(0.4), &img(0.9), &id).unwrap(), 0.0);
        let r = contrastive_ratio(&img(0.0), &img(0.1), &img(0.5), &id).unwrap();
        assert!((r - 0.1 / (0.4 + RATIO_EPS)).abs() < 1e-12 && (r - 0.25).abs() < 1e-7, "{r}");
        let deg = contrastive_ratio(&img(0.0), &img(0.5), &img(0.5), &id).unwrap();
        assert!(deg.is_finite() && deg > 1e6);
    }

    #[test]
    fn predeh_cases() {
        let id = PerceptualExtractor::identity();
        let (j, jp, jh) = (img(0.0), img(0.1), img(0.5));
        let l0 = predeh_loss(&jp, &j, &jh, &id, 0.0).unwrap();
        assert!((l0 - 0.1).abs() < 1e-12);
        let l = predeh_loss(&jp, &j, &jh, &id, 0.1).unwrap();
        assert!((l - 0.125).abs() < 1e-9, "{l}");
        assert_eq!(predeh_loss(&j, &j, &jh, &id, 0.1).unwrap(), 0.0);
        assert_eq!(dehaze_loss(&jp, &j, &jh, &id, 0.1).unwrap(), l);
    }

    #[test]
    fn mcr_cases() {
        assert_eq!(mcr_loss(0.1, 0.3, 0.6, 0.1, 0.3).unwrap(), 0.0);
        assert!((mcr_loss(0.5, 0.3, 0.4, 0.1, 0.3).unwrap() - 0.7).abs() < 1e-12);
        assert!((mcr_loss(0.0, 0.0, 0.0, 0.1, 0.3).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(mcr_loss(0.1, 0.2, 0.3, 0.3, 0.3), Err(Error::Config(_))));
    }

    #[test]
    fn total_cases() {
        let parts = LossParts {
            dehaze: 0.2,
            mcr: 0.1,
            down: 3.0,
            ..Default::default()
        };
        let b = total_loss(parts, 0.01).unwrap();
        assert!((b.total - 0.33).abs() < 1e-12);
        assert!((total_loss(parts, 0.0).unwrap().total - 0.3).abs() < 1e-12);
        assert!((b.dehaze + b.mcr + 0.01 * b.down - b.total).abs() < 1e-6);
    }

    #[test]
    fn extractor_rejects_bad_configs() {
        assert!(PerceptualExtractor::new(vec![], vec![], Activation::Linear).is_err());
        let id = PerceptualExtractor::identity();
        let lvl = id.levels()[0].clone();
        assert!(PerceptualExtractor::new(vec![lvl.clone()], vec![0.0], Activation::Linear).is_err());
        assert!(PerceptualExtractor::new(vec![lvl], vec![1.0, 1.0], Activation::Linear).is_err());
    }
}
