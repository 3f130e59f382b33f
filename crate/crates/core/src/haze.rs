//! Atmospheric scattering: synthesis of hazy images from clear ones and
//! depth, and the exact analytic inverse used as a reference.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Inversion refuses transmissions below this; noise amplification is at
/// most `1 / T_MIN` = 20×.
pub const T_MIN: f64 = 0.05;

/// Sampling ranges used when synthesising training pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeRanges {
    pub beta_min: f64,
    pub beta_max: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for HazeRanges {
    fn default() -> Self {
        Self {
            beta_min: 0.4,
            beta_max: 1.6,
            a_min: 0.7,
            a_max: 1.0,
        }
    }
}

impl HazeRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.beta_min
            && self.beta_min <= self.beta_max
            && 0.0 <= self.a_min
            && self.a_min <= self.a_max
            && self.a_max <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid haze ranges {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> HazeParams {
        let beta = uniform(rng, self.beta_min, self.beta_max);
        let mut a = [0.0; 3];
        for c in &mut a {
            *c = uniform(rng, self.a_min, self.a_max);
        }
        HazeParams { beta, airlight: a }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Scene depth in metres, row-major `H × W`, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(shape_err("DepthMap::new", &[h, w], &[values.len()]));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("depth contains non-finite value {v}")));
        }
        if let Some(v) = values.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Input(format!("depth must be strictly positive, found {v}")));
        }
        Ok(Self { h, w, values })
    }

    pub fn constant(h: usize, w: usize, d: f64) -> Result<Self> {
        Self::new(h, w, alloc::vec![d; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// As a `(1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.h, self.w], self.values.clone()).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    pub beta: f64,
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn new(beta: f64, airlight: [f64; 3]) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Input(format!("beta must be >= 0, got {beta}")));
        }
        if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input(format!("airlight outside [0,1]: {airlight:?}")));
        }
        Ok(Self { beta, airlight })
    }
}

/// Per-pixel transmission in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl TransmissionMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Fraction of pixels strictly below `t_min`.
    pub fn fraction_below(&self, t_min: f64) -> f64 {
        self.values.iter().filter(|&&t| t < t_min).count() as f64 / self.values.len() as f64
    }
}

/// `t(x) = exp(−β·d(x))`. Very deep pixels underflow towards 0, and to
/// exactly 0 once `β·d` exceeds ~745; callers that divide by `t` must go
/// through [`invert_haze`], which guards with [`T_MIN`].
pub fn transmission(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Input(format!("beta must be >= 0, got {beta}")));
    }
    let values = depth.values.iter().map(|&d| libm::exp(-beta * d)).collect();
    Ok(TransmissionMap {
        h: depth.h,
        w: depth.w,
        values,
    })
}

fn check_image(op: &'static str, img: &Tensor, depth: &DepthMap) -> Result<()> {
    img.ensure_shape(op, &[3, depth.h, depth.w])
}

/// `J̃ = J·t + A·(1 − t)`, applied per channel.
pub fn synthesize_haze(clear: &Tensor, depth: &DepthMap, params: &HazeParams) -> Result<Tensor> {
    check_image("synthesize_haze", clear, depth)?;
    if clear.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("clear image outside [0,1]".into()));
    }
    let t = transmission(depth, params.beta)?;
    Ok(synthesize_with(clear, &t, &params.airlight))
}

/// Synthesis from an explicit transmission map.
pub fn synthesize_with(clear: &Tensor, t: &TransmissionMap, airlight: &[f64; 3]) -> Tensor {
    let hw = t.h * t.w;
    let mut out = clear.clone();
    for (c, chan) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = airlight[c];
        for (v, &tt) in chan.iter_mut().zip(&t.values) {
            *v = (*v * tt + a * (1.0 - tt)).clamp(0.0, 1.0);
        }
    }
    out
}

/// `J = (J̃ − A·(1 − t)) / t`, clamped to `[0, 1]`.
pub fn invert_haze(hazy: &Tensor, depth: &DepthMap, params: &HazeParams) -> Result<Tensor> {
    check_image("invert_haze", hazy, depth)?;
    let t = transmission(depth, params.beta)?;
    invert_with(hazy, &t, &params.airlight)
}

pub fn invert_with(hazy: &Tensor, t: &TransmissionMap, airlight: &[f64; 3]) -> Result<Tensor> {
    let fraction = t.fraction_below(T_MIN);
    if fraction > 0.0 {
        return Err(Error::DegenerateTransmission { t_min: T_MIN, fraction });
    }
    let hw = t.h * t.w;
    let mut out = hazy.clone();
    for (c, chan) in out.data_mut().chunks_mut(hw).enumerate() {
        let a = airlight[c];
        for (v, &tt) in chan.iter_mut().zip(&t.values) {
            *v = ((*v - a * (1.0 - tt)) / tt).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(&[3, h, w], v)
    }

    #[test]
    fn zero_beta_is_unit_transmission_and_identity() {
        let d = DepthMap::new(2, 3, alloc::vec![0.5, 1.0, 2.0, 3.0, 4.0, 9.0]).unwrap();
        let t = transmission(&d, 0.0).unwrap();
        assert!(t.values().iter().all(|&v| v == 1.0));
        let j = Tensor::from_fn(&[3, 2, 3], |i| (i as f64) / 18.0);
        let p = HazeParams::new(0.0, [0.8, 0.9, 1.0]).unwrap();
        assert_eq!(synthesize_haze(&j, &d, &p).unwrap(), j);
        assert_eq!(invert_haze(&j, &d, &p).unwrap(), j);
    }

    #[test]
    fn ln2_gives_half_transmission() {
        let d = DepthMap::constant(4, 4, 1.0).unwrap();
        let t = transmission(&d, core::f64::consts::LN_2).unwrap();
        assert!(t.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn deep_pixels_have_vanishing_transmission() {
        let d = DepthMap::constant(1, 1, 100.0).unwrap();
        let t = transmission(&d, 1.0).unwrap();
        assert!(t.values()[0] <= 1e-40);
        assert!(t.values()[0] >= 0.0);
        assert!(matches!(
            invert_with(&img(1, 1, 0.5), &t, &[0.5; 3]),
            Err(Error::DegenerateTransmission { fraction, .. }) if fraction == 1.0
        ));
    }

    #[test]
    fn hand_case_three_quarters() {
        let d = DepthMap::constant(2, 2, 1.0).unwrap();
        let p = HazeParams::new(core::f64::consts::LN_2, [0.5; 3]).unwrap();
        let hazy = synthesize_haze(&img(2, 2, 1.0), &d, &p).unwrap();
        assert!(hazy.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        let back = invert_haze(&hazy, &d, &p).unwrap();
        assert!(back.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn full_haze_limit_is_airlight() {
        let t = TransmissionMap {
            h: 1,
            w: 2,
            values: alloc::vec![0.0, 0.0],
        };
        let out = synthesize_with(&img(1, 2, 0.3), &t, &[0.7, 0.8, 0.9]);
        assert_eq!(out.data(), &[0.7, 0.7, 0.8, 0.8, 0.9, 0.9]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DepthMap::new(1, 2, alloc::vec![1.0, f64::NAN]).is_err());
        assert!(DepthMap::new(1, 2, alloc::vec![1.0, 0.0]).is_err());
        assert!(HazeParams::new(-0.1, [0.5; 3]).is_err());
        assert!(HazeParams::new(1.0, [0.5, 1.2, 0.5]).is_err());
        let d = DepthMap::constant(2, 2, 1.0).unwrap();
        let p = HazeParams::new(1.0, [0.5; 3]).unwrap();
        assert!(matches!(
            synthesize_haze(&img(3, 2, 0.5), &d, &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn partial_degenerate_fraction_reported() {
        let d = DepthMap::new(1, 4, alloc::vec![0.1, 0.1, 10.0, 0.1]).unwrap();
        let p = HazeParams::new(1.0, [0.9; 3]).unwrap();
        match invert_haze(&img(1, 4, 0.5), &d, &p) {
            Err(Error::DegenerateTransmission { fraction, .. }) => assert_eq!(fraction, 0.25),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }
}
