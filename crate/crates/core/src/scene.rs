//! Procedural toy scenes: a clear image, its depth map and the downstream
//! ground truths derived from them.
//!
//! Brightness of flat objects falls with depth, so a small convolutional head
//! can read depth off a clear image while haze (which brightens with depth)
//! corrupts that cue.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::haze::DepthMap;
use crate::tensor::Tensor;

/// Axis-aligned box in pixel units, top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnn {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnn {
    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub clear: Tensor,
    pub depth: DepthMap,
    pub boxes: Vec<BoxAnn>,
}

/// Threshold on clear-image luma separating the two segmentation classes.
pub const SEG_LUMA_THRESHOLD: f64 = 0.5;

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-pixel class labels: 1 where the clear image's luma exceeds the threshold.
pub fn seg_labels(clear: &Tensor) -> Vec<usize> {
    let (_, h, w) = clear.chw();
    let hw = h * w;
    let d = clear.data();
    (0..hw)
        .map(|p| usize::from(luma(d[p], d[hw + p], d[2 * hw + p]) > SEG_LUMA_THRESHOLD))
        .collect()
}

fn random_hue(rng: &mut impl Rng) -> [f64; 3] {
    let mut c = [rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0), rng.gen_range(0.35..1.0)];
    let m = c.iter().cloned().fold(0.0, f64::max);
    c.iter_mut().for_each(|v| *v /= m);
    c
}

/// Object brightness as a function of depth.
fn value_at_depth(d: f64) -> f64 {
    (0.95 - 0.4 * d).clamp(0.2, 0.95)
}

pub fn generate(size: usize, rng: &mut impl Rng) -> Scene {
    let (h, w) = (size, size);
    let s = size as f64;
    let mut depth = vec![0.0; h * w];
    let mut rgb = vec![[0.0f64; 3]; h * w];

    // background: far at the top, near at the bottom, with smooth bumps
    let bg_hue = random_hue(rng);
    let bg_gain = rng.gen_range(0.6..1.1);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.15 * s..0.4 * s),
                rng.gen_range(-0.2..0.2),
            )
        })
        .collect();
    let (fx, fy, ph) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.0..6.28));
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut d = 2.0 - 1.4 * yf / s;
            for &(cx, cy, r, a) in &bumps {
                let q = ((xf - cx) * (xf - cx) + (yf - cy) * (yf - cy)) / (r * r);
                d += a * libm::exp(-q);
            }
            let d = d.max(0.3);
            depth[y * w + x] = d;
            let tex = 0.05 * libm::sin(fx * xf + ph) * libm::cos(fy * yf);
            let v = (bg_gain * value_at_depth(d) + tex).clamp(0.02, 1.0);
            rgb[y * w + x] = [bg_hue[0] * v, bg_hue[1] * v, bg_hue[2] * v];
        }
    }

    // flat objects at constant depth
    let n_obj = rng.gen_range(2..=4);
    for _ in 0..n_obj {
        let ow = rng.gen_range(0.2 * s..0.5 * s);
        let oh = rng.gen_range(0.2 * s..0.5 * s);
        let ox = rng.gen_range(0.0..s - ow);
        let oy = rng.gen_range(0.0..s - oh);
        let d = rng.gen_range(0.3..1.2);
        let hue = random_hue(rng);
        let v = value_at_depth(d);
        let stripes = rng.gen_range(0.5..1.5);
        fill_rect(ox, oy, ow, oh, w, h, |x, y| {
            let tex = 0.04 * libm::sin(stripes * (x as f64 + y as f64));
            depth[y * w + x] = d;
            let vv = (v + tex).clamp(0.02, 1.0);
            rgb[y * w + x] = [hue[0] * vv, hue[1] * vv, hue[2] * vv];
        });
    }

    // bright blobs: the detection targets
    let n_blob = rng.gen_range(1..=3);
    let mut boxes = Vec::with_capacity(n_blob);
    for _ in 0..n_blob {
        let side = libm::round(rng.gen_range(0.12 * s..0.25 * s));
        let bx = libm::round(rng.gen_range(0.0..s - side));
        let by = libm::round(rng.gen_range(0.0..s - side));
        let d = rng.gen_range(0.3..0.9);
        let tint = [rng.gen_range(0.9..1.0), rng.gen_range(0.9..1.0), rng.gen_range(0.9..1.0)];
        fill_rect(bx, by, side, side, w, h, |x, y| {
            depth[y * w + x] = d;
            rgb[y * w + x] = tint;
        });
        boxes.push(BoxAnn {
            x: bx,
            y: by,
            w: side,
            h: side,
        });
    }

    let hw = h * w;
    let mut clear = Tensor::zeros(&[3, h, w]);
    for (p, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            clear.data_mut()[c * hw + p] = px[c].clamp(0.0, 1.0);
        }
    }
    Scene {
        clear,
        depth: DepthMap::new(h, w, depth).expect("procedural depth is positive"),
        boxes,
    }
}

fn fill_rect(x0: f64, y0: f64, bw: f64, bh: f64, w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    let xs = (x0.max(0.0) as usize).min(w);
    let ys = (y0.max(0.0) as usize).min(h);
    let xe = (libm::ceil(x0 + bw).max(0.0) as usize).min(w);
    let ye = (libm::ceil(y0 + bh).max(0.0) as usize).min(h);
    for y in ys..ye {
        for x in xs..xe {
            f(x, y);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scenes_are_valid_and_reproducible() {
        let a = generate(32, &mut ChaCha8Rng::seed_from_u64(3));
        let b = generate(32, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.clear, b.clear);
        assert_eq!(a.depth, b.depth);
        assert!(a.clear.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.depth.values().iter().all(|&d| (0.1..=10.0).contains(&d)));
        assert!(!a.boxes.is_empty());
        let labels = seg_labels(&a.clear);
        let ones = labels.iter().filter(|&&l| l == 1).count();
        assert!(ones > 0, "blobs are always bright");
    }
}
