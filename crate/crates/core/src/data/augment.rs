use rand::Rng;

use super::LesionSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Per-channel multiplicative factor drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            jitter: 0.1,
        }
    }
}

fn flip(t: &Tensor, vertical: bool) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    Tensor::from_fn(s.to_vec(), |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
        debug_assert!(ch < c);
        src[(ch * h + sy) * w + sx]
    })
}

/// Mirrors rows (top ↔ bottom) of image and mask.
pub fn flip_vertical(sample: &LesionSample) -> LesionSample {
    LesionSample {
        image: flip(&sample.image, true),
        mask: flip(&sample.mask, true),
        ..sample.clone()
    }
}

/// Mirrors columns (left ↔ right) of image and mask.
pub fn flip_horizontal(sample: &LesionSample) -> LesionSample {
    LesionSample {
        image: flip(&sample.image, false),
        mask: flip(&sample.mask, false),
        ..sample.clone()
    }
}

/// Independent vertical and horizontal flips applied to image and mask
/// together, then per-channel colour jitter on the image only.
pub fn augment(sample: &LesionSample, config: &AugmentConfig, rng: &mut impl Rng) -> LesionSample {
    let v = rng.random_bool(config.flip_prob);
    let h = rng.random_bool(config.flip_prob);
    let factors: [f64; 3] = std::array::from_fn(|_| {
        if config.jitter > 0.0 {
            rng.random_range(1.0 - config.jitter..=1.0 + config.jitter)
        } else {
            1.0
        }
    });
    let mut out = sample.clone();
    if v {
        out = flip_vertical(&out);
    }
    if h {
        out = flip_horizontal(&out);
    }
    let plane = out.side() * out.side();
    for (c, f) in factors.iter().enumerate() {
        for p in &mut out.image.data_mut()[c * plane..(c + 1) * plane] {
            *p = (*p * f).clamp(0.0, 1.0);
        }
    }
    out
}

/// Nearest-neighbour resampling to `target`×`target`; source pixel for
/// output `d` is `floor((d + 0.5)·S / target)`.
pub fn resize_normalize(sample: &LesionSample, target: usize) -> LesionSample {
    assert!(target >= 8, "target side must be at least 8");
    let s = sample.side();
    if s == target {
        return sample.clone();
    }
    let src_of = |d: usize| (((2 * d + 1) * s) / (2 * target)).min(s - 1);
    let resample = |t: &Tensor| {
        let c = t.shape()[0];
        let src = t.data();
        Tensor::from_fn([c, target, target], |i| {
            let (ch, y, x) = (i / (target * target), (i / target) % target, i % target);
            src[(ch * s + src_of(y)) * s + src_of(x)]
        })
    };
    let mut image = resample(&sample.image);
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut mask = resample(&sample.mask);
    for v in mask.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    LesionSample {
        image,
        mask,
        ..sample.clone()
    }
}
