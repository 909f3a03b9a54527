//! Procedural lesion images with exact ground-truth masks.
//!
//! Each sample is a skin-toned background with one filled, textured ellipse
//! (the lesion) and optional overlaid artifacts: hair strokes, ruler ticks
//! and a global contrast reduction. The mask is the ellipse's pixel set and
//! never sees the artifacts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::LesionSample;
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::tensor::Tensor;

pub const MIN_MASK_FRACTION: f64 = 0.02;
pub const MAX_MASK_FRACTION: f64 = 0.60;
const MAX_ATTEMPTS: usize = 100;

/// Generative ranges of one lesion class. Ranges are `(lo, hi)` and sampled
/// uniformly per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassParams {
    /// Degrees.
    pub hue: (f64, f64),
    pub saturation: (f64, f64),
    pub value: (f64, f64),
    /// Minor/major axis ratio.
    pub eccentricity: (f64, f64),
    /// Semi-major axis as a fraction of the image side.
    pub radius: (f64, f64),
    /// Width of the soft rim, pixels.
    pub fade: f64,
    /// Texture cycles per image side.
    pub texture_freq: (f64, f64),
    pub texture_amp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactParams {
    /// Inclusive range of hair strokes per image.
    pub hair_count: (usize, usize),
    pub ruler_prob: f64,
    /// Fraction of contrast removed, `0` = none.
    pub contrast: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactLevel {
    None,
    Moderate,
    High,
}

impl ArtifactLevel {
    pub fn params(self) -> ArtifactParams {
        match self {
            ArtifactLevel::None => ArtifactParams {
                hair_count: (0, 0),
                ruler_prob: 0.0,
                contrast: (0.0, 0.0),
            },
            ArtifactLevel::Moderate => ArtifactParams {
                hair_count: (0, 4),
                ruler_prob: 0.25,
                contrast: (0.0, 0.3),
            },
            ArtifactLevel::High => ArtifactParams {
                hair_count: (6, 14),
                ruler_prob: 0.7,
                contrast: (0.3, 0.6),
            },
        }
    }
}

impl std::str::FromStr for ArtifactLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ArtifactLevel::None),
            "moderate" => Ok(ArtifactLevel::Moderate),
            "high" => Ok(ArtifactLevel::High),
            _ => Err(Error::Config(format!(
                "unknown artifact level `{s}` (none|moderate|high)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub side: usize,
    pub samples_per_class: usize,
    pub classes: Vec<ClassParams>,
    pub artifacts: ArtifactParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::preset(7, 40, ArtifactLevel::Moderate, 0)
    }
}

impl SyntheticSpec {
    /// `classes` lesion types with hues spread evenly around the colour
    /// wheel and shape/texture ranges cycling between three variants.
    pub fn preset(classes: usize, samples_per_class: usize, level: ArtifactLevel, seed: u64) -> Self {
        let spacing = 360.0 / classes.max(1) as f64;
        let half = (spacing / 2.0 - 8.0).clamp(2.0, 10.0);
        let classes = (0..classes)
            .map(|i| {
                let center = 15.0 + spacing * i as f64;
                ClassParams {
                    hue: (center - half, center + half),
                    saturation: (0.5, 0.8),
                    value: (0.35, 0.6),
                    eccentricity: [(0.45, 0.65), (0.65, 0.85), (0.85, 1.0)][i % 3],
                    radius: (0.16, 0.34),
                    fade: 1.0 + (i % 3) as f64,
                    texture_freq: [(2.0, 4.0), (6.0, 9.0)][i % 2],
                    texture_amp: 0.15,
                }
            })
            .collect();
        SyntheticSpec {
            side: 64,
            samples_per_class,
            classes,
            artifacts: level.params(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("image side {} below 8", self.side)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let a = &self.artifacts;
        if a.hair_count.0 > a.hair_count.1
            || !(0.0..=1.0).contains(&a.ruler_prob)
            || a.contrast.0 < 0.0
            || a.contrast.1 >= 1.0
            || a.contrast.0 > a.contrast.1
        {
            return Err(Error::Config(format!("invalid artifact parameters {a:?}")));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let ranges = [c.hue, c.saturation, c.value, c.eccentricity, c.radius, c.texture_freq];
            if ranges.iter().any(|r| r.0 > r.1)
                || c.eccentricity.0 <= 0.0
                || c.eccentricity.1 > 1.0
                || c.radius.0 <= 0.0
                || c.fade < 0.0
            {
                return Err(Error::Config(format!("class {i}: invalid ranges {c:?}")));
            }
        }
        let disjoint = |a: (f64, f64), b: (f64, f64)| a.1 < b.0 || b.1 < a.0;
        for i in 0..self.classes.len() {
            for j in i + 1..self.classes.len() {
                let (a, b) = (&self.classes[i], &self.classes[j]);
                let separated = disjoint(a.hue, b.hue)
                    || disjoint(a.value, b.value)
                    || disjoint(a.eccentricity, b.eccentricity)
                    || disjoint(a.texture_freq, b.texture_freq);
                if !separated {
                    return Err(Error::Config(format!(
                        "classes {i} and {j} overlap on every generative axis"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let pair = |r: (f64, f64)| format!("{},{}", r.0, r.1);
        let mut kv = KeyValues::new();
        kv.insert("side".into(), self.side.to_string());
        kv.insert("samples_per_class".into(), self.samples_per_class.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        let a = &self.artifacts;
        kv.insert(
            "artifacts.hair_count".into(),
            format!("{},{}", a.hair_count.0, a.hair_count.1),
        );
        kv.insert("artifacts.ruler_prob".into(), a.ruler_prob.to_string());
        kv.insert("artifacts.contrast".into(), pair(a.contrast));
        kv.insert("classes".into(), self.classes.len().to_string());
        for (i, c) in self.classes.iter().enumerate() {
            let p = format!("class.{i}.");
            kv.insert(format!("{p}hue"), pair(c.hue));
            kv.insert(format!("{p}saturation"), pair(c.saturation));
            kv.insert(format!("{p}value"), pair(c.value));
            kv.insert(format!("{p}eccentricity"), pair(c.eccentricity));
            kv.insert(format!("{p}radius"), pair(c.radius));
            kv.insert(format!("{p}fade"), c.fade.to_string());
            kv.insert(format!("{p}texture_freq"), pair(c.texture_freq));
            kv.insert(format!("{p}texture_amp"), c.texture_amp.to_string());
        }
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing key `{k}`")))
        };
        let n = kv::parse_usize("classes", get("classes")?)?;
        let hair = kv::parse_list("artifacts.hair_count", get("artifacts.hair_count")?, kv::parse_usize)?;
        let &[h0, h1] = hair.as_slice() else {
            return Err(Error::Config("`artifacts.hair_count`: expected `lo,hi`".into()));
        };
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let key = |f: &str| format!("class.{i}.{f}");
            let range = |f: &str| {
                let k = key(f);
                kv::parse_range(&k, get(&k)?)
            };
            let scalar = |f: &str| {
                let k = key(f);
                kv::parse_f64(&k, get(&k)?)
            };
            classes.push(ClassParams {
                hue: range("hue")?,
                saturation: range("saturation")?,
                value: range("value")?,
                eccentricity: range("eccentricity")?,
                radius: range("radius")?,
                fade: scalar("fade")?,
                texture_freq: range("texture_freq")?,
                texture_amp: scalar("texture_amp")?,
            });
        }
        let spec = SyntheticSpec {
            side: kv::parse_usize("side", get("side")?)?,
            samples_per_class: kv::parse_usize("samples_per_class", get("samples_per_class")?)?,
            seed: kv::parse_u64("seed", get("seed")?)?,
            artifacts: ArtifactParams {
                hair_count: (h0, h1),
                ruler_prob: kv::parse_f64("artifacts.ruler_prob", get("artifacts.ruler_prob")?)?,
                contrast: kv::parse_range("artifacts.contrast", get("artifacts.contrast")?)?,
            },
            classes,
        };
        let expected = spec.to_key_values();
        if let Some(extra) = kv.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key `{extra}`")));
        }
        Ok(spec)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius; `<= 1` inside.
    fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// Renders one sample. Geometry and artifacts draw from separate streams so
/// toggling artifacts never moves the lesion.
fn render(spec: &SyntheticSpec, label: usize, index: usize) -> Result<LesionSample> {
    let s = spec.side;
    let sf = s as f64;
    let class = &spec.classes[label];
    let global = (label * spec.samples_per_class + index) as u64;
    let mut geo = ChaCha8Rng::seed_from_u64(spec.seed);
    geo.set_stream(2 * global);
    let mut art = ChaCha8Rng::seed_from_u64(spec.seed);
    art.set_stream(2 * global + 1);

    let mut ellipse = None;
    let mut mask = vec![0.0; s * s];
    for _ in 0..MAX_ATTEMPTS {
        let a = uniform(&mut geo, class.radius) * sf;
        let e = Ellipse {
            cx: geo.random_range(0.3..0.7) * sf,
            cy: geo.random_range(0.3..0.7) * sf,
            a,
            b: a * uniform(&mut geo, class.eccentricity),
            cos: 0.0,
            sin: 0.0,
        };
        let theta = geo.random_range(0.0..PI);
        let e = Ellipse {
            cos: theta.cos(),
            sin: theta.sin(),
            ..e
        };
        let mut count = 0usize;
        for y in 0..s {
            for x in 0..s {
                let inside = e.radius_at(x as f64 + 0.5, y as f64 + 0.5) <= 1.0;
                mask[y * s + x] = if inside { 1.0 } else { 0.0 };
                count += usize::from(inside);
            }
        }
        let frac = count as f64 / (s * s) as f64;
        if (MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&frac) {
            ellipse = Some(e);
            break;
        }
    }
    let ellipse = ellipse.ok_or_else(|| {
        Error::Config(format!(
            "class {label}: no ellipse with {MIN_MASK_FRACTION}-{MAX_MASK_FRACTION} area after {MAX_ATTEMPTS} attempts"
        ))
    })?;

    // background
    let skin_base = [0.87, 0.68, 0.57];
    let skin: Vec<f64> = skin_base
        .iter()
        .map(|c| c + geo.random_range(-0.05..0.05))
        .collect();
    let shade_dir = geo.random_range(0.0..2.0 * PI);
    let shade_amp = geo.random_range(0.0..0.06);
    let lesion = hsv_to_rgb(
        uniform(&mut geo, class.hue),
        uniform(&mut geo, class.saturation),
        uniform(&mut geo, class.value),
    );
    let freq = uniform(&mut geo, class.texture_freq);
    let tex_dir = geo.random_range(0.0..2.0 * PI);
    let tex_phase = geo.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.015).expect("positive std");
    let fade = (class.fade / ellipse.a.min(ellipse.b)).max(1e-9);

    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / sf - 0.5, py / sf - 0.5);
            let shade = 1.0 + shade_amp * (u * shade_dir.cos() + v * shade_dir.sin());
            let r = ellipse.radius_at(px, py);
            let alpha = if r <= 1.0 { ((1.0 - r) / fade).min(1.0) } else { 0.0 };
            let texture = 1.0
                + class.texture_amp
                    * (2.0 * PI * freq * (u * tex_dir.cos() + v * tex_dir.sin()) + tex_phase).sin();
            for c in 0..3 {
                let bg = skin[c] * shade;
                let fg = lesion[c] * texture;
                img[(c * s + y) * s + x] = bg * (1.0 - alpha) + fg * alpha + noise.sample(&mut geo);
            }
        }
    }

    paint_artifacts(&mut img, s, &spec.artifacts, &mut art);

    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(LesionSample {
        id: format!("c{label}_{index:04}"),
        label,
        image: Tensor::new(vec![3, s, s], img)?,
        mask: Tensor::new(vec![1, s, s], mask)?,
    })
}

fn blend(img: &mut [f64], s: usize, x: isize, y: isize, color: [f64; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
        return;
    }
    let (x, y) = (x as usize, y as usize);
    for (c, &col) in color.iter().enumerate() {
        let p = &mut img[(c * s + y) * s + x];
        *p = *p * (1.0 - alpha) + col * alpha;
    }
}

fn paint_artifacts(img: &mut [f64], s: usize, a: &ArtifactParams, rng: &mut ChaCha8Rng) {
    let sf = s as f64;
    let hairs = if a.hair_count.1 == 0 {
        0
    } else {
        rng.random_range(a.hair_count.0..=a.hair_count.1)
    };
    for _ in 0..hairs {
        let p0 = [rng.random_range(0.0..sf), rng.random_range(0.0..sf)];
        let p1 = [rng.random_range(0.0..sf), rng.random_range(0.0..sf)];
        let p2 = [rng.random_range(0.0..sf), rng.random_range(0.0..sf)];
        let tone = rng.random_range(0.05..0.2);
        let color = [tone * 1.2, tone, tone * 0.8];
        let width = rng.random_range(0.4..0.9);
        let steps = 4 * s;
        let mut painted = std::collections::HashSet::new();
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let mt = 1.0 - t;
            let x = mt * mt * p0[0] + 2.0 * mt * t * p1[0] + t * t * p2[0];
            let y = mt * mt * p0[1] + 2.0 * mt * t * p1[1] + t * t * p2[1];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ix, iy) = (x.floor() as isize + dx, y.floor() as isize + dy);
                    let (cx, cy) = (ix as f64 + 0.5, iy as f64 + 0.5);
                    if (cx - x).hypot(cy - y) <= width && painted.insert((ix, iy)) {
                        blend(img, s, ix, iy, color, 0.9);
                    }
                }
            }
        }
    }

    if a.ruler_prob > 0.0 && rng.random_bool(a.ruler_prob) {
        let side = rng.random_range(0..4u8);
        let inset = rng.random_range(1..4) as isize;
        let color = [0.08, 0.08, 0.1];
        let si = s as isize;
        for k in 0..si {
            // baseline
            let (x, y) = match side {
                0 => (k, inset),
                1 => (k, si - 1 - inset),
                2 => (inset, k),
                _ => (si - 1 - inset, k),
            };
            blend(img, s, x, y, color, 0.85);
            if k % 4 == 0 {
                let len = if k % 16 == 0 { 6 } else { 3 };
                for l in 1..=len {
                    let (tx, ty) = match side {
                        0 => (k, inset + l),
                        1 => (k, si - 1 - inset - l),
                        2 => (inset + l, k),
                        _ => (si - 1 - inset - l, k),
                    };
                    blend(img, s, tx, ty, color, 0.85);
                }
            }
        }
    }

    let c = uniform(rng, a.contrast);
    if c > 0.0 {
        let plane = s * s;
        for ch in 0..3 {
            let p = &mut img[ch * plane..(ch + 1) * plane];
            let mean = p.iter().sum::<f64>() / plane as f64;
            for v in p {
                *v = mean + (*v - mean) * (1.0 - c);
            }
        }
    }
}

/// Renders `samples_per_class` images for every class, ordered by class and
/// then index. Bit-identical for a given spec.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Vec<LesionSample>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(c, i)| render(spec, c, i))
        .collect()
}
