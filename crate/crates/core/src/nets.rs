//! The two networks: a convolutional embedding encoder and a skip-connected
//! encoder-decoder segmenter.
//!
//! Parameter names are stable identifiers (they end up in checkpoints):
//!
//! * encoder: `enc.stage{i}.conv.{w,b}`, `enc.fc.{w,b}`
//! * segmenter: `seg.enc{i}.conv.{w,b}`, `seg.mid.conv.{w,b}`,
//!   `seg.dec{i}.conv.{w,b}`, `seg.head.{w,b}`

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamRegistry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

/// Initial value of every bias.
pub const BIAS_INIT: f64 = 0.01;

pub const SEG_HEAD: &str = "seg.head";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub side: usize,
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            side: 64,
            widths: vec![8, 16, 32],
            embedding_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_widths("encoder", &self.widths)?;
        check_side("encoder", self.side, self.widths.len())?;
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "encoder embedding dimension must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Spatial side of the deepest conv activation.
    pub fn feature_side(&self) -> usize {
        self.side >> (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub side: usize,
    pub widths: Vec<usize>,
    pub skip: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            side: 64,
            widths: vec![8, 16],
            skip: true,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        check_widths("segmenter", &self.widths)?;
        check_side("segmenter", self.side, self.widths.len())
    }
}

fn check_widths(what: &str, widths: &[usize]) -> Result<()> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!(
            "{what} channel widths must be non-empty and positive, got {widths:?}"
        )));
    }
    Ok(())
}

fn check_side(what: &str, side: usize, stages: usize) -> Result<()> {
    let div = 1usize << stages;
    if side == 0 || !side.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "{what} input side {side} is not divisible by 2^{stages} = {div}"
        )));
    }
    Ok(())
}

fn he_conv(
    params: &mut ParamRegistry,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = (in_c * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let w = Tensor::from_fn([out_c, in_c, k, k], |_| normal.sample(rng));
    params.insert(format!("{name}.w"), w, true)?;
    params.insert(format!("{name}.b"), Tensor::full([out_c], BIAS_INIT), true)
}

fn check_images(op: &'static str, tape: &Tape, images: Var, side: usize) -> Result<()> {
    let shape = tape.shape(images);
    match *shape {
        [_, IMAGE_CHANNELS, h, w] if h == side && w == side => Ok(()),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected [B,{IMAGE_CHANNELS},{side},{side}]"),
        }),
    }
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    tape.conv2d(x, w, b, 1, pad)
}

pub fn build_encoder(config: &EncoderConfig, rng: &mut impl Rng) -> Result<ParamRegistry> {
    config.validate()?;
    let mut params = ParamRegistry::new();
    let mut in_c = IMAGE_CHANNELS;
    for (i, &w) in config.widths.iter().enumerate() {
        he_conv(&mut params, &format!("enc.stage{i}.conv"), w, in_c, 3, rng)?;
        in_c = w;
    }
    let normal = Normal::new(0.0, (2.0 / in_c as f64).sqrt()).expect("positive std");
    let fc = Tensor::from_fn([config.embedding_dim, in_c], |_| normal.sample(rng));
    params.insert("enc.fc.w", fc, true)?;
    params.insert(
        "enc.fc.b",
        Tensor::full([config.embedding_dim], BIAS_INIT),
        true,
    )?;
    Ok(params)
}

/// Closed-form scalar parameter count of [`build_encoder`].
pub fn encoder_param_count(config: &EncoderConfig) -> usize {
    let mut in_c = IMAGE_CHANNELS;
    let mut total = 0;
    for &w in &config.widths {
        total += w * in_c * 9 + w;
        in_c = w;
    }
    total + config.embedding_dim * in_c + config.embedding_dim
}

/// Embeddings `[B,D]` for images `[B,3,S,S]`.
pub fn encoder_forward(
    tape: &mut Tape,
    params: &Bound,
    config: &EncoderConfig,
    images: Var,
) -> Result<Var> {
    encoder_forward_features(tape, params, config, images).map(|(emb, _)| emb)
}

/// Embeddings plus the last stage's post-ReLU conv activation (pre-pool).
pub fn encoder_forward_features(
    tape: &mut Tape,
    params: &Bound,
    config: &EncoderConfig,
    images: Var,
) -> Result<(Var, Var)> {
    check_images("encoder_forward", tape, images, config.side)?;
    let mut x = images;
    let mut last_act = images;
    for i in 0..config.widths.len() {
        let c = conv(tape, params, &format!("enc.stage{i}.conv"), x, 1)?;
        last_act = tape.relu(c);
        x = tape.max_pool2d(last_act)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let emb = tape.linear(
        pooled,
        params.var("enc.fc.w")?,
        params.var("enc.fc.b")?,
    )?;
    Ok((emb, last_act))
}

pub fn build_segnet(config: &SegNetConfig, rng: &mut impl Rng) -> Result<ParamRegistry> {
    config.validate()?;
    let mut params = ParamRegistry::new();
    let widths = &config.widths;
    let mut in_c = IMAGE_CHANNELS;
    for (i, &w) in widths.iter().enumerate() {
        he_conv(&mut params, &format!("seg.enc{i}.conv"), w, in_c, 3, rng)?;
        in_c = w;
    }
    let deepest = *widths.last().unwrap();
    he_conv(&mut params, "seg.mid.conv", deepest, deepest, 3, rng)?;
    let mut below = deepest;
    for i in (0..widths.len()).rev() {
        let cin = below + if config.skip { widths[i] } else { 0 };
        he_conv(&mut params, &format!("seg.dec{i}.conv"), widths[i], cin, 3, rng)?;
        below = widths[i];
    }
    he_conv(&mut params, SEG_HEAD, 1, widths[0], 1, rng)?;
    Ok(params)
}

/// Closed-form scalar parameter count of [`build_segnet`].
pub fn segnet_param_count(config: &SegNetConfig) -> usize {
    let conv3 = |o: usize, i: usize| o * i * 9 + o;
    let w = &config.widths;
    let mut total = 0;
    let mut in_c = IMAGE_CHANNELS;
    for &c in w {
        total += conv3(c, in_c);
        in_c = c;
    }
    let deepest = *w.last().unwrap();
    total += conv3(deepest, deepest);
    let mut below = deepest;
    for i in (0..w.len()).rev() {
        let skip = if config.skip { w[i] } else { 0 };
        total += conv3(w[i], below + skip);
        below = w[i];
    }
    total + w[0] + 1
}

/// Soft masks `[B,1,S,S]` with values in (0,1).
pub fn segnet_forward(
    tape: &mut Tape,
    params: &Bound,
    config: &SegNetConfig,
    images: Var,
) -> Result<Var> {
    check_images("segnet_forward", tape, images, config.side)?;
    let mut skips = Vec::with_capacity(config.widths.len());
    let mut x = images;
    for i in 0..config.widths.len() {
        let c = conv(tape, params, &format!("seg.enc{i}.conv"), x, 1)?;
        let a = tape.relu(c);
        skips.push(a);
        x = tape.max_pool2d(a)?;
    }
    let mid = conv(tape, params, "seg.mid.conv", x, 1)?;
    x = tape.relu(mid);
    for i in (0..config.widths.len()).rev() {
        let up = tape.upsample_nearest(x)?;
        let joined = if config.skip {
            tape.concat_channels(up, skips[i])?
        } else {
            up
        };
        let c = conv(tape, params, &format!("seg.dec{i}.conv"), joined, 1)?;
        x = tape.relu(c);
    }
    let logits = conv(tape, params, SEG_HEAD, x, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Locates the group whose last path component is `head`.
fn head_group(params: &ParamRegistry) -> Option<String> {
    params.names().find_map(|name| {
        let parts: Vec<&str> = name.split('.').collect();
        parts
            .iter()
            .position(|&p| p == "head")
            .map(|i| parts[..=i].join("."))
    })
}

/// Only the `head` group stays trainable; values are untouched.
pub fn freeze_all_but_head(mut params: ParamRegistry) -> Result<ParamRegistry> {
    let group = head_group(&params).ok_or_else(|| Error::MissingGroup("head".into()))?;
    params.freeze_all_but(&group)?;
    Ok(params)
}

pub fn freeze_all(mut params: ParamRegistry) -> ParamRegistry {
    params.set_all_trainable(false);
    params
}

/// Gradient-free embedding of an image batch.
pub fn embed(params: &ParamRegistry, config: &EncoderConfig, images: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_with_grad(&mut tape, false);
    let x = tape.constant(images);
    let e = encoder_forward(&mut tape, &bound, config, x)?;
    Ok(tape.value(e).clone())
}

/// Gradient-free segmentation of an image batch.
pub fn segment(params: &ParamRegistry, config: &SegNetConfig, images: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_with_grad(&mut tape, false);
    let x = tape.constant(images);
    let m = segnet_forward(&mut tape, &bound, config, x)?;
    Ok(tape.value(m).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_images(b: usize, side: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn([b, 3, side, side], |_| r.random::<f64>())
    }

    #[test]
    fn default_encoder_count_matches_closed_form() {
        let cfg = EncoderConfig::default();
        let p = build_encoder(&cfg, &mut rng(1)).unwrap();
        // 224 + 1168 + 4640 + 2112
        assert_eq!(encoder_param_count(&cfg), 8144);
        assert_eq!(p.param_count(), 8144);
    }

    #[test]
    fn segnet_counts_match_closed_form_with_and_without_skips() {
        let with = SegNetConfig::default();
        let without = SegNetConfig {
            skip: false,
            ..SegNetConfig::default()
        };
        // enc 224 + 1168, mid 2320, dec1 4624 / 2320, dec0 1736 / 1160, head 9
        assert_eq!(segnet_param_count(&with), 10081);
        assert_eq!(segnet_param_count(&without), 7201);
        assert_eq!(build_segnet(&with, &mut rng(2)).unwrap().param_count(), 10081);
        assert_eq!(build_segnet(&without, &mut rng(2)).unwrap().param_count(), 7201);
    }

    #[test]
    fn seeded_construction_is_bit_identical() {
        let a = build_encoder(&EncoderConfig::default(), &mut rng(9)).unwrap();
        let b = build_encoder(&EncoderConfig::default(), &mut rng(9)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_segnet(&SegNetConfig::default(), &mut rng(9)).unwrap();
        let d = build_segnet(&SegNetConfig::default(), &mut rng(9)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn indivisible_side_rejected() {
        let cfg = EncoderConfig {
            side: 60,
            ..EncoderConfig::default()
        };
        assert!(matches!(build_encoder(&cfg, &mut rng(0)), Err(Error::Config(_))));
        let cfg = SegNetConfig {
            side: 66,
            ..SegNetConfig::default()
        };
        assert!(build_segnet(&cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn encoder_shape_contract() {
        let cfg = EncoderConfig::default();
        let p = build_encoder(&cfg, &mut rng(3)).unwrap();
        let e = embed(&p, &cfg, random_images(2, 64, 4)).unwrap();
        assert_eq!(e.shape(), &[2, 64]);
        assert!(e.all_finite());
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let cfg = EncoderConfig::default();
        let p = build_encoder(&cfg, &mut rng(3)).unwrap();
        assert!(embed(&p, &cfg, random_images(1, 32, 4)).is_err());
    }

    #[test]
    fn zero_images_embed_identically() {
        let cfg = EncoderConfig::default();
        let p = build_encoder(&cfg, &mut rng(3)).unwrap();
        let e = embed(&p, &cfg, Tensor::zeros([3, 3, 64, 64])).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn batch_rows_match_single_image_forward() {
        let cfg = EncoderConfig {
            side: 16,
            ..EncoderConfig::default()
        };
        let p = build_encoder(&cfg, &mut rng(5)).unwrap();
        let batch = random_images(3, 16, 6);
        let all = embed(&p, &cfg, batch.clone()).unwrap();
        let per = 3 * 16 * 16;
        for i in 0..3 {
            let one = Tensor::new([1, 3, 16, 16], batch.data()[i * per..(i + 1) * per].to_vec())
                .unwrap();
            let e = embed(&p, &cfg, one).unwrap();
            for (a, b) in e.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_pixel_changes_embedding() {
        let cfg = EncoderConfig {
            side: 16,
            ..EncoderConfig::default()
        };
        for seed in 0..5 {
            let p = build_encoder(&cfg, &mut rng(seed)).unwrap();
            let img = random_images(1, 16, 100 + seed);
            let mut bumped = img.clone();
            bumped.data_mut()[3 * 16 + 5] += 0.5;
            let a = embed(&p, &cfg, img).unwrap();
            let b = embed(&p, &cfg, bumped).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn segnet_mask_shape_and_range() {
        let cfg = SegNetConfig::default();
        let p = build_segnet(&cfg, &mut rng(7)).unwrap();
        let m = segment(&p, &cfg, random_images(2, 64, 8)).unwrap();
        assert_eq!(m.shape(), &[2, 1, 64, 64]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let again = segment(&p, &cfg, random_images(2, 64, 8)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn segnet_output_matches_input_side_for_valid_configs() {
        for (side, widths, skip) in [
            (8, vec![2], true),
            (16, vec![2, 3], false),
            (32, vec![2, 2, 4], true),
        ] {
            let cfg = SegNetConfig { side, widths, skip };
            let p = build_segnet(&cfg, &mut rng(1)).unwrap();
            let m = segment(&p, &cfg, random_images(1, side, 2)).unwrap();
            assert_eq!(m.shape(), &[1, 1, side, side]);
        }
    }

    #[test]
    fn freeze_all_but_head_leaves_head_trainable() {
        let cfg = SegNetConfig::default();
        let p = build_segnet(&cfg, &mut rng(1)).unwrap();
        let frozen = freeze_all_but_head(p.clone()).unwrap();
        // 1x1 conv from widths[0] channels to one: weights plus bias
        assert_eq!(frozen.trainable_count(), cfg.widths[0] + 1);
        assert_eq!(frozen.checksum(), p.checksum());
        let twice = freeze_all_but_head(frozen.clone()).unwrap();
        assert_eq!(twice, frozen);
        assert_eq!(freeze_all(p).trainable_count(), 0);
    }

    #[test]
    fn freeze_without_head_rejected() {
        let p = build_encoder(&EncoderConfig::default(), &mut rng(1)).unwrap();
        assert!(matches!(freeze_all_but_head(p), Err(Error::MissingGroup(_))));
    }
}
