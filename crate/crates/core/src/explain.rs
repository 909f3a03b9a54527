//! Grad-CAM saliency at the encoder's deepest conv activation.

use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::data::{netpbm, LesionSample};
use crate::error::{Error, Result};
use crate::fewshot::{self, Episode, Metric, PrototypeSet};
use crate::fusion::FusedModel;
use crate::nets;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[S,S]`, values in `[0,1]`.
    pub heatmap: Tensor,
    pub sample_id: String,
    pub target: usize,
    /// `Σ h·m / Σ h` against the ground-truth mask; 0 for an all-zero map.
    pub in_mask_fraction: f64,
}

/// Share of heatmap mass inside `mask`.
pub fn in_mask_fraction(heatmap: &[f64], mask: &[f64]) -> f64 {
    let total: f64 = heatmap.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    heatmap.iter().zip(mask).map(|(h, m)| h * m).sum::<f64>() / total
}

/// Saliency for `target` (an index into `prototypes`). The score is the
/// class probability `softmax(-d)`; with `use_fusion` off the encoder sees
/// the raw image.
pub fn gradcam(
    model: &FusedModel,
    sample: &LesionSample,
    target: usize,
    prototypes: &PrototypeSet,
    metric: Metric,
    use_fusion: bool,
) -> Result<SaliencyMap> {
    let k = prototypes.len();
    if target >= k {
        return Err(Error::LabelOutOfRange { label: target, classes: k });
    }
    let s = sample.side();
    let mut tape = Tape::new();
    let seg = model.segnet.bind_with_grad(&mut tape, false);
    let enc = model.encoder.bind_with_grad(&mut tape, false);
    // the image is the only gradient source, so every activation below it
    // carries a gradient
    let image = sample.image.clone().reshape([1, 3, s, s])?.with_requires_grad(true);
    let x = tape.leaf(image);
    let input = if use_fusion {
        let m = nets::segnet_forward(&mut tape, &seg, &model.segnet_config, x)?;
        // gate with a constant mask so saliency reflects the encoder only
        let m = tape.constant(tape.value(m).clone());
        tape.mask_channels(x, m)?
    } else {
        x
    };
    let (emb, act) = nets::encoder_forward_features(&mut tape, &enc, &model.encoder_config, input)?;
    let protos = tape.constant(prototypes.vectors.clone());
    let lp = fewshot::log_probabilities(&mut tape, emb, protos, metric)?;
    let p = tape.exp(lp);
    let picked = tape.pick(p, &[target])?;
    let score = tape.sum(picked);
    tape.backward(score)?;

    let a = tape.value(act);
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    if c == 0 {
        return Err(Error::InvalidShape {
            op: "gradcam",
            shape: a.shape().to_vec(),
            reason: "activation map has no channels".into(),
        });
    }
    let grad = tape.grad(act).unwrap_or_else(|| Tensor::zeros(a.shape().to_vec()));
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        let av = &a.data()[ch * plane..(ch + 1) * plane];
        for (o, v) in cam.iter_mut().zip(av) {
            *o += weight * v;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));

    let factor = s / h;
    let mut heat = Tensor::from_fn([s, s], |i| cam[(i / s / factor) * w + (i % s) / factor]);
    let max = heat.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        heat.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    let fraction = in_mask_fraction(heat.data(), sample.mask.data());
    Ok(SaliencyMap {
        heatmap: heat,
        sample_id: sample.id.clone(),
        target,
        in_mask_fraction: fraction,
    })
}

/// An episode whose single query is `dataset[sample]`: its class plus
/// `k - 1` others drawn from `classes`, each with `n` support samples that
/// exclude the query.
pub fn episode_around(
    dataset: &[LesionSample],
    classes: &[usize],
    sample: usize,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let own = dataset[sample].label;
    let others: Vec<usize> = classes.iter().copied().filter(|&c| c != own).collect();
    if others.len() + 1 < k {
        return Err(Error::Sampling(format!(
            "{k} classes needed around sample {}, only {} available",
            dataset[sample].id,
            others.len() + 1
        )));
    }
    let mut chosen = vec![own];
    chosen.extend(index::sample(rng, others.len(), k - 1).iter().map(|i| others[i]));
    let mut ep = Episode {
        k,
        n,
        q: 1,
        classes: chosen.clone(),
        support: Vec::with_capacity(k * n),
        query: vec![sample],
        support_labels: Vec::with_capacity(k * n),
        query_labels: vec![0],
    };
    for (local, &class) in chosen.iter().enumerate() {
        let pool: Vec<usize> = (0..dataset.len())
            .filter(|&i| i != sample && dataset[i].label == class)
            .collect();
        if pool.len() < n {
            return Err(Error::Sampling(format!(
                "class {class} has {} support candidates, {n} needed",
                pool.len()
            )));
        }
        for i in index::sample(rng, pool.len(), n) {
            ep.support.push(pool[i]);
            ep.support_labels.push(local);
        }
    }
    Ok(ep)
}

/// Writes the heatmap as an 8-bit PGM.
pub fn export_heatmap(map: &SaliencyMap, path: &Path) -> Result<()> {
    let s = map.heatmap.shape()[0];
    netpbm::write(path, &netpbm::encode_pgm(s, s, map.heatmap.data()))
}

/// Writes a `[1,S,S]` or `[S,S]` mask as an 8-bit PGM.
pub fn export_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    netpbm::write(path, &netpbm::encode_pgm(w, h, mask.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, ArtifactLevel, SyntheticSpec};
    use crate::fusion::FusionConfig;
    use crate::nets::{EncoderConfig, SegNetConfig};
    use rand::SeedableRng;

    fn setup() -> (FusedModel, Vec<LesionSample>, PrototypeSet) {
        let cfg = FusionConfig {
            encoder: EncoderConfig { side: 16, widths: vec![4, 6], embedding_dim: 8 },
            segnet: SegNetConfig { side: 16, widths: vec![4], skip: true },
            ..FusionConfig::default()
        };
        let model = FusedModel::init(&cfg).unwrap();
        let mut spec = SyntheticSpec::preset(2, 3, ArtifactLevel::Moderate, 1);
        spec.side = 16;
        let data = generate_dataset(&spec).unwrap();
        let refs: Vec<&LesionSample> = data.iter().collect();
        let (images, _) = crate::data::stack(&refs).unwrap();
        let emb = model.embed(&images, true).unwrap();
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        let protos = fewshot::compute_prototypes(&emb, &labels, 2).unwrap();
        (model, data, protos)
    }

    #[test]
    fn heatmap_in_unit_range_with_unit_max() {
        let (model, data, protos) = setup();
        for fused in [true, false] {
            for s in &data {
                let m = gradcam(&model, s, s.label, &protos, Metric::Cosine, fused).unwrap();
                assert_eq!(m.heatmap.shape(), &[16, 16]);
                let d = m.heatmap.data();
                assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
                let max = d.iter().copied().fold(0.0, f64::max);
                assert!(max == 1.0 || max == 0.0);
                assert!((0.0..=1.0).contains(&m.in_mask_fraction));
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_map() {
        let (mut model, data, protos) = setup();
        model.encoder.get_mut("enc.fc.w").unwrap().data_mut().fill(0.0);
        let m = gradcam(&model, &data[0], 0, &protos, Metric::Cosine, true).unwrap();
        assert!(m.heatmap.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.in_mask_fraction, 0.0);
    }

    #[test]
    fn fraction_matches_loop() {
        let h = [0.0, 0.5, 1.0, 0.25];
        let m = [1.0, 1.0, 0.0, 1.0];
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..4 {
            num += h[i] * m[i];
            den += h[i];
        }
        assert!((in_mask_fraction(&h, &m) - num / den).abs() < 1e-12);
    }

    #[test]
    fn episode_around_excludes_the_query() {
        let (_, data, _) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ep = episode_around(&data, &[0, 1], 0, 2, 2, &mut rng).unwrap();
        assert_eq!(ep.classes[0], data[0].label);
        assert!(!ep.support.contains(&0));
        assert_eq!(ep.support.len(), 4);
        assert!(episode_around(&data, &[0, 1], 0, 2, 3, &mut rng).is_err());
    }

    #[test]
    fn bad_target_rejected() {
        let (model, data, protos) = setup();
        assert!(gradcam(&model, &data[0], 2, &protos, Metric::Cosine, true).is_err());
    }

    #[test]
    fn export_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let heat = Tensor::from_fn([4, 4], |i| i as f64 / 15.0);
        let map = SaliencyMap { heatmap: heat.clone(), sample_id: "x".into(), target: 0, in_mask_fraction: 0.0 };
        let path = dir.path().join("h.pgm");
        export_heatmap(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        let r = netpbm::read(&path).unwrap();
        for (a, b) in r.pixels.iter().zip(heat.data()) {
            assert!((f64::from(*a) / 255.0 - b).abs() <= 1.0 / 255.0);
        }
        let zero = SaliencyMap { heatmap: Tensor::zeros([4, 4]), ..map };
        export_heatmap(&zero, &path).unwrap();
        assert!(std::fs::read(&path).unwrap()[11..].iter().all(|&b| b == 0));
        assert!(export_mask(&Tensor::zeros([1, 4, 4]), &dir.path().join("no/such/m.pgm")).is_err());
    }
}
