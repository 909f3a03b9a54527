//! Episodic evaluation with normal-approximation confidence margins.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{stack, LesionSample};
use crate::error::{Error, Result};
use crate::fewshot::{self, EpisodeSampler, Metric, PrototypeSet};
use crate::fusion::FusedModel;
use crate::tensor::Tensor;

/// Confidence levels reported by [`EvalReport`].
pub const LEVELS: [u32; 3] = [75, 90, 95];

/// Samples embedded per forward pass.
const EMBED_CHUNK: usize = 32;

/// Two-sided normal quantile for a confidence level in percent.
pub fn z_value(level: u32) -> Result<f64> {
    match level {
        75 => Ok(1.1503),
        90 => Ok(1.6449),
        95 => Ok(1.9600),
        _ => Err(Error::Config(format!("unsupported confidence level {level} (75|90|95)"))),
    }
}

/// `z(level)·s/√T` with the sample standard deviation `s`.
pub fn confidence_margin(accuracies: &[f64], level: u32) -> Result<f64> {
    let z = z_value(level)?;
    let t = accuracies.len();
    if t < 2 {
        return Err(Error::Config(format!(
            "confidence margin needs at least 2 accuracies, got {t}"
        )));
    }
    // exact zero for constant input, which a rounded mean would miss
    if accuracies.iter().all(|&a| a == accuracies[0]) {
        return Ok(0.0);
    }
    let mean = accuracies.iter().sum::<f64>() / t as f64;
    let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
    let s = (ss / (t - 1) as f64).sqrt();
    Ok(z * s / (t as f64).sqrt())
}

/// Maps samples to embedding rows `[B,D]`. Implementations must be pure so
/// evaluation can cache and parallelise.
pub trait Embedder: Sync {
    fn embed(&self, samples: &[&LesionSample]) -> Result<Tensor>;
}

/// The fused model: images are gated by the predicted mask.
impl Embedder for FusedModel {
    fn embed(&self, samples: &[&LesionSample]) -> Result<Tensor> {
        let (images, _) = stack(samples)?;
        FusedModel::embed(self, &images, true)
    }
}

/// The encoder alone on raw images.
pub struct Unfused<'a>(pub &'a FusedModel);

impl Embedder for Unfused<'_> {
    fn embed(&self, samples: &[&LesionSample]) -> Result<Tensor> {
        let (images, _) = stack(samples)?;
        self.0.embed(&images, false)
    }
}

/// Same vector for every sample.
pub struct ConstantEmbedder {
    pub dim: usize,
}

impl Embedder for ConstantEmbedder {
    fn embed(&self, samples: &[&LesionSample]) -> Result<Tensor> {
        Ok(Tensor::full([samples.len(), self.dim], 1.0))
    }
}

/// One-hot of the true label; an upper bound for any classifier.
pub struct OneHotEmbedder {
    pub classes: usize,
}

impl Embedder for OneHotEmbedder {
    fn embed(&self, samples: &[&LesionSample]) -> Result<Tensor> {
        let c = self.classes;
        if let Some(s) = samples.iter().find(|s| s.label >= c) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: c,
            });
        }
        Ok(Tensor::from_fn([samples.len(), c], |i| {
            f64::from(u8::from(samples[i / c].label == i % c))
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `(level, margin)` for each of [`LEVELS`]; empty when fewer than two
    /// episodes were run.
    pub margins: Vec<(u32, f64)>,
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_accuracies(
        accuracies: Vec<f64>,
        k: usize,
        n: usize,
        q: usize,
        metric: Metric,
        seed: u64,
    ) -> Result<Self> {
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let margins = if accuracies.len() >= 2 {
            LEVELS
                .iter()
                .map(|&l| Ok((l, confidence_margin(&accuracies, l)?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(EvalReport {
            accuracies,
            mean,
            margins,
            k,
            n,
            q,
            metric,
            seed,
        })
    }

    pub fn margin(&self, level: u32) -> f64 {
        self.margins
            .iter()
            .find(|(l, _)| *l == level)
            .map_or(f64::NAN, |&(_, m)| m)
    }

    /// One row per episode followed by a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            let _ = writeln!(out, "{i},{a:?}");
        }
        let _ = write!(
            out,
            "# k={} n={} q={} metric={} seed={} T={} mean={:?}",
            self.k,
            self.n,
            self.q,
            self.metric,
            self.seed,
            self.accuracies.len(),
            self.mean
        );
        for (l, m) in &self.margins {
            let _ = write!(out, " margin{l}={m:?}");
        }
        out.push('\n');
        out
    }
}

/// Embeds every sample of `classes` once (the model is frozen and no
/// augmentation runs at evaluation), then scores `episodes` k-way n-shot
/// tasks on the cached embeddings. Episode `t` draws from its own RNG stream
/// so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    embedder: &impl Embedder,
    dataset: &[LesionSample],
    classes: &[usize],
    k: usize,
    n: usize,
    q: usize,
    metric: Metric,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let sampler = EpisodeSampler::new(dataset, classes);
    let drawn: Vec<_> = (0..episodes)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            sampler.sample(k, n, q, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut needed: Vec<usize> = drawn.iter().flat_map(|e| e.all_samples()).collect();
    needed.sort_unstable();
    needed.dedup();
    let chunks: Vec<Tensor> = needed
        .par_chunks(EMBED_CHUNK)
        .map(|idx| {
            let refs: Vec<&LesionSample> = idx.iter().map(|&i| &dataset[i]).collect();
            embedder.embed(&refs)
        })
        .collect::<Result<_>>()?;
    let dim = chunks[0].shape()[1];
    let mut cache: HashMap<usize, &[f64]> = HashMap::with_capacity(needed.len());
    for (idx, emb) in needed.chunks(EMBED_CHUNK).zip(&chunks) {
        for (r, &i) in idx.iter().enumerate() {
            cache.insert(i, emb.row(r));
        }
    }
    let gather = |rows: &[usize]| {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend_from_slice(cache[r]);
        }
        Tensor::new([rows.len(), dim], data)
    };

    let accuracies: Vec<f64> = drawn
        .par_iter()
        .map(|ep| {
            let protos = fewshot::compute_prototypes(&gather(&ep.support)?, &ep.support_labels, k)?;
            let probs = fewshot::classify_queries(&gather(&ep.query)?, &protos, metric)?;
            Ok(fewshot::episode_accuracy(&probs, &ep.query_labels))
        })
        .collect::<Result<_>>()?;
    EvalReport::from_accuracies(accuracies, k, n, q, metric, seed)
}

/// Prototypes of `samples` under `embedder`, grouped by episode-local
/// `labels`.
pub fn prototypes_for(
    embedder: &impl Embedder,
    samples: &[&LesionSample],
    labels: &[usize],
    k: usize,
) -> Result<PrototypeSet> {
    fewshot::compute_prototypes(&embedder.embed(samples)?, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> Vec<LesionSample> {
        (0..classes * per)
            .map(|i| LesionSample {
                id: format!("s{i}"),
                label: i / per,
                image: Tensor::zeros([3, 8, 8]),
                mask: Tensor::zeros([1, 8, 8]),
            })
            .collect()
    }

    #[test]
    fn margin_zero_for_constant_accuracies() {
        for l in LEVELS {
            assert_eq!(confidence_margin(&[0.7; 10], l).unwrap(), 0.0);
        }
    }

    #[test]
    fn margin_half_half_fixture() {
        let accs: Vec<f64> = (0..1000).map(|i| f64::from(u8::from(i % 2 == 0))).collect();
        let m = confidence_margin(&accs, 95).unwrap();
        let s = (1000.0f64 * 0.25 / 999.0).sqrt();
        assert!((s - 0.500_250_125).abs() < 1e-6);
        assert!((m - 1.96 * s / 1000f64.sqrt()).abs() < 1e-12);
        assert!((m - 0.0310).abs() < 1e-4, "{m}");
    }

    #[test]
    fn margins_increase_with_level() {
        let accs = [0.5, 0.6, 0.9, 1.0];
        let m: Vec<f64> = LEVELS.iter().map(|&l| confidence_margin(&accs, l).unwrap()).collect();
        assert!(m[0] < m[1] && m[1] < m[2]);
    }

    #[test]
    fn margin_rejects_short_input_and_unknown_level() {
        assert!(confidence_margin(&[1.0], 95).is_err());
        assert!(confidence_margin(&[1.0, 0.0], 80).is_err());
    }

    #[test]
    fn one_hot_oracle_is_perfect() {
        let data = toy(4, 10);
        let r = evaluate(&OneHotEmbedder { classes: 4 }, &data, &[1, 2, 3], 2, 3, 4, Metric::Cosine, 50, 1)
            .unwrap();
        assert!(r.accuracies.iter().all(|&a| a == 1.0));
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.margin(95), 0.0);
    }

    #[test]
    fn constant_embedder_is_at_chance() {
        let data = toy(3, 20);
        let r = evaluate(&ConstantEmbedder { dim: 4 }, &data, &[0, 1, 2], 2, 5, 5, Metric::Euclidean, 1000, 0)
            .unwrap();
        assert!((0.45..=0.55).contains(&r.mean), "{}", r.mean);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = toy(3, 12);
        let run = || {
            evaluate(&OneHotEmbedder { classes: 3 }, &data, &[0, 1, 2], 2, 1, 2, Metric::Euclidean, 30, 4)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_has_row_per_episode_and_summary() {
        let r = EvalReport::from_accuracies(vec![1.0, 0.5, 0.0], 2, 1, 1, Metric::Cosine, 3).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "episode,accuracy");
        assert!(lines[4].starts_with("# k=2 n=1 q=1 metric=cosine seed=3 T=3 mean=0.5"));
    }
}
