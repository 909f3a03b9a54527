//! Episodic few-shot machinery: class splits, episode sampling, prototypes,
//! distance metrics and the prototypical loss.
//!
//! Class probabilities follow `p(y = k | x) = softmax_k(-d(f(x), p_k))` where
//! `p_k` is the mean support embedding of class `k`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::data::LesionSample;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-300;

/// Disjoint training (seen) and testing (unseen) class sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Seen,
    Unseen,
}

impl ClassSplit {
    pub fn new(seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Config("seen and unseen class lists must both be non-empty".into()));
        }
        if let Some(c) = seen.iter().find(|c| unseen.contains(c)) {
            return Err(Error::Config(format!(
                "class {c} is in both the seen and unseen lists; the two sets must be disjoint"
            )));
        }
        for list in [&seen, &unseen] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Config(format!("duplicate class in {list:?}")));
            }
        }
        Ok(ClassSplit { seen, unseen })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn side(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::Seen => &self.seen,
            SplitSide::Unseen => &self.unseen,
        }
    }
}

/// One k-way n-shot task. Samples are indices into the dataset; support and
/// query rows are grouped by episode class (class 0 first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    /// Global label of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    /// Support indices followed by query indices.
    pub fn all_samples(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).copied().collect()
    }

    /// Plain-text listing, one `role<TAB>id<TAB>episode label<TAB>class` per
    /// line.
    pub fn manifest(&self, dataset: &[LesionSample]) -> String {
        let mut out = String::new();
        for (role, idx, labels) in [
            ("support", &self.support, &self.support_labels),
            ("query", &self.query, &self.query_labels),
        ] {
            for (&i, &l) in idx.iter().zip(labels) {
                let _ = writeln!(out, "{role}\t{}\t{l}\t{}", dataset[i].id, self.classes[l]);
            }
        }
        out
    }
}

/// Per-class sample lists for one side of a split.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(dataset: &[LesionSample], classes: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> =
            classes.iter().map(|&c| (c, Vec::new())).collect();
        for (i, s) in dataset.iter().enumerate() {
            if let Some(list) = by_class.get_mut(&s.label) {
                list.push(i);
            }
        }
        EpisodeSampler { by_class }
    }

    /// Classes uniformly without replacement, then samples within each class
    /// uniformly without replacement.
    pub fn sample(&self, k: usize, n: usize, q: usize, rng: &mut impl Rng) -> Result<Episode> {
        if k < 2 || n == 0 || q == 0 {
            return Err(Error::Sampling(format!(
                "need k >= 2, n >= 1, q >= 1 (got k={k}, n={n}, q={q})"
            )));
        }
        let eligible: Vec<usize> = self
            .by_class
            .iter()
            .filter(|(_, s)| s.len() >= n + q)
            .map(|(&c, _)| c)
            .collect();
        if eligible.len() < k {
            let counts: Vec<String> = self
                .by_class
                .iter()
                .map(|(c, s)| format!("class {c}: {}", s.len()))
                .collect();
            return Err(Error::Sampling(format!(
                "{k} classes with at least {} samples required, {} eligible ({})",
                n + q,
                eligible.len(),
                counts.join(", ")
            )));
        }
        let chosen = index::sample(rng, eligible.len(), k);
        let mut ep = Episode {
            k,
            n,
            q,
            classes: Vec::with_capacity(k),
            support: Vec::with_capacity(k * n),
            query: Vec::with_capacity(k * q),
            support_labels: Vec::with_capacity(k * n),
            query_labels: Vec::with_capacity(k * q),
        };
        for (local, ci) in chosen.iter().enumerate() {
            let class = eligible[ci];
            let pool = &self.by_class[&class];
            let picks = index::sample(rng, pool.len(), n + q);
            ep.classes.push(class);
            for (j, p) in picks.iter().enumerate() {
                if j < n {
                    ep.support.push(pool[p]);
                    ep.support_labels.push(local);
                } else {
                    ep.query.push(pool[p]);
                    ep.query_labels.push(local);
                }
            }
        }
        Ok(ep)
    }
}

pub fn sample_episode(
    dataset: &[LesionSample],
    classes: &[usize],
    k: usize,
    n: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    EpisodeSampler::new(dataset, classes).sample(k, n, q, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// `1 - cos(q, p)`.
    #[default]
    Cosine,
    /// Raw similarity used directly as the logit (`softmax(cos)`); since
    /// softmax ignores constant shifts this yields the same probabilities as
    /// [`Metric::Cosine`].
    CosineSimilarity,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            "cosine-similarity" => Ok(Metric::CosineSimilarity),
            _ => Err(Error::Config(format!(
                "unknown metric `{s}` (euclidean|cosine|cosine-similarity)"
            ))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
            Metric::CosineSimilarity => "cosine-similarity",
        })
    }
}

/// `k` mean support embeddings, `[k,D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Tensor,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], k: usize) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let p = tape.class_mean(e, labels, k)?;
    Ok(PrototypeSet {
        vectors: tape.value(p).clone(),
    })
}

pub fn euclidean_distance(query: &[f64], prototype: &[f64]) -> Result<f64> {
    pair_distance(query, prototype, Metric::Euclidean)
}

pub fn cosine_distance(query: &[f64], prototype: &[f64]) -> Result<f64> {
    pair_distance(query, prototype, Metric::Cosine)
}

fn pair_distance(query: &[f64], prototype: &[f64], metric: Metric) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new([1, query.len()], query.to_vec())?);
    let p = tape.constant(Tensor::new([1, prototype.len()], prototype.to_vec())?);
    let d = distances(&mut tape, q, p, metric)?;
    Ok(tape.value(d).item())
}

/// `[Q,D] × [K,D]` → `[Q,K]` distances; for [`Metric::CosineSimilarity`]
/// the negated similarity.
pub fn distances(tape: &mut Tape, query: Var, protos: Var, metric: Metric) -> Result<Var> {
    match metric {
        Metric::Euclidean => tape.euclidean_distance(query, protos),
        Metric::Cosine => tape.cosine_distance(query, protos),
        Metric::CosineSimilarity => {
            let d = tape.cosine_distance(query, protos)?;
            Ok(tape.add_scalar(d, -1.0))
        }
    }
}

/// Row-wise `log softmax(-d)`.
pub fn log_probabilities(tape: &mut Tape, query: Var, protos: Var, metric: Metric) -> Result<Var> {
    let d = distances(tape, query, protos, metric)?;
    let neg = tape.neg(d);
    tape.log_softmax(neg)
}

/// Class probabilities `[Q,k]` for query embeddings.
pub fn classify_queries(
    query_embeddings: &Tensor,
    prototypes: &PrototypeSet,
    metric: Metric,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query_embeddings.clone());
    let p = tape.constant(prototypes.vectors.clone());
    let lp = log_probabilities(&mut tape, q, p, metric)?;
    let probs = tape.exp(lp);
    Ok(tape.value(probs).clone())
}

/// Mean negative log-probability of the true class, from log-probabilities.
pub fn nll_loss(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let picked = tape.pick(log_probs, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// Mean negative log-probability of the true class, from probabilities.
pub fn classification_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log(probs, PROB_FLOOR);
    nll_loss(tape, logp, labels)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn episode_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let rows = probs.shape()[0];
    debug_assert_eq!(rows, labels.len());
    let correct = (0..rows)
        .filter(|&r| {
            let row = &probs.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == labels[r]
        })
        .count();
    correct as f64 / rows as f64
}
