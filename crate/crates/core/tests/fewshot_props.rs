//! Few-shot invariants over random embeddings and sampled episodes.

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segproto::data::{generate_dataset, ArtifactLevel, SyntheticSpec};
use segproto::fewshot::{classify_queries, compute_prototypes, EpisodeSampler, Metric};
use segproto::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prototypes_are_linear(e in matrix(6, 4), f in matrix(6, 4), a in -3.0f64..3.0) {
        let labels = [0, 1, 2, 0, 1, 2];
        let mixed = Tensor::from_fn([6, 4], |i| a * e.data()[i] + f.data()[i]);
        let pe = compute_prototypes(&e, &labels, 3).unwrap().vectors;
        let pf = compute_prototypes(&f, &labels, 3).unwrap().vectors;
        let pm = compute_prototypes(&mixed, &labels, 3).unwrap().vectors;
        for i in 0..pm.numel() {
            prop_assert!((pm.data()[i] - (a * pe.data()[i] + pf.data()[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn probability_rows_sum_to_one(q in matrix(5, 3), p in matrix(4, 3), m in 0usize..3) {
        let metric = [Metric::Euclidean, Metric::Cosine, Metric::CosineSimilarity][m];
        prop_assume!(q.data().chunks(3).chain(p.data().chunks(3)).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let protos = compute_prototypes(&p, &[0, 1, 2, 3], 4).unwrap();
        let probs = classify_queries(&q, &protos, metric).unwrap();
        for r in probs.data().chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cosine_argmax_ignores_query_scale(q in matrix(4, 5), p in matrix(3, 5), scale in 0.01f64..100.0) {
        prop_assume!(q.data().chunks(5).chain(p.data().chunks(5)).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let protos = compute_prototypes(&p, &[0, 1, 2], 3).unwrap();
        let scaled = Tensor::from_fn([4, 5], |i| scale * q.data()[i]);
        let a = classify_queries(&q, &protos, Metric::Cosine).unwrap();
        let b = classify_queries(&scaled, &protos, Metric::Cosine).unwrap();
        for (ra, rb) in a.data().chunks(3).zip(b.data().chunks(3)) {
            prop_assert_eq!(argmax(ra), argmax(rb));
        }
    }

    #[test]
    fn closer_prototype_is_more_probable(q in matrix(1, 3), p in matrix(2, 3)) {
        let protos = compute_prototypes(&p, &[0, 1], 2).unwrap();
        let probs = classify_queries(&q, &protos, Metric::Euclidean).unwrap();
        let d = |j: usize| -> f64 {
            q.data().iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        };
        if d(0) < d(1) {
            prop_assert!(probs.data()[0] >= probs.data()[1]);
        } else if d(1) < d(0) {
            prop_assert!(probs.data()[1] >= probs.data()[0]);
        }
    }
}

#[test]
fn support_and_query_never_overlap() {
    let data = generate_dataset(&SyntheticSpec::preset(4, 8, ArtifactLevel::Moderate, 3)).unwrap();
    let sampler = EpisodeSampler::new(&data, &[0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let ep = sampler.sample(3, 3, 2, &mut rng).unwrap();
        let support: HashSet<usize> = ep.support.iter().copied().collect();
        assert_eq!(support.len(), ep.support.len());
        assert!(ep.query.iter().all(|i| !support.contains(i)));
        for (&i, &l) in ep.support.iter().zip(&ep.support_labels).chain(ep.query.iter().zip(&ep.query_labels)) {
            assert_eq!(data[i].label, ep.classes[l]);
        }
    }
}
