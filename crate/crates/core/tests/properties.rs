use std::collections::BTreeMap;

use debiasclip::cluster::{kmeans, normalized_mutual_information, KMeansConfig};
use debiasclip::data::{hash_featurize, largest_remainder, split_indices};
use debiasclip::metrics::{auc, eod, es_auc, EsAucMode, Scored, ScoredPredictions};
use debiasclip::model::{DualEncoder, EncoderConfig};
use debiasclip::reweight::WeightVector;
use debiasclip::tensor::Matrix;
use proptest::prelude::*;

/// Scores with both classes present, as `(score, label, group index)`.
fn scored_items() -> impl Strategy<Value = Vec<(f64, u8, usize)>> {
    prop::collection::vec((-5.0..5.0f64, 0u8..2, 0usize..3), 8..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0))
}

fn predictions(items: &[(f64, u8, usize)], names: &[&str]) -> ScoredPredictions {
    ScoredPredictions::new(
        items.iter().map(|&(score, label, g)| Scored { score, pred: u8::from(score >= 0.0), label, group: names[g].to_string() }).collect(),
    )
    .unwrap()
}

/// Relative comparison; the same sums taken in another order can differ in
/// the last bits.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms(items in scored_items()) {
        let scores: Vec<f64> = items.iter().map(|x| x.0).collect();
        let labels: Vec<u8> = items.iter().map(|x| x.1).collect();
        let base = auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 - 1.0).collect();
        prop_assert_eq!(auc(&warped, &labels).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!(close(auc(&flipped, &labels).unwrap(), 1.0 - base));
    }

    #[test]
    fn fairness_metrics_ignore_group_names(items in scored_items()) {
        let a = predictions(&items, &["x", "y", "z"]);
        let b = predictions(&items, &["zeta", "alpha", "mid"]);
        for mode in [EsAucMode::Ratio, EsAucMode::MeanGap] {
            match (es_auc(&a, mode), es_auc(&b, mode)) {
                (Ok(x), Ok(y)) => prop_assert!(close(x, y)),
                (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
            }
        }
        match (eod(&a), eod(&b)) {
            (Ok(x), Ok(y)) => {
                prop_assert!(x.value >= 0.0);
                prop_assert!(close(x.value, y.value));
            }
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
    }

    #[test]
    fn es_auc_ratio_never_exceeds_overall(items in scored_items()) {
        let p = predictions(&items, &["x", "y", "z"]);
        if let Ok(v) = es_auc(&p, EsAucMode::Ratio) {
            let overall = auc(&p.scores(), &p.labels()).unwrap();
            prop_assert!(v <= overall + 1e-15 && v >= 0.0);
        }
    }

    #[test]
    fn weights_are_a_distribution_or_zero(raw in prop::collection::vec(-3.0..3.0f64, 1..40)) {
        let w = WeightVector::from_raw(raw.clone());
        prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        if raw.iter().any(|&x| x > 0.0) {
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(w.weights.iter().all(|&x| x == 0.0));
        }
        for ((r, c), wt) in raw.iter().zip(&w.clamped).zip(&w.weights) {
            prop_assert_eq!(*c, r.max(0.0));
            prop_assert_eq!(*r <= 0.0, *wt == 0.0);
        }
    }

    #[test]
    fn weights_scale_invariant(raw in prop::collection::vec(-3.0..3.0f64, 1..20), scale in 0.01..100.0f64) {
        let a = WeightVector::from_raw(raw.clone());
        let b = WeightVector::from_raw(raw.iter().map(|x| x * scale).collect());
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_ignores_row_order(
        points in prop::collection::vec(prop::collection::vec(-4.0..4.0f64, 2), 6..30),
        k in 1usize..4,
        seed in any::<u64>(),
        rot in 0usize..30,
    ) {
        let mut shuffled = points.clone();
        let r = rot % points.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let cfg = KMeansConfig::new(k, seed);
        let a = kmeans(&Matrix::from_rows(&points).unwrap(), &cfg).unwrap();
        let b = kmeans(&Matrix::from_rows(&shuffled).unwrap(), &cfg).unwrap();
        prop_assert!(close(a.inertia, b.inertia), "{} vs {}", a.inertia, b.inertia);
        // Same partition: map each original point to its label in both runs.
        let n = points.len();
        let pos_in_b = |i: usize| n - 1 - ((i + n - r) % n);
        let mut mapping = BTreeMap::new();
        for i in 0..n {
            let la = a.labels[i];
            let lb = b.labels[pos_in_b(i)];
            prop_assert_eq!(*mapping.entry(la).or_insert(lb), lb);
        }
    }

    #[test]
    fn nmi_is_bounded(counts in prop::collection::vec(prop::collection::vec(0usize..20, 3), 1..5)) {
        let v = normalized_mutual_information(&counts);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{}", v);
    }

    #[test]
    fn checkpoints_roundtrip_bit_exactly(
        p in 1usize..6, q in 1usize..6, d in 1usize..5, layers in 1usize..4, seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig { layers, ..EncoderConfig::new(p, q, d) };
        let model = DualEncoder::new(cfg, seed).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let back = DualEncoder::read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(&buf[..8], b"DBCLIPCK");
        // Any truncation is rejected.
        let cut = buf.len() / 2;
        prop_assert!(DualEncoder::read_checkpoint(&mut &buf[..cut]).is_err());
    }

    #[test]
    fn apportionment_and_split_preserve_counts(
        n in 0usize..500,
        raw in prop::collection::vec(0.01..1.0f64, 3),
        labels in prop::collection::vec(0u8..2, 0..200),
        seed in any::<u64>(),
    ) {
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let counts = largest_remainder(n, &w);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, wi) in counts.iter().zip(&w) {
            prop_assert!((*c as f64 - wi * n as f64).abs() < 1.0 + 1e-9);
        }
        let fr = [w[0], w[1], 1.0 - w[0] - w[1]];
        let parts = split_indices(&labels, fr, seed).unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn hashed_text_is_unit_norm_or_empty(note in "[a-z ]{0,40}", dim in 1usize..64) {
        let v = hash_featurize(&note, dim);
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if note.split_whitespace().next().is_none() {
            prop_assert_eq!(n, 0.0);
        } else if n > 0.0 {
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(hash_featurize(&note.to_uppercase(), dim), v);
    }
}
