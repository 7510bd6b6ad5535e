//! Training objectives built on the autodiff tape.
//!
//! Similarities are plain inner products `u . v`; callers pass L2-normalized
//! rows so these are cosines. Temperatures are `1 x 1` nodes so they can be
//! learned.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("k = {k} is outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("invalid pairing: {0}")]
    Pairing(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Scalar total plus the per-item terms it aggregates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: NodeId,
    /// The symmetric CLIP part of `total` (equal to it for CLIP-only objectives).
    pub clip: NodeId,
    /// `B x 1` image-to-text terms.
    pub i2t: NodeId,
    /// `B x 1` text-to-image terms.
    pub t2i: NodeId,
    /// `2B x 1` per-view contrastive terms, when the objective has them.
    pub ctr: Option<NodeId>,
}

impl LossBreakdown {
    /// Per-example CLIP loss `(i2t + t2i) / 2` as a `B x 1` node.
    pub fn per_example(&self, g: &mut Graph) -> Result<NodeId> {
        let s = g.add(self.i2t, self.t2i)?;
        Ok(g.scale(s, 0.5))
    }
}

/// Symmetric CLIP loss over a batch of paired embeddings:
/// `total = 1/(2B) * sum_i (i2t_i + t2i_i)`.
pub fn clip_loss(g: &mut Graph, image: NodeId, text: NodeId, tau: NodeId) -> Result<LossBreakdown> {
    let (si, st) = (g.shape(image), g.shape(text));
    if si != st {
        return Err(AutodiffError::ShapeMismatch { op: "clip_loss", lhs: si, rhs: st }.into());
    }
    let b = si.0;
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    let text_t = g.transpose(text);
    let sims = g.matmul(image, text_t)?;
    let logits = g.div_scalar(sims, tau)?;
    let diag: Vec<_> = (0..b).map(|i| (i, i)).collect();
    let positives = g.gather(logits, &diag)?;

    let lse_rows = g.logsumexp_rows(logits, None)?;
    let i2t = g.sub(lse_rows, positives)?;
    let logits_t = g.transpose(logits);
    let lse_cols = g.logsumexp_rows(logits_t, None)?;
    let t2i = g.sub(lse_cols, positives)?;

    let a = g.sum(i2t);
    let c = g.sum(t2i);
    let both = g.add(a, c)?;
    let total = g.scale(both, 1.0 / (2.0 * b as f64));
    Ok(LossBreakdown { total, clip: total, i2t, t2i, ctr: None })
}

/// Checks that `pairing` is a fixed-point-free involution on `0..n`.
pub fn validate_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(LossError::Pairing(format!("{} entries for {n} views", pairing.len())));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= n {
            return Err(LossError::Pairing(format!("view {i} paired with out-of-range {j}")));
        }
        if j == i {
            return Err(LossError::Pairing(format!("view {i} is its own positive")));
        }
        if pairing[j] != i {
            return Err(LossError::Pairing(format!("view {i} -> {j} but {j} -> {}", pairing[j])));
        }
    }
    Ok(())
}

/// Standard pairing for views laid out as `[first views; second views]`.
pub fn two_view_pairing(batch: usize) -> Vec<usize> {
    (0..2 * batch).map(|i| (i + batch) % (2 * batch)).collect()
}

/// Image-pair contrastive loss, one value per view:
/// `-log( exp(s(z_i, z_pair(i))/tau) / sum_{m != i} exp(s(z_i, z_m)/tau) )`.
pub fn ctr_loss(g: &mut Graph, views: NodeId, pairing: &[usize], tau: NodeId) -> Result<NodeId> {
    let n = g.shape(views).0;
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    validate_pairing(pairing, n)?;
    let vt = g.transpose(views);
    let sims = g.matmul(views, vt)?;
    let logits = g.div_scalar(sims, tau)?;
    let mask: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let lse = g.logsumexp_rows(logits, Some(&mask))?;
    let pos: Vec<_> = pairing.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    let positives = g.gather(logits, &pos)?;
    Ok(g.sub(lse, positives)?)
}

/// Index of the `k`-th largest entry; ties are ordered by position.
pub fn kth_largest_index(values: &[f64], k: usize) -> Result<usize> {
    if k == 0 || k > values.len() {
        return Err(LossError::KOutOfRange { k, n: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    Ok(order[k - 1])
}

/// The `k`-th largest entry of `values`.
pub fn kth_largest(values: &[f64], k: usize) -> Result<f64> {
    Ok(values[kth_largest_index(values, k)?])
}

/// Average-top-k relaxation `(1/k) * sum_m [l_m - lambda]_+ + lambda`, with
/// `lambda` the k-th largest loss.
///
/// Which entry plays `lambda` is decided from the current values and then
/// fixed; its value stays on the tape. The result equals the mean of the `k`
/// largest entries and its gradient is `1/k` on each of them (away from ties).
pub fn topk_relax(g: &mut Graph, losses: NodeId, k: usize) -> Result<NodeId> {
    let values = g.value(losses);
    if values.cols() != 1 {
        return Err(AutodiffError::ShapeMismatch { op: "topk_relax", lhs: values.shape(), rhs: (values.rows(), 1) }.into());
    }
    let idx = kth_largest_index(values.as_slice(), k)?;
    let lambda = g.gather(losses, &[(idx, 0)])?;
    let neg_lambda = g.scale(lambda, -1.0);
    let shifted = g.add_scalar(losses, neg_lambda)?;
    let hinge = g.relu(shifted);
    let s = g.sum(hinge);
    let avg = g.scale(s, 1.0 / k as f64);
    Ok(g.add(avg, lambda)?)
}

/// Which per-item CLIP losses the top-k relaxation ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipGranularity {
    /// One loss per image-text example (`B` items).
    #[default]
    Example,
    /// One loss per augmented view against its shared text (`2B` items).
    View,
}

/// Top-k relaxation over per-example CLIP losses `(i2t_i + t2i_i) / 2`.
pub fn topk_clip_loss(g: &mut Graph, image: NodeId, text: NodeId, tau: NodeId, k: usize) -> Result<NodeId> {
    let breakdown = clip_loss(g, image, text, tau)?;
    let per = breakdown.per_example(g)?;
    topk_relax(g, per, k)
}

/// Top-k relaxation over per-view CLIP losses: each set of views is scored
/// against the shared text batch and the `2B` per-item losses are ranked.
pub fn topk_clip_loss_views(g: &mut Graph, first: NodeId, second: NodeId, text: NodeId, tau: NodeId, k: usize) -> Result<NodeId> {
    let a = clip_loss(g, first, text, tau)?;
    let pa = a.per_example(g)?;
    let b = clip_loss(g, second, text, tau)?;
    let pb = b.per_example(g)?;
    let per = g.concat_rows(&[pa, pb])?;
    topk_relax(g, per, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let mut m = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        for i in 0..r {
            let n = crate::tensor::norm(m.row(i));
            m.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        m
    }

    /// Explicit double loop over the symmetric CLIP definition.
    fn clip_oracle(zi: &Matrix, zt: &Matrix, tau: f64) -> f64 {
        let b = zi.rows();
        let s = |i: usize, j: usize| crate::tensor::dot(zi.row(i), zt.row(j)) / tau;
        let mut total = 0.0;
        for i in 0..b {
            let den_i2t: f64 = (0..b).map(|j| s(i, j).exp()).sum();
            let den_t2i: f64 = (0..b).map(|j| s(j, i).exp()).sum();
            total += -(s(i, i).exp() / den_i2t).ln() - (s(i, i).exp() / den_t2i).ln();
        }
        total / (2.0 * b as f64)
    }

    fn ctr_oracle(v: &Matrix, pair: &[usize], tau: f64) -> Vec<f64> {
        let n = v.rows();
        let s = |i: usize, j: usize| crate::tensor::dot(v.row(i), v.row(j)) / tau;
        (0..n)
            .map(|i| {
                let mut den = 0.0;
                for m in 0..n {
                    if m != i {
                        den += s(i, m).exp();
                    }
                }
                -(s(i, pair[i]).exp() / den).ln()
            })
            .collect()
    }

    fn clip_value(zi: &Matrix, zt: &Matrix, tau: f64) -> f64 {
        let mut g = Graph::new();
        let (a, b, t) = (g.leaf(zi.clone()), g.leaf(zt.clone()), g.constant_scalar(tau));
        let l = clip_loss(&mut g, a, b, t).unwrap();
        g.scalar_value(l.total)
    }

    #[test]
    fn clip_single_pair_is_zero() {
        let z = Matrix::from_vec(1, 2, vec![0.6, 0.8]);
        assert_eq!(clip_value(&z, &z, 0.07), 0.0);
    }

    #[test]
    fn clip_identical_pairs_is_log_two() {
        let z = Matrix::from_vec(2, 2, vec![0.6, 0.8, 0.6, 0.8]);
        assert!((clip_value(&z, &z, 0.07) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clip_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zi = unit_rows(&mut rng, 3, 4);
        let zt = unit_rows(&mut rng, 3, 4);
        assert!((clip_value(&zi, &zt, 1.0) - clip_oracle(&zi, &zt, 1.0)).abs() < 1e-10);
        assert!((clip_value(&zi, &zt, 0.07) - clip_oracle(&zi, &zt, 0.07)).abs() < 1e-10);
    }

    #[test]
    fn clip_is_symmetric_in_towers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zi = unit_rows(&mut rng, 4, 3);
        let zt = unit_rows(&mut rng, 4, 3);
        assert!((clip_value(&zi, &zt, 0.5) - clip_value(&zt, &zi, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clip_breakdown_aggregates_to_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.leaf(unit_rows(&mut rng, 4, 3));
        let b = g.leaf(unit_rows(&mut rng, 4, 3));
        let t = g.constant_scalar(0.3);
        let l = clip_loss(&mut g, a, b, t).unwrap();
        let agg = (g.value(l.i2t).sum() + g.value(l.t2i).sum()) / 8.0;
        assert!((agg - g.scalar_value(l.total)).abs() < 1e-10);
        assert!(g.value(l.i2t).as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn clip_empty_batch_fails() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(0, 3));
        let t = g.constant_scalar(1.0);
        assert_eq!(clip_loss(&mut g, a, a, t), Err(LossError::EmptyBatch));
    }

    fn ctr_values(v: &Matrix, pair: &[usize], tau: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(v.clone());
        let t = g.constant_scalar(tau);
        let l = ctr_loss(&mut g, x, pair, t).unwrap();
        g.value(l).as_slice().to_vec()
    }

    #[test]
    fn ctr_single_pair_is_zero() {
        let v = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ctr_values(&v, &[1, 0], 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn ctr_identical_views_is_log_three() {
        let v = Matrix::filled(4, 2, std::f64::consts::FRAC_1_SQRT_2);
        for l in ctr_values(&v, &two_view_pairing(2), 1.0) {
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ctr_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = unit_rows(&mut rng, 6, 5);
        let pair = two_view_pairing(3);
        for tau in [1.0, 0.1] {
            let got = ctr_values(&v, &pair, tau);
            let want = ctr_oracle(&v, &pair, tau);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
                assert!(*a >= 0.0);
            }
        }
    }

    #[test]
    fn ctr_rejects_bad_pairings() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::filled(4, 2, 0.5));
        let t = g.constant_scalar(1.0);
        assert!(matches!(ctr_loss(&mut g, x, &[0, 2, 1, 3], t), Err(LossError::Pairing(_))));
        assert!(matches!(ctr_loss(&mut g, x, &[1, 2, 3, 0], t), Err(LossError::Pairing(_))));
        assert!(matches!(ctr_loss(&mut g, x, &[1, 0], t), Err(LossError::Pairing(_))));
    }

    fn topk_value(v: &[f64], k: usize) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::column(v.to_vec()));
        let r = topk_relax(&mut g, x, k)?;
        Ok(g.scalar_value(r))
    }

    #[test]
    fn topk_hand_example() {
        assert_eq!(kth_largest(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert!((topk_value(&[3.0, 1.0, 2.0], 2).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn topk_full_is_mean() {
        let v = [0.3, 1.7, -0.2, 4.0];
        assert!((topk_value(&v, 4).unwrap() - v.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn topk_k_out_of_range() {
        assert_eq!(topk_value(&[1.0, 2.0], 0), Err(LossError::KOutOfRange { k: 0, n: 2 }));
        assert_eq!(topk_value(&[1.0, 2.0], 3), Err(LossError::KOutOfRange { k: 3, n: 2 }));
    }

    #[test]
    fn topk_ties_at_threshold() {
        // Two entries tie at the k-th value; mean of the top 2 is still 2.
        assert!((topk_value(&[2.0, 2.0, 2.0, 1.0], 2).unwrap() - 2.0).abs() < 1e-15);
        assert!((topk_value(&[5.0, 2.0, 2.0, 1.0], 2).unwrap() - 3.5).abs() < 1e-15);
    }

    #[test]
    fn topk_gradient_spreads_over_top_k() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::column(vec![3.0, 1.0, 2.0, 5.0]));
        let r = topk_relax(&mut g, x, 2).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).as_slice(), &[0.5, 0.0, 0.0, 0.5]);

        // Tied threshold: only the selected entry carries lambda's share.
        let mut g = Graph::new();
        let x = g.leaf(Matrix::column(vec![2.0, 5.0, 2.0, 1.0]));
        let r = topk_relax(&mut g, x, 2).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).as_slice(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn topk_random_vectors_match_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..=12);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for k in 1..=n {
                let want = sorted[..k].iter().sum::<f64>() / k as f64;
                assert!((topk_value(&v, k).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_clip_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zi = unit_rows(&mut rng, 4, 3);
        let zt = unit_rows(&mut rng, 4, 3);
        let mut g = Graph::new();
        let (a, b, t) = (g.leaf(zi.clone()), g.leaf(zt.clone()), g.constant_scalar(0.2));
        let full = topk_clip_loss(&mut g, a, b, t, 4).unwrap();
        assert!((g.scalar_value(full) - clip_value(&zi, &zt, 0.2)).abs() < 1e-12);

        let same = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        for k in 1..=2 {
            let mut g = Graph::new();
            let (a, t) = (g.leaf(same.clone()), g.constant_scalar(0.07));
            let l = topk_clip_loss(&mut g, a, a, t, k).unwrap();
            assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_clip_matches_sorted_per_example_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zi = unit_rows(&mut rng, 4, 3);
        let zt = unit_rows(&mut rng, 4, 3);
        let tau = 0.5;
        let s = |i: usize, j: usize| crate::tensor::dot(zi.row(i), zt.row(j)) / tau;
        let mut per: Vec<f64> = (0..4)
            .map(|i| {
                let a: f64 = (0..4).map(|j| s(i, j).exp()).sum();
                let b: f64 = (0..4).map(|j| s(j, i).exp()).sum();
                0.5 * (a.ln() - s(i, i) + b.ln() - s(i, i))
            })
            .collect();
        per.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut g = Graph::new();
        let (a, b, t) = (g.leaf(zi), g.leaf(zt), g.constant_scalar(tau));
        let l = topk_clip_loss(&mut g, a, b, t, 2).unwrap();
        assert!((g.scalar_value(l) - (per[0] + per[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn topk_clip_views_ranks_two_b_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (v1, v2, zt) = (unit_rows(&mut rng, 3, 2), unit_rows(&mut rng, 3, 2), unit_rows(&mut rng, 3, 2));
        let mut g = Graph::new();
        let (a, b, c, t) = (g.leaf(v1.clone()), g.leaf(v2.clone()), g.leaf(zt.clone()), g.constant_scalar(0.4));
        let l = topk_clip_loss_views(&mut g, a, b, c, t, 6).unwrap();
        let want = (clip_value(&v1, &zt, 0.4) + clip_value(&v2, &zt, 0.4)) / 2.0;
        assert!((g.scalar_value(l) - want).abs() < 1e-12);
        assert!(topk_clip_loss_views(&mut g, a, b, c, t, 7).is_err());
    }
}
