//! Proxy subgroups from k-means over image embeddings, and a report on how
//! well the clusters line up with held-out attributes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("K = {k} must lie in 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, max_iters: 300, tol: 1e-8, n_init: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning run.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Points are processed in lexicographic order of their coordinates, so the
/// result depends on the set of points rather than their input order.
pub fn kmeans(data: &Matrix, config: &KMeansConfig) -> Result<ClusterAssignment> {
    let n = data.rows();
    if config.k == 0 || config.k > n {
        return Err(ClusterError::BadK { k: config.k, n });
    }
    if !data.all_finite() {
        return Err(ClusterError::Invalid("embeddings contain non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        data.row(a).iter().zip(data.row(b)).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted = Matrix::from_rows(&order.iter().map(|&i| data.row(i)).collect::<Vec<_>>()).expect("uniform rows");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..config.n_init.max(1) {
        let init = kmeans_plus_plus(&sorted, config.k, &mut rng);
        let run = lloyd(&sorted, init, config.max_iters, config.tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one run");
    let mut labels = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        labels[orig] = best.labels[pos];
    }
    best.labels = labels;
    Ok(best)
}

fn kmeans_plus_plus<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = data.rows();
    let mut centroids = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), &c));
        }
        centroids.push(c);
    }
    Matrix::from_rows(&centroids).expect("uniform rows")
}

fn lloyd(data: &Matrix, mut centroids: Matrix, max_iters: usize, tol: f64) -> ClusterAssignment {
    let (n, d) = data.shape();
    let k = centroids.rows();
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for i in 0..n {
            let (c, dist) = nearest(data.row(i), &centroids);
            labels[i] = c;
            dists[i] = dist;
        }
        history.push(dists.iter().sum());

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(data.row(i)) {
                *s += x;
            }
        }
        let mut next = centroids.clone();
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                for (dst, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / count as f64;
                }
            } else {
                // Reseed an empty cluster at the point farthest from its centroid.
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a))).expect("n >= k >= 1");
                next.row_mut(c).copy_from_slice(data.row(far));
                dists[far] = 0.0;
            }
        }
        let shift = (0..k).map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    for i in 0..n {
        let (c, dist) = nearest(data.row(i), &centroids);
        labels[i] = c;
        dists[i] = dist;
    }
    let inertia = dists.iter().sum();
    if history.last().is_none_or(|&last| inertia < last) {
        history.push(inertia);
    }
    ClusterAssignment { labels, centroids, inertia, iterations, inertia_history: history }
}

/// Cluster-by-category counts plus normalized mutual information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub schema_version: u32,
    pub attribute: String,
    pub clusters: Vec<usize>,
    pub categories: Vec<String>,
    /// `counts[c][a]`: records in cluster `clusters[c]` with category `categories[a]`.
    pub counts: Vec<Vec<usize>>,
    /// `I(C; A) / ((H(C) + H(A)) / 2)`.
    pub nmi: f64,
}

pub fn cluster_report(attribute: &str, labels: &[usize], categories: &[String]) -> Result<ClusterReport> {
    if labels.len() != categories.len() {
        return Err(ClusterError::Invalid(format!("{} cluster labels for {} records", labels.len(), categories.len())));
    }
    let mut cluster_ids: Vec<usize> = labels.to_vec();
    cluster_ids.sort_unstable();
    cluster_ids.dedup();
    let mut cats: Vec<String> = categories.to_vec();
    cats.sort();
    cats.dedup();
    let ci: BTreeMap<usize, usize> = cluster_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ai: BTreeMap<&str, usize> = cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut counts = vec![vec![0usize; cats.len()]; cluster_ids.len()];
    for (l, a) in labels.iter().zip(categories) {
        counts[ci[l]][ai[a.as_str()]] += 1;
    }
    let nmi = normalized_mutual_information(&counts);
    Ok(ClusterReport { schema_version: 1, attribute: attribute.to_string(), clusters: cluster_ids, categories: cats, counts, nmi })
}

/// NMI of a contingency table with arithmetic-mean normalization. Two
/// constant labelings score 1; exactly one constant labeling scores 0.
pub fn normalized_mutual_information(counts: &[Vec<usize>]) -> f64 {
    let n: usize = counts.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let rows: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols_len = counts.first().map_or(0, Vec::len);
    let cols: Vec<f64> = (0..cols_len).map(|j| counts.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let entropy = |m: &[f64]| -m.iter().filter(|&&c| c > 0.0).map(|c| (c / n) * (c / n).ln()).sum::<f64>();
    let (hc, ha) = (entropy(&rows), entropy(&cols));
    if hc == 0.0 && ha == 0.0 {
        return 1.0;
    }
    if hc == 0.0 || ha == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, r) in counts.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += (c / n) * ((c * n) / (rows[i] * cols[j])).ln();
            }
        }
    }
    (mi / ((hc + ha) / 2.0)).clamp(0.0, 1.0)
}
