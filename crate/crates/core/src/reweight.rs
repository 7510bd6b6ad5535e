//! Gradient-alignment surrogate weights and the joint debiased objective.
//!
//! For a batch with `2B` augmented views, the weight of view `m` is
//!
//! ```text
//! w_m     = <grad_I topk_clip, grad_I ctr_m>
//! w_hat_m = max(w_m, 0)
//! W_m     = w_hat_m / (sum_j w_hat_j + delta(sum_j w_hat_j)),  delta(0) = 1, else 0
//! ```
//!
//! where `grad_I` is taken over a selected subset of image-encoder
//! parameters. `W` is either a probability vector or all zeros. The debiased
//! objective adds `beta * sum_m W_m * ctr_m` to the CLIP loss with `W` held
//! constant.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::PairedBatch;
use crate::losses::{self, ClipGranularity, LossBreakdown, LossError};
use crate::model::{bias_name, weight_name, DualEncoder, ModelError, Tower};
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("gradient scope selects no parameters")]
    EmptyScope,
    #[error("non-finite gradient for view {0}")]
    NonFiniteView(usize),
    #[error("non-finite gradient for the top-k CLIP loss")]
    NonFiniteAnchor,
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("weight vector has {got} entries, batch has {expected} views")]
    WeightLength { expected: usize, got: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ReweightError>;

/// Normalized surrogate weights plus the intermediate quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    /// Raw alignments `w_m`.
    pub raw: Vec<f64>,
    /// `max(w_m, 0)`.
    pub clamped: Vec<f64>,
    /// `sum_j w_hat_j + delta(sum_j w_hat_j)`.
    pub normalizer: f64,
}

impl WeightVector {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let clamped: Vec<f64> = raw.iter().map(|&w| if w > 0.0 { w } else { 0.0 }).collect();
        let total: f64 = clamped.iter().sum();
        let normalizer = if total == 0.0 { total + 1.0 } else { total };
        let weights = clamped.iter().map(|w| w / normalizer).collect();
        Self { weights, raw, clamped, normalizer }
    }

    /// All-zero weights for `n` views.
    pub fn zeros(n: usize) -> Self {
        Self::from_raw(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// True when every alignment was clamped away.
    pub fn is_zero(&self) -> bool {
        self.clamped.iter().all(|&w| w == 0.0)
    }

    pub fn summary(&self) -> WeightSummary {
        let n = self.weights.len().max(1) as f64;
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        let entropy = -self.weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>();
        let zero_fraction = self.weights.iter().filter(|&&w| w == 0.0).count() as f64 / n;
        WeightSummary { max, entropy, zero_fraction }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightSummary {
    pub max: f64,
    pub entropy: f64,
    pub zero_fraction: f64,
}

/// Which image-encoder parameters the alignment gradients cover.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScope {
    /// Weight and bias of the image tower's last layer (the embedding
    /// projection).
    #[default]
    FinalLayer,
    /// Every image-tower parameter.
    ImageEncoder,
    /// Explicit parameter names.
    Params(Vec<String>),
}

impl GradScope {
    /// Parameter names in store order.
    pub fn resolve(&self, model: &DualEncoder) -> Result<Vec<String>> {
        let mut names = match self {
            GradScope::FinalLayer => {
                let last = model.layers() - 1;
                vec![bias_name(Tower::Image, last), weight_name(Tower::Image, last)]
            }
            GradScope::ImageEncoder => model.tower_params(Tower::Image),
            GradScope::Params(names) => names.iter().filter(|n| model.params().contains(n)).cloned().collect(),
        };
        names.sort();
        names.dedup();
        if names.is_empty() {
            return Err(ReweightError::EmptyScope);
        }
        Ok(names)
    }

    pub fn label(&self) -> String {
        match self {
            GradScope::FinalLayer => "final-layer".into(),
            GradScope::ImageEncoder => "image-encoder".into(),
            GradScope::Params(p) => format!("params:{}", p.join(",")),
        }
    }
}

/// How raw per-view scores are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMode {
    /// Dot product with the top-k CLIP gradient.
    #[default]
    Alignment,
    /// Norm of each view's contrastive gradient; ignores the CLIP anchor.
    Table1Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub k: usize,
    #[serde(default)]
    pub scope: GradScope,
    #[serde(default)]
    pub mode: AlignmentMode,
    #[serde(default)]
    pub granularity: ClipGranularity,
}

impl AlignmentConfig {
    pub fn new(k: usize) -> Self {
        Self { k, scope: GradScope::default(), mode: AlignmentMode::default(), granularity: ClipGranularity::default() }
    }
}

/// Raw scores from an anchor gradient and per-view gradients.
pub fn raw_alignments(anchor: &[f64], per_view: &[Vec<f64>], mode: AlignmentMode) -> Vec<f64> {
    per_view
        .iter()
        .map(|g| match mode {
            AlignmentMode::Alignment => dot(anchor, g),
            AlignmentMode::Table1Norm => norm(g),
        })
        .collect()
}

/// Gradient of the top-k CLIP loss over `scope`, flattened in store order.
pub fn topk_clip_gradient(
    model: &DualEncoder,
    batch: &PairedBatch,
    k: usize,
    granularity: ClipGranularity,
    scope: &[String],
) -> Result<Vec<f64>> {
    let mut g = Graph::with_trainable(scope);
    let tau = model.tau_node(&mut g)?;
    let text_in = g.constant(batch.texts.clone());
    let zt = model.encode_text(&mut g, text_in)?;
    let root = match granularity {
        ClipGranularity::Example => {
            let x = g.constant(batch.images.clone());
            let zi = model.encode_image(&mut g, x)?;
            losses::topk_clip_loss(&mut g, zi, zt, tau, k)?
        }
        ClipGranularity::View => {
            let b = batch.batch_size();
            let first = g.constant(rows(&batch.views, 0, b));
            let second = g.constant(rows(&batch.views, b, 2 * b));
            let z1 = model.encode_image(&mut g, first)?;
            let z2 = model.encode_image(&mut g, second)?;
            losses::topk_clip_loss_views(&mut g, z1, z2, zt, tau, k)?
        }
    };
    Ok(g.grad_vector_scoped(root, model.params(), Some(scope))?)
}

/// Gradient of view `m`'s contrastive loss over `scope`.
pub fn view_ctr_gradient(model: &DualEncoder, batch: &PairedBatch, view: usize, scope: &[String]) -> Result<Vec<f64>> {
    Ok(view_ctr_gradients(model, batch, view..view + 1, scope)?.remove(0))
}

/// Per-view contrastive gradients for `views`, sharing one forward pass.
pub fn view_ctr_gradients(model: &DualEncoder, batch: &PairedBatch, views: Range<usize>, scope: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::with_trainable(scope);
    let tau = model.tau_node(&mut g)?;
    let v = g.constant(batch.views.clone());
    let z = model.encode_image(&mut g, v)?;
    let ctr = losses::ctr_loss(&mut g, z, &batch.pairing, tau)?;
    let mut out = Vec::with_capacity(views.len());
    for m in views {
        let root = g.gather(ctr, &[(m, 0)])?;
        let grad = g.grad_vector_scoped(root, model.params(), Some(scope))?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(ReweightError::NonFiniteView(m));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Surrogate weights for every view of `batch`. One backward pass for the
/// anchor, then one per view. Views are split into contiguous chunks, one
/// per worker; each chunk shares a forward pass against the same frozen
/// parameters, and results are collected in view order.
pub fn alignment_weights(batch: &PairedBatch, model: &DualEncoder, config: &AlignmentConfig) -> Result<WeightVector> {
    let scope = config.scope.resolve(model)?;
    let anchor = match config.mode {
        AlignmentMode::Alignment => {
            let a = topk_clip_gradient(model, batch, config.k, config.granularity, &scope)?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ReweightError::NonFiniteAnchor);
            }
            a
        }
        AlignmentMode::Table1Norm => Vec::new(),
    };
    let n = batch.num_views();
    let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let per_view: Vec<Vec<f64>> = starts
        .into_par_iter()
        .map(|s| view_ctr_gradients(model, batch, s..(s + chunk).min(n), &scope))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(WeightVector::from_raw(raw_alignments(&anchor, &per_view, config.mode)))
}

fn rows(m: &Matrix, from: usize, to: usize) -> Matrix {
    Matrix::from_rows(&(from..to).map(|r| m.row(r)).collect::<Vec<_>>()).expect("uniform rows")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    #[default]
    Clip,
    Debiased,
}

/// Records the objective on `g`.
///
/// `Clip` is the symmetric CLIP loss on the un-augmented batch. `Debiased`
/// adds `beta * sum_m W_m * ctr_m` over the augmented views, with `weights`
/// entering as constants (`None` means all zeros).
pub fn build_objective(
    g: &mut Graph,
    model: &DualEncoder,
    batch: &PairedBatch,
    mode: ObjectiveMode,
    beta: f64,
    weights: Option<&WeightVector>,
) -> Result<LossBreakdown> {
    if beta.is_nan() || beta < 0.0 {
        return Err(ReweightError::NegativeBeta(beta));
    }
    let tau = model.tau_node(g)?;
    let x = g.constant(batch.images.clone());
    let t = g.constant(batch.texts.clone());
    let zi = model.encode_image(g, x)?;
    let zt = model.encode_text(g, t)?;
    let clip = losses::clip_loss(g, zi, zt, tau)?;
    if mode == ObjectiveMode::Clip {
        return Ok(clip);
    }
    let n = batch.num_views();
    let w = match weights {
        Some(w) if w.len() != n => return Err(ReweightError::WeightLength { expected: n, got: w.len() }),
        Some(w) => w.weights.clone(),
        None => vec![0.0; n],
    };
    let v = g.constant(batch.views.clone());
    let zv = model.encode_image(g, v)?;
    let ctr = losses::ctr_loss(g, zv, &batch.pairing, tau)?;
    let w = g.constant(Matrix::column(w));
    let weighted = g.dot(w, ctr)?;
    let weighted = g.scale(weighted, beta);
    let total = g.add(clip.total, weighted)?;
    Ok(LossBreakdown { total, ctr: Some(ctr), ..clip })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub beta: f64,
    pub alignment: AlignmentConfig,
}

/// Computes weights (debiased mode only) and records the objective on `g`.
pub fn debiased_objective(
    g: &mut Graph,
    model: &DualEncoder,
    batch: &PairedBatch,
    config: &ObjectiveConfig,
) -> Result<(LossBreakdown, Option<WeightVector>)> {
    if config.beta.is_nan() || config.beta < 0.0 {
        return Err(ReweightError::NegativeBeta(config.beta));
    }
    let weights = match config.mode {
        ObjectiveMode::Clip => None,
        ObjectiveMode::Debiased => Some(alignment_weights(batch, model, &config.alignment)?),
    };
    let loss = build_objective(g, model, batch, config.mode, config.beta, weights.as_ref())?;
    Ok((loss, weights))
}

/// Optional exponential moving average over successive weight vectors:
/// `state <- rho * state + (1 - rho) * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSmoother {
    rho: f64,
    state: Option<Vec<f64>>,
}

impl WeightSmoother {
    pub fn new(rho: f64) -> Self {
        Self { rho: rho.clamp(0.0, 1.0), state: None }
    }

    pub fn apply(&mut self, w: &WeightVector) -> WeightVector {
        let next: Vec<f64> = match &self.state {
            Some(prev) if prev.len() == w.len() => prev.iter().zip(&w.weights).map(|(p, c)| self.rho * p + (1.0 - self.rho) * c).collect(),
            _ => w.weights.clone(),
        };
        self.state = Some(next.clone());
        WeightVector { weights: next, ..w.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrainExample;
    use crate::model::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_example() {
        let w = WeightVector::from_raw(vec![2.0, -1.0, 3.0, 0.0]);
        assert_eq!(w.weights, vec![0.4, 0.0, 0.6, 0.0]);
        assert_eq!(w.clamped, vec![2.0, 0.0, 3.0, 0.0]);
        assert_eq!(w.normalizer, 5.0);
    }

    #[test]
    fn all_negative_hits_delta_guard() {
        let w = WeightVector::from_raw(vec![-0.5, -2.0, 0.0]);
        assert_eq!(w.weights, vec![0.0; 3]);
        assert_eq!(w.normalizer, 1.0);
        assert_eq!(w.sum(), 0.0);
        assert!(w.is_zero());
    }

    #[test]
    fn summary_of_uniform_weights() {
        let w = WeightVector::from_raw(vec![1.0, 1.0, 1.0, 1.0]);
        let s = w.summary();
        assert!((s.entropy - 4f64.ln()).abs() < 1e-12);
        assert_eq!(s.max, 0.25);
        assert_eq!(s.zero_fraction, 0.0);
    }

    #[test]
    fn alignment_scales_with_view_gradients() {
        let anchor = vec![1.0, -2.0, 0.5];
        let views = vec![vec![0.3, 0.1, -1.0], vec![-1.0, -1.0, 0.0], vec![2.0, 0.0, 1.0]];
        let raw = raw_alignments(&anchor, &views, AlignmentMode::Alignment);
        let scaled: Vec<Vec<f64>> = views.iter().map(|v| v.iter().map(|x| 3.0 * x).collect()).collect();
        let raw3 = raw_alignments(&anchor, &scaled, AlignmentMode::Alignment);
        for (a, b) in raw.iter().zip(&raw3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
        let (w, w3) = (WeightVector::from_raw(raw), WeightVector::from_raw(raw3));
        for (a, b) in w.weights.iter().zip(&w3.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn table1_norm_mode_uses_gradient_norms() {
        let raw = raw_alignments(&[], &[vec![3.0, 4.0], vec![0.0, 1.0]], AlignmentMode::Table1Norm);
        assert_eq!(raw, vec![5.0, 1.0]);
    }

    #[test]
    fn smoother_blends_successive_vectors() {
        let mut s = WeightSmoother::new(0.5);
        let a = s.apply(&WeightVector::from_raw(vec![1.0, 0.0]));
        assert_eq!(a.weights, vec![1.0, 0.0]);
        let b = s.apply(&WeightVector::from_raw(vec![0.0, 1.0]));
        assert_eq!(b.weights, vec![0.5, 0.5]);
    }

    fn tiny_batch(seed: u64, b: usize, p: usize, q: usize) -> PairedBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex: Vec<TrainExample> = (0..b)
            .map(|i| TrainExample {
                image: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                text: (0..q).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: (i % 2) as u8,
            })
            .collect();
        let refs: Vec<&TrainExample> = ex.iter().collect();
        PairedBatch::from_examples(&refs, 0.3, &mut rng).unwrap()
    }

    #[test]
    fn scope_resolution() {
        let model = DualEncoder::new(EncoderConfig::new(3, 3, 2), 0).unwrap();
        assert_eq!(GradScope::FinalLayer.resolve(&model).unwrap(), vec!["image.l1.bias", "image.l1.weight"]);
        assert_eq!(GradScope::ImageEncoder.resolve(&model).unwrap().len(), 4);
        assert!(matches!(GradScope::Params(vec![]).resolve(&model), Err(ReweightError::EmptyScope)));
        assert!(matches!(GradScope::Params(vec!["nope".into()]).resolve(&model), Err(ReweightError::EmptyScope)));
    }

    #[test]
    fn weights_are_on_simplex_or_zero() {
        let model = DualEncoder::new(EncoderConfig::new(4, 3, 2), 5).unwrap();
        let batch = tiny_batch(1, 3, 4, 3);
        let w = alignment_weights(&batch, &model, &AlignmentConfig::new(2)).unwrap();
        assert_eq!(w.len(), 6);
        assert!(w.weights.iter().all(|&x| x >= 0.0));
        let s = w.sum();
        assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        for (wm, raw) in w.weights.iter().zip(&w.raw) {
            if *raw <= 0.0 {
                assert_eq!(*wm, 0.0);
            }
        }
    }

    #[test]
    fn parallel_weights_are_deterministic() {
        let model = DualEncoder::new(EncoderConfig::new(4, 3, 2), 6).unwrap();
        let batch = tiny_batch(2, 4, 4, 3);
        let cfg = AlignmentConfig { scope: GradScope::ImageEncoder, ..AlignmentConfig::new(2) };
        let a = alignment_weights(&batch, &model, &cfg).unwrap();
        let b = alignment_weights(&batch, &model, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_beta_rejected() {
        let model = DualEncoder::new(EncoderConfig::new(2, 2, 2), 0).unwrap();
        let batch = tiny_batch(0, 2, 2, 2);
        let mut g = Graph::new();
        let err = build_objective(&mut g, &model, &batch, ObjectiveMode::Debiased, -1.0, None).unwrap_err();
        assert!(matches!(err, ReweightError::NegativeBeta(_)));
    }

    #[test]
    fn zero_beta_matches_clip_only() {
        let model = DualEncoder::new(EncoderConfig::new(3, 3, 2), 1).unwrap();
        let batch = tiny_batch(3, 3, 3, 3);
        let w = WeightVector::from_raw(vec![1.0, 2.0, 0.0, 0.5, 0.0, 1.0]);
        let mut g1 = Graph::new();
        let a = build_objective(&mut g1, &model, &batch, ObjectiveMode::Clip, 0.0, None).unwrap();
        let mut g2 = Graph::new();
        let b = build_objective(&mut g2, &model, &batch, ObjectiveMode::Debiased, 0.0, Some(&w)).unwrap();
        assert_eq!(g1.scalar_value(a.total), g2.scalar_value(b.total));
        assert_eq!(g1.grad_vector(a.total, model.params()).unwrap(), g2.grad_vector(b.total, model.params()).unwrap());
    }
}
