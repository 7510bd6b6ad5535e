//! Python bindings for the debiasclip library.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`);
//! structured reports are returned as JSON strings so they keep the same
//! schema as the files the CLI writes.

use debiasclip::autodiff::Graph;
use debiasclip::cluster::{cluster_report, kmeans as kmeans_fit, KMeansConfig};
use debiasclip::data::{self, GroupSpec, PairedBatch, SyntheticSpec, TrainExample};
use debiasclip::losses;
use debiasclip::metrics::{self, EsAucMode, HardLabelRule, Scored, ScoredPredictions};
use debiasclip::model::{self as core_model, EncoderConfig, Tower};
use debiasclip::reweight::{self, AlignmentConfig, WeightVector};
use debiasclip::tensor::Matrix;
use debiasclip::trainer::{self, EvalOptions, TrainConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(err("matrix needs at least one row"));
    }
    Matrix::from_rows(rows).ok_or_else(|| err("rows have different lengths"))
}

fn es_mode(mode: &str) -> PyResult<EsAucMode> {
    mode.parse().map_err(err)
}

fn eval_options(es_auc_mode: &str, threshold: Option<f64>) -> PyResult<EvalOptions> {
    Ok(EvalOptions { es_auc_mode: es_mode(es_auc_mode)?, rule: threshold.map_or(HardLabelRule::Argmax, HardLabelRule::Threshold) })
}

/// Dual-encoder MLP with a learnable temperature.
#[pyclass(module = "debiasclip", skip_from_py_object)]
#[derive(Clone)]
struct DualEncoder {
    inner: core_model::DualEncoder,
}

#[pymethods]
impl DualEncoder {
    #[new]
    #[pyo3(signature = (image_dim, text_dim, embed_dim = 16, layers = 2, hidden = None, tau_init = 0.07, seed = 0))]
    fn new(
        image_dim: usize,
        text_dim: usize,
        embed_dim: usize,
        layers: usize,
        hidden: Option<usize>,
        tau_init: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = EncoderConfig { layers, hidden, tau_init, ..EncoderConfig::new(image_dim, text_dim, embed_dim) };
        Ok(Self { inner: core_model::DualEncoder::new(config, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: core_model::DualEncoder::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau()
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    /// Unit-norm image embeddings, one row per input row.
    fn embed_image(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.embed(Tower::Image, &matrix(&rows)?).map_err(err)?.to_rows())
    }

    /// Unit-norm text embeddings, one row per input row.
    fn embed_text(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.embed(Tower::Text, &matrix(&rows)?).map_err(err)?.to_rows())
    }

    /// Zero-shot `(score, class_id)` per image.
    fn zero_shot(&self, images: Vec<Vec<f64>>, prompts: &Prompts) -> PyResult<Vec<(f64, usize)>> {
        let zs = self.inner.zero_shot_batch(&matrix(&images)?, &prompts.inner).map_err(err)?;
        Ok(zs.iter().map(|z| (z.score, z.class_id)).collect())
    }

    /// Parameters by name, each as a list of rows.
    fn params(&self) -> Vec<(String, Vec<Vec<f64>>)> {
        self.inner.params().iter().map(|(n, m)| (n.clone(), m.to_rows())).collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Class prompts in text-feature space.
#[pyclass(module = "debiasclip", skip_from_py_object)]
#[derive(Clone)]
struct Prompts {
    inner: core_model::PromptSet,
}

#[pymethods]
impl Prompts {
    #[staticmethod]
    fn glaucoma_default(text_dim: usize) -> Self {
        Self { inner: core_model::PromptSet::glaucoma_default(text_dim) }
    }

    /// One prompt per class; class 1 is the positive class.
    #[staticmethod]
    fn from_features(features: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: core_model::PromptSet::from_features(features).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: core_model::PromptSet::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.prompts.iter().map(|p| p.features.clone()).collect()
    }
}

/// A labeled dataset with optional protected attributes.
#[pyclass(module = "debiasclip", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load_jsonl(path: &str) -> PyResult<Self> {
        Ok(Self { inner: data::load_jsonl(path).map_err(err)? })
    }

    fn save_jsonl(&self, path: &str) -> PyResult<()> {
        data::save_jsonl(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn attribute_names(&self) -> Vec<String> {
        self.inner.attribute_names()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels()
    }

    fn image_features(&self) -> Vec<Vec<f64>> {
        self.inner.image_matrix().to_rows()
    }

    /// Values of one attribute, `None` where a record lacks it.
    fn attribute(&self, name: &str) -> Vec<Option<String>> {
        self.inner.records.iter().map(|r| r.attributes.get(name).cloned()).collect()
    }

    /// Seeded label-stratified `(train, val, test)` split.
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Dataset, Dataset, Dataset)> {
        let (a, b, c) = data::split(&self.inner, [fractions.0, fractions.1, fractions.2], seed).map_err(err)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }, Dataset { inner: c }))
    }
}

/// Synthetic data with latent groups stored under the attribute `"group"`.
///
/// `groups` is a list of `(proportion, mean_shift, signal, noise)`; by
/// default a 90/10 majority/minority split is used.
#[pyfunction]
#[pyo3(signature = (n, image_dim, text_dim, seed = 0, groups = None, class_balance = 0.5))]
fn gen_synthetic(
    n: usize,
    image_dim: usize,
    text_dim: usize,
    seed: u64,
    groups: Option<Vec<(f64, f64, f64, f64)>>,
    class_balance: f64,
) -> PyResult<(Dataset, Prompts)> {
    let mut spec = SyntheticSpec::minority_bias(n, image_dim, text_dim, seed);
    spec.class_balance = class_balance;
    if let Some(g) = groups {
        spec.groups = g.into_iter().map(|(p, m, s, z)| GroupSpec::new(p, m, s, z)).collect();
    }
    let (ds, prompts) = data::gen_synthetic(&spec).map_err(err)?;
    Ok((Dataset { inner: ds }, Prompts { inner: prompts }))
}

#[pyfunction]
fn hash_featurize(note: &str, dim: usize) -> Vec<f64> {
    data::hash_featurize(note, dim)
}

/// Symmetric CLIP loss on paired unit embeddings: `(total, i2t, t2i)`.
#[pyfunction]
fn clip_loss(image: Vec<Vec<f64>>, text: Vec<Vec<f64>>, tau: f64) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let (zi, zt) = (g.constant(matrix(&image)?), g.constant(matrix(&text)?));
    let t = g.constant_scalar(tau);
    let l = losses::clip_loss(&mut g, zi, zt, t).map_err(err)?;
    Ok((g.scalar_value(l.total), g.value(l.i2t).as_slice().to_vec(), g.value(l.t2i).as_slice().to_vec()))
}

/// Per-view contrastive loss for views stacked as `[first; second]`.
#[pyfunction]
fn ctr_loss(views: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<f64>> {
    if !views.len().is_multiple_of(2) {
        return Err(err("need an even number of views"));
    }
    let mut g = Graph::new();
    let v = g.constant(matrix(&views)?);
    let t = g.constant_scalar(tau);
    let l = losses::ctr_loss(&mut g, v, &losses::two_view_pairing(views.len() / 2), t).map_err(err)?;
    Ok(g.value(l).as_slice().to_vec())
}

/// Top-k relaxation of a loss vector (the mean of its `k` largest entries).
#[pyfunction]
fn topk_relax(values: Vec<f64>, k: usize) -> PyResult<f64> {
    let mut g = Graph::new();
    let v = g.constant(Matrix::column(values));
    let r = losses::topk_relax(&mut g, v, k).map_err(err)?;
    Ok(g.scalar_value(r))
}

/// Normalized weights from raw alignment scores.
#[pyfunction]
fn weights_from_raw(raw: Vec<f64>) -> Vec<f64> {
    WeightVector::from_raw(raw).weights
}

/// Gradient-alignment weights for one batch: `{"weights", "raw"}`, one
/// entry per augmented view.
#[pyfunction]
#[pyo3(signature = (model, images, texts, k, aug_strength = 0.1, seed = 0))]
fn batch_weights<'py>(
    py: Python<'py>,
    model: &DualEncoder,
    images: Vec<Vec<f64>>,
    texts: Vec<Vec<f64>>,
    k: usize,
    aug_strength: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    if images.len() != texts.len() {
        return Err(err("images and texts differ in length"));
    }
    let examples: Vec<TrainExample> = images.into_iter().zip(texts).map(|(image, text)| TrainExample { image, text, label: 0 }).collect();
    let refs: Vec<&TrainExample> = examples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = PairedBatch::from_examples(&refs, aug_strength, &mut rng).map_err(err)?;
    let w = reweight::alignment_weights(&batch, &model.inner, &AlignmentConfig::new(k)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("weights", w.weights)?;
    d.set_item("raw", w.raw)?;
    Ok(d)
}

fn scored(scores: &[f64], preds: &[u8], labels: &[u8], groups: &[String]) -> PyResult<ScoredPredictions> {
    if scores.len() != labels.len() || preds.len() != labels.len() || groups.len() != labels.len() {
        return Err(err("scores, preds, labels and groups must have the same length"));
    }
    let items =
        (0..scores.len()).map(|i| Scored { score: scores[i], pred: preds[i], label: labels[i], group: groups[i].clone() }).collect();
    ScoredPredictions::new(items).map_err(err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(err)
}

/// Equalized-odds difference: max TPR gap plus max FPR gap over groups.
#[pyfunction]
fn eod(preds: Vec<u8>, labels: Vec<u8>, groups: Vec<String>) -> PyResult<f64> {
    let scores = vec![0.0; labels.len()];
    Ok(metrics::eod(&scored(&scores, &preds, &labels, &groups)?).map_err(err)?.value)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, groups, mode = "ratio"))]
fn es_auc(scores: Vec<f64>, labels: Vec<u8>, groups: Vec<String>, mode: &str) -> PyResult<f64> {
    let preds = vec![0; labels.len()];
    metrics::es_auc(&scored(&scores, &preds, &labels, &groups)?, es_mode(mode)?).map_err(err)
}

/// Full fairness report for one attribute, as JSON.
#[pyfunction]
#[pyo3(signature = (attribute, scores, preds, labels, groups, mode = "ratio"))]
fn fairness_report(
    attribute: &str,
    scores: Vec<f64>,
    preds: Vec<u8>,
    labels: Vec<u8>,
    groups: Vec<String>,
    mode: &str,
) -> PyResult<String> {
    let p = scored(&scores, &preds, &labels, &groups)?;
    let r = metrics::fairness_report(attribute, &p, es_mode(mode)?, core_model::SCORE_DEFINITION, HardLabelRule::Argmax).map_err(err)?;
    serde_json::to_string(&r).map_err(err)
}

/// K-means with k-means++ seeding: `(labels, inertia)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<(Vec<usize>, f64)> {
    let fit = kmeans_fit(&matrix(&points)?, &KMeansConfig::new(k, seed)).map_err(err)?;
    Ok((fit.labels, fit.inertia))
}

/// Normalized mutual information between cluster labels and categories.
#[pyfunction]
fn nmi(labels: Vec<usize>, categories: Vec<String>) -> PyResult<f64> {
    Ok(cluster_report("attribute", &labels, &categories).map_err(err)?.nmi)
}

/// Trains an encoder. `config` is TOML text; `overrides` are `key=value`
/// strings. Returns the final model and the per-step total losses.
#[pyfunction]
#[pyo3(signature = (train_data, prompts, config = None, overrides = Vec::new(), val_data = None, text_dim = 64))]
fn train(
    py: Python<'_>,
    train_data: &Dataset,
    prompts: &Prompts,
    config: Option<&str>,
    overrides: Vec<String>,
    val_data: Option<&Dataset>,
    text_dim: usize,
) -> PyResult<(DualEncoder, Vec<f64>)> {
    let mut cfg = match config {
        Some(text) => TrainConfig::from_toml_str(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    for o in &overrides {
        cfg.set(o).map_err(err)?;
    }
    let dim = train_data.inner.text_feature_dim().unwrap_or(text_dim);
    let set = train_data.inner.to_train_set(dim).map_err(err)?;
    let val = val_data.map(|v| v.inner.to_train_set(dim)).transpose().map_err(err)?;
    let p = prompts.inner.clone();
    let out = py.detach(|| trainer::train(&cfg, &set, val.as_ref(), &p)).map_err(err)?;
    Ok((DualEncoder { inner: out.model }, out.log.steps.iter().map(|s| s.total).collect()))
}

/// Zero-shot evaluation: `(predictions_csv, reports_json)`.
#[pyfunction]
#[pyo3(signature = (model, dataset, prompts, attributes, es_auc_mode = "ratio", threshold = None))]
fn evaluate(
    model: &DualEncoder,
    dataset: &Dataset,
    prompts: &Prompts,
    attributes: Vec<String>,
    es_auc_mode: &str,
    threshold: Option<f64>,
) -> PyResult<(String, String)> {
    let e =
        trainer::evaluate(&model.inner, &dataset.inner, &prompts.inner, &attributes, eval_options(es_auc_mode, threshold)?).map_err(err)?;
    let mut csv = Vec::new();
    metrics::write_predictions_csv(&e.predictions, &mut csv).map_err(err)?;
    Ok((String::from_utf8(csv).map_err(err)?, serde_json::to_string(&e.reports).map_err(err)?))
}

#[pymodule(name = "debiasclip")]
mod module {
    #[pymodule_export]
    use super::{
        auc, batch_weights, clip_loss, ctr_loss, eod, es_auc, evaluate, fairness_report, gen_synthetic, hash_featurize, kmeans, nmi,
        topk_relax, train, weights_from_raw, Dataset, DualEncoder, Prompts,
    };
}
