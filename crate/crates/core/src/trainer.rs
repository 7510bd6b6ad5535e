//! Training loop, run logging, and zero-shot evaluation.
//!
//! `train` only ever sees a [`TrainSet`], which has no attribute fields, so
//! the objective cannot depend on protected attributes. Attributes come back
//! into play in [`evaluate`], which takes a full [`Dataset`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::data::{DataError, Dataset, PairedBatch, TrainExample, TrainSet};
use crate::losses::ClipGranularity;
use crate::metrics::{auc, fairness_report, scored_for_attribute, EsAucMode, HardLabelRule, MetricsError, PredictionRow, ReportSet};
use crate::model::{DualEncoder, EncoderConfig, ModelError, PromptSet, DEFAULT_TAU, SCORE_DEFINITION};
use crate::reweight::{
    alignment_weights, build_objective, AlignmentConfig, AlignmentMode, GradScope, ObjectiveMode, ReweightError, WeightSmoother,
    WeightVector,
};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {value} at step {step}; last good checkpoint kept")]
    NonFinite { step: usize, value: f64 },
    #[error("dataset has {got} examples, fewer than one batch of {batch}")]
    TooFewExamples { got: usize, batch: usize },
    #[error("attribute '{0}' is absent from every record")]
    MissingAttribute(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config write: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Training configuration. Every field has a default, so a config file only
/// lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: ObjectiveMode,
    pub batch_size: usize,
    /// Top-k size for the CLIP anchor loss.
    pub k: usize,
    pub beta: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub aug_strength: f64,
    pub grad_scope: GradScope,
    pub alignment_mode: AlignmentMode,
    pub granularity: ClipGranularity,
    /// EMA factor for the weight vector; unset disables smoothing.
    pub ema_rho: Option<f64>,
    /// Drop the final partial batch of each epoch. Debiased mode always drops it.
    pub drop_last: bool,
    pub embed_dim: usize,
    pub hidden: Option<usize>,
    pub layers: usize,
    pub tau_init: f64,
    /// Parameter initialization seed.
    pub seed: u64,
    /// Seed for the epoch permutations.
    pub shuffle_seed: u64,
    /// Seed for view augmentation.
    pub aug_seed: u64,
    /// Where checkpoints and logs go; unset keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Record every step's weight vector to `weights.csv`.
    pub trace_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: ObjectiveMode::Clip,
            batch_size: 32,
            k: 8,
            beta: 1.0,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            aug_strength: 0.1,
            grad_scope: GradScope::FinalLayer,
            alignment_mode: AlignmentMode::Alignment,
            granularity: ClipGranularity::Example,
            ema_rho: None,
            drop_last: true,
            embed_dim: 16,
            hidden: None,
            layers: 2,
            tau_init: DEFAULT_TAU,
            seed: 0,
            shuffle_seed: 1,
            aug_seed: 2,
            out_dir: None,
            trace_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.mode == ObjectiveMode::Debiased && self.batch_size < 2 {
            return bad("debiased mode needs batch_size >= 2".into());
        }
        let k_max = match self.granularity {
            ClipGranularity::Example => self.batch_size,
            ClipGranularity::View => 2 * self.batch_size,
        };
        if self.k < 1 || self.k > k_max {
            return bad(format!("k must be in [1, {k_max}], got {}", self.k));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return bad("adam parameters out of range".into());
        }
        if !(self.aug_strength >= 0.0 && self.aug_strength.is_finite()) {
            return bad("aug_strength must be non-negative".into());
        }
        if let Some(rho) = self.ema_rho {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("ema_rho must be in [0, 1], got {rho}"));
            }
        }
        if self.embed_dim == 0 || self.layers == 0 {
            return bad("embed_dim and layers must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies a `key=value` override. The value is read as a TOML value,
    /// falling back to a bare string (so `mode=debiased` works unquoted).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) =
            assignment.split_once('=').ok_or_else(|| TrainError::Config(format!("override '{assignment}' is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self)?;
        table.insert(key.to_string(), parsed);
        *self = table.try_into()?;
        Ok(())
    }

    pub fn encoder_config(&self, image_dim: usize, text_dim: usize) -> EncoderConfig {
        EncoderConfig { image_dim, text_dim, embed_dim: self.embed_dim, hidden: self.hidden, layers: self.layers, tau_init: self.tau_init }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig { k: self.k, scope: self.grad_scope.clone(), mode: self.alignment_mode, granularity: self.granularity }
    }

    fn drops_last(&self) -> bool {
        self.drop_last || self.mode == ObjectiveMode::Debiased
    }
}

/// Per-parameter update rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            kind: config.optimizer,
            lr: config.lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter named in `grads`.
    pub fn step(&mut self, model: &mut DualEncoder, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (name, grad) in grads {
            let Some(param) = model.params_mut().get_mut(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
                    let slots = param.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice());
                    for (((p, m), v), &g) in slots.zip(grad.as_slice()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub clip: f64,
    /// `beta * sum_m W_m * ctr_m`; zero in clip mode.
    pub weighted_ctr: f64,
    pub tau: f64,
    pub w_max: f64,
    pub w_entropy: f64,
    pub w_zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTraceRow {
    pub step: usize,
    pub view: usize,
    pub raw: f64,
    pub clamped: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub weight_trace: Vec<WeightTraceRow>,
    pub best_epoch: Option<usize>,
    pub metadata: BTreeMap<String, String>,
}

impl RunLog {
    pub fn write_steps_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.steps, w)
    }

    pub fn write_epochs_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.epochs, w)
    }

    pub fn write_weight_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows(&self.weight_trace, w)
    }
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: DualEncoder,
    /// Parameters at the epoch with the best validation AUC, if validated.
    pub best: Option<DualEncoder>,
    pub log: RunLog,
}

/// Zero-shot AUC on an attribute-free set; `None` when it lacks a class.
pub fn validation_auc(model: &DualEncoder, set: &TrainSet, prompts: &PromptSet) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let scores: Vec<f64> = model.zero_shot_batch(&set.image_matrix(), prompts)?.iter().map(|z| z.score).collect();
    Ok(auc(&scores, &set.labels()).ok())
}

/// One optimization step on `batch`; returns the log row and the weights used.
pub fn train_step(
    model: &mut DualEncoder,
    optimizer: &mut Optimizer,
    batch: &PairedBatch,
    config: &TrainConfig,
    smoother: Option<&mut WeightSmoother>,
    step: usize,
    epoch: usize,
) -> Result<(StepLog, Option<WeightVector>)> {
    let weights = match config.mode {
        ObjectiveMode::Clip => None,
        ObjectiveMode::Debiased => {
            let w = alignment_weights(batch, model, &config.alignment())?;
            Some(match smoother {
                Some(s) => s.apply(&w),
                None => w,
            })
        }
    };
    let mut g = Graph::new();
    let loss = build_objective(&mut g, model, batch, config.mode, config.beta, weights.as_ref())?;
    let total = g.scalar_value(loss.total);
    let clip = g.scalar_value(loss.clip);
    if !total.is_finite() {
        return Err(TrainError::NonFinite { step, value: total });
    }
    g.backward(loss.total)?;
    let grads = g.param_grads();
    optimizer.step(model, &grads);
    let summary = weights.as_ref().map(|w| w.summary()).unwrap_or_default();
    let log = StepLog {
        step,
        epoch,
        total,
        clip,
        weighted_ctr: total - clip,
        tau: model.tau(),
        w_max: summary.max,
        w_entropy: summary.entropy,
        w_zero_fraction: summary.zero_fraction,
    };
    Ok((log, weights))
}

/// Trains a fresh encoder on `train_set`.
///
/// Batches follow a shuffled permutation per epoch; the shuffle and the
/// augmentation draw from separate seeded streams so both modes see the same
/// batches. With `out_dir` set, `last.ckpt` holds the initial parameters
/// until the first epoch ends; after that `last.ckpt` and `epoch_NNN.ckpt`
/// are written after every epoch and `best.ckpt` whenever validation AUC
/// improves. A non-finite loss aborts and leaves `last.ckpt` at the last
/// completed epoch.
pub fn train(config: &TrainConfig, train_set: &TrainSet, val: Option<&TrainSet>, prompts: &PromptSet) -> Result<TrainOutcome> {
    config.validate()?;
    let model = DualEncoder::new(config.encoder_config(train_set.image_dim, train_set.text_dim), config.seed)?;
    train_from(model, config, train_set, val, prompts)
}

/// Like [`train`], starting from an existing encoder.
pub fn train_from(
    mut model: DualEncoder,
    config: &TrainConfig,
    train_set: &TrainSet,
    val: Option<&TrainSet>,
    prompts: &PromptSet,
) -> Result<TrainOutcome> {
    config.validate()?;
    let b = config.batch_size;
    if train_set.len() < b && config.drops_last() {
        return Err(TrainError::TooFewExamples { got: train_set.len(), batch: b });
    }
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
        model.save(dir.join("last.ckpt"))?;
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.aug_seed);
    let mut optimizer = Optimizer::new(config);
    let mut smoother = config.ema_rho.map(WeightSmoother::new);
    let mut log = RunLog { metadata: run_metadata(config), ..RunLog::default() };
    let mut best: Option<(f64, DualEncoder)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(b) {
            if chunk.len() < b && config.drops_last() {
                break;
            }
            let examples: Vec<&TrainExample> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let batch = PairedBatch::from_examples(&examples, config.aug_strength, &mut aug_rng)?;
            let (row, weights) = train_step(&mut model, &mut optimizer, &batch, config, smoother.as_mut(), step, epoch)?;
            if config.trace_weights {
                if let Some(w) = &weights {
                    for view in 0..w.len() {
                        log.weight_trace.push(WeightTraceRow {
                            step,
                            view,
                            raw: w.raw[view],
                            clamped: w.clamped[view],
                            weight: w.weights[view],
                        });
                    }
                }
            }
            epoch_total += row.total;
            epoch_steps += 1;
            log.steps.push(row);
            step += 1;
        }
        let val_auc = match val {
            Some(v) => validation_auc(&model, v, prompts)?,
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            steps: epoch_steps,
            mean_total: if epoch_steps > 0 { epoch_total / epoch_steps as f64 } else { 0.0 },
            val_auc,
        });
        let improved =
            matches!((val_auc, &best), (Some(a), None) if a.is_finite()) || matches!((val_auc, &best), (Some(a), Some((b, _))) if a > *b);
        if improved {
            best = Some((val_auc.expect("checked"), model.clone()));
            log.best_epoch = Some(epoch);
        }
        if let Some(dir) = &config.out_dir {
            model.save(dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            model.save(dir.join("last.ckpt"))?;
            if improved {
                model.save(dir.join("best.ckpt"))?;
            }
            write_logs(&log, dir)?;
        }
    }
    Ok(TrainOutcome { model, best: best.map(|(_, m)| m), log })
}

fn write_logs(log: &RunLog, dir: &Path) -> Result<()> {
    log.write_steps_csv(std::fs::File::create(dir.join("steps.csv"))?)?;
    log.write_epochs_csv(std::fs::File::create(dir.join("epochs.csv"))?)?;
    if !log.weight_trace.is_empty() {
        log.write_weight_trace_csv(std::fs::File::create(dir.join("weights.csv"))?)?;
    }
    std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&log.metadata)? + "\n")?;
    Ok(())
}

fn run_metadata(config: &TrainConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("mode".into(), format!("{:?}", config.mode).to_lowercase());
    m.insert("grad_scope".into(), config.grad_scope.label());
    m.insert("score_definition".into(), SCORE_DEFINITION.into());
    m.insert(
        "hyperparameters".into(),
        "non-canonical: epochs, lr, batch_size, k, beta, optimizer and augmentation are local choices".into(),
    );
    m
}

/// Evaluation options.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub es_auc_mode: EsAucMode,
    pub rule: HardLabelRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<PredictionRow>,
    pub reports: ReportSet,
}

/// Zero-shot predictions for every record, then one report per attribute.
pub fn evaluate(
    model: &DualEncoder,
    dataset: &Dataset,
    prompts: &PromptSet,
    attributes: &[String],
    options: EvalOptions,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(TrainError::Config("empty evaluation dataset".into()));
    }
    for a in attributes {
        if !dataset.records.iter().any(|r| r.attributes.contains_key(a)) {
            return Err(TrainError::MissingAttribute(a.clone()));
        }
    }
    let zs = model.zero_shot_batch(&dataset.image_matrix(), prompts)?;
    let scores: Vec<f64> = zs.iter().map(|z| z.score).collect();
    let classes: Vec<u8> = zs.iter().map(|z| u8::from(z.class_id == prompts.positive_class)).collect();
    let preds = crate::metrics::hard_labels(&scores, &classes, options.rule)?;
    let predictions: Vec<PredictionRow> = dataset
        .records
        .iter()
        .zip(scores.iter().zip(&preds))
        .map(|(r, (&score, &pred))| PredictionRow { id: r.id.clone(), score, pred, label: r.label, attributes: r.attributes.clone() })
        .collect();
    let reports = report_set(&predictions, attributes, options)?;
    Ok(Evaluation { predictions, reports })
}

/// Fairness reports for `attributes` from prediction rows.
pub fn report_set(rows: &[PredictionRow], attributes: &[String], options: EvalOptions) -> Result<ReportSet> {
    let mut reports = Vec::with_capacity(attributes.len());
    for a in attributes {
        let scored = scored_for_attribute(rows, a)?;
        reports.push(fairness_report(a, &scored, options.es_auc_mode, SCORE_DEFINITION, options.rule)?);
    }
    Ok(ReportSet::new(reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_roundtrip_through_toml() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_parse_values_and_bare_strings() {
        let mut cfg = TrainConfig::default();
        cfg.set("mode=debiased").unwrap();
        cfg.set("beta = 0.5").unwrap();
        cfg.set("grad_scope=image-encoder").unwrap();
        cfg.set("ema_rho=0.9").unwrap();
        cfg.set("out_dir=runs/a").unwrap();
        assert_eq!(cfg.mode, ObjectiveMode::Debiased);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.grad_scope, GradScope::ImageEncoder);
        assert_eq!(cfg.ema_rho, Some(0.9));
        assert_eq!(cfg.out_dir, Some(PathBuf::from("runs/a")));
        assert!(cfg.set("no_such_key=1").is_err());
        assert!(cfg.set("novalue").is_err());
    }

    #[test]
    fn validation_rejects_bad_k_and_batch() {
        let mut cfg = TrainConfig { batch_size: 4, k: 5, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.granularity = ClipGranularity::View;
        assert!(cfg.validate().is_ok());
        let cfg = TrainConfig { mode: ObjectiveMode::Debiased, batch_size: 1, k: 1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { k: 0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        let mut model = DualEncoder::identity(2, 0.5).unwrap();
        let before = model.params().clone();
        let mut opt = Optimizer::new(&cfg);
        let name = crate::model::LOG_TAU.to_string();
        opt.step(&mut model, &[(name.clone(), Matrix::scalar(3.0))].into());
        let moved = before.get(&name).unwrap().get(0, 0) - model.params().get(&name).unwrap().get(0, 0);
        assert!((moved - 0.01).abs() < 1e-9);
    }
}
