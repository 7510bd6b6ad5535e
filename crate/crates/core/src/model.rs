//! Dual encoder with a learnable temperature and the zero-shot classifier.
//!
//! Both towers are MLPs (`tanh` between layers) followed by row-wise L2
//! normalization, so `u . v` between embeddings is their cosine similarity.
//! The temperature is stored as `log_tau` and always recovered via `exp`.
//!
//! Parameter names: `image.l{i}.weight` (`in x out`), `image.l{i}.bias`
//! (`1 x out`), the same under `text.`, and `log_tau` (`1 x 1`).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore};
use crate::tensor::{dot, norm, Matrix};

pub const DEFAULT_TAU: f64 = 0.07;
pub const LOG_TAU: &str = "log_tau";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{tower} encoder expects input dimension {expected}, got {got}")]
    InputDim { tower: &'static str, expected: usize, got: usize },
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("invalid prompt set: {0}")]
    Prompts(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tower {
    Image,
    Text,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Image => "image",
            Tower::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Image feature dimension.
    pub image_dim: usize,
    /// Text feature dimension.
    pub text_dim: usize,
    /// Shared embedding dimension.
    pub embed_dim: usize,
    /// Hidden width; `None` means `2 * embed_dim`.
    pub hidden: Option<usize>,
    /// Number of linear layers per tower (1 = a single projection).
    pub layers: usize,
    pub tau_init: f64,
}

impl EncoderConfig {
    pub fn new(image_dim: usize, text_dim: usize, embed_dim: usize) -> Self {
        Self { image_dim, text_dim, embed_dim, hidden: None, layers: 2, tau_init: DEFAULT_TAU }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * self.embed_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 || self.embed_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.layers == 0 || self.hidden_width() == 0 {
            return Err(ModelError::Config("need at least one layer of positive width".into()));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(ModelError::Config("tau_init must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self, tower: Tower) -> Vec<(usize, usize)> {
        let input = match tower {
            Tower::Image => self.image_dim,
            Tower::Text => self.text_dim,
        };
        let mut dims = Vec::with_capacity(self.layers);
        let mut cur = input;
        for l in 0..self.layers {
            let out = if l + 1 == self.layers { self.embed_dim } else { self.hidden_width() };
            dims.push((cur, out));
            cur = out;
        }
        dims
    }
}

pub fn weight_name(tower: Tower, layer: usize) -> String {
    format!("{}.l{layer}.weight", tower.prefix())
}

pub fn bias_name(tower: Tower, layer: usize) -> String {
    format!("{}.l{layer}.bias", tower.prefix())
}

/// Image and text towers plus temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    params: ParamStore,
    seed: u64,
}

impl DualEncoder {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for tower in [Tower::Image, Tower::Text] {
            for (l, (fan_in, fan_out)) in config.layer_dims(tower).into_iter().enumerate() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                params.insert(weight_name(tower, l), Matrix::from_vec(fan_in, fan_out, w));
                params.insert(bias_name(tower, l), Matrix::zeros(1, fan_out));
            }
        }
        params.insert(LOG_TAU, Matrix::scalar(config.tau_init.ln()));
        Ok(Self { config, params, seed })
    }

    /// Single-layer towers with identity weights; requires `p = q = d`.
    pub fn identity(dim: usize, tau: f64) -> Result<Self> {
        let config = EncoderConfig { image_dim: dim, text_dim: dim, embed_dim: dim, hidden: None, layers: 1, tau_init: tau };
        config.validate()?;
        let mut params = ParamStore::new();
        for tower in [Tower::Image, Tower::Text] {
            params.insert(weight_name(tower, 0), Matrix::identity(dim));
            params.insert(bias_name(tower, 0), Matrix::zeros(1, dim));
        }
        params.insert(LOG_TAU, Matrix::scalar(tau.ln()));
        Ok(Self { config, params, seed: 0 })
    }

    pub fn from_parts(config: EncoderConfig, params: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        for tower in [Tower::Image, Tower::Text] {
            for (l, (i, o)) in config.layer_dims(tower).into_iter().enumerate() {
                for (name, shape) in [(weight_name(tower, l), (i, o)), (bias_name(tower, l), (1, o))] {
                    match params.get(&name) {
                        Some(m) if m.shape() == shape => {}
                        Some(m) => return Err(ModelError::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", m.shape()))),
                        None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
                    }
                }
            }
        }
        if !params.get(LOG_TAU).is_some_and(Matrix::is_scalar) {
            return Err(ModelError::Checkpoint("missing scalar log_tau".into()));
        }
        Ok(Self { config, params, seed })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tau(&self) -> f64 {
        self.params.get(LOG_TAU).map_or(DEFAULT_TAU, |m| m.as_slice()[0].exp())
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// Names of one tower's parameters.
    pub fn tower_params(&self, tower: Tower) -> Vec<String> {
        (0..self.config.layers).flat_map(|l| [bias_name(tower, l), weight_name(tower, l)]).collect()
    }

    /// Encodes a `B x p` (or `B x q`) input node into `B x d` unit rows.
    pub fn encode(&self, g: &mut Graph, tower: Tower, input: NodeId) -> Result<NodeId> {
        let expected = match tower {
            Tower::Image => self.config.image_dim,
            Tower::Text => self.config.text_dim,
        };
        let got = g.shape(input).1;
        if got != expected {
            return Err(ModelError::InputDim { tower: tower.prefix(), expected, got });
        }
        let mut h = input;
        for l in 0..self.config.layers {
            let w = g.param(&self.params, &weight_name(tower, l))?;
            let b = g.param(&self.params, &bias_name(tower, l))?;
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if l + 1 < self.config.layers {
                h = g.tanh(h);
            }
        }
        Ok(g.l2_normalize_rows(h))
    }

    pub fn encode_image(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.encode(g, Tower::Image, x)
    }

    pub fn encode_text(&self, g: &mut Graph, t: NodeId) -> Result<NodeId> {
        self.encode(g, Tower::Text, t)
    }

    /// Temperature as a graph node, `exp(log_tau)`.
    pub fn tau_node(&self, g: &mut Graph) -> Result<NodeId> {
        let log_tau = g.param(&self.params, LOG_TAU)?;
        Ok(g.exp(log_tau))
    }

    /// Inference-only embedding of a batch of rows.
    pub fn embed(&self, tower: Tower, rows: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(rows.clone());
        let z = self.encode(&mut g, tower, x)?;
        Ok(g.value(z).clone())
    }

    /// Zero-shot prediction for one image feature vector.
    pub fn zero_shot_predict(&self, image: &[f64], prompts: &PromptSet) -> Result<ZeroShot> {
        let x = Matrix::from_vec(1, image.len(), image.to_vec());
        let z = self.embed(Tower::Image, &x)?;
        let t = self.embed(Tower::Text, &prompts.features_matrix())?;
        zero_shot_from_embeddings(z.row(0), &t.to_rows(), prompts, self.tau())
    }

    /// Zero-shot predictions for a batch; prompt embeddings are computed once.
    pub fn zero_shot_batch(&self, images: &Matrix, prompts: &PromptSet) -> Result<Vec<ZeroShot>> {
        let z = self.embed(Tower::Image, images)?;
        let t = self.embed(Tower::Text, &prompts.features_matrix())?.to_rows();
        let tau = self.tau();
        (0..z.rows()).map(|r| zero_shot_from_embeddings(z.row(r), &t, prompts, tau)).collect()
    }

    /// Digest of the encoder architecture, stored in checkpoints.
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }

    /// Writes the checkpoint container (layout documented in the README):
    ///
    /// ```text
    /// magic  b"DBCLIPCK"          8 bytes
    /// version u32 LE              (= 1)
    /// config_hash u64 LE
    /// seed u64 LE
    /// config_len u32 LE, config JSON bytes (UTF-8)
    /// n_params u32 LE
    /// per parameter, in name order:
    ///   name_len u32 LE, name bytes (UTF-8)
    ///   rows u64 LE, cols u64 LE
    ///   rows*cols f64 LE values, row-major
    /// ```
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, m) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hash = read_u64(r)?;
        let seed = read_u64(r)?;
        let cfg_len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: EncoderConfig = serde_json::from_slice(&cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if config_hash(&config) != hash {
            return Err(ModelError::Checkpoint("config hash mismatch".into()));
        }
        let n = read_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(name, Matrix::from_vec(rows, cols, data));
        }
        Self::from_parts(config, params, seed)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DBCLIPCK";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn config_hash(config: &EncoderConfig) -> u64 {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Class prompts in text-feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
    /// Class whose cosine counts as "positive" in the binary score.
    #[serde(default = "default_positive")]
    pub positive_class: usize,
}

fn default_positive() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub features: Vec<f64>,
}

pub const NEGATIVE_PROMPT: &str = "This image does not contain glaucoma";
pub const POSITIVE_PROMPT: &str = "This image contains glaucoma";

impl PromptSet {
    pub fn new(prompts: Vec<Prompt>, positive_class: usize) -> Result<Self> {
        let set = Self { prompts, positive_class };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() < 2 {
            return Err(ModelError::Prompts("need at least two prompts".into()));
        }
        let mut ids: Vec<_> = self.prompts.iter().map(|p| p.class_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::Prompts("duplicate class id".into()));
        }
        let dim = self.prompts[0].features.len();
        if self.prompts.iter().any(|p| p.features.len() != dim) {
            return Err(ModelError::Prompts("prompt feature dimensions differ".into()));
        }
        Ok(())
    }

    /// The two glaucoma prompts, featurized by hashing.
    pub fn glaucoma_default(text_dim: usize) -> Self {
        let mk =
            |class_id, text: &str| Prompt { class_id, text: Some(text.to_string()), features: crate::data::hash_featurize(text, text_dim) };
        Self { prompts: vec![mk(0, NEGATIVE_PROMPT), mk(1, POSITIVE_PROMPT)], positive_class: 1 }
    }

    pub fn from_features(features: Vec<Vec<f64>>) -> Result<Self> {
        let prompts = features.into_iter().enumerate().map(|(class_id, features)| Prompt { class_id, text: None, features }).collect();
        Self::new(prompts, 1)
    }

    pub fn features_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.prompts.iter().map(|p| p.features.as_slice()).collect::<Vec<_>>()).expect("validated prompt dimensions")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: Self = serde_json::from_str(&text).map_err(|e| ModelError::Prompts(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ModelError::Prompts(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Outcome of zero-shot classification for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub class_id: usize,
    /// Cosine with each prompt, in prompt order.
    pub cosines: Vec<f64>,
    /// `sigmoid((cos_pos - cos_neg) / tau)` for two-prompt sets, otherwise
    /// the softmax probability of the positive class at temperature `tau`.
    pub score: f64,
}

/// Argmax of cosine similarity; ties go to the lowest class id.
pub fn zero_shot_from_embeddings(image: &[f64], prompt_embeddings: &[Vec<f64>], prompts: &PromptSet, tau: f64) -> Result<ZeroShot> {
    let zn = norm(image);
    if zn == 0.0 || !zn.is_finite() {
        return Err(ModelError::DegenerateEmbedding);
    }
    let mut cosines = Vec::with_capacity(prompt_embeddings.len());
    for t in prompt_embeddings {
        let tn = norm(t);
        if tn == 0.0 || !tn.is_finite() {
            return Err(ModelError::DegenerateEmbedding);
        }
        cosines.push((dot(image, t) / (zn * tn)).clamp(-1.0, 1.0));
    }
    let mut best = 0;
    for j in 1..cosines.len() {
        let (cj, cb) = (cosines[j], cosines[best]);
        if cj > cb || (cj == cb && prompts.prompts[j].class_id < prompts.prompts[best].class_id) {
            best = j;
        }
    }
    let pos = prompts
        .prompts
        .iter()
        .position(|p| p.class_id == prompts.positive_class)
        .ok_or_else(|| ModelError::Prompts(format!("positive class {} not in prompt set", prompts.positive_class)))?;
    let score = if cosines.len() == 2 {
        let neg = 1 - pos;
        sigmoid((cosines[pos] - cosines[neg]) / tau)
    } else {
        let m = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cosines.iter().map(|c| ((c - m) / tau).exp()).sum();
        ((cosines[pos] - m) / tau).exp() / z
    };
    Ok(ZeroShot { class_id: prompts.prompts[best].class_id, cosines, score })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Metadata string describing how continuous scores are produced.
pub const SCORE_DEFINITION: &str = "sigmoid((cos_pos - cos_neg) / tau)";
