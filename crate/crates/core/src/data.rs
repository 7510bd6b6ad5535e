//! Records, synthetic data with planted subgroups, augmentation, and I/O.
//!
//! Two record types exist on purpose. [`Record`] carries protected
//! attributes and is what evaluation code sees. [`TrainExample`] has no
//! attribute field at all; the training loop only accepts a [`TrainSet`],
//! so attributes cannot reach any training objective:
//!
//! ```compile_fail
//! use debiasclip::data::TrainExample;
//! fn peek(e: &TrainExample) -> usize {
//!     e.attributes.len()
//! }
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::two_view_pairing;
use crate::model::{Prompt, PromptSet};
use crate::tensor::{norm, Matrix};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {what} has dimension {got}, expected {expected}")]
    MixedDims { line: usize, what: &'static str, expected: usize, got: usize },
    #[error("invalid group proportions: {0}")]
    Proportions(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Text {
    Note(String),
    Features(Vec<f64>),
}

/// One example as stored on disk, attributes included.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub image_features: Vec<f64>,
    pub text: Text,
    pub label: u8,
    pub attributes: BTreeMap<String, String>,
}

impl Record {
    /// Text features, hashing raw notes into `text_dim` buckets.
    pub fn text_features(&self, text_dim: usize) -> Vec<f64> {
        match &self.text {
            Text::Features(v) => v.clone(),
            Text::Note(s) => hash_featurize(s, text_dim),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: String,
    image_features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_features: Option<Vec<f64>>,
    label: u8,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.image_features.len())
    }

    /// Dimension of precomputed text features, if the dataset has any.
    pub fn text_feature_dim(&self) -> Option<usize> {
        self.records.iter().find_map(|r| match &r.text {
            Text::Features(v) => Some(v.len()),
            Text::Note(_) => None,
        })
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Attribute names present on any record, sorted.
    pub fn attribute_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.records.iter().flat_map(|r| r.attributes.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Drops ids and attributes. Raw notes are hashed to `text_dim` buckets;
    /// precomputed features must already have that dimension.
    pub fn to_train_set(&self, text_dim: usize) -> Result<TrainSet> {
        let image_dim = self.image_dim().unwrap_or(0);
        let mut examples = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let text = r.text_features(text_dim);
            if text.len() != text_dim {
                return Err(DataError::MixedDims { line: i + 1, what: "text_features", expected: text_dim, got: text.len() });
            }
            examples.push(TrainExample { image: r.image_features.clone(), text, label: r.label });
        }
        Ok(TrainSet { examples, image_dim, text_dim })
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }

    pub fn image_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.records.iter().map(|r| r.image_features.as_slice()).collect::<Vec<_>>()).expect("uniform image dims")
    }
}

/// An attribute-free training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub label: u8,
}

/// The only data type the trainer accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub examples: Vec<TrainExample>,
    pub image_dim: usize,
    pub text_dim: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn image_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.examples.iter().map(|e| e.image.as_slice()).collect::<Vec<_>>()).expect("uniform image dims")
    }
}

/// `B` examples with their two augmented views.
///
/// Views are stacked as `[first views; second views]`, so view `i` and view
/// `i + B` are positives for each other.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    /// `B x p` un-augmented image features.
    pub images: Matrix,
    /// `2B x p` augmented views.
    pub views: Matrix,
    /// `B x q` text features.
    pub texts: Matrix,
    pub labels: Vec<u8>,
    pub pairing: Vec<usize>,
}

impl PairedBatch {
    pub fn from_examples<R: Rng + ?Sized>(examples: &[&TrainExample], strength: f64, rng: &mut R) -> Result<Self> {
        if examples.is_empty() {
            return Err(DataError::Invalid("empty batch".into()));
        }
        let b = examples.len();
        let mut first = Vec::with_capacity(b);
        let mut second = Vec::with_capacity(b);
        for e in examples {
            let (v1, v2) = augment(&e.image, strength, rng)?;
            first.push(v1);
            second.push(v2);
        }
        first.extend(second);
        let images = Matrix::from_rows(&examples.iter().map(|e| e.image.as_slice()).collect::<Vec<_>>())
            .ok_or_else(|| DataError::Invalid("ragged image features".into()))?;
        let texts = Matrix::from_rows(&examples.iter().map(|e| e.text.as_slice()).collect::<Vec<_>>())
            .ok_or_else(|| DataError::Invalid("ragged text features".into()))?;
        let views = Matrix::from_rows(&first).expect("views share the image dimension");
        Ok(Self { images, views, texts, labels: examples.iter().map(|e| e.label).collect(), pairing: two_view_pairing(b) })
    }

    pub fn batch_size(&self) -> usize {
        self.images.rows()
    }

    pub fn num_views(&self) -> usize {
        self.views.rows()
    }
}

/// Two independent noisy views of `x`: Gaussian noise with standard deviation
/// `strength`, then each coordinate zeroed with probability
/// `0.1 * min(strength, 1)`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], strength: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(DataError::Invalid(format!("augmentation strength must be >= 0, got {strength}")));
    }
    if strength == 0.0 {
        return Ok((x.to_vec(), x.to_vec()));
    }
    let mask_p = 0.1 * strength.min(1.0);
    let view = |rng: &mut R| -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(rng);
                let noisy = v + strength * z;
                if rng.random::<f64>() < mask_p {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    };
    let a = view(rng);
    let b = view(rng);
    Ok((a, b))
}

/// Signed hashing bag-of-words, L2-normalized. Tokens are lowercased and
/// split on whitespace; each token's SHA-256 digest picks a bucket (first 8
/// bytes, little-endian, mod `dim`) and a sign (low bit of byte 8).
pub fn hash_featurize(note: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for token in note.to_lowercase().split_whitespace() {
        let digest = Sha256::digest(token.as_bytes());
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest")) % dim as u64;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    }
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// One latent subgroup of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub proportion: f64,
    /// Norm of the group's image-space mean.
    #[serde(default = "default_shift")]
    pub mean_shift: f64,
    /// Scale of the class direction added to positive images.
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Norm of the group's text-space offset; defaults to `mean_shift / 2`.
    #[serde(default)]
    pub text_shift: Option<f64>,
}

fn default_shift() -> f64 {
    1.0
}
fn default_signal() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.5
}

impl GroupSpec {
    pub fn new(proportion: f64, mean_shift: f64, signal: f64, noise: f64) -> Self {
        Self { name: None, proportion, mean_shift, signal, noise, text_shift: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub groups: Vec<GroupSpec>,
    /// Fraction of positive labels within each group.
    #[serde(default = "default_balance")]
    pub class_balance: f64,
    pub seed: u64,
}

fn default_balance() -> f64 {
    0.5
}

impl SyntheticSpec {
    /// A 90/10 majority/minority split where the minority's class signal is
    /// half the majority's.
    pub fn minority_bias(n: usize, image_dim: usize, text_dim: usize, seed: u64) -> Self {
        let mut major = GroupSpec::new(0.9, 1.0, 1.0, 0.5);
        major.name = Some("majority".into());
        let mut minor = GroupSpec::new(0.1, 1.0, 0.5, 0.5);
        minor.name = Some("minority".into());
        Self { n, image_dim, text_dim, groups: vec![major, minor], class_balance: 0.5, seed }
    }
}

/// Largest-remainder apportionment of `n` over `weights` (which sum to 1).
/// Remainder ties go to the lower index.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates a labeled dataset whose records carry their true group under the
/// attribute `"group"`, plus noise-free class prompts for zero-shot use.
///
/// Image features: `group_mean + y * strength * class_dir + noise`.
/// Text features: `(2y - 1) * text_dir + group_offset + noise`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, PromptSet)> {
    if spec.n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    if spec.image_dim == 0 || spec.text_dim == 0 {
        return Err(DataError::Invalid("feature dimensions must be positive".into()));
    }
    if spec.groups.is_empty() {
        return Err(DataError::Proportions("no groups".into()));
    }
    let total: f64 = spec.groups.iter().map(|g| g.proportion).sum();
    if spec.groups.iter().any(|g| g.proportion.is_nan() || g.proportion < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Proportions(format!("must be non-negative and sum to 1, got sum {total}")));
    }
    if !(0.0..=1.0).contains(&spec.class_balance) {
        return Err(DataError::Invalid("class_balance must lie in [0, 1]".into()));
    }
    if spec.groups.iter().any(|g| g.noise.is_nan() || g.noise < 0.0) {
        return Err(DataError::Invalid("noise scales must be non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_dir = random_unit(&mut rng, spec.image_dim);
    let text_dir = random_unit(&mut rng, spec.text_dim);
    let group_means: Vec<(Vec<f64>, Vec<f64>)> = spec
        .groups
        .iter()
        .map(|g| {
            let img: Vec<f64> = random_unit(&mut rng, spec.image_dim).into_iter().map(|x| x * g.mean_shift).collect();
            let shift = g.text_shift.unwrap_or(g.mean_shift / 2.0);
            let txt: Vec<f64> = random_unit(&mut rng, spec.text_dim).into_iter().map(|x| x * shift).collect();
            (img, txt)
        })
        .collect();

    let proportions: Vec<f64> = spec.groups.iter().map(|g| g.proportion).collect();
    let counts = largest_remainder(spec.n, &proportions);
    let mut records = Vec::with_capacity(spec.n);
    for (gi, (g, &count)) in spec.groups.iter().zip(&counts).enumerate() {
        let name = g.name.clone().unwrap_or_else(|| format!("g{gi}"));
        let positives = (spec.class_balance * count as f64).round() as usize;
        let noise = Normal::new(0.0, g.noise).map_err(|e| DataError::Invalid(e.to_string()))?;
        let (img_mean, txt_mean) = &group_means[gi];
        for j in 0..count {
            let y: u8 = u8::from(j < positives);
            let yf = f64::from(y);
            let image = (0..spec.image_dim).map(|d| img_mean[d] + yf * g.signal * class_dir[d] + noise.sample(&mut rng)).collect();
            let sign = 2.0 * yf - 1.0;
            let text = (0..spec.text_dim).map(|d| sign * text_dir[d] + txt_mean[d] + noise.sample(&mut rng)).collect();
            let mut attributes = BTreeMap::new();
            attributes.insert("group".to_string(), name.clone());
            records.push(Record { id: String::new(), image_features: image, text: Text::Features(text), label: y, attributes });
        }
    }
    records.shuffle(&mut rng);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = format!("r{i:06}");
    }
    let neg: Vec<f64> = text_dir.iter().map(|x| -x).collect();
    let prompts = PromptSet {
        prompts: vec![
            Prompt { class_id: 0, text: Some(crate::model::NEGATIVE_PROMPT.into()), features: neg },
            Prompt { class_id: 1, text: Some(crate::model::POSITIVE_PROMPT.into()), features: text_dir },
        ],
        positive_class: 1,
    };
    Ok((Dataset::new(records), prompts))
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut image_dim = None;
    let mut text_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordJson = serde_json::from_str(&line).map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        if raw.label > 1 {
            return Err(DataError::Parse { line: line_no, msg: format!("label must be 0 or 1, got {}", raw.label) });
        }
        let expected = *image_dim.get_or_insert(raw.image_features.len());
        if raw.image_features.len() != expected {
            return Err(DataError::MixedDims { line: line_no, what: "image_features", expected, got: raw.image_features.len() });
        }
        let text = match (raw.text, raw.text_features) {
            (Some(_), Some(_)) => return Err(DataError::Parse { line: line_no, msg: "both text and text_features given".into() }),
            (None, None) => return Err(DataError::Parse { line: line_no, msg: "missing text or text_features".into() }),
            (Some(s), None) => Text::Note(s),
            (None, Some(v)) => {
                let expected = *text_dim.get_or_insert(v.len());
                if v.len() != expected {
                    return Err(DataError::MixedDims { line: line_no, what: "text_features", expected, got: v.len() });
                }
                Text::Features(v)
            }
        };
        records.push(Record { id: raw.id, image_features: raw.image_features, text, label: raw.label, attributes: raw.attributes });
    }
    Ok(Dataset::new(records))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    for r in &dataset.records {
        let (text, text_features) = match &r.text {
            Text::Note(s) => (Some(s.clone()), None),
            Text::Features(v) => (None, Some(v.clone())),
        };
        let raw = RecordJson {
            id: r.id.clone(),
            image_features: r.image_features.clone(),
            text,
            text_features,
            label: r.label,
            attributes: r.attributes.clone(),
        };
        serde_json::to_writer(&mut w, &raw).map_err(|e| DataError::Invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Seeded, label-stratified partition of `0..labels.len()` into three parts.
///
/// Part sizes follow largest-remainder apportionment of `fractions`. Within
/// each label the indices are shuffled, then the classes are interleaved
/// evenly before the ordered sequence is cut into parts, so every part's
/// label mix tracks the overall one.
pub fn split_indices(labels: &[u8], fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) {
        return Err(DataError::Fractions("fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(format!("fractions sum to {total}, expected 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(labels.len());
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        keyed.extend(idx.into_iter().enumerate().map(|(r, i)| ((r as f64 + 0.5) / n, class, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let sizes = largest_remainder(labels.len(), &fractions);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut it = keyed.into_iter().map(|(_, _, i)| i);
    for (part, &size) in parts.iter_mut().zip(&sizes) {
        part.extend(it.by_ref().take(size));
    }
    Ok(parts)
}

pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(&dataset.labels(), fractions, seed)?;
    Ok((dataset.select(&a), dataset.select(&b), dataset.select(&c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_exact_counts() {
        assert_eq!(largest_remainder(1000, &[0.9, 0.1]), vec![900, 100]);
        assert_eq!(largest_remainder(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
        assert_eq!(largest_remainder(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
    }

    #[test]
    fn generator_allocates_groups_exactly() {
        let mut spec = SyntheticSpec::minority_bias(1000, 8, 8, 3);
        spec.groups[0].name = None;
        spec.groups[1].name = None;
        let (ds, _) = gen_synthetic(&spec).unwrap();
        let g0 = ds.records.iter().filter(|r| r.attributes["group"] == "g0").count();
        assert_eq!((g0, ds.len() - g0), (900, 100));
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticSpec::minority_bias(50, 4, 3, 9);
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec };
        assert_ne!(gen_synthetic(&other).unwrap().0, gen_synthetic(&SyntheticSpec { seed: 9, ..other.clone() }).unwrap().0);
    }

    #[test]
    fn zero_noise_collapses_group_label_cells() {
        let spec = SyntheticSpec {
            n: 40,
            image_dim: 3,
            text_dim: 3,
            groups: vec![GroupSpec::new(0.5, 1.0, 1.0, 0.0), GroupSpec::new(0.5, 2.0, 0.5, 0.0)],
            class_balance: 0.5,
            seed: 1,
        };
        let (ds, _) = gen_synthetic(&spec).unwrap();
        let mut cells: BTreeMap<(String, u8), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &ds.records {
            let key = (r.attributes["group"].clone(), r.label);
            let text = r.text_features(3);
            let entry = cells.entry(key).or_insert_with(|| (r.image_features.clone(), text.clone()));
            assert_eq!(entry.0, r.image_features);
            assert_eq!(entry.1, text);
        }
        assert_eq!(cells.len(), 4);
    }

    #[test]
    fn invalid_proportions_rejected() {
        let mut spec = SyntheticSpec::minority_bias(10, 2, 2, 0);
        spec.groups[0].proportion = 0.8;
        assert!(matches!(gen_synthetic(&spec), Err(DataError::Proportions(_))));
        spec.groups[0].proportion = 1.1;
        spec.groups[1].proportion = -0.1;
        assert!(matches!(gen_synthetic(&spec), Err(DataError::Proportions(_))));
    }

    #[test]
    fn augment_zero_strength_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![0.5, -1.0, 2.0];
        assert_eq!(augment(&x, 0.0, &mut rng).unwrap(), (x.clone(), x));
    }

    #[test]
    fn augment_is_deterministic_per_stream() {
        let x = vec![0.5, -1.0, 2.0, 0.1];
        let a = augment(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
        assert!(augment(&x, -0.1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn augment_noise_scale_monte_carlo() {
        // Zero input: masked coordinates contribute zeros, keeping the
        // empirical std within sqrt(0.95) of the noise scale.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = vec![0.0; 64];
        let mut per_coord = vec![(0.0f64, 0usize); 64];
        for _ in 0..1000 {
            let (a, b) = augment(&x, 0.5, &mut rng).unwrap();
            for (d, (u, v)) in a.iter().zip(&b).enumerate() {
                per_coord[d].0 += u * u + v * v;
                per_coord[d].1 += 2;
            }
        }
        for (ss, n) in per_coord {
            let std = (ss / n as f64).sqrt();
            assert!((std - 0.5).abs() < 0.05, "std {std}");
        }
    }

    #[test]
    fn paired_batch_layout() {
        let ex: Vec<TrainExample> =
            (0..3).map(|i| TrainExample { image: vec![i as f64, 1.0], text: vec![1.0], label: (i % 2) as u8 }).collect();
        let refs: Vec<&TrainExample> = ex.iter().collect();
        let b = PairedBatch::from_examples(&refs, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.views.shape(), (6, 2));
        assert_eq!(b.pairing, vec![3, 4, 5, 0, 1, 2]);
        assert_eq!(b.views.row(4), b.images.row(1));
        crate::losses::validate_pairing(&b.pairing, 6).unwrap();
    }

    #[test]
    fn hash_featurize_basics() {
        assert_eq!(hash_featurize("", 8), vec![0.0; 8]);
        let a = hash_featurize("glaucoma glaucoma", 16);
        let b = hash_featurize("Glaucoma", 16);
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!((norm(&hash_featurize("cup to disc ratio 0.7", 16)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let spec = SyntheticSpec::minority_bias(6, 3, 2, 1);
        let (mut ds, _) = gen_synthetic(&spec).unwrap();
        ds.records[0].text = Text::Note("optic nerve cupping".into());
        let mut buf = Vec::new();
        write_jsonl(&ds, &mut buf).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds);

        let bad = "{\"id\":\"a\",\"image_features\":[1.0],\"text\":\"x\",\"label\":0}\nnot json\n";
        match read_jsonl(bad.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let mixed = "{\"id\":\"a\",\"image_features\":[1.0],\"text\":\"x\",\"label\":0}\n{\"id\":\"b\",\"image_features\":[1.0,2.0],\"text\":\"y\",\"label\":1}\n";
        assert!(matches!(read_jsonl(mixed.as_bytes()), Err(DataError::MixedDims { line: 2, .. })));
        let bad_label = "{\"id\":\"a\",\"image_features\":[1.0],\"text\":\"x\",\"label\":2}\n";
        assert!(read_jsonl(bad_label.as_bytes()).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let labels = vec![0, 1, 0, 1, 1, 0, 0, 1, 0, 1];
        let [a, b, c] = split_indices(&labels, [0.7, 0.1, 0.2], 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(&labels, [0.7, 0.1, 0.2], 4).unwrap(), [a, b, c]);
        assert!(split_indices(&labels, [0.7, 0.1, 0.1], 4).is_err());
    }

    #[test]
    fn split_is_label_stratified() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let labels: Vec<u8> = (0..1000).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let overall = labels.iter().map(|&l| f64::from(l)).sum::<f64>() / 1000.0;
        let parts = split_indices(&labels, [0.7, 0.1, 0.2], 1).unwrap();
        for part in [&parts[0], &parts[2]] {
            let rate = part.iter().map(|&i| f64::from(labels[i])).sum::<f64>() / part.len() as f64;
            assert!((rate - overall).abs() < 0.02, "rate {rate} vs {overall}");
        }
    }
}
