//! Subgroup fairness metrics: rank AUC, group-wise AUC, ES-AUC, and the
//! equalized-odds distance.
//!
//! Values are fractions internally. Reports also carry the percentage form
//! (`value * 100`, two decimals), which for EOD means percent of its `[0, 2]`
//! range expressed the same way as the AUC columns.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),
    #[error("EOD needs at least two groups with both TPR and FPR defined, found {0}")]
    TooFewGroups(usize),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("predictions CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mann-Whitney AUC from average ranks; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::Invalid("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc(format!("{n_pos} positives and {n_neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// One scored record for fairness evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub score: f64,
    pub pred: u8,
    pub label: u8,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPredictions {
    pub items: Vec<Scored>,
}

impl ScoredPredictions {
    pub fn new(items: Vec<Scored>) -> Result<Self> {
        for s in &items {
            if !s.score.is_finite() {
                return Err(MetricsError::Invalid("non-finite score".into()));
            }
            if s.group.is_empty() {
                return Err(MetricsError::Invalid("empty group name".into()));
            }
            if s.pred > 1 || s.label > 1 {
                return Err(MetricsError::Invalid("predictions and labels must be 0 or 1".into()));
            }
        }
        Ok(Self { items })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.items.iter().map(|s| s.score).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|s| s.label).collect()
    }

    pub fn groups(&self) -> BTreeMap<&str, Vec<&Scored>> {
        let mut out: BTreeMap<&str, Vec<&Scored>> = BTreeMap::new();
        for s in &self.items {
            out.entry(s.group.as_str()).or_default().push(s);
        }
        out
    }
}

/// Per-group AUC; `None` marks a group that lacks one of the classes.
pub fn groupwise_auc(preds: &ScoredPredictions) -> BTreeMap<String, Option<f64>> {
    preds
        .groups()
        .into_iter()
        .map(|(g, items)| {
            let scores: Vec<f64> = items.iter().map(|s| s.score).collect();
            let labels: Vec<u8> = items.iter().map(|s| s.label).collect();
            (g.to_string(), auc(&scores, &labels).ok())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn group_rates(items: &[&Scored]) -> Rates {
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for s in items {
        if s.label == 1 {
            pos += 1;
            tp += usize::from(s.pred == 1);
        } else {
            neg += 1;
            fp += usize::from(s.pred == 1);
        }
    }
    Rates { tpr: (pos > 0).then(|| tp as f64 / pos as f64), fpr: (neg > 0).then(|| fp as f64 / neg as f64) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eod {
    pub value: f64,
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    /// Groups left out of the TPR or FPR comparison because the rate is undefined.
    pub flagged: Vec<String>,
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// `max |TPR_a - TPR_b| + max |FPR_a - FPR_b|` over groups.
pub fn eod(preds: &ScoredPredictions) -> Result<Eod> {
    let rates: Vec<(&str, Rates)> = preds.groups().into_iter().map(|(g, items)| (g, group_rates(&items))).collect();
    let complete = rates.iter().filter(|(_, r)| r.tpr.is_some() && r.fpr.is_some()).count();
    if complete < 2 {
        return Err(MetricsError::TooFewGroups(complete));
    }
    let tpr_gap = spread(rates.iter().filter_map(|(_, r)| r.tpr));
    let fpr_gap = spread(rates.iter().filter_map(|(_, r)| r.fpr));
    let flagged = rates.iter().filter(|(_, r)| r.tpr.is_none() || r.fpr.is_none()).map(|(g, _)| g.to_string()).collect();
    Ok(Eod { value: tpr_gap + fpr_gap, tpr_gap, fpr_gap, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EsAucMode {
    /// `overall / (1 + sum_a |AUC_a - overall|)`.
    #[default]
    Ratio,
    /// `mean_a AUC_a - max_{a,b} |AUC_a - AUC_b|`, floored at 0.
    MeanGap,
}

impl EsAucMode {
    pub fn label(self) -> &'static str {
        match self {
            EsAucMode::Ratio => "ratio",
            EsAucMode::MeanGap => "mean-gap",
        }
    }
}

impl std::str::FromStr for EsAucMode {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(EsAucMode::Ratio),
            "mean-gap" => Ok(EsAucMode::MeanGap),
            other => Err(MetricsError::Invalid(format!("unknown ES-AUC mode '{other}'"))),
        }
    }
}

/// ES-AUC from an overall AUC and the defined group AUCs.
pub fn es_auc_from(overall: f64, group_aucs: &[f64], mode: EsAucMode) -> f64 {
    if group_aucs.is_empty() {
        return overall;
    }
    match mode {
        EsAucMode::Ratio => overall / (1.0 + group_aucs.iter().map(|a| (a - overall).abs()).sum::<f64>()),
        EsAucMode::MeanGap => {
            // Averaging deviations from the overall AUC keeps the zero-disparity
            // case exact in floating point.
            let mean = overall + group_aucs.iter().map(|a| a - overall).sum::<f64>() / group_aucs.len() as f64;
            (mean - spread(group_aucs.iter().copied())).max(0.0)
        }
    }
}

pub fn es_auc(preds: &ScoredPredictions, mode: EsAucMode) -> Result<f64> {
    let overall = auc(&preds.scores(), &preds.labels())?;
    let groups: Vec<f64> = groupwise_auc(preds).into_values().flatten().collect();
    Ok(es_auc_from(overall, &groups, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "t")]
pub enum HardLabelRule {
    /// The zero-shot argmax class.
    #[default]
    Argmax,
    /// `score >= t`.
    Threshold(f64),
}

impl HardLabelRule {
    pub fn label(&self) -> String {
        match self {
            HardLabelRule::Argmax => "argmax".into(),
            HardLabelRule::Threshold(t) => format!("threshold({t})"),
        }
    }
}

/// Hard labels from scores; `argmax_classes` supplies the zero-shot classes
/// used by [`HardLabelRule::Argmax`].
pub fn hard_labels(scores: &[f64], argmax_classes: &[u8], rule: HardLabelRule) -> Result<Vec<u8>> {
    match rule {
        HardLabelRule::Argmax => {
            if argmax_classes.len() != scores.len() {
                return Err(MetricsError::Invalid("argmax classes and scores differ in length".into()));
            }
            Ok(argmax_classes.to_vec())
        }
        HardLabelRule::Threshold(t) => {
            if !(0.0..=1.0).contains(&t) {
                return Err(MetricsError::Threshold(t));
            }
            Ok(scores.iter().map(|&s| u8::from(s >= t)).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `None` when the group lacks a class.
    pub auc: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub score_definition: String,
    pub es_auc_mode: EsAucMode,
    pub threshold_rule: String,
    /// Groups with an undefined AUC, TPR, or FPR.
    #[serde(default)]
    pub flagged_groups: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// The same metrics in percent, rounded to two decimals for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentView {
    pub overall_auc: String,
    pub es_auc: String,
    pub eod: String,
    pub group_auc: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub schema_version: u32,
    pub attribute: String,
    pub n: usize,
    pub overall_auc: f64,
    pub groups: Vec<GroupStats>,
    pub es_auc: f64,
    pub eod: f64,
    pub group_auc_std: f64,
    pub percent: PercentView,
    pub metadata: ReportMetadata,
}

pub fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

impl FairnessReport {
    /// Fills in the percentage view from the fractional fields.
    pub fn refresh_percent(&mut self) {
        self.percent = PercentView {
            overall_auc: pct(self.overall_auc),
            es_auc: pct(self.es_auc),
            eod: pct(self.eod),
            group_auc: self.groups.iter().filter_map(|g| g.auc.map(|a| (g.name.clone(), pct(a)))).collect(),
        };
    }

    pub fn group_auc(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == name).and_then(|g| g.auc)
    }
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn fairness_report(
    attribute: &str,
    preds: &ScoredPredictions,
    mode: EsAucMode,
    score_definition: &str,
    rule: HardLabelRule,
) -> Result<FairnessReport> {
    let overall_auc = auc(&preds.scores(), &preds.labels())?;
    let mut groups = Vec::new();
    for (name, items) in preds.groups() {
        let scores: Vec<f64> = items.iter().map(|s| s.score).collect();
        let labels: Vec<u8> = items.iter().map(|s| s.label).collect();
        let rates = group_rates(&items);
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        groups.push(GroupStats {
            name: name.to_string(),
            n: items.len(),
            n_pos,
            n_neg: items.len() - n_pos,
            auc: auc(&scores, &labels).ok(),
            tpr: rates.tpr,
            fpr: rates.fpr,
        });
    }
    let defined: Vec<f64> = groups.iter().filter_map(|g| g.auc).collect();
    let es = es_auc_from(overall_auc, &defined, mode);
    let eod = eod(preds)?;
    let mut flagged: Vec<String> = groups.iter().filter(|g| g.auc.is_none()).map(|g| g.name.clone()).collect();
    flagged.extend(eod.flagged.iter().cloned());
    flagged.sort();
    flagged.dedup();
    let mut report = FairnessReport {
        schema_version: SCHEMA_VERSION,
        attribute: attribute.to_string(),
        n: preds.items.len(),
        overall_auc,
        groups,
        es_auc: es,
        eod: eod.value,
        group_auc_std: population_std(&defined),
        percent: PercentView { overall_auc: String::new(), es_auc: String::new(), eod: String::new(), group_auc: BTreeMap::new() },
        metadata: ReportMetadata {
            score_definition: score_definition.to_string(),
            es_auc_mode: mode,
            threshold_rule: rule.label(),
            flagged_groups: flagged,
            notes: Vec::new(),
        },
    };
    report.refresh_percent();
    Ok(report)
}

/// A set of per-attribute reports, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub schema_version: u32,
    pub reports: Vec<FairnessReport>,
}

impl ReportSet {
    pub fn new(reports: Vec<FairnessReport>) -> Self {
        Self { schema_version: SCHEMA_VERSION, reports }
    }

    pub fn get(&self, attribute: &str) -> Option<&FairnessReport> {
        self.reports.iter().find(|r| r.attribute == attribute)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Flat rows for radar plots: attribute, metric, group, fraction, percent.
    pub fn write_radar_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["schema_version", "attribute", "metric", "group", "value", "percent"])?;
        let v = SCHEMA_VERSION.to_string();
        for r in &self.reports {
            for (metric, value) in
                [("overall_auc", r.overall_auc), ("es_auc", r.es_auc), ("eod", r.eod), ("group_auc_std", r.group_auc_std)]
            {
                out.write_record([v.as_str(), &r.attribute, metric, "", &value.to_string(), &pct(value)])?;
            }
            for g in &r.groups {
                if let Some(a) = g.auc {
                    out.write_record([v.as_str(), &r.attribute, "group_auc", &g.name, &a.to_string(), &pct(a)])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub score: f64,
    pub pred: u8,
    pub label: u8,
    pub attributes: BTreeMap<String, String>,
}

/// Writes `id,score,pred,label,<attribute columns...>`; attribute columns
/// are the sorted union of names, empty where a record lacks one.
pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], w: W) -> Result<()> {
    let mut names: Vec<&String> = rows.iter().flat_map(|r| r.attributes.keys()).collect();
    names.sort();
    names.dedup();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["id", "score", "pred", "label"];
    header.extend(names.iter().map(|s| s.as_str()));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.score.to_string(), r.pred.to_string(), r.label.to_string()];
        rec.extend(names.iter().map(|n| r.attributes.get(*n).cloned().unwrap_or_default()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(r: R) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "score", "pred", "label"];
    if headers.len() < 4 || headers.iter().take(4).ne(expected) {
        return Err(MetricsError::Invalid("header must start with id,score,pred,label".into()));
    }
    let attr_names: Vec<String> = headers.iter().skip(4).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let parse_err = |what: &str| MetricsError::Invalid(format!("line {line}: bad {what}"));
        let score: f64 = rec[1].trim().parse().map_err(|_| parse_err("score"))?;
        let pred: u8 = rec[2].trim().parse().map_err(|_| parse_err("pred"))?;
        let label: u8 = rec[3].trim().parse().map_err(|_| parse_err("label"))?;
        if pred > 1 || label > 1 {
            return Err(parse_err("pred/label (must be 0 or 1)"));
        }
        let attributes = attr_names
            .iter()
            .enumerate()
            .filter_map(|(j, n)| rec.get(4 + j).filter(|v| !v.is_empty()).map(|v| (n.clone(), v.to_string())))
            .collect();
        rows.push(PredictionRow { id: rec[0].to_string(), score, pred, label, attributes });
    }
    Ok(rows)
}

/// Restricts prediction rows to those carrying `attribute`.
pub fn scored_for_attribute(rows: &[PredictionRow], attribute: &str) -> Result<ScoredPredictions> {
    let items: Vec<Scored> = rows
        .iter()
        .filter_map(|r| r.attributes.get(attribute).map(|g| Scored { score: r.score, pred: r.pred, label: r.label, group: g.clone() }))
        .collect();
    if items.is_empty() {
        return Err(MetricsError::Invalid(format!("attribute '{attribute}' is absent from every record")));
    }
    ScoredPredictions::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    fn scored(score: f64, pred: u8, label: u8, group: &str) -> Scored {
        Scored { score, pred, label, group: group.into() }
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::UndefinedAuc(_))));
    }

    #[test]
    fn auc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..30).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let mut labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        assert!((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.2, 0.9];
        let labels = [0, 1, 0, 1, 1, 0];
        let t: Vec<f64> = scores.iter().map(|s: &f64| (3.0 * s).exp()).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), auc(&t, &labels).unwrap());
    }

    #[test]
    fn groupwise_single_group_equals_overall() {
        let p =
            ScoredPredictions::new(vec![scored(0.9, 1, 1, "a"), scored(0.2, 0, 0, "a"), scored(0.6, 1, 0, "a"), scored(0.5, 0, 1, "a")])
                .unwrap();
        let g = groupwise_auc(&p);
        assert_eq!(g.len(), 1);
        assert_eq!(g["a"], Some(auc(&p.scores(), &p.labels()).unwrap()));
    }

    #[test]
    fn groupwise_flags_single_class_groups() {
        let p = ScoredPredictions::new(vec![scored(0.9, 1, 1, "a"), scored(0.1, 0, 0, "a"), scored(0.5, 1, 1, "b")]).unwrap();
        let g = groupwise_auc(&p);
        assert_eq!(g["a"], Some(1.0));
        assert_eq!(g["b"], None);
    }

    fn group_with_rates(name: &str, tp: usize, pos: usize, fp: usize, neg: usize) -> Vec<Scored> {
        let mut v = Vec::new();
        for i in 0..pos {
            v.push(scored(0.5, u8::from(i < tp), 1, name));
        }
        for i in 0..neg {
            v.push(scored(0.5, u8::from(i < fp), 0, name));
        }
        v
    }

    #[test]
    fn eod_hand_example() {
        let mut items = group_with_rates("A", 8, 10, 2, 10);
        items.extend(group_with_rates("B", 6, 10, 3, 10));
        let e = eod(&ScoredPredictions::new(items).unwrap()).unwrap();
        assert!((e.value - 0.3).abs() < 1e-12);
        assert_eq!(pct(e.value), "30.00");
    }

    #[test]
    fn eod_zero_for_identical_groups_and_errors() {
        let mut items = group_with_rates("A", 3, 4, 1, 4);
        items.extend(group_with_rates("B", 3, 4, 1, 4));
        assert_eq!(eod(&ScoredPredictions::new(items).unwrap()).unwrap().value, 0.0);
        let only = ScoredPredictions::new(group_with_rates("A", 3, 4, 1, 4)).unwrap();
        assert!(matches!(eod(&only), Err(MetricsError::TooFewGroups(1))));
    }

    #[test]
    fn eod_flags_groups_without_negatives() {
        let mut items = group_with_rates("A", 8, 10, 2, 10);
        items.extend(group_with_rates("B", 6, 10, 3, 10));
        items.extend(group_with_rates("C", 1, 10, 0, 0));
        let e = eod(&ScoredPredictions::new(items).unwrap()).unwrap();
        assert_eq!(e.flagged, vec!["C"]);
        assert!((e.tpr_gap - 0.7).abs() < 1e-12);
        assert!((e.fpr_gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn es_auc_fixed_points_and_ratio_example() {
        for mode in [EsAucMode::Ratio, EsAucMode::MeanGap] {
            assert_eq!(es_auc_from(0.7, &[0.7, 0.7, 0.7], mode), 0.7);
            assert_eq!(es_auc_from(0.7, &[0.7], mode), 0.7);
        }
        assert!((es_auc_from(0.7, &[0.7, 0.6], EsAucMode::Ratio) - 0.7 / 1.1).abs() < 1e-12);
        assert!((es_auc_from(0.7, &[0.7, 0.6], EsAucMode::MeanGap) - 0.55).abs() < 1e-12);
        assert_eq!(es_auc_from(0.5, &[0.9, 0.1], EsAucMode::MeanGap), 0.0);
    }

    #[test]
    fn hard_label_rules() {
        assert_eq!(hard_labels(&[0.5, 0.49], &[0, 0], HardLabelRule::Threshold(0.5)).unwrap(), vec![1, 0]);
        assert_eq!(hard_labels(&[0.5, 0.49], &[0, 1], HardLabelRule::Argmax).unwrap(), vec![0, 1]);
        assert!(matches!(hard_labels(&[0.5], &[0], HardLabelRule::Threshold(1.5)), Err(MetricsError::Threshold(_))));
    }

    #[test]
    fn zero_threshold_zeroes_eod() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let preds = hard_labels(&scores, &[], HardLabelRule::Threshold(0.0)).unwrap();
        let items = (0..40).map(|i| scored(scores[i], preds[i], labels[i], if i % 3 == 0 { "a" } else { "b" })).collect();
        let p = ScoredPredictions::new(items).unwrap();
        for s in p.groups().values() {
            let r = group_rates(s);
            assert_eq!((r.tpr, r.fpr), (Some(1.0), Some(1.0)));
        }
        assert_eq!(eod(&p).unwrap().value, 0.0);
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let rows = vec![
            PredictionRow {
                id: "a".into(),
                score: 0.25,
                pred: 0,
                label: 1,
                attributes: [("race".to_string(), "Black".to_string())].into(),
            },
            PredictionRow { id: "b,c".into(), score: 1.0 / 3.0, pred: 1, label: 0, attributes: BTreeMap::new() },
        ];
        let mut buf = Vec::new();
        write_predictions_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("id,score,pred,label,race\n"));
        assert_eq!(read_predictions_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_predictions_csv("x,y\n1,2\n".as_bytes()).is_err());
    }
}
