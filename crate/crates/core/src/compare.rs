//! Side-by-side comparison of two report sets (run A vs run B).

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{pct, ReportSet, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("attribute mismatch: only in A {only_a:?}, only in B {only_b:?}")]
    AttributeMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

/// One metric for both runs. `delta` is `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
    pub a_percent: Option<String>,
    pub b_percent: Option<String>,
    pub winner: Option<Winner>,
}

impl MetricPair {
    fn new(a: Option<f64>, b: Option<f64>, lower_is_better: Option<bool>) -> Self {
        let delta = a.zip(b).map(|(a, b)| b - a);
        let winner = match (a.zip(b), lower_is_better) {
            (Some((a, b)), Some(lower)) if a != b => Some(if (a < b) == lower { Winner::A } else { Winner::B }),
            _ => None,
        };
        Self { a, b, delta, a_percent: a.map(pct), b_percent: b.map(pct), winner }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPair {
    pub group: String,
    pub auc: MetricPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeComparison {
    pub attribute: String,
    /// Lower is better.
    pub eod: MetricPair,
    /// Higher is better.
    pub es_auc: MetricPair,
    pub overall_auc: MetricPair,
    pub groups: Vec<GroupPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub schema_version: u32,
    pub attributes: Vec<AttributeComparison>,
}

pub fn compare(a: &ReportSet, b: &ReportSet) -> Result<CompareSummary, CompareError> {
    let names_a: BTreeSet<&str> = a.reports.iter().map(|r| r.attribute.as_str()).collect();
    let names_b: BTreeSet<&str> = b.reports.iter().map(|r| r.attribute.as_str()).collect();
    if names_a != names_b {
        return Err(CompareError::AttributeMismatch {
            only_a: names_a.difference(&names_b).map(|s| s.to_string()).collect(),
            only_b: names_b.difference(&names_a).map(|s| s.to_string()).collect(),
        });
    }
    let mut attributes = Vec::new();
    for ra in &a.reports {
        let rb = b.get(&ra.attribute).expect("attribute sets match");
        let group_names: BTreeSet<&str> = ra.groups.iter().chain(&rb.groups).map(|g| g.name.as_str()).collect();
        let groups = group_names
            .into_iter()
            .map(|g| GroupPair { group: g.to_string(), auc: MetricPair::new(ra.group_auc(g), rb.group_auc(g), None) })
            .collect();
        attributes.push(AttributeComparison {
            attribute: ra.attribute.clone(),
            eod: MetricPair::new(Some(ra.eod), Some(rb.eod), Some(true)),
            es_auc: MetricPair::new(Some(ra.es_auc), Some(rb.es_auc), Some(false)),
            overall_auc: MetricPair::new(Some(ra.overall_auc), Some(rb.overall_auc), None),
            groups,
        });
    }
    Ok(CompareSummary { schema_version: SCHEMA_VERSION, attributes })
}

impl CompareSummary {
    pub fn get(&self, attribute: &str) -> Option<&AttributeComparison> {
        self.attributes.iter().find(|c| c.attribute == attribute)
    }

    /// Flat rows: attribute, metric, group, a, b, delta (percent), winner.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CompareError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["schema_version", "attribute", "metric", "group", "a", "b", "delta", "winner"])?;
        let v = SCHEMA_VERSION.to_string();
        let fmt = |x: Option<f64>| x.map(pct).unwrap_or_default();
        let win = |w: Option<Winner>| match w {
            Some(Winner::A) => "A",
            Some(Winner::B) => "B",
            None => "",
        };
        for c in &self.attributes {
            let mut rows: Vec<(&str, &str, &MetricPair)> =
                vec![("eod", "", &c.eod), ("es_auc", "", &c.es_auc), ("overall_auc", "", &c.overall_auc)];
            rows.extend(c.groups.iter().map(|g| ("group_auc", g.group.as_str(), &g.auc)));
            for (metric, group, m) in rows {
                out.write_record([&v, &c.attribute, metric, group, &fmt(m.a), &fmt(m.b), &fmt(m.delta), win(m.winner)])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// A plain-text table, one block per attribute, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let cell = |x: &Option<String>| x.clone().unwrap_or_else(|| "-".into());
        for c in &self.attributes {
            s.push_str(&format!("{}\n", c.attribute));
            s.push_str(&format!("  {:<16}{:>10}{:>10}{:>10}\n", "metric", "A", "B", "B-A"));
            let mut line = |name: String, m: &MetricPair| {
                let mark = match m.winner {
                    Some(Winner::A) => "  <A",
                    Some(Winner::B) => "  <B",
                    None => "",
                };
                s.push_str(&format!(
                    "  {:<16}{:>10}{:>10}{:>10}{}\n",
                    name,
                    cell(&m.a_percent),
                    cell(&m.b_percent),
                    m.delta.map(pct).unwrap_or_else(|| "-".into()),
                    mark
                ));
            };
            line("EOD".into(), &c.eod);
            line("ES-AUC".into(), &c.es_auc);
            line("AUC".into(), &c.overall_auc);
            for g in &c.groups {
                line(format!("AUC[{}]", g.group), &g.auc);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{EsAucMode, FairnessReport, GroupStats, PercentView, ReportMetadata};
    use std::collections::BTreeMap;

    pub(crate) fn report(attribute: &str, eod: f64, es: f64, groups: &[(&str, f64)]) -> FairnessReport {
        let mut r = FairnessReport {
            schema_version: SCHEMA_VERSION,
            attribute: attribute.into(),
            n: 0,
            overall_auc: 0.7,
            groups: groups
                .iter()
                .map(|(n, a)| GroupStats { name: n.to_string(), n: 0, n_pos: 0, n_neg: 0, auc: Some(*a), tpr: None, fpr: None })
                .collect(),
            es_auc: es,
            eod,
            group_auc_std: 0.0,
            percent: PercentView { overall_auc: String::new(), es_auc: String::new(), eod: String::new(), group_auc: BTreeMap::new() },
            metadata: ReportMetadata {
                score_definition: String::new(),
                es_auc_mode: EsAucMode::Ratio,
                threshold_rule: "argmax".into(),
                flagged_groups: vec![],
                notes: vec![],
            },
        };
        r.refresh_percent();
        r
    }

    #[test]
    fn self_comparison_has_no_winners() {
        let s = ReportSet::new(vec![report("race", 0.2, 0.6, &[("a", 0.7), ("b", 0.65)])]);
        let c = compare(&s, &s).unwrap();
        let a = &c.attributes[0];
        assert_eq!(a.eod.delta, Some(0.0));
        assert_eq!(a.es_auc.winner, None);
        assert!(a.groups.iter().all(|g| g.auc.delta == Some(0.0)));
    }

    #[test]
    fn winners_follow_metric_direction() {
        let a = ReportSet::new(vec![report("race", 0.24, 0.6164, &[])]);
        let b = ReportSet::new(vec![report("race", 0.3636, 0.6440, &[])]);
        let c = compare(&a, &b).unwrap();
        assert_eq!(c.attributes[0].eod.winner, Some(Winner::A));
        assert_eq!(c.attributes[0].es_auc.winner, Some(Winner::B));
        assert_eq!(c.attributes[0].eod.a_percent.as_deref(), Some("24.00"));
        assert_eq!(c.attributes[0].eod.b_percent.as_deref(), Some("36.36"));
    }

    #[test]
    fn mismatch_lists_difference() {
        let a = ReportSet::new(vec![report("race", 0.2, 0.6, &[])]);
        let b = ReportSet::new(vec![report("gender", 0.2, 0.6, &[])]);
        let err = compare(&a, &b).unwrap_err().to_string();
        assert!(err.contains("race") && err.contains("gender"), "{err}");
    }
}
