//! Rank-tier analysis: how expert ranks line up with automated metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use msdm_annotation::export::ExportRow;
use msdm_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const TIERS: [u8; 4] = [1, 2, 3, 4];

/// A metric column and the sign its correlation with the rank tier should have.
/// Tier 1 is the best rank, so lower-is-better metrics should correlate positively.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fbd,
    FidMean,
    Fidelity,
    Agreement,
    Diversity,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Fbd, Metric::FidMean, Metric::Fidelity, Metric::Agreement, Metric::Diversity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fbd => "fbd",
            Metric::FidMean => "fid_mean",
            Metric::Fidelity => "fidelity",
            Metric::Agreement => "agreement",
            Metric::Diversity => "diversity",
        }
    }

    pub fn value(self, r: &MetricReport) -> f64 {
        match self {
            Metric::Fbd => r.fbd,
            Metric::FidMean => r.fid_mean,
            Metric::Fidelity => r.fidelity,
            Metric::Agreement => r.agreement,
            Metric::Diversity => r.diversity,
        }
    }

    /// +1 when a worse tier should come with a larger value.
    pub fn expected_sign(self) -> i8 {
        match self {
            Metric::Fbd | Metric::FidMean => 1,
            Metric::Fidelity | Metric::Agreement | Metric::Diversity => -1,
        }
    }
}

/// Average ranks (1-based), ties sharing the mean of the positions they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks. A constant input gives 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(HarnessError::Contract(format!("{} x values for {} y values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(HarnessError::Contract("spearman needs at least two points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: Metric,
    pub points: usize,
    /// Mean metric value among rows ranked 1, 2, 3 and 4 (`None` when a tier is empty).
    pub tier_means: [Option<f64>; 4],
    pub spearman: f64,
    pub expected_sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<MetricCorrelation>,
    pub warnings: Vec<String>,
}

/// Pair every exported rank with its model's metric value and correlate per metric.
/// Rows whose model has no report are skipped with a warning; a `"real"` entry in
/// `reports` brings the real-image rows in.
pub fn correlate_ranks(rows: &[ExportRow], reports: &BTreeMap<String, MetricReport>, expected_tasks: usize) -> Result<CorrelationTable> {
    let mut warnings = Vec::new();
    let mut tasks: Vec<&str> = rows.iter().map(|r| r.task_id.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.len() < expected_tasks {
        warnings.push(format!("partial result: {} of {expected_tasks} tasks rated", tasks.len()));
    }
    let mut missing: BTreeMap<&str, usize> = BTreeMap::new();
    let mut used = Vec::new();
    for r in rows {
        match reports.get(&r.model_id) {
            Some(rep) => used.push((r.rank, rep)),
            None => *missing.entry(r.model_id.as_str()).or_default() += 1,
        }
    }
    for (m, n) in missing {
        warnings.push(format!("partial result: {n} rows for {m} have no metric report"));
    }
    if used.len() < 2 {
        return Err(HarnessError::Contract(format!("only {} rank/metric pairs to correlate", used.len())));
    }
    let tiers: Vec<f64> = used.iter().map(|(t, _)| f64::from(*t)).collect();
    let mut out = Vec::new();
    for metric in Metric::ALL {
        let vals: Vec<f64> = used.iter().map(|(_, rep)| metric.value(rep)).collect();
        let mut tier_means = [None; 4];
        for (slot, tier) in tier_means.iter_mut().zip(TIERS) {
            let v: Vec<f64> = used.iter().zip(&vals).filter(|((t, _), _)| *t == tier).map(|(_, v)| *v).collect();
            if !v.is_empty() {
                *slot = Some(v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        out.push(MetricCorrelation {
            metric,
            points: vals.len(),
            tier_means,
            spearman: spearman(&tiers, &vals)?,
            expected_sign: metric.expected_sign(),
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CorrelationTable { rows: out, warnings })
}

impl CorrelationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,points,tier1_mean,tier2_mean,tier3_mean,tier4_mean,spearman,expected_sign\n");
        for r in &self.rows {
            let means: Vec<String> = r.tier_means.iter().map(|m| m.map(|v| format!("{v:.6}")).unwrap_or_default()).collect();
            writeln!(s, "{},{},{},{:.6},{:+}", r.metric.name(), r.points, means.join(","), r.spearman, r.expected_sign)
                .expect("string write");
        }
        s
    }
}
