use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::compute_metrics;
use crate::data::Split;

/// Metric names in report order.
pub const METRICS: [&str; 4] = ["NDCG@10", "NDCG@20", "Recall@10", "Recall@20"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    Fixed(usize),
    Oracle,
}

impl std::fmt::Display for StepLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepLabel::Fixed(k) => write!(f, "{k}"),
            StepLabel::Oracle => f.write_str("oracle"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub split: Split,
    pub step: StepLabel,
    /// `None` for the overall row.
    pub group: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricCell>,
}

fn means(ranks: impl Iterator<Item = usize>) -> ([f64; 4], usize) {
    let mut sums = [0.0; 4];
    let mut n = 0;
    for r in ranks {
        let (n10, r10) = compute_metrics(r, 10);
        let (n20, r20) = compute_metrics(r, 20);
        for (s, v) in sums.iter_mut().zip([n10, n20, r10, r20]) {
            *s += v;
        }
        n += 1;
    }
    if n > 0 {
        sums.iter_mut().for_each(|s| *s /= n as f64);
    }
    (sums, n)
}

impl MetricsReport {
    pub(crate) fn add_rows(
        &mut self,
        split: Split,
        step: StepLabel,
        ranks: &[usize],
        group_of: &[Option<usize>],
        groups: Option<usize>,
    ) {
        let (vals, n) = means(ranks.iter().copied());
        self.push_metrics(split, step, None, vals, n);
        for g in 0..groups.unwrap_or(0) {
            let members = ranks.iter().zip(group_of).filter(|(_, &go)| go == Some(g)).map(|(&r, _)| r);
            let (vals, n) = means(members);
            if n > 0 {
                self.push_metrics(split, step, Some(g), vals, n);
            }
        }
    }

    fn push_metrics(&mut self, split: Split, step: StepLabel, group: Option<usize>, vals: [f64; 4], count: usize) {
        for (name, value) in METRICS.iter().zip(vals) {
            self.cells.push(MetricCell {
                split,
                step,
                group,
                metric: name.to_string(),
                value,
                count,
            });
        }
    }

    pub fn cell(&self, split: Split, step: StepLabel, group: Option<usize>, metric: &str) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.split == split && c.step == step && c.group == group && c.metric == metric)
    }

    pub fn value(&self, split: Split, step: StepLabel, group: Option<usize>, metric: &str) -> Option<f64> {
        self.cell(split, step, group, metric).map(|c| c.value)
    }

    /// Appends all cells of `other`.
    pub fn extend(&mut self, other: MetricsReport) {
        self.cells.extend(other.cells);
    }

    /// `split,step,group,metric,value,count`, with `all` for the overall group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,step,group,metric,value,count\n");
        for c in &self.cells {
            let group = c.group.map_or_else(|| "all".to_string(), |g| g.to_string());
            let _ = writeln!(out, "{},{},{},{},{:.6},{}", c.split, c.step, group, c.metric, c.value, c.count);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
