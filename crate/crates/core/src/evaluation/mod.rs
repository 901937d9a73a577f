//! Full-catalog ranking metrics and reasoning diagnostics.

mod latency;
mod report;

use rayon::prelude::*;

pub use latency::{bench_latency, LatencyReport, LatencyRow};
pub use report::{MetricCell, MetricsReport, StepLabel, METRICS};

use crate::data::{Example, GroupAssignment, SequenceDataset, Split};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};
use crate::reasoning::{reason, user_representation, Strategy};

/// Dot-product score of every item.
pub fn score_items<T: Scalar>(h: &[T], item_emb: &Tensor<T>) -> Vec<T> {
    (0..item_emb.rows())
        .map(|i| h.iter().zip(item_emb.row_slice(i)).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

/// Items by descending score, ties broken by ascending index.
pub fn rank_items<T: Scalar>(h: &[T], item_emb: &Tensor<T>) -> Vec<usize> {
    let scores = score_items(h, item_emb);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// 1-based position of `target` in the order [`rank_items`] produces.
pub fn rank_of_target<T: Scalar>(scores: &[T], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < target))
        .count()
}

/// Single-target `(ndcg@k, recall@k)` for a 1-based rank.
pub fn compute_metrics(rank: usize, k: usize) -> (f64, f64) {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        (1.0 / ((rank + 1) as f64).log2(), 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Produces target ranks at reasoning steps `0..=k_max` for one example.
pub trait StepScorer: Sync {
    fn step_ranks(&self, ex: &Example, k_max: usize) -> Result<Vec<usize>>;
}

/// Scores with a trained model.
pub struct ModelScorer<'a, T> {
    pub params: &'a ModelParams<T>,
    pub cfg: &'a EncoderConfig,
    pub strategy: Strategy,
    /// Push items already in the prefix below every other item.
    pub exclude_history: bool,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(params: &'a ModelParams<T>, cfg: &'a EncoderConfig, strategy: Strategy) -> Self {
        Self {
            params,
            cfg,
            strategy,
            exclude_history: false,
        }
    }

    fn prefix<'e>(&self, ex: &'e Example) -> &'e [usize] {
        &ex.prefix[ex.prefix.len().saturating_sub(self.cfg.n_max)..]
    }

    fn rank_with(&self, h: &[T], ex: &Example) -> usize {
        let mut scores = score_items(h, &self.params.item_emb);
        if self.exclude_history {
            for &i in &ex.prefix {
                if i != ex.target {
                    scores[i] = T::neg_infinity();
                }
            }
        }
        rank_of_target(&scores, ex.target)
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn step_ranks(&self, ex: &Example, k_max: usize) -> Result<Vec<usize>> {
        let states = reason(self.prefix(ex), k_max, self.params, self.cfg)?;
        Ok((0..=k_max)
            .map(|k| self.rank_with(&user_representation(states.truncated(k), self.strategy), ex))
            .collect())
    }
}

/// Ranks items by training-window popularity, independent of the user.
pub struct PopularityScorer {
    scores: Vec<f64>,
}

impl PopularityScorer {
    pub fn new(ds: &SequenceDataset) -> Self {
        Self {
            scores: ds.train_item_counts().into_iter().map(|c| c as f64).collect(),
        }
    }
}

impl StepScorer for PopularityScorer {
    fn step_ranks(&self, ex: &Example, k_max: usize) -> Result<Vec<usize>> {
        Ok(vec![rank_of_target(&self.scores, ex.target); k_max + 1])
    }
}

fn split_examples(ds: &SequenceDataset, split: Split) -> Result<Vec<&Example>> {
    let examples: Vec<&Example> = ds.examples_in(split).collect();
    if examples.is_empty() {
        return Err(Error::arg(format!("{split} split has no examples")));
    }
    Ok(examples)
}

/// Ranks at steps `0..=k_max` for every example, in example order.
fn all_ranks(scorer: &dyn StepScorer, examples: &[&Example], k_max: usize) -> Result<Vec<Vec<usize>>> {
    examples.par_iter().map(|ex| scorer.step_ranks(ex, k_max)).collect()
}

/// Metrics at each step in `steps`, overall and per group when `groups` is given.
pub fn evaluate_steps(
    scorer: &dyn StepScorer,
    ds: &SequenceDataset,
    split: Split,
    steps: &[usize],
    groups: Option<&GroupAssignment>,
) -> Result<MetricsReport> {
    if steps.is_empty() {
        return Err(Error::arg("no reasoning steps requested"));
    }
    let examples = split_examples(ds, split)?;
    let group_of = example_groups(&examples, groups)?;
    let k_max = *steps.iter().max().unwrap();
    let ranks = all_ranks(scorer, &examples, k_max)?;
    let mut report = MetricsReport::default();
    for &k in steps {
        let per_example: Vec<usize> = ranks.iter().map(|r| r[k]).collect();
        report.add_rows(split, StepLabel::Fixed(k), &per_example, &group_of, groups.map(|g| g.groups));
    }
    Ok(report)
}

fn example_groups(examples: &[&Example], groups: Option<&GroupAssignment>) -> Result<Vec<Option<usize>>> {
    examples
        .iter()
        .map(|ex| match groups {
            None => Ok(None),
            Some(g) => g
                .group_of_example(ex)
                .map(Some)
                .ok_or_else(|| Error::Data(format!("no group for example of user {} target {}", ex.user, ex.target))),
        })
        .collect()
}

/// Metrics of a model on one split at a single reasoning depth.
pub fn evaluate_split<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    ds: &SequenceDataset,
    split: Split,
    k_steps: usize,
    strategy: Strategy,
) -> Result<MetricsReport> {
    evaluate_steps(&ModelScorer::new(params, cfg, strategy), ds, split, &[k_steps], None)
}

/// Per-group metrics at each reasoning depth, plus the overall rows.
pub fn subgroup_report(
    scorer: &dyn StepScorer,
    ds: &SequenceDataset,
    split: Split,
    groups: &GroupAssignment,
    steps: &[usize],
) -> Result<MetricsReport> {
    evaluate_steps(scorer, ds, split, steps, Some(groups))
}

/// Fixed-step rows for `0..=k_max` plus an oracle row that keeps, per
/// example, the step with the best target rank (ties to the smaller step).
pub fn posthoc_oracle(scorer: &dyn StepScorer, ds: &SequenceDataset, split: Split, k_max: usize) -> Result<MetricsReport> {
    let examples = split_examples(ds, split)?;
    let ranks = all_ranks(scorer, &examples, k_max)?;
    let none = vec![None; examples.len()];
    let mut report = MetricsReport::default();
    for k in 0..=k_max {
        let per_example: Vec<usize> = ranks.iter().map(|r| r[k]).collect();
        report.add_rows(split, StepLabel::Fixed(k), &per_example, &none, None);
    }
    let best: Vec<usize> = ranks.iter().map(|r| *r.iter().min().unwrap()).collect();
    report.add_rows(split, StepLabel::Oracle, &best, &none, None);
    Ok(report)
}

/// Target rank after each of `0..=k` reasoning steps, scoring each state on its own.
pub fn rank_trajectory<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    prefix: &[usize],
    target: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if target >= params.num_items() {
        return Err(Error::Index {
            index: target,
            catalog: params.num_items(),
        });
    }
    let states = reason(prefix, k, params, cfg)?;
    Ok(states
        .states
        .iter()
        .map(|s| rank_of_target(&score_items(s, &params.item_emb), target))
        .collect())
}

/// Pairwise cosine similarity between reasoning states; `None` where a
/// state is the zero vector.
pub fn state_similarity<T: Scalar>(states: &[Vec<T>]) -> Vec<Vec<Option<f64>>> {
    let norms: Vec<f64> = states
        .iter()
        .map(|s| s.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    states
        .iter()
        .enumerate()
        .map(|(i, a)| {
            states
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        return None;
                    }
                    if i == j {
                        return Some(1.0);
                    }
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                    Some(dot / (norms[i] * norms[j]))
                })
                .collect()
        })
        .collect()
}

/// Mean of the defined off-diagonal entries, if any.
pub fn mean_offdiagonal(matrix: &[Vec<Option<f64>>]) -> Option<f64> {
    let vals: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |&(j, _)| j != i).filter_map(|(_, v)| *v))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Relative improvement of `ours` over `base`, averaged arithmetically over
/// the four standard metrics at the given split and step.
pub fn average_improvement(base: &MetricsReport, ours: &MetricsReport, split: Split, step: StepLabel) -> Option<f64> {
    let mut total = 0.0;
    for m in METRICS {
        let b = base.value(split, step, None, m)?;
        let o = ours.value(split, step, None, m)?;
        if b == 0.0 {
            return None;
        }
        total += (o - b) / b;
    }
    Some(total / METRICS.len() as f64)
}
