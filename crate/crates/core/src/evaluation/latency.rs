use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{rank_of_target, score_items};
use crate::data::{Example, SequenceDataset, Split};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Scalar;
use crate::reasoning::{reason, reason_uncached, user_representation, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub steps: usize,
    /// Wall-clock seconds for one pass over the test split.
    pub seconds: f64,
    /// Cost increase relative to the step-0 row, in percent.
    pub increase_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub cached: bool,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    /// Extra seconds per reasoning step at `steps`, relative to step 0.
    pub fn marginal_per_step(&self, steps: usize) -> Option<f64> {
        let base = self.rows.iter().find(|r| r.steps == 0)?;
        let row = self.rows.iter().find(|r| r.steps == steps)?;
        (steps > 0).then(|| (row.seconds - base.seconds) / steps as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cached,steps,seconds,increase_pct\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.3}\n", self.cached, r.steps, r.seconds, r.increase_pct));
        }
        out
    }
}

fn pass<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    examples: &[&Example],
    k: usize,
    use_cache: bool,
    strategy: Strategy,
) -> Result<usize> {
    let mut checksum = 0;
    for ex in examples {
        let prefix = &ex.prefix[ex.prefix.len().saturating_sub(cfg.n_max)..];
        let states = if use_cache {
            reason(prefix, k, params, cfg)?
        } else {
            reason_uncached(prefix, k, params, cfg)?
        };
        let h = user_representation(&states.states, strategy);
        checksum += rank_of_target(&score_items(&h, &params.item_emb), ex.target);
    }
    Ok(checksum)
}

/// Times a single-threaded pass over the test split at each step count. One
/// untimed warmup pass runs first. Without the cache every step re-encodes
/// the whole sequence.
pub fn bench_latency<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    ds: &SequenceDataset,
    steps_list: &[usize],
    use_cache: bool,
) -> Result<LatencyReport> {
    let examples: Vec<&Example> = ds.examples_in(Split::Test).collect();
    if examples.is_empty() {
        return Err(Error::arg("test split has no examples"));
    }
    let mut steps: Vec<usize> = steps_list.to_vec();
    if !steps.contains(&0) {
        steps.insert(0, 0);
    }
    let strategy = Strategy::LastStep;
    std::hint::black_box(pass(params, cfg, &examples, 0, use_cache, strategy)?);
    let mut rows = Vec::with_capacity(steps.len());
    for &k in &steps {
        let start = Instant::now();
        std::hint::black_box(pass(params, cfg, &examples, k, use_cache, strategy)?);
        rows.push(LatencyRow {
            steps: k,
            seconds: start.elapsed().as_secs_f64(),
            increase_pct: 0.0,
        });
    }
    let base = rows.iter().find(|r| r.steps == 0).map(|r| r.seconds).unwrap_or(0.0);
    for r in &mut rows {
        r.increase_pct = if base > 0.0 { (r.seconds / base - 1.0) * 100.0 } else { 0.0 };
    }
    Ok(LatencyReport { cached: use_cache, rows })
}
