//! Adam training loop with validation early stopping.

mod checkpoint;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{Example, SequenceDataset, Split};
use crate::encoder::tape::{Dropout, ParamVars};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_steps, ModelScorer, StepLabel};
use crate::numeric::{Graph, Scalar, Tensor};
use crate::objectives::batch::batch_loss;
use crate::objectives::ObjectiveConfig;

/// Initial parameters: Normal(0, 0.02) embeddings and projections, identity
/// layer norms, zero biases.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            learning_rate: 0.001,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; `grads` follows [`ModelParams::named`] order.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) {
        let mut tensors = params.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gf = g.as_f64();
                let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                *p = T::of(p.as_f64() - update);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Example-weighted mean training loss.
    pub train_loss: f64,
    /// Validation metric used for early stopping.
    pub valid_metric: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl FitOutcome {
    pub fn best_metric(&self) -> f64 {
        self.history[self.best_epoch - 1].valid_metric
    }
}

/// Validation score consulted after every epoch; higher is better.
pub trait Validator {
    fn score(&mut self, params: &ModelParams<f32>, ecfg: &EncoderConfig, tcfg: &TrainConfig) -> Result<f64>;
}

/// NDCG@10 on the validation split at the training reasoning depth.
pub struct NdcgValidator<'a> {
    pub ds: &'a SequenceDataset,
}

impl Validator for NdcgValidator<'_> {
    fn score(&mut self, params: &ModelParams<f32>, ecfg: &EncoderConfig, tcfg: &TrainConfig) -> Result<f64> {
        let k = tcfg.objective.k;
        let scorer = ModelScorer::new(params, ecfg, tcfg.objective.objective.inference_strategy());
        let report = evaluate_steps(&scorer, self.ds, Split::Valid, &[k], None)?;
        Ok(report
            .value(Split::Valid, StepLabel::Fixed(k), None, "NDCG@10")
            .expect("report has the requested cell"))
    }
}

/// Trains on the train split and early-stops on validation NDCG@10.
pub fn fit(ds: &SequenceDataset, tcfg: &TrainConfig, ecfg: &EncoderConfig) -> Result<FitOutcome> {
    if ds.examples_in(Split::Valid).next().is_none() {
        return Err(Error::arg("validation split has no examples"));
    }
    fit_with(ds, tcfg, ecfg, &mut NdcgValidator { ds })
}

/// [`fit`] with a custom validation score.
pub fn fit_with(
    ds: &SequenceDataset,
    tcfg: &TrainConfig,
    ecfg: &EncoderConfig,
    validator: &mut dyn Validator,
) -> Result<FitOutcome> {
    tcfg.validate()?;
    ecfg.validate()?;
    if ecfg.num_items != ds.num_items() {
        return Err(Error::Config(format!(
            "encoder has {} items but the dataset has {}",
            ecfg.num_items,
            ds.num_items()
        )));
    }
    let train: Vec<&Example> = ds.examples_in(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::arg("training split has no examples"));
    }

    let mut params = init_params(ecfg, tcfg.seed)?;
    let mut adam = Adam::new(tcfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    noise_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    dropout_rng.set_stream(3);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0, params.clone());
    let mut stale = 0;

    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let prefixes: Vec<&[usize]> = chunk
                .iter()
                .map(|&i| {
                    let p = &train[i].prefix;
                    &p[p.len().saturating_sub(ecfg.n_max)..]
                })
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].target).collect();
            let mut g = Graph::<f32>::new();
            let pv = ParamVars::register(&mut g, &params);
            let dropout = (ecfg.dropout > 0.0).then(|| Dropout {
                p: ecfg.dropout,
                rng: &mut dropout_rng,
            });
            let loss = batch_loss(&mut g, &pv, ecfg, &tcfg.objective, &prefixes, &targets, &mut noise_rng, dropout)?;
            let value = g.scalar(loss.total).as_f64();
            if !value.is_finite() {
                let parts = loss.breakdown(&g);
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {b}: {:?}",
                    parts.components
                )));
            }
            loss_sum += value * chunk.len() as f64;
            let mut grads = g.backward(loss.total);
            let grads = pv.collect_grads(&mut grads, &params);
            adam.step(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }

        let metric = validator.score(&params, ecfg, tcfg)?;
        let train_loss = loss_sum / train.len() as f64;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, validation {metric:.5}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_metric: metric,
        });
        if metric > best.0 {
            best = (metric, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, synth_sequences, SynthConfig};
    use crate::encoder::MaskMode;

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let cfg = EncoderConfig {
            num_items: 10,
            d: 8,
            layers: 1,
            heads: 2,
            n_max: 5,
            k_max: 1,
            mask_mode: MaskMode::Causal,
            dropout: 0.0,
        };
        let mut p = init_params(&cfg, 1).unwrap();
        let before = p.clone();
        let zeros: Vec<Tensor<f32>> = p.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam::new(0.001).step(&mut p, &zeros);
        assert_eq!(p, before);
    }

    #[test]
    fn init_moments_and_determinism() {
        let cfg = EncoderConfig {
            num_items: 500,
            d: 32,
            layers: 1,
            heads: 2,
            n_max: 5,
            k_max: 1,
            mask_mode: MaskMode::Causal,
            dropout: 0.0,
        };
        let a = init_params(&cfg, 9).unwrap();
        assert_eq!(a, init_params(&cfg, 9).unwrap());
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        let e = a.item_emb.data();
        let mean = e.iter().map(|&v| v as f64).sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
        assert!((0.015..=0.025).contains(&var.sqrt()), "std {}", var.sqrt());
        assert!(a.layers[0].ln1_gamma.data().iter().all(|&g| g == 1.0));
        assert!(a.layers[0].ln1_beta.data().iter().all(|&b| b == 0.0));
    }

    struct Frozen(usize);
    impl Validator for Frozen {
        fn score(&mut self, _: &ModelParams<f32>, _: &EncoderConfig, _: &TrainConfig) -> Result<f64> {
            self.0 += 1;
            Ok(0.5)
        }
    }

    fn small() -> (SequenceDataset, EncoderConfig) {
        let log = synth_sequences(&SynthConfig {
            num_users: 40,
            num_items: 20,
            ..Default::default()
        })
        .unwrap();
        let ds = chronological_split(&log, log.timestamp_quantile(0.8).unwrap(), log.timestamp_quantile(0.9).unwrap(), 10).unwrap();
        let cfg = EncoderConfig {
            num_items: ds.num_items(),
            d: 16,
            layers: 1,
            heads: 2,
            n_max: 10,
            k_max: 2,
            mask_mode: MaskMode::Causal,
            dropout: 0.0,
        };
        (ds, cfg)
    }

    #[test]
    fn patience_one_stops_after_two_rounds() {
        let (ds, cfg) = small();
        let tcfg = TrainConfig {
            patience: 1,
            max_epochs: 50,
            batch_size: 64,
            ..Default::default()
        };
        let mut v = Frozen(0);
        let out = fit_with(&ds, &tcfg, &cfg, &mut v).unwrap();
        assert_eq!(v.0, 2);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn seeded_runs_repeat_and_best_epoch_restores() {
        let (ds, cfg) = small();
        let mut tcfg = TrainConfig {
            max_epochs: 3,
            batch_size: 32,
            learning_rate: 0.01,
            ..Default::default()
        };
        tcfg.objective.objective = crate::objectives::Objective::Prl;
        tcfg.objective.k = 2;
        let a = fit(&ds, &tcfg, &cfg).unwrap();
        let b = fit(&ds, &tcfg, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let again = NdcgValidator { ds: &ds }.score(&a.params, &cfg, &tcfg).unwrap();
        assert_eq!(again, a.best_metric());
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (ds, cfg) = small();
        let marks = vec![(0, 0); ds.num_users()];
        let none = SequenceDataset::new(ds.users.clone(), ds.items.clone(), ds.sequences.clone(), marks, 10).unwrap();
        assert!(matches!(fit(&none, &TrainConfig::default(), &cfg), Err(Error::InvalidArgument(_))));
    }
}
