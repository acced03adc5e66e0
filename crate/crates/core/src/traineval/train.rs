use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::metrics::EvalMetrics;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::features::{Batch, FeatureSpace, Sample};
use crate::model::Model;
use crate::numerics::AdagradState;

pub const ADAGRAD_EPSILON: f64 = 1e-8;
pub const THREADS_ENV: &str = "DPAN_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub eval_batch: usize,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 0.01,
            epsilon: ADAGRAD_EPSILON,
            epochs: 3,
            seed: 0,
            eval_batch: 512,
            eval_each_epoch: true,
        }
    }
}

const KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "epsilon",
    "epochs",
    "seed",
    "eval_batch",
    "eval_each_epoch",
];

impl TrainConfig {
    /// Batch 256, learning rate 0.02 and 3 epochs: with about 200 steps per
    /// epoch, 0.01 is still far from its best test AUC after 3 epochs, and
    /// more epochs overfit the 50k-impression split.
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("train.batch_size and train.eval_batch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("train.epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.check_known(KEYS, "train")?;
        macro_rules! read {
            ($($f:ident),*) => { $(if let Some(v) = kv.get(stringify!($f))? { self.$f = v; })* };
        }
        read!(batch_size, learning_rate, epsilon, epochs, seed, eval_batch, eval_each_epoch);
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", format!("{:?}", self.learning_rate));
        kv.set("epsilon", format!("{:?}", self.epsilon));
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("eval_batch", self.eval_batch);
        kv.set("eval_each_epoch", self.eval_each_epoch);
        kv
    }
}

/// Days before the last form the training split; the last day is the test split.
pub fn split_by_day(samples: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let last = samples
        .iter()
        .map(|s| s.day)
        .max()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let (test, train): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| s.day == last);
    if train.is_empty() {
        return Err(Error::Config(format!("dataset spans a single day ({last}); nothing to train on")));
    }
    Ok((train, test))
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a thread count")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Click probabilities in sample order. Batches run in parallel; rows never
/// interact, so the result does not depend on batching.
pub fn predict(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let space = FeatureSpace::new(model.manifest().clone());
    let t = model.config().seq_len;
    let chunks: Vec<Vec<f64>> = thread_pool()?.install(|| {
        samples
            .par_chunks(batch_size)
            .map(|chunk| {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let batch = Batch::collate(&refs, &space, t)?;
                model.predict(&batch)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(chunks.concat())
}

pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<EvalMetrics> {
    let p = predict(model, samples, batch_size)?;
    let y: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();
    EvalMetrics::compute(&p, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    pub test: Option<EvalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Test metrics of the returned parameters.
    pub final_test: EvalMetrics,
}

fn non_finite_detail(model: &Model, grads: &[Vec<f64>]) -> String {
    for (i, (_, p)) in model.store().iter().enumerate() {
        if grads.get(i).is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return format!("gradient of `{}` is not finite", p.name);
        }
        if !p.value.is_finite() {
            return format!("parameter `{}` is not finite", p.name);
        }
    }
    "no parameter is non-finite; the loss overflowed".into()
}

/// Shuffled mini-batch Adagrad on the total loss.
pub fn train(model: &mut Model, train: &[Sample], test: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let space = FeatureSpace::new(model.manifest().clone());
    let t = model.config().seq_len;
    let mut opt = AdagradState::new(model.store(), cfg.learning_rate, cfg.epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::collate(&refs, &space, t)?;
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: non_finite_detail(model, &grads),
                });
            }
            opt.step(model.store_mut(), &grads).map_err(|e| Error::NonFiniteLoss {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            total += loss;
            batches += 1;
        }
        let test_metrics = if cfg.eval_each_epoch && !test.is_empty() {
            Some(evaluate(model, test, cfg.eval_batch)?)
        } else {
            None
        };
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: total / batches as f64,
            test: test_metrics,
        });
    }
    let final_test = match epochs.last().and_then(|e| e.test) {
        Some(m) => m,
        None => evaluate(model, test, cfg.eval_batch)?,
    };
    Ok(TrainReport { epochs, final_test })
}
