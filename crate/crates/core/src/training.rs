//! Adam, losses and the mini-batch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::layers::{Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    /// Settings used by the progressive experiments.
    pub fn progressive() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings: {self:?}")))
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new();
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// Frozen parameters are skipped. Masked positions are zero afterwards.
pub fn adam_step<T: Scalar>(
    params: &mut [(&mut Param<T>, bool)],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(p, _)| vec![T::zero(); p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step moments",
            lhs: vec![state.m.len()],
            rhs: vec![params.len()],
        });
    }
    for ((p, _), g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.lr);
    let decay = T::of(cfg.lr * cfg.weight_decay);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let eps = T::of(cfg.eps);
    for (i, ((p, frozen), g)) in params.iter_mut().zip(grads).enumerate() {
        if *frozen {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.value.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step moments",
                lhs: vec![m.len()],
                rhs: vec![p.value.len()],
            });
        }
        let w = p.value.data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            w[j] = w[j] - decay * w[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] = w[j] - lr * mhat / (vhat.sqrt() + eps);
        }
        p.apply_mask();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    /// Softmax over raw logits against one-hot targets.
    CrossEntropy,
}

impl Loss {
    /// Mean-reduced loss and its gradient with respect to `pred`.
    pub fn eval<T: Scalar>(self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        if pred.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "loss",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = T::of(pred.len() as f64);
        match self {
            Loss::Mse => {
                let mut loss = T::zero();
                let grad = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        let d = p - y;
                        loss = loss + d * d;
                        T::of(2.0) * d / n
                    })
                    .collect();
                Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
            }
            Loss::CrossEntropy => {
                let probs = softmax(pred.data());
                let loss = probs
                    .iter()
                    .zip(target.data())
                    .filter(|(_, &y)| y != T::zero())
                    .map(|(&p, &y)| -y * p.max(T::min_positive_value()).ln())
                    .sum();
                let grad = probs.iter().zip(target.data()).map(|(&p, &y)| p - y).collect();
                Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
            }
        }
    }
}

fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Higher-is-better evaluation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    NegRmse,
}

/// Paired inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Vec<Tensor<T>>, targets: Vec<Tensor<T>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: vec![inputs.len()],
                rhs: vec![targets.len()],
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores `net` on `data` in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>, metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let preds = data
        .inputs
        .par_iter()
        .map(|x| net.predict(x))
        .collect::<Result<Vec<_>>>()?;
    match metric {
        Metric::Accuracy => {
            let hits = preds
                .iter()
                .zip(&data.targets)
                .filter(|(p, y)| argmax(p.data()) == argmax(y.data()))
                .count();
            Ok(hits as f64 / data.len() as f64)
        }
        Metric::NegRmse => {
            let (mut sq, mut n) = (0.0, 0usize);
            for (p, y) in preds.iter().zip(&data.targets) {
                for (&a, &b) in p.data().iter().zip(y.data()) {
                    sq += (a.as_f64() - b.as_f64()).powi(2);
                    n += 1;
                }
            }
            Ok(-(sq / n as f64).sqrt())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Owns the optimizer state and shuffle stream for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub adam: AdamConfig,
    pub state: AdamState<T>,
    rng: ChaCha8Rng,
    epochs_run: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, adam: AdamConfig) -> Result<Self> {
        config.validate()?;
        adam.validate()?;
        Ok(Self {
            config,
            adam,
            state: AdamState::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epochs_run: 0,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    /// One pass over `data`; returns the mean per-sample loss.
    pub fn epoch(&mut self, net: &mut Network<T>, data: &Dataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InsufficientData("training set is empty".into()));
        }
        let epoch = self.epochs_run;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.config.shuffle {
            order.shuffle(&mut self.rng);
        }
        let mut total = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
            let loss_kind = self.config.loss;
            let net_ref: &Network<T> = net;
            let per_sample = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (out, cache) = net_ref.forward(&data.inputs[i], Mode::Train, &mut rng)?;
                    let (loss, grad) = loss_kind.eval(&out, &data.targets[i])?;
                    Ok((loss, net_ref.backward(&cache, &grad)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = T::of(1.0 / batch.len() as f64);
            let mut iter = per_sample.into_iter();
            let (first_loss, mut grads) = iter.next().expect("batch is non-empty");
            let mut batch_loss = first_loss.as_f64();
            for (loss, g) in iter {
                batch_loss += loss.as_f64();
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            total += batch_loss;
            for g in &mut grads {
                *g = g.scale(scale);
            }
            adam_step(&mut net.params_mut(), &grads, &mut self.state, &self.adam)?;
        }
        self.epochs_run += 1;
        Ok(total / data.len() as f64)
    }

    /// Runs the configured number of epochs.
    pub fn train(
        &mut self,
        net: &mut Network<T>,
        data: &Dataset<T>,
        validation: Option<(&Dataset<T>, Metric)>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for _ in 0..self.config.epochs {
            let start = Instant::now();
            let epoch = self.epochs_run;
            let train_loss = self.epoch(net, data)?;
            let val_metric = match validation {
                Some((v, m)) => Some(evaluate(net, v, m)?),
                None => None,
            };
            log.epochs.push(EpochLog {
                epoch,
                train_loss,
                val_metric,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        Ok(log)
    }
}

/// Convenience wrapper: builds a trainer and runs it once.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    config: TrainConfig,
    adam: AdamConfig,
    validation: Option<(&Dataset<T>, Metric)>,
) -> Result<TrainLog> {
    Trainer::new(config, adam)?.train(net, data, validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_spreads() {
        let a: Vec<u64> = (0..4).map(|i| derive_seed(7, i)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_eq!(derive_seed(7, 2), a[2]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0f64, 2.0, 3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
    }
}
