use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmrError, Result};
use crate::tensor::{rotate_bilinear, Tensor};

use super::{build_twin_networks, Dataset, Network, SyntheticDatasetSpec};

/// Momentum SGD on softmax cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 0.01, momentum: 0.9, batch_size: 32, seed: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_loss: Vec<f64>,
    /// mean step loss per epoch
    pub epoch_loss: Vec<f64>,
    /// accuracy on the training set after the last epoch
    pub train_accuracy: f64,
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> (f64, Tensor) {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let y = label as usize;
        loss += z.ln() + m - row[y];
        for (j, (gj, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - m).exp() / z;
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, grad)
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

const EVAL_BATCH: usize = 64;

/// Fraction of samples classified correctly.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    accuracy_with(net, data, |x| Ok(x.clone()))
}

fn accuracy_with(net: &Network, data: &Dataset, transform: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = net.forward(&transform(&x)?)?;
        let c = logits.shape()[1];
        for (i, &l) in labels.iter().enumerate() {
            if argmax(&logits.data()[i * c..(i + 1) * c]) == l as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a copy of `net`. Sigmas are clipped after every step.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(GmrError::InvalidArgument("empty batches".into()));
    }
    let mut net = net.clone();
    let mut velocity: Vec<Vec<f64>> = net.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let mut loss = 0.0;
            let (_, grads) = net.backward_with(&x, |logits| {
                let (l, g) = softmax_cross_entropy(logits, &labels);
                loss = l;
                Ok(g)
            })?;
            if !loss.is_finite() {
                return Err(GmrError::TrainingDiverged { step, loss });
            }
            let flat: Vec<&[f64]> = grads.iter().flat_map(|g| g.arrays()).collect();
            for ((p, v), g) in net.params_mut().into_iter().zip(&mut velocity).zip(flat) {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
            net.clip_sigmas();
            log.step_loss.push(loss);
            epoch_sum += loss;
            batches += 1;
            step += 1;
        }
        log.epoch_loss.push(epoch_sum / batches.max(1) as f64);
    }
    log.train_accuracy = accuracy(&net, data)?;
    Ok((net, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleAccuracy {
    pub angle: f64,
    pub accuracy: f64,
}

/// Test accuracy on copies of the data rotated by each angle (bilinear,
/// zero fill).
pub fn evaluate(net: &Network, data: &Dataset, angles: &[f64]) -> Result<Vec<AngleAccuracy>> {
    angles
        .iter()
        .map(|&angle| {
            let accuracy = accuracy_with(net, data, |x| rotate_bilinear(x, angle, 0.0))?;
            Ok(AngleAccuracy { angle, accuracy })
        })
        .collect()
}

/// Everything the training demo needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub dataset: SyntheticDatasetSpec,
    pub gmr_train: TrainConfig,
    pub dense_train: TrainConfig,
    pub base_channels: usize,
    pub init_seed: u64,
    pub eval_angles: Vec<f64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            dataset: SyntheticDatasetSpec::default(),
            gmr_train: TrainConfig { learning_rate: 0.001, ..TrainConfig::default() },
            dense_train: TrainConfig { learning_rate: 0.01, ..TrainConfig::default() },
            base_channels: 8,
            init_seed: 11,
            eval_angles: (0..12).map(|i| 30.0 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinReport {
    pub parameters: usize,
    pub log: TrainLog,
    pub accuracy: Vec<AngleAccuracy>,
    /// accuracy at 45°, always measured
    pub accuracy_45: f64,
}

impl TwinReport {
    pub fn accuracy_at(&self, angle: f64) -> Option<f64> {
        if angle == 45.0 {
            return Some(self.accuracy_45);
        }
        self.accuracy.iter().find(|a| a.angle == angle).map(|a| a.accuracy)
    }

    pub fn min_accuracy(&self) -> f64 {
        self.accuracy.iter().map(|a| a.accuracy).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub schema: String,
    pub config: DemoConfig,
    pub gmr: TwinReport,
    pub dense: TwinReport,
}

impl DemoConfig {
    /// Builds the dataset and both twins, trains them without rotation
    /// and evaluates on rotated test copies.
    pub fn run(&self) -> Result<(DemoReport, Network, Network)> {
        let (train_set, test_set) = self.dataset.build()?;
        let (gmr0, dense0) = build_twin_networks(self.base_channels, self.dataset.classes, self.init_seed)?;
        let mut reports = Vec::new();
        let mut nets = Vec::new();
        for (net, cfg) in [(gmr0, &self.gmr_train), (dense0, &self.dense_train)] {
            let (trained, log) = train(&net, &train_set, cfg)?;
            let accuracy = evaluate(&trained, &test_set, &self.eval_angles)?;
            let accuracy_45 = evaluate(&trained, &test_set, &[45.0])?[0].accuracy;
            reports.push(TwinReport { parameters: trained.parameter_count(), log, accuracy, accuracy_45 });
            nets.push(trained);
        }
        let dense = reports.pop().expect("two twins");
        let gmr = reports.pop().expect("two twins");
        let dense_net = nets.pop().expect("two twins");
        let gmr_net = nets.pop().expect("two twins");
        Ok((DemoReport { schema: "gmr-train-demo/1".into(), config: self.clone(), gmr, dense }, gmr_net, dense_net))
    }
}
