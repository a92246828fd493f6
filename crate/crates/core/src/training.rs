//! Loss computation, the adaptive-moment optimizer and the training loop.

use crate::data::Sample;
use crate::models::{Model, ModelError};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Predicted probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the
/// logs so the loss stays finite.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("prediction has {preds} entries but {labels} labels were given")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite gradient in parameter `{0}`; training aborted")]
    NonFiniteGradient(String),
    #[error("non-finite training loss at epoch {epoch}; training aborted")]
    NonFiniteLoss { epoch: usize },
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied to the raw gradients before the update.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop after this many epochs without validation-loss improvement;
    /// only active when a validation split is supplied.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
            patience: Some(10),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if self.eps <= 0.0 {
            return Err(TrainError::InvalidConfig("eps must be positive".into()));
        }
        if let Some(clip) = self.grad_clip {
            if clip <= 0.0 {
                return Err(TrainError::InvalidConfig(format!(
                    "grad_clip must be positive, got {clip}"
                )));
            }
        }
        Ok(())
    }
}

// ── Loss ────────────────────────────────────────────────────────────────

/// Per-sample binary cross-entropy on the tape:
/// `-(1/T) * sum_t [ y_t log p_t + (1 - y_t) log(1 - p_t) ]`
/// with probabilities clamped away from 0 and 1.
pub fn bce_per_sample(
    tape: &mut Tape,
    pred: NodeId,
    labels: &[u8],
) -> Result<NodeId, TrainError> {
    let shape = tape.value(pred).shape().to_vec();
    let n = tape.value(pred).numel();
    if n != labels.len() {
        return Err(TrainError::LengthMismatch {
            preds: n,
            labels: labels.len(),
        });
    }
    let y_data: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let y = tape.leaf(Tensor::new(shape, y_data)?, false);

    let p = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = tape.log(p);
    let pos = tape.mul(y, log_p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(one_minus_p);
    let one_minus_y = tape.affine(y, -1.0, 1.0);
    let neg = tape.mul(one_minus_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Builds the mean-over-samples loss graph for an already-registered model.
fn dataset_loss_on_tape(
    model: &Model,
    tape: &mut Tape,
    wired: &crate::models::ArchIds,
    samples: &[Sample],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut acc: Option<NodeId> = None;
    for sample in samples {
        let x = tape.leaf(sample.x.clone(), false);
        let probs = model.forward_on_tape(tape, x, wired, dropout_rng.as_deref_mut())?;
        let loss = bce_per_sample(tape, probs, &sample.y)?;
        acc = Some(match acc {
            None => loss,
            Some(prev) => tape.add(prev, loss)?,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / samples.len() as f64))
}

/// Mean binary cross-entropy of the model over a sample set.
pub fn dataset_loss(model: &Model, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let wired = model.register(&mut tape, false);
    let loss = dataset_loss_on_tape(model, &mut tape, &wired, samples, None)?;
    Ok(tape.value(loss).item())
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Adaptive-moment optimizer state: first/second moment buffers and the
/// step count for bias correction. Buffers are allocated on the first step.
#[derive(Debug, Default)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// One update over `(name, parameter)` pairs and their gradients, in
    /// matching order. Rejects non-finite gradients, naming the parameter.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &[Vec<f64>],
        tc: &TrainConfig,
    ) -> Result<(), TrainError> {
        let params: Vec<(&str, &mut Tensor)> = params.collect();
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        for ((name, _), grad) in params.iter().zip(grads) {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient((*name).to_string()));
            }
        }

        let clip_scale = match tc.grad_clip {
            Some(clip) => {
                let norm: f64 = grads
                    .iter()
                    .flat_map(|g| g.iter().map(|v| v * v))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let bias1 = 1.0 - tc.beta1.powi(self.step as i32);
        let bias2 = 1.0 - tc.beta2.powi(self.step as i32);

        for (i, ((_, tensor), grad)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (k, value) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k] * clip_scale;
                m[k] = tc.beta1 * m[k] + (1.0 - tc.beta1) * g;
                v[k] = tc.beta2 * v[k] + (1.0 - tc.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *value -= tc.learning_rate * m_hat / (v_hat.sqrt() + tc.eps);
            }
        }
        Ok(())
    }
}

// ── Training loop ───────────────────────────────────────────────────────

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Wall-clock seconds; informational, excluded from determinism claims.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainTrace {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    /// CSV rows `epoch,train_loss,val_loss,val_acc,seconds`; empty cells for
    /// absent validation columns.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,val_loss,val_acc,seconds")?;
        for e in &self.epochs {
            let val_loss = e.val_loss.map_or(String::new(), |v| v.to_string());
            let val_acc = e.val_accuracy.map_or(String::new(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, val_loss, val_acc, e.seconds
            )?;
        }
        w.flush()
    }
}

/// Trains the model in place: seeded shuffle each epoch, mean loss per
/// batch, gradients zeroed between batches (each batch records a fresh
/// tape), optional early stopping on the validation loss.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: Option<&[Sample]>,
    tc: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    tc.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    // Separate stream so dropout draws never perturb the shuffle order.
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout_rng.set_stream(1);
    let use_dropout = model.config().dropout.unwrap_or(0.0) > 0.0;

    let mut adam = Adam::new();
    let mut trace = TrainTrace::default();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut best_val = f64::INFINITY;
    let mut stale_epochs = 0usize;

    for epoch in 1..=tc.epochs {
        let started = Instant::now();
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in indices.chunks(tc.batch_size) {
            let batch_samples: Vec<Sample> =
                batch.iter().map(|&i| train[i].clone()).collect();
            let mut tape = Tape::new();
            let wired = model.register(&mut tape, true);
            let dropout = use_dropout.then_some(&mut dropout_rng);
            let loss =
                dataset_loss_on_tape(model, &mut tape, &wired, &batch_samples, dropout)?;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = wired
                .ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
                })
                .collect();
            let batch_loss = tape.value(loss).item();
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            adam.step(model.params_mut(), &grads, tc)?;
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_accuracy) = match val {
            Some(val) if !val.is_empty() => {
                let loss = dataset_loss(model, val)?;
                let mut correct = 0usize;
                let mut total = 0usize;
                for sample in val {
                    let labels = model.predict(&sample.x, 0.5)?;
                    correct += labels
                        .iter()
                        .zip(&sample.y)
                        .filter(|(a, b)| a == b)
                        .count();
                    total += sample.y.len();
                }
                (Some(loss), Some(correct as f64 / total as f64))
            }
            _ => (None, None),
        };

        trace.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });

        if let (Some(patience), Some(current)) = (tc.patience, val_loss) {
            if current < best_val {
                best_val = current;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(trace)
}
