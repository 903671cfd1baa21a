//! Phased minibatch training with early stopping.

mod history;

pub use history::{write_history_csv, EpochRecord};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{config_err, Error, Result};
use crate::jet::{batch_tensor, Jet};
use crate::metrics::{accuracy, probabilities};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub batch_size: usize,
    pub max_epochs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CategoricalCe,
    BinaryCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub adam: AdamConfig,
    /// Epochs without a strictly lower validation loss before a phase ends.
    pub patience: usize,
    pub loss: LossKind,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let phase = |batch_size, max_epochs| Phase { batch_size, max_epochs };
        Self {
            phases: vec![
                phase(128, 200),
                phase(256, 200),
                phase(512, 200),
                phase(1024, 200),
                phase(2048, 200),
                phase(4096, 400),
            ],
            adam: AdamConfig::default(),
            patience: 40,
            loss: LossKind::CategoricalCe,
        }
    }
}

impl TrainSchedule {
    pub fn single(batch_size: usize, max_epochs: usize) -> Self {
        Self {
            phases: vec![Phase { batch_size, max_epochs }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.iter().any(|p| p.batch_size == 0) {
            return config_err("batch sizes must be positive");
        }
        if self.phases.windows(2).any(|w| w[0].batch_size > w[1].batch_size) {
            return config_err("batch sizes must be non-decreasing across phases");
        }
        if self.patience == 0 {
            return config_err("patience must be at least 1");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.max_epochs).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    /// Worker threads for data-parallel gradients; 1 is bitwise reproducible.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

/// Mean loss and parameter gradients over `jets`.
pub fn batch_gradients(model: &Model, jets: &[&Jet], loss: LossKind) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::<f64>::new();
    let vars = model.place(&mut tape, true);
    let x = tape.constant(batch_tensor(jets)?);
    let out = model.forward_tape(&mut tape, &vars, x)?;
    let labels: Vec<usize> = jets.iter().map(|j| j.label).collect();
    let l = match loss {
        LossKind::CategoricalCe => tape.cross_entropy(out.logits, &labels)?,
        LossKind::BinaryCe => tape.binary_cross_entropy(out.logits, &labels)?,
    };
    let value = tape.value(l).data()[0];
    let mut grads = tape.backward(l)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is a gradient leaf"))
        .collect();
    Ok((value, grads))
}

fn parallel_gradients(model: &Model, jets: &[&Jet], loss: LossKind, threads: usize) -> Result<(f64, Vec<Tensor>)> {
    let per = jets.len().div_ceil(threads);
    let parts: Vec<Result<(f64, Vec<Tensor>)>> = jets
        .par_chunks(per)
        .map(|c| batch_gradients(model, c, loss))
        .collect();
    let total = jets.len() as f64;
    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (chunk, part) in jets.chunks(per).zip(parts) {
        let (l, g) = part?;
        let w = chunk.len() as f64 / total;
        loss_sum += l * w;
        match acc.as_mut() {
            None => acc = Some(g.into_iter().map(|t| t.map(|v| v * w)).collect()),
            Some(a) => {
                for (at, gt) in a.iter_mut().zip(g) {
                    for (x, y) in at.data_mut().iter_mut().zip(gt.data()) {
                        *x += y * w;
                    }
                }
            }
        }
    }
    Ok((loss_sum, acc.unwrap_or_default()))
}

/// Validation loss and accuracy using inference only.
pub fn validation_metrics(model: &Model, jets: &[Jet], loss: LossKind) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(jets.len());
    for chunk in jets.chunks(512) {
        let refs: Vec<&Jet> = chunk.iter().collect();
        let logits = model.forward::<f64>(&batch_tensor(&refs)?)?;
        let c = logits.last_dim();
        for (row, jet) in logits.data().chunks_exact(c).zip(chunk) {
            total += match loss {
                LossKind::CategoricalCe => {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
                    lse - row[jet.label]
                }
                LossKind::BinaryCe => {
                    let z = row[0];
                    z.max(0.0) - z * jet.label as f64 + (-z.abs()).exp().ln_1p()
                }
            };
            scores.push(probabilities(row));
        }
    }
    let labels: Vec<usize> = jets.iter().map(|j| j.label).collect();
    Ok((total / jets.len() as f64, accuracy(&scores, &labels)))
}

fn check_loss(model: &Model, loss: LossKind) -> Result<()> {
    let classes = model.config().classes;
    match (loss, classes) {
        (LossKind::BinaryCe, 1) => Ok(()),
        (LossKind::CategoricalCe, c) if c >= 2 => Ok(()),
        _ => config_err(format!("loss {loss:?} does not fit a head with {classes} logits")),
    }
}

/// Trains `model` over the phases of `schedule`, restoring the weights with
/// the lowest validation loss at the end.
pub fn train(
    mut model: Model,
    train_set: &[Jet],
    val_set: &[Jet],
    schedule: &TrainSchedule,
    seed: u64,
    options: TrainOptions,
) -> Result<(Model, Vec<EpochRecord>)> {
    if train_set.is_empty() || val_set.is_empty() {
        return config_err("training and validation sets must be non-empty");
    }
    schedule.validate()?;
    check_loss(&model, schedule.loss)?;
    let threads = options.threads.max(1);
    let pool = (threads > 1)
        .then(|| rayon::ThreadPoolBuilder::new().num_threads(threads).build())
        .transpose()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(schedule.adam, model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch = 0;
    for (phase_idx, phase) in schedule.phases.iter().enumerate() {
        let mut phase_best = f64::INFINITY;
        let mut stale = 0;
        for _ in 0..phase.max_epochs {
            epoch += 1;
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for idx in order.chunks(phase.batch_size) {
                let batch: Vec<&Jet> = idx.iter().map(|&i| &train_set[i]).collect();
                let step = match &pool {
                    Some(p) => p.install(|| parallel_gradients(&model, &batch, schedule.loss, threads)),
                    None => batch_gradients(&model, &batch, schedule.loss),
                };
                let (loss, grads) = step.map_err(|e| match e {
                    Error::NonFinite { op } => Error::Training {
                        epoch,
                        reason: format!("non-finite value in `{op}`"),
                    },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: "loss is not finite".into(),
                    });
                }
                loss_sum += loss * batch.len() as f64;
                adam_step(model.params_mut(), &grads, &mut state)?;
            }
            let (val_loss, val_acc) = validation_metrics(&model, val_set, schedule.loss)?;
            if !val_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "validation loss is not finite".into(),
                });
            }
            history.push(EpochRecord {
                epoch,
                phase: phase_idx,
                batch_size: phase.batch_size,
                train_loss: loss_sum / train_set.len() as f64,
                val_loss,
                val_acc,
            });
            if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                best = Some((val_loss, model.params().to_vec()));
            }
            if val_loss < phase_best {
                phase_best = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.set_params(params)?;
    }
    Ok((model, history))
}
