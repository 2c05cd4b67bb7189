//! Deterministic mini-batch training loops for the three objectives:
//! supervised one-shot prediction, VAE reconstruction, and diffusion
//! denoising.
//!
//! All randomness (shuffling, reparameterization draws, noise steps) is
//! derived from (seed, epoch, instance index), so a run interrupted at an
//! epoch boundary and resumed from its checkpoint retraces the original
//! trajectory exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vae::{VaeModel, BCE_EPS};
use super::{upper_triangle_column, upper_triangle_targets, ForwardCtx, Predictor};
use crate::diffusion::{forward_noise, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::solver::dataset::{derive_seed, Record};
use crate::tensor::{AdamState, AdamW, DTensor, GradAccumulator, ParamSet, Tape, TensorId};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Weight of the mean-repulsive penalty; 0 disables it.
    pub mean_repulsive_lambda: f64,
    pub mean_repulsive_margin: f64,
    /// Decision threshold used for the logged training accuracy.
    pub threshold: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            mean_repulsive_lambda: 0.0,
            mean_repulsive_margin: 0.05,
            threshold: 0.5,
        }
    }
}

impl TrainHyper {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub variance: f64,
}

/// Running statistics over the strict-upper-triangle predictions of an epoch.
#[derive(Default)]
struct EpochStats {
    loss_sum: f64,
    instances: usize,
    correct: usize,
    entries: usize,
    prob_sum: f64,
    prob_sq_sum: f64,
}

impl EpochStats {
    fn add_instance(&mut self, loss: f64, probs: &DTensor, record: &Record, threshold: f64) {
        self.loss_sum += loss;
        self.instances += 1;
        for (i, j, bit) in record.instance.label.iter_upper() {
            let p = probs.at2(i, j);
            let predicted = p >= threshold;
            if predicted == bit {
                self.correct += 1;
            }
            self.entries += 1;
            self.prob_sum += p;
            self.prob_sq_sum += p * p;
        }
    }

    fn log(&self, epoch: usize) -> EpochLog {
        let n = self.entries.max(1) as f64;
        let mean = self.prob_sum / n;
        EpochLog {
            epoch,
            loss: self.loss_sum / self.instances.max(1) as f64,
            accuracy: self.correct as f64 / n,
            variance: self.prob_sq_sum / n - mean * mean,
        }
    }
}

/// Loss of one supervised instance: clamped cross entropy over the strict
/// upper triangle, plus the optional mean-repulsive penalty
/// lambda * mean(relu(margin - |p - m|)) that pushes predictions away from
/// the dataset marginal m.
pub(crate) fn supervised_instance_loss(
    tape: &mut Tape,
    predictor: &Predictor,
    binding: &crate::tensor::Binding,
    record: &Record,
    hyper: &TrainHyper,
    marginal: f64,
) -> Result<(TensorId, DTensor)> {
    let ctx = ForwardCtx::plain(&record.instance.coords, record.instance.d);
    let out = predictor.forward(tape, binding, &ctx)?;
    let probs_value = tape.value(out.probs).clone();
    let n = record.instance.n();
    let pred_ut = upper_triangle_column(tape, out.probs, n)?;
    let target_ut = tape.constant(upper_triangle_targets(&record.instance.label));
    let mut loss = tape.bce_loss(pred_ut, target_ut, BCE_EPS)?;
    if hyper.mean_repulsive_lambda > 0.0 {
        let centered = tape.affine(pred_ut, 1.0, -marginal);
        let neg = tape.scale(centered, -1.0);
        let pos_part = tape.relu(centered);
        let neg_part = tape.relu(neg);
        let abs = tape.add(pos_part, neg_part)?;
        let gap = tape.affine(abs, -1.0, hyper.mean_repulsive_margin);
        let pen = tape.relu(gap);
        let pen_mean = tape.mean_all(pen);
        let pen_scaled = tape.scale(pen_mean, hyper.mean_repulsive_lambda);
        loss = tape.add(loss, pen_scaled)?;
    }
    Ok((loss, probs_value))
}

/// Mean label density over a record set (the mean-repulsive target and the
/// diffusion marginal).
pub fn label_marginal(records: &[Record]) -> f64 {
    let mut total = 0.0;
    for r in records {
        let n = r.instance.n();
        let pairs = (n * (n - 1) / 2).max(1) as f64;
        total += r.instance.label.edge_count() as f64 / pairs;
    }
    total / records.len().max(1) as f64
}

/// What the trainer optimizes per instance.
enum InstanceLoss<'a> {
    Supervised {
        predictor: &'a Predictor,
        marginal: f64,
    },
    Vae {
        model: &'a VaeModel,
    },
    Diffusion {
        predictor: &'a Predictor,
        schedule: &'a DiffusionSchedule,
    },
}

fn instance_loss(
    kind: &InstanceLoss,
    tape: &mut Tape,
    binding: &crate::tensor::Binding,
    record: &Record,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, DTensor)> {
    match kind {
        InstanceLoss::Supervised { predictor, marginal } => {
            supervised_instance_loss(tape, predictor, binding, record, hyper, *marginal)
        }
        InstanceLoss::Vae { model } => {
            let eps: Vec<f64> = (0..model.d_z)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let (loss, probs) = model.loss(tape, binding, &record.instance, &eps)?;
            let probs_value = tape.value(probs).clone();
            Ok((loss, probs_value))
        }
        InstanceLoss::Diffusion { predictor, schedule } => {
            let t = rng.random_range(1..=schedule.horizon());
            let noisy = forward_noise(&record.instance.label, schedule, t, rng)?;
            let ctx = ForwardCtx {
                coords: &record.instance.coords,
                d: record.instance.d,
                edge_state: Some(&noisy.edges),
                t_over_t: Some(t as f64 / schedule.horizon() as f64),
                z: None,
            };
            let out = predictor.forward(tape, binding, &ctx)?;
            let probs_value = tape.value(out.probs).clone();
            let n = record.instance.n();
            let pred_ut = upper_triangle_column(tape, out.probs, n)?;
            let target_ut = tape.constant(upper_triangle_targets(&record.instance.label));
            let loss = tape.bce_loss(pred_ut, target_ut, BCE_EPS)?;
            Ok((loss, probs_value))
        }
    }
}

fn run_epochs(
    kind: InstanceLoss,
    params: &mut ParamSet,
    opt_state: &mut AdamState,
    records: &[Record],
    hyper: &TrainHyper,
    seed: u64,
    start_epoch: usize,
    mut on_epoch: Option<&mut dyn FnMut(&EpochLog, &ParamSet, &AdamState) -> Result<()>>,
) -> Result<Vec<EpochLog>> {
    if records.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let optimizer = hyper.optimizer();
    let mut logs = Vec::new();
    for epoch in start_epoch..hyper.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + epoch as u64));
        order.shuffle(&mut epoch_rng);
        let mut stats = EpochStats::default();
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut acc = GradAccumulator::new();
            for &idx in batch {
                let record = &records[idx];
                let mut tape = Tape::new();
                let binding = params.bind_all(&mut tape);
                let mut inst_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(seed, 1 + epoch as u64),
                    1 + idx as u64,
                ));
                let (loss, probs) =
                    instance_loss(&kind, &mut tape, &binding, record, hyper, &mut inst_rng)?;
                tape.backward(loss)?;
                acc.add(&binding.grads(&tape)?);
                stats.add_instance(tape.value(loss).data()[0], &probs, record, hyper.threshold);
            }
            optimizer.step(params, &acc.mean(), opt_state)?;
        }
        let log = stats.log(epoch + 1);
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&log, params, opt_state)?;
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Supervised one-shot training: BCE between predicted probabilities and
/// labels over the strict upper triangle.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    predictor: &Predictor,
    params: &mut ParamSet,
    opt_state: &mut AdamState,
    records: &[Record],
    hyper: &TrainHyper,
    seed: u64,
    start_epoch: usize,
    on_epoch: Option<&mut dyn FnMut(&EpochLog, &ParamSet, &AdamState) -> Result<()>>,
) -> Result<Vec<EpochLog>> {
    let marginal = label_marginal(records);
    run_epochs(
        InstanceLoss::Supervised { predictor, marginal },
        params,
        opt_state,
        records,
        hyper,
        seed,
        start_epoch,
        on_epoch,
    )
}

/// Negative-ELBO training of the VAE.
#[allow(clippy::too_many_arguments)]
pub fn train_vae(
    model: &VaeModel,
    params: &mut ParamSet,
    opt_state: &mut AdamState,
    records: &[Record],
    hyper: &TrainHyper,
    seed: u64,
    start_epoch: usize,
    on_epoch: Option<&mut dyn FnMut(&EpochLog, &ParamSet, &AdamState) -> Result<()>>,
) -> Result<Vec<EpochLog>> {
    run_epochs(
        InstanceLoss::Vae { model },
        params,
        opt_state,
        records,
        hyper,
        seed,
        start_epoch,
        on_epoch,
    )
}

/// Denoising training: uniform random step t, forward-noised edges, cross
/// entropy between the predicted clean-edge distribution and the label.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion(
    predictor: &Predictor,
    params: &mut ParamSet,
    opt_state: &mut AdamState,
    schedule: &DiffusionSchedule,
    records: &[Record],
    hyper: &TrainHyper,
    seed: u64,
    start_epoch: usize,
    on_epoch: Option<&mut dyn FnMut(&EpochLog, &ParamSet, &AdamState) -> Result<()>>,
) -> Result<Vec<EpochLog>> {
    if !predictor.time_conditioned {
        return Err(Error::Contract(
            "diffusion training requires a time-conditioned predictor".into(),
        ));
    }
    run_epochs(
        InstanceLoss::Diffusion { predictor, schedule },
        params,
        opt_state,
        records,
        hyper,
        seed,
        start_epoch,
        on_epoch,
    )
}

/// No-grad forward pass returning the probability matrix.
pub fn predict_probs(
    predictor: &Predictor,
    params: &ParamSet,
    ctx: &ForwardCtx,
) -> Result<DTensor> {
    let mut tape = Tape::new();
    let binding = params.bind_all(&mut tape);
    let out = predictor.forward(&mut tape, &binding, ctx)?;
    Ok(tape.value(out.probs).clone())
}

/// One-shot predictions for a whole record set, parallel across instances.
pub fn predict_dataset(
    predictor: &Predictor,
    params: &ParamSet,
    records: &[Record],
) -> Result<Vec<DTensor>> {
    records
        .par_iter()
        .map(|r| {
            predict_probs(
                predictor,
                params,
                &ForwardCtx::plain(&r.instance.coords, r.instance.d),
            )
        })
        .collect()
}

/// Picks the decision threshold maximizing elementwise accuracy on a
/// validation set, scanning a fixed percentile grid.
pub fn tune_threshold(preds: &[DTensor], records: &[Record]) -> f64 {
    let mut best = (0.5, -1.0f64);
    for step in 1..100 {
        let threshold = step as f64 / 100.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (p, r) in preds.iter().zip(records) {
            for (i, j, bit) in r.instance.label.iter_upper() {
                if (p.at2(i, j) >= threshold) == bit {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total.max(1) as f64;
        if acc > best.1 {
            best = (threshold, acc);
        }
    }
    best.0
}
