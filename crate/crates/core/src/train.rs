//! Mean-squared-error training with Nadam, plateau learning-rate decay and
//! early stopping on validation loss.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Sample;
use crate::error::{dim_err, Error, Result};
use crate::metrics::{binarize, mean_example_metrics};
use crate::model::Model;
use crate::tensor::Tensor;

/// `mean((pred - target)²)`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(dim_err!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        ));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Nesterov-accelerated Adam with a constant momentum coefficient:
///
/// ```text
/// m = β₁m + (1-β₁)g            v = β₂v + (1-β₂)g²
/// m̂ = m / (1-β₁^(t+1))         ĝ = g / (1-β₁^t)        v̂ = v / (1-β₂^t)
/// θ ← θ - lr·(β₁m̂ + (1-β₁)ĝ) / (√v̂ + ε)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Nadam {
    pub fn new(lr: f64) -> Self {
        Nadam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to `params` (in a fixed order) from `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err!("{} parameters, {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient {i} is {:?}, parameter {:?}", g.shape(), p.shape()));
            }
            g.ensure_finite("gradient")?;
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() {
            return Err(Error::Usage("optimizer reused with a different parameter set".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let m_corr = 1.0 - b1.powi(t + 1);
        let g_corr = 1.0 - b1.powi(t);
        let v_corr = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / m_corr;
                let g_hat = gv / g_corr;
                let v_hat = *vv / v_corr;
                *pv -= self.lr * (b1 * m_hat + (1.0 - b1) * g_hat) / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub plateau_decay: f64,
    /// Epochs without a validation-F2 improvement before decaying.
    pub decay_patience: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub threshold: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 32,
            max_epochs: 100,
            learning_rate: 1e-4,
            plateau_decay: 0.1,
            decay_patience: 3,
            early_stop_patience: 5,
            threshold: 0.5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if self.decay_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        if !(self.plateau_decay > 0.0 && self.plateau_decay < 1.0) {
            return Err(Error::Config(format!("decay {} not in (0,1)", self.plateau_decay)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f2: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_f2,lr";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_f2, e.lr).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub lr_decays: u32,
    pub early_stopped: bool,
}

/// Mean loss and example-based mean F2 of `model` over `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], threshold: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(&s.image)?;
        loss += mse_loss(&p, &s.target())?;
        preds.push(binarize(&p, threshold));
        truths.push(s.labels.clone());
    }
    let f2 = mean_example_metrics(&preds, &truths)?.f2;
    Ok((loss / samples.len() as f64, f2))
}

/// One pass over `batch`; returns the mean loss and applies one update.
fn train_batch(model: &mut Model, batch: &[&Sample], opt: &mut Nadam) -> Result<f64> {
    let weight = 1.0 / batch.len() as f64;
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for s in batch {
        let (l, grads) = model.loss_and_grads(&s.image, &s.target(), weight)?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let grads = total.expect("non-empty batch");
    opt.step(&mut model.params_mut(), &grads)?;
    Ok(loss * weight)
}

/// Trains `model` in place and returns the best-validation snapshot.
///
/// Validation mean F2 stalling for `decay_patience` epochs multiplies the
/// learning rate by `plateau_decay`; validation loss stalling for
/// `early_stop_patience` epochs stops training. `on_epoch` sees each log
/// entry and may end training early by returning `Break`.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &TrainSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Nadam::new(schedule.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut best_f2 = f64::NEG_INFINITY;
    let (mut stale_loss, mut stale_f2, mut decays) = (0, 0, 0u32);
    let mut early_stopped = false;

    for epoch in 1..=schedule.max_epochs {
        order.shuffle(&mut rng);
        let lr = schedule.learning_rate * schedule.plateau_decay.powi(decays as i32);
        opt.lr = lr;
        let mut train_loss = 0.0;
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let l = train_batch(model, &batch, &mut opt).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("diverged in epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            train_loss += l * chunk.len() as f64;
        }
        train_loss /= train_set.len() as f64;
        let (val_loss, val_f2) = evaluate(model, val_set, schedule.threshold)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric(format!("loss became non-finite in epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_f2,
            lr,
        };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} f2 {val_f2:.4} lr {lr:e}");
        let flow = on_epoch(&entry);
        log.push(entry);

        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            stale_loss = 0;
        } else {
            stale_loss += 1;
        }
        if val_f2 > best_f2 {
            best_f2 = val_f2;
            stale_f2 = 0;
        } else {
            stale_f2 += 1;
            if stale_f2 >= schedule.decay_patience {
                decays += 1;
                stale_f2 = 0;
            }
        }
        if stale_loss >= schedule.early_stop_patience {
            early_stopped = true;
            break;
        }
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        log,
        lr_decays: decays,
        early_stopped,
    })
}
