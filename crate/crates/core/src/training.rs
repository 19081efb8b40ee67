//! Losses, learning-rate schedule and the teacher training loop.

use std::collections::BTreeMap;
use std::io::Write;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::NoisePolicy;
use crate::dataset::PreprocessedImage;
use crate::error::{Error, Result};
use crate::eval::{plcc, srcc};
use crate::model::{QualityModel, TeacherModel, TrainScope};
use crate::nn::ParamStore;

fn check_lengths(y: usize, yp: usize) -> Result<()> {
    if y != yp {
        return Err(Error::shape("score vectors", y, yp));
    }
    Ok(())
}

/// Mean squared error between two `(n,)` tensors.
pub fn mse_loss_t(y: &Tensor, yp: &Tensor) -> Result<Tensor> {
    check_lengths(y.dim(0)?, yp.dim(0)?)?;
    if y.dim(0)? == 0 {
        return Err(Error::Invalid("mse of empty vectors".into()));
    }
    Ok((yp - y)?.sqr()?.mean_all()?)
}

/// Population standard deviation.
pub fn population_std(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pairwise hinge ranking loss averaged over the `n(n-1)/2` unordered
/// pairs, with margin `lambda` times the population std of `y`.
/// Ground-truth scores are constants, so they are taken from the host.
pub fn margin_loss_t(y: &[f64], yp: &Tensor, lambda: f64) -> Result<Tensor> {
    let n = y.len();
    check_lengths(n, yp.dim(0)?)?;
    if n < 2 {
        return Err(Error::Invalid(format!("margin loss needs n >= 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    let m = lambda * population_std(y);
    // signs of y_i - y_j on the strict upper triangle, zero elsewhere
    let mut sign = vec![0.0f64; n * n];
    let mut mask = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            sign[i * n + j] = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            mask[i * n + j] = 1.0;
        }
    }
    let dev = yp.device();
    let sign = Tensor::from_vec(sign, (n, n), dev)?.to_dtype(yp.dtype())?;
    let mask = Tensor::from_vec(mask, (n, n), dev)?.to_dtype(yp.dtype())?;
    let diff = yp.unsqueeze(1)?.broadcast_sub(&yp.unsqueeze(0)?)?;
    let hinge = ((sign * diff)?.neg()? + m)?.relu()?;
    let total = (hinge * mask)?.sum_all()?;
    Ok((total * (2.0 / (n * (n - 1)) as f64))?)
}

/// Unweighted sum of the MSE and margin terms.
pub fn total_loss_t(y: &[f64], yp: &Tensor, lambda: f64) -> Result<Tensor> {
    let yt = Tensor::new(y, yp.device())?.to_dtype(yp.dtype())?;
    Ok((mse_loss_t(&yt, yp)? + margin_loss_t(y, yp, lambda)?)?)
}

fn host(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::new(v, &candle_core::Device::Cpu)?)
}

pub fn mse_loss(y: &[f64], yp: &[f64]) -> Result<f64> {
    check_lengths(y.len(), yp.len())?;
    Ok(mse_loss_t(&host(y)?, &host(yp)?)?.to_scalar::<f64>()?)
}

pub fn margin_loss(y: &[f64], yp: &[f64], lambda: f64) -> Result<f64> {
    check_lengths(y.len(), yp.len())?;
    Ok(margin_loss_t(y, &host(yp)?, lambda)?.to_scalar::<f64>()?)
}

pub fn total_loss(y: &[f64], yp: &[f64], lambda: f64) -> Result<f64> {
    check_lengths(y.len(), yp.len())?;
    Ok(total_loss_t(y, &host(yp)?, lambda)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.25 }
    }
}

/// Optimiser schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Validate every this many optimiser steps; 0 disables validation.
    pub validation_step: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self, section: &str) -> Result<()> {
        let field = |f: &str, msg: String| Err(Error::Config(format!("{section}.{f}: {msg}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return field("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return field(
                "batch_size",
                format!("must be >= 2, got {}", self.batch_size),
            );
        }
        if self.epochs == 0 {
            return field("epochs", "must be >= 1".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return field(
                "decay_epochs",
                format!("must be strictly increasing, got {:?}", self.decay_epochs),
            );
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return field(
                "decay_factor",
                format!("must be in (0, 1], got {}", self.decay_factor),
            );
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

/// Preprocessed images with normalised scores.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub images: Vec<PreprocessedImage>,
    pub scores: Vec<f64>,
}

impl Samples {
    pub fn new(images: Vec<PreprocessedImage>, scores: Vec<f64>) -> Result<Self> {
        check_lengths(images.len(), scores.len())?;
        Ok(Self { images, scores })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }

    pub fn refs(&self) -> Vec<&PreprocessedImage> {
        self.images.iter().collect()
    }

    /// Splits off the last `fraction` of a seeded shuffle as a validation
    /// slice. Returns `(train, validation)`; validation may be empty.
    pub fn carve_validation(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let n = self.len();
        let k = ((n as f64) * fraction).floor() as usize;
        if k < 2 || n - k < 2 {
            return (self.clone(), Self::default());
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465));
        let (t, v) = idx.split_at(n - k);
        let mut t = t.to_vec();
        let mut v = v.to_vec();
        t.sort_unstable();
        v.sort_unstable();
        (self.subset(&t), self.subset(&v))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_plcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_srcc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub best_step: Option<usize>,
    pub best_val_srcc: Option<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn write_jsonl(&self, out: &mut dyn Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Validation metrics of `model` on `val`, or `None` when they are undefined.
pub(crate) fn validate_metrics(
    model: &dyn QualityModel,
    val: &Samples,
) -> Result<Option<(f64, f64)>> {
    if val.len() < 2 {
        return Ok(None);
    }
    let pred = model.predict_batch(&val.refs())?;
    match (plcc(&val.scores, &pred), srcc(&val.scores, &pred)) {
        (Ok(p), Ok(s)) => Ok(Some((p, s))),
        _ => Ok(None),
    }
}

/// Shared bookkeeping for the teacher and student loops: learning-rate
/// schedule, best-by-validation snapshot and divergence rollback.
pub(crate) struct Trainer<'a> {
    pub schedule: &'a TrainSchedule,
    pub store: &'a ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub log: TrainLog,
    last_good: BTreeMap<String, Tensor>,
    best: Option<BTreeMap<String, Tensor>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        schedule: &'a TrainSchedule,
        store: &'a ParamStore,
        vars: Vec<candle_core::Var>,
    ) -> Result<Self> {
        if vars.is_empty() {
            return Err(Error::Invalid("nothing to train".into()));
        }
        let params = ParamsAdamW {
            lr: schedule.lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            schedule,
            store,
            opt: AdamW::new(vars, params)?,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            log: TrainLog::default(),
            last_good: store.snapshot()?,
            best: None,
        })
    }

    /// Batches for one epoch; a trailing batch smaller than 2 is dropped.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.schedule.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn start_epoch(&mut self, epoch: usize) {
        self.opt.set_learning_rate(self.schedule.lr_at_epoch(epoch));
    }

    pub fn done(&self) -> bool {
        self.schedule.max_steps > 0 && self.log.steps() >= self.schedule.max_steps
    }

    /// Applies one update, or rolls back and errors if the loss is not finite.
    pub fn step(&mut self, loss: &Tensor, mut record: LogRecord) -> Result<()> {
        if !record.total.is_finite() {
            self.store.restore(&self.last_good)?;
            return Err(Error::Diverged {
                step: record.step,
                loss: record.total,
            });
        }
        self.opt.backward_step(loss)?;
        record.lr = self.opt.learning_rate();
        self.log.records.push(record);
        Ok(())
    }

    /// Runs validation when due and keeps the best snapshot.
    pub fn maybe_validate(&mut self, model: &dyn QualityModel, val: &Samples) -> Result<()> {
        let step = self.log.steps();
        let every = self.schedule.validation_step;
        if every == 0 || !step.is_multiple_of(every) || val.len() < 2 {
            return Ok(());
        }
        let metrics = validate_metrics(model, val)?;
        let snap = self.store.snapshot()?;
        if let Some((p, s)) = metrics {
            if let Some(r) = self.log.records.last_mut() {
                r.val_plcc = Some(p);
                r.val_srcc = Some(s);
            }
            if self.log.best_val_srcc.is_none_or(|b| s > b) {
                self.log.best_val_srcc = Some(s);
                self.log.best_step = Some(step);
                self.best = Some(snap.clone());
            }
        }
        self.last_good = snap;
        Ok(())
    }

    /// Restores the best validated parameters, if any.
    pub fn finish(self) -> Result<TrainLog> {
        if let Some(best) = &self.best {
            self.store.restore(best)?;
        }
        Ok(self.log)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Trains `model` in place on `train`, validating on `val`, and returns the
/// log. The model ends with the best validated parameters, or the final ones
/// when no validation ran.
pub fn train_teacher(
    model: &TeacherModel,
    train: &Samples,
    val: &Samples,
    schedule: &TrainSchedule,
    loss: &LossConfig,
    scope: TrainScope,
) -> Result<TrainLog> {
    schedule.validate("teacher")?;
    if train.len() < 2 {
        return Err(Error::Invalid(format!(
            "training set has {} image(s), need >= 2",
            train.len()
        )));
    }
    let store = model.store();
    let vars = store.vars_where(|n| scope.includes(n));
    let mut tr = Trainer::new(schedule, store, vars)?;
    let dtype = store.dtype();
    'outer: for epoch in 0..schedule.epochs {
        tr.start_epoch(epoch);
        for batch in tr.epoch_batches(train.len()) {
            let imgs: Vec<&PreprocessedImage> = batch.iter().map(|&i| &train.images[i]).collect();
            let y: Vec<f64> = batch.iter().map(|&i| train.scores[i]).collect();
            let x = PreprocessedImage::batch(&imgs, dtype)?;
            let noise = NoisePolicy::Seeded(tr.next_seed());
            let out = model.forward(&x, &noise)?;
            let yt = Tensor::new(y.as_slice(), x.device())?.to_dtype(dtype)?;
            let mse = mse_loss_t(&yt, &out.scores)?;
            let margin = margin_loss_t(&y, &out.scores, loss.lambda)?;
            let total = (&mse + &margin)?;
            let record = LogRecord {
                step: tr.log.steps() + 1,
                epoch,
                lr: 0.0,
                mse: scalar(&mse)?,
                margin: scalar(&margin)?,
                distill: None,
                total: scalar(&total)?,
                val_plcc: None,
                val_srcc: None,
            };
            tr.step(&total, record)?;
            tr.maybe_validate(model, val)?;
            if tr.done() {
                break 'outer;
            }
        }
    }
    tr.finish()
}
