//! Adam with weight decay, step learning-rate decay, the training loop,
//! evaluation metrics and resumable checkpoints.
//!
//! Randomness is derived from counters: the shuffle of epoch `e` and the
//! collocation draw of global step `t` each come from their own stream of the
//! master seed. A checkpoint therefore only needs the counters to resume a
//! run exactly where it stopped.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetFile;
use crate::error::{usage, Error, Result};
use crate::layers::{apply_running_stats, ArchConfig, Ctx, HeadKind, Model, ModelKind};
use crate::tensor::{read_tensors, write_tensors, ParamId, ParamStore, Tensor};
use crate::tomo::{measure_raster, RasterImage, SensorSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Add the decay to the gradient (L2 penalty) instead of shrinking the
    /// weights directly.
    pub coupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            coupled: false,
        }
    }
}

/// First and second moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros =
            |p: &crate::tensor::Parameter| p.trainable.then(|| Tensor::zeros(p.value.shape()));
        OptimState {
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
            t: 0,
        }
    }
}

/// One Adam update. Parameters without a gradient see a zero gradient, so
/// decay and momentum still apply to them.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return usage("optimizer state was built for a different model");
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let grad = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t);
        let (Some(m), Some(v)) = (state.m[id.0].as_mut(), state.v[id.0].as_mut()) else {
            return usage("optimizer state lacks a trainable parameter");
        };
        let theta = store.get_mut(id);
        if let Some(g) = grad {
            if g.shape() != theta.shape() {
                return usage("gradient shape differs from its parameter");
            }
        }
        for i in 0..theta.len() {
            let x = theta.data()[i];
            let mut g = grad.map_or(0.0, |g| g.data()[i]);
            if cfg.coupled {
                g += cfg.weight_decay * x;
            }
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            let decay = if cfg.coupled {
                0.0
            } else {
                lr * cfg.weight_decay * x
            };
            theta.data_mut()[i] = x - step - decay;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` once each listed fraction of the run has passed.
    Step {
        milestones: Vec<f64>,
        factor: f64,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step {
            milestones: vec![0.6, 0.85],
            factor: 0.1,
        }
    }
}

pub fn lr_schedule(base_lr: f64, epoch: usize, total_epochs: usize, schedule: &Schedule) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Step { milestones, factor } => {
            let passed = milestones
                .iter()
                .filter(|&&f| epoch as f64 >= (f * total_epochs as f64).floor())
                .count();
            base_lr * factor.powi(passed as i32)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub loss: LossKind,
    pub arch: ArchConfig,
    pub train_data: Option<String>,
    pub test_data: Option<String>,
    /// Evaluate on the test split every this many epochs and after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 8,
            seed: 0,
            lr: 3e-3,
            adam: AdamConfig::default(),
            schedule: Schedule::default(),
            loss: LossKind::Mse,
            arch: ArchConfig::default(),
            train_data: None,
            test_data: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        let head_ok = matches!(
            (self.loss, self.arch.head),
            (LossKind::Mse, HeadKind::Regression)
                | (LossKind::CrossEntropy, HeadKind::Classification)
        );
        if !head_ok {
            return Err(Error::Config("loss kind does not match the head".into()));
        }
        self.arch.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `dims` values per sample, flat.
    Regression {
        values: Vec<f64>,
        dims: usize,
    },
    Classes {
        labels: Vec<usize>,
        classes: usize,
    },
}

/// Measurements and targets in memory, ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub sensors: SensorSet,
    pub inputs: Vec<f64>,
    pub targets: Targets,
}

impl Samples {
    pub fn from_dataset(d: &DatasetFile) -> Self {
        let rows: Vec<usize> = (0..d.len()).collect();
        Samples {
            sensors: d.sensors.clone(),
            inputs: d.records.iter().flat_map(|r| r.y.iter().copied()).collect(),
            targets: Targets::Regression {
                values: d.targets(&rows),
                dims: 2,
            },
        }
    }

    /// Measures raster images on `sensors` for classification.
    pub fn from_rasters(
        images: &[RasterImage],
        labels: &[u8],
        classes: usize,
        sensors: &SensorSet,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return usage("image and label counts differ");
        }
        if labels.iter().any(|&l| l as usize >= classes) {
            return usage("label out of range");
        }
        Ok(Samples {
            sensors: sensors.clone(),
            inputs: images
                .iter()
                .flat_map(|im| measure_raster(im, sensors))
                .collect(),
            targets: Targets::Classes {
                labels: labels.iter().map(|&l| l as usize).collect(),
                classes,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.sensors.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch_inputs(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.sensors.len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &i in rows {
            data.extend_from_slice(&self.inputs[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    /// Per-dimension mean and population standard deviation of regression
    /// targets.
    pub fn target_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let Targets::Regression { values, dims } = &self.targets else {
            return usage("target statistics need regression targets");
        };
        let n = (values.len() / dims).max(1) as f64;
        let mut mean = vec![0.0; *dims];
        for (i, v) in values.iter().enumerate() {
            mean[i % dims] += v / n;
        }
        let mut var = vec![0.0; *dims];
        for (i, v) in values.iter().enumerate() {
            var[i % dims] += (v - mean[i % dims]).powi(2) / n;
        }
        Ok((mean, var.iter().map(|v| v.sqrt()).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "split", "metric", "value"])
        .map_err(crate::tomo::csv_err)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            r.metric.clone(),
            r.value.to_string(),
        ])
        .map_err(crate::tomo::csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(crate::tomo::csv_err)?;
        let bad = || Error::Format(format!("malformed metrics row {rec:?}"));
        let field = |i: usize| rec.get(i).ok_or_else(bad);
        rows.push(MetricRow {
            epoch: field(0)?.parse().map_err(|_| bad())?,
            split: field(1)?.to_string(),
            metric: field(2)?.to_string(),
            value: field(3)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalMetrics {
    /// `mse` is over both targets jointly, in target units.
    Regression {
        mse: f64,
        mae_min: f64,
        mae_max: f64,
    },
    Classification {
        loss: f64,
        accuracy: f64,
    },
}

impl EvalMetrics {
    pub fn rows(&self, epoch: usize, split: &str) -> Vec<MetricRow> {
        let row = |m: &str, v: f64| MetricRow {
            epoch,
            split: split.to_string(),
            metric: m.to_string(),
            value: v,
        };
        match self {
            EvalMetrics::Regression {
                mse,
                mae_min,
                mae_max,
            } => {
                vec![
                    row("mse", *mse),
                    row("mae_d_min", *mae_min),
                    row("mae_d_max", *mae_max),
                ]
            }
            EvalMetrics::Classification { loss, accuracy } => {
                vec![row("loss", *loss), row("accuracy", *accuracy)]
            }
        }
    }
}

/// Sum in ascending order, so the result does not depend on sample order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Eval-mode metrics. Every batch uses the same collocation draws from
/// `seed`, so each prediction depends only on its own sample. Equivariant
/// predictions average over `arch.eval_draws` draws.
pub fn evaluate(
    model: &dyn Model,
    data: &Samples,
    batch_size: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    if data.sensors != *model.sensors() {
        return usage("dataset sensors differ from the model's");
    }
    let n = data.len();
    if n == 0 {
        return usage("cannot evaluate on an empty dataset");
    }
    let rows: Vec<usize> = (0..n).collect();
    let draws = match model.arch().kind {
        ModelKind::Equivariant => model.arch().eval_draws,
        ModelKind::Mlp => 1,
    };
    let mut outputs = Vec::with_capacity(n * model.arch().outputs);
    for chunk in rows.chunks(batch_size.max(1)) {
        let x = data.batch_inputs(chunk)?;
        let mut acc: Vec<f64> = Vec::new();
        for d in 0..draws {
            let mut rng = collocation_rng(seed, u64::MAX - d as u64);
            let mut ctx = Ctx::new(model.store(), false);
            let out = model.forward(&mut ctx, &x, &mut rng)?;
            let y = ctx.tape.value(out).data();
            if acc.is_empty() {
                acc = y.to_vec();
            } else {
                acc.iter_mut().zip(y).for_each(|(a, v)| *a += v);
            }
        }
        outputs.extend(acc.iter().map(|a| a / draws as f64));
    }
    match &data.targets {
        Targets::Regression { values, dims } => {
            let pred = model.denormalize(&outputs);
            let sq: Vec<f64> = pred
                .iter()
                .zip(values)
                .map(|(p, t)| (p - t).powi(2))
                .collect();
            let abs_dim = |d: usize| -> Vec<f64> {
                pred.iter()
                    .zip(values)
                    .enumerate()
                    .filter(|(i, _)| i % dims == d)
                    .map(|(_, (p, t))| (p - t).abs())
                    .collect()
            };
            Ok(EvalMetrics::Regression {
                mse: ordered_sum(sq) / values.len() as f64,
                mae_min: ordered_sum(abs_dim(0)) / n as f64,
                mae_max: ordered_sum(abs_dim(1.min(dims - 1))) / n as f64,
            })
        }
        Targets::Classes { labels, classes } => {
            let mut losses = Vec::with_capacity(n);
            let mut correct = 0usize;
            for (i, &l) in labels.iter().enumerate() {
                let z = &outputs[i * classes..(i + 1) * classes];
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                losses.push(lse - z[l]);
                let arg = (0..*classes).fold(0, |b, k| if z[k] > z[b] { k } else { b });
                correct += (arg == l) as usize;
            }
            Ok(EvalMetrics::Classification {
                loss: ordered_sum(losses) / n as f64,
                accuracy: correct as f64 / n as f64,
            })
        }
    }
}

/// MSE of always predicting `mean`, jointly over all target dimensions.
pub fn mean_predictor_mse(mean: &[f64], data: &Samples) -> Result<f64> {
    let Targets::Regression { values, dims } = &data.targets else {
        return usage("mean predictor needs regression targets");
    };
    if mean.len() != *dims {
        return usage("mean has the wrong number of targets");
    }
    let sq = values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % dims]).powi(2))
        .collect();
    Ok(ordered_sum(sq) / values.len() as f64)
}

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const COLLOCATION_SALT: u64 = 0x434f_4c4c_4f43_4154;

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    r.set_stream(epoch as u64);
    r
}

/// Generator of collocation points for global step `step`.
pub fn collocation_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ COLLOCATION_SALT);
    r.set_stream(step);
    r
}

/// Where a run stands; everything else about its randomness follows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    /// Steps already taken in the current epoch.
    pub step: usize,
    pub global_step: u64,
    pub loss_sum: f64,
    pub loss_count: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Box<dyn Model>,
    pub opt: OptimState,
    pub progress: Progress,
    last_grad_norms: Vec<(String, f64)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Box<dyn Model>) -> Result<Self> {
        cfg.validate()?;
        let strip = |a: &ArchConfig| ArchConfig {
            mlp_hidden: if cfg.arch.mlp_hidden == 0 {
                0
            } else {
                a.mlp_hidden
            },
            ..a.clone()
        };
        if strip(model.arch()) != strip(&cfg.arch) {
            return Err(Error::Config(
                "model was built from a different architecture".into(),
            ));
        }
        let opt = OptimState::new(model.store());
        Ok(Trainer {
            cfg,
            model,
            opt,
            progress: Progress::default(),
            last_grad_norms: Vec::new(),
        })
    }

    /// Fits the target normalisation of a regression head to `data`.
    pub fn fit_targets(&mut self, data: &Samples) -> Result<()> {
        if let Targets::Regression { .. } = data.targets {
            let (mean, std) = data.target_stats()?;
            let std: Vec<f64> = std
                .iter()
                .map(|s| if *s > 0.0 { *s } else { 1.0 })
                .collect();
            self.model.set_target_stats(&mean, &std)?;
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(
            self.cfg.lr,
            self.progress.epoch,
            self.cfg.epochs,
            &self.cfg.schedule,
        )
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut shuffle_rng(self.cfg.seed, self.progress.epoch));
        idx
    }

    fn step(&mut self, data: &Samples, rows: &[usize]) -> Result<f64> {
        let x = data.batch_inputs(rows)?;
        let mut rng = collocation_rng(self.cfg.seed, self.progress.global_step);
        let lr = self.lr();
        let (loss, grads, updates) = {
            let model = &*self.model;
            let mut ctx = Ctx::new(model.store(), true);
            let out = model.forward(&mut ctx, &x, &mut rng)?;
            let loss = match &data.targets {
                Targets::Regression { values, dims } => {
                    let t: Vec<f64> = rows
                        .iter()
                        .flat_map(|&i| values[i * dims..(i + 1) * dims].to_vec())
                        .collect();
                    let t = Tensor::new(vec![rows.len(), *dims], model.normalize(&t))?;
                    ctx.tape.mse(out, Arc::new(t))?
                }
                Targets::Classes { labels, .. } => {
                    let l: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                    ctx.tape.softmax_cross_entropy(out, Arc::new(l))?
                }
            };
            let value = ctx.tape.value(loss).item();
            if !value.is_finite() {
                return Err(self.diverged(value, lr));
            }
            let grads = ctx.tape.backward(loss).map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::Numerical(format!("{m}; lr {lr}; epoch {}", self.progress.epoch))
                }
                e => e,
            })?;
            (value, grads.params(), ctx.take_updates())
        };
        self.last_grad_norms = grads
            .iter()
            .map(|(id, g)| {
                (
                    self.model.store().iter().nth(id.0).unwrap().1.name.clone(),
                    g.norm(),
                )
            })
            .collect();
        adam_step(
            self.model.store_mut(),
            &grads,
            &mut self.opt,
            &self.cfg.adam,
            lr,
        )?;
        apply_running_stats(self.model.store_mut(), &updates);
        self.progress.global_step += 1;
        self.progress.step += 1;
        self.progress.loss_sum += loss * rows.len() as f64;
        self.progress.loss_count += rows.len();
        Ok(loss)
    }

    fn diverged(&self, loss: f64, lr: f64) -> Error {
        let mut worst = self.last_grad_norms.clone();
        worst.sort_by(|a, b| b.1.total_cmp(&a.1));
        worst.truncate(5);
        Error::Numerical(format!(
            "training diverged: loss {loss} at epoch {} step {}; lr {lr}; largest gradient norms of the previous step {worst:?}",
            self.progress.epoch, self.progress.step
        ))
    }

    /// Trains until the configured epoch count or until `max_steps` more
    /// optimizer steps were taken; returns the metric rows of every epoch
    /// finished on the way.
    pub fn run(
        &mut self,
        train: &Samples,
        test: Option<&Samples>,
        max_steps: Option<u64>,
    ) -> Result<Vec<MetricRow>> {
        if train.is_empty() {
            return usage("training set is empty");
        }
        if train.sensors != *self.model.sensors() {
            return usage("training sensors differ from the model's");
        }
        let stop = max_steps.map(|s| self.progress.global_step + s);
        let bs = self.cfg.batch_size;
        let mut rows = Vec::new();
        while self.progress.epoch < self.cfg.epochs {
            let order = self.order(train.len());
            let batches: Vec<&[usize]> = order.chunks(bs).collect();
            while self.progress.step < batches.len() {
                if stop.is_some_and(|s| self.progress.global_step >= s) {
                    return Ok(rows);
                }
                self.step(train, batches[self.progress.step])?;
            }
            let e = self.progress.epoch;
            rows.push(MetricRow {
                epoch: e,
                split: "train".into(),
                metric: "loss".into(),
                value: self.progress.loss_sum / self.progress.loss_count as f64,
            });
            rows.push(MetricRow {
                epoch: e,
                split: "train".into(),
                metric: "lr".into(),
                value: self.lr(),
            });
            let last = e + 1 == self.cfg.epochs;
            if let Some(t) = test {
                if last || (e + 1).is_multiple_of(self.cfg.eval_every) {
                    rows.extend(evaluate(&*self.model, t, bs, self.cfg.seed)?.rows(e, "test"));
                }
            }
            self.progress = Progress {
                epoch: e + 1,
                global_step: self.progress.global_step,
                ..Progress::default()
            };
        }
        Ok(rows)
    }

    /// Parameters, optimizer moments and progress counters in one tensor file.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let p = &self.progress;
        let state = Tensor::vector(vec![
            self.opt.t as f64,
            p.epoch as f64,
            p.step as f64,
            p.global_step as f64,
            p.loss_sum,
            p.loss_count as f64,
        ]);
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (id, param) in self.model.store().iter() {
            entries.push((param.name.clone(), &param.value));
            if let (Some(m), Some(v)) = (&self.opt.m[id.0], &self.opt.v[id.0]) {
                entries.push((format!("adam.m/{}", param.name), m));
                entries.push((format!("adam.v/{}", param.name), v));
            }
        }
        entries.push(("trainer.state".into(), &state));
        write_tensors(w, &entries)
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let mut entries: std::collections::HashMap<String, Tensor> =
            read_tensors(r)?.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = entries
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "checkpoint entry {name} has shape {:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut opt = OptimState::new(self.model.store());
        let mut values = Vec::new();
        for (id, param) in self.model.store().iter() {
            values.push(take(&param.name, param.value.shape())?);
            if param.trainable {
                opt.m[id.0] = Some(take(
                    &format!("adam.m/{}", param.name),
                    param.value.shape(),
                )?);
                opt.v[id.0] = Some(take(
                    &format!("adam.v/{}", param.name),
                    param.value.shape(),
                )?);
            }
        }
        let s = take("trainer.state", &[6])?;
        let s = s.data();
        if !entries.is_empty() {
            return Err(Error::Format(
                "checkpoint has entries the model does not know".into(),
            ));
        }
        for (i, v) in values.into_iter().enumerate() {
            *self.model.store_mut().get_mut(ParamId(i)) = v;
        }
        opt.t = s[0] as u64;
        self.opt = opt;
        self.progress = Progress {
            epoch: s[1] as usize,
            step: s[2] as usize,
            global_step: s[3] as u64,
            loss_sum: s[4],
            loss_count: s[5] as usize,
        };
        Ok(())
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
        self.load(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, RingParams};
    use crate::layers::{build_model, ModelKind};
    use crate::tensor::{load_params, save_params};
    use crate::tomo::{build_sensors, Geometry};

    fn reference_adam(
        theta: &mut [f64],
        m: &mut [f64],
        v: &mut [f64],
        g: &[f64],
        t: i32,
        lr: f64,
        wd: f64,
    ) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps) + lr * wd * theta[i];
        }
    }

    fn one_param(x: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(x));
        (s, id)
    }

    #[test]
    fn adam_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = crate::layers::randn(&mut rng, 7, 1.0);
        let (mut store, id) = one_param(init.clone());
        let mut st = OptimState::new(&store);
        let cfg = AdamConfig {
            weight_decay: 0.01,
            ..AdamConfig::default()
        };
        let (mut theta, mut m, mut v) = (init, vec![0.0; 7], vec![0.0; 7]);
        for t in 1..=20 {
            let g = crate::layers::randn(&mut rng, 7, 1.0);
            adam_step(
                &mut store,
                &[(id, Tensor::vector(g.clone()))],
                &mut st,
                &cfg,
                0.05,
            )
            .unwrap();
            reference_adam(&mut theta, &mut m, &mut v, &g, t, 0.05, 0.01);
        }
        for (a, b) in store.get(id).data().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_small_cases() {
        let no_decay = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (mut store, id) = one_param(vec![0.7, -0.2]);
        let mut st = OptimState::new(&store);
        adam_step(
            &mut store,
            &[(id, Tensor::vector(vec![0.0, 0.0]))],
            &mut st,
            &no_decay,
            0.1,
        )
        .unwrap();
        assert_eq!(store.get(id).data(), &[0.7, -0.2]);

        let (mut store, id) = one_param(vec![0.0]);
        let mut st = OptimState::new(&store);
        adam_step(
            &mut store,
            &[(id, Tensor::vector(vec![1.0]))],
            &mut st,
            &no_decay,
            0.1,
        )
        .unwrap();
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-8);

        let decay = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let (mut store, id) = one_param(vec![2.0]);
        let mut st = OptimState::new(&store);
        adam_step(&mut store, &[], &mut st, &decay, 0.1).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn schedule_steps() {
        let s = Schedule::default();
        assert_eq!(lr_schedule(1.0, 0, 100, &s), 1.0);
        assert_eq!(lr_schedule(1.0, 59, 100, &s), 1.0);
        assert!((lr_schedule(1.0, 60, 100, &s) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(1.0, 85, 100, &s) - 0.01).abs() < 1e-15);
        assert_eq!(lr_schedule(0.3, 99, 100, &Schedule::Constant), 0.3);
    }

    fn tiny_setup(n: usize, seed: u64) -> (TrainConfig, Samples, Samples) {
        let geom = Geometry::uniform_parallel(3, 9, 1.3).unwrap();
        let train = build_dataset(n, &geom, 0.05, &RingParams::default(), seed).unwrap();
        let test = build_dataset(6, &geom, 0.05, &RingParams::default(), seed + 100).unwrap();
        let arch = ArchConfig {
            channels: 2,
            k: 4,
            lift_k: 6,
            basis: 3,
            hidden: 4,
            lift_points: 16,
            ..ArchConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 5,
            arch,
            ..TrainConfig::default()
        };
        (
            cfg,
            Samples::from_dataset(&train),
            Samples::from_dataset(&test),
        )
    }

    fn trainer(cfg: &TrainConfig, train: &Samples) -> Trainer {
        let model = build_model(&cfg.arch, &train.sensors, cfg.seed).unwrap();
        let mut t = Trainer::new(cfg.clone(), model).unwrap();
        t.fit_targets(train).unwrap();
        t
    }

    fn csv(rows: &[MetricRow]) -> Vec<u8> {
        let mut out = Vec::new();
        write_metrics_csv(&mut out, rows).unwrap();
        out
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (cfg, train, _) = tiny_setup(8, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..cfg
        };
        let mut t = trainer(&cfg, &train);
        let before: Vec<Tensor> = t
            .model
            .store()
            .iter()
            .filter(|p| p.1.trainable)
            .map(|p| p.1.value.clone())
            .collect();
        t.run(&train, None, None).unwrap();
        let after: Vec<Tensor> = t
            .model
            .store()
            .iter()
            .filter(|p| p.1.trainable)
            .map(|p| p.1.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let (cfg, train, test) = tiny_setup(10, 2);
        let mut a = trainer(&cfg, &train);
        let rows_a = a.run(&train, Some(&test), None).unwrap();
        let mut b = trainer(&cfg, &train);
        let rows_b = b.run(&train, Some(&test), None).unwrap();
        assert_eq!(csv(&rows_a), csv(&rows_b));
        assert_eq!(rows_a.len(), 3 * 5);

        // stop mid-epoch, checkpoint, resume in a fresh trainer
        let mut c = trainer(&cfg, &train);
        let mut rows_c = c.run(&train, Some(&test), Some(4)).unwrap();
        assert_eq!(c.progress.step, 1);
        let mut bytes = Vec::new();
        c.save(&mut bytes).unwrap();
        let mut d = trainer(&cfg, &train);
        d.load(&bytes[..]).unwrap();
        assert_eq!(d.opt, c.opt);
        assert_eq!(d.model.store(), c.model.store());
        rows_c.extend(d.run(&train, Some(&test), None).unwrap());
        assert_eq!(csv(&rows_a), csv(&rows_c));
        assert_eq!(d.model.store(), a.model.store());

        bytes[4] = 9;
        assert!(matches!(d.load(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn overfits_one_sample() {
        let (cfg, train, _) = tiny_setup(1, 3);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            lr: 1e-2,
            schedule: Schedule::Constant,
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            arch: ArchConfig {
                kind: ModelKind::Mlp,
                mlp_hidden: 8,
                ..cfg.arch
            },
            ..cfg
        };
        let mut t = trainer(&cfg, &train);
        // a single target has zero spread; keep unit scale and an offset
        t.model.set_target_stats(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let rows = t.run(&train, None, None).unwrap();
        let losses: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == "loss")
            .map(|r| r.value)
            .collect();
        assert!(
            losses[59] < 1e-2 * losses[0],
            "{} → {}",
            losses[0],
            losses[59]
        );
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] * 1.05);
        }
    }

    #[test]
    fn eval_draws_average_collocation() {
        let (cfg, train, test) = tiny_setup(4, 4);
        let t = trainer(&cfg, &train);
        let mut params = Vec::new();
        save_params(&mut params, t.model.store()).unwrap();
        let with_draws = |draws: usize| {
            let arch = ArchConfig {
                eval_draws: draws,
                ..cfg.arch.clone()
            };
            let mut m = build_model(&arch, &train.sensors, cfg.seed).unwrap();
            load_params(&params[..], m.store_mut()).unwrap();
            evaluate(&*m, &test, 4, 1).unwrap()
        };
        let one = with_draws(1);
        assert_eq!(one, evaluate(&*t.model, &test, 4, 1).unwrap());
        let four = with_draws(4);
        assert_ne!(one, four);
        assert_eq!(four, with_draws(4));
    }

    #[test]
    fn evaluation_properties() {
        let (cfg, train, test) = tiny_setup(4, 4);
        let t = trainer(&cfg, &train);
        let m = evaluate(&*t.model, &test, 4, 1).unwrap();
        let mut rev = test.clone();
        let n = rev.len();
        let order: Vec<usize> = (0..n).rev().collect();
        let ns = test.sensors.len();
        rev.inputs = order
            .iter()
            .flat_map(|&i| test.inputs[i * ns..(i + 1) * ns].to_vec())
            .collect();
        if let (Targets::Regression { values, .. }, Targets::Regression { values: src, .. }) =
            (&mut rev.targets, &test.targets)
        {
            *values = order
                .iter()
                .flat_map(|&i| [src[2 * i], src[2 * i + 1]])
                .collect();
        }
        assert_eq!(evaluate(&*t.model, &rev, 3, 1).unwrap(), m);

        let (mean, std) = test.target_stats().unwrap();
        let base = mean_predictor_mse(&mean, &test).unwrap();
        assert!((base - (std[0].powi(2) + std[1].powi(2)) / 2.0).abs() < 1e-15);

        let Targets::Regression { values, .. } = &test.targets else {
            panic!()
        };
        let perfect: Vec<f64> = values.clone();
        let sq: f64 = perfect
            .iter()
            .zip(values)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert_eq!(sq, 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let (cfg, mut train, _) = tiny_setup(4, 6);
        train.inputs[3] = f64::NAN;
        let mut t = trainer(&cfg, &train);
        let err = t.run(&train, None, None).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn classification_path() {
        let sensors = build_sensors(&Geometry::uniform_parallel(4, 7, 1.2).unwrap());
        let layout = crate::tomo::GridLayout::square(8, 1.0).unwrap();
        let imgs: Vec<RasterImage> = (0..6)
            .map(|i| {
                RasterImage::rasterize(layout, 1, |u| {
                    if (u.x > 0.0) == (i % 2 == 0) {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let labels: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
        let data = Samples::from_rasters(&imgs, &labels, 2, &sensors).unwrap();
        let arch = ArchConfig {
            kind: ModelKind::Mlp,
            head: HeadKind::Classification,
            mlp_hidden: 6,
            ..ArchConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 3,
            lr: 1e-2,
            loss: LossKind::CrossEntropy,
            arch,
            ..TrainConfig::default()
        };
        let mut t = trainer(&cfg, &data);
        t.run(&data, None, None).unwrap();
        let EvalMetrics::Classification { accuracy, .. } =
            evaluate(&*t.model, &data, 6, 0).unwrap()
        else {
            panic!()
        };
        assert_eq!(accuracy, 1.0);
        assert!(TrainConfig {
            loss: LossKind::Mse,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
