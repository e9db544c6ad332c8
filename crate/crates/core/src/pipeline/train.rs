//! Deterministic training loop: AdamW, global-norm clipping, step decay,
//! per-iteration metrics and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{open_dataset, DataSource, Dataset, Sample};
use super::{Detector, PipelineError};
use crate::decoder::{Checkpoint, CheckpointManifest, DecoderConfig};
use crate::matching_loss::{set_criterion, LossBreakdown, LossWeights, StageLoss};
use crate::numerics::{Graph, Params, Scalar, Tensor};

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Iterations of linear warmup from `lr / warmup_iters` up to `lr`.
    #[serde(default)]
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; non-positive disables clipping.
    pub clip_norm: f64,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub image_size: usize,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub data: DataSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale reference schedule: 2000 iterations of batch 8 at
    /// 2.5e-5, divided by ten at iteration 1600.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 8,
            lr: 2.5e-5,
            lr_decay_at: vec![1600],
            lr_decay_factor: 0.1,
            warmup_iters: 0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            checkpoint_every: 0,
            image_size: super::synth::DEFAULT_IMAGE_SIZE,
            decoder: DecoderConfig::desk(),
            loss: LossWeights::default(),
            data: DataSource::Synthetic,
        }
    }

    /// Same shape of schedule sized for a single CPU core: batch 2 with a
    /// larger step so 2000 iterations converge.
    pub fn single_core() -> Self {
        Self {
            batch_size: 2,
            lr: 8e-4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.decoder.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if let Some(&d) = self.lr_decay_at.iter().find(|&&d| d >= self.iterations) {
            return bad(format!("lr decay point {d} is not below iterations {}", self.iterations));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.image_size == 0 || self.image_size % super::MAX_STRIDE != 0 {
            return bad(format!("image_size must be a positive multiple of {}", super::MAX_STRIDE));
        }
        let max_objects = super::synth::MAX_OBJECTS;
        if self.data == DataSource::Synthetic && self.decoder.num_proposals < max_objects {
            return bad(format!(
                "num_proposals {} is below the {max_objects} objects a synthetic scene may hold",
                self.decoder.num_proposals
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let decays = self.lr_decay_at.iter().filter(|&&d| iteration >= d).count();
        let warmup = if iteration < self.warmup_iters {
            (iteration + 1) as f64 / self.warmup_iters as f64
        } else {
            1.0
        };
        warmup * self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update; parameters without a gradient still decay.
    pub fn update(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 / (1.0 - cfg.beta1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - cfg.beta2.powi(t)));
        let (eps, step) = (T::lit(cfg.adam_eps), T::lit(lr));
        let decay = T::one() - T::lit(lr * cfg.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            match &grads[i] {
                Some(g) => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let (nb1, nb2) = (T::one() - b1, T::one() - b2);
                    for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mj = b1 * *mj + nb1 * gj;
                        *vj = b2 * *vj + nb2 * gj * gj;
                        let update = (*mj * c1) / ((*vj * c2).sqrt() + eps);
                        *pj = *pj * decay - step * update;
                    }
                }
                None => p.iter_mut().for_each(|x| *x = *x * decay),
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub stages: Vec<StageLoss>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn csv_header(n_stages: usize) -> Vec<String> {
        let mut h = vec!["iteration".to_string(), "lr".into(), "total_loss".into()];
        for t in 0..n_stages {
            for part in ["cls", "l1", "giou"] {
                h.push(format!("stage{t}_{part}"));
            }
        }
        h.push("wall_seconds".into());
        h
    }

    /// Fields in header order; floats use the shortest round-trip form.
    pub fn csv_record(&self) -> Vec<String> {
        let mut r = vec![self.iteration.to_string(), self.lr.to_string(), self.total_loss.to_string()];
        for s in &self.stages {
            r.extend([s.cls.to_string(), s.l1.to_string(), s.giou.to_string()]);
        }
        r.push(format!("{:.3}", self.wall_seconds));
        r
    }
}

/// Loss and averaged gradients of one batch.
pub struct BatchGradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
    pub breakdown: LossBreakdown,
}

/// Forward, loss and backward over `samples`, reduced in sample order so
/// the result does not depend on thread scheduling.
pub fn batch_gradients<T: Scalar>(
    model: &Detector,
    params: &Params<T>,
    samples: &[Sample],
    loss: &LossWeights,
) -> Result<BatchGradients<T>, PipelineError> {
    let n_stages = model.cfg.n_stages;
    let per_sample: Vec<Result<(Vec<Option<Tensor<T>>>, LossBreakdown), PipelineError>> = samples
        .par_iter()
        .map(|s| {
            let g = Graph::new();
            let outputs = model.forward(&g, params, &s.image.cast::<T>(), n_stages)?;
            let (total, breakdown, _) =
                set_criterion(&outputs, &s.target, loss).map_err(|e| PipelineError::Dataset(e.to_string()))?;
            Ok((g.backward(total).into_dense(params.len()), breakdown))
        })
        .collect();
    let inv = 1.0 / samples.len() as f64;
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; params.len()];
    let mut breakdown = LossBreakdown::default();
    for r in per_sample {
        let (dense, b) = r?;
        breakdown.accumulate(&b);
        for (acc, g) in grads.iter_mut().zip(dense) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    let s = T::lit(inv);
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    Ok(BatchGradients {
        grads,
        breakdown: breakdown.scaled(inv),
    })
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Resumable training state.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Detector,
    pub params: Params<T>,
    pub optimizer: AdamW<T>,
    /// Number of completed iterations.
    pub iteration: usize,
    dataset: Box<dyn Dataset>,
    started: Instant,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let dataset = open_dataset(&cfg.data, cfg.seed, cfg.image_size)?;
        if dataset.is_empty() {
            return Err(PipelineError::Dataset("training set is empty".into()));
        }
        if dataset.num_classes() != cfg.decoder.num_classes {
            return Err(PipelineError::Config(format!(
                "num_classes is {} but the dataset has {} classes",
                cfg.decoder.num_classes,
                dataset.num_classes()
            )));
        }
        let (model, params) = Detector::build::<T>(&cfg.decoder, cfg.seed)?;
        let optimizer = AdamW::new(&params);
        Ok(Self {
            cfg,
            model,
            params,
            optimizer,
            iteration: 0,
            dataset,
            started: Instant::now(),
        })
    }

    /// Continues the run stored in `checkpoint`, whose configuration must
    /// equal `cfg` except for the iteration budget.
    pub fn resume(cfg: TrainConfig, checkpoint: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = checkpoint.as_ref();
        let ckpt = Checkpoint::<T>::load(path)?;
        let stored: TrainConfig = serde_json::from_value(ckpt.manifest.config.clone())
            .map_err(|e| PipelineError::Config(format!("checkpoint {}: {e}", path.display())))?;
        let comparable = TrainConfig {
            iterations: cfg.iterations,
            ..stored
        };
        if comparable != cfg {
            return Err(PipelineError::Config(format!(
                "checkpoint {} was written by a different configuration",
                path.display()
            )));
        }
        let mut trainer = Self::new(cfg)?;
        ckpt.restore_params(&mut trainer.params)?;
        let missing = |n: &str| PipelineError::Config(format!("checkpoint lacks optimizer tensor `{n}`"));
        for (id, name, _) in trainer.params.iter() {
            let (m, v) = (format!("{ADAM_M}{name}"), format!("{ADAM_V}{name}"));
            trainer.optimizer.m[id.index()] = ckpt.get(&m).ok_or_else(|| missing(&m))?.clone();
            trainer.optimizer.v[id.index()] = ckpt.get(&v).ok_or_else(|| missing(&v))?.clone();
        }
        trainer.optimizer.step = ckpt.get(ADAM_STEP).ok_or_else(|| missing(ADAM_STEP))?.data()[0].as_f64() as u64;
        trainer.iteration = ckpt.manifest.iteration as usize;
        Ok(trainer)
    }

    pub fn dataset(&self) -> &dyn Dataset {
        self.dataset.as_ref()
    }

    /// Samples of iteration `i`; a pure function of the seed and `i`.
    pub fn batch(&self, i: usize) -> Result<Vec<Sample>, PipelineError> {
        let b = self.cfg.batch_size as u64;
        (0..b).map(|j| self.dataset.get(i as u64 * b + j)).collect()
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<MetricsRow, PipelineError> {
        let i = self.iteration;
        let samples = self.batch(i)?;
        let BatchGradients { mut grads, breakdown } =
            batch_gradients(&self.model, &self.params, &samples, &self.cfg.loss)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        if !breakdown.total.is_finite() || !grad_norm.is_finite() {
            return Err(PipelineError::NonFinite {
                iteration: i,
                breakdown: format!("{breakdown} grad_norm={grad_norm}"),
            });
        }
        let lr = self.cfg.lr_at(i);
        self.optimizer.update(&mut self.params, &grads, lr, &self.cfg);
        self.iteration += 1;
        Ok(MetricsRow {
            iteration: i,
            lr,
            total_loss: breakdown.total,
            stages: breakdown.stages,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut extra = Vec::with_capacity(2 * self.params.len() + 1);
        for (id, name, _) in self.params.iter() {
            extra.push((format!("{ADAM_M}{name}"), self.optimizer.m[id.index()].clone()));
        }
        for (id, name, _) in self.params.iter() {
            extra.push((format!("{ADAM_V}{name}"), self.optimizer.v[id.index()].clone()));
        }
        extra.push((ADAM_STEP.to_string(), Tensor::scalar(T::lit(self.optimizer.step as f64))));
        Checkpoint::from_params(
            &self.params,
            extra,
            self.cfg.seed,
            self.cfg.decoder.sharing.name(),
            self.iteration as u64,
            serde_json::to_value(&self.cfg).expect("config serializes"),
        )
    }

    /// Trains until `cfg.iterations`, appending to `out_dir/metrics.csv` and
    /// writing checkpoints there when a directory is given. `on_step` sees
    /// every completed iteration.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&Self, &MetricsRow) -> Result<(), PipelineError>,
    ) -> Result<Vec<MetricsRow>, PipelineError> {
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir, self.cfg.decoder.n_stages, self.iteration > 0)?),
            None => None,
        };
        let mut rows = Vec::new();
        while self.iteration < self.cfg.iterations {
            let row = self.step()?;
            if let Some(log) = log.as_mut() {
                log.append(&row)?;
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iteration % every == 0 && self.iteration < self.cfg.iterations {
                    self.save(&checkpoint_path(dir, self.iteration))?;
                }
            }
            on_step(self, &row)?;
            rows.push(row);
        }
        if let Some(dir) = out_dir {
            self.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(rows)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        self.checkpoint().save(path).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.ckpt"))
}

/// Appending CSV writer for [`MetricsRow`]s.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `dir/metrics.csv`, truncating it unless `append` is set.
    pub fn open(dir: &Path, n_stages: usize, append: bool) -> Result<Self, PipelineError> {
        let path = dir.join(METRICS_FILE);
        let io = |source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let existed = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(io)?;
        let mut writer = csv::Writer::from_writer(file);
        if !existed {
            writer.write_record(MetricsRow::csv_header(n_stages)).map_err(|e| csv_err(&path, e))?;
        }
        Ok(Self { writer, path })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<(), PipelineError> {
        self.writer.write_record(row.csv_record()).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|source| PipelineError::Io {
            path: self.path.display().to_string(),
            source,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Writes rows to a fresh CSV at `path`.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Model, parameters and configuration restored from a checkpoint.
pub struct TrainedModel<T> {
    pub cfg: TrainConfig,
    pub model: Detector,
    pub params: Params<T>,
    pub iteration: usize,
}

/// Loads a training checkpoint for inference.
pub fn load_trained<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainedModel<T>, PipelineError> {
    let path = path.as_ref();
    let ckpt = Checkpoint::<T>::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(ckpt.manifest.config.clone())
        .map_err(|e| PipelineError::Config(format!("checkpoint {}: {e}", path.display())))?;
    let (model, mut params) = Detector::build::<T>(&cfg.decoder, cfg.seed)?;
    ckpt.restore_params(&mut params)?;
    Ok(TrainedModel {
        cfg,
        model,
        params,
        iteration: ckpt.manifest.iteration as usize,
    })
}

/// Storage precision recorded in a checkpoint.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<crate::numerics::DType, PipelineError> {
    let m = CheckpointManifest::peek(path)?;
    crate::numerics::DType::parse(&m.dtype).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Writes the metrics rows to any writer (used by tests and tools).
pub fn write_metrics(w: impl Write, n_stages: usize, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(MetricsRow::csv_header(n_stages))?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}
