//! Minibatch training with Adam, the Noam schedule, per-epoch checkpoints
//! and checkpoint averaging.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{config_err, shape_err, Error, Result};
use crate::frame_encoder::stack_features;
use crate::kv::{render, KvMap};
use crate::losses::{total_loss, LossFlags};
use crate::model::{average_checkpoints, save_checkpoint, DiaPer};
use crate::nn::Fwd;
use crate::numerics::{Tape, Tensor};
use crate::params::ModelParams;
use crate::simdata::{DatasetEntry, ReferenceLabels};

/// `scale · d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// From scratch with the Noam schedule.
    Train,
    /// Continues from existing parameters with a fresh Noam schedule.
    Adapt,
    /// Continues from existing parameters at the fixed `ft_lr`.
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Crop length in model frames (after subsampling).
    pub crop_frames: usize,
    pub epochs: usize,
    /// Updates per epoch; 0 derives it from the data so that one epoch
    /// visits about as many frames as the dataset holds.
    pub steps_per_epoch: usize,
    pub lr_scale: f64,
    pub ft_lr: f64,
    pub seed: u64,
    pub subsample: usize,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Number of most recent epoch checkpoints averaged at the end; 0 skips.
    pub average_last: usize,
    pub normalize_by_speakers: bool,
    pub intermediate_encoder: bool,
    pub intermediate_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup_steps: 200_000,
            crop_frames: 600,
            epochs: 1,
            steps_per_epoch: 0,
            lr_scale: 1.0,
            ft_lr: 1e-5,
            seed: 0,
            subsample: 10,
            grad_clip: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            average_last: 10,
            normalize_by_speakers: true,
            intermediate_encoder: true,
            intermediate_decoder: true,
        }
    }
}

impl TrainConfig {
    /// Small-machine profile: warm-up 1000 updates, batches of 8.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 8,
            warmup_steps: 1000,
            ..Self::default()
        }
    }

    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            normalize_by_speakers: self.normalize_by_speakers,
            intermediate_encoder: self.intermediate_encoder,
            intermediate_decoder: self.intermediate_decoder,
        }
    }

    pub fn to_kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("crop_frames", self.crop_frames.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("ft_lr", self.ft_lr.to_string()),
            ("seed", self.seed.to_string()),
            ("subsample", self.subsample.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("average_last", self.average_last.to_string()),
            ("normalize_by_speakers", self.normalize_by_speakers.to_string()),
            ("intermediate_encoder", self.intermediate_encoder.to_string()),
            ("intermediate_decoder", self.intermediate_decoder.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        render(&self.to_kv_pairs())
    }

    /// Applies the training keys present in `kv`. `seed` is read without
    /// being consumed so that a model configuration in the same file sees
    /// it too.
    pub fn update_from(&mut self, kv: &mut KvMap) -> Result<()> {
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("warmup_steps", &mut self.warmup_steps)?;
        kv.update("crop_frames", &mut self.crop_frames)?;
        kv.update("epochs", &mut self.epochs)?;
        kv.update("steps_per_epoch", &mut self.steps_per_epoch)?;
        kv.update("lr_scale", &mut self.lr_scale)?;
        kv.update("ft_lr", &mut self.ft_lr)?;
        if let Some(seed) = kv.peek("seed")? {
            self.seed = seed;
        }
        kv.update("subsample", &mut self.subsample)?;
        kv.update("grad_clip", &mut self.grad_clip)?;
        kv.update("adam_beta1", &mut self.adam_beta1)?;
        kv.update("adam_beta2", &mut self.adam_beta2)?;
        kv.update("adam_eps", &mut self.adam_eps)?;
        kv.update("average_last", &mut self.average_last)?;
        kv.update("normalize_by_speakers", &mut self.normalize_by_speakers)?;
        kv.update("intermediate_encoder", &mut self.intermediate_encoder)?;
        kv.update("intermediate_decoder", &mut self.intermediate_decoder)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop_frames == 0 || self.subsample == 0 {
            return Err(config_err!("batch_size, crop_frames and subsample must be positive"));
        }
        if !(self.lr_scale >= 0.0 && self.ft_lr >= 0.0 && self.grad_clip > 0.0) {
            return Err(config_err!("learning rates must be non-negative and grad_clip positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(config_err!("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err!(
                "{} parameters and {} gradients for {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(shape_err!("parameter {i}: gradient shape {:?}", grads[i].shape()));
            }
            let (m, v, p, g) = (self.m[i].data_mut(), self.v[i].data_mut(), params[i].data_mut(), grads[i].data());
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// A recording at model rate: stacked features and matching labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    /// `T × feature_dim`
    pub features: Tensor,
    pub labels: ReferenceLabels,
}

impl TrainSample {
    pub fn from_entry(entry: &DatasetEntry, subsample: usize) -> Result<Self> {
        Ok(Self {
            id: entry.id.clone(),
            features: stack_features(&entry.features, subsample)?,
            labels: entry.labels.subsample(subsample)?,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    /// Frames `start..start + len`; past the end features are zero and
    /// labels silent. Speakers silent throughout the window are dropped.
    pub fn crop(&self, start: usize, len: usize) -> Result<(Tensor, Tensor)> {
        let f = self.features.cols();
        let mut x = vec![0.0; len * f];
        let avail = self.num_frames().saturating_sub(start).min(len);
        x[..avail * f].copy_from_slice(&self.features.data()[start * f..(start + avail) * f]);
        Ok((Tensor::new(vec![len, f], x)?, self.labels.crop(start, len)?.activities))
    }
}

/// Mean losses over one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub diar: f64,
    pub exist: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,total,diar,exist,entropy";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.lr, self.total, self.diar, self.exist, self.entropy
        )
    }
}

struct SampleResult {
    grads: Vec<Tensor>,
    total: f64,
    diar: f64,
    exist: f64,
    entropy: f64,
}

/// Forward and backward for one sample on its own tape.
fn sample_gradients(
    model: &DiaPer,
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    flags: LossFlags,
    dropout_seed: u64,
) -> Result<SampleResult> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let f = Fwd::train(&tape, &vars, model.config().dropout, dropout_seed);
    let out = model.forward(&f, &tape.constant(x))?;
    let loss = total_loss(y, &out, flags)?;
    tape.backward(&loss.total)?;
    Ok(SampleResult {
        grads: params.grads(&tape, &vars),
        total: loss.total.value().item(),
        diar: loss.diar(),
        exist: loss.exist(),
        entropy: loss.entropy,
    })
}

/// Mean gradients and losses of a batch. Samples may be processed in
/// parallel; the reduction runs in batch order so results do not depend on
/// the number of threads.
pub fn batch_gradients(
    model: &DiaPer,
    params: &ModelParams,
    batch: &[(Tensor, Tensor)],
    flags: LossFlags,
    dropout_seeds: &[u64],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(Vec<Tensor>, [f64; 4])> {
    if batch.is_empty() || dropout_seeds.len() != batch.len() {
        return Err(config_err!("batch of {} with {} seeds", batch.len(), dropout_seeds.len()));
    }
    let run = |i: usize| sample_gradients(model, params, &batch[i].0, &batch[i].1, flags, dropout_seeds[i]);
    let results: Vec<SampleResult> = match pool {
        Some(pool) => pool.install(|| (0..batch.len()).into_par_iter().map(run).collect::<Result<_>>())?,
        None => (0..batch.len()).map(run).collect::<Result<_>>()?,
    };
    let k = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut losses = [0.0; 4];
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        for (l, v) in losses.iter_mut().zip([r.total, r.diar, r.exist, r.entropy]) {
            *l += v;
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x *= k);
    }
    losses.iter_mut().for_each(|l| *l *= k);
    Ok((grads, losses))
}

/// Optimizer, schedule and sampling state for one run.
pub struct Trainer<'m> {
    model: &'m DiaPer,
    cfg: TrainConfig,
    mode: Mode,
    adam: Adam,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

impl<'m> Trainer<'m> {
    /// `jobs > 1` computes the samples of a batch on that many threads.
    pub fn new(model: &'m DiaPer, params: &ModelParams, cfg: TrainConfig, mode: Mode, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        params.check_layout(model.layout())?;
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| config_err!("cannot start {jobs} worker threads: {e}"))?,
            )
        } else {
            None
        };
        Ok(Self {
            model,
            adam: Adam::new(params.tensors(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            mode,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step
    }

    /// Learning rate for the (1-based) update `step`.
    pub fn lr(&self, step: u64) -> f64 {
        match self.mode {
            Mode::Finetune => self.cfg.ft_lr,
            Mode::Train | Mode::Adapt => noam_lr(step, self.model.config().model_dim(), self.cfg.warmup_steps, self.cfg.lr_scale),
        }
    }

    /// Random recordings, each cropped at a random offset.
    pub fn sample_batch(&mut self, data: &[TrainSample]) -> Result<Vec<(Tensor, Tensor)>> {
        if data.is_empty() {
            return Err(config_err!("no training recordings"));
        }
        let len = self.cfg.crop_frames;
        (0..self.cfg.batch_size)
            .map(|_| {
                let s = &data[self.rng.random_range(0..data.len())];
                let start = self.rng.random_range(0..=s.num_frames().saturating_sub(len));
                s.crop(start, len)
            })
            .collect()
    }

    /// One clipped Adam update on `batch`.
    pub fn step(&mut self, params: &mut ModelParams, batch: &[(Tensor, Tensor)]) -> Result<StepRecord> {
        let seeds: Vec<u64> = (0..batch.len()).map(|_| self.rng.random()).collect();
        let (mut grads, [total, diar, exist, entropy]) =
            batch_gradients(self.model, params, batch, self.cfg.loss_flags(), &seeds, self.pool.as_ref())?;
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let step = self.adam.step + 1;
        let lr = self.lr(step);
        self.adam.update(params.tensors_mut(), &grads, lr)?;
        Ok(StepRecord {
            step,
            lr,
            total,
            diar,
            exist,
            entropy,
            grad_norm,
        })
    }

    pub fn steps_per_epoch(&self, data: &[TrainSample]) -> usize {
        if self.cfg.steps_per_epoch > 0 {
            return self.cfg.steps_per_epoch;
        }
        let frames: usize = data.iter().map(TrainSample::num_frames).sum();
        frames.div_ceil(self.cfg.crop_frames * self.cfg.batch_size).max(1)
    }
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub averaged: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:04}.dpck"))
}

pub const AVERAGED_CHECKPOINT: &str = "averaged.dpck";
pub const METRICS_FILE: &str = "metrics.csv";

fn append_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.epochs` epochs from `params`. With `out_dir`, writes one
/// checkpoint per epoch, appends to `metrics.csv` and averages the last
/// `average_last` checkpoints into `averaged.dpck`.
pub fn train(
    model: &DiaPer,
    mut params: ModelParams,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mode: Mode,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(config_err!("no training recordings"));
    }
    let mut trainer = Trainer::new(model, &params, cfg.clone(), mode, jobs)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let steps = trainer.steps_per_epoch(data);
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = trainer.sample_batch(data)?;
            records.push(trainer.step(&mut params, &batch)?);
        }
        let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len() as f64;
        log::info!("epoch {epoch}: {steps} updates, mean loss {mean:.4}");
        if let Some(dir) = out_dir {
            append_metrics(&dir.join(METRICS_FILE), &records)?;
            let path = checkpoint_path(dir, epoch);
            save_checkpoint(&path, model.config(), &params)?;
            checkpoints.push(path);
        }
        history.extend(records);
    }
    let averaged = match out_dir {
        Some(dir) if cfg.average_last > 0 && !checkpoints.is_empty() => {
            let recent = &checkpoints[checkpoints.len().saturating_sub(cfg.average_last)..];
            let avg = average_checkpoints(recent)?;
            let path = dir.join(AVERAGED_CHECKPOINT);
            save_checkpoint(&path, &avg.config, &avg.params)?;
            Some(path)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        params,
        history,
        checkpoints,
        averaged,
    })
}
