//! Training loop. Each example runs on its own tape; a small loss tape joins
//! the batch, and its gradient with respect to the stacked interests seeds
//! every example tape's backward pass. Gradients are summed in example order,
//! so results do not depend on thread count.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, Stamps, TrainState};
use crate::config::RunConfig;
use crate::data::{training_examples, BatchStream, ExampleRef, UserTrace};
use crate::embedding::InteractionRecord;
use crate::error::{Error, Result};
use crate::loss::{batch_loss, in_batch_accuracy, BatchLoss, FrequencyEstimator, LossConfig};
use crate::model::{Model, Network};
use crate::optim::Adam;
use crate::params::Gradients;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One example: chronological history and the item that followed it.
pub type Example<'a> = (&'a [InteractionRecord], usize);

/// The whole batch objective on a single tape: every forward pass, the
/// in-batch logits and the loss.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: &Network,
    batch: &[Example<'_>],
    q: Option<&[f64]>,
    alpha: f64,
) -> Result<BatchLoss> {
    let us = batch
        .iter()
        .map(|(h, _)| net.forward(tape, h))
        .collect::<Result<Vec<Var>>>()?;
    let u = tape.concat_rows(&us)?;
    let items: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
    let x = net.candidates(tape, &items)?;
    batch_loss(tape, u, x, net.config().interests, &items, q, alpha)
}

/// Loss, logits, allowed mask and per-parameter gradients of one batch,
/// computed with one tape per example.
pub struct BatchGradients<T: Scalar> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub allowed: Vec<bool>,
    pub grads: Vec<Gradients<T>>,
}

pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[Example<'_>],
    q: Option<&[f64]>,
    alpha: f64,
) -> Result<BatchGradients<T>> {
    let net = &model.net;
    let params = &model.params;
    let k = net.config().interests;
    let d = net.config().dim;

    let mut tapes = batch
        .par_iter()
        .map(|(h, _)| {
            let mut tape = Tape::new(params);
            let u = net.forward(&mut tape, h)?;
            Ok((tape, u))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stacked = Vec::with_capacity(batch.len() * k * d);
    for (tape, u) in &tapes {
        stacked.extend_from_slice(tape.value(*u).data());
    }
    let mut head = Tape::new(params);
    let u = head.leaf(Tensor::new(vec![batch.len() * k, d], stacked)?.with_requires_grad(true));
    let items: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
    let x = net.candidates(&mut head, &items)?;
    let out = batch_loss(&mut head, u, x, k, &items, q, alpha)?;
    head.backward(out.loss)?;
    let du = head.grad(u);
    let loss = head.value(out.loss).item();
    let logits = head.value(out.logits).clone();

    let rows = k * d;
    let example_grads = tapes
        .par_iter_mut()
        .enumerate()
        .map(|(i, (tape, u))| {
            tape.backward_with(*u, &du[i * rows..(i + 1) * rows])?;
            Ok(std::mem::replace(tape, Tape::new(params)).into_gradients())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Vec::with_capacity(batch.len() + 1);
    grads.push(head.into_gradients());
    grads.extend(example_grads);
    Ok(BatchGradients {
        loss,
        logits,
        allowed: out.allowed,
        grads,
    })
}

/// Model, optimizer and popularity estimate advancing one batch at a time.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub estimator: FrequencyEstimator,
    pub step: u64,
    loss_cfg: LossConfig,
    examples: Vec<ExampleRef>,
    stream: BatchStream,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, traces: &[UserTrace]) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(cfg.optim, &model.params);
        let estimator = FrequencyEstimator::new(cfg.loss.estimator_decay, cfg.loss.estimator_floor)?;
        Self::assemble(cfg, traces, model, TrainState { step: 0, adam, estimator })
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(cfg: &RunConfig, traces: &[UserTrace], model: Model<f32>, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(Error::config("checkpoint model config differs from the run config"));
        }
        Self::assemble(cfg, traces, model, state)
    }

    fn assemble(cfg: &RunConfig, traces: &[UserTrace], model: Model<f32>, state: TrainState) -> Result<Self> {
        let examples = training_examples(traces, cfg.train.min_history);
        let stream = BatchStream::new(examples.len(), cfg.train.batch_size, cfg.seed)?;
        Ok(Trainer {
            model,
            adam: state.adam,
            estimator: state.estimator,
            step: state.step,
            loss_cfg: cfg.loss.clone(),
            examples,
            stream,
        })
    }

    pub fn example_count(&self) -> usize {
        self.examples.len()
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            adam: self.adam.clone(),
            estimator: self.estimator.clone(),
        }
    }

    /// The examples of the next step, resolved against `traces`.
    pub fn next_batch<'a>(&mut self, traces: &'a [UserTrace]) -> Vec<Example<'a>> {
        let max = self.model.config().max_seq_len;
        self.stream
            .batch(self.step)
            .into_iter()
            .map(|i| self.examples[i].resolve(traces, max))
            .collect()
    }

    /// One optimizer update. A non-finite loss or gradient aborts with the
    /// batch position and parameter norms.
    pub fn step(&mut self, traces: &[UserTrace]) -> Result<StepMetrics> {
        let batch = self.next_batch(traces);
        let items: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
        self.estimator.update(&items);
        let q: Option<Vec<f64>> = self
            .loss_cfg
            .logq
            .then(|| items.iter().map(|&x| self.estimator.estimate(x)).collect());

        let out = batch_gradients(&self.model, &batch, q.as_deref(), self.loss_cfg.smoothing)?;
        let loss = out.loss.as_f64();
        self.model.params.zero_grad();
        for g in &out.grads {
            self.model.params.accumulate(g);
        }
        let grads_finite = self.model.params.iter().all(|(_, _, t)| t.grad().iter().all(|g| g.is_finite()));
        if !loss.is_finite() || !grads_finite {
            let (epoch, b) = self.stream.position(self.step);
            let norms = self
                .model
                .params
                .norms()
                .into_iter()
                .map(|(n, v)| format!("{n}={v:.4e}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {} (epoch {epoch}, batch {b}); parameter norms: {norms}",
                self.step + 1
            )));
        }
        self.adam.step(&mut self.model.params);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            accuracy: in_batch_accuracy(&out.logits, &out.allowed),
        })
    }
}

/// Appends metrics as newline-delimited JSON.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "final";

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step-{step:06}"))
}

/// Trains until `cfg.train.steps`, writing metrics and checkpoints under
/// `run_dir` when given.
pub fn run(
    cfg: &RunConfig,
    traces: &[UserTrace],
    run_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let stamps_config = cfg.hash();
    let stamps_data = cfg.data_hash();
    let stamps = Stamps {
        config_hash: &stamps_config,
        data_hash: &stamps_data,
    };
    let mut trainer = match resume_from {
        Some(dir) => {
            let (manifest, model, state) = checkpoint::load(dir)?;
            checkpoint::check_stamps(&manifest, &stamps)?;
            let state = state.ok_or_else(|| Error::data("checkpoint has no optimizer state to resume"))?;
            Trainer::resume(cfg, traces, model, state)?
        }
        None => Trainer::new(cfg, traces)?,
    };
    let mut writer = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::open(&dir.join(METRICS_FILE), resume_from.is_some())?)
        }
        None => None,
    };
    let mut metrics = Vec::new();
    while trainer.step < cfg.train.steps {
        let m = trainer.step(traces)?;
        log::debug!("step {} loss {:.5} acc {:.3}", m.step, m.loss, m.accuracy);
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        metrics.push(m);
        let every = cfg.train.checkpoint_every;
        if let Some(dir) = run_dir {
            if every > 0 && trainer.step % every == 0 && trainer.step < cfg.train.steps {
                checkpoint::save(&checkpoint_dir(dir, trainer.step), &trainer.model, Some(&trainer.state()), &stamps)?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = run_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &trainer.model, Some(&trainer.state()), &stamps)?;
    }
    Ok((trainer, metrics))
}

/// Moving average over a trailing window of `w` values.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || values.len() < w {
        return Vec::new();
    }
    values.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}
