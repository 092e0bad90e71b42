//! Joint optimization of the student adapters, projection and forecaster.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, AdamW};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{parse_value, KvConfig, KvMap};
use crate::pipeline::{LossWeights, Pipeline, TrainExample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta == 0.0 {
            return Err(Error::Config(format!(
                "alpha ({}) and beta ({}) must be non-negative and not both zero",
                self.alpha, self.beta
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "learning_rate and adam_eps must be positive, weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("batch_size and grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn write(&self, out: &mut KvMap) {
        out.set("alpha", self.alpha);
        out.set("beta", self.beta);
        out.set("learning_rate", self.learning_rate);
        out.set("weight_decay", self.weight_decay);
        out.set("adam_beta1", self.adam_beta1);
        out.set("adam_beta2", self.adam_beta2);
        out.set("adam_eps", self.adam_eps);
        out.set("batch_size", self.batch_size);
        out.set("steps", self.steps);
        out.set("seed", self.seed);
        out.set("grad_clip_norm", self.grad_clip_norm);
    }
}

/// Losses and gradient norm of one optimizer step (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_total: f64,
    /// `None` when the student was skipped.
    pub loss_ce: Option<f64>,
    pub loss_quantile: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
}

/// Owns the pipeline, optimizer state and the data order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pipeline: Pipeline,
    config: TrainConfig,
    optim: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
}

impl Trainer {
    pub fn new(pipeline: Pipeline, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = pipeline.slots().iter().map(|&s| pipeline.param(s).numel()).collect();
        let optim = AdamW::new(
            &sizes,
            config.learning_rate,
            config.weight_decay,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            pipeline,
            config,
            optim,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn into_pipeline(self) -> Pipeline {
        self.pipeline
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Changes the step budget, e.g. to extend a resumed run.
    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    /// One optimizer step on `batch`, using batch-mean losses and gradients.
    pub fn train_step(&mut self, batch: &[&TrainExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let w = self.config.weights();
        let pipeline = &self.pipeline;
        let results: Vec<_> = batch
            .par_iter()
            .map(|ex| pipeline.loss_and_grads(ex, w))
            .collect::<Result<_>>()?;

        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = results[0].1.iter().map(|g| vec![0.0; g.len()]).collect();
        let (mut total, mut ce, mut quantile) = (0.0, 0.0, 0.0);
        let mut has_ce = true;
        for (loss, g) in &results {
            total += loss.total;
            quantile += loss.quantile;
            match loss.ce {
                Some(c) => ce += c,
                None => has_ce = false,
            }
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let (total, ce, quantile) = (total / n, ce / n, quantile / n);
        if !total.is_finite() || !quantile.is_finite() || (has_ce && !ce.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                ce,
                quantile,
            });
        }
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                ce,
                quantile,
            });
        }

        let slots = self.pipeline.slots();
        let mut tensors: Vec<_> = slots.iter().map(|&s| self.pipeline.param(s).clone()).collect();
        {
            let mut views: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
            self.optim.step(&mut views, &grads);
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            *self.pipeline.param_mut(slot) = t;
        }

        let stats = StepStats {
            step: self.step,
            loss_total: total,
            loss_ce: has_ce.then_some(ce),
            loss_quantile: quantile,
            grad_norm,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Next batch of example indices; the order is reshuffled whenever an
    /// epoch is exhausted.
    fn next_batch(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.order.is_empty() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        } else if self.order.len() != n {
            return Err(Error::Incompatible(format!(
                "data order covers {} examples, dataset has {n}",
                self.order.len()
            )));
        }
        let mut out = Vec::with_capacity(self.config.batch_size.min(n));
        while out.len() < self.config.batch_size.min(n) {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        Ok(out)
    }

    /// Runs until `config.steps` steps have been taken in total; `on_step`
    /// sees every record as it is produced.
    pub fn run_with(&mut self, data: &[TrainExample], mut on_step: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let mut history = Vec::new();
        while self.step < self.config.steps {
            let idx = self.next_batch(data.len())?;
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &data[i]).collect();
            let stats = self.train_step(&batch)?;
            log::debug!(
                "step {} total {:.5} ce {:?} quantile {:.5} grad_norm {:.4}",
                stats.step,
                stats.loss_total,
                stats.loss_ce,
                stats.loss_quantile,
                stats.grad_norm
            );
            on_step(&stats);
            history.push(stats);
        }
        Ok(history)
    }

    pub fn run(&mut self, data: &[TrainExample]) -> Result<Vec<StepStats>> {
        self.run_with(data, |_| {})
    }
}

/// Fixed-step training from scratch; returns the trained pipeline and the
/// per-step history.
pub fn train(pipeline: Pipeline, data: &[TrainExample], config: TrainConfig) -> Result<(Pipeline, Vec<StepStats>)> {
    let mut t = Trainer::new(pipeline, config)?;
    if t.config.steps == 0 {
        return Ok((t.into_pipeline(), Vec::new()));
    }
    let history = t.run(data)?;
    Ok((t.into_pipeline(), history))
}
