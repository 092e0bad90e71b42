//! Seeded train-and-compare runs shared by the CLI and the acceptance suite.

use crate::error::Result;
use crate::pipeline::{Pipeline, PipelineConfig, PriorSource, TrainExample};
use crate::synth::{derive_seed, generate_dataset, MixtureSpec, TimeSeriesWindow};
use crate::trainer::{train, StepStats, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Student prior, trained on `α·L_CE + β·L_quantile`.
    Fused,
    /// Zero prior, trained on the quantile loss alone.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: MixtureSpec,
    pub arch: PipelineConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl ExperimentConfig {
    pub fn new(spec: MixtureSpec) -> Self {
        Self {
            arch: PipelineConfig::for_spec(&spec),
            spec,
            train: TrainConfig::default(),
            n_train: 2000,
            n_test: 500,
        }
    }

    pub fn train_windows(&self, seed: u64) -> Result<Vec<TimeSeriesWindow>> {
        generate_dataset(&self.spec, self.n_train, derive_seed(seed, 1))
    }

    pub fn test_windows(&self, seed: u64) -> Result<Vec<TimeSeriesWindow>> {
        generate_dataset(&self.spec, self.n_test, derive_seed(seed, 4))
    }
}

pub fn build_examples(p: &Pipeline, windows: &[TimeSeriesWindow], spec: &MixtureSpec) -> Result<Vec<TrainExample>> {
    windows.iter().map(|w| p.example(w, spec)).collect()
}

/// Untrained pipeline and optimizer settings for one run. Both kinds share
/// initialization, data and shuffling for a given `seed`.
pub fn initial_pipeline(cfg: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<(Pipeline, TrainConfig)> {
    let mut arch = cfg.arch.clone();
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(seed, 3);
    if kind == ModelKind::Baseline {
        arch.prior = PriorSource::Zero;
        tc.alpha = 0.0;
        tc.beta = 1.0;
    }
    Ok((Pipeline::new(arch, derive_seed(seed, 2))?, tc))
}

pub fn train_model(cfg: &ExperimentConfig, kind: ModelKind, seed: u64) -> Result<(Pipeline, Vec<StepStats>)> {
    let (p, tc) = initial_pipeline(cfg, kind, seed)?;
    let data = build_examples(&p, &cfg.train_windows(seed)?, &cfg.spec)?;
    train(p, &data, tc)
}
