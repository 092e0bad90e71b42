//! Mixture-of-modes window generator, the oracle teacher and the history-only
//! baseline reasoner.
//!
//! Every window shares one history distribution; the future follows one of K
//! mode trajectories that start at the last observed value. Without the event
//! cue the history carries no information about the mode.

mod analytic;
mod io;
mod reasoning;

pub use analytic::{analytic_mixture_stats, misspecification_error, Misspecification, MixtureStats};
pub use io::{read_jsonl, write_jsonl, TraceRecord, WindowRecord};
pub use reasoning::{baseline_reasoning, build_prompt, quantize, teacher_reasoning, PROMPT_VALUES};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{parse_list, parse_value, render_list, KvConfig, KvMap};
use crate::student::Frequency;

/// One future trajectory family: `μ(t) = slope·t + amplitude·(sin(2πt/period + phase) − sin(phase))`
/// plus Gaussian noise with std `noise_std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub slope: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub noise_std: f64,
}

impl ModeSpec {
    pub fn linear(slope: f64, noise_std: f64) -> Self {
        Self {
            slope,
            amplitude: 0.0,
            period: 12.0,
            phase: 0.0,
            noise_std,
        }
    }

    /// Mean displacement from the last context value after `t` steps.
    pub fn mean_at(&self, t: usize) -> f64 {
        let t = t as f64;
        let seasonal = if self.amplitude == 0.0 {
            0.0
        } else {
            self.amplitude * ((2.0 * PI * t / self.period + self.phase).sin() - self.phase.sin())
        };
        self.slope * t + seasonal
    }
}

/// Shared history generator: `level + trend·t + amplitude·sin(2πt/period + φ) + noise`
/// with per-window level, trend and phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub level_std: f64,
    pub trend_max: f64,
    pub seasonal_period: f64,
    pub seasonal_amplitude: f64,
    pub noise_std: f64,
}

impl Default for HistorySpec {
    fn default() -> Self {
        Self {
            level_std: 1.0,
            trend_max: 0.005,
            seasonal_period: 12.0,
            seasonal_amplitude: 1.0,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub modes: Vec<ModeSpec>,
    pub history: HistorySpec,
    /// Probability that the event label reveals the true mode.
    pub cue_strength: f64,
    pub horizon: usize,
    pub context_len: usize,
    pub n_variates: usize,
    pub frequency: Frequency,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            modes: vec![ModeSpec::linear(0.08, 0.1), ModeSpec::linear(-0.08, 0.1)],
            history: HistorySpec::default(),
            cue_strength: 0.9,
            horizon: 16,
            context_len: 64,
            n_variates: 1,
            frequency: Frequency::Hourly,
        }
    }
}

impl MixtureSpec {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Same spec with every mode replaced by the first one.
    pub fn with_identical_modes(&self) -> Self {
        let mut s = self.clone();
        let first = s.modes[0];
        s.modes.iter_mut().for_each(|m| *m = first);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.modes.len();
        if k == 0 {
            return Err(Error::Validation("mixture needs at least one mode".into()));
        }
        if self.weights.len() != k {
            return Err(Error::Validation(format!(
                "{} weights for {k} modes",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("mode weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("mode weights sum to {total}, not 1")));
        }
        if self.modes.iter().any(|m| !(m.noise_std > 0.0) || !(m.period > 0.0)) {
            return Err(Error::Validation("mode noise std and period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return Err(Error::Validation(format!(
                "cue_strength {} outside [0, 1]",
                self.cue_strength
            )));
        }
        if self.horizon == 0 || self.context_len < 2 || self.n_variates == 0 {
            return Err(Error::Validation(
                "horizon and variates must be positive, context at least 2".into(),
            ));
        }
        let h = &self.history;
        if h.noise_std < 0.0 || h.level_std < 0.0 || h.trend_max < 0.0 || !(h.seasonal_period > 0.0) {
            return Err(Error::Validation("invalid history generator parameters".into()));
        }
        Ok(())
    }
}

/// A context/future pair. `x` and `y` are time-major (`T×V`, `H×V`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowRecord", into = "WindowRecord")]
pub struct TimeSeriesWindow {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// Covers context then horizon.
    pub timestamps: Vec<i64>,
    pub true_mode: Option<usize>,
    /// Index of the revealed mode, `None` for `EVENT_NONE`.
    pub event: Option<usize>,
}

impl TimeSeriesWindow {
    /// The history-visible part of the window; the future is not carried over.
    pub fn context(&self) -> ContextWindow {
        ContextWindow {
            x: self.x.clone(),
            timestamps: self.timestamps.clone(),
            event: self.event,
        }
    }
}

/// What a forecaster is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub x: Vec<Vec<f64>>,
    pub timestamps: Vec<i64>,
    pub event: Option<usize>,
}

impl ContextWindow {
    pub fn n_variates(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[v]).collect()
    }

    pub fn last(&self, v: usize) -> f64 {
        self.x.last().map_or(0.0, |r| r[v])
    }
}

fn draw_mode<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Deterministic per-index seed derivation (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_window(spec: &MixtureSpec, seed: u64) -> Result<TimeSeriesWindow> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = draw_mode(&spec.weights, &mut rng);
    let cue_draw: f64 = rng.random();
    let event = (cue_draw < spec.cue_strength).then_some(mode);

    let (t_len, h_len, v_len) = (spec.context_len, spec.horizon, spec.n_variates);
    let hist = &spec.history;
    let phase_dist = Uniform::new(0.0, 2.0 * PI).expect("phase range");
    let mut x = vec![vec![0.0; v_len]; t_len];
    let mut y = vec![vec![0.0; v_len]; h_len];
    let m = &spec.modes[mode];
    let future_noise = Normal::new(0.0, m.noise_std).map_err(|e| Error::Validation(e.to_string()))?;

    for v in 0..v_len {
        let level = hist.level_std * rng.sample::<f64, _>(StandardNormal);
        let trend = if hist.trend_max > 0.0 {
            rng.random_range(-hist.trend_max..=hist.trend_max)
        } else {
            0.0
        };
        let phase = phase_dist.sample(&mut rng);
        for (t, row) in x.iter_mut().enumerate() {
            let tf = t as f64;
            let noise: f64 = rng.sample(StandardNormal);
            row[v] = level
                + trend * tf
                + hist.seasonal_amplitude * (2.0 * PI * tf / hist.seasonal_period + phase).sin()
                + hist.noise_std * noise;
        }
        let last = x[t_len - 1][v];
        for (h, row) in y.iter_mut().enumerate() {
            row[v] = last + m.mean_at(h + 1) + future_noise.sample(&mut rng);
        }
    }

    let start: i64 = rng.random_range(0..1_000_000);
    let timestamps = (0..(t_len + h_len) as i64).map(|i| start + i).collect();
    Ok(TimeSeriesWindow {
        x,
        y,
        timestamps,
        true_mode: Some(mode),
        event,
    })
}

/// `n` windows with seeds derived from `seed` and the window index.
pub fn generate_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<TimeSeriesWindow>> {
    (0..n as u64)
        .map(|i| sample_window(spec, derive_seed(seed, i)))
        .collect()
}

/// Per-mode fields are comma lists, one entry per mode. Lists may grow or
/// shrink the mode set; new modes start as flat unit-noise defaults, and
/// `validate` checks the lengths agree.
impl KvConfig for MixtureSpec {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let mut per_mode = |f: fn(&mut ModeSpec, f64)| -> Result<()> {
            let xs: Vec<f64> = parse_list(key, value)?;
            self.modes.resize(xs.len(), ModeSpec::linear(0.0, 0.1));
            self.modes.iter_mut().zip(xs).for_each(|(m, x)| f(m, x));
            Ok(())
        };
        match key {
            "spec.slopes" => per_mode(|m, x| m.slope = x)?,
            "spec.amplitudes" => per_mode(|m, x| m.amplitude = x)?,
            "spec.periods" => per_mode(|m, x| m.period = x)?,
            "spec.phases" => per_mode(|m, x| m.phase = x)?,
            "spec.noise_stds" => per_mode(|m, x| m.noise_std = x)?,
            "spec.weights" => self.weights = parse_list(key, value)?,
            "spec.cue_strength" => self.cue_strength = parse_value(key, value)?,
            "spec.horizon" => self.horizon = parse_value(key, value)?,
            "spec.context_len" => self.context_len = parse_value(key, value)?,
            "spec.n_variates" => self.n_variates = parse_value(key, value)?,
            "spec.frequency" => self.frequency = parse_value(key, value)?,
            "history.level_std" => self.history.level_std = parse_value(key, value)?,
            "history.trend_max" => self.history.trend_max = parse_value(key, value)?,
            "history.seasonal_period" => self.history.seasonal_period = parse_value(key, value)?,
            "history.seasonal_amplitude" => self.history.seasonal_amplitude = parse_value(key, value)?,
            "history.noise_std" => self.history.noise_std = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn write(&self, out: &mut KvMap) {
        let col = |f: fn(&ModeSpec) -> f64| render_list(&self.modes.iter().map(f).collect::<Vec<_>>());
        out.set("spec.slopes", col(|m| m.slope));
        out.set("spec.amplitudes", col(|m| m.amplitude));
        out.set("spec.periods", col(|m| m.period));
        out.set("spec.phases", col(|m| m.phase));
        out.set("spec.noise_stds", col(|m| m.noise_std));
        out.set("spec.weights", render_list(&self.weights));
        out.set("spec.cue_strength", self.cue_strength);
        out.set("spec.horizon", self.horizon);
        out.set("spec.context_len", self.context_len);
        out.set("spec.n_variates", self.n_variates);
        out.set("spec.frequency", self.frequency);
        let h = &self.history;
        out.set("history.level_std", h.level_std);
        out.set("history.trend_max", h.trend_max);
        out.set("history.seasonal_period", h.seasonal_period);
        out.set("history.seasonal_amplitude", h.seasonal_amplitude);
        out.set("history.noise_std", h.noise_std);
    }
}
