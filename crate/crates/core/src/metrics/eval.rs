use rayon::prelude::*;
use serde::Serialize;

use super::{crps_from_quantiles, interquantile_width, mae, mase};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::student::{Decoding, Token};
use crate::synth::{ContextWindow, TimeSeriesWindow};
use crate::tsfm::QuantileForecast;

/// Dual generation: the student's reasoning and the quantile forecast for a
/// context. The forecast pools pre-fill states only, so it does not depend
/// on the generated tokens.
pub fn forecast(
    pipeline: &Pipeline,
    ctx: &ContextWindow,
    decoding: Decoding,
) -> Result<(Vec<Token>, QuantileForecast)> {
    let reasoning = pipeline.reason(ctx, decoding)?;
    let forecast = pipeline.forecast(ctx)?;
    Ok((reasoning, forecast))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Seasonal period of the MASE denominator.
    pub season: usize,
    pub decoding: Decoding,
    /// Seed label recorded with every row.
    pub seed: u64,
    pub model_id: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            season: 1,
            decoding: Decoding::Greedy,
            seed: 0,
            model_id: "model".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub window_id: usize,
    pub seed: u64,
    pub mae: f64,
    pub mase: f64,
    pub crps: f64,
    pub mase_degenerate: bool,
    /// Mean 0.1 to 0.9 interquantile width.
    pub width: f64,
    pub true_mode: Option<usize>,
    pub predicted_mode: Option<usize>,
    pub reasoning: Vec<String>,
    /// Median forecast, `H×V`.
    pub point: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub mase: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model_id: String,
    pub seed: u64,
    pub season: usize,
    pub aggregate: MetricSummary,
    /// Fraction of windows with a known mode whose first generated MODE
    /// token is correct.
    pub mode_accuracy: Option<f64>,
    pub degenerate_windows: usize,
    pub windows: Vec<WindowMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn first_mode(tokens: &[Token]) -> Option<usize> {
    tokens.iter().find_map(|t| match t {
        Token::Mode(k) => Some(*k),
        _ => None,
    })
}

fn score_window(pipeline: &Pipeline, id: usize, w: &TimeSeriesWindow, opts: &EvalOptions) -> Result<WindowMetrics> {
    let (reasoning, f) = forecast(pipeline, &w.context(), opts.decoding)?;
    let point = f.point();
    let m = mase(&point, &w.y, &w.x, opts.season)?;
    Ok(WindowMetrics {
        window_id: id,
        seed: opts.seed,
        mae: mae(&point, &w.y)?,
        mase: m.value,
        crps: crps_from_quantiles(&f, &w.y)?,
        mase_degenerate: m.degenerate,
        width: interquantile_width(&f),
        true_mode: w.true_mode,
        predicted_mode: first_mode(&reasoning),
        reasoning: reasoning.iter().map(ToString::to_string).collect(),
        point,
    })
}

/// Scores every window; aggregates are plain means of the per-window rows.
pub fn evaluate(pipeline: &Pipeline, windows: &[TimeSeriesWindow], opts: &EvalOptions) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let rows: Vec<WindowMetrics> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| score_window(pipeline, i, w, opts))
        .collect::<Result<_>>()?;
    let aggregate = MetricSummary {
        mae: mean(rows.iter().map(|r| r.mae)),
        mase: mean(rows.iter().map(|r| r.mase)),
        crps: mean(rows.iter().map(|r| r.crps)),
    };
    let labelled: Vec<&WindowMetrics> = rows.iter().filter(|r| r.true_mode.is_some()).collect();
    let mode_accuracy = (!labelled.is_empty())
        .then(|| labelled.iter().filter(|r| r.predicted_mode == r.true_mode).count() as f64 / labelled.len() as f64);
    Ok(EvalReport {
        model_id: opts.model_id.clone(),
        seed: opts.seed,
        season: opts.season,
        aggregate,
        mode_accuracy,
        degenerate_windows: rows.iter().filter(|r| r.mase_degenerate).count(),
        windows: rows,
    })
}

/// Across-seed mean and (sample) standard deviation of the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricSummary>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl SeedSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Validation("no reports to summarize".into()));
        }
        let per_seed: Vec<MetricSummary> = reports.iter().map(|r| r.aggregate).collect();
        let stat = |f: fn(&MetricSummary) -> f64| {
            let xs: Vec<f64> = per_seed.iter().map(f).collect();
            let m = mean(xs.iter().copied());
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            (m, sd)
        };
        let (mae_m, mae_s) = stat(|s| s.mae);
        let (mase_m, mase_s) = stat(|s| s.mase);
        let (crps_m, crps_s) = stat(|s| s.crps);
        Ok(Self {
            seeds: reports.iter().map(|r| r.seed).collect(),
            per_seed,
            mean: MetricSummary {
                mae: mae_m,
                mase: mase_m,
                crps: crps_m,
            },
            std: MetricSummary {
                mae: mae_s,
                mase: mase_s,
                crps: crps_s,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineConfig;
    use crate::synth::{generate_dataset, MixtureSpec};

    fn setup() -> (Pipeline, Vec<TimeSeriesWindow>) {
        let spec = MixtureSpec {
            context_len: 16,
            horizon: 4,
            ..MixtureSpec::default()
        };
        let mut c = PipelineConfig::for_spec(&spec);
        c.student.d_model = 8;
        c.student.ff_hidden = 8;
        c.student.max_len = 48;
        c.tsfm.d_model = 8;
        c.tsfm.ff_hidden = 8;
        (Pipeline::new(c, 0).unwrap(), generate_dataset(&spec, 6, 1).unwrap())
    }

    #[test]
    fn single_window_aggregate_equals_row() {
        let (p, w) = setup();
        let r = evaluate(&p, &w[..1], &EvalOptions::default()).unwrap();
        let row = &r.windows[0];
        assert_eq!(r.aggregate.mae, row.mae);
        assert_eq!(r.aggregate.mase, row.mase);
        assert_eq!(r.aggregate.crps, row.crps);
    }

    #[test]
    fn duplicating_windows_keeps_aggregates() {
        let (p, w) = setup();
        let once = evaluate(&p, &w, &EvalOptions::default()).unwrap();
        let twice: Vec<_> = w.iter().chain(&w).cloned().collect();
        let twice = evaluate(&p, &twice, &EvalOptions::default()).unwrap();
        assert!((once.aggregate.mae - twice.aggregate.mae).abs() < 1e-12);
        assert!((once.aggregate.crps - twice.aggregate.crps).abs() < 1e-12);
        assert!((once.aggregate.mase - twice.aggregate.mase).abs() < 1e-12);
    }

    #[test]
    fn report_mae_recomputes_from_dumped_points() {
        let (p, w) = setup();
        let r = evaluate(&p, &w, &EvalOptions::default()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let mut total = 0.0;
        for (row, win) in json["windows"].as_array().unwrap().iter().zip(&w) {
            let point: Vec<Vec<f64>> = serde_json::from_value(row["point"].clone()).unwrap();
            let mut s = 0.0;
            for (pr, yr) in point.iter().zip(&win.y) {
                for (a, b) in pr.iter().zip(yr) {
                    s += (a - b).abs();
                }
            }
            total += s / (point.len() * point[0].len()) as f64;
        }
        assert!((total / w.len() as f64 - r.aggregate.mae).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (p, _) = setup();
        assert!(matches!(
            evaluate(&p, &[], &EvalOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn seed_summary_statistics() {
        let (p, w) = setup();
        let mut a = evaluate(&p, &w, &EvalOptions::default()).unwrap();
        let mut b = a.clone();
        a.aggregate.mae = 1.0;
        b.aggregate.mae = 3.0;
        b.seed = 1;
        let s = SeedSummary::from_reports(&[a, b]).unwrap();
        assert_eq!(s.mean.mae, 2.0);
        assert!((s.std.mae - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.seeds, vec![0, 1]);
    }
}
