//! Point and probabilistic forecast scores, evaluation driver and the
//! predictive-spread study.

mod eval;
mod experiment;
mod variance;

pub use eval::{evaluate, forecast, EvalOptions, EvalReport, MetricSummary, SeedSummary, WindowMetrics};
pub use experiment::{build_examples, initial_pipeline, train_model, ExperimentConfig, ModelKind};
pub use variance::{interquantile_width, median, variance_study, SeedSpread, VarianceStudy};

use crate::error::{Error, Result};
use crate::tensor::pinball;
use crate::tsfm::QuantileForecast;

/// Floor of the MASE denominator.
pub const MASE_FLOOR: f64 = 1e-9;

fn same_shape(op: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let shape = |m: &[Vec<f64>]| vec![m.len(), m.first().map_or(0, Vec::len)];
    if a.len() != b.len() || a.iter().zip(b).any(|(r, s)| r.len() != s.len()) || a.is_empty() {
        return Err(Error::Dimension {
            op,
            left: shape(a),
            right: shape(b),
        });
    }
    Ok(())
}

/// Mean absolute error over all (step, variate) cells.
pub fn mae(point: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    same_shape("mae", point, y)?;
    let (sum, n) = point
        .iter()
        .flatten()
        .zip(y.iter().flatten())
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (t - p).abs(), n + 1));
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mase {
    pub value: f64,
    /// The seasonal-naive error of some variate hit the floor.
    pub degenerate: bool,
}

/// Per-variate MAE scaled by the in-sample seasonal-naive error at lag `m`,
/// averaged over variates.
pub fn mase(point: &[Vec<f64>], y: &[Vec<f64>], history: &[Vec<f64>], m: usize) -> Result<Mase> {
    same_shape("mase", point, y)?;
    let t = history.len();
    if m == 0 || t <= m {
        return Err(Error::Validation(format!(
            "seasonal period {m} needs 1 <= m < history length {t}"
        )));
    }
    let v = y[0].len();
    if history.iter().any(|r| r.len() != v) {
        return Err(Error::Dimension {
            op: "mase",
            left: vec![t, history[0].len()],
            right: vec![y.len(), v],
        });
    }
    let mut total = 0.0;
    let mut degenerate = false;
    for j in 0..v {
        let naive = (m..t).map(|i| (history[i][j] - history[i - m][j]).abs()).sum::<f64>() / (t - m) as f64;
        if naive <= MASE_FLOOR {
            degenerate = true;
        }
        let err = point.iter().zip(y).map(|(p, o)| (o[j] - p[j]).abs()).sum::<f64>() / y.len() as f64;
        total += err / naive.max(MASE_FLOOR);
    }
    Ok(Mase {
        value: total / v as f64,
        degenerate,
    })
}

/// `(2/|Q|)·Σ_q mean pinball loss at level q`, on the raw scale.
pub fn crps_from_quantiles(forecast: &QuantileForecast, y: &[Vec<f64>]) -> Result<f64> {
    same_shape("crps", &forecast.slice(0), y)?;
    let levels = forecast.levels().as_slice();
    let cells = (y.len() * y[0].len()) as f64;
    let mut sum = 0.0;
    for (k, &q) in levels.iter().enumerate() {
        let slice = forecast.slice(k);
        let level_mean = slice
            .iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(p, o)| pinball(q, o - p))
            .sum::<f64>()
            / cells;
        sum += level_mean;
    }
    Ok(2.0 * sum / levels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsfm::{Normalization, QuantileLevels};

    fn forecast(values: Vec<Vec<Vec<f64>>>, levels: Vec<f64>) -> QuantileForecast {
        let v = values[0].len();
        QuantileForecast::new(
            values,
            QuantileLevels::new(levels).unwrap(),
            Normalization {
                mean: vec![0.0; v],
                std: vec![1.0; v],
            },
        )
        .unwrap()
    }

    #[test]
    fn perfect_forecasts_score_zero() {
        let y = vec![vec![1.0], vec![2.5]];
        let hist = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mase(&y, &y, &hist, 1).unwrap().value, 0.0);
        let f = forecast(
            vec![vec![vec![1.0; 9]], vec![vec![2.5; 9]]],
            QuantileLevels::default().as_slice().to_vec(),
        );
        assert_eq!(crps_from_quantiles(&f, &y).unwrap(), 0.0);
    }

    #[test]
    fn mase_hand_example() {
        let hist: Vec<Vec<f64>> = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0].iter().map(|&v| vec![v]).collect();
        let y = vec![vec![1.0], vec![2.0]];
        let point = vec![vec![0.5], vec![2.5]];
        let m = mase(&point, &y, &hist, 1).unwrap();
        assert!((m.value - 0.5).abs() < 1e-15);
        assert!(!m.degenerate);
        assert!(mase(&point, &y, &hist, 6).is_err());
        assert!(mase(&point, &y, &hist, 0).is_err());
    }

    #[test]
    fn mase_matches_reference_on_periodic_series() {
        let period = 4;
        let pattern = [1.0, 3.0, -2.0, 0.5];
        let hist: Vec<Vec<f64>> = (0..20).map(|t| vec![pattern[t % period] + 0.01 * t as f64]).collect();
        let y: Vec<Vec<f64>> = (20..28).map(|t| vec![pattern[t % period] + 0.01 * t as f64]).collect();
        let point: Vec<Vec<f64>> = (0..8).map(|h| vec![hist[20 - period + h % period][0]]).collect();
        // brute-force reference
        let mut num = 0.0;
        for h in 0..8 {
            num += (y[h][0] - point[h][0]).abs();
        }
        let mut den = 0.0;
        for t in period..20 {
            den += (hist[t][0] - hist[t - period][0]).abs();
        }
        let want = (num / 8.0) / (den / 16.0);
        assert!((mase(&point, &y, &hist, period).unwrap().value - want).abs() < 1e-12);
    }

    #[test]
    fn constant_history_is_flagged() {
        let hist = vec![vec![2.0]; 5];
        let m = mase(&[vec![1.0]], &[vec![2.0]], &hist, 1).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.value, 1.0 / MASE_FLOOR);
    }

    #[test]
    fn median_only_crps_is_mae() {
        let point = vec![vec![0.3, -1.0], vec![2.0, 4.0]];
        let y = vec![vec![1.0, -1.5], vec![0.0, 4.25]];
        let f = forecast(
            point.iter().map(|r| r.iter().map(|&v| vec![v]).collect()).collect(),
            vec![0.5],
        );
        assert!((crps_from_quantiles(&f, &y).unwrap() - mae(&point, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_quantiles_match_closed_form() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        let levels = QuantileLevels::default().as_slice().to_vec();
        let qs: Vec<f64> = levels.iter().map(|&q| n.inverse_cdf(q)).collect();
        let f = forecast(vec![vec![qs]], levels);
        let got = crps_from_quantiles(&f, &[vec![0.0]]).unwrap();
        // CRPS(N(0,1), 0) = 2φ(0) − 1/√π
        let exact = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((got - exact).abs() < 0.02, "{got} vs {exact}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        assert!(matches!(
            mae(&[vec![1.0]], &[vec![1.0], vec![2.0]]),
            Err(Error::Dimension { .. })
        ));
    }
}
