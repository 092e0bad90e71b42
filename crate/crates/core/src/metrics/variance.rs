use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::synth::{analytic_mixture_stats, MixtureSpec, TimeSeriesWindow};
use crate::tsfm::QuantileForecast;

/// Mean distance between the outermost quantile levels (0.1 and 0.9 by
/// default) over all steps and variates.
pub fn interquantile_width(f: &QuantileForecast) -> f64 {
    let last = f.levels().len() - 1;
    let cells = f.values().iter().flatten();
    let (sum, n) = cells.fold((0.0, 0usize), |(s, n), c| (s + c[last] - c[0], n + 1));
    sum / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSpread {
    pub seed_index: usize,
    pub fused_width: f64,
    pub baseline_width: f64,
    /// Variance across windows of the median forecast's final-step
    /// displacement from the last context value, per true mode.
    pub fused_point_var_by_mode: Vec<f64>,
    pub baseline_point_var_by_mode: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceStudy {
    pub per_seed: Vec<SeedSpread>,
    pub median_fused_width: f64,
    pub median_baseline_width: f64,
    pub mean_fused_width: f64,
    pub mean_baseline_width: f64,
    /// Unpaired standard error of the difference of the across-seed means.
    pub width_diff_se: f64,
    pub analytic_step: usize,
    pub analytic_unconditional_var: f64,
    pub analytic_conditional_var: Vec<f64>,
    pub analytic_variance_reduction: f64,
}

/// Median of a non-empty sample; the mean of the middle pair when even.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn spread(p: &Pipeline, windows: &[TimeSeriesWindow], k: usize) -> Result<(f64, Vec<f64>)> {
    let mut widths = Vec::with_capacity(windows.len());
    let mut by_mode: Vec<Vec<f64>> = vec![Vec::new(); k];
    for w in windows {
        let f = p.forecast(&w.context())?;
        widths.push(interquantile_width(&f));
        if let Some(m) = w.true_mode.filter(|&m| m < k) {
            let point = f.point();
            by_mode[m].push(point[point.len() - 1][0] - w.x[w.x.len() - 1][0]);
        }
    }
    let var = by_mode
        .iter()
        .map(|xs| if xs.len() > 1 { mean_sd(xs).1.powi(2) } else { f64::NAN })
        .collect();
    Ok((widths.iter().sum::<f64>() / widths.len() as f64, var))
}

/// Compares predictive spread of fused and zero-prior models trained on
/// `spec`, one pair per seed, on shared held-out windows.
pub fn variance_study(
    fused: &[Pipeline],
    baseline: &[Pipeline],
    spec: &MixtureSpec,
    windows: &[TimeSeriesWindow],
) -> Result<VarianceStudy> {
    if fused.is_empty() || fused.len() != baseline.len() {
        return Err(Error::Config(format!(
            "need matching non-empty model lists, got {} fused and {} baseline",
            fused.len(),
            baseline.len()
        )));
    }
    if windows.is_empty() {
        return Err(Error::Validation("variance study needs held-out windows".into()));
    }
    for p in fused.iter().chain(baseline) {
        let t = &p.config().tsfm;
        if t.horizon != spec.horizon || t.n_variates != spec.n_variates {
            return Err(Error::Config(format!(
                "model horizon {} / variates {} do not match spec {} / {}",
                t.horizon, t.n_variates, spec.horizon, spec.n_variates
            )));
        }
    }
    let k = spec.n_modes();
    let mut per_seed = Vec::with_capacity(fused.len());
    for (i, (f, b)) in fused.iter().zip(baseline).enumerate() {
        let (fw, fv) = spread(f, windows, k)?;
        let (bw, bv) = spread(b, windows, k)?;
        per_seed.push(SeedSpread {
            seed_index: i,
            fused_width: fw,
            baseline_width: bw,
            fused_point_var_by_mode: fv,
            baseline_point_var_by_mode: bv,
        });
    }
    let fw: Vec<f64> = per_seed.iter().map(|s| s.fused_width).collect();
    let bw: Vec<f64> = per_seed.iter().map(|s| s.baseline_width).collect();
    let (fm, fsd) = mean_sd(&fw);
    let (bm, bsd) = mean_sd(&bw);
    let n = fw.len() as f64;
    let stats = analytic_mixture_stats(spec, spec.horizon)?;
    Ok(VarianceStudy {
        median_fused_width: median(&fw),
        median_baseline_width: median(&bw),
        mean_fused_width: fm,
        mean_baseline_width: bm,
        width_diff_se: (fsd * fsd / n + bsd * bsd / n).sqrt(),
        per_seed,
        analytic_step: stats.step,
        analytic_unconditional_var: stats.unconditional_var,
        analytic_conditional_var: stats.conditional_var,
        analytic_variance_reduction: stats.variance_reduction,
    })
}
