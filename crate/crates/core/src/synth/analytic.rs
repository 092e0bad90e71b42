use super::MixtureSpec;
use crate::error::{Error, Result};

/// Variance of the displacement `Y_t − x_T` under the mixture, with and
/// without knowledge of the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureStats {
    pub step: usize,
    /// `Σπᵢσᵢ² + Σπᵢ(μᵢ − μ̄)²`
    pub unconditional_var: f64,
    /// `σₖ²` for each mode.
    pub conditional_var: Vec<f64>,
    /// `Σπᵢσᵢ²`, the conditional variance averaged over modes.
    pub expected_conditional_var: f64,
    /// `Σπᵢ(μᵢ − μ̄)²`, the between-mode term removed by knowing the mode.
    pub variance_reduction: f64,
}

pub fn analytic_mixture_stats(spec: &MixtureSpec, step: usize) -> Result<MixtureStats> {
    spec.validate()?;
    let means: Vec<f64> = spec.modes.iter().map(|m| m.mean_at(step)).collect();
    let mix_mean: f64 = spec.weights.iter().zip(&means).map(|(p, m)| p * m).sum();
    let conditional_var: Vec<f64> = spec.modes.iter().map(|m| m.noise_std * m.noise_std).collect();
    let expected_conditional_var = spec
        .weights
        .iter()
        .zip(&conditional_var)
        .map(|(p, v)| p * v)
        .sum::<f64>();
    let variance_reduction = spec
        .weights
        .iter()
        .zip(&means)
        .map(|(p, m)| p * (m - mix_mean).powi(2))
        .sum::<f64>();
    Ok(MixtureStats {
        step,
        unconditional_var: expected_conditional_var + variance_reduction,
        conditional_var,
        expected_conditional_var,
        variance_reduction,
    })
}

/// Expected squared error of predicting with mode `predicted` when the truth
/// follows mode `actual`, split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Misspecification {
    pub bias_sq: f64,
    pub variance: f64,
    pub irreducible: f64,
    pub total: f64,
}

pub fn misspecification_error(
    spec: &MixtureSpec,
    predicted: usize,
    actual: usize,
    step: usize,
) -> Result<Misspecification> {
    spec.validate()?;
    let k = spec.n_modes();
    if predicted >= k || actual >= k {
        return Err(Error::Validation(format!(
            "mode indices ({predicted}, {actual}) outside 0..{k}"
        )));
    }
    let (mj, mk) = (&spec.modes[predicted], &spec.modes[actual]);
    let bias_sq = (mj.mean_at(step) - mk.mean_at(step)).powi(2);
    let variance = mj.noise_std.powi(2);
    let irreducible = mk.noise_std.powi(2);
    Ok(Misspecification {
        bias_sq,
        variance,
        irreducible,
        total: bias_sq + variance + irreducible,
    })
}
