use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used throughout the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
///
/// `f` records its computation on the supplied graph, starting from the leaf
/// bound to `x`, and returns the scalar output.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        let s = g.scalar(out);
        if !s.is_finite() {
            return Err(Error::NumericalDomain(format!(
                "function evaluated to {s} during finite differencing"
            )));
        }
        Ok(s)
    };

    let mut g = Graph::new();
    let xv = g.leaf(&x.clone().with_grad());
    let out = f(&mut g, xv)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NumericalDomain("non-finite function value".into()));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    probe.set_requires_grad(false);
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
