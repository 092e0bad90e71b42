//! Bridge from student hidden states to the forecaster's embedding space.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform_tensor, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::tsfm::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// One prior row prepended to every variate block.
    #[default]
    Prefix,
    /// The first row of every variate block replaced by the prior.
    Substitute,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Self::Prefix),
            "substitute" => Ok(Self::Substitute),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected prefix or substitute)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prefix => "prefix",
            Self::Substitute => "substitute",
        })
    }
}

/// Trainable `d_llm × d_ts` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    params: ParamStore,
    w: ParamId,
}

impl Projection {
    /// `U(±1/√d_llm)` initialization.
    pub fn new<R: Rng + ?Sized>(d_llm: usize, d_ts: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_llm as f64).sqrt();
        Self::from_tensor(uniform_tensor(rng, &[d_llm, d_ts], bound))
    }

    pub fn from_tensor(w: Tensor) -> Self {
        let mut params = ParamStore::new();
        let w = params.add("fusion.w_proj", w.with_grad());
        Self { params, w }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn weight(&self) -> &Tensor {
        self.params.get(self.w)
    }

    pub fn var(&self, p: &Bound) -> Var {
        p[self.w]
    }
}

/// `e_R = mean_over_rows(h) · W_proj`, a `[d_ts]` vector.
pub fn pool_and_project(g: &mut Graph, h: Var, w: Var) -> Result<Var> {
    let pooled = g.mean_over_rows(h)?;
    g.matmul(pooled, w)
}

/// Eager form of [`pool_and_project`] on plain tensors.
pub fn pool_and_project_tensor(h: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.shape().to_vec(), h.data().to_vec())?;
    let wv = g.constant(w.shape().to_vec(), w.data().to_vec())?;
    let out = pool_and_project(&mut g, hv, wv)?;
    Ok(g.tensor(out))
}

/// Combines the prior with `E_TS`. `tags[v]` is added to the prior row of
/// variate block `v`; rows that do not carry the prior are copied unchanged.
pub fn fuse(
    g: &mut Graph,
    e_r: Var,
    e_ts: Var,
    layout: Layout,
    mode: FusionMode,
    tags: &[Var],
) -> Result<(Var, Layout)> {
    let d = g.shape(e_ts).get(1).copied().unwrap_or(0);
    if g.value(e_r).len() != d {
        return Err(Error::Dimension {
            op: "fuse",
            left: g.shape(e_r).to_vec(),
            right: g.shape(e_ts).to_vec(),
        });
    }
    if tags.len() != layout.n_variates || g.shape(e_ts)[0] != layout.rows() {
        return Err(Error::Dimension {
            op: "fuse",
            left: vec![layout.n_variates, layout.block_len],
            right: vec![tags.len(), g.shape(e_ts)[0]],
        });
    }
    let mut priors = Vec::with_capacity(tags.len());
    for &tag in tags {
        priors.push(g.add(e_r, tag)?);
    }
    match mode {
        FusionMode::Prefix => {
            let mut parts = Vec::with_capacity(2 * layout.n_variates);
            for (v, &prior) in priors.iter().enumerate() {
                parts.push(prior);
                parts.push(g.slice_rows(e_ts, layout.block_start(v), layout.block_len)?);
            }
            let fused = g.concat_rows(&parts)?;
            Ok((
                fused,
                Layout {
                    n_variates: layout.n_variates,
                    block_len: layout.block_len + 1,
                },
            ))
        }
        FusionMode::Substitute => {
            let mut x = e_ts;
            for (v, &prior) in priors.iter().enumerate() {
                x = g.replace_row(x, layout.block_start(v), prior)?;
            }
            Ok((x, layout))
        }
    }
}
