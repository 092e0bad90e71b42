//! Toy patch-based quantile forecaster.
//!
//! Each variate is instance-normalized, left-padded to whole patches and
//! embedded as one block of rows. A non-causal encoder runs over all blocks;
//! the last row of every block feeds a direct multi-step quantile head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    const_tensor, flagged, layer_norm_affine, uniform_tensor, Block, BlockConfig, Bound, ParamId, ParamStore,
};
use crate::tensor::{pinball, Graph, Tensor, Var};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("at least one quantile level is required".into()));
        }
        if levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::Config(format!("quantile levels must lie in (0, 1): {levels:?}")));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Ordering(format!(
                "quantile levels not strictly increasing: {levels:?}"
            )));
        }
        Ok(Self(levels))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the median level, if present.
    pub fn median_index(&self) -> Option<usize> {
        self.0.iter().position(|&q| (q - 0.5).abs() < 1e-12)
    }
}

impl Default for QuantileLevels {
    fn default() -> Self {
        Self(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsfmConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_hidden: usize,
    pub patch_len: usize,
    /// Capacity of the positional table, in patches per variate.
    pub max_patches: usize,
    pub n_variates: usize,
    pub horizon: usize,
    pub levels: QuantileLevels,
}

impl Default for TsfmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            ff_hidden: 64,
            patch_len: 8,
            max_patches: 32,
            n_variates: 1,
            horizon: 16,
            levels: QuantileLevels::default(),
        }
    }
}

/// Per-variate context mean and floored standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Statistics of a time-major `T×V` context.
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let v = check_context(x)?;
        let t = x.len() as f64;
        let mut mean = vec![0.0; v];
        let mut std = vec![0.0; v];
        for j in 0..v {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / t;
            let var = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / t;
            mean[j] = m;
            std[j] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn n_variates(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: usize, x: f64) -> f64 {
        (x - self.mean[v]) / self.std[v]
    }

    pub fn denormalize(&self, v: usize, z: f64) -> f64 {
        z * self.std[v] + self.mean[v]
    }
}

fn check_context(x: &[Vec<f64>]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Length { len: 0, max: 0 });
    }
    let v = x[0].len();
    if v == 0 {
        return Err(Error::EmptySequence("context variates"));
    }
    if x.iter().any(|r| r.len() != v) {
        return Err(Error::Dimension {
            op: "embed_context",
            left: vec![x.len(), v],
            right: x.iter().map(Vec::len).collect(),
        });
    }
    if x.iter().flatten().any(|z| !z.is_finite()) {
        return Err(Error::NumericalDomain("non-finite context value".into()));
    }
    Ok(v)
}

/// Row layout of an embedded (and possibly fused) sequence: `n_variates`
/// contiguous blocks of `block_len` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_variates: usize,
    pub block_len: usize,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.n_variates * self.block_len
    }

    pub fn block_start(&self, v: usize) -> usize {
        v * self.block_len
    }
}

/// `E_TS` recorded in a graph, with what decode needs to invert scaling.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub rows: Var,
    pub layout: Layout,
    pub norm: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    config: TsfmConfig,
    params: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_emb: ParamId,
    var_emb: ParamId,
    prior_pos: ParamId,
    blocks: Vec<Block>,
    final_gain: ParamId,
    final_bias: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl ForecastModel {
    pub fn new<R: Rng + ?Sized>(config: TsfmConfig, rng: &mut R) -> Result<Self> {
        if config.patch_len == 0 || config.max_patches == 0 || config.n_variates == 0 || config.horizon == 0 {
            return Err(Error::Config(
                "patch_len, max_patches, n_variates and horizon must be positive".into(),
            ));
        }
        let d = config.d_model;
        let out = config.horizon * config.levels.len();
        let mut params = ParamStore::new();
        let add = |p: &mut ParamStore, name: &str, t: Tensor| p.add(format!("tsfm.{name}"), flagged(t, true));
        let patch_w = add(
            &mut params,
            "patch.w",
            uniform_tensor(rng, &[config.patch_len, d], 1.0 / (config.patch_len as f64).sqrt()),
        );
        let patch_b = add(&mut params, "patch.b", const_tensor(&[d], 0.0));
        let pos_emb = add(
            &mut params,
            "pos_emb",
            uniform_tensor(rng, &[config.max_patches, d], 0.1),
        );
        let var_emb = add(
            &mut params,
            "var_emb",
            uniform_tensor(rng, &[config.n_variates, d], 0.1),
        );
        let prior_pos = add(&mut params, "prior_pos", uniform_tensor(rng, &[d], 0.1));
        let block_cfg = BlockConfig {
            d_model: d,
            n_heads: config.n_heads,
            ff_hidden: config.ff_hidden,
            lora_rank: None,
            base_trainable: true,
        };
        let blocks = (0..config.n_blocks)
            .map(|i| Block::new(&mut params, &format!("tsfm.block{i}"), block_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_gain = params.add("tsfm.ln_f.gain", const_tensor(&[d], 1.0).with_grad());
        let final_bias = params.add("tsfm.ln_f.bias", const_tensor(&[d], 0.0).with_grad());
        let head_w = params.add(
            "tsfm.head.w",
            uniform_tensor(rng, &[d, out], 1.0 / (d as f64).sqrt()).with_grad(),
        );
        let head_b = params.add("tsfm.head.b", const_tensor(&[out], 0.0).with_grad());
        Ok(Self {
            config,
            params,
            patch_w,
            patch_b,
            pos_emb,
            var_emb,
            prior_pos,
            blocks,
            final_gain,
            final_bias,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &TsfmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.config.levels
    }

    pub fn n_patches(&self, t: usize) -> usize {
        t.div_ceil(self.config.patch_len)
    }

    /// Normalized, left-padded patches of one variate, `n_patches × patch_len`
    /// flattened row-major.
    fn patch_values(&self, x: &[Vec<f64>], norm: &Normalization, v: usize) -> Vec<f64> {
        let p = self.config.patch_len;
        let total = self.n_patches(x.len()) * p;
        let first = norm.normalize(v, x[0][v]);
        let pad = total - x.len();
        std::iter::repeat_n(first, pad)
            .chain(x.iter().map(|r| norm.normalize(v, r[v])))
            .collect()
    }

    /// Records `E_TS` (`V·⌈T/patch_len⌉ × d`) for a time-major `T×V` context.
    pub fn embed_context(&self, g: &mut Graph, p: &Bound, x: &[Vec<f64>]) -> Result<Embedded> {
        let v = check_context(x)?;
        if v > self.config.n_variates {
            return Err(Error::Dimension {
                op: "embed_context",
                left: vec![x.len(), v],
                right: vec![x.len(), self.config.n_variates],
            });
        }
        let np = self.n_patches(x.len());
        if np > self.config.max_patches {
            return Err(Error::Length {
                len: np,
                max: self.config.max_patches,
            });
        }
        let norm = Normalization::fit(x)?;
        let patches: Vec<f64> = (0..v).flat_map(|j| self.patch_values(x, &norm, j)).collect();
        let patches = g.constant(vec![v * np, self.config.patch_len], patches)?;
        let h = g.matmul(patches, p[self.patch_w])?;
        let h = g.add_row(h, p[self.patch_b])?;
        let pos_ids: Vec<usize> = (0..v).flat_map(|_| 0..np).collect();
        let pos = g.gather_rows(p[self.pos_emb], &pos_ids)?;
        let var_ids: Vec<usize> = (0..v).flat_map(|j| std::iter::repeat_n(j, np)).collect();
        let var = g.gather_rows(p[self.var_emb], &var_ids)?;
        let h = g.add(h, pos)?;
        let rows = g.add(h, var)?;
        Ok(Embedded {
            rows,
            layout: Layout {
                n_variates: v,
                block_len: np,
            },
            norm,
        })
    }

    /// Additive tag for the prior row of variate `v`: the variate embedding
    /// plus either the dedicated prior position or patch position 0.
    pub fn prior_tag(&self, g: &mut Graph, p: &Bound, v: usize, prefix: bool) -> Result<Var> {
        let var = g.gather_rows(p[self.var_emb], &[v])?;
        let var = g.reshape(var, vec![self.config.d_model])?;
        let pos = if prefix {
            p[self.prior_pos]
        } else {
            let row = g.gather_rows(p[self.pos_emb], &[0])?;
            g.reshape(row, vec![self.config.d_model])?
        };
        g.add(var, pos)
    }

    /// Runs the encoder and head; returns the raw normalized head output
    /// `V × (H·|Q|)`, column `h·|Q| + q`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, seq: Var, layout: Layout) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        if shape.len() != 2 || shape[0] != layout.rows() || shape[1] != self.config.d_model {
            return Err(Error::Dimension {
                op: "decode",
                left: shape,
                right: vec![layout.rows(), self.config.d_model],
            });
        }
        let mut h = seq;
        for block in &self.blocks {
            h = block.forward(g, p, h, false, false)?;
        }
        let h = layer_norm_affine(g, h, p[self.final_gain], p[self.final_bias])?;
        let last: Vec<usize> = (0..layout.n_variates)
            .map(|v| layout.block_start(v) + layout.block_len - 1)
            .collect();
        let summary = g.gather_rows(h, &last)?;
        let out = g.matmul(summary, p[self.head_w])?;
        g.add_row(out, p[self.head_b])
    }

    /// Pinball loss of a raw head output against `y` (`H×V`), in the
    /// normalized space of `norm`.
    pub fn quantile_loss_var(&self, g: &mut Graph, raw: Var, y: &[Vec<f64>], norm: &Normalization) -> Result<Var> {
        let q = self.config.levels.as_slice();
        let v = norm.n_variates();
        check_target(y, self.config.horizon, v)?;
        let mut target = Vec::with_capacity(v * y.len() * q.len());
        let mut levels = Vec::with_capacity(target.capacity());
        for j in 0..v {
            for row in y {
                for &lvl in q {
                    target.push(norm.normalize(j, row[j]));
                    levels.push(lvl);
                }
            }
        }
        g.pinball_mean(raw, &target, &levels)
    }

    /// De-normalizes and sorts a raw head output.
    pub fn to_forecast(&self, raw: &[f64], norm: Option<&Normalization>) -> Result<QuantileForecast> {
        let norm = norm.ok_or_else(|| Error::State("decode needs the context normalization record".into()))?;
        let nq = self.config.levels.len();
        let h = self.config.horizon;
        let v = norm.n_variates();
        if raw.len() != v * h * nq {
            return Err(Error::State(format!(
                "normalization record covers {v} variates, head produced {} values",
                raw.len()
            )));
        }
        let mut values = vec![vec![vec![0.0; nq]; v]; h];
        for (j, per_var) in raw.chunks(h * nq).enumerate() {
            for (step, cell) in per_var.chunks(nq).enumerate() {
                values[step][j] = cell.iter().map(|&z| norm.denormalize(j, z)).collect();
            }
        }
        QuantileForecast::new(values, self.config.levels.clone(), norm.clone())
    }

    /// Unfused forecast for a context, without gradients.
    pub fn forecast(&self, x: &[Vec<f64>]) -> Result<QuantileForecast> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let emb = self.embed_context(&mut g, &p, x)?;
        let raw = self.decode(&mut g, &p, emb.rows, emb.layout)?;
        self.to_forecast(g.value(raw), Some(&emb.norm))
    }
}

fn check_target(y: &[Vec<f64>], horizon: usize, v: usize) -> Result<()> {
    if y.len() != horizon || y.iter().any(|r| r.len() != v) {
        return Err(Error::Dimension {
            op: "quantile_loss",
            left: vec![horizon, v],
            right: vec![y.len(), y.first().map_or(0, Vec::len)],
        });
    }
    Ok(())
}

/// Quantile forecasts in original units, `values[step][variate][level]`,
/// non-decreasing along the level axis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    values: Vec<Vec<Vec<f64>>>,
    levels: QuantileLevels,
    norm: Normalization,
}

impl QuantileForecast {
    /// Sorts every cell along the level axis (monotone rearrangement).
    pub fn new(mut values: Vec<Vec<Vec<f64>>>, levels: QuantileLevels, norm: Normalization) -> Result<Self> {
        for cell in values.iter_mut().flatten() {
            if cell.len() != levels.len() {
                return Err(Error::Dimension {
                    op: "quantile_forecast",
                    left: vec![cell.len()],
                    right: vec![levels.len()],
                });
            }
            if cell.iter().any(|z| !z.is_finite()) {
                return Err(Error::NumericalDomain("non-finite forecast value".into()));
            }
            cell.sort_by(f64::total_cmp);
        }
        Ok(Self { values, levels, norm })
    }

    pub fn values(&self) -> &[Vec<Vec<f64>>] {
        &self.values
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn n_variates(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// The `H×V` slice at level index `q`.
    pub fn slice(&self, q: usize) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|step| step.iter().map(|cell| cell[q]).collect())
            .collect()
    }

    /// Median slice, or the middle level when 0.5 is absent.
    pub fn point(&self) -> Vec<Vec<f64>> {
        let q = self.levels.median_index().unwrap_or(self.levels.len() / 2);
        self.slice(q)
    }

    /// Mean pinball loss over (step, variate, level), in normalized space.
    pub fn quantile_loss(&self, y: &[Vec<f64>]) -> Result<f64> {
        check_target(y, self.horizon(), self.n_variates())?;
        let q = self.levels.as_slice();
        let mut total = 0.0;
        for (step, row) in y.iter().enumerate() {
            for (v, &obs) in row.iter().enumerate() {
                let z = self.norm.normalize(v, obs);
                for (k, &lvl) in q.iter().enumerate() {
                    total += pinball(lvl, z - self.norm.normalize(v, self.values[step][v][k]));
                }
            }
        }
        Ok(total / (y.len() * self.n_variates() * q.len()) as f64)
    }
}
