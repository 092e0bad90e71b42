//! Parameter storage and the pre-norm transformer block shared by the student
//! language model and the forecaster.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one model.
///
/// The insertion order is the canonical order used by the optimizer and the
/// checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Replaces the data of `name`, keeping its trainable flag.
    pub fn load(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Incompatible(format!(
                "parameter {name}: stored shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        let flag = t.requires_grad();
        *t = Tensor::new(shape.to_vec(), data)?;
        t.set_requires_grad(flag);
        Ok(())
    }
}

/// Graph handles for the parameters of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Copy with the handle of `id` swapped for `var`.
    pub fn replaced(&self, id: ParamId, var: Var) -> Bound {
        let mut vars = self.0.clone();
        vars[id.0] = var;
        Bound(vars)
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("uniform bound");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform_tensor shape")
}

pub fn const_tensor(shape: &[usize], value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![value; n]).expect("const_tensor shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    /// Rank of the attention adapters; `None` disables them.
    pub lora_rank: Option<usize>,
    pub base_trainable: bool,
}

/// Low-rank adapter `A·B` added to a frozen projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct AttnProj {
    w: ParamId,
    lora: Option<LoraPair>,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FF(LN(x))` with a
/// tanh feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    n_heads: usize,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    q: AttnProj,
    k: AttnProj,
    v: AttnProj,
    o: AttnProj,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff_in: ParamId,
    ff_in_bias: ParamId,
    ff_out: ParamId,
    ff_out_bias: ParamId,
}

pub(crate) fn flagged(t: Tensor, trainable: bool) -> Tensor {
    if trainable {
        t.with_grad()
    } else {
        t
    }
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.n_heads == 0 || d % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by n_heads {}",
                cfg.n_heads
            )));
        }
        let base = cfg.base_trainable;
        let wb = 1.0 / (d as f64).sqrt();
        let add = |store: &mut ParamStore, name: &str, t: Tensor, trainable: bool| {
            store.add(format!("{prefix}.{name}"), flagged(t, trainable))
        };

        let ln1_gain = add(store, "ln1.gain", const_tensor(&[d], 1.0), base);
        let ln1_bias = add(store, "ln1.bias", const_tensor(&[d], 0.0), base);
        let mut projs = Vec::with_capacity(4);
        for name in ["wq", "wk", "wv", "wo"] {
            let w = add(store, name, uniform_tensor(rng, &[d, d], wb), base);
            projs.push(AttnProj { w, lora: None });
        }
        if let Some(r) = cfg.lora_rank {
            for (proj, name) in projs.iter_mut().zip(["wq", "wk", "wv", "wo"]) {
                let a = add(
                    store,
                    &format!("{name}.lora_a"),
                    uniform_tensor(rng, &[d, r], 0.01),
                    true,
                );
                let b = add(store, &format!("{name}.lora_b"), const_tensor(&[r, d], 0.0), true);
                proj.lora = Some(LoraPair { a, b });
            }
        }
        let ln2_gain = add(store, "ln2.gain", const_tensor(&[d], 1.0), base);
        let ln2_bias = add(store, "ln2.bias", const_tensor(&[d], 0.0), base);
        let f = cfg.ff_hidden;
        let ff_in = add(store, "ff.w_in", uniform_tensor(rng, &[d, f], wb), base);
        let ff_in_bias = add(store, "ff.b_in", const_tensor(&[f], 0.0), base);
        let ff_out = add(
            store,
            "ff.w_out",
            uniform_tensor(rng, &[f, d], 1.0 / (f as f64).sqrt()),
            base,
        );
        let ff_out_bias = add(store, "ff.b_out", const_tensor(&[d], 0.0), base);

        Ok(Self {
            n_heads: cfg.n_heads,
            ln1_gain,
            ln1_bias,
            q: projs[0],
            k: projs[1],
            v: projs[2],
            o: projs[3],
            ln2_gain,
            ln2_bias,
            ff_in,
            ff_in_bias,
            ff_out,
            ff_out_bias,
        })
    }

    pub fn adapters(&self) -> Vec<LoraPair> {
        [self.q, self.k, self.v, self.o].iter().filter_map(|p| p.lora).collect()
    }

    fn project(&self, g: &mut Graph, p: &Bound, x: Var, proj: AttnProj, adapters: bool) -> Result<Var> {
        let base = g.matmul(x, p[proj.w])?;
        match proj.lora {
            Some(l) if adapters => {
                let down = g.matmul(x, p[l.a])?;
                let up = g.matmul(down, p[l.b])?;
                g.add(base, up)
            }
            _ => Ok(base),
        }
    }

    /// `x` is `L×d`. With `adapters = false` the low-rank terms are skipped
    /// entirely, giving the base-model forward pass.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, causal: bool, adapters: bool) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / self.n_heads;

        let h = layer_norm_affine(g, x, p[self.ln1_gain], p[self.ln1_bias])?;
        let q = self.project(g, p, h, self.q, adapters)?;
        let k = self.project(g, p, h, self.k, adapters)?;
        let v = self.project(g, p, h, self.v, adapters)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = if causal {
                g.causal_softmax_rows(scores)?
            } else {
                g.softmax_rows(scores)?
            };
            heads.push(g.matmul(probs, vh)?);
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = self.project(g, p, attn, self.o, adapters)?;
        let x = g.add(x, attn)?;

        let h = layer_norm_affine(g, x, p[self.ln2_gain], p[self.ln2_bias])?;
        let h = g.matmul(h, p[self.ff_in])?;
        let h = g.add_row(h, p[self.ff_in_bias])?;
        let h = g.tanh(h);
        let h = g.matmul(h, p[self.ff_out])?;
        let h = g.add_row(h, p[self.ff_out_bias])?;
        g.add(x, h)
    }
}

pub fn layer_norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}
