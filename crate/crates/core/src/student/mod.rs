//! Small causal transformer over the reasoning vocabulary.
//!
//! Base weights are frozen; only the low-rank attention adapters train. The
//! output head is tied to the (frozen) token embedding table.

mod vocab;

pub use vocab::{Frequency, LenBucket, Token, Trend, Vocabulary};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nn::{
    const_tensor, flagged, layer_norm_affine, uniform_tensor, Block, BlockConfig, Bound, ParamId, ParamStore,
};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeReduction {
    /// Mean over scored target tokens.
    Mean,
    /// Plain sum over scored target tokens.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_hidden: usize,
    pub lora_rank: usize,
    pub max_len: usize,
    pub ce_reduction: CeReduction,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            ff_hidden: 64,
            lora_rank: 4,
            max_len: 128,
            ce_reduction: CeReduction::Mean,
        }
    }
}

/// Prompt tokens, target tokens and the per-position loss mask over
/// `prompt ++ target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub prompt_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ReasoningTrace {
    /// Mask is false on the prompt and on PAD targets.
    pub fn new(prompt_ids: Vec<usize>, target_ids: Vec<usize>, pad_id: usize) -> Self {
        let mask = std::iter::repeat_n(false, prompt_ids.len())
            .chain(target_ids.iter().map(|&t| t != pad_id))
            .collect();
        Self {
            prompt_ids,
            target_ids,
            mask,
        }
    }

    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt_ids.clone();
        s.extend_from_slice(&self.target_ids);
        s
    }

    pub fn scored_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax with lowest-id tie-break.
    Greedy,
    Sampled {
        temperature: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentLm {
    config: StudentConfig,
    vocab: Vocabulary,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_gain: ParamId,
    final_bias: ParamId,
}

impl StudentLm {
    pub fn new<R: Rng + ?Sized>(config: StudentConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        if config.max_len == 0 || config.lora_rank == 0 {
            return Err(Error::Config("student max_len and lora_rank must be positive".into()));
        }
        let d = config.d_model;
        let mut params = ParamStore::new();
        let tok_emb = params.add("student.tok_emb", uniform_tensor(rng, &[vocab.len(), d], 1.0));
        let pos_emb = params.add("student.pos_emb", uniform_tensor(rng, &[config.max_len, d], 0.1));
        let block_cfg = BlockConfig {
            d_model: d,
            n_heads: config.n_heads,
            ff_hidden: config.ff_hidden,
            lora_rank: Some(config.lora_rank),
            base_trainable: false,
        };
        let blocks = (0..config.n_blocks)
            .map(|i| Block::new(&mut params, &format!("student.block{i}"), block_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_gain = params.add("student.ln_f.gain", flagged(const_tensor(&[d], 1.0), false));
        let final_bias = params.add("student.ln_f.bias", flagged(const_tensor(&[d], 0.0), false));
        Ok(Self {
            config,
            vocab,
            params,
            tok_emb,
            pos_emb,
            blocks,
            final_gain,
            final_bias,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
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

    pub fn set_ce_reduction(&mut self, r: CeReduction) {
        self.config.ce_reduction = r;
    }

    /// The adapter tensors, i.e. the student's trainable set.
    pub fn trainable_params(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(Block::adapters)
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence("student input"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| !self.vocab.contains_id(i)) {
            return Err(Error::Vocabulary(format!(
                "id {bad} outside vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    /// Last-layer (post final norm) states for `ids`, `L×d`.
    pub fn hidden(&self, g: &mut Graph, p: &Bound, ids: &[usize], adapters: bool) -> Result<Var> {
        self.check_ids(ids)?;
        let tok = g.gather_rows(p[self.tok_emb], ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(p[self.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, true, adapters)?;
        }
        layer_norm_affine(g, x, p[self.final_gain], p[self.final_bias])
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits_for(&self, g: &mut Graph, p: &Bound, hidden_rows: Var) -> Result<Var> {
        g.matmul_nt(hidden_rows, p[self.tok_emb])
    }

    /// Pre-fill hidden states over the prompt, as a plain tensor.
    pub fn encode_prompt(&self, prompt_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.hidden(&mut g, &p, prompt_ids, true)?;
        Ok(g.tensor(h))
    }

    /// Same as [`encode_prompt`](Self::encode_prompt) with the adapters removed.
    pub fn encode_prompt_base(&self, prompt_ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.hidden(&mut g, &p, prompt_ids, false)?;
        Ok(g.tensor(h))
    }

    /// Full `L×|V|` logits (position `i` predicts token `i+1`).
    pub fn logits(&self, ids: &[usize], adapters: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let h = self.hidden(&mut g, &p, ids, adapters)?;
        let l = self.logits_for(&mut g, &p, h)?;
        Ok(g.tensor(l))
    }

    /// Records the masked next-token cross-entropy of `trace` and returns it
    /// together with the prompt (pre-fill) hidden rows.
    ///
    /// Causal masking makes the prompt rows of the joint pass identical to a
    /// prompt-only pass.
    pub fn ce_and_prefill(&self, g: &mut Graph, p: &Bound, trace: &ReasoningTrace) -> Result<(Var, Var)> {
        let seq = trace.sequence();
        if trace.mask.len() != seq.len() {
            return Err(Error::Validation(format!(
                "mask length {} does not match sequence length {}",
                trace.mask.len(),
                seq.len()
            )));
        }
        if trace.prompt_ids.is_empty() {
            return Err(Error::EmptySequence("prompt"));
        }
        let (rows, targets): (Vec<usize>, Vec<usize>) = (1..seq.len())
            .filter(|&j| trace.mask[j])
            .map(|j| (j - 1, seq[j]))
            .unzip();
        if targets.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let h = self.hidden(g, p, &seq, true)?;
        let picked = g.gather_rows(h, &rows)?;
        let logits = self.logits_for(g, p, picked)?;
        let total = g.cross_entropy_sum(logits, &targets)?;
        let ce = match self.config.ce_reduction {
            CeReduction::Mean => g.scale(total, 1.0 / targets.len() as f64),
            CeReduction::Sum => total,
        };
        let prefill = g.slice_rows(h, 0, trace.prompt_ids.len())?;
        Ok((ce, prefill))
    }

    pub fn masked_ce_loss(&self, trace: &ReasoningTrace) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (ce, _) = self.ce_and_prefill(&mut g, &p, trace)?;
        Ok(g.scalar(ce))
    }

    /// Autoregressive decoding. Stops at EOS (not returned) or after `max_new`
    /// tokens; the prompt is not part of the result.
    pub fn generate(&self, prompt_ids: &[usize], max_new: usize, mode: Decoding) -> Result<Vec<usize>> {
        self.check_ids(prompt_ids)?;
        if prompt_ids.len() >= self.config.max_len {
            return Err(Error::Capacity {
                prompt: prompt_ids.len(),
                max: self.config.max_len,
            });
        }
        let mut rng = match mode {
            Decoding::Sampled { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            Decoding::Greedy => None,
        };
        let budget = max_new.min(self.config.max_len - prompt_ids.len());
        let eos = self.vocab.eos();
        let mut seq = prompt_ids.to_vec();
        let mut out = Vec::new();
        for _ in 0..budget {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let h = self.hidden(&mut g, &p, &seq, true)?;
            let last = g.gather_rows(h, &[seq.len() - 1])?;
            let logits = self.logits_for(&mut g, &p, last)?;
            let row = g.value(logits);
            let next = match (&mut rng, mode) {
                (Some(rng), Decoding::Sampled { temperature, .. }) => sample(row, temperature, rng),
                _ => argmax(row),
            };
            if next == eos {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = Uniform::new(0.0, total).expect("positive mass").sample(rng);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, FD_STEP};

    fn model(d: usize) -> StudentLm {
        let cfg = StudentConfig {
            d_model: d,
            ff_hidden: 2 * d,
            lora_rank: 2,
            max_len: 24,
            ..StudentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        StudentLm::new(cfg, Vocabulary::new(8, 2, 2), &mut rng).unwrap()
    }

    fn randomize_adapters(m: &mut StudentLm, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.adapter_ids() {
            let t = m.params.get_mut(id);
            let shape = t.shape().to_vec();
            let fresh = uniform_tensor(&mut rng, &shape, 0.3);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }

    fn trace(m: &StudentLm) -> ReasoningTrace {
        let v = m.vocab();
        let prompt = vec![v.bos(), 20, 21, 22, v.sep()];
        let target = vec![
            v.id(Token::Mode(1)).unwrap(),
            v.id(Token::Trend(Trend::Up)).unwrap(),
            v.eos(),
        ];
        ReasoningTrace::new(prompt, target, v.pad())
    }

    #[test]
    fn encode_shapes_and_causality() {
        let m = model(16);
        let h = m.encode_prompt(&[1]).unwrap();
        assert_eq!(h.shape(), &[1, 16]);

        let a = m.encode_prompt(&[1, 5, 9, 12]).unwrap();
        let b = m.encode_prompt(&[1, 5, 9, 3]).unwrap();
        assert_eq!(&a.data()[..3 * 16], &b.data()[..3 * 16]);
        assert_ne!(&a.data()[3 * 16..], &b.data()[3 * 16..]);
    }

    #[test]
    fn encode_errors() {
        let m = model(16);
        assert!(matches!(m.encode_prompt(&[1; 25]), Err(Error::Length { .. })));
        assert!(matches!(m.encode_prompt(&[1, 999]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn zero_adapters_match_base_model_bitwise() {
        let m = model(16);
        let ids = [1, 4, 8, 15, 3];
        assert_eq!(m.encode_prompt(&ids).unwrap(), m.encode_prompt_base(&ids).unwrap());
        assert_eq!(m.logits(&ids, true).unwrap(), m.logits(&ids, false).unwrap());
    }

    #[test]
    fn trainable_set_is_exactly_the_adapters() {
        let cfg = StudentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = StudentLm::new(cfg, Vocabulary::new(16, 2, 2), &mut rng).unwrap();
        let tp = m.trainable_params();
        assert_eq!(tp.len(), 2 * 4 * 2);
        assert!(tp.iter().all(|(n, _)| n.contains(".lora_")));
        let count: usize = tp.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(count, 2 * 4 * (32 * 4 + 4 * 32));
    }

    #[test]
    fn base_weights_get_no_gradient() {
        let mut m = model(16);
        randomize_adapters(&mut m, 3);
        let t = trace(&m);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let (ce, _) = m.ce_and_prefill(&mut g, &p, &t).unwrap();
        g.backward(ce).unwrap();
        for (id, (name, tensor)) in m.params.ids().zip(m.params.iter()) {
            let grad = g.grad(p[id]);
            assert_eq!(grad.is_some(), tensor.requires_grad(), "{name}");
        }
    }

    #[test]
    fn ce_matches_position_by_position_oracle() {
        let mut m = model(16);
        randomize_adapters(&mut m, 5);
        let t = trace(&m);
        let loss = m.masked_ce_loss(&t).unwrap();

        let seq = t.sequence();
        let logits = m.logits(&seq, true).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for j in 1..seq.len() {
            if !t.mask[j] {
                continue;
            }
            let row = logits.row(j - 1);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[seq[j]];
            count += 1;
        }
        assert!((loss - total / count as f64).abs() < 1e-10);
    }

    #[test]
    fn ce_ignores_masked_out_content_and_padding() {
        let mut m = model(16);
        randomize_adapters(&mut m, 9);
        let t = trace(&m);
        let base = m.masked_ce_loss(&t).unwrap();

        let pad = m.vocab().pad();
        let mut padded = t.clone();
        padded.target_ids.extend([pad, pad, pad]);
        padded.mask.extend([false; 3]);
        assert_eq!(m.masked_ce_loss(&padded).unwrap(), base);

        // a masked-out trailing label with arbitrary content
        let mut junk = padded.clone();
        let n = junk.target_ids.len();
        junk.target_ids[n - 2] = 11;
        assert_eq!(m.masked_ce_loss(&junk).unwrap(), base);
    }

    #[test]
    fn ce_requires_a_target() {
        let m = model(16);
        let v = m.vocab();
        let t = ReasoningTrace::new(vec![v.bos(), 5], vec![v.pad()], v.pad());
        assert!(matches!(m.masked_ce_loss(&t), Err(Error::EmptyTarget)));
    }

    #[test]
    fn sum_reduction_scales_by_target_count() {
        let mut m = model(16);
        randomize_adapters(&mut m, 2);
        let t = trace(&m);
        let mean = m.masked_ce_loss(&t).unwrap();
        m.set_ce_reduction(CeReduction::Sum);
        let sum = m.masked_ce_loss(&t).unwrap();
        assert!((sum - 3.0 * mean).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut m = model(16);
        randomize_adapters(&mut m, 11);
        let t = trace(&m);
        for id in m.adapter_ids().into_iter().take(4) {
            let x = m.params.get(id).clone();
            let err = finite_difference_check(
                |g, v| {
                    let p = m.params.bind(g).replaced(id, v);
                    let (ce, _) = m.ce_and_prefill(g, &p, &t)?;
                    Ok(ce)
                },
                &x,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{} err {err}", m.params.name(id));
        }
    }

    #[test]
    fn generation_contracts() {
        let mut m = model(16);
        randomize_adapters(&mut m, 4);
        let prompt = [1, 20, 21, 3];
        let one = m.generate(&prompt, 1, Decoding::Greedy).unwrap();
        assert!(one.len() <= 1);
        let a = m.generate(&prompt, 6, Decoding::Greedy).unwrap();
        let b = m.generate(&prompt, 6, Decoding::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&m.vocab().eos()));

        let s1 = m
            .generate(
                &prompt,
                6,
                Decoding::Sampled {
                    temperature: 1.0,
                    seed: 5,
                },
            )
            .unwrap();
        let s2 = m
            .generate(
                &prompt,
                6,
                Decoding::Sampled {
                    temperature: 1.0,
                    seed: 5,
                },
            )
            .unwrap();
        assert_eq!(s1, s2);

        assert!(matches!(
            m.generate(&[1; 24], 3, Decoding::Greedy),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn sampling_seeds_diverge_on_near_uniform_model() {
        let mut m = model(16);
        // zero embeddings give exactly uniform logits
        let emb = m.tok_emb;
        m.params.get_mut(emb).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let prompt = [1, 3];
        let outs: Vec<Vec<usize>> = (0..8)
            .map(|s| {
                m.generate(
                    &prompt,
                    8,
                    Decoding::Sampled {
                        temperature: 1.0,
                        seed: s,
                    },
                )
                .unwrap()
            })
            .collect();
        let distinct: std::collections::HashSet<_> = outs.iter().collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
