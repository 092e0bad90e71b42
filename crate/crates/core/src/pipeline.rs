//! The joint model: student LM, projection bridge and forecaster, with the
//! per-example forward pass used for training and inference.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse, pool_and_project, FusionMode, Projection};
use crate::kv::{parse_list, parse_value, render_list, KvConfig, KvMap};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::student::{CeReduction, Decoding, Frequency, ReasoningTrace, StudentConfig, StudentLm, Token, Vocabulary};
use crate::synth::{
    baseline_reasoning, build_prompt, teacher_reasoning, ContextWindow, MixtureSpec, TimeSeriesWindow, TraceRecord,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::tsfm::{ForecastModel, QuantileForecast, QuantileLevels, TsfmConfig};

/// Student positions kept free for the reasoning target after the prompt.
pub const TARGET_RESERVE: usize = 8;

/// Where the reasoning prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorSource {
    /// Pooled and projected student pre-fill states.
    #[default]
    Student,
    /// A zero vector: the forecaster sees only the history.
    Zero,
}

impl FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Self::Student),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!(
                "unknown prior source {other:?} (expected student or zero)"
            ))),
        }
    }
}

impl fmt::Display for PriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Student => "student",
            Self::Zero => "zero",
        })
    }
}

impl FromStr for CeReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!(
                "unknown ce reduction {other:?} (expected mean or sum)"
            ))),
        }
    }
}

impl fmt::Display for CeReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

/// Architecture of all three components.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub student: StudentConfig,
    pub tsfm: TsfmConfig,
    pub fusion_mode: FusionMode,
    pub prior: PriorSource,
    pub n_bins: usize,
    pub n_modes: usize,
    pub frequency: Frequency,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            student: StudentConfig::default(),
            tsfm: TsfmConfig::default(),
            fusion_mode: FusionMode::Prefix,
            prior: PriorSource::Student,
            n_bins: 16,
            n_modes: 2,
            frequency: Frequency::Hourly,
        }
    }
}

impl PipelineConfig {
    /// Default sizes with the data-dependent fields taken from `spec`.
    pub fn for_spec(spec: &MixtureSpec) -> Self {
        let mut c = Self::default();
        c.match_spec(spec);
        c
    }

    pub fn match_spec(&mut self, spec: &MixtureSpec) {
        self.tsfm.horizon = spec.horizon;
        self.tsfm.n_variates = spec.n_variates;
        self.tsfm.max_patches = self
            .tsfm
            .max_patches
            .max(spec.context_len.div_ceil(self.tsfm.patch_len.max(1)));
        self.n_modes = spec.n_modes();
        self.frequency = spec.frequency;
    }

    pub fn validate(&self) -> Result<()> {
        if self.student.max_len <= TARGET_RESERVE + 5 {
            return Err(Error::Config(format!(
                "student.max_len {} leaves no room for a prompt",
                self.student.max_len
            )));
        }
        if self.n_bins == 0 || self.n_modes == 0 {
            return Err(Error::Config("n_bins and n_modes must be positive".into()));
        }
        Ok(())
    }
}

impl KvConfig for PipelineConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let (s, t) = (&mut self.student, &mut self.tsfm);
        match key {
            "student.d_model" => s.d_model = parse_value(key, value)?,
            "student.n_heads" => s.n_heads = parse_value(key, value)?,
            "student.n_blocks" => s.n_blocks = parse_value(key, value)?,
            "student.ff_hidden" => s.ff_hidden = parse_value(key, value)?,
            "student.lora_rank" => s.lora_rank = parse_value(key, value)?,
            "student.max_len" => s.max_len = parse_value(key, value)?,
            "student.ce_reduction" => s.ce_reduction = value.parse()?,
            "tsfm.d_model" => t.d_model = parse_value(key, value)?,
            "tsfm.n_heads" => t.n_heads = parse_value(key, value)?,
            "tsfm.n_blocks" => t.n_blocks = parse_value(key, value)?,
            "tsfm.ff_hidden" => t.ff_hidden = parse_value(key, value)?,
            "tsfm.patch_len" => t.patch_len = parse_value(key, value)?,
            "tsfm.max_patches" => t.max_patches = parse_value(key, value)?,
            "tsfm.n_variates" => t.n_variates = parse_value(key, value)?,
            "tsfm.horizon" => t.horizon = parse_value(key, value)?,
            "tsfm.levels" => t.levels = QuantileLevels::new(parse_list(key, value)?)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "prior" => self.prior = value.parse()?,
            "n_bins" => self.n_bins = parse_value(key, value)?,
            "n_modes" => self.n_modes = parse_value(key, value)?,
            "frequency" => self.frequency = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn write(&self, out: &mut KvMap) {
        let (s, t) = (&self.student, &self.tsfm);
        out.set("student.d_model", s.d_model);
        out.set("student.n_heads", s.n_heads);
        out.set("student.n_blocks", s.n_blocks);
        out.set("student.ff_hidden", s.ff_hidden);
        out.set("student.lora_rank", s.lora_rank);
        out.set("student.max_len", s.max_len);
        out.set("student.ce_reduction", s.ce_reduction);
        out.set("tsfm.d_model", t.d_model);
        out.set("tsfm.n_heads", t.n_heads);
        out.set("tsfm.n_blocks", t.n_blocks);
        out.set("tsfm.ff_hidden", t.ff_hidden);
        out.set("tsfm.patch_len", t.patch_len);
        out.set("tsfm.max_patches", t.max_patches);
        out.set("tsfm.n_variates", t.n_variates);
        out.set("tsfm.horizon", t.horizon);
        out.set("tsfm.levels", render_list(t.levels.as_slice()));
        out.set("fusion_mode", self.fusion_mode);
        out.set("prior", self.prior);
        out.set("n_bins", self.n_bins);
        out.set("n_modes", self.n_modes);
        out.set("frequency", self.frequency);
    }
}

/// Weights of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

/// One window prepared for training: context, future and reasoning trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub context: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub trace: ReasoningTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Student,
    Projection,
    Forecaster,
}

/// Address of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub part: Part,
    pub id: ParamId,
}

/// Loss values of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleLoss {
    pub total: f64,
    /// `None` when the student was not run.
    pub ce: Option<f64>,
    pub quantile: f64,
}

/// Handles of one recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub total: Var,
    pub ce: Option<Var>,
    pub quantile: Var,
    pub student: Option<Bound>,
    pub projection: Bound,
    pub forecaster: Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    config: PipelineConfig,
    student: StudentLm,
    projection: Projection,
    forecaster: ForecastModel,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(config.n_bins, config.n_modes, config.n_modes);
        let student = StudentLm::new(config.student, vocab, &mut rng)?;
        let projection = Projection::new(config.student.d_model, config.tsfm.d_model, &mut rng);
        let forecaster = ForecastModel::new(config.tsfm.clone(), &mut rng)?;
        Ok(Self {
            config,
            student,
            projection,
            forecaster,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn student(&self) -> &StudentLm {
        &self.student
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn forecaster(&self) -> &ForecastModel {
        &self.forecaster
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.student.vocab()
    }

    fn store(&self, part: Part) -> &ParamStore {
        match part {
            Part::Student => self.student.params(),
            Part::Projection => self.projection.params(),
            Part::Forecaster => self.forecaster.params(),
        }
    }

    fn store_mut(&mut self, part: Part) -> &mut ParamStore {
        match part {
            Part::Student => self.student.params_mut(),
            Part::Projection => self.projection.params_mut(),
            Part::Forecaster => self.forecaster.params_mut(),
        }
    }

    /// Trainable tensors in canonical order: student adapters, projection,
    /// forecaster.
    pub fn slots(&self) -> Vec<Slot> {
        [Part::Student, Part::Projection, Part::Forecaster]
            .into_iter()
            .flat_map(|part| {
                let store = self.store(part);
                store
                    .ids()
                    .filter(|&id| store.get(id).requires_grad())
                    .map(move |id| Slot { part, id })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn param(&self, slot: Slot) -> &Tensor {
        self.store(slot.part).get(slot.id)
    }

    pub fn param_mut(&mut self, slot: Slot) -> &mut Tensor {
        self.store_mut(slot.part).get_mut(slot.id)
    }

    pub fn slot_name(&self, slot: Slot) -> &str {
        self.store(slot.part).name(slot.id)
    }

    /// Every parameter (trainable or not) of all three components.
    pub fn named_params(&self) -> Vec<(&str, &Tensor)> {
        [Part::Student, Part::Projection, Part::Forecaster]
            .into_iter()
            .flat_map(|p| self.store(p).iter())
            .collect()
    }

    pub fn load_param(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        for part in [Part::Student, Part::Projection, Part::Forecaster] {
            if self.store(part).find(name).is_some() {
                return self.store_mut(part).load(name, shape, data);
            }
        }
        Err(Error::Incompatible(format!("unknown parameter {name}")))
    }

    fn max_prompt(&self) -> usize {
        self.config.student.max_len - TARGET_RESERVE
    }

    /// Serialized context plus baseline draft, within the student's budget.
    pub fn prompt_for(&self, ctx: &ContextWindow) -> Result<Vec<usize>> {
        let r_base = baseline_reasoning(ctx);
        build_prompt(ctx, &r_base, self.vocab(), self.config.frequency, self.max_prompt())
    }

    fn check_window(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
        let (h, v) = (self.config.tsfm.horizon, self.config.tsfm.n_variates);
        let rows_ok = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == v);
        if y.len() != h || !rows_ok(x) || !rows_ok(y) {
            return Err(Error::Incompatible(format!(
                "window with {} future steps and {} variates does not match model horizon {h} / variates {v}",
                y.len(),
                x.first().map_or(0, Vec::len)
            )));
        }
        Ok(())
    }

    /// Pairs a window with its teacher trace.
    pub fn example(&self, window: &TimeSeriesWindow, spec: &MixtureSpec) -> Result<TrainExample> {
        self.check_window(&window.x, &window.y)?;
        let prompt = self.prompt_for(&window.context())?;
        let target = self.vocab().encode(&teacher_reasoning(window, spec)?)?;
        Ok(TrainExample {
            context: window.x.clone(),
            y: window.y.clone(),
            trace: ReasoningTrace::new(prompt, target, self.vocab().pad()),
        })
    }

    /// Offline teacher output for one window, as exported to disk.
    pub fn trace_record(&self, window_id: usize, window: &TimeSeriesWindow, spec: &MixtureSpec) -> Result<TraceRecord> {
        let ctx = window.context();
        let r_base = baseline_reasoning(&ctx);
        Ok(TraceRecord {
            window_id,
            r_ref: teacher_reasoning(window, spec)?
                .iter()
                .map(ToString::to_string)
                .collect(),
            r_base: r_base.iter().map(ToString::to_string).collect(),
            prompt_ids: self.prompt_for(&ctx)?,
        })
    }

    /// Pairs a window with a stored offline trace record.
    pub fn example_from_record(&self, window: &TimeSeriesWindow, record: &TraceRecord) -> Result<TrainExample> {
        self.check_window(&window.x, &window.y)?;
        let tokens = record
            .r_ref
            .iter()
            .map(|s| s.parse::<Token>())
            .collect::<Result<Vec<_>>>()?;
        let target = self.vocab().encode(&tokens)?;
        if let Some(&bad) = record.prompt_ids.iter().find(|&&i| !self.vocab().contains_id(i)) {
            return Err(Error::Vocabulary(format!("prompt id {bad} outside vocabulary")));
        }
        Ok(TrainExample {
            context: window.x.clone(),
            y: window.y.clone(),
            trace: ReasoningTrace::new(record.prompt_ids.clone(), target, self.vocab().pad()),
        })
    }

    fn uses_student(&self, w: LossWeights) -> bool {
        self.config.prior == PriorSource::Student || w.alpha != 0.0
    }

    fn fused_head(
        &self,
        g: &mut Graph,
        fp: &Bound,
        pp: &Bound,
        x: &[Vec<f64>],
        prior_rows: Option<Var>,
    ) -> Result<(Var, crate::tsfm::Normalization)> {
        let emb = self.forecaster.embed_context(g, fp, x)?;
        let e_r = match prior_rows {
            Some(h) => pool_and_project(g, h, self.projection.var(pp))?,
            None => g.constant(vec![self.config.tsfm.d_model], vec![0.0; self.config.tsfm.d_model])?,
        };
        let prefix = self.config.fusion_mode == FusionMode::Prefix;
        let tags = (0..emb.layout.n_variates)
            .map(|v| self.forecaster.prior_tag(g, fp, v, prefix))
            .collect::<Result<Vec<_>>>()?;
        let (fused, layout) = fuse(g, e_r, emb.rows, emb.layout, self.config.fusion_mode, &tags)?;
        let raw = self.forecaster.decode(g, fp, fused, layout)?;
        Ok((raw, emb.norm))
    }

    /// Records `α·L_CE + β·L_quantile` for one example.
    pub fn forward(&self, g: &mut Graph, ex: &TrainExample, w: LossWeights) -> Result<Forward> {
        self.check_window(&ex.context, &ex.y)?;
        let projection = self.projection.params().bind(g);
        let forecaster = self.forecaster.params().bind(g);
        let (student, ce, prefill) = if self.uses_student(w) {
            let sp = self.student.params().bind(g);
            let (ce, prefill) = self.student.ce_and_prefill(g, &sp, &ex.trace)?;
            (Some(sp), Some(ce), Some(prefill))
        } else {
            (None, None, None)
        };
        let prior_rows = match self.config.prior {
            PriorSource::Student => prefill,
            PriorSource::Zero => None,
        };
        let (raw, norm) = self.fused_head(g, &forecaster, &projection, &ex.context, prior_rows)?;
        let quantile = self.forecaster.quantile_loss_var(g, raw, &ex.y, &norm)?;
        let q_term = g.scale(quantile, w.beta);
        let total = match ce {
            Some(ce) if w.alpha != 0.0 => {
                let c_term = g.scale(ce, w.alpha);
                g.add(c_term, q_term)?
            }
            _ => q_term,
        };
        Ok(Forward {
            total,
            ce,
            quantile,
            student,
            projection,
            forecaster,
        })
    }

    /// Loss values and per-slot gradients of one example, in [`slots`](Self::slots) order.
    pub fn loss_and_grads(&self, ex: &TrainExample, w: LossWeights) -> Result<(ExampleLoss, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, ex, w)?;
        g.backward(f.total)?;
        let loss = ExampleLoss {
            total: g.scalar(f.total),
            ce: f.ce.map(|v| g.scalar(v)),
            quantile: g.scalar(f.quantile),
        };
        let grads = self
            .slots()
            .into_iter()
            .map(|slot| {
                let bound = match slot.part {
                    Part::Student => f.student.as_ref(),
                    Part::Projection => Some(&f.projection),
                    Part::Forecaster => Some(&f.forecaster),
                };
                bound
                    .and_then(|b| g.grad(b[slot.id]))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.param(slot).numel()])
            })
            .collect();
        Ok((loss, grads))
    }

    /// The reasoning prior `e_R` for a context, or zeros under a zero prior.
    pub fn prior(&self, ctx: &ContextWindow) -> Result<Tensor> {
        let d = self.config.tsfm.d_model;
        if self.config.prior == PriorSource::Zero {
            return Ok(Tensor::zeros(&[d]));
        }
        let mut g = Graph::new();
        let sp = self.student.params().bind(&mut g);
        let pp = self.projection.params().bind(&mut g);
        let h = self.student.hidden(&mut g, &sp, &self.prompt_for(ctx)?, true)?;
        let e_r = pool_and_project(&mut g, h, self.projection.var(&pp))?;
        Ok(g.tensor(e_r))
    }

    /// Quantile forecast from the context alone; the future is never read.
    pub fn forecast(&self, ctx: &ContextWindow) -> Result<QuantileForecast> {
        let mut g = Graph::new();
        let fp = self.forecaster.params().bind(&mut g);
        let pp = self.projection.params().bind(&mut g);
        let prior_rows = match self.config.prior {
            PriorSource::Student => {
                let sp = self.student.params().bind(&mut g);
                let prompt = self.prompt_for(ctx)?;
                Some(self.student.hidden(&mut g, &sp, &prompt, true)?)
            }
            PriorSource::Zero => None,
        };
        let (raw, norm) = self.fused_head(&mut g, &fp, &pp, &ctx.x, prior_rows)?;
        self.forecaster.to_forecast(g.value(raw), Some(&norm))
    }

    /// Student-generated reasoning for a context (EOS excluded).
    pub fn reason(&self, ctx: &ContextWindow, decoding: Decoding) -> Result<Vec<Token>> {
        let prompt = self.prompt_for(ctx)?;
        let ids = self.student.generate(&prompt, TARGET_RESERVE, decoding)?;
        self.vocab().decode(&ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    pub(crate) fn small_config(spec: &MixtureSpec) -> PipelineConfig {
        let mut c = PipelineConfig::for_spec(spec);
        c.student = StudentConfig {
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            ff_hidden: 16,
            lora_rank: 2,
            max_len: 64,
            ce_reduction: CeReduction::Mean,
        };
        c.tsfm.d_model = 16;
        c.tsfm.ff_hidden = 16;
        c
    }

    fn spec() -> MixtureSpec {
        MixtureSpec {
            context_len: 24,
            horizon: 4,
            ..MixtureSpec::default()
        }
    }

    /// Randomizes adapter B factors so the adapters are not a no-op.
    fn perturbed(mut p: Pipeline) -> Pipeline {
        let mut seed = 1u64;
        for slot in p.slots() {
            for v in p.param_mut(slot).data_mut() {
                seed = crate::synth::derive_seed(seed, 7);
                *v += ((seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2;
            }
        }
        p
    }

    #[test]
    fn kv_round_trip() {
        let mut c = small_config(&spec());
        c.fusion_mode = FusionMode::Substitute;
        c.prior = PriorSource::Zero;
        let mut kv = KvMap::new();
        c.write(&mut kv);
        let mut back = PipelineConfig::default();
        for (k, v) in kv.iter() {
            assert!(back.apply(k, v).unwrap(), "{k}");
        }
        assert_eq!(back, c);
        assert!(!back.apply("nonsense", "1").unwrap());
        assert!(back.apply("fusion_mode", "sideways").is_err());
    }

    #[test]
    fn slots_cover_adapters_projection_and_forecaster() {
        let p = Pipeline::new(small_config(&spec()), 0).unwrap();
        let slots = p.slots();
        let students = slots.iter().filter(|s| s.part == Part::Student).count();
        assert_eq!(students, p.student().adapter_ids().len());
        assert_eq!(slots.iter().filter(|s| s.part == Part::Projection).count(), 1);
        assert_eq!(
            slots.iter().filter(|s| s.part == Part::Forecaster).count(),
            p.forecaster().params().len()
        );
        assert!(slots.iter().all(|&s| !p.slot_name(s).contains("tok_emb")));
    }

    #[test]
    fn total_is_weighted_sum() {
        let s = spec();
        let p = Pipeline::new(small_config(&s), 1).unwrap();
        let w = generate_dataset(&s, 1, 3).unwrap().remove(0);
        let ex = p.example(&w, &s).unwrap();
        for (alpha, beta) in [(1.0, 1.0), (0.3, 2.0), (0.0, 1.0), (1.0, 0.0)] {
            let (l, _) = p.loss_and_grads(&ex, LossWeights { alpha, beta }).unwrap();
            let ce = l.ce.unwrap();
            assert!((l.total - (alpha * ce + beta * l.quantile)).abs() < 1e-12);
        }
    }

    #[test]
    fn path_isolation() {
        let s = spec();
        let p = perturbed(Pipeline::new(small_config(&s), 2).unwrap());
        let ex = p.example(&generate_dataset(&s, 1, 5).unwrap()[0], &s).unwrap();
        let slots = p.slots();
        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();

        let (_, q_only) = p.loss_and_grads(&ex, LossWeights { alpha: 0.0, beta: 1.0 }).unwrap();
        let adapter_norm: f64 = slots
            .iter()
            .zip(&q_only)
            .filter(|(s, _)| s.part == Part::Student)
            .map(|(_, g)| norm(g))
            .sum();
        assert!(adapter_norm > 0.0);
        let proj = slots.iter().position(|s| s.part == Part::Projection).unwrap();
        assert!(norm(&q_only[proj]) > 0.0);

        let (_, ce_only) = p.loss_and_grads(&ex, LossWeights { alpha: 1.0, beta: 0.0 }).unwrap();
        for (s, g) in slots.iter().zip(&ce_only) {
            if s.part != Part::Student {
                assert!(g.iter().all(|&v| v == 0.0), "{}", p.slot_name(*s));
            }
        }
    }

    #[test]
    fn zero_prior_without_ce_skips_student() {
        let s = spec();
        let mut c = small_config(&s);
        c.prior = PriorSource::Zero;
        let p = Pipeline::new(c, 3).unwrap();
        let ex = p.example(&generate_dataset(&s, 1, 5).unwrap()[0], &s).unwrap();
        let (l, g) = p.loss_and_grads(&ex, LossWeights { alpha: 0.0, beta: 1.0 }).unwrap();
        assert!(l.ce.is_none());
        for (slot, grad) in p.slots().iter().zip(&g) {
            if slot.part != Part::Forecaster {
                assert!(grad.iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(
            p.prior(&generate_dataset(&s, 1, 5).unwrap()[0].context())
                .unwrap()
                .data(),
            &[0.0; 16]
        );
    }

    #[test]
    fn training_prefill_matches_inference_prior() {
        let s = spec();
        let p = perturbed(Pipeline::new(small_config(&s), 4).unwrap());
        let w = &generate_dataset(&s, 1, 9).unwrap()[0];
        let ex = p.example(w, &s).unwrap();
        let mut g = Graph::new();
        let sp = p.student().params().bind(&mut g);
        let pp = p.projection().params().bind(&mut g);
        let (_, prefill) = p.student().ce_and_prefill(&mut g, &sp, &ex.trace).unwrap();
        let e_r = pool_and_project(&mut g, prefill, p.projection().var(&pp)).unwrap();
        assert_eq!(g.value(e_r), p.prior(&w.context()).unwrap().data());
    }

    #[test]
    fn forecast_ignores_future_and_sampling_seed() {
        let s = spec();
        let p = perturbed(Pipeline::new(small_config(&s), 5).unwrap());
        let mut w = generate_dataset(&s, 1, 2).unwrap().remove(0);
        let f1 = p.forecast(&w.context()).unwrap();
        w.y.iter_mut().flatten().for_each(|v| *v = 1e9);
        assert_eq!(f1, p.forecast(&w.context()).unwrap());
        for seed in [1, 2] {
            p.reason(&w.context(), Decoding::Sampled { temperature: 1.0, seed })
                .unwrap();
        }
        assert_eq!(f1, p.forecast(&w.context()).unwrap());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let s = spec();
        let p = perturbed(Pipeline::new(small_config(&s), 6).unwrap());
        let ex = p.example(&generate_dataset(&s, 1, 4).unwrap()[0], &s).unwrap();
        let w = LossWeights::default();
        let (_, grads) = p.loss_and_grads(&ex, w).unwrap();
        let slots = p.slots();
        // one adapter, the projection, and the first forecaster block weight
        let picks = [
            0,
            slots.iter().position(|s| s.part == Part::Projection).unwrap(),
            slots
                .iter()
                .position(|s| p.slot_name(*s).ends_with("block0.wq"))
                .unwrap(),
        ];
        for &i in &picks {
            let slot = slots[i];
            let x0 = p.param(slot).clone();
            let mut worst: f64 = 0.0;
            for (j, &analytic) in grads[i].iter().enumerate().take(6) {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.param_mut(slot).data_mut()[j] = x0.data()[j] + delta;
                    q.loss_and_grads(&ex, w).unwrap().0.total
                };
                let h = crate::tensor::FD_STEP;
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
            }
            assert!(worst < 1e-4, "{} {worst}", p.slot_name(slot));
        }
    }
}
