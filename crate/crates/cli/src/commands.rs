use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde_json::{json, Value};
use stride::kv::{KvConfig, KvMap};
use stride::metrics::{
    evaluate, forecast, train_model, variance_study, EvalOptions, EvalReport, ExperimentConfig, ModelKind, SeedSummary,
};
use stride::pipeline::Pipeline;
use stride::student::{Decoding, Token};
use stride::synth::{
    derive_seed, generate_dataset, read_jsonl, write_jsonl, ContextWindow, TimeSeriesWindow, TraceRecord,
};
use stride::trainer::{load_checkpoint, StepStats, Trainer};

use crate::config::{config_for_data, sibling_config, RunConfig};
use crate::output::Outputs;
use crate::{EvalArgs, ForecastArgs, GenerateArgs, TeacherArgs, TrainArgs, VarianceArgs};

fn read_windows(path: &Path) -> Result<Vec<TimeSeriesWindow>> {
    let windows: Vec<TimeSeriesWindow> =
        read_jsonl(path).with_context(|| format!("reading windows from {}", path.display()))?;
    ensure!(!windows.is_empty(), "{} holds no windows", path.display());
    Ok(windows)
}

fn decoding(temperature: f64, seed: u64) -> Result<Decoding> {
    if temperature == 0.0 {
        Ok(Decoding::Greedy)
    } else if temperature > 0.0 {
        Ok(Decoding::Sampled { temperature, seed })
    } else {
        bail!("--temperature must be non-negative, got {temperature}")
    }
}

fn write_kv(path: &Path, kv: &KvMap) -> Result<()> {
    fs::write(path, kv.render()).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_generate(a: &GenerateArgs, flags: &KvMap) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref(), flags)?;
    cfg.spec.validate()?;
    ensure!(a.n > 0, "--n must be positive");
    let kv_path = sibling_config(&a.out);
    let out = Outputs::file(&a.out, a.force)?;
    let kv_out = Outputs::file(&kv_path, a.force)?;
    log::info!("sampling {} windows with seed {}", a.n, a.seed);
    let windows = generate_dataset(&cfg.spec, a.n, a.seed)?;
    write_jsonl(&a.out, &windows)?;
    let mut kv = cfg.to_kv();
    kv.set("data.n", a.n);
    kv.set("data.seed", a.seed);
    write_kv(&kv_path, &kv)?;
    out.commit();
    kv_out.commit();
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn cmd_teacher(a: &TeacherArgs) -> Result<()> {
    let cfg_path = config_for_data(a.config.as_deref(), &a.data);
    let mut cfg = RunConfig::load(cfg_path.as_deref(), &KvMap::new())?;
    let windows = read_windows(&a.data)?;
    cfg.fit_to(&windows)?;
    cfg.validate()?;
    if let Some(i) = windows.iter().position(|w| w.true_mode.is_none()) {
        bail!("window {i} has no true_mode; reference reasoning needs it");
    }
    let out = Outputs::file(&a.out, a.force)?;
    // prompts depend on the vocabulary and sizes only, never on weights
    let pipeline = Pipeline::new(cfg.arch.clone(), 0)?;
    let traces = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            pipeline
                .trace_record(i, w, &cfg.spec)
                .with_context(|| format!("window {i}"))
        })
        .collect::<Result<Vec<TraceRecord>>>()?;
    write_jsonl(&a.out, &traces)?;
    out.commit();
    log::info!("wrote {} traces to {}", traces.len(), a.out.display());
    Ok(())
}

fn write_loss_csv(path: &Path, stats: &[StepStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss_total", "loss_ce", "loss_quantile", "grad_norm"])?;
    for s in stats {
        w.write_record([
            s.step.to_string(),
            s.loss_total.to_string(),
            s.loss_ce.map(|v| v.to_string()).unwrap_or_default(),
            s.loss_quantile.to_string(),
            s.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn trainer_kv(t: &Trainer) -> KvMap {
    let mut kv = KvMap::new();
    t.pipeline().config().write(&mut kv);
    let mut train = KvMap::new();
    t.config().write(&mut train);
    for (k, v) in train.iter() {
        kv.set(&format!("train.{k}"), v);
    }
    kv
}

pub fn cmd_train(a: &TrainArgs, flags: &KvMap) -> Result<()> {
    let windows = read_windows(&a.data)?;
    let traces: Vec<TraceRecord> =
        read_jsonl(&a.traces).with_context(|| format!("reading traces from {}", a.traces.display()))?;
    ensure!(
        traces.len() == windows.len(),
        "{} traces for {} windows",
        traces.len(),
        windows.len()
    );
    if let Some(i) = traces.iter().enumerate().position(|(i, t)| t.window_id != i) {
        bail!("trace {i} belongs to window {}", traces[i].window_id);
    }

    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            t.set_steps(flags.get("train.steps").map_or(Ok(a.steps), str::parse)?);
            log::info!("resuming at step {} of {}", t.step(), t.config().steps);
            t
        }
        None => {
            let cfg_path = config_for_data(a.config.as_deref(), &a.data);
            let mut cfg = RunConfig::load(cfg_path.as_deref(), flags)?;
            cfg.fit_to(&windows)?;
            cfg.validate()?;
            let pipeline = Pipeline::new(cfg.arch.clone(), derive_seed(cfg.train.seed, 2))?;
            Trainer::new(pipeline, cfg.train.clone())?
        }
    };
    let examples = windows
        .iter()
        .zip(&traces)
        .enumerate()
        .map(|(i, (w, t))| {
            trainer
                .pipeline()
                .example_from_record(w, t)
                .with_context(|| format!("window {i}"))
        })
        .collect::<Result<Vec<_>>>()?;

    let out = Outputs::dir(&a.out, &["model.ckpt", "loss.csv", "config.kv"], a.force)?;
    let total = trainer.config().steps;
    let every = (total / 20).max(1);
    let stats = trainer.run_with(&examples, |s| {
        if s.step % every == 0 || s.step == total {
            log::info!(
                "step {}/{total}: loss {:.4} (ce {}, quantile {:.4})",
                s.step,
                s.loss_total,
                s.loss_ce.map_or("-".into(), |v| format!("{v:.4}")),
                s.loss_quantile
            );
        }
    })?;
    trainer.save(out.path(0))?;
    write_loss_csv(out.path(1), &stats)?;
    let mut kv = trainer_kv(&trainer);
    kv.set("path.data", a.data.display());
    kv.set("path.traces", a.traces.display());
    write_kv(out.path(2), &kv)?;
    out.commit();
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn write_windows_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "window_id",
        "seed",
        "mae",
        "mase",
        "crps",
        "mase_degenerate",
        "width",
        "true_mode",
        "predicted_mode",
        "reasoning",
    ])?;
    let opt = |v: Option<usize>| v.map(|m| m.to_string()).unwrap_or_default();
    for r in &report.windows {
        w.write_record([
            r.window_id.to_string(),
            r.seed.to_string(),
            r.mae.to_string(),
            r.mase.to_string(),
            r.crps.to_string(),
            r.mase_degenerate.to_string(),
            r.width.to_string(),
            opt(r.true_mode),
            opt(r.predicted_mode),
            r.reasoning.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    ensure!(a.season > 0, "--season must be positive");
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let windows = read_windows(&a.data)?;
    let opts = EvalOptions {
        season: a.season,
        decoding: decoding(a.temperature, a.seed)?,
        seed: a.seed,
        model_id: a
            .checkpoint
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
    };
    let out = Outputs::dir(&a.out, &["report.json", "windows.csv", "config.kv"], a.force)?;
    let report = evaluate(trainer.pipeline(), &windows, &opts)?;
    fs::write(out.path(0), report.to_json()? + "\n")?;
    write_windows_csv(out.path(1), &report)?;
    let mut kv = trainer_kv(&trainer);
    kv.set("eval.season", a.season);
    kv.set("eval.seed", a.seed);
    kv.set("eval.temperature", a.temperature);
    kv.set("path.checkpoint", a.checkpoint.display());
    kv.set("path.data", a.data.display());
    write_kv(out.path(2), &kv)?;
    out.commit();
    let m = report.aggregate;
    log::info!("MAE {:.4}  MASE {:.4}  CRPS {:.4}", m.mae, m.mase, m.crps);
    Ok(())
}

/// `{x, timestamps?, event_label?}`; other fields are ignored.
fn parse_context(v: &Value) -> Result<ContextWindow> {
    let x: Vec<Vec<f64>> = serde_json::from_value(v.get("x").cloned().context("window JSON needs an `x` field")?)
        .context("`x` must be a list of rows of numbers")?;
    let width = x.first().map_or(0, Vec::len);
    ensure!(width > 0, "`x` is empty");
    ensure!(x.iter().all(|r| r.len() == width), "`x` rows have different lengths");
    let timestamps = match v.get("timestamps") {
        Some(t) => serde_json::from_value(t.clone()).context("`timestamps` must be integers")?,
        None => (0..x.len() as i64).collect(),
    };
    let event = match v.get("event_label").and_then(Value::as_str) {
        Some(label) => match label.parse::<Token>() {
            Ok(Token::Event(e)) => e,
            _ => bail!("event_label {label:?} is not EVENT_k or EVENT_NONE"),
        },
        None => None,
    };
    Ok(ContextWindow { x, timestamps, event })
}

pub fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let text = fs::read_to_string(&a.window_json).with_context(|| format!("reading {}", a.window_json.display()))?;
    let ctx = parse_context(&serde_json::from_str(&text).context("window file is not JSON")?)?;
    let (reasoning, f) = forecast(trainer.pipeline(), &ctx, decoding(a.temperature, a.seed)?)?;
    let tokens: Vec<String> = reasoning.iter().map(ToString::to_string).collect();
    println!("reasoning: {}", tokens.join(" "));
    let mut header = vec!["step".to_string(), "variate".to_string()];
    header.extend(f.levels().as_slice().iter().map(|q| format!("q{q}")));
    println!("{}", header.join("\t"));
    for (h, step) in f.values().iter().enumerate() {
        for (v, cell) in step.iter().enumerate() {
            let vals: Vec<String> = cell.iter().map(|x| format!("{x:.6}")).collect();
            println!("{}\t{v}\t{}", h + 1, vals.join("\t"));
        }
    }
    Ok(())
}

pub fn cmd_variance_study(a: &VarianceArgs, flags: &KvMap) -> Result<()> {
    let cfg = RunConfig::load(a.spec.as_deref(), flags)?;
    cfg.validate()?;
    let exp = ExperimentConfig {
        spec: cfg.spec.clone(),
        arch: cfg.arch.clone(),
        train: cfg.train.clone(),
        n_train: cfg.n_train,
        n_test: cfg.n_test,
    };
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| base.wrapping_add(i)).collect();
    let out = Outputs::dir(&a.out, &["variance.json", "config.kv"], a.force)?;
    let held_out = exp.test_windows(base)?;

    let (mut fused, mut baseline) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        for (kind, models) in [(ModelKind::Fused, &mut fused), (ModelKind::Baseline, &mut baseline)] {
            log::info!("seed {seed}: training {kind:?}");
            models.push(train_model(&exp, kind, seed)?.0);
        }
    }
    let study = variance_study(&fused, &baseline, &cfg.spec, &held_out)?;
    let summarize = |models: &[Pipeline], id: &str| -> Result<SeedSummary> {
        let reports = models
            .iter()
            .zip(&seeds)
            .map(|(p, &seed)| {
                let opts = EvalOptions {
                    seed,
                    model_id: id.into(),
                    ..EvalOptions::default()
                };
                evaluate(p, &held_out, &opts)
            })
            .collect::<stride::Result<Vec<_>>>()?;
        Ok(SeedSummary::from_reports(&reports)?)
    };
    let report = json!({
        "seeds": seeds,
        "study": study,
        "fused": summarize(&fused, "fused")?,
        "baseline": summarize(&baseline, "baseline")?,
    });
    fs::write(out.path(0), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut kv = cfg.to_kv();
    if let Some(p) = &a.spec {
        kv.set("path.spec", p.display());
    }
    write_kv(out.path(1), &kv)?;
    out.commit();
    log::info!(
        "median 0.1-0.9 width: fused {:.4}, zero prior {:.4}",
        study.median_fused_width,
        study.median_baseline_width
    );
    Ok(())
}
