//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stride::kv::{parse_value, KvConfig, KvMap};
use stride::pipeline::PipelineConfig;
use stride::synth::{MixtureSpec, TimeSeriesWindow};
use stride::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: MixtureSpec,
    pub arch: PipelineConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = MixtureSpec::default();
        Self {
            arch: PipelineConfig::for_spec(&spec),
            spec,
            train: TrainConfig::default(),
            n_train: 2000,
            n_test: 500,
            seeds: 5,
        }
    }
}

/// Prefixes of the provenance entries echoed into output directories. They
/// are accepted so any echoed config can be fed back in, and have no effect.
const RECORD_PREFIXES: &[&str] = &["data.", "path.", "eval."];

impl KvConfig for RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> stride::Result<bool> {
        if RECORD_PREFIXES.iter().any(|p| key.starts_with(p)) {
            return Ok(true);
        }
        if self.spec.apply(key, value)? {
            return Ok(true);
        }
        if let Some(k) = key.strip_prefix("train.") {
            return self.train.apply(k, value);
        }
        match key {
            "run.n_train" => self.n_train = parse_value(key, value)?,
            "run.n_test" => self.n_test = parse_value(key, value)?,
            "run.seeds" => self.seeds = parse_value(key, value)?,
            _ => return self.arch.apply(key, value),
        }
        Ok(true)
    }

    fn write(&self, out: &mut KvMap) {
        self.spec.write(out);
        self.arch.write(out);
        let mut train = KvMap::new();
        self.train.write(&mut train);
        for (k, v) in train.iter() {
            out.set(&format!("train.{k}"), v);
        }
        out.set("run.n_train", self.n_train);
        out.set("run.n_test", self.n_test);
        out.set("run.seeds", self.seeds);
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `flags`. Unknown keys are errors. The
    /// architecture's data-dependent fields follow the mixture spec.
    pub fn load(file: Option<&Path>, flags: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let kv = KvMap::parse(&text).with_context(|| format!("config {}", path.display()))?;
            cfg.apply_all(&kv)
                .with_context(|| format!("config {}", path.display()))?;
        }
        cfg.apply_all(flags)?;
        cfg.arch.match_spec(&cfg.spec);
        Ok(cfg)
    }

    fn apply_all(&mut self, kv: &KvMap) -> Result<()> {
        for (k, v) in kv.iter() {
            if !self.apply(k, v)? {
                bail!("unknown config key {k:?}");
            }
        }
        Ok(())
    }

    /// Takes window shapes from the data itself.
    pub fn fit_to(&mut self, windows: &[TimeSeriesWindow]) -> Result<()> {
        let first = windows.first().context("dataset is empty")?;
        let shape = |w: &TimeSeriesWindow| (w.x.len(), w.y.len(), w.x.first().map_or(0, Vec::len));
        let want = shape(first);
        if let Some(i) = windows.iter().position(|w| shape(w) != want) {
            bail!("window {i} has shape {:?}, window 0 has {want:?}", shape(&windows[i]));
        }
        (self.spec.context_len, self.spec.horizon, self.spec.n_variates) = want;
        self.arch.match_spec(&self.spec);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.n_train == 0 || self.n_test == 0 || self.seeds == 0 {
            bail!("run.n_train, run.n_test and run.seeds must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        self.write(&mut kv);
        kv
    }
}

/// The config file written next to a generated dataset.
pub fn sibling_config(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".config.kv");
    data.with_file_name(name)
}

/// `--config` if given, else the dataset's sibling file when present.
pub fn config_for_data(explicit: Option<&Path>, data: &Path) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| {
        let s = sibling_config(data);
        s.exists().then(|| {
            log::info!("using {}", s.display());
            s
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_kv() {
        let mut cfg = RunConfig::default();
        cfg.spec.cue_strength = 0.4;
        cfg.train.steps = 7;
        cfg.n_test = 3;
        let back = RunConfig::load(None, &cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.kv");
        fs::write(&path, "# train\ntrain.steps = 11\ntrain.batch_size = 3\n").unwrap();
        let mut flags = KvMap::new();
        flags.set("train.steps", 5);
        let cfg = RunConfig::load(Some(&path), &flags).unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut flags = KvMap::new();
        flags.set("train.stepz", 5);
        assert!(RunConfig::load(None, &flags).is_err());
    }

    #[test]
    fn echoed_records_are_ignored() {
        let mut flags = RunConfig::default().to_kv();
        flags.set("data.seed", 3);
        flags.set("path.data", "x.jsonl");
        assert_eq!(RunConfig::load(None, &flags).unwrap(), RunConfig::default());
    }

    #[test]
    fn sibling_name() {
        assert_eq!(sibling_config(Path::new("a/b.jsonl")), Path::new("a/b.jsonl.config.kv"));
    }
}
