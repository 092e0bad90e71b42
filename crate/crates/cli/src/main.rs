mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use stride::kv::KvMap;

/// Reasoning-prior quantile forecasting on synthetic mixtures.
///
/// Verbosity follows STRIDE_LOG (debug, info, warn); the default is info.
#[derive(Debug, Parser)]
#[command(name = "stride", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample windows from the mixture into a JSONL file.
    Generate(GenerateArgs),
    /// Write reference and baseline reasoning for every window.
    Teacher(TeacherArgs),
    /// Train a pipeline from windows and their traces.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Forecast a single window given as JSON.
    Forecast(ForecastArgs),
    /// Train fused and zero-prior models over several seeds and compare
    /// their forecast spread.
    VarianceStudy(VarianceArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Output JSONL file; its effective config goes to `<out>.config.kv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of windows.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Probability that the event label reveals the mode.
    #[arg(long, default_value_t = 0.9)]
    pub cue_strength: f64,
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    #[arg(long, default_value_t = 64)]
    pub context_len: usize,
    #[arg(long, default_value_t = 1)]
    pub n_variates: usize,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct TeacherArgs {
    /// Windows with `true_mode` set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config file; defaults to `<data>.config.kv` when that exists.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    /// Config file; defaults to `<data>.config.kv` when that exists.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for model.ckpt, loss.csv and config.kv.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; only --steps is taken from the flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    /// Weight of the reasoning cross-entropy.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Weight of the quantile loss.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// prefix or substitute.
    #[arg(long, default_value = "prefix")]
    pub fusion_mode: String,
    /// student or zero.
    #[arg(long, default_value = "student")]
    pub prior: String,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for report.json, windows.csv and config.kv.
    #[arg(long)]
    pub out: PathBuf,
    /// Seasonal period of the MASE scale.
    #[arg(long, default_value_t = 1)]
    pub season: usize,
    /// Sampling seed, also recorded with every row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reasoning sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, clap::Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON object with `x` and optional `timestamps` and `event_label`.
    #[arg(long)]
    pub window_json: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Debug, clap::Args)]
pub struct VarianceArgs {
    /// Config file with the mixture and training settings.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of seeds per model.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Directory for variance.json and config.kv.
    #[arg(long)]
    pub out: PathBuf,
    /// First seed; runs use consecutive seeds from here.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    /// Held-out windows, shared by every run.
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.9)]
    pub cue_strength: f64,
    #[arg(long)]
    pub force: bool,
}

/// Flag id to config key, per subcommand.
pub const GENERATE_KEYS: &[(&str, &str)] = &[
    ("cue_strength", "spec.cue_strength"),
    ("horizon", "spec.horizon"),
    ("context_len", "spec.context_len"),
    ("n_variates", "spec.n_variates"),
];

pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("steps", "train.steps"),
    ("batch_size", "train.batch_size"),
    ("learning_rate", "train.learning_rate"),
    ("alpha", "train.alpha"),
    ("beta", "train.beta"),
    ("seed", "train.seed"),
    ("fusion_mode", "fusion_mode"),
    ("prior", "prior"),
];

pub const VARIANCE_KEYS: &[(&str, &str)] = &[
    ("seeds", "run.seeds"),
    ("seed", "train.seed"),
    ("steps", "train.steps"),
    ("n_train", "run.n_train"),
    ("n_test", "run.n_test"),
    ("cue_strength", "spec.cue_strength"),
];

/// Config entries for the flags given on the command line (all mapped
/// flags when `with_defaults` is set).
fn flag_overrides(m: &ArgMatches, keys: &[(&str, &str)], with_defaults: bool) -> KvMap {
    let mut kv = KvMap::new();
    for (id, key) in keys {
        let given = m.value_source(id) == Some(ValueSource::CommandLine);
        if !(given || with_defaults) {
            continue;
        }
        if let Some(v) = m.get_raw(id).and_then(|mut r| r.next()) {
            kv.set(key, v.to_string_lossy());
        }
    }
    kv
}

fn run(matches: &ArgMatches) -> anyhow::Result<()> {
    let cli = Cli::from_arg_matches(matches)?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match cli.command {
        Command::Generate(a) => commands::cmd_generate(&a, &flag_overrides(sub, GENERATE_KEYS, false)),
        Command::Teacher(a) => commands::cmd_teacher(&a),
        Command::Train(a) => commands::cmd_train(&a, &flag_overrides(sub, TRAIN_KEYS, false)),
        Command::Eval(a) => commands::cmd_eval(&a),
        Command::Forecast(a) => commands::cmd_forecast(&a),
        Command::VarianceStudy(a) => commands::cmd_variance_study(&a, &flag_overrides(sub, VARIANCE_KEYS, false)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STRIDE_LOG", "info")).init();
    let matches = Cli::command().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn sub_matches(args: &[&str]) -> ArgMatches {
        let m = Cli::command().try_get_matches_from(args).unwrap();
        m.subcommand().unwrap().1.clone()
    }

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_defaults_match_library_defaults() {
        let base = RunConfig::default();
        let cases = [
            (vec!["stride", "generate", "--out", "x"], GENERATE_KEYS),
            (
                vec!["stride", "train", "--data", "d", "--traces", "t", "--out", "o"],
                TRAIN_KEYS,
            ),
            (vec!["stride", "variance-study", "--out", "o"], VARIANCE_KEYS),
        ];
        for (args, keys) in cases {
            let kv = flag_overrides(&sub_matches(&args), keys, true);
            assert_eq!(kv.len(), keys.len());
            assert_eq!(RunConfig::load(None, &kv).unwrap(), base, "{}", args[1]);
        }
    }

    #[test]
    fn only_explicit_flags_override() {
        let m = sub_matches(&[
            "stride", "train", "--data", "d", "--traces", "t", "--out", "o", "--steps", "9",
        ]);
        let kv = flag_overrides(&m, TRAIN_KEYS, false);
        assert_eq!(kv.len(), 1);
        assert_eq!(kv.get("train.steps"), Some("9"));
    }
}
