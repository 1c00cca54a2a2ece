//! Command-line front end. Flags fill an [`ExperimentConfig`]; values in a
//! `--config` file take precedence over flags.

use std::io::IsTerminal;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use prefrl_core::reward_model::{fit, ranking_accuracy, PreferenceDataset, RewardPredictor};
use prefrl_core::TaskId;

use crate::cache::PromptCache;
use crate::config::{ExperimentConfig, Method, OracleKind};
use crate::formats::{write_atomic, write_loss_trace, write_metrics, Artifact};
use crate::harness::{
    collect_preferences, metrics_file, policy_file, run_experiment, run_lagrange_sweep, train_spec, OracleHandle, RunOptions,
    DATASET_FILE, LOSS_FILE, MODEL_FILE,
};
use crate::human::{HumanError, HumanOracle};
use crate::llm::LlmOracle;
use crate::report::{compare_report, load_manifests};
use crate::runner::ThreadedRunner;

#[derive(Parser, Debug)]
#[command(name = "prefrl", version, about = "Preference-based reward learning for gridworld agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample trajectory pairs and label them with the oracle.
    Collect(ExperimentArgs),
    /// Fit the reward predictor on a collected dataset.
    Fit {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Defaults to `<output-dir>/dataset.json`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one method for every configured seed.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_enum)]
        method: Method,
        /// Defaults to `<output-dir>/reward_model.json`.
        #[arg(long)]
        reward_model: Option<PathBuf>,
    },
    /// Full pipeline: collect, fit, then train every method and seed.
    Run(ExperimentArgs),
    /// Align the metrics of finished runs into one CSV table.
    Report {
        /// Run directories or manifest files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-multiplier Lagrange runs over a list of multipliers.
    SweepLagrange {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        multipliers: Vec<f64>,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct ExperimentArgs {
    /// TOML experiment file; its values override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskId>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    /// Number of preference pairs.
    #[arg(long)]
    pub pairs: Option<u64>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    /// Chat-completions base URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_inflight: Option<usize>,
    #[arg(long)]
    pub cache_path: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// Enables the key-drop constraint with this target.
    #[arg(long)]
    pub target_drops: Option<u32>,
    #[arg(long)]
    pub lagrange_multiplier: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl ExperimentArgs {
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default();
        if let Some(v) = self.task {
            c.task = v;
        }
        c.max_steps = self.max_steps.or(c.max_steps);
        if let Some(v) = self.pairs {
            c.pairs = v;
        }
        if let Some(v) = self.oracle {
            c.oracle.kind = v;
        }
        if let Some(v) = &self.endpoint {
            c.oracle.endpoint.endpoint = v.clone();
        }
        if let Some(v) = &self.model {
            c.oracle.endpoint.model = v.clone();
        }
        if let Some(v) = self.max_inflight {
            c.oracle.endpoint.max_inflight = v;
        }
        if let Some(v) = &self.cache_path {
            c.oracle.cache_path = v.clone();
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = &self.methods {
            c.methods = v.clone();
        }
        if let Some(v) = self.total_steps {
            c.ppo.total_env_steps = v;
        }
        if let Some(v) = self.target_drops {
            c.constraint = Some(prefrl_core::ConstraintSpec::new(v));
        }
        if let Some(v) = self.lagrange_multiplier {
            c.lagrange_multiplier = v;
        }
        if let Some(v) = self.data_seed {
            c.data_seed = v;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let mut base = toml::Table::try_from(&c).context("serializing flag values")?;
            merge(&mut base, file);
            c = base.try_into().with_context(|| format!("invalid config {}", path.display()))?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn make_oracle(config: &ExperimentConfig) -> anyhow::Result<OracleHandle<'static>> {
    Ok(match config.oracle.kind {
        OracleKind::Scripted => OracleHandle::Scripted,
        OracleKind::Llm => {
            let cache = PromptCache::open(config.cache_path())?;
            OracleHandle::Llm(LlmOracle::connect(config.oracle.endpoint.clone(), cache))
        }
        OracleKind::Human => {
            if !std::io::stdin().is_terminal() {
                return Err(HumanError::NotInteractive.into());
            }
            let mut human = HumanOracle::new(std::io::stdin().lock(), std::io::stderr());
            OracleHandle::Human(Box::new(move |bundle| human.compare(bundle)))
        }
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Collect(exp) => {
            let config = exp.resolve()?;
            let mut oracle = make_oracle(&config)?;
            let runner = ThreadedRunner::new(config.workers);
            let out = collect_preferences(&config, &mut oracle, &runner)?;
            println!(
                "collected {} triples, discarded {} malformed and {} unavailable, {} network requests; wrote {}",
                out.dataset.len(),
                out.discards.malformed,
                out.discards.unavailable,
                oracle.network_requests(),
                config.output_dir.join(DATASET_FILE).display()
            );
        }
        Command::Fit { exp, dataset } => {
            let config = exp.resolve()?;
            let path = dataset.unwrap_or_else(|| config.output_dir.join(DATASET_FILE));
            let dataset = PreferenceDataset::load(&path)?;
            let fitted = fit(&dataset, &config.reward_model)?;
            let (correct, total) = ranking_accuracy(&fitted.model, &dataset.triples);
            let out = config.output_dir.join(MODEL_FILE);
            fitted.model.save(&out)?;
            write_loss_trace(&config.output_dir.join(LOSS_FILE), &fitted.loss_trace)?;
            println!(
                "final loss {:.6}, training ranking accuracy {correct}/{total}; wrote {}",
                fitted.loss_trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Train { exp, method, reward_model } => {
            let config = exp.resolve()?;
            let model_path = reward_model.unwrap_or_else(|| config.output_dir.join(MODEL_FILE));
            let model = if method == Method::Predictor || model_path.exists() {
                Some(RewardPredictor::load(&model_path)?)
            } else {
                None
            };
            let runner = ThreadedRunner::new(config.workers);
            for &seed in &config.seeds {
                let spec = train_spec(&config, method, seed, model.as_ref())?;
                let trace = if method == Method::Random {
                    prefrl_core::policy::train_random(&spec)?
                } else {
                    let out = prefrl_core::policy::train_with_runner(&spec, &runner)?;
                    out.params.save(&config.output_dir.join(policy_file(method, seed)))?;
                    out.trace
                };
                write_metrics(&config.output_dir.join(metrics_file(method, seed)), &trace)?;
                let last = trace.last().expect("initial evaluation");
                println!("{} seed {seed}: final success rate {:.3}", method.label(), last.success_rate);
            }
        }
        Command::Run(exp) => {
            let config = exp.resolve()?;
            let mut oracle = make_oracle(&config)?;
            let runner = ThreadedRunner::new(config.workers);
            let manifest = run_experiment(&config, &mut oracle, &runner, RunOptions::default())?;
            for phase in &manifest.phases {
                println!("{:<28} {:>9.1}s{}", phase.name, phase.wall_clock_secs, if phase.resumed { "  (reused)" } else { "" });
            }
            println!("manifest: {}", config.output_dir.join(crate::harness::MANIFEST_FILE).display());
        }
        Command::Report { runs, out } => {
            let table = compare_report(&load_manifests(&runs)?)?;
            let csv = table.to_csv();
            match out {
                Some(path) => write_atomic(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::SweepLagrange { exp, multipliers } => {
            let config = exp.resolve()?;
            if config.constraint.is_none() {
                bail!("sweep-lagrange needs a constraint (--target-drops or [constraint] in the config)");
            }
            let runner = ThreadedRunner::new(config.workers);
            println!("multiplier,seed,success_rate,env_reward_mean,cost_mean");
            for (row, _) in run_lagrange_sweep(&config, &multipliers, &runner)? {
                println!("{},{},{},{},{}", row.multiplier, row.seed, row.success_rate, row.env_reward_mean, row.cost_mean);
            }
        }
    }
    Ok(())
}
