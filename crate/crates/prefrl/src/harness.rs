//! The two-phase pipeline: collect preferences and fit the reward model,
//! then train every requested method for every seed. Each phase records its
//! input digest and output digests in the run manifest, and a rerun skips
//! phases whose records still match.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use prefrl_core::interpreter::{render, TrajectorySummary};
use prefrl_core::oracle::{build_prompt, scripted_compare, DiscardCounts, PreferenceLabel, PreferenceTriple, PromptBundle, Provenance};
use prefrl_core::policy::{
    evaluate, train_random, train_with_runner, EpisodeRunner, MetricsTrace, PolicyError, RewardSource, TrainSpec,
};
use prefrl_core::reward_model::{fit, PreferenceDataset, RewardModelError, RewardPredictor};
use prefrl_core::sampler::TrajectorySampler;
use prefrl_core::ConstraintSpec;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Method, OracleKind};
use crate::formats::{file_digest, read_metrics, sha256_hex, write_atomic, write_loss_trace, write_metrics, Artifact, FormatError};
use crate::human::HumanError;
use crate::llm::{LlmError, LlmOracle};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    #[error("reward model error: {0}")]
    RewardModel(#[from] RewardModelError),
    #[error("oracle unavailable after {collected} of {requested} pairs (partial dataset kept at {partial}): {source}")]
    OracleUnavailable { collected: usize, requested: u64, partial: PathBuf, source: LlmError },
    #[error("oracle cache: {0}")]
    Cache(#[from] crate::cache::CacheError),
    #[error("phase {phase} failed: {message}")]
    Phase { phase: String, message: String },
    #[error("run stopped after {0} training runs as requested")]
    Interrupted(usize),
    #[error("{0}")]
    Report(String),
    #[error("a {0:?} oracle handle cannot serve a {1:?} config")]
    OracleMismatch(&'static str, OracleKind),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

type HumanFn<'a> = dyn FnMut(&PromptBundle) -> Result<PreferenceLabel, HumanError> + 'a;

/// The preference source used by the collection phase.
pub enum OracleHandle<'a> {
    Scripted,
    Llm(LlmOracle),
    Human(Box<HumanFn<'a>>),
}

impl OracleHandle<'_> {
    fn name(&self) -> &'static str {
        match self {
            OracleHandle::Scripted => "scripted",
            OracleHandle::Llm(_) => "llm",
            OracleHandle::Human(_) => "human",
        }
    }

    fn matches(&self, kind: OracleKind) -> bool {
        matches!(
            (self, kind),
            (OracleHandle::Scripted, OracleKind::Scripted)
                | (OracleHandle::Llm(_), OracleKind::Llm)
                | (OracleHandle::Human(_), OracleKind::Human)
        )
    }

    pub fn network_requests(&self) -> u64 {
        match self {
            OracleHandle::Llm(o) => o.network_requests(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectOutcome {
    pub dataset: PreferenceDataset,
    pub discards: DiscardCounts,
}

pub const DATASET_FILE: &str = "dataset.json";
pub const PARTIAL_DATASET_FILE: &str = "dataset.partial.json";
pub const MODEL_FILE: &str = "reward_model.json";
pub const LOSS_FILE: &str = "reward_model_loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Samples `config.pairs` trajectory pairs, labels them with `oracle` and
/// writes the dataset to the output directory. Discarded pairs are counted,
/// so `dataset.len() + discards.total() == pairs`.
pub fn collect_preferences(
    config: &ExperimentConfig,
    oracle: &mut OracleHandle<'_>,
    runner: &dyn EpisodeRunner,
) -> Result<CollectOutcome, HarnessError> {
    config.validate()?;
    if !oracle.matches(config.oracle.kind) {
        return Err(HarnessError::OracleMismatch(oracle.name(), config.oracle.kind));
    }
    let env = config.env();
    let sampler = TrajectorySampler::build(env, &config.sampler.mix, &config.sampler_ppo(), config.data_seed, runner)?;
    let pairs: Vec<(TrajectorySummary, TrajectorySummary)> =
        (0..config.pairs).map(|m| sampler.sample_pair(config.data_seed, m)).collect::<Result<_, _>>()?;
    let constraint = config.constraint.as_ref();
    let mut discards = DiscardCounts::default();
    let triples: Vec<PreferenceTriple> = match oracle {
        OracleHandle::Scripted => {
            pairs.iter().map(|(a, b)| scripted_compare(a, b, constraint).expect("pairs share the task")).collect()
        }
        OracleHandle::Human(ask) => {
            let mut out = Vec::new();
            for (a, b) in &pairs {
                let bundle = build_prompt(a.task, constraint, &render(a), &render(b));
                match ask(&bundle) {
                    Ok(mu) => out.push(PreferenceTriple {
                        summary_a: *a,
                        summary_b: *b,
                        mu,
                        provenance: Provenance::Human,
                        raw_response: None,
                    }),
                    Err(e) => {
                        log::warn!("pair skipped: {e}");
                        discards.unavailable += 1;
                    }
                }
            }
            out
        }
        OracleHandle::Llm(llm) => {
            let (triples, malformed, failure) = query_concurrently(llm, &pairs, constraint);
            discards.malformed = malformed;
            if let Some(source) = failure {
                let partial = config.output_dir.join(PARTIAL_DATASET_FILE);
                let collected = triples.len();
                PreferenceDataset { task: env.task, triples }.save(&partial)?;
                return Err(HarnessError::OracleUnavailable { collected, requested: config.pairs, partial, source });
            }
            triples
        }
    };
    let dataset = PreferenceDataset::new(env.task, triples)?;
    dataset.save(&config.output_dir.join(DATASET_FILE))?;
    Ok(CollectOutcome { dataset, discards })
}

/// Queries pairs on `max_inflight` threads; results keep pair order. On an
/// unreachable endpoint, triples completed before the first failing pair
/// are returned together with the error.
fn query_concurrently(
    llm: &LlmOracle,
    pairs: &[(TrajectorySummary, TrajectorySummary)],
    constraint: Option<&ConstraintSpec>,
) -> (Vec<PreferenceTriple>, u32, Option<LlmError>) {
    let slots: Vec<Mutex<Option<Result<Option<PreferenceTriple>, LlmError>>>> =
        pairs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = std::sync::atomic::AtomicBool::new(false);
    let workers = llm.config().max_inflight.clamp(1, pairs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((a, b)) = pairs.get(i) else { break };
                let result = llm.compare(a, b, constraint);
                if result.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    let mut triples = Vec::new();
    let mut malformed = 0;
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(Some(t))) => triples.push(t),
            Some(Ok(None)) => malformed += 1,
            Some(Err(e)) => return (triples, malformed, Some(e)),
            None => break,
        }
    }
    (triples, malformed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PhaseStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    #[serde(flatten)]
    pub status: PhaseStatus,
    pub input_digest: String,
    pub outputs: Vec<ArtifactRecord>,
    pub wall_clock_secs: f64,
    /// True when this run reused the outputs of an earlier run.
    pub resumed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discards: Option<DiscardCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub method: Method,
    pub seed: u64,
    pub metrics: PathBuf,
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub preference_cache: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub reward_model: Option<PathBuf>,
    pub runs: Vec<TrainRunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub code_digest: String,
    pub phases: Vec<PhaseRecord>,
    pub artifacts: ArtifactIndex,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| FormatError::Json { path: path.into(), source })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn phase(&self, name: &str) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.name == name)
    }

    /// Every artifact path the manifest lists, relative to the output dir.
    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        let a = &self.artifacts;
        let mut out: Vec<PathBuf> = [&a.preference_cache, &a.dataset, &a.reward_model].into_iter().flatten().cloned().collect();
        for run in &a.runs {
            out.push(run.metrics.clone());
            out.extend(run.policy.clone());
        }
        out
    }
}

const CODE: &[&str] = &[
    include_str!("../../core/src/gridworld.rs"),
    include_str!("../../core/src/interpreter.rs"),
    include_str!("../../core/src/math.rs"),
    include_str!("../../core/src/nn.rs"),
    include_str!("../../core/src/oracle.rs"),
    include_str!("../../core/src/policy.rs"),
    include_str!("../../core/src/reward_model.rs"),
    include_str!("../../core/src/sampler.rs"),
    include_str!("../../core/src/seed.rs"),
    include_str!("harness.rs"),
    include_str!("formats.rs"),
];

/// Digest of the library sources that determine experiment outputs.
pub fn code_digest() -> String {
    sha256_hex(CODE.concat().as_bytes())
}

fn json_digest<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("digest input serializes").as_bytes())
}

/// Knobs for partial execution.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop with [`HarnessError::Interrupted`] after this many training runs
    /// have been executed (resumed ones do not count).
    pub train_run_limit: Option<usize>,
}

struct Pipeline {
    dir: PathBuf,
    previous: Option<RunManifest>,
    manifest: RunManifest,
}

impl Pipeline {
    fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    /// Outputs of a matching completed phase from the previous manifest.
    fn reusable(&self, name: &str, input_digest: &str) -> Option<PhaseRecord> {
        let old = self.previous.as_ref()?.phase(name)?;
        if old.status != PhaseStatus::Completed || old.input_digest != input_digest {
            return None;
        }
        let intact = old.outputs.iter().all(|a| file_digest(&self.dir.join(&a.path)).is_ok_and(|d| d == a.digest));
        intact.then(|| PhaseRecord { resumed: true, ..old.clone() })
    }

    /// Runs `body` unless a matching phase can be reused; records the result
    /// and persists the manifest either way.
    fn phase<F>(&mut self, name: &str, input_digest: String, body: F) -> Result<PhaseRecord, HarnessError>
    where
        F: FnOnce(&Path) -> Result<(Vec<PathBuf>, Option<DiscardCounts>), HarnessError>,
    {
        if let Some(record) = self.reusable(name, &input_digest) {
            log::info!("phase {name}: reusing earlier outputs");
            self.manifest.phases.push(record.clone());
            self.manifest.save(&self.manifest_path())?;
            return Ok(record);
        }
        log::info!("phase {name}: running");
        let start = Instant::now();
        let result = body(&self.dir).and_then(|(paths, discards)| {
            let outputs = paths
                .into_iter()
                .map(|path| Ok(ArtifactRecord { digest: file_digest(&self.dir.join(&path))?, path }))
                .collect::<Result<Vec<_>, FormatError>>()?;
            Ok((outputs, discards))
        });
        let wall_clock_secs = start.elapsed().as_secs_f64();
        match result {
            Ok((outputs, discards)) => {
                let record = PhaseRecord {
                    name: name.to_owned(),
                    status: PhaseStatus::Completed,
                    input_digest,
                    outputs,
                    wall_clock_secs,
                    resumed: false,
                    discards,
                };
                self.manifest.phases.push(record.clone());
                self.manifest.save(&self.manifest_path())?;
                Ok(record)
            }
            Err(e) => {
                self.manifest.phases.push(PhaseRecord {
                    name: name.to_owned(),
                    status: PhaseStatus::Failed { error: e.to_string() },
                    input_digest,
                    outputs: Vec::new(),
                    wall_clock_secs,
                    resumed: false,
                    discards: None,
                });
                self.manifest.save(&self.manifest_path())?;
                Err(e)
            }
        }
    }
}

pub fn metrics_file(method: Method, seed: u64) -> PathBuf {
    PathBuf::from("metrics").join(format!("{}_seed{seed}.csv", method.label()))
}

pub fn policy_file(method: Method, seed: u64) -> PathBuf {
    PathBuf::from("policies").join(format!("{}_seed{seed}.json", method.label()))
}

/// Builds the training spec of one (method, seed) run.
pub fn train_spec(config: &ExperimentConfig, method: Method, seed: u64, model: Option<&RewardPredictor>) -> Result<TrainSpec, HarnessError> {
    let source = match method {
        Method::Predictor => RewardSource::Predictor {
            model: model.cloned().ok_or_else(|| HarnessError::Policy(PolicyError::MissingPredictor))?,
        },
        Method::Original | Method::Random => RewardSource::Environment,
        Method::Shaped => RewardSource::Shaped,
        Method::Lagrange => RewardSource::LagrangeEnv { multiplier: config.lagrange_multiplier },
    };
    let mut spec = TrainSpec::new(config.env(), source, config.constraint, config.ppo, seed);
    spec.eval_predictor = model.cloned();
    Ok(spec)
}

/// Phase 1 (collect, fit) when the predictor method is requested, then
/// phase 2 (one training run per method and seed). Writes the manifest after
/// every phase.
pub fn run_experiment(
    config: &ExperimentConfig,
    oracle: &mut OracleHandle<'_>,
    runner: &dyn EpisodeRunner,
    options: RunOptions,
) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
    let previous = RunManifest::load(&dir.join(MANIFEST_FILE)).ok();
    let mut pipeline = Pipeline {
        dir: dir.clone(),
        previous,
        manifest: RunManifest {
            format_version: crate::formats::FORMAT_VERSION,
            config: config.clone(),
            config_digest: json_digest(config),
            code_digest: code_digest(),
            phases: Vec::new(),
            artifacts: ArtifactIndex { preference_cache: None, dataset: None, reward_model: None, runs: Vec::new() },
        },
    };
    let code = pipeline.manifest.code_digest.clone();

    let mut model: Option<RewardPredictor> = None;
    if config.methods.contains(&Method::Predictor) {
        let collect_input = json_digest(&(
            &code,
            config.task,
            config.max_steps,
            config.pairs,
            &config.oracle.kind,
            &config.oracle.endpoint.model,
            &config.sampler,
            config.sampler_ppo(),
            &config.constraint,
            config.data_seed,
        ));
        let collected = pipeline.phase("collect", collect_input, |_| {
            let outcome = collect_preferences(config, oracle, runner)?;
            Ok((vec![PathBuf::from(DATASET_FILE)], Some(outcome.discards)))
        })?;
        pipeline.manifest.artifacts.dataset = Some(DATASET_FILE.into());
        if config.oracle.kind == OracleKind::Llm {
            let cache = config.cache_path();
            pipeline.manifest.artifacts.preference_cache =
                Some(cache.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(cache));
        }

        let fit_input = json_digest(&(&code, &collected.outputs[0].digest, &config.reward_model));
        pipeline.phase("fit", fit_input, |dir| {
            let dataset = PreferenceDataset::load(&dir.join(DATASET_FILE))?;
            let fitted = fit(&dataset, &config.reward_model)?;
            fitted.model.save(&dir.join(MODEL_FILE))?;
            write_loss_trace(&dir.join(LOSS_FILE), &fitted.loss_trace)?;
            Ok((vec![PathBuf::from(MODEL_FILE), PathBuf::from(LOSS_FILE)], None))
        })?;
        pipeline.manifest.artifacts.reward_model = Some(MODEL_FILE.into());
        model = Some(RewardPredictor::load(&dir.join(MODEL_FILE))?);
    }

    let model_digest = model.as_ref().map(json_digest);
    let mut executed = 0usize;
    for &method in &config.methods {
        for &seed in &config.seeds {
            let name = format!("train/{}/seed{seed}", method.label());
            let spec = train_spec(config, method, seed, model.as_ref())?;
            let input = json_digest(&(&code, method, &spec.env, &spec.config, &spec.constraint, seed, config.lagrange_multiplier, &model_digest));
            let metrics = metrics_file(method, seed);
            let policy = (method != Method::Random).then(|| policy_file(method, seed));
            if let Some(limit) = options.train_run_limit {
                if executed >= limit && pipeline.reusable(&name, &input).is_none() {
                    return Err(HarnessError::Interrupted(executed));
                }
            }
            let record = pipeline.phase(&name, input, |dir| {
                let trace = if method == Method::Random {
                    train_random(&spec)?
                } else {
                    let out = train_with_runner(&spec, runner)?;
                    out.params.save(&dir.join(policy.as_ref().expect("learned methods save a policy")))?;
                    out.trace
                };
                write_metrics(&dir.join(&metrics), &trace)?;
                Ok((policy.iter().cloned().chain([metrics.clone()]).collect(), None))
            })?;
            if !record.resumed {
                executed += 1;
            }
            pipeline.manifest.artifacts.runs.push(TrainRunRecord { method, seed, metrics, policy });
        }
    }
    pipeline.manifest.save(&pipeline.manifest_path())?;
    Ok(pipeline.manifest)
}

/// Loads every metrics trace of a manifest, keyed by method and seed.
pub fn load_traces(dir: &Path, manifest: &RunManifest) -> Result<Vec<(Method, u64, MetricsTrace)>, HarnessError> {
    manifest
        .artifacts
        .runs
        .iter()
        .map(|r| Ok((r.method, r.seed, read_metrics(&dir.join(&r.metrics))?)))
        .collect()
}

/// Final evaluation row of a trained policy file, for ad-hoc inspection.
pub fn evaluate_policy_file(
    config: &ExperimentConfig,
    path: &Path,
    window: u64,
    seed: u64,
) -> Result<prefrl_core::policy::MetricsRow, HarnessError> {
    let params = prefrl_core::PolicyParameters::load(path)?;
    Ok(evaluate(&params, &config.env(), config.constraint.as_ref(), None, seed, window, config.ppo.eval_episodes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub multiplier: f64,
    pub seed: u64,
    pub success_rate: f64,
    pub env_reward_mean: f64,
    pub cost_mean: f64,
    pub deviation_mean: f64,
}

/// One fixed-multiplier Lagrange run per (multiplier, seed). Writes each
/// trace plus a summary of final rows to the output directory.
pub fn run_lagrange_sweep(
    config: &ExperimentConfig,
    multipliers: &[f64],
    runner: &dyn EpisodeRunner,
) -> Result<Vec<(SweepRow, MetricsTrace)>, HarnessError> {
    config.validate()?;
    let constraint = config.constraint.ok_or_else(|| ConfigError::Invalid("the sweep needs a constraint".into()))?;
    if multipliers.is_empty() || multipliers.iter().any(|m| !(*m >= 0.0)) {
        return Err(ConfigError::Invalid("multipliers must be a nonempty list of nonnegative numbers".into()).into());
    }
    let mut out = Vec::new();
    for &seed in &config.seeds {
        for &multiplier in multipliers {
            let spec = TrainSpec::new(config.env(), RewardSource::LagrangeEnv { multiplier }, Some(constraint), config.ppo, seed);
            let trace = train_with_runner(&spec, runner)?.trace;
            write_metrics(&config.output_dir.join("sweep").join(format!("lagrange_m{multiplier}_seed{seed}.csv")), &trace)?;
            let last = trace.last().expect("traces contain the initial evaluation");
            let row = SweepRow {
                multiplier,
                seed,
                success_rate: last.success_rate,
                env_reward_mean: last.env_reward_mean,
                cost_mean: last.cost_mean.unwrap_or(0.0),
                deviation_mean: last.deviation_mean.unwrap_or(0.0),
            };
            out.push((row, trace));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (row, _) in &out {
        w.serialize(row).expect("in-memory write");
    }
    write_atomic(&config.output_dir.join("sweep").join("summary.csv"), &w.into_inner().expect("in-memory flush"))?;
    Ok(out)
}
