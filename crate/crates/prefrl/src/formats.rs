//! On-disk formats: versioned JSON artifacts, metrics CSV, digests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use prefrl_core::policy::{MetricsRow, MetricsTrace, PolicyParameters};
use prefrl_core::reward_model::{PreferenceDataset, RewardPredictor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed CSV in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path} has format version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path} holds a {found} artifact, expected {expected}")]
    Kind { path: PathBuf, found: String, expected: &'static str },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io { path: path.into(), source })?;
    Ok(sha256_hex(&bytes))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let io = |source| FormatError::Io { path: path.into(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(bytes).and_then(|()| file.sync_all()).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

/// Artifacts stored as `{format_version, kind, payload}`.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn save(&self, path: &Path) -> Result<(), FormatError> {
        let envelope = Envelope { format_version: FORMAT_VERSION, kind: Self::KIND.to_owned(), payload: self };
        let mut text = serde_json::to_string_pretty(&envelope).expect("artifacts serialize");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.into(), source })?;
        let json = |source| FormatError::Json { path: path.into(), source };
        let envelope: Envelope<Box<serde_json::value::RawValue>> = serde_json::from_str(&text).map_err(json)?;
        if envelope.format_version != FORMAT_VERSION {
            return Err(FormatError::Version { path: path.into(), found: envelope.format_version });
        }
        if envelope.kind != Self::KIND {
            return Err(FormatError::Kind { path: path.into(), found: envelope.kind, expected: Self::KIND });
        }
        serde_json::from_str(envelope.payload.get()).map_err(json)
    }
}

impl Artifact for PreferenceDataset {
    const KIND: &'static str = "preference_dataset";
}

impl Artifact for RewardPredictor {
    const KIND: &'static str = "reward_predictor";
}

impl Artifact for PolicyParameters {
    const KIND: &'static str = "policy";
}

impl Artifact for prefrl_core::gridworld::LayoutSnapshot {
    const KIND: &'static str = "layout";
}

pub const METRICS_HEADER: [&str; 7] = [
    "env_steps",
    "success_rate",
    "env_reward_mean",
    "predictor_reward_mean",
    "key_drops_mean",
    "cost_mean",
    "constraint_deviation_mean",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Metrics trace as CSV text. Floats use the shortest round-trip form, so
/// identical traces give identical bytes. Absent values are empty cells.
pub fn metrics_csv(trace: &MetricsTrace) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in &trace.rows {
        w.write_record([
            r.env_steps.to_string(),
            r.success_rate.to_string(),
            r.env_reward_mean.to_string(),
            opt(r.predictor_reward_mean),
            r.key_drops_mean.to_string(),
            opt(r.cost_mean),
            opt(r.deviation_mean),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

pub fn write_metrics(path: &Path, trace: &MetricsTrace) -> Result<(), FormatError> {
    write_atomic(path, metrics_csv(trace).as_bytes())
}

/// Reward-model loss per epoch, `epoch,loss` with epochs counted from 1.
pub fn write_loss_trace(path: &Path, losses: &[f64]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss"]).expect("in-memory write");
    for (i, loss) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()]).expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

pub fn read_metrics(path: &Path) -> Result<MetricsTrace, FormatError> {
    let csv_err = |message: String| FormatError::Csv { path: path.into(), message };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let header = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(csv_err(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let num = |i: usize| -> Result<f64, FormatError> {
            record[i].parse().map_err(|_| csv_err(format!("bad number {:?} in column {}", &record[i], METRICS_HEADER[i])))
        };
        let maybe = |i: usize| -> Result<Option<f64>, FormatError> {
            if record[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(MetricsRow {
            env_steps: record[0].parse().map_err(|_| csv_err(format!("bad step count {:?}", &record[0])))?,
            success_rate: num(1)?,
            env_reward_mean: num(2)?,
            predictor_reward_mean: maybe(3)?,
            key_drops_mean: num(4)?,
            cost_mean: maybe(5)?,
            deviation_mean: maybe(6)?,
        });
    }
    Ok(MetricsTrace { rows })
}
