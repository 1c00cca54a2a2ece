//! Aligns metrics of several runs into one table of per-method curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use prefrl_core::policy::{MetricsRow, MetricsTrace};
use prefrl_core::TaskId;

use crate::config::Method;
use crate::harness::{load_traces, HarnessError, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportColumn {
    pub label: String,
    pub metric: &'static str,
    pub seeds: usize,
    pub stats: SeriesStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub task: TaskId,
    pub grid: Vec<u64>,
    pub columns: Vec<ReportColumn>,
}

type Getter = fn(&MetricsRow) -> Option<f64>;

const METRICS: [(&str, Getter); 5] = [
    ("success_rate", |r| Some(r.success_rate)),
    ("env_reward_mean", |r| Some(r.env_reward_mean)),
    ("predictor_reward_mean", |r| r.predictor_reward_mean),
    ("key_drops_mean", |r| Some(r.key_drops_mean)),
    ("cost_mean", |r| r.cost_mean),
];

fn stats(traces: &[&MetricsTrace], get: Getter) -> Option<SeriesStats> {
    let len = traces[0].rows.len();
    let mut s = SeriesStats { mean: Vec::with_capacity(len), min: Vec::with_capacity(len), max: Vec::with_capacity(len) };
    for i in 0..len {
        let values: Vec<f64> = traces.iter().map(|t| get(&t.rows[i])).collect::<Option<_>>()?;
        s.mean.push(values.iter().sum::<f64>() / values.len() as f64);
        s.min.push(values.iter().copied().fold(f64::INFINITY, f64::min));
        s.max.push(values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    Some(s)
}

/// One column per (method, metric) with mean, min and max over seeds.
/// Metrics that some seed lacks are left out. All runs must share the task
/// and the evaluation grid.
pub fn compare_report(manifests: &[(PathBuf, RunManifest)]) -> Result<ReportTable, HarnessError> {
    let Some((_, first)) = manifests.first() else {
        return Err(HarnessError::Report("no manifests given".into()));
    };
    let task = first.config.task;
    let mut grid: Option<Vec<u64>> = None;
    let mut groups: BTreeMap<String, Vec<MetricsTrace>> = BTreeMap::new();
    // Methods present in more than one manifest get the manifest index appended.
    let mut shared: BTreeMap<Method, usize> = BTreeMap::new();
    for (_, manifest) in manifests {
        let mut methods: Vec<Method> = manifest.artifacts.runs.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        for m in methods {
            *shared.entry(m).or_default() += 1;
        }
    }
    for (i, (dir, manifest)) in manifests.iter().enumerate() {
        if manifest.config.task != task {
            return Err(HarnessError::Report(format!(
                "task mismatch: {} is {}, expected {task}",
                dir.display(),
                manifest.config.task
            )));
        }
        for (method, _seed, trace) in load_traces(dir, manifest)? {
            let this_grid = trace.grid();
            match &grid {
                None => grid = Some(this_grid),
                Some(g) if *g != this_grid => {
                    return Err(HarnessError::Report(format!(
                        "evaluation grid mismatch in {}: {:?} vs {:?}",
                        dir.display(),
                        this_grid,
                        g
                    )))
                }
                Some(_) => {}
            }
            let label = if shared[&method] > 1 {
                format!("{}@{i}", method.label())
            } else {
                method.label().to_owned()
            };
            groups.entry(label).or_default().push(trace);
        }
    }
    let grid = grid.ok_or_else(|| HarnessError::Report("manifests list no metrics".into()))?;
    let mut columns = Vec::new();
    for (label, traces) in &groups {
        let refs: Vec<&MetricsTrace> = traces.iter().collect();
        for (metric, get) in METRICS {
            if let Some(s) = stats(&refs, get) {
                columns.push(ReportColumn { label: label.clone(), metric, seeds: traces.len(), stats: s });
            }
        }
    }
    Ok(ReportTable { task, grid, columns })
}

impl ReportTable {
    pub fn columns_for(&self, metric: &str) -> Vec<&ReportColumn> {
        self.columns.iter().filter(|c| c.metric == metric).collect()
    }

    /// Wide CSV: `env_steps`, then `{label}:{metric}:{mean|min|max}`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["env_steps".to_owned()];
        for c in &self.columns {
            for stat in ["mean", "min", "max"] {
                header.push(format!("{}:{}:{stat}", c.label, c.metric));
            }
        }
        w.write_record(&header).expect("in-memory write");
        for (i, step) in self.grid.iter().enumerate() {
            let mut row = vec![step.to_string()];
            for c in &self.columns {
                row.extend([c.stats.mean[i], c.stats.min[i], c.stats.max[i]].map(|v| v.to_string()));
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }
}

/// Reads `manifest.json` from each directory (or a manifest path).
pub fn load_manifests(paths: &[PathBuf]) -> Result<Vec<(PathBuf, RunManifest)>, HarnessError> {
    paths
        .iter()
        .map(|p| {
            let (dir, file) = if p.is_dir() {
                (p.clone(), p.join(crate::harness::MANIFEST_FILE))
            } else {
                (p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf), p.clone())
            };
            Ok((dir, RunManifest::load(&file)?))
        })
        .collect()
}
