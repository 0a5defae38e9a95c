//! Dataset directories, run configuration and run-directory output.
//!
//! Dataset layout:
//!
//! ```text
//! DIR/meta.json          {"num_classes", "feature_dim", "domains": [...], "source_domains": [...]}
//! DIR/<domain>/edges.csv     "src,dst" per line, 0-indexed
//! DIR/<domain>/features.csv  N rows of d decimals
//! DIR/<domain>/labels.csv    optional, N integers, -1 = unlabeled
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::error::{Error, Result};
use crate::graph::{validate_graph, Graph, GraphSequence};
use crate::memory::GenConfig;
use crate::metrics::{average_forgetting, average_performance, Metric, PerformanceMatrix};
use crate::trainer::{ContinualConfig, RunState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub domains: Vec<String>,
    #[serde(default)]
    pub source_domains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub hidden_dim: usize,
    pub adapt: AdaptConfig,
    pub gen: GenConfig,
    pub pretrain_epochs: usize,
    pub lr_pretrain: f64,
    pub wd: f64,
    pub metric: Metric,
    /// Also write `matrix.png` next to the report.
    pub plot: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hidden_dim: 16,
            adapt: AdaptConfig::default(),
            gen: GenConfig::default(),
            pretrain_epochs: 150,
            lr_pretrain: 1e-4,
            wd: 5e-4,
            metric: Metric::Accuracy,
            plot: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::contract("RunConfig", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string("RunConfig", path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::contract("RunConfig", "hidden_dim must be positive"));
        }
        if !(self.lr_pretrain > 0.0) || !(self.wd >= 0.0) {
            return Err(Error::contract("RunConfig", "lr_pretrain must be > 0 and wd >= 0"));
        }
        self.adapt.validate()?;
        self.gen.validate()
    }

    pub fn continual(&self, test_only: bool, no_replay: bool) -> ContinualConfig {
        let mut adapt = self.adapt.clone();
        if no_replay {
            adapt.replay_enabled = false;
        }
        ContinualConfig {
            adapt,
            gen: self.gen.clone(),
            metric: self.metric,
            test_only,
        }
    }
}

fn read_to_string(op: &'static str, path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        op,
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(op: &'static str, path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        op,
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(op: &'static str, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        op,
        path: path.to_path_buf(),
        source,
    })
}

fn load_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_features(path: &Path, feature_dim: usize) -> Result<Array2<f64>> {
    let text = read_to_string("load_dataset", path)?;
    let mut flat = Vec::new();
    let mut rows = 0;
    for (line, l) in non_empty_lines(&text) {
        let mut count = 0;
        for tok in l.split(',') {
            let x: f64 = tok
                .trim()
                .parse()
                .map_err(|e| load_err(path, line, format!("bad decimal {tok:?}: {e}")))?;
            if !x.is_finite() {
                return Err(load_err(path, line, "non-finite feature"));
            }
            flat.push(x);
            count += 1;
        }
        if count != feature_dim {
            return Err(load_err(path, line, format!("{count} columns, expected feature_dim {feature_dim}")));
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, feature_dim), flat).unwrap())
}

/// Reads edges, canonicalising each pair to `(min, max)`. Reverse duplicates
/// and self-pairs are dropped; out-of-range endpoints are errors.
fn parse_edges(path: &Path, num_nodes: usize) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string("load_dataset", path)?;
    let mut seen = std::collections::HashSet::new();
    let mut edges = Vec::new();
    for (line, l) in non_empty_lines(&text) {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(load_err(path, line, "expected \"src,dst\""));
        };
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| load_err(path, line, format!("bad node index {t:?}: {e}")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= num_nodes || v >= num_nodes {
            return Err(load_err(
                path,
                line,
                format!("edge ({u}, {v}) out of range for {num_nodes} nodes"),
            ));
        }
        if u == v {
            log::debug!("{}:{line}: dropping self-pair ({u}, {v})", path.display());
            continue;
        }
        let e = (u.min(v), u.max(v));
        if seen.insert(e) {
            edges.push(e);
        }
    }
    Ok(edges)
}

fn parse_labels(path: &Path, num_nodes: usize, num_classes: usize) -> Result<Vec<i64>> {
    let text = read_to_string("load_dataset", path)?;
    let mut labels = Vec::with_capacity(num_nodes);
    for (line, l) in non_empty_lines(&text) {
        let y: i64 = l
            .parse()
            .map_err(|e| load_err(path, line, format!("bad label {l:?}: {e}")))?;
        if y < -1 || y >= num_classes as i64 {
            return Err(load_err(path, line, format!("label {y} outside -1..{num_classes}")));
        }
        labels.push(y);
    }
    if labels.len() != num_nodes {
        return Err(load_err(path, labels.len(), format!("{} labels for {num_nodes} nodes", labels.len())));
    }
    Ok(labels)
}

fn load_domain(dir: &Path, id: &str, meta: &DatasetMeta) -> Result<Graph> {
    let ddir = dir.join(id);
    let features = parse_features(&ddir.join("features.csv"), meta.feature_dim)?;
    let n = features.nrows();
    let edges = parse_edges(&ddir.join("edges.csv"), n)?;
    let labels_path = ddir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(parse_labels(&labels_path, n, meta.num_classes)?)
    } else {
        None
    };
    let g = Graph::new(n, edges, features, labels, id);
    let report = validate_graph(&g, meta.num_classes);
    if let Some(v) = report.violations.first() {
        return Err(load_err(&ddir, 0, format!("{}: {}", v.code, v.detail)));
    }
    Ok(g)
}

/// Loads a dataset directory and splits it into source and target
/// sequences according to `source_domains`, keeping `domains` order.
/// Target labels are kept for scoring; a missing `labels.csv` gives all `-1`.
pub fn load_dataset(dir: &Path) -> Result<(GraphSequence, GraphSequence)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&read_to_string("load_dataset", &meta_path)?)
        .map_err(|e| load_err(&meta_path, e.line(), e.to_string()))?;
    if let Some(s) = meta.source_domains.iter().find(|s| !meta.domains.contains(s)) {
        return Err(load_err(&meta_path, 0, format!("source domain {s:?} not listed in domains")));
    }
    let mut source = Vec::new();
    let mut targets = Vec::new();
    for id in &meta.domains {
        let mut g = load_domain(dir, id, &meta)?;
        if meta.source_domains.contains(id) {
            source.push(g);
        } else {
            if g.labels.is_none() {
                g.labels = Some(vec![-1; g.num_nodes]);
            }
            targets.push(g);
        }
    }
    let seq = |domains| GraphSequence {
        domains,
        num_classes: meta.num_classes,
        feature_dim: meta.feature_dim,
    };
    Ok((seq(source), seq(targets)))
}

/// Writes `seq` in the dataset layout; `source_domains` names the graphs
/// used for pretraining.
pub fn save_dataset(dir: &Path, seq: &GraphSequence, source_domains: &[String]) -> Result<()> {
    let op = "save_dataset";
    create_dir(op, dir)?;
    let meta = DatasetMeta {
        num_classes: seq.num_classes,
        feature_dim: seq.feature_dim,
        domains: seq.domains.iter().map(|g| g.domain_id.clone()).collect(),
        source_domains: source_domains.to_vec(),
    };
    write_file(op, &dir.join("meta.json"), &serde_json::to_string_pretty(&meta).unwrap())?;
    for g in &seq.domains {
        let ddir = dir.join(&g.domain_id);
        create_dir(op, &ddir)?;
        let mut edges = String::new();
        for (u, v) in &g.edges {
            edges.push_str(&format!("{u},{v}\n"));
        }
        write_file(op, &ddir.join("edges.csv"), &edges)?;
        let mut feats = String::new();
        for row in g.features.rows() {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            feats.push_str(&cells.join(","));
            feats.push('\n');
        }
        write_file(op, &ddir.join("features.csv"), &feats)?;
        if let Some(labels) = &g.labels {
            let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
            write_file(op, &ddir.join("labels.csv"), &text)?;
        }
    }
    Ok(())
}

/// `report.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: Metric,
    pub ap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub af: Option<f64>,
    pub matrix: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub live_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub live_af: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub live_matrix: Option<Vec<Vec<f64>>>,
}

impl Report {
    pub fn from_matrix(m: &PerformanceMatrix) -> Result<Self> {
        Ok(Report {
            metric: m.metric,
            ap: average_performance(m)?,
            af: if m.size() >= 2 { Some(average_forgetting(m)?) } else { None },
            matrix: m.rows().to_vec(),
            live_ap: None,
            live_af: None,
            live_matrix: None,
        })
    }
}

/// Writes `matrix.csv`, `live_matrix.csv` and `report.json`.
pub fn write_report(run_dir: &Path, state: &RunState) -> Result<Report> {
    let op = "write_report";
    create_dir(op, run_dir)?;
    let mut report = Report::from_matrix(&state.matrix)?;
    let live = Report::from_matrix(&state.live_matrix)?;
    report.live_ap = Some(live.ap);
    report.live_af = live.af;
    report.live_matrix = Some(live.matrix);
    write_file(op, &run_dir.join("matrix.csv"), &state.matrix.to_csv())?;
    write_file(op, &run_dir.join("live_matrix.csv"), &state.live_matrix.to_csv())?;
    write_file(
        op,
        &run_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    Ok(report)
}

/// Writes the full run directory: per-step parameters, memories, the
/// generator loss trace and the report files.
pub fn write_run(run_dir: &Path, state: &RunState) -> Result<Report> {
    let op = "write_run";
    for sub in ["params", "ema", "memory"] {
        create_dir(op, &run_dir.join(sub))?;
    }
    let mut trace = String::new();
    for (t, rec) in state.history.iter().enumerate() {
        let step = t + 1;
        write_file(op, &run_dir.join(format!("params/step_{step}.json")), &rec.live.to_checkpoint_json())?;
        write_file(op, &run_dir.join(format!("ema/step_{step}.json")), &rec.ema.to_checkpoint_json())?;
        if let Some(tr) = &rec.generator_trace {
            for e in tr.epochs.iter().chain(tr.final_losses.iter()) {
                let line = serde_json::json!({
                    "step": step,
                    "domain_id": rec.domain_id,
                    "epoch": e.epoch,
                    "final": e.epoch == tr.epochs.len(),
                    "mgl": e.mgl,
                    "reg": e.reg,
                    "gen": e.gen,
                    "total": e.total,
                });
                trace.push_str(&line.to_string());
                trace.push('\n');
            }
        }
    }
    for m in state.pool.memories() {
        write_file(op, &run_dir.join(format!("memory/{}.json", m.domain_id)), &m.to_json())?;
    }
    write_file(op, &run_dir.join("trace.jsonl"), &trace)?;
    write_report(run_dir, state)
}

/// Reads `matrix.csv` of a run directory; the metric comes from
/// `report.json` when present.
pub fn read_run_matrix(run_dir: &Path) -> Result<PerformanceMatrix> {
    let op = "report";
    let metric = match fs::read_to_string(run_dir.join("report.json")) {
        Ok(text) => {
            let r: Report = serde_json::from_str(&text).map_err(|source| Error::Json {
                op,
                path: run_dir.join("report.json"),
                source,
            })?;
            r.metric
        }
        Err(_) => Metric::Accuracy,
    };
    PerformanceMatrix::from_csv(metric, &read_to_string(op, &run_dir.join("matrix.csv"))?)
}

pub fn run_paths(run_dir: &Path) -> [PathBuf; 3] {
    [
        run_dir.join("matrix.csv"),
        run_dir.join("report.json"),
        run_dir.join("trace.jsonl"),
    ]
}
