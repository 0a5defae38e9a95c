//! Per-domain scores and the performance-matrix summaries (AP, AF).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    MacroF1,
    RocAuc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::RocAuc => "roc_auc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "roc_auc" => Ok(Metric::RocAuc),
            other => Err(Error::contract("Metric", format!("unknown metric {other:?}"))),
        }
    }
}

/// Lower-triangular score matrix: row `i` holds the scores on domains
/// `0..=i` after adapting through domain `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub metric: Metric,
    rows: Vec<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(metric: Metric) -> Self {
        PerformanceMatrix {
            metric,
            rows: Vec::new(),
        }
    }

    /// Builds from explicit rows; row `i` must have `i + 1` entries in `[0, 1]`.
    pub fn from_rows(metric: Metric, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = PerformanceMatrix::new(metric);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Reads the leading `T × T` lower triangle of a dense matrix; entries
    /// above the diagonal are ignored.
    pub fn from_dense(metric: Metric, dense: &Mat) -> Result<Self> {
        let rows = (0..dense.nrows())
            .map(|i| (0..=i).map(|j| dense[[i, j]]).collect())
            .collect();
        Self::from_rows(metric, rows)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::contract(
                "PerformanceMatrix",
                format!("row {} has {} entries, expected {}", self.rows.len(), row.len(), self.rows.len() + 1),
            ));
        }
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::contract("PerformanceMatrix", format!("score {x} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Entry `(i, j)` for `i >= j`; `None` above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    /// One line per row, comma-separated, shortest round-trip decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(metric: Metric, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::contract("PerformanceMatrix::from_csv", format!("line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        Self::from_rows(metric, rows)
    }
}

/// Mean of the final row.
pub fn average_performance(m: &PerformanceMatrix) -> Result<f64> {
    let last = m
        .rows
        .last()
        .ok_or_else(|| Error::undefined("average_performance", "empty matrix"))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over earlier domains of (final-row score − score right after that
/// domain). Negative values mean forgetting.
pub fn average_forgetting(m: &PerformanceMatrix) -> Result<f64> {
    let t = m.size();
    if t < 2 {
        return Err(Error::undefined("average_forgetting", format!("needs T >= 2, got {t}")));
    }
    let last = &m.rows[t - 1];
    let sum: f64 = (0..t - 1).map(|i| last[i] - m.rows[i][i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Score of one domain over labelled nodes (labels `< 0` are skipped).
pub fn domain_score(probs: &Mat, labels: &[i64], metric: Metric) -> Result<f64> {
    let op = "domain_score";
    let (n, c) = probs.dim();
    if labels.len() != n {
        return Err(Error::contract(op, format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= c as i64) {
        return Err(Error::contract(op, format!("label {y} with {c} classes")));
    }
    let labelled: Vec<usize> = (0..n).filter(|&v| labels[v] >= 0).collect();
    if labelled.is_empty() {
        return Err(Error::undefined(op, "no labelled nodes"));
    }
    match metric {
        Metric::Accuracy => {
            let hits = labelled
                .iter()
                .filter(|&&v| argmax(probs.row(v).iter().copied()) == labels[v] as usize)
                .count();
            Ok(hits as f64 / labelled.len() as f64)
        }
        Metric::MacroF1 => {
            let mut tp = vec![0usize; c];
            let mut fp = vec![0usize; c];
            let mut fnn = vec![0usize; c];
            for &v in &labelled {
                let pred = argmax(probs.row(v).iter().copied());
                let y = labels[v] as usize;
                if pred == y {
                    tp[y] += 1;
                } else {
                    fp[pred] += 1;
                    fnn[y] += 1;
                }
            }
            let f1_sum: f64 = (0..c)
                .map(|k| {
                    let denom = 2 * tp[k] + fp[k] + fnn[k];
                    if denom == 0 {
                        0.0
                    } else {
                        2.0 * tp[k] as f64 / denom as f64
                    }
                })
                .sum();
            Ok(f1_sum / c as f64)
        }
        Metric::RocAuc => {
            if c != 2 {
                return Err(Error::contract(op, format!("roc_auc needs 2 classes, got {c}")));
            }
            let scores: Vec<f64> = labelled.iter().map(|&v| probs[[v, 1]]).collect();
            let positive: Vec<bool> = labelled.iter().map(|&v| labels[v] == 1).collect();
            roc_auc(&scores, &positive)
        }
    }
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Mann-Whitney statistic `P(s_pos > s_neg) + ½·P(s_pos = s_neg)` from
/// mid-ranks, `O(n log n)`.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::undefined("domain_score", "roc_auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank*2 = i + j + 2
        let mid_x2 = (i + j + 2) as u128;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_x2 += mid_x2;
            }
        }
        i = j + 1;
    }
    let p = n_pos as u128;
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}
