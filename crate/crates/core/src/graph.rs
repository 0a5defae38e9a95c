//! Attributed graphs, validation, GCN adjacency normalisation and the
//! synthetic drifting stochastic-block-model sequence.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::error::{Error, Result};

/// One domain: an undirected, unweighted graph with node features and
/// optional labels (`-1` marks an unlabeled node).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: Mat,
    pub labels: Option<Vec<i64>>,
    pub domain_id: String,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Mat,
        labels: Option<Vec<i64>>,
        domain_id: impl Into<String>,
    ) -> Self {
        Graph {
            num_nodes,
            edges,
            features,
            labels,
            domain_id: domain_id.into(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Dense 0/1 adjacency without self-loops.
    pub fn dense_adjacency(&self) -> Mat {
        let mut a = Array2::zeros((self.num_nodes, self.num_nodes));
        for &(u, v) in &self.edges {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
        a
    }

    /// Copy of this graph with labels stripped; what adaptation gets to see.
    pub fn without_labels(&self) -> Graph {
        Graph {
            labels: None,
            ..self.clone()
        }
    }

    /// Labels with unlabeled nodes filled in as `-1`.
    pub fn labels_or_unlabeled(&self) -> Vec<i64> {
        self.labels
            .clone()
            .unwrap_or_else(|| vec![-1; self.num_nodes])
    }
}

/// Ordered domains sharing one feature width and label space.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSequence {
    pub domains: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl GraphSequence {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Every violation across all member graphs, plus sequence-level
    /// feature-width mismatches.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for g in &self.domains {
            if g.feature_dim() != self.feature_dim {
                report.push(
                    ViolationCode::FeatureDimMismatch,
                    format!(
                        "domain {}: {} feature columns, sequence expects {}",
                        g.domain_id,
                        g.feature_dim(),
                        self.feature_dim
                    ),
                );
            }
            for v in validate_graph(g, self.num_classes).violations {
                report.push(v.code, format!("domain {}: {}", g.domain_id, v.detail));
            }
        }
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    EdgeEndpointOutOfRange,
    DuplicateEdge,
    SelfLoop,
    FeatureRowMismatch,
    FeatureDimMismatch,
    NonFiniteFeature,
    LabelLengthMismatch,
    LabelOutOfRange,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::EdgeEndpointOutOfRange => "edge-endpoint-out-of-range",
            ViolationCode::DuplicateEdge => "duplicate-edge",
            ViolationCode::SelfLoop => "self-loop",
            ViolationCode::FeatureRowMismatch => "feature-row-mismatch",
            ViolationCode::FeatureDimMismatch => "feature-dim-mismatch",
            ViolationCode::NonFiniteFeature => "non-finite-feature",
            ViolationCode::LabelLengthMismatch => "label-length-mismatch",
            ViolationCode::LabelOutOfRange => "label-out-of-range",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, code: ViolationCode) -> usize {
        self.violations.iter().filter(|v| v.code == code).count()
    }

    fn push(&mut self, code: ViolationCode, detail: String) {
        self.violations.push(Violation { code, detail });
    }
}

/// Collects every invariant violation of `g`. Never fails; an empty report
/// means the graph is valid.
pub fn validate_graph(g: &Graph, num_classes: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = g.num_nodes;

    let mut seen = HashSet::with_capacity(g.edges.len());
    for (k, &(u, v)) in g.edges.iter().enumerate() {
        if u >= n || v >= n {
            report.push(
                ViolationCode::EdgeEndpointOutOfRange,
                format!("edge #{k} ({u}, {v}) with {n} nodes"),
            );
            continue;
        }
        if u == v {
            report.push(ViolationCode::SelfLoop, format!("edge #{k} ({u}, {v})"));
            continue;
        }
        if !seen.insert((u.min(v), u.max(v))) {
            report.push(
                ViolationCode::DuplicateEdge,
                format!("edge #{k} ({u}, {v}) already present"),
            );
        }
    }

    if g.features.nrows() != n {
        report.push(
            ViolationCode::FeatureRowMismatch,
            format!("{} feature rows for {n} nodes", g.features.nrows()),
        );
    }
    if let Some((idx, _)) = g
        .features
        .indexed_iter()
        .find(|(_, x)| !x.is_finite())
    {
        report.push(
            ViolationCode::NonFiniteFeature,
            format!("feature ({}, {}) is not finite", idx.0, idx.1),
        );
    }

    if let Some(labels) = &g.labels {
        if labels.len() != n {
            report.push(
                ViolationCode::LabelLengthMismatch,
                format!("{} labels for {n} nodes", labels.len()),
            );
        }
        for (v, &y) in labels.iter().enumerate() {
            if y < -1 || y >= num_classes as i64 {
                report.push(
                    ViolationCode::LabelOutOfRange,
                    format!("node {v} has label {y}, expected -1..{num_classes}"),
                );
            }
        }
    }
    report
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` of an unweighted graph, with `D̃` the degree
/// matrix of `A + I`.
pub fn normalized_adjacency(g: &Graph) -> Mat {
    normalize_dense(&g.dense_adjacency())
}

/// Normalisation of a weighted dense adjacency with zero diagonal.
pub fn normalized_weighted_adjacency(weights: &Mat) -> Result<Mat> {
    check_weights(weights)?;
    Ok(normalize_dense(weights))
}

/// Differentiable normalisation for memory graphs whose edge weights are
/// produced by the generator.
pub fn normalized_adjacency_var(weights: &Var) -> Result<Var> {
    check_weights(weights.value())?;
    let k = weights.rows();
    let a_hat = weights.add(&Var::constant(Array2::eye(k)));
    // deg^{-1/2} = exp(-ln(deg) / 2); deg >= 1 because of the self-loop.
    let inv_sqrt_deg = a_hat.sum_cols().ln().scale(-0.5).exp();
    let outer = inv_sqrt_deg.matmul(&inv_sqrt_deg.t());
    Ok(a_hat.mul(&outer))
}

fn check_weights(weights: &Mat) -> Result<()> {
    if weights.nrows() != weights.ncols() {
        return Err(Error::contract(
            "normalized_adjacency",
            format!("adjacency is {}x{}, expected square", weights.nrows(), weights.ncols()),
        ));
    }
    if let Some(((i, j), w)) = weights.indexed_iter().find(|(_, w)| !(**w >= 0.0)) {
        return Err(Error::contract(
            "normalized_adjacency",
            format!("invalid-weight: entry ({i}, {j}) = {w} is negative or NaN"),
        ));
    }
    Ok(())
}

fn normalize_dense(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut a_hat = a.clone();
    for i in 0..n {
        a_hat[[i, i]] += 1.0;
    }
    let inv_sqrt: Array1<f64> = a_hat.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for ((i, j), x) in a_hat.indexed_iter_mut() {
        *x *= inv_sqrt[i] * inv_sqrt[j];
    }
    a_hat
}

/// Parameters of the synthetic drifting sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSpec {
    pub num_domains: usize,
    pub nodes_per_domain: usize,
    pub num_blocks: usize,
    pub feature_dim: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_noise: f64,
    pub drift_step: f64,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            num_domains: 6,
            nodes_per_domain: 300,
            num_blocks: 3,
            feature_dim: 8,
            p_intra: 0.1,
            p_inter: 0.02,
            feature_noise: 1.0,
            drift_step: 0.05,
            seed: 0,
        }
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        let op = "synth_drift_sequence";
        if self.num_blocks == 0 || self.num_blocks > self.nodes_per_domain {
            return Err(Error::contract(
                op,
                format!(
                    "invalid-spec: num_blocks {} must be in 1..={}",
                    self.num_blocks, self.nodes_per_domain
                ),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::contract(op, "invalid-spec: feature_dim must be positive"));
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::contract(op, format!("invalid-spec: {name} = {p} not in [0, 1]")));
            }
        }
        for (name, x) in [("feature_noise", self.feature_noise), ("drift_step", self.drift_step)] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::contract(op, format!("invalid-spec: {name} = {x} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Block of node `v`: contiguous, balanced ranges.
    pub fn block_of(&self, v: usize) -> usize {
        v * self.num_blocks / self.nodes_per_domain
    }
}

/// Stochastic-block-model sequence whose domain `t` uses inter-block
/// probability `p_inter + t·drift_step` and block feature means translated by
/// `t·drift_step` along one fixed random unit direction. Labels are block ids.
pub fn synth_drift_sequence(spec: &DriftSpec) -> Result<GraphSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;

    let means: Mat = Array2::from_shape_fn((spec.num_blocks, d), |_| rng.sample(StandardNormal));
    let mut direction: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.dot(&direction).sqrt();
    if norm > 0.0 {
        direction /= norm;
    }

    let n = spec.nodes_per_domain;
    let labels: Vec<i64> = (0..n).map(|v| spec.block_of(v) as i64).collect();
    let mut domains = Vec::with_capacity(spec.num_domains);
    for t in 0..spec.num_domains {
        let shift = t as f64 * spec.drift_step;
        let p_inter = (spec.p_inter + shift).clamp(0.0, 1.0);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let p = if spec.block_of(u) == spec.block_of(v) {
                    spec.p_intra
                } else {
                    p_inter
                };
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        let features = Array2::from_shape_fn((n, d), |(v, k)| {
            let noise: f64 = rng.sample(StandardNormal);
            means[[spec.block_of(v), k]] + shift * direction[k] + spec.feature_noise * noise
        });
        domains.push(Graph::new(n, edges, features, Some(labels.clone()), format!("d{t}")));
    }
    Ok(GraphSequence {
        domains,
        num_classes: spec.num_blocks,
        feature_dim: d,
    })
}
