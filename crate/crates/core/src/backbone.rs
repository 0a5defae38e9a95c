//! Two-layer GCN classifier without bias terms, its gradients, and the
//! parameter update rules (weight-decayed SGD and EMA smoothing).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Mat, Var};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph};

/// Clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Classifier weights: `w1` is `d × h'`, `w2` is `h' × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Mat,
    pub w2: Mat,
}

/// Gradients with the same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub w1: Mat,
    pub w2: Mat,
}

/// Differentiable handles on the classifier weights.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub w1: Var,
    pub w2: Var,
}

/// A graph ready for the classifier: normalised adjacency and features as
/// graph nodes (constants for observed graphs).
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub adj_norm: Var,
    pub features: Var,
}

impl GraphInput {
    pub fn from_graph(g: &Graph) -> Self {
        GraphInput {
            adj_norm: Var::constant(normalized_adjacency(g)),
            features: Var::constant(g.features.clone()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-head node representations, `N × h'`.
    pub hidden: Mat,
    /// Row-stochastic class probabilities, `N × C`.
    pub probs: Mat,
}

impl ModelParams {
    /// Uniform initialisation in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        ModelParams {
            w1: uniform_fan_in(d, hidden, rng),
            w2: uniform_fan_in(hidden, classes, rng),
        }
    }

    pub fn zeros(d: usize, hidden: usize, classes: usize) -> Self {
        ModelParams {
            w1: Array2::zeros((d, hidden)),
            w2: Array2::zeros((hidden, classes)),
        }
    }

    /// `(d, h', C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|x| x.is_finite())
    }

    pub fn as_params(&self) -> ParamVars {
        ParamVars {
            w1: Var::param(self.w1.clone()),
            w2: Var::param(self.w2.clone()),
        }
    }

    pub fn as_constants(&self) -> ParamVars {
        ParamVars {
            w1: Var::constant(self.w1.clone()),
            w2: Var::constant(self.w2.clone()),
        }
    }

    /// All weights flattened row-major, `w1` first.
    pub fn flatten(&self) -> Vec<f64> {
        self.w1.iter().chain(self.w2.iter()).copied().collect()
    }

    pub fn from_flat(d: usize, hidden: usize, classes: usize, flat: &[f64]) -> Result<Self> {
        let n1 = d * hidden;
        if flat.len() != n1 + hidden * classes {
            return Err(Error::contract(
                "ModelParams::from_flat",
                format!("expected {} values, got {}", n1 + hidden * classes, flat.len()),
            ));
        }
        Ok(ModelParams {
            w1: Array2::from_shape_vec((d, hidden), flat[..n1].to_vec()).unwrap(),
            w2: Array2::from_shape_vec((hidden, classes), flat[n1..].to_vec()).unwrap(),
        })
    }

    fn check_same_shape(&self, other_w1: &Mat, other_w2: &Mat, op: &'static str) -> Result<()> {
        if self.w1.dim() != other_w1.dim() || self.w2.dim() != other_w2.dim() {
            return Err(Error::contract(
                op,
                format!(
                    "shape mismatch: ({:?}, {:?}) vs ({:?}, {:?})",
                    self.w1.dim(),
                    self.w2.dim(),
                    other_w1.dim(),
                    other_w2.dim()
                ),
            ));
        }
        Ok(())
    }
}

impl ParamGrads {
    pub fn matrices(&self) -> [&Mat; 2] {
        [&self.w1, &self.w2]
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|x| x.is_finite())
    }
}

pub(crate) fn uniform_fan_in<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-s..=s))
}

/// Differentiable forward pass: `hidden = ReLU(Â X W1)`,
/// `probs = softmax(Â hidden W2)`. Returns `(hidden, probs)`.
pub fn gcn_forward_var(adj_norm: &Var, features: &Var, params: &ParamVars) -> (Var, Var) {
    let hidden = adj_norm.matmul(features).matmul(&params.w1).relu();
    let logits = adj_norm.matmul(&hidden).matmul(&params.w2);
    (hidden, logits.softmax_rows())
}

pub fn gcn_forward(adj_norm: &Mat, features: &Mat, params: &ModelParams) -> Result<ForwardOutput> {
    let n = adj_norm.nrows();
    let (d, _, _) = params.dims();
    if adj_norm.ncols() != n || features.nrows() != n || features.ncols() != d {
        return Err(Error::contract(
            "gcn_forward",
            format!(
                "adjacency {:?}, features {:?}, W1 {:?}",
                adj_norm.dim(),
                features.dim(),
                params.w1.dim()
            ),
        ));
    }
    if params.w2.nrows() != params.w1.ncols() {
        return Err(Error::contract("gcn_forward", "W1 and W2 inner widths differ"));
    }
    let (hidden, probs) = gcn_forward_var(
        &Var::constant(adj_norm.clone()),
        &Var::constant(features.clone()),
        &params.as_constants(),
    );
    Ok(ForwardOutput {
        hidden: hidden.value().clone(),
        probs: probs.value().clone(),
    })
}

/// Mean negative log-likelihood over the masked nodes, as a graph node.
pub fn supervised_loss_var(probs: &Var, labels: &[i64], mask: &[bool]) -> Result<Var> {
    let (n, c) = probs.shape();
    if labels.len() != n || mask.len() != n {
        return Err(Error::contract(
            "supervised_loss",
            format!("{n} rows but {} labels and {} mask entries", labels.len(), mask.len()),
        ));
    }
    let mut onehot = Array2::zeros((n, c));
    let mut count = 0usize;
    for v in 0..n {
        if mask[v] {
            let y = labels[v];
            if y < 0 || y as usize >= c {
                return Err(Error::contract(
                    "supervised_loss",
                    format!("masked node {v} has label {y}"),
                ));
            }
            onehot[[v, y as usize]] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("supervised_loss", "degenerate-mask: no nodes selected"));
    }
    let logp = probs.clamp(PROB_EPS, 1.0).ln();
    Ok(logp
        .mul(&Var::constant(onehot))
        .sum()
        .scale(-1.0 / count as f64))
}

pub fn supervised_loss(probs: &Mat, labels: &[i64], mask: &[bool]) -> Result<f64> {
    Ok(supervised_loss_var(&Var::constant(probs.clone()), labels, mask)?.item())
}

/// Exact gradient of the scalar built by `loss` with respect to the weights.
pub fn loss_gradient<F>(params: &ModelParams, loss: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&ParamVars) -> Result<Var>,
{
    let vars = params.as_params();
    let l = loss(&vars)?;
    let value = l.item();
    if !value.is_finite() {
        return Err(Error::numeric("loss_gradient", 0, format!("loss is {value}")));
    }
    let mut g = grad(&l, &[&vars.w1, &vars.w2]);
    let w2 = g.pop().unwrap().value().clone();
    let w1 = g.pop().unwrap().value().clone();
    let grads = ParamGrads { w1, w2 };
    if !grads.is_finite() {
        return Err(Error::numeric("loss_gradient", 0, "gradient has non-finite entries"));
    }
    Ok((value, grads))
}

/// `θ ← θ − lr·(g + weight_decay·θ)`.
pub fn sgd_step(params: &ModelParams, grads: &ParamGrads, lr: f64, weight_decay: f64) -> ModelParams {
    debug_assert!(params.check_same_shape(&grads.w1, &grads.w2, "sgd_step").is_ok());
    let step = |theta: &Mat, g: &Mat| theta - &((g + &(theta * weight_decay)) * lr);
    ModelParams {
        w1: step(&params.w1, &grads.w1),
        w2: step(&params.w2, &grads.w2),
    }
}

/// `alpha·ema + (1 − alpha)·current`.
pub fn ema_update(ema: &ModelParams, current: &ModelParams, alpha: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract("ema_update", format!("alpha = {alpha} outside [0, 1]")));
    }
    ema.check_same_shape(&current.w1, &current.w2, "ema_update")?;
    let mix = |e: &Mat, c: &Mat| e * alpha + c * (1.0 - alpha);
    Ok(ModelParams {
        w1: mix(&ema.w1, &current.w1),
        w2: mix(&ema.w2, &current.w2),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointJson {
    d: usize,
    h_prime: usize,
    c: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl ModelParams {
    /// Checkpoint document `{"d", "h_prime", "c", "w1", "w2"}` with row-major
    /// weight lists. Floats are written in shortest round-trip form.
    pub fn to_checkpoint_json(&self) -> String {
        let (d, h, c) = self.dims();
        let doc = CheckpointJson {
            d,
            h_prime: h,
            c,
            w1: self.w1.iter().copied().collect(),
            w2: self.w2.iter().copied().collect(),
        };
        serde_json::to_string(&doc).expect("checkpoint serialises")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointJson = serde_json::from_str(text).map_err(|e| {
            Error::contract("ModelParams::from_checkpoint_json", e.to_string())
        })?;
        if doc.w1.len() != doc.d * doc.h_prime || doc.w2.len() != doc.h_prime * doc.c {
            return Err(Error::contract(
                "ModelParams::from_checkpoint_json",
                "weight list lengths disagree with d, h_prime, c",
            ));
        }
        let mut flat = doc.w1;
        flat.extend(doc.w2);
        ModelParams::from_flat(doc.d, doc.h_prime, doc.c, &flat)
    }
}
