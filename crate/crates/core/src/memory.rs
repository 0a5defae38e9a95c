//! Variational memory-graph generator.
//!
//! A GCN encoder maps the observed graph to per-node Gaussian latents
//! `[μ; log σ]`. A learned projection scores every node and keeps the top
//! `K`; their latents are sampled with the reparameterisation trick and used
//! directly as memory node features. Edge logits come from a symmetrised
//! pair MLP and are relaxed to `[0, 1]` weights with logistic noise.
//!
//! The generator is trained against three losses evaluated at the frozen
//! post-adaptation classifier:
//!
//! * [`mgl_loss`]: column-cosine distance between the classifier gradients
//!   on the memory and on the observed graph,
//! * [`reg_loss`]: KL of node latents to `N(0, I)` plus KL of edge means to
//!   `Bernoulli(q)`,
//! * [`gen_loss`]: distance between summed hidden representations.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptation::adaptation_loss_var;
use crate::autodiff::{grad, Mat, Var};
use crate::backbone::{gcn_forward_var, loss_gradient, uniform_fan_in, GraphInput, ModelParams, ParamGrads};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency_var, normalized_weighted_adjacency, Graph};
use crate::optim::Adam;

/// Bound applied to the encoder's `log σ` output.
pub const LOG_SIGMA_BOUND: f64 = 10.0;
/// Bernoulli means are clamped to `[EDGE_MEAN_EPS, 1 − EDGE_MEAN_EPS]`.
pub const EDGE_MEAN_EPS: f64 = 1e-6;
/// Column norms below this count as zero in [`grad_distance`].
pub const ZERO_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// `K = max(1, round(k_ratio · N))`, clamped to `N`.
    pub k_ratio: f64,
    pub tau: f64,
    pub q_prior: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub outer_epochs: usize,
    pub lr_gen: f64,
    pub seed: u64,
    /// Hidden width of the encoder GCN.
    pub enc_hidden: usize,
    /// Hidden width of the edge-scoring MLP.
    pub edge_hidden: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k_ratio: 0.05,
            tau: 0.5,
            q_prior: 0.05,
            lambda1: 1.0,
            lambda2: 1.0,
            outer_epochs: 50,
            lr_gen: 0.01,
            seed: 0,
            enc_hidden: 32,
            edge_hidden: 16,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "GenConfig";
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::contract(op, format!("k_ratio = {} not in (0, 1]", self.k_ratio)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(op, format!("tau = {} must be positive", self.tau)));
        }
        if !(self.q_prior > 0.0 && self.q_prior < 1.0) {
            return Err(Error::contract(op, format!("q_prior = {} not in (0, 1)", self.q_prior)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::contract(op, "loss weights must be >= 0"));
        }
        if !(self.lr_gen > 0.0 && self.lr_gen.is_finite()) {
            return Err(Error::contract(op, format!("lr_gen = {} must be positive", self.lr_gen)));
        }
        if self.enc_hidden == 0 || self.edge_hidden == 0 {
            return Err(Error::contract(op, "hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn memory_size(&self, num_nodes: usize) -> usize {
        ((self.k_ratio * num_nodes as f64).round() as usize)
            .max(1)
            .min(num_nodes)
    }
}

/// Generator weights for feature width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `d × h_g`
    pub enc_w1: Mat,
    /// `h_g × 2d`, output split into `μ` (first `d`) and `log σ`.
    pub enc_w2: Mat,
    /// `2d × 1` top-k projection.
    pub proj: Mat,
    /// `2d × h_e`
    pub edge_w1: Mat,
    /// `h_e × 1`
    pub edge_w2: Mat,
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub enc_w1: Var,
    pub enc_w2: Var,
    pub proj: Var,
    pub edge_w1: Var,
    pub edge_w2: Var,
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(d: usize, enc_hidden: usize, edge_hidden: usize, rng: &mut R) -> Self {
        GeneratorParams {
            enc_w1: uniform_fan_in(d, enc_hidden, rng),
            enc_w2: uniform_fan_in(enc_hidden, 2 * d, rng),
            proj: uniform_fan_in(2 * d, 1, rng),
            edge_w1: uniform_fan_in(2 * d, edge_hidden, rng),
            edge_w2: uniform_fan_in(edge_hidden, 1, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_w1.nrows()
    }

    pub fn matrices(&self) -> [&Mat; 5] {
        [&self.enc_w1, &self.enc_w2, &self.proj, &self.edge_w1, &self.edge_w2]
    }

    pub fn matrices_mut(&mut self) -> [&mut Mat; 5] {
        [
            &mut self.enc_w1,
            &mut self.enc_w2,
            &mut self.proj,
            &mut self.edge_w1,
            &mut self.edge_w2,
        ]
    }

    fn vars(&self, tracked: bool) -> GeneratorVars {
        let mk = |m: &Mat| {
            if tracked {
                Var::param(m.clone())
            } else {
                Var::constant(m.clone())
            }
        };
        GeneratorVars {
            enc_w1: mk(&self.enc_w1),
            enc_w2: mk(&self.enc_w2),
            proj: mk(&self.proj),
            edge_w1: mk(&self.edge_w1),
            edge_w2: mk(&self.edge_w2),
        }
    }

    pub fn as_params(&self) -> GeneratorVars {
        self.vars(true)
    }

    pub fn as_constants(&self) -> GeneratorVars {
        self.vars(false)
    }
}

impl GeneratorVars {
    pub fn all(&self) -> [&Var; 5] {
        [&self.enc_w1, &self.enc_w2, &self.proj, &self.edge_w1, &self.edge_w2]
    }
}

/// The `K` selected latent distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Selected `μ` rows, gated by their scores.
    pub mu: Mat,
    pub log_sigma: Mat,
}

/// Differentiable counterpart of [`LatentSelection`].
#[derive(Debug, Clone)]
pub struct SelectionVars {
    pub indices: Vec<usize>,
    /// `K × 1`
    pub scores: Var,
    pub mu: Var,
    pub log_sigma: Var,
    /// Set when the projection had zero norm and was used unnormalised.
    pub zero_norm_projection: bool,
}

impl SelectionVars {
    pub fn to_selection(&self) -> LatentSelection {
        LatentSelection {
            indices: self.indices.clone(),
            scores: self.scores.value().iter().copied().collect(),
            mu: self.mu.value().clone(),
            log_sigma: self.log_sigma.value().clone(),
        }
    }
}

/// A stored synthetic graph: symmetric `[0, 1]` edge weights with zero
/// diagonal and `K × d` node features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryGraph {
    pub num_nodes: usize,
    pub adj_weights: Mat,
    pub features: Mat,
    pub domain_id: String,
}

impl MemoryGraph {
    pub fn input(&self) -> Result<GraphInput> {
        Ok(GraphInput {
            adj_norm: Var::constant(normalized_weighted_adjacency(&self.adj_weights)?),
            features: Var::constant(self.features.clone()),
        })
    }

    /// Checks symmetry, range, zero diagonal and shapes.
    pub fn check_invariants(&self) -> Result<()> {
        let op = "MemoryGraph";
        let k = self.num_nodes;
        if k == 0 || self.adj_weights.dim() != (k, k) || self.features.nrows() != k {
            return Err(Error::contract(op, "inconsistent node count"));
        }
        for i in 0..k {
            if self.adj_weights[[i, i]] != 0.0 {
                return Err(Error::contract(op, format!("diagonal entry {i} is nonzero")));
            }
            for j in 0..k {
                let a = self.adj_weights[[i, j]];
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::contract(op, format!("weight ({i}, {j}) = {a} outside [0, 1]")));
                }
                if (a - self.adj_weights[[j, i]]).abs() > 1e-12 {
                    return Err(Error::contract(op, format!("weights ({i}, {j}) not symmetric")));
                }
            }
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract(op, "non-finite feature"));
        }
        Ok(())
    }

    /// `{"k", "adj", "features", "domain_id"}` with row-major lists.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&MemoryJson {
            k: self.num_nodes,
            adj: self.adj_weights.iter().copied().collect(),
            features: self.features.iter().copied().collect(),
            domain_id: self.domain_id.clone(),
        })
        .expect("memory graph serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let op = "MemoryGraph::from_json";
        let doc: MemoryJson =
            serde_json::from_str(text).map_err(|e| Error::contract(op, e.to_string()))?;
        let k = doc.k;
        if k == 0 || doc.adj.len() != k * k || !doc.features.len().is_multiple_of(k) {
            return Err(Error::contract(op, "list lengths disagree with k"));
        }
        let d = doc.features.len() / k;
        let m = MemoryGraph {
            num_nodes: k,
            adj_weights: Array2::from_shape_vec((k, k), doc.adj).unwrap(),
            features: Array2::from_shape_vec((k, d), doc.features).unwrap(),
            domain_id: doc.domain_id,
        };
        m.check_invariants()?;
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryJson {
    k: usize,
    adj: Vec<f64>,
    features: Vec<f64>,
    domain_id: String,
}

/// Encoder GCN: `Â · ReLU(Â X W1) · W2`, split into `μ` and clamped `log σ`.
pub fn encode_distributions_var(input: &GraphInput, phi: &GeneratorVars) -> (Var, Var) {
    let d = input.features.cols();
    let h = input
        .adj_norm
        .matmul(&input.features)
        .matmul(&phi.enc_w1)
        .relu();
    let out = input.adj_norm.matmul(&h).matmul(&phi.enc_w2);
    let mu = out.slice_cols(0, d);
    let log_sigma = out
        .slice_cols(d, 2 * d)
        .clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
    (mu, log_sigma)
}

pub fn encode_distributions(g: &Graph, phi: &GeneratorParams) -> Result<(Mat, Mat)> {
    check_generator_dims(g.feature_dim(), phi, "encode_distributions")?;
    let (mu, ls) = encode_distributions_var(&GraphInput::from_graph(g), &phi.as_constants());
    Ok((mu.value().clone(), ls.value().clone()))
}

fn check_generator_dims(d: usize, phi: &GeneratorParams, op: &'static str) -> Result<()> {
    let h = phi.enc_w1.ncols();
    let he = phi.edge_w1.ncols();
    let ok = phi.enc_w1.nrows() == d
        && phi.enc_w2.dim() == (h, 2 * d)
        && phi.proj.dim() == (2 * d, 1)
        && phi.edge_w1.nrows() == 2 * d
        && phi.edge_w2.dim() == (he, 1);
    if ok {
        Ok(())
    } else {
        Err(Error::contract(op, format!("generator weights do not fit feature width {d}")))
    }
}

/// Order of node ids by descending score; ties go to the lower index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scores nodes by `sigmoid([μ; log σ] · p / ‖p‖)` and keeps the top `k`
/// (clamped to `N`). Selected `μ` rows are multiplied by their score so the
/// projection receives gradient; `log σ` rows are passed through ungated.
pub fn topk_select_var(mu_full: &Var, log_sigma_full: &Var, proj: &Var, k: usize) -> SelectionVars {
    let n = mu_full.rows();
    let d = mu_full.cols();
    let k = k.max(1).min(n);
    let latent = mu_full.concat_cols(log_sigma_full);
    let raw = latent.matmul(proj);
    let norm = proj.norm();
    let zero_norm = norm.item() == 0.0;
    let logits = if zero_norm {
        log::warn!("topk_select: projection has zero norm; using unnormalised scores");
        raw
    } else {
        raw.div(&norm.broadcast_scalar(n, 1))
    };
    let scores = logits.sigmoid();
    let order = rank_desc(scores.value().as_slice().expect("column is contiguous"));
    let indices: Vec<usize> = order.into_iter().take(k).collect();
    let idx = Rc::new(indices.clone());
    let sel_scores = scores.gather_rows(idx.clone());
    let mu = mu_full
        .gather_rows(idx.clone())
        .mul(&sel_scores.broadcast_cols(d));
    let log_sigma = log_sigma_full.gather_rows(idx);
    SelectionVars {
        indices,
        scores: sel_scores,
        mu,
        log_sigma,
        zero_norm_projection: zero_norm,
    }
}

pub fn topk_select(mu_full: &Mat, log_sigma_full: &Mat, proj: &Mat, k: usize) -> Result<LatentSelection> {
    if k == 0 {
        return Err(Error::contract("topk_select", "K must be >= 1"));
    }
    if mu_full.dim() != log_sigma_full.dim() || proj.dim() != (2 * mu_full.ncols(), 1) {
        return Err(Error::contract("topk_select", "shape mismatch"));
    }
    Ok(topk_select_var(
        &Var::constant(mu_full.clone()),
        &Var::constant(log_sigma_full.clone()),
        &Var::constant(proj.clone()),
        k,
    )
    .to_selection())
}

/// `μ + exp(log σ) ⊙ ε`.
pub fn sample_latents_var(mu: &Var, log_sigma: &Var, noise: &Mat) -> Var {
    mu.add(&log_sigma.exp().mul(&Var::constant(noise.clone())))
}

pub fn sample_latents(sel: &LatentSelection, noise: &Mat) -> Result<Mat> {
    if noise.dim() != sel.mu.dim() {
        return Err(Error::contract("sample_latents", "noise shape differs from μ"));
    }
    Ok(sample_latents_var(
        &Var::constant(sel.mu.clone()),
        &Var::constant(sel.log_sigma.clone()),
        noise,
    )
    .value()
    .clone())
}

/// `w_ij = (MLP([z_i; z_j]) + MLP([z_j; z_i])) / 2` with
/// `MLP(x) = ReLU(x · W1) · w2`.
pub fn edge_weights_var(z: &Var, phi: &GeneratorVars) -> Var {
    let k = z.rows();
    let left: Vec<usize> = (0..k * k).map(|p| p / k).collect();
    let right: Vec<usize> = (0..k * k).map(|p| p % k).collect();
    let pairs = z
        .gather_rows(Rc::new(left))
        .concat_cols(&z.gather_rows(Rc::new(right)));
    let scores = pairs
        .matmul(&phi.edge_w1)
        .relu()
        .matmul(&phi.edge_w2)
        .reshape(k, k);
    scores.add(&scores.t()).scale(0.5)
}

pub fn edge_weights(z: &Mat, phi: &GeneratorParams) -> Result<Mat> {
    check_generator_dims(z.ncols(), phi, "edge_weights")?;
    Ok(edge_weights_var(&Var::constant(z.clone()), &phi.as_constants())
        .value()
        .clone())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn off_diagonal_mask(k: usize) -> Rc<Mat> {
    Rc::new(Array2::from_shape_fn((k, k), |(i, j)| if i == j { 0.0 } else { 1.0 }))
}

/// Relaxed Bernoulli edges: for `i < j`,
/// `a_ij = sigmoid((w_ij + logit(δ_ij)) / τ)`, mirrored, zero diagonal.
/// Only the upper triangle of `uniform_noise` is read.
pub fn sample_edges_var(w: &Var, tau: f64, uniform_noise: &Mat) -> Var {
    let k = w.rows();
    let noise_logits = Array2::from_shape_fn((k, k), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Less => logit(uniform_noise[[i, j]]),
        std::cmp::Ordering::Greater => logit(uniform_noise[[j, i]]),
        std::cmp::Ordering::Equal => 0.0,
    });
    // Build from the upper triangle of w only, so the output is symmetric
    // even for a non-symmetric input.
    let upper = Rc::new(Array2::from_shape_fn((k, k), |(i, j)| if i < j { 1.0 } else { 0.0 }));
    let w_sym = w.masked(upper.clone()).add(&w.masked(upper).t());
    w_sym
        .add(&Var::constant(noise_logits))
        .scale(1.0 / tau)
        .sigmoid()
        .masked(off_diagonal_mask(k))
}

pub fn sample_edges(w: &Mat, tau: f64, uniform_noise: &Mat) -> Result<Mat> {
    let op = "sample_edges";
    if !(tau > 0.0) {
        return Err(Error::contract(op, format!("tau = {tau} must be positive")));
    }
    let k = w.nrows();
    if w.dim() != (k, k) || uniform_noise.dim() != (k, k) {
        return Err(Error::contract(op, "w and noise must be square and equal-sized"));
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let u = uniform_noise[[i, j]];
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::contract(op, format!("noise ({i}, {j}) = {u} not in (0, 1)")));
            }
        }
    }
    Ok(sample_edges_var(&Var::constant(w.clone()), tau, uniform_noise)
        .value()
        .clone())
}

/// Standard-normal node noise `K × d` followed by the upper triangle of the
/// uniform edge noise, both drawn from `rng` in row-major order.
pub fn draw_noise<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> (Mat, Mat) {
    let eps = Array2::from_shape_fn((k, d), |_| rng.sample(StandardNormal));
    let mut delta = Array2::from_elem((k, k), 0.5);
    for i in 0..k {
        for j in (i + 1)..k {
            let u: f64 = rng.sample(Open01);
            delta[[i, j]] = u;
            delta[[j, i]] = u;
        }
    }
    (eps, delta)
}

/// One differentiable pass of the generator.
#[derive(Debug, Clone)]
pub struct GeneratorDraw {
    pub selection: SelectionVars,
    /// Sampled latents, used as memory features.
    pub latents: Var,
    /// Symmetric edge logits before noise.
    pub edge_logits: Var,
    /// Relaxed adjacency weights.
    pub adj: Var,
}

impl GeneratorDraw {
    pub fn input(&self) -> Result<GraphInput> {
        Ok(GraphInput {
            adj_norm: normalized_adjacency_var(&self.adj)?,
            features: self.latents.clone(),
        })
    }

    pub fn to_memory(&self, domain_id: &str) -> MemoryGraph {
        MemoryGraph {
            num_nodes: self.latents.rows(),
            adj_weights: self.adj.value().clone(),
            features: self.latents.value().clone(),
            domain_id: domain_id.to_string(),
        }
    }
}

pub fn generator_draw<R: Rng + ?Sized>(
    input: &GraphInput,
    phi: &GeneratorVars,
    k: usize,
    tau: f64,
    rng: &mut R,
) -> GeneratorDraw {
    let (mu_full, ls_full) = encode_distributions_var(input, phi);
    let selection = topk_select_var(&mu_full, &ls_full, &phi.proj, k);
    let k = selection.indices.len();
    let (eps, delta) = draw_noise(k, mu_full.cols(), rng);
    let latents = sample_latents_var(&selection.mu, &selection.log_sigma, &eps);
    let edge_logits = edge_weights_var(&latents, phi);
    let adj = sample_edges_var(&edge_logits, tau, &delta);
    GeneratorDraw {
        selection,
        latents,
        edge_logits,
        adj,
    }
}

/// Encode, select, sample latents, score and sample edges.
pub fn generate_memory<R: Rng + ?Sized>(
    g: &Graph,
    phi: &GeneratorParams,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<MemoryGraph> {
    cfg.validate()?;
    check_generator_dims(g.feature_dim(), phi, "generate_memory")?;
    let k = cfg.memory_size(g.num_nodes);
    let draw = generator_draw(&GraphInput::from_graph(g), &phi.as_constants(), k, cfg.tau, rng);
    Ok(draw.to_memory(&g.domain_id))
}

/// Sum over weight matrices of `Σ_columns (1 − cos(ĝ_col, g_col))`.
/// A column with norm below [`ZERO_COLUMN_NORM`] contributes 1 when exactly
/// one side is zero and 0 when both are.
pub fn grad_distance_var(g_hat: &[Var], g: &[Var]) -> Var {
    assert_eq!(g_hat.len(), g.len(), "grad_distance: matrix count mismatch");
    let mut total = Var::scalar(0.0);
    for (a, b) in g_hat.iter().zip(g) {
        assert_eq!(a.shape(), b.shape(), "grad_distance: shape mismatch");
        let cols = a.cols();
        let sq_a = a.mul(a).sum_rows();
        let sq_b = b.mul(b).sum_rows();
        let mut valid = Array2::zeros((1, cols));
        let mut fixed = 0.0;
        for j in 0..cols {
            let za = sq_a.value()[[0, j]].sqrt() < ZERO_COLUMN_NORM;
            let zb = sq_b.value()[[0, j]].sqrt() < ZERO_COLUMN_NORM;
            match (za, zb) {
                (false, false) => valid[[0, j]] = 1.0,
                (true, true) => {}
                _ => fixed += 1.0,
            }
        }
        let invalid = valid.mapv(|v: f64| 1.0 - v);
        let valid = Rc::new(valid);
        // Degenerate columns get unit norms so the quotient stays finite;
        // their numerators are masked to zero.
        let norm_a = sq_a.add(&Var::constant(invalid.clone())).sqrt();
        let norm_b = sq_b.add(&Var::constant(invalid)).sqrt();
        let cos = a
            .mul(b)
            .sum_rows()
            .masked(valid.clone())
            .div(&norm_a.mul(&norm_b))
            .clamp(-1.0, 1.0);
        let count = valid.sum();
        let d = cos.sum().rsub_scalar(count + fixed);
        total = total.add(&d);
    }
    total
}

pub fn grad_distance(g_hat: &ParamGrads, g: &ParamGrads) -> Result<f64> {
    if g_hat.w1.dim() != g.w1.dim() || g_hat.w2.dim() != g.w2.dim() {
        return Err(Error::contract("grad_distance", "gradient shapes differ"));
    }
    let wrap = |p: &ParamGrads| [Var::constant(p.w1.clone()), Var::constant(p.w2.clone())];
    Ok(grad_distance_var(&wrap(g_hat), &wrap(g)).item())
}

/// Classifier gradient of the adaptation loss on an observed graph; the
/// fixed target for gradient matching.
pub fn target_gradients(g: &Graph, theta: &ModelParams) -> Result<ParamGrads> {
    let input = GraphInput::from_graph(g);
    let (_, grads) = loss_gradient(theta, |p| Ok(adaptation_loss_var(&input, p)))
        .map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::numeric("mgl_loss", 0, msg),
            other => other,
        })?;
    Ok(grads)
}

/// Gradient-matching loss for a differentiable memory. The returned node
/// depends on the generator through `memory`, with second-order terms
/// through the classifier gradient.
pub fn mgl_loss_var(memory: &GraphInput, target: &ParamGrads, theta: &ModelParams) -> Result<Var> {
    let vars = theta.as_params();
    let loss = adaptation_loss_var(memory, &vars);
    if !loss.item().is_finite() {
        return Err(Error::numeric("mgl_loss", 0, "memory adaptation loss is not finite"));
    }
    let g_hat = grad(&loss, &[&vars.w1, &vars.w2]);
    if g_hat.iter().any(|g| g.value().iter().any(|x| !x.is_finite())) {
        return Err(Error::numeric("mgl_loss", 0, "memory gradient is not finite"));
    }
    let target = [Var::constant(target.w1.clone()), Var::constant(target.w2.clone())];
    Ok(grad_distance_var(&g_hat, &target))
}

pub fn mgl_loss(memory: &MemoryGraph, g: &Graph, theta: &ModelParams) -> Result<f64> {
    check_memory_width(memory, theta, "mgl_loss")?;
    let target = target_gradients(g, theta)?;
    Ok(mgl_loss_var(&memory.input()?, &target, theta)?.item())
}

fn check_memory_width(memory: &MemoryGraph, theta: &ModelParams, op: &'static str) -> Result<()> {
    let d = theta.dims().0;
    if memory.features.ncols() != d {
        return Err(Error::contract(
            op,
            format!("memory features have width {}, classifier expects {d}", memory.features.ncols()),
        ));
    }
    Ok(())
}

/// `½ Σ (μ² + σ² − ln σ² − 1)` over the selected latents.
pub fn gaussian_kl_var(mu: &Var, log_sigma: &Var) -> Var {
    let var = log_sigma.scale(2.0).exp();
    mu.mul(mu)
        .add(&var)
        .sub(&log_sigma.scale(2.0))
        .add_scalar(-1.0)
        .sum()
        .scale(0.5)
}

/// `Σ_{i≠j} w ln(w/q) + (1−w) ln((1−w)/(1−q))` over Bernoulli means.
pub fn bernoulli_kl_var(means: &Var, q: f64) -> Var {
    let k = means.rows();
    let w = means.clamp(EDGE_MEAN_EPS, 1.0 - EDGE_MEAN_EPS);
    let one_minus = w.rsub_scalar(1.0);
    let kl = w
        .mul(&w.scale(1.0 / q).ln())
        .add(&one_minus.mul(&one_minus.scale(1.0 / (1.0 - q)).ln()));
    kl.masked(off_diagonal_mask(k)).sum()
}

/// Regularisation on the raw edge logits `w` (mapped through sigmoid to
/// Bernoulli means) and the selected latents.
pub fn reg_loss_var(mu: &Var, log_sigma: &Var, edge_logits: &Var, q: f64) -> Var {
    gaussian_kl_var(mu, log_sigma).add(&bernoulli_kl_var(&edge_logits.sigmoid(), q))
}

pub fn reg_loss(sel: &LatentSelection, w: &Mat, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::contract("reg_loss", format!("q = {q} not in (0, 1)")));
    }
    if w.nrows() != w.ncols() || w.nrows() != sel.mu.nrows() {
        return Err(Error::contract("reg_loss", "edge matrix must be K × K"));
    }
    Ok(reg_loss_var(
        &Var::constant(sel.mu.clone()),
        &Var::constant(sel.log_sigma.clone()),
        &Var::constant(w.clone()),
        q,
    )
    .item())
}

/// Column sums of the classifier's hidden layer on an observed graph.
pub fn hidden_sum(g: &Graph, theta: &ModelParams) -> Mat {
    let input = GraphInput::from_graph(g);
    let (hidden, _) = gcn_forward_var(&input.adj_norm, &input.features, &theta.as_constants());
    hidden.sum_rows().value().clone()
}

/// `‖Σ_i û_i − Σ_i u_i‖₂` where the observed side is the constant `target_sum`.
pub fn gen_loss_var(memory: &GraphInput, target_sum: &Mat, theta: &ModelParams) -> Var {
    let (hidden, _) = gcn_forward_var(&memory.adj_norm, &memory.features, &theta.as_constants());
    hidden
        .sum_rows()
        .sub(&Var::constant(target_sum.clone()))
        .norm()
}

pub fn gen_loss(memory: &MemoryGraph, g: &Graph, theta: &ModelParams) -> Result<f64> {
    check_memory_width(memory, theta, "gen_loss")?;
    Ok(gen_loss_var(&memory.input()?, &hidden_sum(g, theta), theta).item())
}

/// Loss components of one outer epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub mgl: f64,
    pub reg: f64,
    pub gen: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Losses before each update, one entry per outer epoch.
    pub epochs: Vec<EpochLosses>,
    /// Losses of the returned memory under the final generator.
    pub final_losses: Option<EpochLosses>,
}

/// Fixed quantities of one generator-training problem.
pub struct GeneratorObjective<'a> {
    input: GraphInput,
    theta: &'a ModelParams,
    target_grads: ParamGrads,
    target_hidden: Mat,
    k: usize,
    cfg: &'a GenConfig,
}

impl<'a> GeneratorObjective<'a> {
    pub fn new(g: &Graph, theta: &'a ModelParams, cfg: &'a GenConfig) -> Result<Self> {
        cfg.validate()?;
        if g.feature_dim() != theta.dims().0 {
            return Err(Error::contract("train_generator", "graph and classifier feature widths differ"));
        }
        Ok(GeneratorObjective {
            input: GraphInput::from_graph(g),
            theta,
            target_grads: target_gradients(g, theta)?,
            target_hidden: hidden_sum(g, theta),
            k: cfg.memory_size(g.num_nodes),
            cfg,
        })
    }

    pub fn memory_size(&self) -> usize {
        self.k
    }

    /// Draws noise, generates a memory and evaluates
    /// `L_MGL + λ1·L_Reg + λ2·L_Gen`. Returns the draw, the objective node
    /// and its components.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        phi: &GeneratorVars,
        rng: &mut R,
        epoch: usize,
    ) -> Result<(GeneratorDraw, Var, EpochLosses)> {
        let draw = generator_draw(&self.input, phi, self.k, self.cfg.tau, rng);
        let memory = draw.input()?;
        let mgl = mgl_loss_var(&memory, &self.target_grads, self.theta).map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::numeric("train_generator", epoch, msg),
            other => other,
        })?;
        let reg = reg_loss_var(
            &draw.selection.mu,
            &draw.selection.log_sigma,
            &draw.edge_logits,
            self.cfg.q_prior,
        );
        let gen = gen_loss_var(&memory, &self.target_hidden, self.theta);
        let total = mgl
            .add(&reg.scale(self.cfg.lambda1))
            .add(&gen.scale(self.cfg.lambda2));
        let losses = EpochLosses {
            epoch,
            mgl: mgl.item(),
            reg: reg.item(),
            gen: gen.item(),
            total: total.item(),
        };
        debug_assert!(!losses.reg.is_finite() || losses.reg >= -1e-9, "negative KL term {}", losses.reg);
        if !losses.total.is_finite() {
            return Err(Error::numeric(
                "train_generator",
                epoch,
                format!("objective is {} (mgl {}, reg {}, gen {})", losses.total, losses.mgl, losses.reg, losses.gen),
            ));
        }
        Ok((draw, total, losses))
    }
}

/// Trains a fresh generator on `g` with the classifier frozen at `theta_t`
/// and returns the memory produced by the final generator.
pub fn train_generator<R: Rng + ?Sized>(
    g: &Graph,
    theta_t: &ModelParams,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<(MemoryGraph, TrainTrace)> {
    let objective = GeneratorObjective::new(g, theta_t, cfg)?;
    let mut phi = GeneratorParams::init(g.feature_dim(), cfg.enc_hidden, cfg.edge_hidden, rng);
    let shapes: Vec<_> = phi.matrices().iter().map(|m| m.dim()).collect();
    let mut opt = Adam::new(&shapes, cfg.lr_gen, 0.0);
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.outer_epochs {
        let vars = phi.as_params();
        let (_, total, losses) = objective.evaluate(&vars, rng, epoch)?;
        let grads = grad(&total, &vars.all());
        if grads.iter().any(|g| g.value().iter().any(|x| !x.is_finite())) {
            return Err(Error::numeric("train_generator", epoch, "generator gradient is not finite"));
        }
        let grad_vals: Vec<&Mat> = grads.iter().map(|g| g.value()).collect();
        opt.step(&mut phi.matrices_mut(), &grad_vals);
        trace.epochs.push(losses);
    }

    let (draw, _, losses) = objective.evaluate(&phi.as_constants(), rng, cfg.outer_epochs)?;
    trace.final_losses = Some(losses);
    let memory = draw.to_memory(&g.domain_id);
    memory.check_invariants()?;
    Ok((memory, trace))
}
