//! Label-free adaptation: the information-maximisation loss, its replay
//! extension over stored memory graphs, and the inner adaptation loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::backbone::{
    ema_update, gcn_forward_var, loss_gradient, sgd_step, GraphInput, ModelParams, ParamVars,
    PROB_EPS,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::trainer::MemoryPool;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub inner_epochs: usize,
    pub lr_adapt: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub replay_enabled: bool,
    /// Divide the replay sum by the pool size. Off by default: memories are
    /// summed unweighted.
    pub replay_average: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            inner_epochs: 5,
            lr_adapt: 0.001,
            weight_decay: 5e-4,
            ema_alpha: 0.99,
            replay_enabled: true,
            replay_average: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "AdaptConfig";
        if !(self.lr_adapt >= 0.0 && self.lr_adapt.is_finite()) {
            return Err(Error::contract(op, format!("lr_adapt = {} must be >= 0", self.lr_adapt)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract(op, format!("weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::contract(op, format!("ema_alpha = {} outside [0, 1]", self.ema_alpha)));
        }
        Ok(())
    }
}

/// Mean per-node prediction entropy plus the negative entropy of the
/// mean prediction. Lies in `[-ln C, ln C]`.
pub fn im_loss_var(probs: &Var) -> Var {
    let n = probs.rows() as f64;
    let node_entropy = probs
        .mul(&probs.clamp(PROB_EPS, 1.0).ln())
        .sum()
        .scale(-1.0 / n);
    let marginal = probs.sum_rows().scale(1.0 / n);
    let diversity = marginal.mul(&marginal.clamp(PROB_EPS, 1.0).ln()).sum();
    node_entropy.add(&diversity)
}

pub fn im_loss(probs: &Mat) -> f64 {
    let v = im_loss_var(&Var::constant(probs.clone())).item();
    let bound = (probs.ncols() as f64).ln();
    debug_assert!(!v.is_finite() || v.abs() <= bound + 1e-9, "im_loss {v} outside ±ln C");
    v
}

/// Adaptation loss of one graph under the classifier.
pub fn adaptation_loss_var(input: &GraphInput, params: &ParamVars) -> Var {
    let (_, probs) = gcn_forward_var(&input.adj_norm, &input.features, params);
    im_loss_var(&probs)
}

/// Current-graph loss plus the summed (or averaged) loss on each memory.
pub fn amr_loss_var(
    params: &ParamVars,
    current: &GraphInput,
    memories: &[GraphInput],
    average: bool,
) -> Var {
    let mut total = adaptation_loss_var(current, params);
    if memories.is_empty() {
        return total;
    }
    let mut replay = adaptation_loss_var(&memories[0], params);
    for m in &memories[1..] {
        replay = replay.add(&adaptation_loss_var(m, params));
    }
    if average {
        replay = replay.scale(1.0 / memories.len() as f64);
    }
    total = total.add(&replay);
    total
}

pub fn amr_loss(model: &ModelParams, current: &Graph, pool: &MemoryPool) -> Result<f64> {
    let memories = pool.inputs()?;
    let loss = amr_loss_var(
        &model.as_constants(),
        &GraphInput::from_graph(current),
        &memories,
        false,
    );
    Ok(loss.item())
}

/// Runs `inner_epochs` rounds of gradient step on the replay loss followed
/// by an EMA update. Returns `(live, ema)`.
pub fn adapt_domain(
    params: &ModelParams,
    ema_params: &ModelParams,
    current: &Graph,
    pool: &MemoryPool,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, ModelParams)> {
    cfg.validate()?;
    let current = GraphInput::from_graph(current);
    let memories = if cfg.replay_enabled {
        pool.inputs()?
    } else {
        Vec::new()
    };

    let mut live = params.clone();
    let mut ema = ema_params.clone();
    for epoch in 0..cfg.inner_epochs {
        let (_, grads) = loss_gradient(&live, |p| {
            Ok(amr_loss_var(p, &current, &memories, cfg.replay_average))
        })
        .map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::numeric("adapt_domain", epoch, msg),
            other => other,
        })?;
        live = sgd_step(&live, &grads, cfg.lr_adapt, cfg.weight_decay);
        ema = ema_update(&ema, &live, cfg.ema_alpha)?;
    }
    Ok((live, ema))
}
