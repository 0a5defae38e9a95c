//! Supervised pretraining and the per-domain continual loop: adapt with
//! replay (inner level), train a fresh generator at the adapted weights
//! (outer level), append its memory, then score every domain seen so far.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_domain, AdaptConfig};
use crate::autodiff::Var;
use crate::backbone::{gcn_forward, gcn_forward_var, loss_gradient, supervised_loss_var, GraphInput, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, Graph, GraphSequence};
use crate::memory::{train_generator, GenConfig, MemoryGraph, TrainTrace};
use crate::metrics::{domain_score, Metric, PerformanceMatrix};
use crate::optim::Adam;

/// Memories of completed domains, in arrival order. Append-only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryPool {
    memories: Vec<MemoryGraph>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, memory: MemoryGraph) -> Result<()> {
        if self.memories.iter().any(|m| m.domain_id == memory.domain_id) {
            return Err(Error::contract(
                "MemoryPool::push",
                format!("domain {:?} already has a memory", memory.domain_id),
            ));
        }
        self.memories.push(memory);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn memories(&self) -> &[MemoryGraph] {
        &self.memories
    }

    pub fn inputs(&self) -> Result<Vec<GraphInput>> {
        self.memories.iter().map(MemoryGraph::input).collect()
    }
}

impl FromIterator<MemoryGraph> for MemoryPool {
    fn from_iter<I: IntoIterator<Item = MemoryGraph>>(iter: I) -> Self {
        MemoryPool {
            memories: iter.into_iter().collect(),
        }
    }
}

/// Snapshot after one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub domain_id: String,
    pub live: ModelParams,
    pub ema: ModelParams,
    pub generator_trace: Option<TrainTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub live_params: ModelParams,
    pub ema_params: ModelParams,
    pub pool: MemoryPool,
    /// Scores of the EMA parameters.
    pub matrix: PerformanceMatrix,
    /// Scores of the live parameters.
    pub live_matrix: PerformanceMatrix,
    pub step: usize,
    pub rng_seed: u64,
    pub history: Vec<StepRecord>,
}

/// Everything `run_continual` needs besides the data and initial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ContinualConfig {
    pub adapt: AdaptConfig,
    pub gen: GenConfig,
    pub metric: Metric,
    /// No adaptation and no generator: the unadapted lower bound.
    pub test_only: bool,
}

fn split_masks(labels: &[i64], rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<bool>) {
    let mut labelled: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] >= 0).collect();
    labelled.shuffle(rng);
    let n = labelled.len();
    let n_train = ((0.6 * n as f64).round() as usize).max(1).min(n);
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let mut train = vec![false; labels.len()];
    let mut val = vec![false; labels.len()];
    for &v in &labelled[..n_train] {
        train[v] = true;
    }
    for &v in &labelled[n_train..n_train + n_val] {
        val[v] = true;
    }
    (train, val)
}

fn masked_accuracy(probs: &ndarray::Array2<f64>, labels: &[i64], mask: &[bool]) -> (usize, usize) {
    let masked: Vec<i64> = labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| if m { y } else { -1 })
        .collect();
    let count = masked.iter().filter(|&&y| y >= 0).count();
    if count == 0 {
        return (0, 0);
    }
    let acc = domain_score(probs, &masked, Metric::Accuracy).unwrap_or(0.0);
    ((acc * count as f64).round() as usize, count)
}

/// Full-batch Adam on the mean supervised loss over the source graphs'
/// training nodes (a seeded 60/20/20 split of the labelled nodes). Returns
/// the weights with the best validation accuracy seen, starting from the
/// initialisation.
pub fn pretrain(
    source: &GraphSequence,
    hidden_dim: usize,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<ModelParams> {
    let op = "pretrain";
    if source.is_empty() {
        return Err(Error::contract(op, "no source graphs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(source.feature_dim, hidden_dim, source.num_classes, &mut rng);

    struct Prepared {
        input: GraphInput,
        labels: Vec<i64>,
        train: Vec<bool>,
        val: Vec<bool>,
    }
    let mut prepared = Vec::with_capacity(source.len());
    for g in &source.domains {
        let labels = g.labels_or_unlabeled();
        if !labels.iter().any(|&y| y >= 0) {
            return Err(Error::contract(op, format!("source domain {} has no labelled nodes", g.domain_id)));
        }
        let (train, val) = split_masks(&labels, &mut rng);
        prepared.push(Prepared {
            input: GraphInput::from_graph(g),
            labels,
            train,
            val,
        });
    }
    let have_val = prepared.iter().any(|p| p.val.iter().any(|&m| m));

    let evaluate = |params: &ModelParams| -> f64 {
        let (mut hits, mut total) = (0, 0);
        for p in &prepared {
            let (_, probs) = gcn_forward_var(&p.input.adj_norm, &p.input.features, &params.as_constants());
            let mask = if have_val { &p.val } else { &p.train };
            let (h, t) = masked_accuracy(probs.value(), &p.labels, mask);
            hits += h;
            total += t;
        }
        hits as f64 / total.max(1) as f64
    };

    let mut best = params.clone();
    let mut best_acc = evaluate(&params);
    let mut opt = Adam::new(&[params.w1.dim(), params.w2.dim()], lr, weight_decay);
    for epoch in 0..epochs {
        let (_, grads) = loss_gradient(&params, |vars| {
            let mut total: Option<Var> = None;
            for p in &prepared {
                let (_, probs) = gcn_forward_var(&p.input.adj_norm, &p.input.features, vars);
                let l = supervised_loss_var(&probs, &p.labels, &p.train)?;
                total = Some(match total {
                    Some(t) => t.add(&l),
                    None => l,
                });
            }
            Ok(total.unwrap().scale(1.0 / prepared.len() as f64))
        })
        .map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::numeric(op, epoch, msg),
            other => other,
        })?;
        opt.step(&mut [&mut params.w1, &mut params.w2], &[&grads.w1, &grads.w2]);
        let acc = evaluate(&params);
        if acc > best_acc {
            best_acc = acc;
            best = params.clone();
        }
    }
    log::info!("pretrain: best validation accuracy {best_acc:.4}");
    Ok(best)
}

/// Score `params` on every domain in `domains`.
fn score_row(params: &ModelParams, domains: &[Graph], metric: Metric) -> Result<Vec<f64>> {
    domains
        .iter()
        .map(|g| {
            let out = gcn_forward(&normalized_adjacency(g), &g.features, params)?;
            domain_score(&out.probs, &g.labels_or_unlabeled(), metric)
        })
        .collect()
}

/// Seed of the generator RNG for domain `t`.
fn domain_rng(run_seed: u64, gen_seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ gen_seed.rotate_left(32));
    rng.set_stream(t as u64);
    rng
}

/// The continual protocol over `targets`. Labels are stripped before
/// adaptation and generator training and used only for scoring.
pub fn run_continual(
    theta0: &ModelParams,
    targets: &GraphSequence,
    cfg: &ContinualConfig,
    seed: u64,
) -> Result<RunState> {
    let op = "run_continual";
    let (d, _, c) = theta0.dims();
    if targets.feature_dim != d || targets.num_classes != c {
        return Err(Error::contract(
            op,
            format!(
                "targets have d = {}, C = {}; classifier has d = {d}, C = {c}",
                targets.feature_dim, targets.num_classes
            ),
        ));
    }
    if let Some(g) = targets.domains.iter().find(|g| g.feature_dim() != d) {
        return Err(Error::contract(op, format!("domain {} has feature width {}", g.domain_id, g.feature_dim())));
    }
    cfg.adapt.validate()?;
    cfg.gen.validate()?;

    let adapt_cfg = if cfg.test_only {
        AdaptConfig {
            inner_epochs: 0,
            ..cfg.adapt.clone()
        }
    } else {
        cfg.adapt.clone()
    };

    let mut state = RunState {
        live_params: theta0.clone(),
        ema_params: theta0.clone(),
        pool: MemoryPool::new(),
        matrix: PerformanceMatrix::new(cfg.metric),
        live_matrix: PerformanceMatrix::new(cfg.metric),
        step: 0,
        rng_seed: seed,
        history: Vec::new(),
    };

    for (t, domain) in targets.domains.iter().enumerate() {
        let unlabeled = domain.without_labels();
        let (live, ema) = adapt_domain(
            &state.live_params,
            &state.ema_params,
            &unlabeled,
            &state.pool,
            &adapt_cfg,
        )?;

        let trace = if cfg.test_only {
            None
        } else {
            let mut rng = domain_rng(seed, cfg.gen.seed, t);
            let (memory, trace) = train_generator(&unlabeled, &live, &cfg.gen, &mut rng)?;
            state.pool.push(memory)?;
            Some(trace)
        };

        let seen = &targets.domains[..=t];
        state.matrix.push_row(score_row(&ema, seen, cfg.metric)?)?;
        state.live_matrix.push_row(score_row(&live, seen, cfg.metric)?)?;
        log::info!(
            "{op}: step {} ({}): score {:.4}",
            t + 1,
            domain.domain_id,
            state.matrix.get(t, t).unwrap_or(f64::NAN)
        );

        state.history.push(StepRecord {
            domain_id: domain.domain_id.clone(),
            live: live.clone(),
            ema: ema.clone(),
            generator_trace: trace,
        });
        state.live_params = live;
        state.ema_params = ema;
        state.step = t + 1;
    }
    Ok(state)
}
