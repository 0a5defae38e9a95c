//! One finite-difference check per differentiable loss. Each returns the
//! worst per-coordinate relative error on a random instance drawn from `seed`.

use gcta_core::adaptation::{adaptation_loss_var, im_loss};
use gcta_core::autodiff::{grad, Mat, Var};
use gcta_core::backbone::{gcn_forward, loss_gradient, supervised_loss, supervised_loss_var, GraphInput};
use gcta_core::graph::{normalized_adjacency, normalized_adjacency_var};
use gcta_core::memory::{
    gen_loss_var, hidden_sum, mgl_loss_var, reg_loss_var, target_gradients, GeneratorObjective,
    GeneratorParams,
};
use gcta_core::GenConfig;
use ndarray::Array2;
use rand::Rng;

use super::*;

pub const STEP: f64 = 1e-5;
/// Below this magnitude on both sides a coordinate is compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const GENERATOR_FLOOR: f64 = 1e-8;

pub fn im_loss_wrt_weights(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h, c) = small_dims(&mut r);
    let g = random_graph(&mut r, n, d, c, 0.4);
    let theta = random_params(&mut r, d, h, c, 0.8);
    let input = GraphInput::from_graph(&g);
    let (_, grads) = loss_gradient(&theta, |p| Ok(adaptation_loss_var(&input, p))).unwrap();
    let adj = normalized_adjacency(&g);
    let numeric = central_differences(&[theta.w1.clone(), theta.w2.clone()], STEP, |m| {
        let p = ModelParams { w1: m[0].clone(), w2: m[1].clone() };
        im_loss(&gcn_forward(&adj, &g.features, &p).unwrap().probs)
    });
    max_relative_error(&[grads.w1, grads.w2], &numeric, FLOOR)
}

pub fn supervised_loss_wrt_weights(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h, c) = small_dims(&mut r);
    let g = random_graph(&mut r, n, d, c, 0.4);
    let theta = random_params(&mut r, d, h, c, 0.8);
    let labels = g.labels.clone().unwrap();
    let mut mask: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.6).collect();
    mask[0] = true;
    let input = GraphInput::from_graph(&g);
    let (_, grads) = loss_gradient(&theta, |p| {
        let (_, probs) = gcn_forward_var(&input, p);
        supervised_loss_var(&probs, &labels, &mask)
    })
    .unwrap();
    let adj = normalized_adjacency(&g);
    let numeric = central_differences(&[theta.w1.clone(), theta.w2.clone()], STEP, |m| {
        let p = ModelParams { w1: m[0].clone(), w2: m[1].clone() };
        supervised_loss(&gcn_forward(&adj, &g.features, &p).unwrap().probs, &labels, &mask).unwrap()
    });
    max_relative_error(&[grads.w1, grads.w2], &numeric, FLOOR)
}

fn gcn_forward_var(input: &GraphInput, p: &gcta_core::backbone::ParamVars) -> (Var, Var) {
    gcta_core::backbone::gcn_forward_var(&input.adj_norm, &input.features, p)
}

/// A memory graph with weights in (0.05, 0.95), zero diagonal, and latent
/// features, as seen by the classifier.
fn random_memory(r: &mut impl Rng, k: usize, d: usize) -> (Mat, Mat) {
    let mut w = Array2::zeros((k, k));
    for i in 0..k {
        for j in (i + 1)..k {
            let x = r.random_range(0.05..0.95);
            w[[i, j]] = x;
            w[[j, i]] = x;
        }
    }
    (w, normal_matrix(r, k, d, 1.0))
}

/// Memories keep a zero diagonal, so those weight coordinates are not compared.
fn off_diagonal(mut grads: Vec<Mat>) -> Vec<Mat> {
    for i in 0..grads[0].nrows() {
        grads[0][[i, i]] = 0.0;
    }
    grads
}

fn memory_input(w: &Var, z: &Var) -> GraphInput {
    GraphInput {
        adj_norm: normalized_adjacency_var(w).unwrap(),
        features: z.clone(),
    }
}

pub fn mgl_loss_wrt_memory(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h, c) = small_dims(&mut r);
    let g = random_graph(&mut r, n, d, c, 0.4);
    let theta = random_params(&mut r, d, h, c, 0.8);
    let k = r.random_range(2..=n.min(6));
    let (w, z) = random_memory(&mut r, k, d);
    let target = target_gradients(&g, &theta).unwrap();
    let (wv, zv) = (Var::param(w.clone()), Var::param(z.clone()));
    let loss = mgl_loss_var(&memory_input(&wv, &zv), &target, &theta).unwrap();
    let analytic = off_diagonal(grad(&loss, &[&wv, &zv]).iter().map(|g| g.value().clone()).collect());
    let numeric = central_differences_except(&[w, z], STEP, |m, r, c| m == 0 && r == c, |m| {
        let input = memory_input(&Var::constant(m[0].clone()), &Var::constant(m[1].clone()));
        mgl_loss_var(&input, &target, &theta).unwrap().item()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

pub fn reg_loss_wrt_posterior(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = r.random_range(1..=12);
    let d = r.random_range(1..=5);
    let q = r.random_range(0.02..0.5);
    let mu = normal_matrix(&mut r, k, d, 1.0);
    let ls = normal_matrix(&mut r, k, d, 0.5);
    let mut w = normal_matrix(&mut r, k, k, 1.5);
    w = (&w + &w.t()) / 2.0;
    let vars = [Var::param(mu.clone()), Var::param(ls.clone()), Var::param(w.clone())];
    let loss = reg_loss_var(&vars[0], &vars[1], &vars[2], q);
    let analytic: Vec<Mat> = grad(&loss, &[&vars[0], &vars[1], &vars[2]])
        .iter()
        .map(|g| g.value().clone())
        .collect();
    let numeric = central_differences(&[mu, ls, w], STEP, |m| {
        reg_loss_var(
            &Var::constant(m[0].clone()),
            &Var::constant(m[1].clone()),
            &Var::constant(m[2].clone()),
            q,
        )
        .item()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

pub fn gen_loss_wrt_memory(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h, c) = small_dims(&mut r);
    let g = random_graph(&mut r, n, d, c, 0.4);
    let theta = random_params(&mut r, d, h, c, 0.8);
    let k = r.random_range(2..=n.min(6));
    let (w, z) = random_memory(&mut r, k, d);
    let target = hidden_sum(&g, &theta);
    let (wv, zv) = (Var::param(w.clone()), Var::param(z.clone()));
    let loss = gen_loss_var(&memory_input(&wv, &zv), &target, &theta);
    let analytic = off_diagonal(grad(&loss, &[&wv, &zv]).iter().map(|g| g.value().clone()).collect());
    let numeric = central_differences_except(&[w, z], STEP, |m, r, c| m == 0 && r == c, |m| {
        let input = memory_input(&Var::constant(m[0].clone()), &Var::constant(m[1].clone()));
        gen_loss_var(&input, &target, &theta).item()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

fn generator_from(m: &[Mat]) -> GeneratorParams {
    GeneratorParams {
        enc_w1: m[0].clone(),
        enc_w2: m[1].clone(),
        proj: m[2].clone(),
        edge_w1: m[3].clone(),
        edge_w2: m[4].clone(),
    }
}

/// The full outer objective with respect to every generator weight. The
/// same noise is replayed for each evaluation by reseeding.
pub fn generator_objective_wrt_generator(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, h, c) = small_dims(&mut r);
    let n = n.max(6);
    let g = random_graph(&mut r, n, d, c, 0.4);
    let theta = random_params(&mut r, d, h, c, 0.8);
    let cfg = GenConfig {
        k_ratio: 0.5,
        enc_hidden: r.random_range(2..=6),
        edge_hidden: r.random_range(2..=6),
        ..GenConfig::default()
    };
    let phi = GeneratorParams::init(d, cfg.enc_hidden, cfg.edge_hidden, &mut r);
    let noise_seed = seed.wrapping_mul(31).wrapping_add(7);
    let objective = GeneratorObjective::new(&g, &theta, &cfg).unwrap();
    let vars = phi.as_params();
    let (_, total, _) = objective.evaluate(&vars, &mut rng(noise_seed), 0).unwrap();
    let analytic: Vec<Mat> = grad(&total, &vars.all()).iter().map(|g| g.value().clone()).collect();
    let point: Vec<Mat> = phi.matrices().iter().map(|m| (*m).clone()).collect();
    let numeric = central_differences(&point, STEP, |m| {
        let p = generator_from(m);
        let (_, total, _) = objective
            .evaluate(&p.as_constants(), &mut rng(noise_seed), 0)
            .unwrap();
        total.item()
    });
    max_relative_error(&analytic, &numeric, GENERATOR_FLOOR)
}
