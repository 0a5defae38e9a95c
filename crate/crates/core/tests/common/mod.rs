//! Fixtures and finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

use gcta_core::autodiff::Mat;
use gcta_core::{Graph, ModelParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller keeps the fixtures independent of the crate's samplers.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| scale * normal(rng))
}

/// Erdos-Renyi graph with standard-normal features and uniform labels.
pub fn random_graph(rng: &mut impl Rng, n: usize, d: usize, c: usize, p: f64) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let features = normal_matrix(rng, n, d, 1.0);
    let labels = (0..n).map(|_| rng.random_range(0..c) as i64).collect();
    Graph::new(n, edges, features, Some(labels), "g")
}

pub fn random_params(rng: &mut impl Rng, d: usize, h: usize, c: usize, scale: f64) -> ModelParams {
    ModelParams {
        w1: normal_matrix(rng, d, h, scale),
        w2: normal_matrix(rng, h, c, scale),
    }
}

/// Random instance dimensions within N <= 12, d <= 5, h' <= 8, C <= 3.
pub fn small_dims(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(3..=12),
        rng.random_range(1..=5),
        rng.random_range(1..=8),
        rng.random_range(2..=3),
    )
}

/// Central differences of `f` with respect to every entry of `point`.
pub fn central_differences(point: &[Mat], step: f64, f: impl Fn(&[Mat]) -> f64) -> Vec<Mat> {
    central_differences_except(point, step, |_, _, _| false, f)
}

/// As [`central_differences`], leaving coordinates where `skip(matrix, row,
/// col)` holds at zero.
pub fn central_differences_except(
    point: &[Mat],
    step: f64,
    skip: impl Fn(usize, usize, usize) -> bool,
    f: impl Fn(&[Mat]) -> f64,
) -> Vec<Mat> {
    let mut work: Vec<Mat> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for m in 0..point.len() {
        let mut g = Array2::zeros(point[m].dim());
        for idx in 0..point[m].len() {
            let (r, c) = (idx / point[m].ncols(), idx % point[m].ncols());
            if skip(m, r, c) {
                continue;
            }
            let x = point[m][[r, c]];
            work[m][[r, c]] = x + step;
            let up = f(&work);
            work[m][[r, c]] = x - step;
            let down = f(&work);
            work[m][[r, c]] = x;
            g[[r, c]] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Largest per-coordinate relative error. Coordinates where both sides are
/// below `floor` in magnitude are compared absolutely against `floor`
/// instead, and count as error 0 when within it.
pub fn max_relative_error(analytic: &[Mat], numeric: &[Mat], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.dim(), n.dim());
        for (&x, &y) in a.iter().zip(n.iter()) {
            let scale = x.abs().max(y.abs());
            let err = if scale < floor {
                if (x - y).abs() <= floor {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (x - y).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn column_cosine_distance(a: &Mat, b: &Mat) -> f64 {
    let mut total = 0.0;
    for j in 0..a.ncols() {
        let (ca, cb) = (a.column(j), b.column(j));
        let (na, nb) = (ca.dot(&ca).sqrt(), cb.dot(&cb).sqrt());
        total += match (na < 1e-12, nb < 1e-12) {
            (true, true) => 0.0,
            (true, false) | (false, true) => 1.0,
            _ => 1.0 - ca.dot(&cb) / (na * nb),
        };
    }
    total
}

/// Dense row softmax of `Â relu(Â X W1) W2` written out with loops.
pub fn reference_forward(adj_norm: &Mat, x: &Mat, p: &ModelParams) -> (Mat, Mat) {
    let n = x.nrows();
    let h = adj_norm.dot(&x.dot(&p.w1)).mapv(|v| v.max(0.0));
    let logits = adj_norm.dot(&h.dot(&p.w2));
    let mut probs = logits.clone();
    for i in 0..n {
        let m = logits.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = logits.row(i).iter().map(|v| (v - m).exp()).sum();
        for k in 0..logits.ncols() {
            probs[[i, k]] = (logits[[i, k]] - m).exp() / z;
        }
    }
    (h, probs)
}

/// `im_loss` written directly from its definition.
pub fn reference_im_loss(probs: &Mat) -> f64 {
    let n = probs.nrows() as f64;
    let plogp = |p: f64| if p > 0.0 { p * p.max(1e-12).ln() } else { 0.0 };
    let node: f64 = -probs.iter().map(|&p| plogp(p)).sum::<f64>() / n;
    let marginal: f64 = (0..probs.ncols())
        .map(|k| plogp(probs.column(k).sum() / n))
        .sum();
    node + marginal
}
pub mod gradcheck;
