#![allow(dead_code)]

use dcglr_core::backbone::BackboneConfig;
use dcglr_core::geometry::{dist2, Point, PointCloud};
use dcglr_core::rng;
use dcglr_core::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-6;

/// Analytic gradient norm below which an array counts as having zero gradient.
pub const ZERO_GRADIENT: f64 = 1e-8;

/// Allowance for rounding error accumulated while evaluating the objective.
pub const ROUNDOFF_FACTOR: f64 = 16.0;

/// Largest norm that central differences over `count` coordinates can show
/// for a truly zero gradient: each difference carries about `ε·|f|/h` of
/// rounding error when the objective's value is `f`.
pub fn fd_roundoff(value: f64, count: usize) -> f64 {
    ROUNDOFF_FACTOR * f64::EPSILON * value.abs().max(1.0) * (count as f64).sqrt() / FD_STEP
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed))
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

/// Reduces `x` to a scalar with fixed random weights, so every output entry
/// receives a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let w = tape.constant(randn(tape.shape(x), seed));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Largest relative error between the tape gradient and central differences
/// over the listed coordinates of each input (`None`: every coordinate).
pub fn gradient_error(inputs: &[Tensor], coords: Option<&[Vec<usize>]>, f: ScalarFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let all: Vec<usize> = (0..t.numel()).collect();
        let idx = coords.map_or(&all, |c| &c[which]);
        let analytic: Vec<f64> = match grads.get(vars[which]) {
            Some(g) => idx.iter().map(|&i| g.data()[i]).collect(),
            None => vec![0.0; idx.len()],
        };
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += FD_STEP;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= FD_STEP;
                (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Random cloud of `n` points. Coordinates are snapped to a coarse grid a
/// third of the time so that distance ties and duplicate points occur.
pub fn tie_cloud<R: Rng>(n: usize, rng: &mut R) -> PointCloud {
    let snap = rng.random_bool(1.0 / 3.0);
    let points = (0..n)
        .map(|_| {
            let mut p: Point = [0.0; 3];
            for v in &mut p {
                *v = if snap {
                    f64::from(rng.random_range(-2i32..=2)) * 0.5
                } else {
                    rng.random_range(-1.0..1.0)
                };
            }
            p
        })
        .collect();
    PointCloud::new(points, None).unwrap()
}

/// Exhaustive farthest-point sampling: at every step recompute each point's
/// distance to the selected set and take the first maximiser.
pub fn fps_oracle(cloud: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..cloud.len() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected
                .iter()
                .map(|&s| dist2(&cloud.points[i], &cloud.points[s]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        match best {
            Some((_, i)) => selected.push(i),
            None => break,
        }
    }
    selected
}

/// Full sort by (distance, index), first `k`.
pub fn knn_oracle(cloud: &PointCloud, center: &Point, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    idx.sort_by(|&a, &b| {
        dist2(&cloud.points[a], center)
            .total_cmp(&dist2(&cloud.points[b], center))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// The `round(ratio·N)` nearest points to the anchor, in original order.
pub fn crop_oracle(cloud: &PointCloud, ratio: f64, anchor: usize) -> PointCloud {
    let size = (ratio * cloud.len() as f64).round() as usize;
    let mut idx = knn_oracle(cloud, &cloud.points[anchor], size);
    idx.sort_unstable();
    cloud.select(&idx)
}

/// `-Σ p log q` with the same floor as the library.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(a, b)| a * b.max(dcglr_core::autodiff::LOG_EPS).ln())
        .sum::<f64>()
}

/// Small backbone used by the gradient and invariance checks.
pub fn tiny_vit() -> BackboneConfig {
    BackboneConfig {
        k_patch: 8,
        dim: 32,
        depth: 2,
        heads: 4,
        mlp_hidden: 32,
        patch_hidden: 16,
        projector_hidden: 16,
        out_dim: 8,
        centroid_channels: true,
    }
}

/// Backbone with eight heads for attention export checks.
pub fn eight_head_vit() -> BackboneConfig {
    BackboneConfig {
        k_patch: 16,
        dim: 32,
        depth: 2,
        heads: 8,
        mlp_hidden: 32,
        patch_hidden: 16,
        projector_hidden: 16,
        out_dim: 8,
        centroid_channels: true,
    }
}
