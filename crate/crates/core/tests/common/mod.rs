#![allow(dead_code)]

use carmort::data::StratumDataset;
use carmort::graph::{build_graph, CountyGraph};
use carmort::model::ChainState;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Connected graph on `k` nodes: a random spanning tree plus extra edges.
pub fn random_graph(k: usize, seed: u64) -> CountyGraph {
    let mut r = rng(seed);
    let ids: Vec<String> = (0..k).map(|i| format!("{:05}", i + 1)).collect();
    let mut edges = Vec::new();
    for i in 1..k {
        let j = r.random_range(0..i);
        edges.push((ids[i].clone(), ids[j].clone()));
    }
    let extra = r.random_range(0..=k);
    for _ in 0..extra {
        let a = r.random_range(0..k);
        let b = r.random_range(0..k);
        if a != b {
            edges.push((ids[a].clone(), ids[b].clone()));
        }
    }
    build_graph(&ids, &edges).unwrap()
}

/// Dense `D - rho W`.
pub fn dense_precision(graph: &CountyGraph, rho: f64) -> DMatrix<f64> {
    let k = graph.len();
    let mut q = DMatrix::zeros(k, k);
    for i in 0..k {
        q[(i, i)] = graph.degree(i) as f64;
    }
    for &(i, j) in graph.edges() {
        q[(i, j)] = -rho;
        q[(j, i)] = -rho;
    }
    q
}

/// Small panel with a covariate and moderate counts.
pub fn toy_dataset(graph: &CountyGraph, years: usize, seed: u64) -> StratumDataset {
    let mut r = rng(seed);
    let cells = graph.len() * years;
    let mut design = Vec::with_capacity(cells * 2);
    for _ in 0..cells {
        design.push(1.0);
        design.push(r.random_range(-1.5..1.5));
    }
    let exposure: Vec<u64> = (0..cells).map(|_| r.random_range(100..5000)).collect();
    let deaths = exposure.iter().map(|m| r.random_range(0..=m / 50)).collect();
    StratumDataset::new(
        None,
        graph.ids().to_vec(),
        (2001..2001 + years as i32).collect(),
        deaths,
        exposure,
        design,
        vec!["intercept".into(), "x".into()],
        vec![None, None],
    )
    .unwrap()
}

pub fn random_state(p: usize, k: usize, seed: u64) -> ChainState {
    let mut r = rng(seed);
    ChainState {
        beta: (0..p).map(|j| if j == 0 { -4.0 } else { r.random_range(-0.5..0.5) }).collect(),
        alpha: r.random_range(-0.5..0.5),
        phi: (0..k).map(|_| r.random_range(-0.5..0.5)).collect(),
        delta: (0..k).map(|_| r.random_range(-0.5..0.5)).collect(),
        tau2_phi: r.random_range(0.05..1.0),
        tau2_delta: r.random_range(0.05..1.0),
        rho_int: r.random_range(0.05..0.95),
        rho_slo: r.random_range(0.05..0.95),
    }
}

/// Two-sided one-sample KS statistic against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Critical value of the KS statistic at the 1% level (large-sample).
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// 95% interval of rho given effects `v` known up to an additive level,
/// the level carrying a flat prior (it trades off against the intercept or
/// the mean slope). tau2 is integrated out against its IG(a, b) prior.
/// Midpoint rule on a 4000-point grid.
pub fn rho_interval_given_effects(graph: &CountyGraph, v: &[f64], a: f64, b: f64) -> (f64, f64) {
    let k = graph.len();
    let x = nalgebra::DVector::from_column_slice(v);
    let deg: Vec<f64> = (0..k).map(|i| graph.degree(i) as f64).collect();
    let sum_d: f64 = deg.iter().sum();
    let sum_dv: f64 = deg.iter().zip(v).map(|(d, x)| d * x).sum();
    let n = 4000;
    let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let logp: Vec<f64> = grid
        .iter()
        .map(|&rho| {
            let q = dense_precision(graph, rho);
            let quad = (x.transpose() * &q * &x)[(0, 0)] - (1.0 - rho) * sum_dv * sum_dv / sum_d;
            0.5 * graph.logdet_precision(rho).unwrap() - 0.5 * (1.0 - rho).ln()
                - (a + (k as f64 - 1.0) / 2.0) * (b + quad / 2.0).ln()
        })
        .collect();
    let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let (mut lo, mut hi) = (grid[0], grid[n - 1]);
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let prev = acc;
        acc += wi / total;
        if prev < 0.025 && acc >= 0.025 {
            lo = grid[i];
        }
        if prev < 0.975 && acc >= 0.975 {
            hi = grid[i];
        }
    }
    (lo, hi)
}
