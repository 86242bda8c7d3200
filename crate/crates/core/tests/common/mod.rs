//! Test-side oracles shared by the integration suites. Nothing here calls the
//! solvers under test.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use otrlab_core::dataset::TransitionBatch;
use otrlab_core::iql::{self, IqlConfig, IqlNets};
use otrlab_core::nn::MlpParams;
use otrlab_core::ot::Standardizer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Uniform-marginal OT by successive shortest paths on the integer-scaled
/// transportation network (row supply `m`, column demand `n`). Returns the
/// optimal cost and a plan with entries `flow / (n m)`.
pub fn min_cost_flow_ot(cost: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, m) = cost.dim();
    // nodes: 0 source, 1..=n rows, n+1..=n+m cols, n+m+1 sink
    let nodes = n + m + 2;
    let (src, sink) = (0, n + m + 1);
    struct Edge {
        to: usize,
        cap: i64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: i64, c: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost: c });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0, cost: -c });
    };
    for i in 0..n {
        add(&mut edges, &mut adj, src, 1 + i, m as i64, 0.0);
    }
    for j in 0..m {
        add(&mut edges, &mut adj, 1 + n + j, sink, n as i64, 0.0);
    }
    let mut cell_edge = vec![vec![0; m]; n];
    for i in 0..n {
        for j in 0..m {
            cell_edge[i][j] = edges.len();
            add(&mut edges, &mut adj, 1 + i, 1 + n + j, i64::MAX / 4, cost[[i, j]]);
        }
    }
    let total = (n * m) as i64;
    let mut sent = 0;
    while sent < total {
        // Bellman-Ford, residual costs can be negative.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        dist[src] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    if ed.cap > 0 && dist[u] + ed.cost < dist[ed.to] - 1e-12 {
                        dist[ed.to] = dist[u] + ed.cost;
                        prev[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "oracle: sink unreachable");
        let mut push = total - sent;
        let mut v = sink;
        while v != src {
            let e = prev[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != src {
            let e = prev[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        sent += push;
    }
    let scale = (n * m) as f64;
    let plan = Array2::from_shape_fn((n, m), |(i, j)| edges[cell_edge[i][j] ^ 1].cap as f64 / scale);
    let c = (cost * &plan).sum();
    (c, plan)
}

/// Square uniform OT by enumerating permutations (optimal plans include a
/// scaled permutation matrix). Only for tiny `n`.
pub fn permutation_ot(cost: &Array2<f64>) -> f64 {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        best = best.min(c / n as f64);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |_| rng.random::<f64>())
}

pub fn random_states(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
/// Cases with a pre-activation this close to a ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// Central differences of `f` over a flat parameter vector.
pub fn numeric_gradient(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + FD_STEP;
            let up = f(&x);
            x[k] = orig - FD_STEP;
            let down = f(&x);
            x[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn near_kink(net: &MlpParams, input: &Array2<f64>) -> bool {
    let (_, cache) = net.forward_cached(input.view()).unwrap();
    let pre = cache.pre_activations();
    pre[..pre.len() - 1].iter().any(|z| z.iter().any(|v| v.abs() < KINK_MARGIN))
}

/// Adds Gaussian noise to every parameter so biases are nonzero too.
pub fn jitter(net: &mut MlpParams, rng: &mut ChaCha8Rng, scale: f64) {
    let mut flat = net.to_flat();
    for x in &mut flat {
        *x += scale * rng.sample::<f64, _>(StandardNormal);
    }
    net.set_flat(&flat).unwrap();
}

/// Outcome of a gradient-check campaign.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub cases: usize,
    pub redrawn: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn passed(&self, cases: usize) -> bool {
        self.cases >= cases && self.worst < GRAD_TOL
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        self.worst = self.worst.max(err);
    }
}

/// `L = sum(G * f(X))` for random width-8 MLPs; checks parameter and input gradients.
pub fn check_mlp_gradients(rng: &mut ChaCha8Rng, cases: usize) -> GradReport {
    let mut rep = GradReport::default();
    while rep.cases < cases {
        let in_dim = rng.random_range(1..6);
        let out_dim = rng.random_range(1..4);
        let mut net = MlpParams::init(rng.random(), in_dim, out_dim, &[8, 8]).unwrap();
        jitter(&mut net, rng, 0.1);
        let batch = rng.random_range(1..5);
        let x = Array2::from_shape_fn((batch, in_dim), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Array2::from_shape_fn((batch, out_dim), |_| rng.sample::<f64, _>(StandardNormal));
        if near_kink(&net, &x) {
            rep.redrawn += 1;
            continue;
        }
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (grads, input_grad) = net.backward_batch(&cache, g.view()).unwrap();
        let loss = |n: &MlpParams, x: &Array2<f64>| (&n.forward_batch(x.view()).unwrap() * &g).sum();
        let numeric = numeric_gradient(&net.to_flat(), |p| {
            let mut n = net.clone();
            n.set_flat(p).unwrap();
            loss(&n, &x)
        });
        let mut err = relative_error(&flatten_like(&net, &grads), &numeric);
        let flat_x: Vec<f64> = x.iter().copied().collect();
        let numeric_x = numeric_gradient(&flat_x, |p| {
            let xp = Array2::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
            loss(&net, &xp)
        });
        err = err.max(relative_error(&input_grad.iter().copied().collect::<Vec<_>>(), &numeric_x));
        rep.record(err);
    }
    rep
}

/// Gradients in the same order as `MlpParams::to_flat`.
pub fn flatten_like(net: &MlpParams, g: &otrlab_core::nn::Gradients) -> Vec<f64> {
    let mut shadow = net.clone();
    shadow.layer_weights = g.layer_weights.clone();
    shadow.layer_biases = g.layer_biases.clone();
    shadow.to_flat()
}

pub fn small_iql_nets(rng: &mut ChaCha8Rng, state_dim: usize, action_dim: usize) -> IqlNets {
    let cfg = IqlConfig {
        hidden_sizes: vec![8, 8],
        seed: rng.random(),
        ..IqlConfig::default()
    };
    let mut nets = IqlNets::new(&cfg, state_dim, action_dim, Standardizer::identity(state_dim)).unwrap();
    for net in [
        &mut nets.q1,
        &mut nets.q2,
        &mut nets.q1_target,
        &mut nets.q2_target,
        &mut nets.value,
        &mut nets.policy,
    ] {
        jitter(net, rng, 0.1);
    }
    nets
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, state_dim: usize, action_dim: usize, bound: f64) -> TransitionBatch {
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    TransitionBatch {
        states: Array2::from_shape_fn((n, state_dim), |_| normal(rng)),
        actions: Array2::from_shape_fn((n, action_dim), |_| rng.random_range(-bound..bound)),
        next_states: Array2::from_shape_fn((n, state_dim), |_| normal(rng)),
        rewards: Array1::from_shape_fn(n, |_| rng.random_range(0.0..5.0)),
        dones: (0..n).map(|_| rng.random_bool(0.2)).collect(),
    }
}

fn critic_input(nets: &IqlNets, b: &TransitionBatch) -> Array2<f64> {
    let s = nets.normalize_states(b.states.view());
    let a = nets.normalize_actions(b.actions.view());
    ndarray::concatenate![ndarray::Axis(1), s, a]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IqlLoss {
    Value,
    Critic,
    Policy,
}

/// Finite-difference checks of one IQL loss on random width-8 networks.
pub fn check_iql_gradients(rng: &mut ChaCha8Rng, which: IqlLoss, cases: usize) -> GradReport {
    let (sd, ad) = (3, 2);
    let (expectile, gamma, temperature) = (0.7, 0.99, 3.0);
    let mut rep = GradReport::default();
    while rep.cases < cases {
        let nets = small_iql_nets(rng, sd, ad);
        let size = rng.random_range(2..7);
        let batch = random_batch(rng, size, sd, ad, nets.action_bound);
        let s = nets.normalize_states(batch.states.view());
        let s2 = nets.normalize_states(batch.next_states.view());
        let sa = critic_input(&nets, &batch);
        let kink = near_kink(&nets.value, &s)
            || near_kink(&nets.value, &s2)
            || near_kink(&nets.q1, &sa)
            || near_kink(&nets.q2, &sa)
            || near_kink(&nets.q1_target, &sa)
            || near_kink(&nets.q2_target, &sa)
            || near_kink(&nets.policy, &s);
        if kink {
            rep.redrawn += 1;
            continue;
        }
        let err = match which {
            IqlLoss::Value => {
                let a = iql::value_loss(&nets, &batch, expectile).unwrap();
                let numeric = numeric_gradient(&nets.value.to_flat(), |p| {
                    let mut n = nets.clone();
                    n.value.set_flat(p).unwrap();
                    iql::value_loss(&n, &batch, expectile).unwrap().loss
                });
                relative_error(&flatten_like(&nets.value, &a.grads), &numeric)
            }
            IqlLoss::Critic => {
                let a = iql::critic_loss(&nets, &batch, gamma).unwrap();
                let n1 = numeric_gradient(&nets.q1.to_flat(), |p| {
                    let mut n = nets.clone();
                    n.q1.set_flat(p).unwrap();
                    iql::critic_loss(&n, &batch, gamma).unwrap().loss
                });
                let n2 = numeric_gradient(&nets.q2.to_flat(), |p| {
                    let mut n = nets.clone();
                    n.q2.set_flat(p).unwrap();
                    iql::critic_loss(&n, &batch, gamma).unwrap().loss
                });
                relative_error(&flatten_like(&nets.q1, &a.q1), &n1)
                    .max(relative_error(&flatten_like(&nets.q2, &a.q2), &n2))
            }
            IqlLoss::Policy => {
                let a = iql::policy_loss(&nets, &batch, temperature).unwrap();
                let numeric = numeric_gradient(&nets.policy.to_flat(), |p| {
                    let mut n = nets.clone();
                    n.policy.set_flat(p).unwrap();
                    iql::policy_loss(&n, &batch, temperature).unwrap().loss
                });
                relative_error(&flatten_like(&nets.policy, &a.grads), &numeric)
            }
        };
        rep.record(err);
    }
    rep
}
