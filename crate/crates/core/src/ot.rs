//! Discrete optimal transport between uniform empirical distributions.
//!
//! Two solvers share the same cost/plan types:
//!
//! - [`sinkhorn`]: stabilized Sinkhorn iterations for the entropy-regularized
//!   problem. The returned plan is projected onto the transport polytope so its
//!   marginals hold to rounding error.
//! - [`exact_ot`]: transportation simplex on integer-scaled uniform marginals,
//!   used as the reference for small instances.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `rows * cols` accepted by [`exact_ot`].
pub const EXACT_MAX_CELLS: usize = 10_000;

/// Smallest per-dimension scale a [`Standardizer`] will divide by.
pub const MIN_FEATURE_SCALE: f64 = 1e-6;

/// Exponent offsets below this are dropped from log-sum-exp sums
/// (`exp(-50)` is far under double precision relative to the leading term).
const LSE_CUTOFF: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    #[default]
    SquaredEuclidean,
    Euclidean,
    Cosine,
}

impl CostMetric {
    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            CostMetric::SquaredEuclidean => sq_dist(x, y),
            CostMetric::Euclidean => sq_dist(x, y).sqrt(),
            CostMetric::Cosine => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                let ny = y.iter().map(|b| b * b).sum::<f64>().sqrt();
                if nx == 0.0 || ny == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (nx * ny)).max(0.0)
                }
            }
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Uniform Dirac mixture over a list of states.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    support: Vec<Vec<f64>>,
}

impl EmpiricalDistribution {
    pub fn new(support: Vec<Vec<f64>>) -> Result<Self> {
        let dim = support
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Dimension("empirical distribution needs at least one state".into()))?;
        if support.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("support states have differing dimensions".into()));
        }
        if support.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("support contains non-finite values".into()));
        }
        Ok(Self { support })
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn masses(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits mean and population standard deviation over `states`.
    /// Scales below [`MIN_FEATURE_SCALE`] are raised to it.
    pub fn fit<'a, I>(states: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for s in states {
            if count == 0 {
                mean = vec![0.0; s.len()];
                m2 = vec![0.0; s.len()];
            } else if s.len() != mean.len() {
                return Err(Error::Dimension("states have differing dimensions".into()));
            }
            count += 1;
            // Welford update
            for (k, &x) in s.iter().enumerate() {
                let d = x - mean[k];
                mean[k] += d / count as f64;
                m2[k] += d * (x - mean[k]);
            }
        }
        if count == 0 {
            return Err(Error::Dimension("cannot standardize an empty state set".into()));
        }
        let scale = m2
            .iter()
            .map(|&v| (v / count as f64).sqrt().max(MIN_FEATURE_SCALE))
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Nonnegative `T x T'` cost matrix; rows index the unlabeled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dimension("cost matrix must be nonempty".into()));
        }
        if entries.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::Numerical("cost entries must be finite and nonnegative".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Dimension("ragged cost rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), ncols), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn row_count(&self) -> usize {
        self.entries.nrows()
    }

    pub fn col_count(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[[row, col]]
    }

    pub fn transposed(&self) -> Self {
        Self {
            entries: self.entries.t().to_owned(),
        }
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.entries.mapv(|c| c * k))
    }
}

pub fn build_cost_matrix(
    unlabeled: &EmpiricalDistribution,
    expert: &EmpiricalDistribution,
    metric: CostMetric,
    standardizer: Option<&Standardizer>,
) -> Result<CostMatrix> {
    if unlabeled.dim() != expert.dim() {
        return Err(Error::Dimension(format!(
            "state dimensions differ: unlabeled {} vs expert {}",
            unlabeled.dim(),
            expert.dim()
        )));
    }
    if let Some(s) = standardizer {
        if s.dim() != expert.dim() {
            return Err(Error::Dimension("standardizer dimension mismatch".into()));
        }
    }
    let prep = |d: &EmpiricalDistribution| -> Vec<Vec<f64>> {
        match standardizer {
            Some(s) => d.support().iter().map(|x| s.apply(x)).collect(),
            None => d.support().to_vec(),
        }
    };
    let xs = prep(unlabeled);
    let ys = prep(expert);
    let entries = Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| metric.eval(&xs[i], &ys[j]));
    CostMatrix::new(entries)
}

/// A coupling together with the marginals it is meant to satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
}

impl TransportPlan {
    /// L1 distance between the coupling's marginals and the targets (rows plus columns).
    pub fn marginal_violation(&self) -> f64 {
        let rows: f64 = self
            .coupling
            .rows()
            .into_iter()
            .zip(&self.row_marginal)
            .map(|(r, p)| (r.sum() - p).abs())
            .sum();
        let cols: f64 = self
            .coupling
            .columns()
            .into_iter()
            .zip(&self.col_marginal)
            .map(|(c, q)| (c.sum() - q).abs())
            .sum();
        rows + cols
    }

    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        (&self.coupling * &cost.entries).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    /// `sum(C * plan)` of the returned (projected) plan.
    pub transport_cost: f64,
    pub converged: bool,
    /// L1 marginal violation of the last iterate, before projection.
    pub marginal_violation: f64,
    pub iterations: usize,
}

fn log_sum_exp_shifted(values: impl Iterator<Item = f64> + Clone, eps: f64) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values
        .map(|v| (v - m) / eps)
        .filter(|&z| z > LSE_CUTOFF)
        .map(f64::exp)
        .sum();
    m + eps * s.ln()
}

/// Scalings outside `[1/ABSORB_LIMIT, ABSORB_LIMIT]` are folded into the potentials.
const ABSORB_LIMIT: f64 = 1e30;

/// Exact log-domain update `f_i = eps * ln(p) - eps * lse_j((g_j - c_ij) / eps)`
/// over the rows of `c`.
fn log_domain_update(c: &Array2<f64>, other: &[f64], log_mass: f64, eps: f64) -> Vec<f64> {
    c.rows()
        .into_iter()
        .map(|ci| {
            let ci = ci.to_slice().expect("standard layout");
            eps * log_mass - log_sum_exp_shifted(other.iter().zip(ci).map(|(o, cij)| o - cij), eps)
        })
        .collect()
}

fn stabilized_kernel(c: &Array2<f64>, f: &[f64], g: &[f64], eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(c.dim(), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp())
}

/// Entropic OT between uniform marginals.
///
/// Iterates in the scaling domain on a kernel `exp((f_i + g_j - c_ij) / eps)`
/// that is re-centred on the current dual potentials whenever the scalings
/// grow large, so small `eps` neither underflows nor pays for an `exp` per
/// entry per iteration.
pub fn sinkhorn(cost: &CostMatrix, config: &SinkhornConfig) -> Result<SinkhornSolution> {
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(Error::Numerical(format!(
            "sinkhorn epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    let eps = config.epsilon;
    let (n, m) = (cost.row_count(), cost.col_count());
    let (p, q) = (1.0 / n as f64, 1.0 / m as f64);
    let c = cost.entries.as_standard_layout().into_owned();
    let ct = cost.entries.t().as_standard_layout().into_owned();

    // One exact log-domain sweep gives potentials whose kernel has no empty row or column.
    let mut f = log_domain_update(&c, &vec![0.0; m], p.ln(), eps);
    let mut g = log_domain_update(&ct, &f, q.ln(), eps);
    let mut kernel = stabilized_kernel(&c, &f, &g, eps);
    let mut u = ndarray::Array1::<f64>::ones(n);
    let mut v = ndarray::Array1::<f64>::ones(m);

    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 1;
    while iterations < config.max_iters {
        iterations += 1;
        let kv = kernel.dot(&v);
        // Row sums of the current iterate are u_i * (K v)_i; columns are exact.
        violation = u.iter().zip(&kv).map(|(ui, kvi)| (ui * kvi - p).abs()).sum();
        if violation < config.tol {
            converged = true;
            break;
        }
        let u_next = kv.mapv(|x| p / x);
        let ktu = kernel.t().dot(&u_next);
        let v_next = ktu.mapv(|x| q / x);
        let bad = |x: &f64| !x.is_finite() || *x <= 0.0;
        if u_next.iter().chain(&v_next).any(bad) {
            // Kernel row or column underflowed: absorb what we have, then take
            // one exact log-domain step.
            absorb(&mut f, &u, eps);
            absorb(&mut g, &v, eps);
            f = log_domain_update(&c, &g, p.ln(), eps);
            g = log_domain_update(&ct, &f, q.ln(), eps);
            if f.iter().chain(&g).any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite sinkhorn potentials at iteration {iterations}"
                )));
            }
            kernel = stabilized_kernel(&c, &f, &g, eps);
            u.fill(1.0);
            v.fill(1.0);
            continue;
        }
        u = u_next;
        v = v_next;
        let out_of_range = |x: &f64| *x > ABSORB_LIMIT || *x < 1.0 / ABSORB_LIMIT;
        if u.iter().chain(&v).any(out_of_range) {
            absorb(&mut f, &u, eps);
            absorb(&mut g, &v, eps);
            kernel = stabilized_kernel(&c, &f, &g, eps);
            u.fill(1.0);
            v.fill(1.0);
        }
    }
    if !converged {
        let kv = kernel.dot(&v);
        violation = u.iter().zip(&kv).map(|(ui, kvi)| (ui * kvi - p).abs()).sum();
        converged = violation < config.tol;
    }

    let coupling = Array2::from_shape_fn((n, m), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    if coupling.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite sinkhorn coupling".into()));
    }
    let plan = round_to_polytope(coupling, vec![p; n], vec![q; m]);
    let transport_cost = plan.cost(cost);
    Ok(SinkhornSolution {
        plan,
        transport_cost,
        converged,
        marginal_violation: violation,
        iterations,
    })
}

fn absorb(potential: &mut [f64], scaling: &ndarray::Array1<f64>, eps: f64) {
    for (x, s) in potential.iter_mut().zip(scaling) {
        *x += eps * s.ln();
    }
}

/// Projects a positive matrix onto the set of couplings with marginals `(p, q)`:
/// scale rows down, scale columns down, then add the rank-one correction for the
/// remaining deficit.
fn round_to_polytope(mut plan: Array2<f64>, p: Vec<f64>, q: Vec<f64>) -> TransportPlan {
    for (mut row, &pi) in plan.rows_mut().into_iter().zip(&p) {
        let s = row.sum();
        if s > pi {
            row.mapv_inplace(|x| x * pi / s);
        }
    }
    for (mut col, &qj) in plan.columns_mut().into_iter().zip(&q) {
        let s = col.sum();
        if s > qj {
            col.mapv_inplace(|x| x * qj / s);
        }
    }
    let err_r: Vec<f64> = plan
        .rows()
        .into_iter()
        .zip(&p)
        .map(|(r, pi)| (pi - r.sum()).max(0.0))
        .collect();
    let err_c: Vec<f64> = plan
        .columns()
        .into_iter()
        .zip(&q)
        .map(|(c, qj)| (qj - c.sum()).max(0.0))
        .collect();
    let total: f64 = err_c.iter().sum();
    if total > 0.0 {
        for ((i, j), x) in plan.indexed_iter_mut() {
            *x += err_r[i] * err_c[j] / total;
        }
    }
    TransportPlan {
        coupling: plan,
        row_marginal: p,
        col_marginal: q,
    }
}

#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub plan: TransportPlan,
    pub transport_cost: f64,
}

/// Optimal plan for uniform marginals via the transportation simplex.
pub fn exact_ot(cost: &CostMatrix) -> Result<ExactSolution> {
    let (n, m) = (cost.row_count(), cost.col_count());
    if n * m > EXACT_MAX_CELLS {
        return Err(Error::Size {
            rows: n,
            cols: m,
            limit: EXACT_MAX_CELLS,
        });
    }
    // Row mass 1/n and column mass 1/m, scaled by n*m to integers.
    let supply = vec![m as i64; n];
    let demand = vec![n as i64; m];
    let flows = transportation_simplex(cost.entries(), &supply, &demand)?;
    let total = (n * m) as f64;
    let mut coupling = Array2::zeros((n, m));
    for ((i, j), x) in flows {
        coupling[[i, j]] = x as f64 / total;
    }
    let plan = TransportPlan {
        coupling,
        row_marginal: vec![1.0 / n as f64; n],
        col_marginal: vec![1.0 / m as f64; m],
    };
    let transport_cost = plan.cost(cost);
    Ok(ExactSolution {
        plan,
        transport_cost,
    })
}

/// Solves `min sum c_ij x_ij` over integer flows with the given row supplies and
/// column demands (equal totals). Returns the basic cells and their flows.
pub fn transportation_simplex(
    cost: ArrayView2<f64>,
    supply: &[i64],
    demand: &[i64],
) -> Result<Vec<((usize, usize), i64)>> {
    let (n, m) = cost.dim();
    if supply.len() != n || demand.len() != m || n == 0 || m == 0 {
        return Err(Error::Dimension("supply/demand lengths must match cost shape".into()));
    }
    if supply.iter().chain(demand).any(|&x| x < 0) {
        return Err(Error::Numerical("supplies and demands must be nonnegative".into()));
    }
    if supply.iter().sum::<i64>() != demand.iter().sum::<i64>() {
        return Err(Error::Numerical("total supply must equal total demand".into()));
    }

    // North-west corner start: a staircase of exactly n + m - 1 basic cells.
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow = Array2::<i64>::zeros((n, m));
    let mut is_basic = Array2::from_elem((n, m), false);
    {
        let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let x = s[i].min(d[j]);
            flow[[i, j]] = x;
            is_basic[[i, j]] = true;
            basis.push((i, j));
            s[i] -= x;
            d[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if i == n - 1 {
                j += 1;
            } else if j == m - 1 || s[i] == 0 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let scale = cost.iter().fold(1.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let max_pivots = 50 * n * m + 1000;
    let mut degenerate_run = 0usize;
    let mut bland = false;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];

    for _ in 0..max_pivots {
        let adj = tree_adjacency(&basis, n, m);
        tree_potentials(&adj, cost, n, &mut u, &mut v);

        let mut entering = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if is_basic[[i, j]] {
                    continue;
                }
                let rc = cost[[i, j]] - u[i] - v[j];
                if rc < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = rc;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(basis.iter().map(|&(i, j)| ((i, j), flow[[i, j]])).collect());
        };

        // Path in the basis tree from column ej to row ei; with the entering cell it
        // closes a cycle whose cells alternate -, +, -, ... starting next to column ej.
        let path = tree_path(&adj, n + ej, ei);
        let cells: Vec<(usize, usize)> = path
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                if a < n {
                    (a, b - n)
                } else {
                    (b, a - n)
                }
            })
            .collect();
        let mut theta = i64::MAX;
        let mut leaving = None;
        for &cell in cells.iter().step_by(2) {
            let x = flow[[cell.0, cell.1]];
            let better = match leaving {
                None => true,
                Some(cur) => x < theta || (x == theta && bland && cell < cur),
            };
            if better {
                theta = x;
                leaving = Some(cell);
            }
        }
        let leaving = leaving.expect("cycle has at least one decreasing cell");
        for (k, &(i, j)) in cells.iter().enumerate() {
            if k % 2 == 0 {
                flow[[i, j]] -= theta;
            } else {
                flow[[i, j]] += theta;
            }
        }
        flow[[ei, ej]] += theta;
        is_basic[[leaving.0, leaving.1]] = false;
        is_basic[[ei, ej]] = true;
        let pos = basis.iter().position(|&c| c == leaving).expect("leaving cell is basic");
        basis[pos] = (ei, ej);

        if theta == 0 {
            degenerate_run += 1;
            if degenerate_run > 2 * (n + m) {
                bland = true;
            }
        } else {
            degenerate_run = 0;
        }
    }
    Err(Error::Numerical(format!(
        "transportation simplex did not terminate within {max_pivots} pivots"
    )))
}

fn tree_adjacency(basis: &[(usize, usize)], n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n + m];
    for &(i, j) in basis {
        adj[i].push(n + j);
        adj[n + j].push(i);
    }
    adj
}

fn tree_potentials(adj: &[Vec<usize>], cost: ArrayView2<f64>, n: usize, u: &mut [f64], v: &mut [f64]) {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    u[0] = 0.0;
    while let Some(a) = queue.pop_front() {
        for &b in &adj[a] {
            if seen[b] {
                continue;
            }
            seen[b] = true;
            if a < n {
                v[b - n] = cost[[a, b - n]] - u[a];
            } else {
                u[b] = cost[[b, a - n]] - v[a - n];
            }
            queue.push_back(b);
        }
    }
}

fn tree_path(adj: &[Vec<usize>], from: usize, to: usize) -> Vec<usize> {
    let mut parent = vec![usize::MAX; adj.len()];
    parent[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(a) = queue.pop_front() {
        if a == to {
            break;
        }
        for &b in &adj[a] {
            if parent[b] == usize::MAX {
                parent[b] = a;
                queue.push_back(b);
            }
        }
    }
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = parent[cur];
        path.push(cur);
    }
    path.reverse();
    path
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Solver {
    Sinkhorn(SinkhornConfig),
    Exact,
}

/// Squared Wasserstein distance: the transport cost of the chosen solver.
pub fn wasserstein_sq(
    unlabeled: &EmpiricalDistribution,
    expert: &EmpiricalDistribution,
    metric: CostMetric,
    standardizer: Option<&Standardizer>,
    solver: Solver,
) -> Result<f64> {
    let cost = build_cost_matrix(unlabeled, expert, metric, standardizer)?;
    match solver {
        Solver::Sinkhorn(cfg) => sinkhorn(&cost, &cfg).map(|s| s.transport_cost),
        Solver::Exact => exact_ot(&cost).map(|s| s.transport_cost),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlignmentDump {
    pub rows: usize,
    pub cols: usize,
    pub transport_cost: f64,
    pub cost: Vec<Vec<f64>>,
    pub plan: Vec<Vec<f64>>,
}

/// JSON dump of a cost matrix and plan, for inspecting alignments.
pub fn dump_alignment(cost: &CostMatrix, plan: &TransportPlan) -> String {
    let to_rows = |a: ArrayView2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect();
    let dump = AlignmentDump {
        rows: cost.row_count(),
        cols: cost.col_count(),
        transport_cost: plan.cost(cost),
        cost: to_rows(cost.entries()),
        plan: to_rows(plan.coupling.view()),
    };
    serde_json::to_string_pretty(&dump).expect("alignment dump serializes")
}
