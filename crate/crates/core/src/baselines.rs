//! Comparison methods on the same problem and topology: GT-SAGA and D-SGD
//! adapted to per-server users, and a dense exact ADMM used as an oracle.
//!
//! Both gradient methods use the same Bernoulli(`α`) user activation as
//! CFL-ADMM. Each activated user downloads its server's current model,
//! evaluates one gradient there and uploads it.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cfl_admm::{messages_per_iteration, select_users, Selection};
use crate::error::{CflError, Result};
use crate::problem::{prox_solve, Objective};
use crate::topology::{incidence_matrix, laplacian, BlockMatrix, EsGraph};
use crate::Vector;

/// Symmetric doubly-stochastic matrix supported on the server graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub base: DMatrix<f64>,
}

impl MixingMatrix {
    /// Metropolis–Hastings weights: `W_ij = 1/(1 + max(deg i, deg j))` on
    /// edges, `W_ii = 1 − Σ_j W_ij`.
    pub fn metropolis(graph: &EsGraph) -> Self {
        let l = graph.num_servers();
        let mut base = DMatrix::zeros(l, l);
        for &(a, b) in graph.edges() {
            let w = 1.0 / (1.0 + graph.degree(a).max(graph.degree(b)) as f64);
            base[(a, b)] = w;
            base[(b, a)] = w;
        }
        for i in 0..l {
            let off: f64 = graph.neighbors(i).iter().map(|&j| base[(i, j)]).sum();
            base[(i, i)] = 1.0 - off;
        }
        Self { base }
    }

    /// `Σ_j W_ij v_j` for every server, reading only neighbours.
    pub fn mix(&self, graph: &EsGraph, v: &[Vector]) -> Vec<Vector> {
        (0..graph.num_servers())
            .map(|i| {
                let mut out = &v[i] * self.base[(i, i)];
                for &j in graph.neighbors(i) {
                    out.axpy(self.base[(i, j)], &v[j], 1.0);
                }
                out
            })
            .collect()
    }

    /// Second-largest singular value; below one on connected graphs.
    pub fn second_singular_value(&self) -> f64 {
        let mut s: Vec<f64> = SymmetricEigen::new(self.base.clone())
            .eigenvalues
            .iter()
            .map(|e| e.abs())
            .collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s.get(1).copied().unwrap_or(0.0)
    }
}

fn sum_selected_gradients<O: Objective>(
    objectives: &[O],
    graph: &EsGraph,
    selection: &Selection,
    server: usize,
    at: &Vector,
) -> Result<Vector> {
    let mut g = Vector::zeros(at.len());
    for &j in selection.index_set(server) {
        let u = graph.user_index(server, j);
        g += objectives[u].gradient(at).map_err(|e| e.for_user(server, j))?;
    }
    Ok(g)
}

/// Per-server models for the D-SGD baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DsgdState {
    pub iteration: usize,
    pub y: Vec<Vector>,
    pub messages_sent: u64,
}

impl DsgdState {
    pub fn new(graph: &EsGraph, dim: usize) -> Self {
        Self {
            iteration: 0,
            y: vec![Vector::zeros(dim); graph.num_servers()],
            messages_sent: 0,
        }
    }
}

/// `y_i ← Σ_j W_ij y_j − γ (1/α) Σ_{j∈I_i} ∇f_ij(y_i)`.
///
/// The `1/α` scaling makes the step an unbiased estimate of `∇f_i(y_i)`; an
/// empty activation set contributes no gradient.
pub fn d_sgd_step<O: Objective>(
    state: &mut DsgdState,
    objectives: &[O],
    graph: &EsGraph,
    w: &MixingMatrix,
    stepsize: f64,
    alpha: f64,
    seed: u64,
) -> Result<usize> {
    let k = state.iteration + 1;
    let selection = select_users(graph, alpha, seed, k);
    let grads = (0..graph.num_servers())
        .map(|i| sum_selected_gradients(objectives, graph, &selection, i, &state.y[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut next = w.mix(graph, &state.y);
    for (y, g) in next.iter_mut().zip(&grads) {
        y.axpy(-stepsize / alpha, g, 1.0);
    }
    state.y = next;
    state.iteration = k;
    state.messages_sent += messages_per_iteration(graph, selection.count());
    Ok(selection.count())
}

/// SAGA memory: each user's last reported gradient and per-server sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    entries: Vec<Vector>,
    sums: Vec<Vector>,
    counts: Vec<usize>,
}

impl GradientTable {
    pub fn new(graph: &EsGraph, entries: Vec<Vector>) -> Self {
        assert_eq!(entries.len(), graph.total_users(), "gradient table size");
        let dim = entries.first().map_or(0, |v| v.len());
        let sums = (0..graph.num_servers())
            .map(|i| {
                let start = graph.user_index(i, 0);
                entries[start..start + graph.users(i)]
                    .iter()
                    .fold(Vector::zeros(dim), |acc, g| acc + g)
            })
            .collect();
        Self {
            entries,
            sums,
            counts: graph.users_per_server().to_vec(),
        }
    }

    pub fn entry(&self, user: usize) -> &Vector {
        &self.entries[user]
    }

    pub fn sum(&self, server: usize) -> &Vector {
        &self.sums[server]
    }

    pub fn average(&self, server: usize) -> Vector {
        &self.sums[server] / self.counts[server] as f64
    }

    /// Replaces an entry and returns `new − old`.
    fn replace(&mut self, server: usize, user: usize, gradient: Vector) -> Vector {
        let delta = &gradient - &self.entries[user];
        self.sums[server] += &delta;
        self.entries[user] = gradient;
        delta
    }
}

/// Model, gradient tracker and SAGA memory per server.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSagaState {
    pub iteration: usize,
    pub y: Vec<Vector>,
    pub tracker: Vec<Vector>,
    /// Current variance-reduced estimate of `∇f_i` at each server.
    pub estimator: Vec<Vector>,
    pub table: GradientTable,
    pub messages_sent: u64,
}

impl GtSagaState {
    /// Models start at zero; the table is filled with every user's gradient
    /// at zero (one upload per user) and the trackers start at the
    /// aggregated gradients.
    pub fn new<O: Objective>(graph: &EsGraph, objectives: &[O], dim: usize) -> Result<Self> {
        let zero = Vector::zeros(dim);
        let entries = objectives
            .iter()
            .map(|o| o.gradient(&zero))
            .collect::<Result<Vec<_>>>()?;
        let table = GradientTable::new(graph, entries);
        let estimator: Vec<Vector> = (0..graph.num_servers()).map(|i| table.sum(i).clone()).collect();
        Ok(Self {
            iteration: 0,
            y: vec![zero; graph.num_servers()],
            tracker: estimator.clone(),
            estimator,
            table,
            messages_sent: graph.total_users() as u64,
        })
    }
}

/// One GT-SAGA round:
///
/// 1. `y⁺ = W y − γ t`;
/// 2. activated users upload `∇f_ij(y_i⁺)`;
/// 3. `g⁺_i = Σ_j table_ij + (1/α) Σ_{j∈I_i} (∇f_ij(y_i⁺) − table_ij)`, then
///    the table stores the new gradients;
/// 4. `t⁺ = W t + g⁺ − g`.
pub fn gt_saga_step<O: Objective>(
    state: &mut GtSagaState,
    objectives: &[O],
    graph: &EsGraph,
    w: &MixingMatrix,
    stepsize: f64,
    alpha: f64,
    seed: u64,
) -> Result<usize> {
    let k = state.iteration + 1;
    let mut y = w.mix(graph, &state.y);
    for (yi, ti) in y.iter_mut().zip(&state.tracker) {
        yi.axpy(-stepsize, ti, 1.0);
    }

    let selection = select_users(graph, alpha, seed, k);
    let mut estimator = Vec::with_capacity(graph.num_servers());
    for (i, yi) in y.iter().enumerate() {
        let mut g = state.table.sum(i).clone();
        for &j in selection.index_set(i) {
            let u = graph.user_index(i, j);
            let fresh = objectives[u].gradient(yi).map_err(|e| e.for_user(i, j))?;
            let delta = state.table.replace(i, u, fresh);
            g.axpy(1.0 / alpha, &delta, 1.0);
        }
        estimator.push(g);
    }

    let mut tracker = w.mix(graph, &state.tracker);
    for ((t, new), old) in tracker.iter_mut().zip(&estimator).zip(&state.estimator) {
        *t += new;
        *t -= old;
    }

    state.y = y;
    state.tracker = tracker;
    state.estimator = estimator;
    state.iteration = k;
    state.messages_sent += messages_per_iteration(graph, selection.count());
    Ok(selection.count())
}

/// Stacks blocks into one column.
pub fn stack(blocks: &[Vector]) -> Vector {
    let n = blocks.first().map_or(0, |b| b.len());
    Vector::from_iterator(blocks.len() * n, blocks.iter().flat_map(|b| b.iter().copied()))
}

pub fn unstack(v: &Vector, block_dim: usize) -> Vec<Vector> {
    v.as_slice()
        .chunks(block_dim)
        .map(Vector::from_column_slice)
        .collect()
}

/// Optional proximal term `(σ2/2)‖y − y^k‖²_M` in the dense y-subproblem.
#[derive(Debug, Clone)]
pub enum ProximalTerm {
    None,
    /// `M = α⁻¹P = D − AᵀA`, as used by CFL-ADMM.
    Cfl(BlockMatrix),
}

/// Exact, full-participation ADMM on explicitly materialized matrices.
#[derive(Debug, Clone)]
pub struct DenseAdmm {
    pub incidence: DMatrix<f64>,
    /// `H = H_dig ⊗ I_n`, mapping stacked user vectors to per-server sums.
    pub gather: DMatrix<f64>,
    pub proximal: Option<DMatrix<f64>>,
    system: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub block_dim: usize,
    /// Residual tolerance of the inner x-solves.
    pub inner_tol: f64,
    pub max_inner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdmmState {
    pub iteration: usize,
    pub x: Vector,
    pub lambda: Vector,
    pub y: Vector,
    pub beta: Vector,
}

impl DenseAdmm {
    pub fn new(
        graph: &EsGraph,
        block_dim: usize,
        sigma1: f64,
        sigma2: f64,
        proximal: ProximalTerm,
    ) -> Result<Self> {
        let n = block_dim;
        let identity = DMatrix::identity(n, n);
        let incidence = incidence_matrix(graph, n).materialize();
        let mut h_dig = DMatrix::zeros(graph.num_servers(), graph.total_users());
        for i in 0..graph.num_servers() {
            for j in 0..graph.users(i) {
                h_dig[(i, graph.user_index(i, j))] = 1.0;
            }
        }
        let gather = h_dig.kronecker(&identity);
        let proximal = match proximal {
            ProximalTerm::None => None,
            ProximalTerm::Cfl(d) => {
                let l = graph.num_servers();
                if d.base.shape() != (l, l) {
                    return Err(CflError::InvalidParameter("D does not match graph".into()));
                }
                Some((&d.base - laplacian(graph, n).base).kronecker(&identity))
            }
        };
        let mut lhs = &gather * gather.transpose() * sigma1
            + incidence.transpose() * &incidence * sigma2;
        if let Some(m) = &proximal {
            lhs += m * sigma2;
        }
        Ok(Self {
            incidence,
            gather,
            proximal,
            system: lhs.lu(),
            sigma1,
            sigma2,
            block_dim: n,
            inner_tol: 1e-10,
            max_inner: 1_000_000,
        })
    }

    pub fn initial_state(&self) -> DenseAdmmState {
        DenseAdmmState {
            iteration: 0,
            x: Vector::zeros(self.gather.ncols()),
            lambda: Vector::zeros(self.gather.ncols()),
            y: Vector::zeros(self.gather.nrows()),
            beta: Vector::zeros(self.incidence.nrows()),
        }
    }
}

/// One iteration of standard ADMM (optionally with the proximal y-term):
///
/// `x_ij⁺ = argmin f_ij(x) + (σ1/2)‖x − y_i + λ_ij/σ1‖²` (solved to `inner_tol`),
/// `y⁺ = argmin (σ1/2)‖x⁺ − Hᵀy + λ/σ1‖² + (σ2/2)‖Ay + β/σ2‖² [+ (σ2/2)‖y − y^k‖²_M]`,
/// `λ⁺ = λ + σ1(x⁺ − Hᵀy⁺)`, `β⁺ = β + σ2 A y⁺`.
pub fn centralized_admm_step<O: Objective>(
    state: &mut DenseAdmmState,
    objectives: &[O],
    graph: &EsGraph,
    admm: &DenseAdmm,
) -> Result<()> {
    let n = admm.block_dim;
    let xs = unstack(&state.x, n);
    let lambdas = unstack(&state.lambda, n);
    let ys = unstack(&state.y, n);
    let mut next_x = Vec::with_capacity(xs.len());
    for (i, yi) in ys.iter().enumerate() {
        for j in 0..graph.users(i) {
            let u = graph.user_index(i, j);
            let r = prox_solve(
                &objectives[u],
                &xs[u],
                yi,
                &lambdas[u],
                admm.sigma1,
                admm.inner_tol,
                admm.max_inner,
            )
            .map_err(|e| e.for_user(i, j))?;
            next_x.push(r.point);
        }
    }
    let x = stack(&next_x);

    let mut rhs = &admm.gather * (&x * admm.sigma1 + &state.lambda)
        - admm.incidence.transpose() * &state.beta;
    if let Some(m) = &admm.proximal {
        rhs += m * &state.y * admm.sigma2;
    }
    let y = admm
        .system
        .solve(&rhs)
        .ok_or_else(|| CflError::InvalidParameter("singular y-system".into()))?;

    state.lambda += (&x - admm.gather.transpose() * &y) * admm.sigma1;
    state.beta += &admm.incidence * &y * admm.sigma2;
    state.x = x;
    state.y = y;
    state.iteration += 1;
    Ok(())
}

/// Which algorithm a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    CflAdmm,
    GtSaga,
    DSgd,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::CflAdmm => "cfl-admm",
            Algorithm::GtSaga => "gt-saga",
            Algorithm::DSgd => "d-sgd",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = CflError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfl-admm" => Ok(Algorithm::CflAdmm),
            "gt-saga" => Ok(Algorithm::GtSaga),
            "d-sgd" => Ok(Algorithm::DSgd),
            other => Err(CflError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}
