//! Confederated ADMM with random user scheduling.
//!
//! One iteration runs six phases:
//!
//! 1. every user is activated independently with probability `α`;
//! 2. activated users solve their proximal subproblem to accuracy `ε^{k+1}`;
//! 3. activated users upload their model to their server;
//! 4. servers update `y` in closed form and exchange `y` with neighbours once;
//! 5. servers broadcast `y` to their users;
//! 6. every user, activated or not, takes the damped dual step.
//!
//! The y-update only touches server-local data: the stored models of the
//! server's own users, two running accumulators and the Laplacian term from
//! the previous neighbour exchange. Per-edge `β` is also tracked centrally,
//! but only so tests can compare it with the accumulators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::problem::{prox_solve, Objective};
use crate::topology::{BlockMatrix, EsGraph};
use crate::Vector;

/// Accuracy required of the user subproblems at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpsilonRepr", into = "EpsilonRepr")]
pub enum EpsilonSchedule {
    Constant(f64),
    /// `ε^k = 1 / (100 + k²)`.
    Decreasing,
}

/// Config form: a number, or the string `"decreasing"`.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EpsilonRepr {
    Value(f64),
    Named(String),
}

impl TryFrom<EpsilonRepr> for EpsilonSchedule {
    type Error = String;
    fn try_from(r: EpsilonRepr) -> std::result::Result<Self, String> {
        match r {
            EpsilonRepr::Value(v) if v >= 0.0 && v.is_finite() => Ok(EpsilonSchedule::Constant(v)),
            EpsilonRepr::Value(v) => Err(format!("epsilon {v} must be a finite nonnegative number")),
            EpsilonRepr::Named(s) if s == "decreasing" => Ok(EpsilonSchedule::Decreasing),
            EpsilonRepr::Named(s) => s
                .parse::<f64>()
                .map_err(|_| format!("unknown epsilon schedule {s:?}"))
                .and_then(|v| EpsilonSchedule::try_from(EpsilonRepr::Value(v))),
        }
    }
}

impl From<EpsilonSchedule> for EpsilonRepr {
    fn from(e: EpsilonSchedule) -> Self {
        match e {
            EpsilonSchedule::Constant(v) => EpsilonRepr::Value(v),
            EpsilonSchedule::Decreasing => EpsilonRepr::Named("decreasing".into()),
        }
    }
}

impl EpsilonSchedule {
    /// Accuracy for the subproblem solved at (1-based) iteration `k`.
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            EpsilonSchedule::Constant(e) => e,
            EpsilonSchedule::Decreasing => {
                let k = k as f64;
                1.0 / (100.0 + k * k)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            EpsilonSchedule::Constant(e) => format!("{e:e}"),
            EpsilonSchedule::Decreasing => "1/(100+k^2)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sigma1: f64,
    pub sigma2: f64,
    /// Per-iteration activation probability of each user.
    pub alpha: f64,
    pub epsilon: EpsilonSchedule,
    /// Iteration budget `k̄`.
    pub max_iterations: usize,
    /// Inner gradient-descent budget per subproblem.
    pub max_inner: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma1: 1.0,
            sigma2: 1.0,
            alpha: 0.3,
            epsilon: EpsilonSchedule::Decreasing,
            max_iterations: 500,
            max_inner: 1_000_000,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CflError::InvalidParameter(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.sigma1 > 0.0 && self.sigma1.is_finite() && self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(CflError::InvalidParameter(format!(
                "sigma1={} and sigma2={} must be positive",
                self.sigma1, self.sigma2
            )));
        }
        if self.max_iterations == 0 {
            return Err(CflError::InvalidParameter("max_iterations must be at least 1".into()));
        }
        if let EpsilonSchedule::Constant(e) = self.epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(CflError::InvalidParameter(format!("epsilon {e} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Complete algorithm state. User vectors are flat in server-major order
/// (see [`EsGraph::user_index`]); `beta` is indexed by edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CflState {
    pub iteration: usize,
    pub x: Vec<Vector>,
    pub lambda: Vec<Vector>,
    pub y: Vec<Vector>,
    pub beta: Vec<Vector>,
    /// `s_i = (Aᵀβ^k)_i`, kept from neighbour exchanges only.
    pub laplacian_accumulator: Vec<Vector>,
    /// `(Hλ^k)_i = Σ_j λ_ij^k`, kept from uploads and the server's own `y`.
    pub dual_sum: Vec<Vector>,
    /// `(AᵀA y^k)_i` from the last neighbour exchange.
    pub laplacian_y: Vec<Vector>,
    pub messages_sent: u64,
}

impl CflState {
    /// All-zero initial state.
    pub fn new(graph: &EsGraph, dim: usize) -> Self {
        let users = graph.total_users();
        let l = graph.num_servers();
        let zeros = |k| vec![Vector::zeros(dim); k];
        Self {
            iteration: 0,
            x: zeros(users),
            lambda: zeros(users),
            y: zeros(l),
            beta: zeros(graph.num_edges()),
            laplacian_accumulator: zeros(l),
            dual_sum: zeros(l),
            laplacian_y: zeros(l),
            messages_sent: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    /// Serializes the state; floats round-trip exactly.
    pub fn to_snapshot(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| CflError::Snapshot(e.to_string()))
    }

    pub fn from_snapshot(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| CflError::Snapshot(e.to_string()))
    }
}

/// Users activated in one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    selected: Vec<bool>,
    index_sets: Vec<Vec<usize>>,
}

impl Selection {
    pub fn all(graph: &EsGraph) -> Self {
        Self::from_mask(graph, vec![true; graph.total_users()])
    }

    pub fn none(graph: &EsGraph) -> Self {
        Self::from_mask(graph, vec![false; graph.total_users()])
    }

    /// `mask` is flat in server-major order.
    pub fn from_mask(graph: &EsGraph, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), graph.total_users(), "selection mask length");
        let index_sets = (0..graph.num_servers())
            .map(|i| {
                (0..graph.users(i))
                    .filter(|&j| mask[graph.user_index(i, j)])
                    .collect()
            })
            .collect();
        Self {
            selected: mask,
            index_sets,
        }
    }

    pub fn is_selected(&self, user: usize) -> bool {
        self.selected[user]
    }

    /// `I_i`: indices (within server `i`) of the activated users.
    pub fn index_set(&self, server: usize) -> &[usize] {
        &self.index_sets[server]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Uniform draw for `user` (flat index) at `iteration`, keyed by
/// `(seed, iteration, user)` so it does not depend on evaluation order.
pub fn scheduling_draw(seed: u64, iteration: usize, user: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng.set_word_pos(2 * user as u128);
    rng.random::<f64>()
}

/// Bernoulli(`alpha`) activation of every user for iteration `iteration`.
///
/// `alpha = 0` is accepted here and yields an empty selection.
pub fn select_users(graph: &EsGraph, alpha: f64, seed: u64, iteration: usize) -> Selection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    // Sequential draws from word position 0 coincide with `scheduling_draw`.
    let mask = (0..graph.total_users())
        .map(|_| rng.random::<f64>() < alpha)
        .collect();
    Selection::from_mask(graph, mask)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct XUpdateStats {
    pub solved: usize,
    pub inner_iterations: usize,
    pub max_residual: f64,
}

/// Inexact x-update for the activated users; everyone else keeps `x^k`.
pub fn x_update<O: Objective>(
    state: &mut CflState,
    objectives: &[O],
    graph: &EsGraph,
    selection: &Selection,
    epsilon: f64,
    config: &RunConfig,
) -> Result<XUpdateStats> {
    if objectives.len() != graph.total_users() {
        return Err(CflError::DimensionMismatch {
            expected: graph.total_users(),
            found: objectives.len(),
        });
    }
    let jobs: Vec<(usize, usize, usize)> = (0..graph.num_servers())
        .flat_map(|i| {
            selection
                .index_set(i)
                .iter()
                .map(move |&j| (i, j, graph.user_index(i, j)))
        })
        .collect();

    let results: Vec<_> = {
        let state = &*state;
        jobs.par_iter()
            .map(|&(i, j, u)| {
                prox_solve(
                    &objectives[u],
                    &state.x[u],
                    &state.y[i],
                    &state.lambda[u],
                    config.sigma1,
                    epsilon,
                    config.max_inner,
                )
                .map_err(|e| e.for_user(i, j))
            })
            .collect()
    };

    let mut stats = XUpdateStats::default();
    for (&(_, _, u), result) in jobs.iter().zip(results) {
        let r = result?;
        stats.solved += 1;
        stats.inner_iterations += r.inner_iterations;
        stats.max_residual = stats.max_residual.max(r.residual_norm);
        state.x[u] = r.point;
    }
    Ok(stats)
}

/// What one server may read when updating `y_i`.
#[derive(Debug, Clone, Copy)]
pub struct ServerView<'a> {
    /// Latest models of the server's own users (its upload history).
    pub user_models: &'a [Vector],
    pub y: &'a Vector,
    pub dual_sum: &'a Vector,
    pub laplacian_accumulator: &'a Vector,
    /// `(AᵀA y^k)_i` assembled from the last neighbour exchange.
    pub laplacian_y: &'a Vector,
    pub d: f64,
}

/// Closed-form y-update of one server:
///
/// `y_i⁺ = [ασ1 Σ_j x_ij + (Hλ)_i − s_i + σ2 (D_ii y_i − (AᵀA y)_i)] / (ασ1|S_i| + σ2 D_ii)`.
pub fn local_y_update(view: &ServerView<'_>, alpha: f64, sigma1: f64, sigma2: f64) -> Vector {
    let users = view.user_models.len() as f64;
    let mut rhs = view.dual_sum - view.laplacian_accumulator;
    for x in view.user_models {
        rhs.axpy(alpha * sigma1, x, 1.0);
    }
    rhs.axpy(sigma2 * view.d, view.y, 1.0);
    rhs.axpy(-sigma2, view.laplacian_y, 1.0);
    rhs / (alpha * sigma1 * users + sigma2 * view.d)
}

/// Runs the y-update at every server, then folds the new `y` and the
/// uploaded models into each server's dual sum.
pub fn y_update(state: &mut CflState, graph: &EsGraph, d: &BlockMatrix, config: &RunConfig) {
    let d = d.diagonal();
    let (a, s1, s2) = (config.alpha, config.sigma1, config.sigma2);
    let next: Vec<Vector> = (0..graph.num_servers())
        .map(|i| {
            let range = graph.user_index(i, 0)..graph.user_index(i, 0) + graph.users(i);
            local_y_update(
                &ServerView {
                    user_models: &state.x[range],
                    y: &state.y[i],
                    dual_sum: &state.dual_sum[i],
                    laplacian_accumulator: &state.laplacian_accumulator[i],
                    laplacian_y: &state.laplacian_y[i],
                    d: d[i],
                },
                a,
                s1,
                s2,
            )
        })
        .collect();
    for (i, y) in next.into_iter().enumerate() {
        // (Hλ^{k+1})_i = (Hλ^k)_i + ασ1 Σ_j (x_ij^{k+1} − y_i^{k+1})
        let start = graph.user_index(i, 0);
        let mut delta = -(&y * graph.users(i) as f64);
        for x in &state.x[start..start + graph.users(i)] {
            delta += x;
        }
        state.dual_sum[i].axpy(a * s1, &delta, 1.0);
        state.y[i] = y;
    }
}

/// One neighbour exchange: server `i` computes `deg(i) y_i − Σ_{j~i} y_j`
/// from the values its neighbours send.
pub fn neighbor_exchange(graph: &EsGraph, y: &[Vector]) -> Vec<Vector> {
    (0..graph.num_servers())
        .map(|i| {
            let mut out = &y[i] * graph.degree(i) as f64;
            for &j in graph.neighbors(i) {
                out -= &y[j];
            }
            out
        })
        .collect()
}

/// `β^{k+1} = β^k + σ2 A y^{k+1}`, plus the matching accumulator update
/// `s_i += σ2 (AᵀA y^{k+1})_i` from the neighbour exchange.
pub fn beta_update(state: &mut CflState, graph: &EsGraph, config: &RunConfig) {
    let s2 = config.sigma2;
    for (e, &(tail, head)) in graph.edges().iter().enumerate() {
        let diff = &state.y[tail] - &state.y[head];
        state.beta[e].axpy(s2, &diff, 1.0);
    }
    state.laplacian_y = neighbor_exchange(graph, &state.y);
    for (s, ly) in state.laplacian_accumulator.iter_mut().zip(&state.laplacian_y) {
        s.axpy(s2, ly, 1.0);
    }
}

/// Damped dual step for every user:
/// `λ̄ = λ + σ1(x − y_i)`, `λ⁺ = λ + α(λ̄ − λ)`.
pub fn lambda_update(state: &mut CflState, graph: &EsGraph, config: &RunConfig) {
    for i in 0..graph.num_servers() {
        for j in 0..graph.users(i) {
            let u = graph.user_index(i, j);
            let lambda_bar = &state.lambda[u] + (&state.x[u] - &state.y[i]) * config.sigma1;
            let damped = &state.lambda[u] + (lambda_bar - &state.lambda[u]) * config.alpha;
            state.lambda[u] = damped;
        }
    }
}

/// Messages in one iteration: `l` broadcasts, `l` neighbour exchanges and
/// one upload per activated user.
pub fn messages_per_iteration(graph: &EsGraph, selected: usize) -> u64 {
    (2 * graph.num_servers() + selected) as u64
}

/// Mean of [`messages_per_iteration`] under Bernoulli(`alpha`) activation.
pub fn expected_messages_per_iteration(graph: &EsGraph, alpha: f64) -> f64 {
    2.0 * graph.num_servers() as f64 + alpha * graph.total_users() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub epsilon: f64,
    pub selected: usize,
    pub x_stats: XUpdateStats,
    pub messages: u64,
}

/// One full iteration using the given activation set.
pub fn step_with_selection<O: Objective>(
    state: &mut CflState,
    objectives: &[O],
    graph: &EsGraph,
    d: &BlockMatrix,
    config: &RunConfig,
    selection: &Selection,
) -> Result<StepReport> {
    let k = state.iteration + 1;
    let epsilon = config.epsilon.at(k);
    let x_stats = x_update(state, objectives, graph, selection, epsilon, config)?;
    y_update(state, graph, d, config);
    beta_update(state, graph, config);
    lambda_update(state, graph, config);
    let messages = messages_per_iteration(graph, selection.count());
    state.messages_sent += messages;
    state.iteration = k;
    Ok(StepReport {
        iteration: k,
        epsilon,
        selected: selection.count(),
        x_stats,
        messages,
    })
}

/// One full iteration, drawing the activation set from `config.seed`.
pub fn step<O: Objective>(
    state: &mut CflState,
    objectives: &[O],
    graph: &EsGraph,
    d: &BlockMatrix,
    config: &RunConfig,
) -> Result<StepReport> {
    let selection = select_users(graph, config.alpha, config.seed, state.iteration + 1);
    step_with_selection(state, objectives, graph, d, config, &selection)
}

/// Averaging weights `δ^t`, `t = 1..=k̄`: `δ^k̄ = 1/(1 + α(k̄−1))` and
/// `δ^t = α δ^k̄` otherwise. They sum to one.
pub fn averaging_weights(alpha: f64, k_bar: usize) -> Vec<f64> {
    if k_bar == 0 {
        return Vec::new();
    }
    let last = 1.0 / (1.0 + alpha * (k_bar as f64 - 1.0));
    let mut w = vec![alpha * last; k_bar];
    w[k_bar - 1] = last;
    w
}

/// Running `δ`-weighted sums of the iterates, for a budget `k̄` fixed in
/// advance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAverager {
    alpha: f64,
    k_bar: usize,
    seen: usize,
    x: Vec<Vector>,
    y: Vec<Vector>,
}

impl WeightedAverager {
    pub fn new(alpha: f64, k_bar: usize) -> Self {
        Self {
            alpha,
            k_bar,
            seen: 0,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[Vector], y: &[Vector]) -> Result<()> {
        if self.seen == self.k_bar {
            return Err(CflError::InvalidParameter(format!(
                "averager already holds {} iterates",
                self.k_bar
            )));
        }
        self.seen += 1;
        let w = averaging_weights(self.alpha, self.k_bar)[self.seen - 1];
        accumulate(&mut self.x, x, w);
        accumulate(&mut self.y, y, w);
        Ok(())
    }

    /// `(x_avg, y_avg)`, available once all `k̄` iterates were pushed.
    pub fn finish(self) -> Result<(Vec<Vector>, Vec<Vector>)> {
        if self.seen != self.k_bar {
            return Err(CflError::InvalidParameter(format!(
                "{} of {} iterates pushed",
                self.seen, self.k_bar
            )));
        }
        Ok((self.x, self.y))
    }
}

fn accumulate(acc: &mut Vec<Vector>, v: &[Vector], w: f64) {
    if acc.is_empty() {
        acc.extend(v.iter().map(|b| b * w));
    } else {
        for (a, b) in acc.iter_mut().zip(v) {
            a.axpy(w, b, 1.0);
        }
    }
}

/// `δ`-weighted averages of a full history `x^1..x^k̄`, `y^1..y^k̄`.
pub fn weighted_averages(
    x_history: &[Vec<Vector>],
    y_history: &[Vec<Vector>],
    alpha: f64,
) -> Result<(Vec<Vector>, Vec<Vector>)> {
    if x_history.len() != y_history.len() || x_history.is_empty() {
        return Err(CflError::InvalidParameter(
            "histories must be nonempty and equally long".into(),
        ));
    }
    let mut avg = WeightedAverager::new(alpha, x_history.len());
    for (x, y) in x_history.iter().zip(y_history) {
        avg.push(x, y)?;
    }
    avg.finish()
}

/// `(Σ_i ‖x_i − H_iᵀ y_i‖₂, ‖A y‖₂)`.
pub fn consensus_residuals(graph: &EsGraph, x: &[Vector], y: &[Vector]) -> (f64, f64) {
    let user_es = (0..graph.num_servers())
        .map(|i| {
            (0..graph.users(i))
                .map(|j| (&x[graph.user_index(i, j)] - &y[i]).norm_squared())
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    let es_es = graph
        .edges()
        .iter()
        .map(|&(a, b)| (&y[a] - &y[b]).norm_squared())
        .sum::<f64>()
        .sqrt();
    (user_es, es_es)
}
