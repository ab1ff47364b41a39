//! Experiment runner: builds an instance from a config, runs the selected
//! algorithms over `α`/`ε` grids and repeats, and writes CSV traces.
//!
//! Trace CSVs start with `#`-prefixed header lines recording every choice
//! that affects the numbers (topology, data source and scaling, penalties,
//! seeds, baseline step-size grid), followed by a fixed-column table. Floats
//! are written with 17 significant digits. Wall time is written as `0` unless
//! `timing = true`, so traces are byte-identical across reruns by default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    d_sgd_step, gt_saga_step, Algorithm, DsgdState, GtSagaState, MixingMatrix,
};
use crate::cfl_admm::{self, CflState, EpsilonSchedule, RunConfig};
use crate::error::{CflError, Result};
use crate::problem::{
    load_labeled_csv, logistic_objectives, partition, solve_reference, synthetic_samples,
    CsvOptions, LocalObjective, Objective, ReferenceSolution, SyntheticSpec, DEFAULT_REFERENCE_TOL,
};
use crate::topology::{build_d_matrix, EsGraph};
use crate::Vector;

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CFL_OUTPUT_DIR";

/// Metrics recorded after each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub optimality_gap: f64,
    pub global_objective: f64,
    pub consensus_user_es: f64,
    pub consensus_es_es: f64,
    pub cumulative_messages: f64,
    pub wall_time: f64,
}

/// `d^k = Σ_ij ‖x_ij − x*‖² / (‖x*‖² · Σ_i |S_i|)`.
pub fn optimality_gap(user_models: &[Vector], x_star: &Vector) -> Result<f64> {
    let norm = x_star.norm_squared();
    if norm == 0.0 {
        return Err(CflError::ZeroReference);
    }
    if user_models.is_empty() {
        return Err(CflError::InvalidParameter("no user models".into()));
    }
    let total: f64 = user_models.iter().map(|x| (x - x_star).norm_squared()).sum();
    Ok(total / (norm * user_models.len() as f64))
}

/// Problem data shared by every algorithm in a comparison.
pub struct TraceContext<'a, O> {
    pub graph: &'a EsGraph,
    pub objectives: &'a [O],
    pub x_star: &'a Vector,
}

impl<O: Objective> TraceContext<'_, O> {
    pub fn record(
        &self,
        iteration: usize,
        user_models: &[Vector],
        y: &[Vector],
        messages: f64,
        wall_time: f64,
    ) -> Result<TraceRecord> {
        let (consensus_user_es, consensus_es_es) =
            cfl_admm::consensus_residuals(self.graph, user_models, y);
        let global_objective = self
            .objectives
            .iter()
            .zip(user_models)
            .map(|(o, x)| o.loss(x))
            .sum::<Result<f64>>()?;
        Ok(TraceRecord {
            iteration,
            optimality_gap: optimality_gap(user_models, self.x_star)?,
            global_objective,
            consensus_user_es,
            consensus_es_es,
            cumulative_messages: messages,
            wall_time,
        })
    }

    /// Gradient methods keep one model per server; users hold a copy of it.
    fn broadcast(&self, y: &[Vector]) -> Vec<Vector> {
        (0..self.graph.num_servers())
            .flat_map(|i| std::iter::repeat_n(y[i].clone(), self.graph.users(i)))
            .collect()
    }
}

/// Runs CFL-ADMM for `config.max_iterations` iterations. `hook` sees the
/// state and record after each iteration.
pub fn run_cfl<O: Objective>(
    ctx: &TraceContext<'_, O>,
    config: &RunConfig,
    timing: bool,
    mut hook: impl FnMut(&CflState, &TraceRecord),
) -> Result<Vec<TraceRecord>> {
    config.validate()?;
    let dim = ctx.x_star.len();
    let d = build_d_matrix(ctx.graph, config.alpha, config.sigma1, config.sigma2, dim)?;
    let mut state = CflState::new(ctx.graph, dim);
    let start = Instant::now();
    let mut trace = Vec::with_capacity(config.max_iterations);
    for _ in 0..config.max_iterations {
        cfl_admm::step(&mut state, ctx.objectives, ctx.graph, &d, config)?;
        let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let rec = ctx.record(
            state.iteration,
            &state.x,
            &state.y,
            state.messages_sent as f64,
            wall,
        )?;
        hook(&state, &rec);
        trace.push(rec);
    }
    Ok(trace)
}

/// Step and sampling settings for a gradient baseline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineRun {
    pub stepsize: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub seed: u64,
}

pub fn run_gt_saga<O: Objective>(
    ctx: &TraceContext<'_, O>,
    run: &BaselineRun,
    timing: bool,
) -> Result<Vec<TraceRecord>> {
    let w = MixingMatrix::metropolis(ctx.graph);
    let mut state = GtSagaState::new(ctx.graph, ctx.objectives, ctx.x_star.len())?;
    let start = Instant::now();
    (0..run.iterations)
        .map(|_| {
            gt_saga_step(&mut state, ctx.objectives, ctx.graph, &w, run.stepsize, run.alpha, run.seed)?;
            let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
            ctx.record(
                state.iteration,
                &ctx.broadcast(&state.y),
                &state.y,
                state.messages_sent as f64,
                wall,
            )
        })
        .collect()
}

pub fn run_dsgd<O: Objective>(
    ctx: &TraceContext<'_, O>,
    run: &BaselineRun,
    timing: bool,
) -> Result<Vec<TraceRecord>> {
    let w = MixingMatrix::metropolis(ctx.graph);
    let mut state = DsgdState::new(ctx.graph, ctx.x_star.len());
    let start = Instant::now();
    (0..run.iterations)
        .map(|_| {
            d_sgd_step(&mut state, ctx.objectives, ctx.graph, &w, run.stepsize, run.alpha, run.seed)?;
            let wall = if timing { start.elapsed().as_secs_f64() } else { 0.0 };
            ctx.record(
                state.iteration,
                &ctx.broadcast(&state.y),
                &state.y,
                state.messages_sent as f64,
                wall,
            )
        })
        .collect()
}

/// Field-wise arithmetic mean of equally long traces.
pub fn mean_trace(traces: &[Vec<TraceRecord>]) -> Vec<TraceRecord> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    let m = traces.len() as f64;
    (0..first.len())
        .map(|k| {
            let mean = |f: fn(&TraceRecord) -> f64| traces.iter().map(|t| f(&t[k])).sum::<f64>() / m;
            TraceRecord {
                iteration: first[k].iteration,
                optimality_gap: mean(|r| r.optimality_gap),
                global_objective: mean(|r| r.global_objective),
                consensus_user_es: mean(|r| r.consensus_user_es),
                consensus_es_es: mean(|r| r.consensus_es_es),
                cumulative_messages: mean(|r| r.cumulative_messages),
                wall_time: mean(|r| r.wall_time),
            }
        })
        .collect()
}

/// First iteration whose gap is at most `threshold`.
pub fn iterations_to_reach(trace: &[TraceRecord], threshold: f64) -> Option<usize> {
    trace
        .iter()
        .find(|r| r.optimality_gap <= threshold)
        .map(|r| r.iteration)
}

/// Mean gap over the last `fraction` of the trace (at least one record).
pub fn plateau(trace: &[TraceRecord], fraction: f64) -> f64 {
    let tail = ((trace.len() as f64 * fraction).ceil() as usize).clamp(1, trace.len().max(1));
    let slice = &trace[trace.len() - tail..];
    slice.iter().map(|r| r.optimality_gap).sum::<f64>() / slice.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    Ring { servers: usize, users_per_server: usize },
    Path { servers: usize, users_per_server: usize },
    Star { servers: usize, users_per_server: usize },
    ErdosRenyi { servers: usize, users_per_server: usize, p: f64, seed: u64 },
    Edges { servers: usize, edges: Vec<(usize, usize)>, users: Vec<usize> },
}

impl TopologySpec {
    pub fn build(&self) -> Result<EsGraph> {
        match self {
            TopologySpec::Ring { servers, users_per_server } => EsGraph::ring(*servers, *users_per_server),
            TopologySpec::Path { servers, users_per_server } => EsGraph::path(*servers, *users_per_server),
            TopologySpec::Star { servers, users_per_server } => EsGraph::star(*servers, *users_per_server),
            TopologySpec::ErdosRenyi { servers, users_per_server, p, seed } => {
                EsGraph::erdos_renyi(*servers, *p, *users_per_server, *seed)
            }
            TopologySpec::Edges { servers, edges, users } => {
                EsGraph::new(*servers, edges.iter().copied(), users.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub has_header: bool,
    /// Entries per row including the label; 24 for the credit layout.
    #[serde(default)]
    pub columns: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default = "default_per_user")]
    pub per_user: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub partition_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: None,
            csv: None,
            per_user: default_per_user(),
            ridge: default_ridge(),
            partition_seed: 0,
        }
    }
}

fn default_per_user() -> usize {
    20
}

fn default_ridge() -> f64 {
    crate::problem::DEFAULT_RIDGE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub topology: TopologySpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<EpsilonSchedule>,
    #[serde(default = "one")]
    pub sigma1: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "default_max_inner")]
    pub max_inner: usize,
    pub iterations: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Scheduling seed of the first repeat; repeat `r` uses `seed + r`.
    pub seed: Option<u64>,
    /// Step-size grid searched for the gradient baselines.
    #[serde(default = "default_stepsizes")]
    pub stepsizes: Vec<f64>,
    /// Gap the baseline tuning tries to reach first.
    #[serde(default = "default_target")]
    pub tuning_target: f64,
    #[serde(default = "default_reference_tol")]
    pub reference_tol: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Where cached reference solutions live; defaults to `output_dir`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub timing: bool,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::CflAdmm]
}
fn default_epsilons() -> Vec<EpsilonSchedule> {
    vec![EpsilonSchedule::Decreasing]
}
fn one() -> f64 {
    1.0
}
fn default_max_inner() -> usize {
    1_000_000
}
fn default_repeats() -> usize {
    20
}
fn default_stepsizes() -> Vec<f64> {
    vec![1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2]
}
fn default_target() -> f64 {
    1e-4
}
fn default_reference_tol() -> f64 {
    DEFAULT_REFERENCE_TOL
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// The desk-scale instance: 4-server ring, 20 users per server,
    /// 20 synthetic samples per user, model dimension 10.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            topology: TopologySpec::Ring {
                servers: 4,
                users_per_server: 20,
            },
            data: DataConfig {
                synthetic: Some(SyntheticSpec {
                    num_samples: 1600,
                    dim: 10,
                    label_noise: 0.1,
                    seed: 2024,
                }),
                csv: None,
                per_user: 20,
                ridge: default_ridge(),
                partition_seed: 7,
            },
            algorithms: default_algorithms(),
            alphas: vec![0.3],
            epsilons: default_epsilons(),
            sigma1: 1.0,
            sigma2: 1.0,
            max_inner: default_max_inner(),
            iterations: 500,
            repeats: default_repeats(),
            seed: Some(1),
            stepsizes: default_stepsizes(),
            tuning_target: default_target(),
            reference_tol: default_reference_tol(),
            output_dir: default_output_dir(),
            cache_dir: None,
            timing: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CflError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CflError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CflError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synthetic, &d.csv) {
            (None, None) => {
                return Err(CflError::Config(
                    "no dataset: set [data.csv] or [data.synthetic]".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CflError::Config(
                    "both [data.csv] and [data.synthetic] are set".into(),
                ))
            }
            (None, Some(csv)) if !csv.path.exists() => {
                return Err(CflError::Config(format!(
                    "dataset {} does not exist",
                    csv.path.display()
                )))
            }
            _ => {}
        }
        if self.alphas.is_empty() || self.epsilons.is_empty() || self.algorithms.is_empty() {
            return Err(CflError::Config(
                "alphas, epsilons and algorithms must be nonempty".into(),
            ));
        }
        if self.repeats == 0 || self.iterations == 0 {
            return Err(CflError::Config("repeats and iterations must be positive".into()));
        }
        if self.algorithms.iter().any(|a| *a != Algorithm::CflAdmm) && self.stepsizes.is_empty() {
            return Err(CflError::Config("baselines need a nonempty stepsizes grid".into()));
        }
        for &alpha in &self.alphas {
            self.run_config(alpha, self.epsilons[0], 0).validate()?;
        }
        Ok(())
    }

    pub fn run_config(&self, alpha: f64, epsilon: EpsilonSchedule, repeat: usize) -> RunConfig {
        RunConfig {
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            alpha,
            epsilon,
            max_iterations: self.iterations,
            max_inner: self.max_inner,
            seed: self.seed.unwrap_or(0) + repeat as u64,
        }
    }

    /// Output directory after applying [`OUTPUT_DIR_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

/// A built problem: graph, per-user objectives and the shared optimum.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: EsGraph,
    pub objectives: Vec<LocalObjective>,
    pub dim: usize,
    pub reference: ReferenceSolution,
    pub content_hash: String,
    /// `key: value` lines for trace headers.
    pub description: Vec<(String, String)>,
}

impl Instance {
    /// Builds the instance, computing `x*` from scratch.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        Self::build_with_cache(config, None)
    }

    /// As [`Instance::build`], reusing or writing a cached `x*` in `cache_dir`.
    pub fn build_with_cache(config: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let graph = config.topology.build()?;
        let d = &config.data;
        let (samples, source, scaling) = if let Some(spec) = &d.synthetic {
            (
                synthetic_samples(spec)?,
                format!(
                    "synthetic samples={} dim={} label_noise={} seed={}",
                    spec.num_samples, spec.dim, spec.label_noise, spec.seed
                ),
                "none (standard normal features, bias 1)".to_string(),
            )
        } else {
            let csv = d.csv.as_ref().expect("validated");
            (
                load_labeled_csv(
                    &csv.path,
                    CsvOptions {
                        has_header: csv.has_header,
                        expected_columns: csv.columns,
                    },
                )?,
                format!("csv {}", csv.path.display()),
                "per-column min-max to [0,1], constant columns to 0, bias 1 appended".to_string(),
            )
        };
        let dim = samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| CflError::Config("dataset is empty".into()))?;
        let shards = partition(&samples, &graph, d.per_user, d.partition_seed)?;
        let objectives = logistic_objectives(&shards, dim, d.ridge)?;
        let content_hash = content_hash(&graph, &objectives);

        let reference = match cache_dir {
            Some(dir) => cached_reference(dir, &content_hash, &objectives, config.reference_tol)?,
            None => solve_reference(&objectives, config.reference_tol)?,
        };

        let description = vec![
            ("topology".into(), graph.describe()),
            ("data".into(), source),
            ("scaling".into(), scaling),
            ("samples_per_user".into(), d.per_user.to_string()),
            ("partition_seed".into(), d.partition_seed.to_string()),
            ("ridge".into(), format_float(d.ridge)),
            ("dim".into(), dim.to_string()),
            ("content_hash".into(), content_hash.clone()),
            ("reference_tol".into(), format_float(config.reference_tol)),
            ("reference_iterations".into(), reference.iterations.to_string()),
            ("reference_gradient_norm".into(), format_float(reference.gradient_norm)),
        ];
        Ok(Self {
            graph,
            objectives,
            dim,
            reference,
            content_hash,
            description,
        })
    }

    pub fn context(&self) -> TraceContext<'_, LocalObjective> {
        TraceContext {
            graph: &self.graph,
            objectives: &self.objectives,
            x_star: &self.reference.x,
        }
    }
}

/// SHA-256 over the graph and every objective's data.
pub fn content_hash(graph: &EsGraph, objectives: &[LocalObjective]) -> String {
    let mut h = Sha256::new();
    h.update(graph.describe().as_bytes());
    for o in objectives {
        h.update(o.ridge_weight().to_bits().to_le_bytes());
        h.update((o.samples().len() as u64).to_le_bytes());
        for s in o.samples() {
            for v in s.features.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(s.label.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Cached reference solution with its metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedReference {
    pub content_hash: String,
    pub tolerance: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub x: Vec<f64>,
}

pub fn reference_cache_path(dir: &Path, content_hash: &str) -> PathBuf {
    dir.join(format!("reference-{}.json", &content_hash[..16]))
}

/// Loads `x*` from `dir` if cached at tolerance `tol` or tighter; otherwise
/// solves and writes the cache.
pub fn cached_reference<O: Objective>(
    dir: &Path,
    content_hash: &str,
    objectives: &[O],
    tol: f64,
) -> Result<ReferenceSolution> {
    let path = reference_cache_path(dir, content_hash);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(c) = serde_json::from_str::<CachedReference>(&text) {
            if c.content_hash == content_hash && c.tolerance <= tol {
                return Ok(ReferenceSolution {
                    x: Vector::from_vec(c.x),
                    gradient_norm: c.gradient_norm,
                    iterations: c.iterations,
                });
            }
        }
    }
    let r = solve_reference(objectives, tol)?;
    fs::create_dir_all(dir)?;
    let cached = CachedReference {
        content_hash: content_hash.to_string(),
        tolerance: tol,
        iterations: r.iterations,
        gradient_norm: r.gradient_norm,
        x: r.x.iter().copied().collect(),
    };
    let text = serde_json::to_string_pretty(&cached).map_err(|e| CflError::Snapshot(e.to_string()))?;
    fs::write(&path, text)?;
    Ok(r)
}

/// One `(algorithm, α, ε)` combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub algorithm: Algorithm,
    pub alpha: f64,
    /// `None` for the gradient baselines.
    pub epsilon: Option<EpsilonSchedule>,
    /// Chosen step size for the gradient baselines.
    pub stepsize: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    /// One entry per repeat; `Err` holds the failure message.
    pub repeats: Vec<std::result::Result<Vec<TraceRecord>, String>>,
    /// Mean over the successful repeats.
    pub mean: Vec<TraceRecord>,
    /// For tuned baselines: `(step size, score)` for every grid point.
    pub tuning: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub header: Vec<(String, String)>,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn cell(&self, algorithm: Algorithm, alpha: f64, epsilon: Option<EpsilonSchedule>) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.key.algorithm == algorithm && c.key.alpha == alpha && c.key.epsilon == epsilon)
    }
}

fn run_repeats<F>(repeats: usize, f: F) -> Vec<std::result::Result<Vec<TraceRecord>, String>>
where
    F: Fn(usize) -> Result<Vec<TraceRecord>> + Sync,
{
    (0..repeats)
        .into_par_iter()
        .map(|r| f(r).map_err(|e| e.to_string()))
        .collect()
}

fn successful_mean(repeats: &[std::result::Result<Vec<TraceRecord>, String>]) -> Vec<TraceRecord> {
    let ok: Vec<Vec<TraceRecord>> = repeats.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    mean_trace(&ok)
}

/// Tuning score of a mean trace: iterations to reach `target`, or, when the
/// target is never reached, the trace length plus the final gap (diverged
/// or failed runs score infinity).
pub fn tuning_score(mean: &[TraceRecord], target: f64) -> f64 {
    let Some(last) = mean.last() else {
        return f64::INFINITY;
    };
    if mean.iter().any(|r| !r.optimality_gap.is_finite()) {
        return f64::INFINITY;
    }
    match iterations_to_reach(mean, target) {
        Some(k) => k as f64,
        None => mean.len() as f64 + last.optimality_gap,
    }
}

/// Runs every cell of `config` on `instance`.
pub fn run_on_instance(config: &ExperimentConfig, instance: &Instance) -> Result<ExperimentResult> {
    config.validate()?;
    let ctx = instance.context();
    let timing = config.timing;
    let mut cells = Vec::new();
    for &algorithm in &config.algorithms {
        for &alpha in &config.alphas {
            match algorithm {
                Algorithm::CflAdmm => {
                    for &epsilon in &config.epsilons {
                        let repeats = run_repeats(config.repeats, |r| {
                            run_cfl(&ctx, &config.run_config(alpha, epsilon, r), timing, |_, _| {})
                        });
                        cells.push(CellResult {
                            key: CellKey {
                                algorithm,
                                alpha,
                                epsilon: Some(epsilon),
                                stepsize: None,
                            },
                            mean: successful_mean(&repeats),
                            repeats,
                            tuning: Vec::new(),
                        });
                    }
                }
                Algorithm::GtSaga | Algorithm::DSgd => {
                    let mut best: Option<(f64, f64, Vec<_>)> = None;
                    let mut tuning = Vec::new();
                    for &stepsize in &config.stepsizes {
                        let repeats = run_repeats(config.repeats, |r| {
                            let run = BaselineRun {
                                stepsize,
                                alpha,
                                iterations: config.iterations,
                                seed: config.run_config(alpha, config.epsilons[0], r).seed,
                            };
                            if algorithm == Algorithm::GtSaga {
                                run_gt_saga(&ctx, &run, timing)
                            } else {
                                run_dsgd(&ctx, &run, timing)
                            }
                        });
                        let score = if repeats.iter().all(|r| r.is_ok()) {
                            tuning_score(&successful_mean(&repeats), config.tuning_target)
                        } else {
                            f64::INFINITY
                        };
                        tuning.push((stepsize, score));
                        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                            best = Some((score, stepsize, repeats));
                        }
                    }
                    let (_, stepsize, repeats) = best.expect("nonempty grid");
                    cells.push(CellResult {
                        key: CellKey {
                            algorithm,
                            alpha,
                            epsilon: None,
                            stepsize: Some(stepsize),
                        },
                        mean: successful_mean(&repeats),
                        repeats,
                        tuning,
                    });
                }
            }
        }
    }

    let mut header = vec![("experiment".to_string(), config.name.clone())];
    header.extend(instance.description.iter().cloned());
    header.extend([
        ("sigma1".into(), format_float(config.sigma1)),
        ("sigma2".into(), format_float(config.sigma2)),
        ("d_matrix".into(), "(1/a)(1/a^2-1)(sigma1/sigma2)|S_i| + 1.5 deg(i)".into()),
        ("inner_solver".into(), format!("gradient descent, step 1/(L+sigma1), warm start, max_inner={}", config.max_inner)),
        ("seed".into(), config.seed.unwrap_or(0).to_string()),
        ("repeats".into(), config.repeats.to_string()),
        ("iterations".into(), config.iterations.to_string()),
        (
            "stepsize_grid".into(),
            config.stepsizes.iter().map(|s| format_float(*s)).collect::<Vec<_>>().join(" "),
        ),
        ("tuning_target".into(), format_float(config.tuning_target)),
    ]);
    Ok(ExperimentResult { header, cells })
}

/// Builds the instance (with `x*` cached next to the output) and runs it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let cache = config.cache_dir.clone().unwrap_or_else(|| config.resolved_output_dir());
    let instance = Instance::build_with_cache(config, Some(&cache))?;
    run_on_instance(config, &instance)
}

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub const CSV_COLUMNS: [&str; 13] = [
    "algorithm",
    "alpha",
    "epsilon",
    "stepsize",
    "repeat",
    "iteration",
    "optimality_gap",
    "global_objective",
    "consensus_user_es",
    "consensus_es_es",
    "cumulative_messages",
    "wall_time",
    "status",
];

/// Renders the full experiment as CSV text: header comments, then one row
/// per iteration for every repeat and for the per-cell mean
/// (`repeat = mean`). A failed repeat becomes a single `status = failed` row.
pub fn render_csv(result: &ExperimentResult) -> Result<String> {
    let mut out = String::new();
    for (k, v) in &result.header {
        writeln!(out, "# {k}: {v}").expect("write to string");
    }
    for cell in &result.cells {
        if !cell.tuning.is_empty() {
            let grid: Vec<String> = cell
                .tuning
                .iter()
                .map(|(s, score)| format!("{}={}", format_float(*s), format_float(*score)))
                .collect();
            writeln!(
                out,
                "# tuning {} alpha={}: {}",
                cell.key.algorithm.name(),
                format_float(cell.key.alpha),
                grid.join(" ")
            )
            .expect("write to string");
        }
    }

    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for cell in &result.cells {
        let key = &cell.key;
        let prefix = [
            key.algorithm.name().to_string(),
            format_float(key.alpha),
            key.epsilon.map_or("-".into(), |e| e.describe()),
            key.stepsize.map_or("-".into(), format_float),
        ];
        let write_rows = |w: &mut csv::Writer<Vec<u8>>, label: String, trace: &[TraceRecord]| -> Result<()> {
            for r in trace {
                let mut row: Vec<String> = prefix.to_vec();
                row.push(label.clone());
                row.push(r.iteration.to_string());
                for v in [
                    r.optimality_gap,
                    r.global_objective,
                    r.consensus_user_es,
                    r.consensus_es_es,
                    r.cumulative_messages,
                    r.wall_time,
                ] {
                    row.push(format_float(v));
                }
                row.push("ok".into());
                w.write_record(&row)?;
            }
            Ok(())
        };
        for (rep, trace) in cell.repeats.iter().enumerate() {
            match trace {
                Ok(t) => write_rows(&mut w, rep.to_string(), t)?,
                Err(msg) => {
                    let mut row: Vec<String> = prefix.to_vec();
                    row.push(rep.to_string());
                    row.extend(std::iter::repeat_n(String::new(), 7));
                    row.push(format!("failed: {msg}"));
                    w.write_record(&row)?;
                }
            }
        }
        write_rows(&mut w, "mean".into(), &cell.mean)?;
    }
    let bytes = w.into_inner().map_err(|e| CflError::Io(e.into_error()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Writes `<dir>/<name>.csv` and returns its path.
pub fn write_trace(result: &ExperimentResult, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, render_csv(result)?)?;
    Ok(path)
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the core invariants on a tiny built-in instance.
pub fn check_invariants() -> Result<Vec<CheckOutcome>> {
    use crate::topology::{build_p_matrix, d_condition_margin, incidence_matrix, p_condition_margin, PSD_TOLERANCE};

    let config = ExperimentConfig {
        name: "check".into(),
        topology: TopologySpec::Ring {
            servers: 3,
            users_per_server: 3,
        },
        data: DataConfig {
            synthetic: Some(SyntheticSpec {
                num_samples: 60,
                dim: 4,
                label_noise: 0.1,
                seed: 1,
            }),
            csv: None,
            per_user: 5,
            ridge: default_ridge(),
            partition_seed: 1,
        },
        alphas: vec![0.5],
        iterations: 40,
        repeats: 1,
        seed: Some(3),
        ..ExperimentConfig::desk()
    };
    let instance = Instance::build(&config)?;
    let g = &instance.graph;
    let n = instance.dim;
    let run = config.run_config(0.5, EpsilonSchedule::Decreasing, 0);
    let d = build_d_matrix(g, run.alpha, run.sigma1, run.sigma2, n)?;
    let p = build_p_matrix(g, &d, run.alpha)?;
    let mut out = Vec::new();

    let dm = d_condition_margin(g, &d, run.alpha, run.sigma1, run.sigma2);
    let pm = p_condition_margin(g, &p, run.alpha, run.sigma1, run.sigma2);
    out.push(CheckOutcome {
        name: "proximal matrix conditions",
        passed: dm >= PSD_TOLERANCE && pm >= PSD_TOLERANCE,
        detail: format!("min eig D-margin {dm:.3e}, P-margin {pm:.3e}"),
    });

    let a = incidence_matrix(g, n);
    let mut state = CflState::new(g, n);
    let mut acc_err: f64 = 0.0;
    let mut dual_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    for _ in 0..config.iterations {
        let before = state.clone();
        cfl_admm::step(&mut state, &instance.objectives, g, &d, &run)?;
        let at_beta = a.base.transpose();
        for i in 0..g.num_servers() {
            let mut central = Vector::zeros(n);
            for e in 0..g.num_edges() {
                central.axpy(at_beta[(i, e)], &state.beta[e], 1.0);
            }
            acc_err = acc_err.max((&central - &state.laplacian_accumulator[i]).amax());
            let mut lambda_sum = Vector::zeros(n);
            for j in 0..g.users(i) {
                let u = g.user_index(i, j);
                lambda_sum += &state.lambda[u];
                let expect = (&state.x[u] - &state.y[i]) * (run.alpha * run.sigma1);
                dual_err = dual_err.max((&state.lambda[u] - &before.lambda[u] - expect).amax());
            }
            sum_err = sum_err.max((lambda_sum - &state.dual_sum[i]).amax());
        }
    }
    out.push(CheckOutcome {
        name: "accumulator matches central A^T beta",
        passed: acc_err <= 1e-10,
        detail: format!("max error {acc_err:.3e}"),
    });
    out.push(CheckOutcome {
        name: "dual identity",
        passed: dual_err <= 1e-12,
        detail: format!("max error {dual_err:.3e}"),
    });
    out.push(CheckOutcome {
        name: "unfolded dual sum matches H lambda",
        passed: sum_err <= 1e-10,
        detail: format!("max error {sum_err:.3e}"),
    });

    let x_star = &instance.reference.x;
    let mut fd_err: f64 = 0.0;
    for (u, obj) in instance.objectives.iter().enumerate().take(5) {
        let x = x_star + Vector::from_fn(n, |r, _| 0.1 * ((u + r) as f64).sin());
        let g = obj.gradient(&x)?;
        let h = 1e-6;
        for r in 0..n {
            let mut e = Vector::zeros(n);
            e[r] = h;
            let fd = (obj.loss(&(&x + &e))? - obj.loss(&(&x - &e))?) / (2.0 * h);
            fd_err = fd_err.max((fd - g[r]).abs() / g.norm().max(1.0));
        }
    }
    out.push(CheckOutcome {
        name: "gradient vs finite differences",
        passed: fd_err <= 1e-6,
        detail: format!("max relative error {fd_err:.3e}"),
    });

    let trace = run_cfl(&instance.context(), &RunConfig { max_iterations: 600, ..run }, false, |_, _| {})?;
    let last = trace.last().expect("nonempty");
    out.push(CheckOutcome {
        name: "convergence on tiny instance",
        passed: last.optimality_gap <= 1e-6,
        detail: format!("gap after 600 iterations {:.3e}", last.optimality_gap),
    });
    Ok(out)
}
