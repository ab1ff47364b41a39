//! User objectives, the inexact proximal solver, data ingestion and the
//! centralized reference solution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::topology::EsGraph;
use crate::Vector;

/// Ridge weight used for the logistic experiments.
pub const DEFAULT_RIDGE: f64 = 0.01;

/// A smooth, strongly convex per-user loss.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, x: &Vector) -> Result<f64>;
    fn gradient(&self, x: &Vector) -> Result<Vector>;
    /// Strong-convexity modulus.
    fn mu(&self) -> f64;
    /// Upper bound on the gradient Lipschitz constant.
    fn lipschitz(&self) -> f64;
}

fn check_dim(expected: usize, x: &Vector) -> Result<()> {
    if x.len() != expected {
        return Err(CflError::DimensionMismatch {
            expected,
            found: x.len(),
        });
    }
    Ok(())
}

/// One labelled example. The last feature is the constant bias `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vector,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vector, label: f64) -> Result<Self> {
        if label != 0.0 && label != 1.0 {
            return Err(CflError::InvalidParameter(format!(
                "label {label} is not binary"
            )));
        }
        Ok(Self { features, label })
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ℓ2-regularized logistic loss of one user:
/// `κ/2 ‖x‖² + Σ [softplus(ωᵀx) − y ωᵀx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalObjective {
    dim: usize,
    samples: Vec<Sample>,
    ridge_weight: f64,
    lipschitz: f64,
}

impl LocalObjective {
    pub fn new(dim: usize, samples: Vec<Sample>, ridge_weight: f64) -> Result<Self> {
        if dim == 0 {
            return Err(CflError::InvalidParameter("model dimension is zero".into()));
        }
        if !(ridge_weight > 0.0 && ridge_weight.is_finite()) {
            return Err(CflError::InvalidParameter(format!(
                "ridge weight {ridge_weight} must be positive for strong convexity"
            )));
        }
        for s in &samples {
            check_dim(dim, &s.features)?;
        }
        let lipschitz = ridge_weight
            + 0.25
                * samples
                    .iter()
                    .map(|s| s.features.norm_squared())
                    .sum::<f64>();
        Ok(Self {
            dim,
            samples,
            ridge_weight,
            lipschitz,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ridge_weight(&self) -> f64 {
        self.ridge_weight
    }
}

impl Objective for LocalObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim, x)?;
        let data: f64 = self
            .samples
            .iter()
            .map(|s| {
                let z = s.features.dot(x);
                softplus(z) - s.label * z
            })
            .sum();
        Ok(0.5 * self.ridge_weight * x.norm_squared() + data)
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x)?;
        let mut g = x * self.ridge_weight;
        for s in &self.samples {
            let z = s.features.dot(x);
            g.axpy(sigmoid(z) - s.label, &s.features, 1.0);
        }
        Ok(g)
    }

    fn mu(&self) -> f64 {
        self.ridge_weight
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

/// Separable quadratic `½ Σ_r q_r (x_r − c_r)²`, used where closed forms
/// are needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalQuadratic {
    pub curvature: Vector,
    pub center: Vector,
}

impl DiagonalQuadratic {
    pub fn new(curvature: Vector, center: Vector) -> Result<Self> {
        check_dim(curvature.len(), &center)?;
        if curvature.is_empty() || curvature.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            return Err(CflError::InvalidParameter(
                "quadratic curvature must be positive".into(),
            ));
        }
        Ok(Self { curvature, center })
    }

    /// `(μ/2)‖x‖²`.
    pub fn isotropic(dim: usize, mu: f64) -> Result<Self> {
        Self::new(Vector::from_element(dim, mu), Vector::zeros(dim))
    }

    /// Exact minimizer of `f(x) + ⟨λ, x⟩ + (σ/2)‖x − y‖²`.
    pub fn prox_closed_form(&self, y: &Vector, lambda: &Vector, sigma: f64) -> Vector {
        Vector::from_fn(self.center.len(), |r, _| {
            (self.curvature[r] * self.center[r] - lambda[r] + sigma * y[r])
                / (self.curvature[r] + sigma)
        })
    }
}

impl Objective for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(0.5
            * x.iter()
                .zip(self.center.iter())
                .zip(self.curvature.iter())
                .map(|((x, c), q)| q * (x - c) * (x - c))
                .sum::<f64>())
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x)?;
        Ok((x - &self.center).component_mul(&self.curvature))
    }

    fn mu(&self) -> f64 {
        self.curvature.min()
    }

    fn lipschitz(&self) -> f64 {
        self.curvature.max()
    }
}

/// Outcome of an inexact proximal solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub point: Vector,
    pub residual_norm: f64,
    pub inner_iterations: usize,
}

/// Stationarity residual of the user subproblem,
/// `τ = ∇f(x) + λ + σ1 (x − y)`.
pub fn prox_residual<O: Objective + ?Sized>(
    obj: &O,
    x: &Vector,
    y: &Vector,
    lambda: &Vector,
    sigma1: f64,
) -> Result<Vector> {
    let mut r = obj.gradient(x)?;
    r += lambda;
    r.axpy(sigma1, x, 1.0);
    r.axpy(-sigma1, y, 1.0);
    Ok(r)
}

/// Relative tolerance standing in for an exact solve (`epsilon == 0`).
pub const EXACT_SOLVE_RTOL: f64 = 1e-12;

/// Approximately minimizes `f(x) + ⟨λ, x⟩ + (σ1/2)‖x − y‖²` by fixed-step
/// gradient descent (step `1/(L + σ1)`) from `warm_start`, stopping once
/// the residual norm is at most `epsilon`.
///
/// `epsilon == 0` is treated as `1e-12 · (1 + ‖τ(warm_start)‖)`.
pub fn prox_solve<O: Objective + ?Sized>(
    obj: &O,
    warm_start: &Vector,
    y: &Vector,
    lambda: &Vector,
    sigma1: f64,
    epsilon: f64,
    max_inner: usize,
) -> Result<ProxResult> {
    let n = obj.dim();
    check_dim(n, warm_start)?;
    check_dim(n, y)?;
    check_dim(n, lambda)?;
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(CflError::InvalidParameter(format!(
            "accuracy {epsilon} must be nonnegative"
        )));
    }
    if sigma1.is_nan() || sigma1 <= 0.0 {
        return Err(CflError::InvalidParameter(format!(
            "sigma1 {sigma1} must be positive"
        )));
    }

    let step = 1.0 / (obj.lipschitz() + sigma1);
    let mut x = warm_start.clone();
    let mut r = prox_residual(obj, &x, y, lambda, sigma1)?;
    let mut norm = r.norm();
    let tol = if epsilon == 0.0 {
        EXACT_SOLVE_RTOL * (1.0 + norm)
    } else {
        epsilon
    };
    let mut best = norm;
    let mut iterations = 0;
    while norm > tol {
        if iterations == max_inner {
            return Err(CflError::NonConvergence {
                solver: "proximal gradient descent",
                iterations,
                best_residual: best,
            });
        }
        x.axpy(-step, &r, 1.0);
        iterations += 1;
        r = prox_residual(obj, &x, y, lambda, sigma1)?;
        norm = r.norm();
        best = best.min(norm);
    }
    Ok(ProxResult {
        point: x,
        residual_norm: norm,
        inner_iterations: iterations,
    })
}

/// Options for [`load_labeled_csv`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Skip the first row.
    pub has_header: bool,
    /// Required number of entries per row (features + label).
    pub expected_columns: Option<usize>,
}

/// Loads comma-separated rows `f_1, …, f_m, label`.
///
/// Each feature column is min-max scaled to `[0, 1]` over the whole file
/// (constant columns become `0`) and a bias `1.0` is appended, so samples
/// have dimension `m + 1`.
pub fn load_labeled_csv(path: impl AsRef<Path>, options: CsvOptions) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let first_row = usize::from(options.has_header);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = options.expected_columns;
    for (idx, record) in reader.records().enumerate() {
        let row = first_row + idx;
        let record = record?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected || expected < 2 {
            return Err(CflError::Data {
                row,
                message: format!("expected {expected} entries, found {}", record.len()),
            });
        }
        let values = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| CflError::Data {
                    row,
                    message: format!("non-numeric entry {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CflError::Data {
                row,
                message: "non-finite entry".into(),
            });
        }
        let label = values[expected - 1];
        if label != 0.0 && label != 1.0 {
            return Err(CflError::Data {
                row,
                message: format!("label {label} is not binary"),
            });
        }
        labels.push(label);
        rows.push(values[..expected - 1].to_vec());
    }

    let Some(num_features) = rows.first().map(Vec::len) else {
        return Ok(Vec::new());
    };
    let mut lo = vec![f64::INFINITY; num_features];
    let mut hi = vec![f64::NEG_INFINITY; num_features];
    for row in &rows {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }

    Ok(rows
        .into_iter()
        .zip(labels)
        .map(|(row, label)| {
            let features = Vector::from_fn(num_features + 1, |c, _| {
                if c == num_features {
                    1.0
                } else if hi[c] > lo[c] {
                    (row[c] - lo[c]) / (hi[c] - lo[c])
                } else {
                    0.0
                }
            });
            Sample { features, label }
        })
        .collect())
}

/// Loads the 24-column credit-default layout: 23 features then a label.
pub fn load_credit_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Vec<Sample>> {
    load_labeled_csv(
        path,
        CsvOptions {
            has_header,
            expected_columns: Some(24),
        },
    )
}

/// Seeded synthetic logistic data: Gaussian features, a planted separator
/// and random label flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    /// Model dimension including the bias coordinate.
    pub dim: usize,
    /// Probability of flipping each label.
    pub label_noise: f64,
    pub seed: u64,
}

pub fn synthetic_samples(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.dim < 2 {
        return Err(CflError::InvalidParameter(
            "synthetic dimension must be at least 2 (features + bias)".into(),
        ));
    }
    if !(0.0..=0.5).contains(&spec.label_noise) {
        return Err(CflError::InvalidParameter(format!(
            "label noise {} outside [0, 0.5]",
            spec.label_noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let planted = Vector::from_fn(spec.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((0..spec.num_samples)
        .map(|_| {
            let features = Vector::from_fn(spec.dim, |c, _| {
                if c + 1 == spec.dim {
                    1.0
                } else {
                    rng.sample(StandardNormal)
                }
            });
            let mut label = f64::from(features.dot(&planted) > 0.0);
            if rng.random_bool(spec.label_noise) {
                label = 1.0 - label;
            }
            Sample { features, label }
        })
        .collect())
}

/// Per-user sample shards indexed `[server][user]`.
pub type Shards = Vec<Vec<Vec<Sample>>>;

/// Shuffles with `seed` and deals `per_user` consecutive samples to users
/// `u_11, u_12, …` in server-major order.
pub fn partition(samples: &[Sample], graph: &EsGraph, per_user: usize, seed: u64) -> Result<Shards> {
    if per_user == 0 {
        return Err(CflError::InvalidParameter(
            "every user must hold at least one sample".into(),
        ));
    }
    let needed = per_user * graph.total_users();
    if needed > samples.len() {
        return Err(CflError::InsufficientSamples {
            needed,
            available: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut next = order.into_iter().take(needed);
    Ok((0..graph.num_servers())
        .map(|i| {
            (0..graph.users(i))
                .map(|_| {
                    next.by_ref()
                        .take(per_user)
                        .map(|k| samples[k].clone())
                        .collect()
                })
                .collect()
        })
        .collect())
}

/// Builds one logistic objective per user, flattened in server-major order.
pub fn logistic_objectives(shards: &Shards, dim: usize, ridge: f64) -> Result<Vec<LocalObjective>> {
    shards
        .iter()
        .flatten()
        .map(|s| LocalObjective::new(dim, s.clone(), ridge))
        .collect()
}

pub fn global_loss<O: Objective>(objectives: &[O], x: &Vector) -> Result<f64> {
    objectives.iter().map(|o| o.loss(x)).sum()
}

pub fn global_gradient<O: Objective>(objectives: &[O], x: &Vector) -> Result<Vector> {
    let mut g = Vector::zeros(x.len());
    for o in objectives {
        g += o.gradient(x)?;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x: Vector,
    pub gradient_norm: f64,
    pub iterations: usize,
}

pub const DEFAULT_REFERENCE_TOL: f64 = 1e-10;
const REFERENCE_MAX_ITERATIONS: usize = 1_000_000;

/// Minimizes `Σ f_ij(x)` until `‖∇‖ ≤ tol` using Nesterov-accelerated
/// gradient descent with step `1/Σ L_ij` and gradient-based restarts.
pub fn solve_reference<O: Objective>(objectives: &[O], tol: f64) -> Result<ReferenceSolution> {
    let Some(first) = objectives.first() else {
        return Err(CflError::InvalidParameter("no objectives".into()));
    };
    if tol.is_nan() || tol <= 0.0 {
        return Err(CflError::InvalidParameter(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let n = first.dim();
    let step = 1.0 / objectives.iter().map(|o| o.lipschitz()).sum::<f64>();

    let mut x = Vector::zeros(n);
    let mut z = x.clone();
    let mut t = 1.0_f64;
    let mut best = f64::INFINITY;
    for iterations in 0..REFERENCE_MAX_ITERATIONS {
        let gx = global_gradient(objectives, &x)?;
        let gx_norm = gx.norm();
        best = best.min(gx_norm);
        if gx_norm <= tol {
            return Ok(ReferenceSolution {
                x,
                gradient_norm: gx_norm,
                iterations,
            });
        }
        let gz = global_gradient(objectives, &z)?;
        let next = &z - &gz * step;
        // Restart momentum when it points uphill.
        if gz.dot(&(&next - &x)) > 0.0 {
            t = 1.0;
            z = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        t = t_next;
    }
    Err(CflError::NonConvergence {
        solver: "reference solver",
        iterations: REFERENCE_MAX_ITERATIONS,
        best_residual: best,
    })
}
