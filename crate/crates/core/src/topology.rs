//! Edge-server communication graph and the matrices derived from it.
//!
//! Every matrix acting on stacked server variables is a Kronecker product
//! `base ⊗ I_n`. Only the `l×l` (or `|E|×l`) base is stored; [`BlockMatrix`]
//! applies it block by block so the `nl × nl` form is never built.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::Vector;

/// Tolerance on the smallest eigenvalue when certifying a matrix PSD.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Undirected, connected graph of edge servers with per-server user counts.
///
/// Edges are stored with canonical orientation `(tail, head)`, `tail < head`.
/// The tail receives `+1` in the incidence matrix and the head `-1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct EsGraph {
    num_servers: usize,
    edges: Vec<(usize, usize)>,
    users_per_server: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    user_offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphSpec {
    num_servers: usize,
    edges: Vec<(usize, usize)>,
    users_per_server: Vec<usize>,
}

impl TryFrom<GraphSpec> for EsGraph {
    type Error = CflError;
    fn try_from(spec: GraphSpec) -> Result<Self> {
        EsGraph::new(spec.num_servers, spec.edges, spec.users_per_server)
    }
}

impl From<EsGraph> for GraphSpec {
    fn from(g: EsGraph) -> Self {
        GraphSpec {
            num_servers: g.num_servers,
            edges: g.edges,
            users_per_server: g.users_per_server,
        }
    }
}

impl EsGraph {
    /// Validates and canonicalizes a server graph.
    ///
    /// Rejects self-loops, duplicate edges (in either orientation),
    /// out-of-range endpoints, servers without users and disconnected graphs.
    pub fn new(
        num_servers: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        users_per_server: Vec<usize>,
    ) -> Result<Self> {
        if num_servers == 0 {
            return Err(CflError::InvalidGraph("no servers".into()));
        }
        if users_per_server.len() != num_servers {
            return Err(CflError::InvalidGraph(format!(
                "{} user counts for {} servers",
                users_per_server.len(),
                num_servers
            )));
        }
        if let Some(i) = users_per_server.iter().position(|&u| u == 0) {
            return Err(CflError::InvalidGraph(format!("server {i} has no users")));
        }

        let mut seen = BTreeSet::new();
        let mut canonical = Vec::new();
        for (a, b) in edges {
            if a >= num_servers || b >= num_servers {
                return Err(CflError::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_servers} servers"
                )));
            }
            if a == b {
                return Err(CflError::InvalidGraph(format!("self-loop at {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(CflError::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    e.0, e.1
                )));
            }
            canonical.push(e);
        }

        let mut neighbors = vec![Vec::new(); num_servers];
        for &(a, b) in &canonical {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        if !is_connected(&neighbors) {
            return Err(CflError::Disconnected);
        }

        let mut user_offsets = Vec::with_capacity(num_servers + 1);
        let mut acc = 0;
        user_offsets.push(0);
        for &u in &users_per_server {
            acc += u;
            user_offsets.push(acc);
        }

        Ok(Self {
            num_servers,
            edges: canonical,
            users_per_server,
            neighbors,
            user_offsets,
        })
    }

    /// Cycle `0 - 1 - … - (l-1) - 0`. Degenerates to a path for `l < 3`.
    pub fn ring(num_servers: usize, users: usize) -> Result<Self> {
        let edges: Vec<_> = if num_servers < 3 {
            (1..num_servers).map(|i| (i - 1, i)).collect()
        } else {
            (0..num_servers).map(|i| (i, (i + 1) % num_servers)).collect()
        };
        Self::new(num_servers, edges, vec![users; num_servers])
    }

    pub fn path(num_servers: usize, users: usize) -> Result<Self> {
        Self::new(
            num_servers,
            (1..num_servers).map(|i| (i - 1, i)),
            vec![users; num_servers],
        )
    }

    /// Star centered on server 0.
    pub fn star(num_servers: usize, users: usize) -> Result<Self> {
        Self::new(
            num_servers,
            (1..num_servers).map(|i| (0, i)),
            vec![users; num_servers],
        )
    }

    /// Erdős–Rényi graph `G(l, p)`, redrawn until connected.
    pub fn erdos_renyi(num_servers: usize, p: f64, users: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(CflError::InvalidParameter(format!(
                "edge probability {p} outside [0, 1]"
            )));
        }
        const MAX_ATTEMPTS: usize = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_ATTEMPTS {
            let mut edges = Vec::new();
            for a in 0..num_servers {
                for b in (a + 1)..num_servers {
                    if rng.random_bool(p) {
                        edges.push((a, b));
                    }
                }
            }
            match Self::new(num_servers, edges, vec![users; num_servers]) {
                Ok(g) => return Ok(g),
                Err(CflError::Disconnected) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(CflError::InvalidParameter(format!(
            "no connected G({num_servers}, {p}) found after {MAX_ATTEMPTS} draws"
        )))
    }

    pub fn num_servers(&self) -> usize {
        self.num_servers
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn users_per_server(&self) -> &[usize] {
        &self.users_per_server
    }

    pub fn users(&self, server: usize) -> usize {
        self.users_per_server[server]
    }

    pub fn total_users(&self) -> usize {
        self.user_offsets[self.num_servers]
    }

    /// Flat index of user `(server, user)` in server-major order.
    pub fn user_index(&self, server: usize, user: usize) -> usize {
        self.user_offsets[server] + user
    }

    pub fn neighbors(&self, server: usize) -> &[usize] {
        &self.neighbors[server]
    }

    pub fn degree(&self, server: usize) -> usize {
        self.neighbors[server].len()
    }

    /// Short human-readable description, used in trace headers.
    pub fn describe(&self) -> String {
        let edges: Vec<String> = self
            .edges
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        format!(
            "servers={} edges=[{}] users=[{}]",
            self.num_servers,
            edges.join(" "),
            self.users_per_server
                .iter()
                .map(|u| u.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )
    }
}

fn is_connected(neighbors: &[Vec<usize>]) -> bool {
    let mut visited = vec![false; neighbors.len()];
    let mut queue = VecDeque::from([0]);
    visited[0] = true;
    let mut count = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &neighbors[v] {
            if !visited[w] {
                visited[w] = true;
                count += 1;
                queue.push_back(w);
            }
        }
    }
    count == neighbors.len()
}

/// A matrix of the form `base ⊗ I_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub base: DMatrix<f64>,
    pub block_dim: usize,
}

impl BlockMatrix {
    pub fn new(base: DMatrix<f64>, block_dim: usize) -> Self {
        Self { base, block_dim }
    }

    /// Computes `(base ⊗ I_n) v` where `v` is given as one block per column.
    pub fn apply(&self, blocks: &[Vector]) -> Result<Vec<Vector>> {
        if blocks.len() != self.base.ncols() {
            return Err(CflError::DimensionMismatch {
                expected: self.base.ncols(),
                found: blocks.len(),
            });
        }
        for b in blocks {
            if b.len() != self.block_dim {
                return Err(CflError::DimensionMismatch {
                    expected: self.block_dim,
                    found: b.len(),
                });
            }
        }
        Ok((0..self.base.nrows())
            .map(|r| {
                let mut out = Vector::zeros(self.block_dim);
                for (c, b) in blocks.iter().enumerate() {
                    let w = self.base[(r, c)];
                    if w != 0.0 {
                        out.axpy(w, b, 1.0);
                    }
                }
                out
            })
            .collect())
    }

    /// Diagonal of the base, for diagonal block matrices.
    pub fn diagonal(&self) -> Vec<f64> {
        self.base.diagonal().iter().copied().collect()
    }

    /// Expands to the full `(rows·n) × (cols·n)` matrix. Test-oracle use only.
    pub fn materialize(&self) -> DMatrix<f64> {
        self.base.kronecker(&DMatrix::identity(self.block_dim, self.block_dim))
    }
}

/// Incidence matrix `A_in` (`|E| × l` base).
pub fn incidence_matrix(graph: &EsGraph, block_dim: usize) -> BlockMatrix {
    let mut base = DMatrix::zeros(graph.num_edges(), graph.num_servers());
    for (e, &(tail, head)) in graph.edges().iter().enumerate() {
        base[(e, tail)] = 1.0;
        base[(e, head)] = -1.0;
    }
    BlockMatrix::new(base, block_dim)
}

/// Graph Laplacian `A_in^T A_in`, built directly from the edge list.
pub fn laplacian(graph: &EsGraph, block_dim: usize) -> BlockMatrix {
    let l = graph.num_servers();
    let mut base = DMatrix::zeros(l, l);
    for &(a, b) in graph.edges() {
        base[(a, a)] += 1.0;
        base[(b, b)] += 1.0;
        base[(a, b)] -= 1.0;
        base[(b, a)] -= 1.0;
    }
    BlockMatrix::new(base, block_dim)
}

/// Diagonal degree matrix `D_L`.
pub fn degree_matrix(graph: &EsGraph, block_dim: usize) -> BlockMatrix {
    let degrees: Vec<f64> = (0..graph.num_servers())
        .map(|i| graph.degree(i) as f64)
        .collect();
    BlockMatrix::new(DMatrix::from_diagonal(&Vector::from_vec(degrees)), block_dim)
}

/// Diagonal matrix of user counts, `H_dig H_dig^T`.
pub fn user_count_matrix(graph: &EsGraph, block_dim: usize) -> BlockMatrix {
    let counts: Vec<f64> = graph.users_per_server().iter().map(|&u| u as f64).collect();
    BlockMatrix::new(DMatrix::from_diagonal(&Vector::from_vec(counts)), block_dim)
}

fn check_params(alpha: f64, sigma1: f64, sigma2: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CflError::InvalidParameter(format!(
            "selection probability {alpha} outside (0, 1]"
        )));
    }
    if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
        return Err(CflError::InvalidParameter(format!(
            "penalties must be positive and finite (sigma1={sigma1}, sigma2={sigma2})"
        )));
    }
    Ok(())
}

/// Weight on `H H^T` that the proximal matrix `D` must dominate:
/// `(1/α)(1/α² − 1)(σ1/σ2)`.
pub fn user_weight(alpha: f64, sigma1: f64, sigma2: f64) -> f64 {
    (1.0 / alpha) * (1.0 / (alpha * alpha) - 1.0) * (sigma1 / sigma2)
}

/// Diagonal proximal matrix
/// `D = (1/α)(1/α² − 1)(σ1/σ2) H_dig H_dig^T + (3/2) D_L`.
pub fn build_d_matrix(
    graph: &EsGraph,
    alpha: f64,
    sigma1: f64,
    sigma2: f64,
    block_dim: usize,
) -> Result<BlockMatrix> {
    check_params(alpha, sigma1, sigma2)?;
    let w = user_weight(alpha, sigma1, sigma2);
    let diag: Vec<f64> = (0..graph.num_servers())
        .map(|i| w * graph.users(i) as f64 + 1.5 * graph.degree(i) as f64)
        .collect();
    Ok(BlockMatrix::new(
        DMatrix::from_diagonal(&Vector::from_vec(diag)),
        block_dim,
    ))
}

/// `P = α (D − A^T A)`.
pub fn build_p_matrix(graph: &EsGraph, d: &BlockMatrix, alpha: f64) -> Result<BlockMatrix> {
    let l = graph.num_servers();
    if d.base.shape() != (l, l) {
        return Err(CflError::InvalidParameter(format!(
            "D is {:?}, graph has {l} servers",
            d.base.shape()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CflError::InvalidParameter(format!(
            "selection probability {alpha} outside (0, 1]"
        )));
    }
    let lap = laplacian(graph, d.block_dim);
    Ok(BlockMatrix::new((&d.base - lap.base) * alpha, d.block_dim))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    min_eigenvalue(m) >= PSD_TOLERANCE
}

/// Smallest eigenvalue of `D − (1/α)(1/α²−1)(σ1/σ2) H H^T − (3/4) A^T A`.
pub fn d_condition_margin(
    graph: &EsGraph,
    d: &BlockMatrix,
    alpha: f64,
    sigma1: f64,
    sigma2: f64,
) -> f64 {
    let hh = user_count_matrix(graph, 1).base;
    let lap = laplacian(graph, 1).base;
    let m = &d.base - hh * user_weight(alpha, sigma1, sigma2) - lap * 0.75;
    min_eigenvalue(&m)
}

/// Smallest eigenvalue of `P − (1/α² − 1)(σ1/σ2) H H^T + (α/4) A^T A`.
pub fn p_condition_margin(
    graph: &EsGraph,
    p: &BlockMatrix,
    alpha: f64,
    sigma1: f64,
    sigma2: f64,
) -> f64 {
    let hh = user_count_matrix(graph, 1).base;
    let lap = laplacian(graph, 1).base;
    let m = &p.base - hh * ((1.0 / (alpha * alpha) - 1.0) * sigma1 / sigma2) + lap * (alpha / 4.0);
    min_eigenvalue(&m)
}

/// Every matrix the decentralized y-update needs, built once per run.
#[derive(Debug, Clone)]
pub struct TopologyMatrices {
    pub incidence: BlockMatrix,
    pub laplacian: BlockMatrix,
    pub degree: BlockMatrix,
    pub d: BlockMatrix,
    pub p: BlockMatrix,
}

impl TopologyMatrices {
    pub fn new(
        graph: &EsGraph,
        alpha: f64,
        sigma1: f64,
        sigma2: f64,
        block_dim: usize,
    ) -> Result<Self> {
        let d = build_d_matrix(graph, alpha, sigma1, sigma2, block_dim)?;
        let p = build_p_matrix(graph, &d, alpha)?;
        Ok(Self {
            incidence: incidence_matrix(graph, block_dim),
            laplacian: laplacian(graph, block_dim),
            degree: degree_matrix(graph, block_dim),
            d,
            p,
        })
    }
}
