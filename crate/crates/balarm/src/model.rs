//! Core domain types and the logistic kernels shared by every other module.
//!
//! A model describes `G` edge clusters. Within cluster `g`, the state of an
//! edge at step `t` is Bernoulli with success probability
//! `inv_logit(eta)`, where `eta` is a linear predictor built from a harmonic
//! basis of the time of day, the `K` most recent edge states, and an
//! intercept. The types here are immutable after construction and safe to
//! share across threads; the kernels are pure functions.

use serde::{Deserialize, Serialize};

use crate::error::{BalarmError, Result};

/// Structural hyperparameters: cluster count, AR order, harmonic order, period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of edge clusters `G`, at least 1.
    pub n_clusters: usize,
    /// Autoregressive order `K` (number of lagged edge states in the predictor).
    pub ar_order: usize,
    /// Harmonic order `H`; the harmonic block of the predictor has `2H` terms.
    pub harmonic_order: usize,
    /// Period `P` in time steps (e.g. 288 five-minute steps per day).
    pub period: usize,
}

impl ModelSpec {
    /// Validated constructor.
    pub fn new(n_clusters: usize, ar_order: usize, harmonic_order: usize, period: usize) -> Result<Self> {
        let spec = Self { n_clusters, ar_order, harmonic_order, period };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(BalarmError::InvalidSpec("n_clusters must be at least 1".into()));
        }
        if self.period == 0 {
            return Err(BalarmError::InvalidSpec("period must be at least 1".into()));
        }
        if self.harmonic_order > 0 && self.period < 2 {
            return Err(BalarmError::InvalidSpec(
                "period must be at least 2 when harmonic terms are present".into(),
            ));
        }
        Ok(())
    }

    /// Length of the harmonic block of the predictor (`2H`).
    pub fn harmonic_dim(&self) -> usize {
        2 * self.harmonic_order
    }

    /// Length of a full covariate row: harmonics, lags, constant.
    pub fn covariate_dim(&self) -> usize {
        self.harmonic_dim() + self.ar_order + 1
    }
}

/// Coefficients of one cluster: harmonic block, AR block, intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Harmonic coefficients, interleaved as (cos 1, sin 1, cos 2, sin 2, ...).
    pub harmonic: Vec<f64>,
    /// Autoregressive coefficients for lags 1..K.
    pub ar: Vec<f64>,
    /// Intercept.
    pub intercept: f64,
}

impl ClusterParams {
    /// Constructs and checks finiteness.
    pub fn new(harmonic: Vec<f64>, ar: Vec<f64>, intercept: f64) -> Result<Self> {
        let params = Self { harmonic, ar, intercept };
        params.validate()?;
        Ok(params)
    }

    /// All-zero parameters with dimensions from `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self { harmonic: vec![0.0; spec.harmonic_dim()], ar: vec![0.0; spec.ar_order], intercept: 0.0 }
    }

    /// Checks that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        let finite =
            self.harmonic.iter().chain(self.ar.iter()).chain(std::iter::once(&self.intercept)).all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(BalarmError::InvalidParams("cluster parameters must be finite".into()))
        }
    }

    /// Checks dimensions against a spec.
    pub fn matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.harmonic.len() != spec.harmonic_dim() {
            return Err(BalarmError::DimensionMismatch(format!(
                "harmonic block has {} entries, spec wants {}",
                self.harmonic.len(),
                spec.harmonic_dim()
            )));
        }
        if self.ar.len() != spec.ar_order {
            return Err(BalarmError::DimensionMismatch(format!(
                "ar block has {} entries, spec wants {}",
                self.ar.len(),
                spec.ar_order
            )));
        }
        Ok(())
    }

    /// Flattens to the covariate-row coefficient layout: harmonics, lags, intercept.
    pub fn to_coefficients(&self) -> Vec<f64> {
        let mut coef = Vec::with_capacity(self.harmonic.len() + self.ar.len() + 1);
        coef.extend_from_slice(&self.harmonic);
        coef.extend_from_slice(&self.ar);
        coef.push(self.intercept);
        coef
    }

    /// Rebuilds from the flat coefficient layout.
    pub fn from_coefficients(coef: &[f64], spec: &ModelSpec) -> Result<Self> {
        if coef.len() != spec.covariate_dim() {
            return Err(BalarmError::DimensionMismatch(format!(
                "coefficient vector has {} entries, spec wants {}",
                coef.len(),
                spec.covariate_dim()
            )));
        }
        let h = spec.harmonic_dim();
        Self::new(coef[..h].to_vec(), coef[h..h + spec.ar_order].to_vec(), coef[h + spec.ar_order])
    }
}

/// A full mixture model: mixing weights plus one parameter set per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalarmModel {
    /// Structural hyperparameters.
    pub spec: ModelSpec,
    /// Mixing weights over clusters; non-negative, summing to 1.
    pub mixing: Vec<f64>,
    /// Per-cluster coefficients, in cluster order.
    pub clusters: Vec<ClusterParams>,
}

impl BalarmModel {
    /// Validated constructor.
    pub fn new(spec: ModelSpec, mixing: Vec<f64>, clusters: Vec<ClusterParams>) -> Result<Self> {
        let model = Self { spec, mixing, clusters };
        model.validate()?;
        Ok(model)
    }

    /// Checks mixing weights, cluster count, and per-cluster dimensions.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.mixing.len() != self.spec.n_clusters || self.clusters.len() != self.spec.n_clusters {
            return Err(BalarmError::DimensionMismatch(format!(
                "model has {} weights and {} clusters, spec wants {}",
                self.mixing.len(),
                self.clusters.len(),
                self.spec.n_clusters
            )));
        }
        if self.mixing.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(BalarmError::InvalidParams("mixing weights must be finite and non-negative".into()));
        }
        let total: f64 = self.mixing.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BalarmError::InvalidParams(format!("mixing weights sum to {total}, expected 1")));
        }
        for params in &self.clusters {
            params.validate()?;
            params.matches(&self.spec)?;
        }
        Ok(())
    }

    /// Number of clusters.
    pub fn n_clusters(&self) -> usize {
        self.spec.n_clusters
    }

    /// A copy with clusters reordered so new cluster `g` is old cluster `perm[g]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let g = self.n_clusters();
        let mut seen = vec![false; g];
        if perm.len() != g || perm.iter().any(|&p| p >= g || std::mem::replace(&mut seen[p], true)) {
            return Err(BalarmError::InvalidParams("not a permutation of 0..G".into()));
        }
        Ok(Self {
            spec: self.spec,
            mixing: perm.iter().map(|&p| self.mixing[p]).collect(),
            clusters: perm.iter().map(|&p| self.clusters[p].clone()).collect(),
        })
    }
}

/// Optional ingestion provenance carried by a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelProvenance {
    /// Aggregation window in seconds.
    pub window_seconds: i64,
    /// Wall-clock second at which snapshot windows start.
    pub t_start_seconds: i64,
    /// Wall-clock second used as phase origin for the harmonic basis.
    pub phase_origin_seconds: i64,
}

/// A panel of `J` binary edge series of common length `n`.
///
/// Values are stored row-major; edge `i` occupies `values[i*n..(i+1)*n]`.
/// Timestamps are integer time-step indices with unit spacing, so the full
/// vector is determined by its first entry. Edge index `i` maps to a node
/// pair `(k, j)` with `k < j`; node indices are 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePanel {
    values: Vec<u8>,
    n_edges: usize,
    n_snapshots: usize,
    t_first: i64,
    edge_pairs: Vec<(usize, usize)>,
    node_names: Vec<String>,
    node_status: Option<Vec<String>>,
    provenance: Option<PanelProvenance>,
}

impl EdgePanel {
    /// Builds a panel from per-edge rows and an explicit edge map.
    pub fn new(
        rows: Vec<Vec<u8>>, t_first: i64, edge_pairs: Vec<(usize, usize)>, node_names: Vec<String>,
        node_status: Option<Vec<String>>,
    ) -> Result<Self> {
        let n_edges = rows.len();
        if n_edges == 0 {
            return Err(BalarmError::InvalidPanel("panel must contain at least one edge".into()));
        }
        let n_snapshots = rows[0].len();
        if n_snapshots == 0 {
            return Err(BalarmError::InvalidPanel("series must be non-empty".into()));
        }
        let mut values = Vec::with_capacity(n_edges * n_snapshots);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_snapshots {
                return Err(BalarmError::InvalidPanel(format!(
                    "edge {i} has length {}, expected {n_snapshots}",
                    row.len()
                )));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(BalarmError::InvalidPanel(format!("edge {i} contains a value outside {{0,1}}")));
            }
            values.extend_from_slice(row);
        }
        if edge_pairs.len() != n_edges {
            return Err(BalarmError::InvalidPanel(format!(
                "edge map has {} entries for {n_edges} edges",
                edge_pairs.len()
            )));
        }
        let n_nodes = node_names.len();
        let mut seen = std::collections::HashSet::with_capacity(n_edges);
        for &(k, j) in &edge_pairs {
            if k >= j {
                return Err(BalarmError::InvalidPanel(format!("edge pair ({k}, {j}) must have k < j")));
            }
            if j >= n_nodes {
                return Err(BalarmError::InvalidPanel(format!("edge pair ({k}, {j}) references a missing node")));
            }
            if !seen.insert((k, j)) {
                return Err(BalarmError::InvalidPanel(format!("edge pair ({k}, {j}) appears twice")));
            }
        }
        if let Some(status) = &node_status {
            if status.len() != n_nodes {
                return Err(BalarmError::InvalidPanel("node status list must cover every node".into()));
            }
        }
        Ok(Self { values, n_edges, n_snapshots, t_first, edge_pairs, node_names, node_status, provenance: None })
    }

    /// Builds a panel from rows and a full timestamp vector, rejecting gaps.
    pub fn with_timestamps(
        rows: Vec<Vec<u8>>, timestamps: &[i64], edge_pairs: Vec<(usize, usize)>, node_names: Vec<String>,
        node_status: Option<Vec<String>>,
    ) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(BalarmError::InvalidPanel("timestamp vector is empty".into()));
        }
        if rows.first().map(|r| r.len()) != Some(timestamps.len()) {
            return Err(BalarmError::InvalidPanel("timestamp vector length must match series length".into()));
        }
        for w in timestamps.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(BalarmError::InvalidPanel(format!(
                    "timestamps must increase with unit spacing; found {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Self::new(rows, timestamps[0], edge_pairs, node_names, node_status)
    }

    /// Builds a panel from bare series, synthesizing a lexicographic edge map
    /// over the smallest node set that can host `J` pairs.
    pub fn from_series(rows: Vec<Vec<u8>>, t_first: i64) -> Result<Self> {
        let j = rows.len();
        let mut n_nodes = 2usize;
        while n_nodes * (n_nodes - 1) / 2 < j {
            n_nodes += 1;
        }
        let edge_pairs: Vec<(usize, usize)> = (0..j).map(|i| lex_index_pair(n_nodes, i)).collect();
        let node_names = (1..=n_nodes).map(|k| format!("n{k}")).collect();
        Self::new(rows, t_first, edge_pairs, node_names, None)
    }

    /// Attaches ingestion provenance.
    pub fn with_provenance(mut self, provenance: PanelProvenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Number of edges `J`.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Number of snapshots `n`.
    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
    }

    /// Number of nodes.
    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    /// First timestamp.
    pub fn t_first(&self) -> i64 {
        self.t_first
    }

    /// Timestamp of snapshot `l` (0-based).
    pub fn timestamp(&self, l: usize) -> i64 {
        self.t_first + l as i64
    }

    /// The binary series of edge `i`.
    pub fn series(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_snapshots..(i + 1) * self.n_snapshots]
    }

    /// Value of edge `i` at snapshot `l`.
    pub fn value(&self, i: usize, l: usize) -> u8 {
        self.values[i * self.n_snapshots + l]
    }

    /// Node pair of edge `i`.
    pub fn edge_pair(&self, i: usize) -> (usize, usize) {
        self.edge_pairs[i]
    }

    /// All node pairs, in edge order.
    pub fn edge_pairs(&self) -> &[(usize, usize)] {
        &self.edge_pairs
    }

    /// Edge index for node pair `(k, j)`, if present.
    pub fn find_edge(&self, k: usize, j: usize) -> Option<usize> {
        let key = if k < j { (k, j) } else { (j, k) };
        self.edge_pairs.iter().position(|&p| p == key)
    }

    /// Node names, in node order.
    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    /// Per-node category labels, when known.
    pub fn node_status(&self) -> Option<&[String]> {
        self.node_status.as_deref()
    }

    /// Ingestion provenance, when the panel came from a contact log.
    pub fn provenance(&self) -> Option<&PanelProvenance> {
        self.provenance.as_ref()
    }

    /// Sample mean of edge `i`.
    pub fn edge_mean(&self, i: usize) -> f64 {
        let s = self.series(i);
        s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64
    }

    /// Fraction of switched-on cells over the whole panel.
    pub fn density(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// A copy with edges reordered so new edge `i` is old edge `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_edges];
        if order.len() != self.n_edges
            || order.iter().any(|&p| p >= self.n_edges || std::mem::replace(&mut seen[p], true))
        {
            return Err(BalarmError::InvalidPanel("not a permutation of 0..J".into()));
        }
        let mut values = Vec::with_capacity(self.values.len());
        let mut edge_pairs = Vec::with_capacity(self.n_edges);
        for &src in order {
            values.extend_from_slice(self.series(src));
            edge_pairs.push(self.edge_pairs[src]);
        }
        Ok(Self { values, edge_pairs, ..self.clone() })
    }
}

/// Lexicographic index of node pair `(k, j)`, `k < j`, over `n_nodes` nodes.
pub fn lex_pair_index(n_nodes: usize, k: usize, j: usize) -> usize {
    debug_assert!(k < j && j < n_nodes);
    k * (2 * n_nodes - k - 1) / 2 + (j - k - 1)
}

/// Inverse of [`lex_pair_index`].
pub fn lex_index_pair(n_nodes: usize, mut index: usize) -> (usize, usize) {
    for k in 0..n_nodes {
        let row = n_nodes - k - 1;
        if index < row {
            return (k, k + 1 + index);
        }
        index -= row;
    }
    panic!("edge index out of range for {n_nodes} nodes");
}

/// Result of one EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// The fitted model.
    pub model: BalarmModel,
    /// Posterior cluster membership probabilities, one row per edge.
    pub responsibilities: Vec<Vec<f64>>,
    /// Most probable cluster per edge (0-based), ties broken by lowest index.
    pub hard_labels: Vec<usize>,
    /// Observed-data log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
    /// Whether the stopping tolerance was met before the iteration cap.
    pub converged: bool,
    /// Number of EM iterations performed.
    pub n_iters: usize,
    /// Settings and events of the run.
    pub meta: FitMeta,
}

impl FitResult {
    /// Final observed-data log-likelihood.
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// Fit settings and events, recorded so a run can be reproduced and audited.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    /// Initialization strategy name.
    pub init: String,
    /// Master seed of the run.
    pub seed: u64,
    /// Absolute log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// EM iteration cap.
    pub max_iter: usize,
    /// Number of restarts attempted.
    pub restarts: usize,
    /// Index of the restart that produced this result.
    pub best_restart: usize,
    /// Configured ridge strength on non-intercept coefficients.
    pub ridge: f64,
    /// Largest ridge actually used after separation escalation.
    pub max_ridge_used: f64,
    /// Number of M-steps in which some cluster was empty and kept frozen.
    pub empty_cluster_events: usize,
    /// Human-readable warnings accumulated during the run.
    pub warnings: Vec<String>,
}

/// Harmonic basis at time step `t`: entries `(cos, sin)` interleaved for
/// frequencies `1..=h`, with period `period`.
///
/// The time step is reduced modulo the period before evaluation, so the
/// basis is exactly periodic for integer `t`.
pub fn harmonic_basis(t: i64, h: usize, period: usize) -> Vec<f64> {
    let mut basis = vec![0.0; 2 * h];
    harmonic_basis_into(t, h, period, &mut basis);
    basis
}

/// Writes the harmonic basis into `out`, which must have length `2h`.
pub fn harmonic_basis_into(t: i64, h: usize, period: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 2 * h);
    if h == 0 {
        return;
    }
    let phase = t.rem_euclid(period as i64) as f64 / period as f64;
    for m in 1..=h {
        let angle = std::f64::consts::TAU * m as f64 * phase;
        out[2 * (m - 1)] = angle.cos();
        out[2 * (m - 1) + 1] = angle.sin();
    }
}

/// Linear predictor: harmonic terms, AR terms over the `K` most recent
/// states (`history[0]` is the most recent), and the intercept.
pub fn linear_predictor(history: &[u8], t: i64, params: &ClusterParams, spec: &ModelSpec) -> Result<f64> {
    if history.len() != spec.ar_order {
        return Err(BalarmError::DimensionMismatch(format!(
            "history has {} entries, spec wants {}",
            history.len(),
            spec.ar_order
        )));
    }
    params.matches(spec)?;
    let mut basis = vec![0.0; spec.harmonic_dim()];
    harmonic_basis_into(t, spec.harmonic_order, spec.period, &mut basis);
    let mut eta = params.intercept;
    for (a, f) in params.harmonic.iter().zip(&basis) {
        eta += a * f;
    }
    for (b, &x) in params.ar.iter().zip(history) {
        eta += b * x as f64;
    }
    Ok(eta)
}

/// Numerically stable inverse logit, `exp(x) / (1 + exp(x))`.
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log(1 + exp(x))`.
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One Bernoulli log-likelihood term, `x * eta - log(1 + exp(eta))`.
pub fn bernoulli_loglik_term(x: u8, eta: f64) -> f64 {
    debug_assert!(x <= 1);
    x as f64 * eta - log1p_exp(eta)
}
