//! EM fitting of the mixture: responsibilities, weighted per-cluster
//! logistic fits, observed-data log-likelihood, initialization, restarts,
//! and label alignment.
//!
//! Design rows take at most `phase_count * 2^K` distinct covariate values,
//! so both steps run off a per-edge histogram of (phase, lag pattern)
//! cells when that table is small enough to pay off: the E-step becomes
//! table lookups and the M-step a weighted fit over pooled cells. Panels
//! outside those bounds stream rows directly. Either way, reductions run
//! in a fixed order, so fits are bit-reproducible for any worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{BalarmError, Result};
use crate::glm::{basis_table, irls, FitOptions, PanelSource, RowBlocks};
use crate::model::{
    bernoulli_loglik_term, BalarmModel, ClusterParams, EdgePanel, FitMeta, FitResult, ModelSpec,
};
use crate::rng::{derive_seed2, stream_rng, tags};

/// How a fit obtains its starting point.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// Responsibility rows drawn from a symmetric Dirichlet(1).
    RandomResponsibility,
    /// K-means on per-edge summary features, then one M-step from the hard
    /// assignment.
    SummaryKmeans,
    /// Start EM from this model (used by the bootstrap).
    ProvidedModel(BalarmModel),
}

impl InitStrategy {
    /// Stable name recorded in fit metadata.
    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomResponsibility => "random-responsibility",
            Self::SummaryKmeans => "summary-kmeans",
            Self::ProvidedModel(_) => "provided-model",
        }
    }
}

/// EM stopping and restart settings.
#[derive(Debug, Clone)]
pub struct EmSettings {
    /// Absolute log-likelihood improvement below which EM stops.
    pub tol: f64,
    /// EM iteration cap.
    pub max_iter: usize,
    /// Restart count; `None` picks a per-strategy default (10 for random
    /// responsibilities, 2 for k-means, 1 for a provided model).
    pub restarts: Option<usize>,
    /// Inner weighted-logistic-fit options.
    pub glm: FitOptions,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500, restarts: None, glm: FitOptions::default() }
    }
}

impl EmSettings {
    fn resolved_restarts(&self, strategy: &InitStrategy) -> usize {
        self.restarts.unwrap_or(match strategy {
            InitStrategy::RandomResponsibility => 10,
            InitStrategy::SummaryKmeans => 2,
            InitStrategy::ProvidedModel(_) => 1,
        })
    }
}

/// An EM starting point: either soft assignments or a full model.
#[derive(Debug, Clone)]
pub enum EmInit {
    /// One row per edge, summing to 1.
    Responsibilities(Vec<Vec<f64>>),
    /// A model to run the first E-step on.
    Model(BalarmModel),
}

/// Result of one M-step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    /// The updated model.
    pub model: BalarmModel,
    /// Clusters whose total responsibility fell below threshold and whose
    /// parameters were kept frozen.
    pub empty_clusters: Vec<usize>,
    /// Largest ridge used across clusters after separation escalation.
    pub max_ridge_used: f64,
    /// Clusters whose inner fit hit its iteration cap.
    pub unconverged_clusters: Vec<usize>,
}

/// Mixing weights never drop below this floor, so a frozen cluster stays
/// comparable across information criteria.
const MIXING_FLOOR: f64 = 1e-10;
/// A cluster is empty when its total responsibility is below this fraction
/// of the panel.
const EMPTY_FRACTION: f64 = 1e-8;
/// Ridge escalation stops here.
const MAX_RIDGE: f64 = 1e-2;
/// Histogram pooling limits: cells per edge and total table entries.
const MAX_CELLS: usize = 4096;
const MAX_HIST_ENTRIES: usize = 1 << 24;
/// Warning list cap per fit.
const MAX_WARNINGS: usize = 20;

/// Per-edge counts over (phase, lag-pattern) cells, shared by the E- and
/// M-steps. `counts1` counts rows with response 1, `counts0` the rest.
struct PanelHistogram {
    n_cells: usize,
    dim: usize,
    covs: Vec<f64>,
    counts0: Vec<u32>,
    counts1: Vec<u32>,
}

impl PanelHistogram {
    fn try_new(panel: &EdgePanel, spec: &ModelSpec) -> Option<Self> {
        let k = spec.ar_order;
        if k >= usize::BITS as usize - 2 {
            return None;
        }
        let phase_count = if spec.harmonic_order > 0 { spec.period } else { 1 };
        let n_cells = phase_count.checked_shl(k as u32)?;
        if n_cells > MAX_CELLS || panel.n_edges().checked_mul(n_cells)? > MAX_HIST_ENTRIES {
            return None;
        }
        let table = basis_table(spec);
        let h2 = spec.harmonic_dim();
        let dim = spec.covariate_dim();
        let mut covs = vec![0.0; n_cells * dim];
        for ph in 0..phase_count {
            for bits in 0..(1usize << k) {
                let cov = &mut covs[(ph * (1 << k) + bits) * dim..][..dim];
                if spec.harmonic_order > 0 {
                    cov[..h2].copy_from_slice(&table[ph * h2..(ph + 1) * h2]);
                }
                for lag in 0..k {
                    cov[h2 + lag] = ((bits >> lag) & 1) as f64;
                }
                cov[dim - 1] = 1.0;
            }
        }
        let j = panel.n_edges();
        let n = panel.n_snapshots();
        let mut counts0 = vec![0u32; j * n_cells];
        let mut counts1 = vec![0u32; j * n_cells];
        for i in 0..j {
            let series = panel.series(i);
            let c0 = &mut counts0[i * n_cells..(i + 1) * n_cells];
            let c1 = &mut counts1[i * n_cells..(i + 1) * n_cells];
            for l in k..n {
                let ph = if spec.harmonic_order > 0 {
                    panel.timestamp(l).rem_euclid(spec.period as i64) as usize
                } else {
                    0
                };
                let mut bits = 0usize;
                for lag in 0..k {
                    bits |= (series[l - 1 - lag] as usize) << lag;
                }
                let cell = (ph << k) + bits;
                if series[l] == 1 {
                    c1[cell] += 1;
                } else {
                    c0[cell] += 1;
                }
            }
        }
        Some(Self { n_cells, dim, covs, counts0, counts1 })
    }

    fn cov(&self, cell: usize) -> &[f64] {
        &self.covs[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Responsibility-weighted cell totals `(sum of weights, weighted count
    /// of ones)` for one cluster column.
    fn pooled(&self, edge_weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut w = vec![0.0; self.n_cells];
        let mut wy = vec![0.0; self.n_cells];
        for (i, &wi) in edge_weights.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let c0 = &self.counts0[i * self.n_cells..(i + 1) * self.n_cells];
            let c1 = &self.counts1[i * self.n_cells..(i + 1) * self.n_cells];
            for cell in 0..self.n_cells {
                let ones = c1[cell] as f64;
                w[cell] += wi * (c0[cell] as f64 + ones);
                wy[cell] += wi * ones;
            }
        }
        (w, wy)
    }
}

/// Pooled cells as a row source for the inner weighted fit.
struct PooledSource<'a> {
    hist: &'a PanelHistogram,
    w: &'a [f64],
    wy: &'a [f64],
}

impl RowBlocks for PooledSource<'_> {
    fn dim(&self) -> usize {
        self.hist.dim
    }

    fn n_blocks(&self) -> usize {
        1
    }

    fn visit_block(&self, _block: usize, f: &mut dyn FnMut(&[f64], f64, f64)) {
        for cell in 0..self.hist.n_cells {
            let w = self.w[cell];
            if w > 0.0 {
                f(self.hist.cov(cell), self.wy[cell] / w, w);
            }
        }
    }
}

/// Shared per-fit state: the panel, the structural spec, and the cell
/// histogram when pooling pays off.
struct EmContext<'a> {
    panel: &'a EdgePanel,
    spec: ModelSpec,
    hist: Option<PanelHistogram>,
}

impl<'a> EmContext<'a> {
    fn new(panel: &'a EdgePanel, spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        if panel.n_snapshots() <= spec.ar_order {
            return Err(BalarmError::InvalidSpec(format!(
                "panel length {} must exceed ar_order {}",
                panel.n_snapshots(),
                spec.ar_order
            )));
        }
        Ok(Self { panel, spec, hist: PanelHistogram::try_new(panel, &spec) })
    }
}

fn check_model_panel(model: &BalarmModel, panel: &EdgePanel) -> Result<()> {
    model.validate()?;
    if panel.n_snapshots() <= model.spec.ar_order {
        return Err(BalarmError::InvalidSpec(format!(
            "panel length {} must exceed ar_order {}",
            panel.n_snapshots(),
            model.spec.ar_order
        )));
    }
    Ok(())
}

/// Per-phase `intercept + harmonic` contribution for each cluster, in the
/// kernel's accumulation order.
fn cluster_phase_offsets(model: &BalarmModel) -> Vec<Vec<f64>> {
    let spec = &model.spec;
    let table = basis_table(spec);
    let h2 = spec.harmonic_dim();
    model
        .clusters
        .iter()
        .map(|params| {
            (0..spec.period)
                .map(|ph| {
                    let mut eta = params.intercept;
                    for (a, f) in params.harmonic.iter().zip(&table[ph * h2..(ph + 1) * h2]) {
                        eta += a * f;
                    }
                    eta
                })
                .collect()
        })
        .collect()
}

/// Conditional log-likelihood of one edge under one cluster's parameters,
/// summed over time steps past the conditioning window.
pub fn cluster_loglik(panel: &EdgePanel, edge: usize, params: &ClusterParams, spec: &ModelSpec) -> Result<f64> {
    spec.validate()?;
    params.validate()?;
    params.matches(spec)?;
    let k = spec.ar_order;
    let n = panel.n_snapshots();
    if n <= k {
        return Err(BalarmError::InvalidSpec(format!("panel length {n} must exceed ar_order {k}")));
    }
    if edge >= panel.n_edges() {
        return Err(BalarmError::InvalidPanel(format!("edge {edge} out of range")));
    }
    let table = basis_table(spec);
    let h2 = spec.harmonic_dim();
    let offsets: Vec<f64> = (0..spec.period)
        .map(|ph| {
            let mut eta = params.intercept;
            for (a, f) in params.harmonic.iter().zip(&table[ph * h2..(ph + 1) * h2]) {
                eta += a * f;
            }
            eta
        })
        .collect();
    let series = panel.series(edge);
    let mut total = 0.0;
    for l in k..n {
        let ph = panel.timestamp(l).rem_euclid(spec.period as i64) as usize;
        let mut eta = offsets[ph];
        for (lag, b) in params.ar.iter().enumerate() {
            eta += b * series[l - 1 - lag] as f64;
        }
        total += bernoulli_loglik_term(series[l], eta);
    }
    Ok(total)
}

/// `J x G` matrix of per-edge, per-cluster conditional log-likelihoods.
fn loglik_matrix(ctx: &EmContext, model: &BalarmModel) -> Vec<Vec<f64>> {
    let g_count = model.n_clusters();
    if let Some(hist) = &ctx.hist {
        // Two table entries per (cluster, cell): the log-likelihood terms
        // for a 0 and a 1 response.
        let terms: Vec<Vec<f64>> = model
            .clusters
            .iter()
            .map(|params| {
                let coef = params.to_coefficients();
                (0..hist.n_cells)
                    .flat_map(|cell| {
                        let cov = hist.cov(cell);
                        let eta: f64 = cov.iter().zip(&coef).map(|(x, b)| x * b).sum();
                        [bernoulli_loglik_term(0, eta), bernoulli_loglik_term(1, eta)]
                    })
                    .collect()
            })
            .collect();
        (0..ctx.panel.n_edges())
            .into_par_iter()
            .map(|i| {
                let c0 = &hist.counts0[i * hist.n_cells..(i + 1) * hist.n_cells];
                let c1 = &hist.counts1[i * hist.n_cells..(i + 1) * hist.n_cells];
                (0..g_count)
                    .map(|g| {
                        let t = &terms[g];
                        let mut acc = 0.0;
                        for cell in 0..hist.n_cells {
                            acc += c0[cell] as f64 * t[2 * cell] + c1[cell] as f64 * t[2 * cell + 1];
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    } else {
        let spec = &ctx.spec;
        let offsets = cluster_phase_offsets(model);
        let k = spec.ar_order;
        (0..ctx.panel.n_edges())
            .into_par_iter()
            .map(|i| {
                let series = ctx.panel.series(i);
                let mut row = vec![0.0; g_count];
                for l in k..series.len() {
                    let ph = ctx.panel.timestamp(l).rem_euclid(spec.period as i64) as usize;
                    for (g, acc) in row.iter_mut().enumerate() {
                        let mut eta = offsets[g][ph];
                        for (lag, b) in model.clusters[g].ar.iter().enumerate() {
                            eta += b * series[l - 1 - lag] as f64;
                        }
                        *acc += bernoulli_loglik_term(series[l], eta);
                    }
                }
                row
            })
            .collect()
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn responsibilities_from(loglik: &[Vec<f64>], mixing: &[f64]) -> Vec<Vec<f64>> {
    let log_pi: Vec<f64> = mixing.iter().map(|&p| p.ln()).collect();
    loglik
        .iter()
        .map(|row| {
            let scores: Vec<f64> = row.iter().zip(&log_pi).map(|(l, lp)| l + lp).collect();
            let norm = logsumexp(&scores);
            scores.iter().map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - norm).exp() }).collect()
        })
        .collect()
}

fn observed_loglik_from(loglik: &[Vec<f64>], mixing: &[f64]) -> f64 {
    let log_pi: Vec<f64> = mixing.iter().map(|&p| p.ln()).collect();
    loglik
        .iter()
        .map(|row| {
            let scores: Vec<f64> = row.iter().zip(&log_pi).map(|(l, lp)| l + lp).collect();
            logsumexp(&scores)
        })
        .sum()
}

/// Posterior cluster membership probabilities, one row per edge. A cluster
/// with zero mixing weight gets exactly zero responsibility.
pub fn e_step(panel: &EdgePanel, model: &BalarmModel) -> Result<Vec<Vec<f64>>> {
    check_model_panel(model, panel)?;
    let ctx = EmContext::new(panel, model.spec)?;
    Ok(responsibilities_from(&loglik_matrix(&ctx, model), &model.mixing))
}

/// Observed-data log-likelihood: per edge, the log of the mixture of
/// cluster likelihoods.
pub fn observed_loglik(panel: &EdgePanel, model: &BalarmModel) -> Result<f64> {
    check_model_panel(model, panel)?;
    let ctx = EmContext::new(panel, model.spec)?;
    Ok(observed_loglik_from(&loglik_matrix(&ctx, model), &model.mixing))
}

fn validate_responsibilities(tau: &[Vec<f64>], j: usize, g: usize) -> Result<()> {
    if tau.len() != j {
        return Err(BalarmError::DimensionMismatch(format!("{} responsibility rows for {j} edges", tau.len())));
    }
    for (i, row) in tau.iter().enumerate() {
        if row.len() != g {
            return Err(BalarmError::DimensionMismatch(format!("responsibility row {i} has {} entries", row.len())));
        }
        if row.iter().any(|&t| !t.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&t)) {
            return Err(BalarmError::InvalidParams(format!("responsibility row {i} has entries outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(BalarmError::InvalidParams(format!("responsibility row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Fits one cluster with ridge escalation on separation.
fn fit_cluster<B: RowBlocks>(src: &B, warm: &[f64], glm: &FitOptions) -> Result<(crate::glm::GlmFit, f64)> {
    let mut ridge = glm.ridge;
    loop {
        match irls(src, warm, &FitOptions { ridge, ..*glm }) {
            Ok(fit) => return Ok((fit, ridge)),
            Err(BalarmError::Singular(_)) if ridge < MAX_RIDGE => {
                ridge = (ridge * 10.0).max(1e-6).min(MAX_RIDGE);
            }
            Err(e) => return Err(e),
        }
    }
}

fn m_step_inner(
    ctx: &EmContext, tau: &[Vec<f64>], previous: &BalarmModel, glm: &FitOptions,
) -> Result<MStepOutcome> {
    let j = ctx.panel.n_edges();
    let g_count = ctx.spec.n_clusters;
    let mut mixing = vec![0.0; g_count];
    for row in tau {
        for (g, &t) in row.iter().enumerate() {
            mixing[g] += t;
        }
    }
    let totals = mixing.clone();
    for m in &mut mixing {
        *m = (*m / j as f64).max(MIXING_FLOOR);
    }
    let norm: f64 = mixing.iter().sum();
    for m in &mut mixing {
        *m /= norm;
    }

    let mut clusters = Vec::with_capacity(g_count);
    let mut empty_clusters = Vec::new();
    let mut unconverged_clusters = Vec::new();
    let mut max_ridge_used = glm.ridge;
    for g in 0..g_count {
        if totals[g] < EMPTY_FRACTION * j as f64 {
            empty_clusters.push(g);
            clusters.push(previous.clusters[g].clone());
            continue;
        }
        let col: Vec<f64> = tau.iter().map(|row| row[g]).collect();
        let warm = previous.clusters[g].to_coefficients();
        let (fit, ridge_used) = if let Some(hist) = &ctx.hist {
            let (w, wy) = hist.pooled(&col);
            fit_cluster(&PooledSource { hist, w: &w, wy: &wy }, &warm, glm)?
        } else {
            fit_cluster(&PanelSource::new(ctx.panel, &ctx.spec).with_edge_weights(&col), &warm, glm)?
        };
        if !fit.converged {
            unconverged_clusters.push(g);
        }
        max_ridge_used = max_ridge_used.max(ridge_used);
        clusters.push(ClusterParams::from_coefficients(&fit.coefficients, &ctx.spec)?);
    }
    Ok(MStepOutcome {
        model: BalarmModel::new(ctx.spec, mixing, clusters)?,
        empty_clusters,
        max_ridge_used,
        unconverged_clusters,
    })
}

/// One M-step: mixing weights from responsibility means, cluster parameters
/// from responsibility-weighted logistic fits warm-started at `previous`.
///
/// A cluster with negligible total responsibility keeps its previous
/// parameters and is listed in the outcome; its mixing weight is floored so
/// the model stays valid.
pub fn m_step(
    panel: &EdgePanel, responsibilities: &[Vec<f64>], spec: &ModelSpec, previous: &BalarmModel, glm: &FitOptions,
) -> Result<MStepOutcome> {
    let ctx = EmContext::new(panel, *spec)?;
    if previous.spec != *spec {
        return Err(BalarmError::DimensionMismatch("previous model spec differs from target spec".into()));
    }
    validate_responsibilities(responsibilities, panel.n_edges(), spec.n_clusters)?;
    m_step_inner(&ctx, responsibilities, previous, glm)
}

fn flat_model(spec: &ModelSpec) -> Result<BalarmModel> {
    let g = spec.n_clusters;
    BalarmModel::new(*spec, vec![1.0 / g as f64; g], vec![ClusterParams::zeros(spec); g])
}

/// Builds an EM starting point for the given strategy.
pub fn initialize(panel: &EdgePanel, spec: &ModelSpec, strategy: &InitStrategy, seed: u64) -> Result<EmInit> {
    spec.validate()?;
    let j = panel.n_edges();
    let g = spec.n_clusters;
    if j < g {
        return Err(BalarmError::InsufficientData(format!("{j} edges cannot support {g} clusters")));
    }
    match strategy {
        InitStrategy::ProvidedModel(model) => {
            if model.spec != *spec {
                return Err(BalarmError::DimensionMismatch("provided model spec differs from target spec".into()));
            }
            model.validate()?;
            Ok(EmInit::Model(model.clone()))
        }
        InitStrategy::RandomResponsibility => {
            let mut rng = stream_rng(seed, tags::EM_INIT);
            let tau = (0..j)
                .map(|_| {
                    let mut row: Vec<f64> = (0..g).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                    let sum: f64 = row.iter().sum();
                    if sum > 0.0 {
                        for t in &mut row {
                            *t /= sum;
                        }
                    } else {
                        row.fill(1.0 / g as f64);
                    }
                    row
                })
                .collect();
            Ok(EmInit::Responsibilities(tau))
        }
        InitStrategy::SummaryKmeans => {
            let features = standardized_features(panel, spec);
            let mut rng = stream_rng(seed, tags::EM_INIT);
            let labels = kmeans(&features, g, &mut rng);
            let tau = labels
                .iter()
                .map(|&lab| {
                    let mut row = vec![0.0; g];
                    row[lab] = 1.0;
                    row
                })
                .collect();
            Ok(EmInit::Responsibilities(tau))
        }
    }
}

/// Per-edge summary features: logit of the clipped mean, lag-1 sample
/// autocorrelation, and mean activity over eight time-of-day bins; each
/// column standardized over edges.
fn standardized_features(panel: &EdgePanel, spec: &ModelSpec) -> Vec<Vec<f64>> {
    let n = panel.n_snapshots();
    let j = panel.n_edges();
    let bins = 8usize;
    let dim = 2 + bins;
    let mut features: Vec<Vec<f64>> = (0..j)
        .map(|i| {
            let series = panel.series(i);
            let mean = panel.edge_mean(i);
            let clip = (1.0 / (2.0 * n as f64)).min(0.25);
            let p = mean.clamp(clip, 1.0 - clip);
            let mut f = vec![0.0; dim];
            f[0] = (p / (1.0 - p)).ln();
            let mut num = 0.0;
            let mut den = 0.0;
            for l in 0..n {
                let d = series[l] as f64 - mean;
                den += d * d;
                if l + 1 < n {
                    num += d * (series[l + 1] as f64 - mean);
                }
            }
            f[1] = if den > 0.0 { num / den } else { 0.0 };
            let mut sums = vec![0.0; bins];
            let mut counts = vec![0usize; bins];
            for l in 0..n {
                let ph = panel.timestamp(l).rem_euclid(spec.period as i64) as usize;
                let b = ph * bins / spec.period;
                sums[b] += series[l] as f64;
                counts[b] += 1;
            }
            for b in 0..bins {
                f[2 + b] = if counts[b] > 0 { sums[b] / counts[b] as f64 } else { 0.0 };
            }
            f
        })
        .collect();

    for d in 0..dim {
        let mean = features.iter().map(|f| f[d]).sum::<f64>() / j as f64;
        let var = features.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / j as f64;
        let sd = var.sqrt();
        for f in &mut features {
            f[d] = if sd > 0.0 { (f[d] - mean) / sd } else { 0.0 };
        }
    }
    features
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; deterministic given the RNG.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut best = vec![f64::INFINITY; n];
    while centroids.len() < k {
        for (i, p) in points.iter().enumerate() {
            best[i] = best[i].min(sq_dist(p, centroids.last().unwrap()));
        }
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut lab = 0;
            let mut dmin = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < dmin {
                    dmin = d;
                    lab = c;
                }
            }
            if labels[i] != lab {
                labels[i] = lab;
                changed = true;
            }
        }
        // Re-seed any emptied centroid at the point farthest from its own.
        let mut counts = vec![0usize; k];
        for &lab in &labels {
            counts[lab] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    })
                    .unwrap();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                changed = true;
            }
        }
        for cent in &mut centroids {
            cent.fill(0.0);
        }
        for (i, p) in points.iter().enumerate() {
            for d in 0..dim {
                centroids[labels[i]][d] += p[d];
            }
        }
        for c in 0..k {
            for d in 0..dim {
                centroids[c][d] /= counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

struct RestartRun {
    model: BalarmModel,
    tau: Vec<Vec<f64>>,
    trace: Vec<f64>,
    converged: bool,
    empty_events: usize,
    max_ridge_used: f64,
    warnings: Vec<String>,
}

fn push_warning(warnings: &mut Vec<String>, text: String) {
    if warnings.len() < MAX_WARNINGS {
        warnings.push(text);
    } else if warnings.len() == MAX_WARNINGS {
        warnings.push("further warnings suppressed".into());
    }
}

fn run_em(ctx: &EmContext, init: EmInit, settings: &EmSettings) -> Result<RestartRun> {
    let mut warnings = Vec::new();
    let mut empty_events = 0usize;
    let mut max_ridge_used = settings.glm.ridge;
    let flat = flat_model(&ctx.spec)?;

    let mut model = match init {
        EmInit::Model(m) => m,
        EmInit::Responsibilities(tau) => {
            validate_responsibilities(&tau, ctx.panel.n_edges(), ctx.spec.n_clusters)?;
            let out = m_step_inner(ctx, &tau, &flat, &settings.glm)?;
            if !out.empty_clusters.is_empty() {
                empty_events += 1;
                push_warning(&mut warnings, format!("init m-step left clusters {:?} empty", out.empty_clusters));
            }
            max_ridge_used = max_ridge_used.max(out.max_ridge_used);
            out.model
        }
    };

    let l0 = loglik_matrix(ctx, &model);
    let mut loglik = observed_loglik_from(&l0, &model.mixing);
    let mut tau = responsibilities_from(&l0, &model.mixing);
    let mut trace = vec![loglik];
    let mut converged = false;

    for iter in 1..=settings.max_iter {
        let out = m_step_inner(ctx, &tau, &model, &settings.glm)?;
        if !out.empty_clusters.is_empty() {
            empty_events += 1;
            push_warning(
                &mut warnings,
                format!("iteration {iter}: clusters {:?} empty, parameters frozen", out.empty_clusters),
            );
        }
        if !out.unconverged_clusters.is_empty() {
            push_warning(
                &mut warnings,
                format!("iteration {iter}: inner fit hit its cap for clusters {:?}", out.unconverged_clusters),
            );
        }
        max_ridge_used = max_ridge_used.max(out.max_ridge_used);
        model = out.model;

        let l = loglik_matrix(ctx, &model);
        let new_loglik = observed_loglik_from(&l, &model.mixing);
        trace.push(new_loglik);
        if new_loglik < loglik - 1e-8 {
            push_warning(
                &mut warnings,
                format!("iteration {iter}: log-likelihood decreased by {:.3e}", loglik - new_loglik),
            );
        }
        let improvement = new_loglik - loglik;
        loglik = new_loglik;
        tau = responsibilities_from(&l, &model.mixing);
        if improvement < settings.tol {
            converged = true;
            break;
        }
    }

    Ok(RestartRun { model, tau, trace, converged, empty_events, max_ridge_used, warnings })
}

fn hard_labels(tau: &[Vec<f64>]) -> Vec<usize> {
    tau.iter()
        .map(|row| {
            let mut lab = 0;
            let mut best = f64::NEG_INFINITY;
            for (g, &t) in row.iter().enumerate() {
                if t > best {
                    best = t;
                    lab = g;
                }
            }
            lab
        })
        .collect()
}

/// Fits the mixture by EM with restarts, returning the best restart by
/// final observed log-likelihood.
///
/// Restart `r` derives its own seed from `(seed, r)`, so runs are
/// reproducible and restarts are independent of scheduling.
pub fn fit_em(
    panel: &EdgePanel, spec: &ModelSpec, strategy: &InitStrategy, seed: u64, settings: &EmSettings,
) -> Result<FitResult> {
    let ctx = EmContext::new(panel, *spec)?;
    if panel.n_edges() < spec.n_clusters {
        return Err(BalarmError::InsufficientData(format!(
            "{} edges cannot support {} clusters",
            panel.n_edges(),
            spec.n_clusters
        )));
    }
    if !settings.tol.is_finite() || settings.tol <= 0.0 {
        return Err(BalarmError::InvalidParams("tol must be positive".into()));
    }
    let restarts = settings.resolved_restarts(strategy);
    if restarts == 0 {
        return Err(BalarmError::InvalidParams("restarts must be at least 1".into()));
    }

    let mut best: Option<(usize, RestartRun)> = None;
    let mut failures = Vec::new();
    for r in 0..restarts {
        let restart_seed = derive_seed2(seed, tags::EM_RESTART, r as u64);
        let attempt = initialize(panel, spec, strategy, restart_seed).and_then(|init| run_em(&ctx, init, settings));
        match attempt {
            Ok(run) => {
                let ll = *run.trace.last().unwrap();
                if best.as_ref().is_none_or(|(_, b)| ll > *b.trace.last().unwrap()) {
                    best = Some((r, run));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }

    let Some((best_restart, run)) = best else {
        return Err(BalarmError::NonConvergence(format!(
            "all {restarts} restarts failed: {}",
            failures.join("; ")
        )));
    };
    let mut warnings = run.warnings;
    for f in failures {
        push_warning(&mut warnings, f);
    }

    let labels = hard_labels(&run.tau);
    Ok(FitResult {
        model: run.model,
        responsibilities: run.tau,
        hard_labels: labels,
        n_iters: run.trace.len() - 1,
        converged: run.converged,
        loglik_trace: run.trace,
        meta: FitMeta {
            init: strategy.name().to_string(),
            seed,
            tol: settings.tol,
            max_iter: settings.max_iter,
            restarts,
            best_restart,
            ridge: settings.glm.ridge,
            max_ridge_used: run.max_ridge_used,
            empty_cluster_events: run.empty_events,
            warnings,
        },
    })
}

/// The cluster permutation `perm` minimizing the total squared distance
/// between `reference` cluster `g` and `fitted` cluster `perm[g]`, so
/// `fitted.permuted(&perm)` matches `reference` cluster by cluster.
pub fn align_labels(reference: &BalarmModel, fitted: &BalarmModel) -> Result<Vec<usize>> {
    let g = reference.n_clusters();
    if fitted.n_clusters() != g {
        return Err(BalarmError::DimensionMismatch(format!(
            "cluster counts differ: {g} vs {}",
            fitted.n_clusters()
        )));
    }
    if g > 12 {
        return Err(BalarmError::InvalidSpec("label alignment supports at most 12 clusters".into()));
    }
    let ref_coefs: Vec<Vec<f64>> = reference.clusters.iter().map(|c| c.to_coefficients()).collect();
    let fit_coefs: Vec<Vec<f64>> = fitted.clusters.iter().map(|c| c.to_coefficients()).collect();
    if ref_coefs[0].len() != fit_coefs[0].len() {
        return Err(BalarmError::DimensionMismatch("cluster parameter dimensions differ".into()));
    }
    let cost: Vec<Vec<f64>> =
        ref_coefs.iter().map(|r| fit_coefs.iter().map(|f| sq_dist(r, f)).collect()).collect();

    let mut perm: Vec<usize> = (0..g).collect();
    let mut best_perm = perm.clone();
    let mut best_cost = f64::INFINITY;
    // Heap's algorithm over all G! assignments; G is at most 12 here and at
    // most 9 or 10 in practice.
    let mut stack = vec![0usize; g];
    let eval = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(r, &f)| cost[r][f]).sum() };
    let consider = |perm: &[usize], best_cost: &mut f64, best_perm: &mut Vec<usize>| {
        let c = eval(perm);
        if c < *best_cost {
            *best_cost = c;
            best_perm.copy_from_slice(perm);
        }
    };
    consider(&perm, &mut best_cost, &mut best_perm);
    let mut i = 1;
    while i < g {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            consider(&perm, &mut best_cost, &mut best_perm);
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best_perm)
}

/// Adjusted Rand index between two labelings of the same items; 1 for
/// identical partitions, near 0 for independent ones.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let mut joint = std::collections::HashMap::new();
    let mut ma = std::collections::HashMap::new();
    let mut mb = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0f64) += 1.0;
        *ma.entry(x).or_insert(0.0f64) += 1.0;
        *mb.entry(y).or_insert(0.0f64) += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_joint: f64 = joint.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = ma.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = mb.values().map(|&v| c2(v)).sum();
    let expected = sum_a * sum_b / c2(n);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_joint - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alarm::{simulate_alarm, simulate_balarm};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn ab_model() -> BalarmModel {
        let spec = ModelSpec::new(2, 1, 0, 288).unwrap();
        BalarmModel::new(
            spec,
            vec![0.5, 0.5],
            vec![
                ClusterParams::new(vec![], vec![2.89], -1.0).unwrap(),
                ClusterParams::new(vec![], vec![4.48], -4.0).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn cluster_loglik_examples() {
        let spec = ModelSpec::new(1, 1, 0, 288).unwrap();
        let panel = EdgePanel::from_series(vec![vec![1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1]], 0).unwrap();
        let ll = cluster_loglik(&panel, 0, &ClusterParams::zeros(&spec), &spec).unwrap();
        assert_close(ll, -10.0 * 2f64.ln(), 1e-12);

        let spec0 = ModelSpec::new(1, 0, 0, 288).unwrap();
        let n = 50;
        let panel0 = EdgePanel::from_series(vec![vec![0; n]], 0).unwrap();
        let params = ClusterParams::new(vec![], vec![], -8.0).unwrap();
        let ll0 = cluster_loglik(&panel0, 0, &params, &spec0).unwrap();
        assert_close(ll0, n as f64 * -3.3540637289576883e-4, 1e-12);

        // Additivity over a split series when nothing is conditioned on.
        let series = vec![1, 0, 0, 1, 1, 0, 1, 0];
        let full = EdgePanel::from_series(vec![series.clone()], 0).unwrap();
        let left = EdgePanel::from_series(vec![series[..4].to_vec()], 0).unwrap();
        let right = EdgePanel::from_series(vec![series[4..].to_vec()], 4).unwrap();
        let p = ClusterParams::new(vec![], vec![], -0.7).unwrap();
        let a = cluster_loglik(&left, 0, &p, &spec0).unwrap() + cluster_loglik(&right, 0, &p, &spec0).unwrap();
        let b = cluster_loglik(&full, 0, &p, &spec0).unwrap();
        assert_close(a, b, 1e-12);
    }

    #[test]
    fn e_step_trivial_cases() {
        let spec = ModelSpec::new(1, 1, 0, 288).unwrap();
        let model =
            BalarmModel::new(spec, vec![1.0], vec![ClusterParams::new(vec![], vec![1.0], -1.0).unwrap()]).unwrap();
        let panel = EdgePanel::from_series(vec![vec![0, 1, 0, 1], vec![1, 1, 0, 0]], 0).unwrap();
        let tau = e_step(&panel, &model).unwrap();
        assert!(tau.iter().all(|row| row == &vec![1.0]));

        let spec2 = ModelSpec::new(2, 1, 0, 288).unwrap();
        let same = ClusterParams::new(vec![], vec![1.0], -1.0).unwrap();
        let twin = BalarmModel::new(spec2, vec![0.3, 0.7], vec![same.clone(), same.clone()]).unwrap();
        for row in e_step(&panel, &twin).unwrap() {
            assert_close(row[0], 0.3, 1e-12);
            assert_close(row[1], 0.7, 1e-12);
        }

        let degenerate = BalarmModel::new(spec2, vec![0.0, 1.0], vec![same.clone(), same]).unwrap();
        for row in e_step(&panel, &degenerate).unwrap() {
            assert_eq!(row[0], 0.0);
            assert_eq!(row[1], 1.0);
        }
    }

    #[test]
    fn e_step_rows_are_probabilities_and_separate_ab() {
        let model = ab_model();
        let (panel, labels) = simulate_balarm(&model, 200, 1200, 31).unwrap();
        let tau = e_step(&panel, &model).unwrap();
        let mut worst = 0.0f64;
        for row in &tau {
            let sum: f64 = row.iter().sum();
            assert_close(sum, 1.0, 1e-10);
            assert!(row.iter().all(|&t| (0.0..=1.0).contains(&t)));
            worst = worst.max(row[0].min(row[1]));
        }
        assert!(worst < 1e-3, "least confident assignment {worst}");
        let ari = adjusted_rand_index(&hard_labels(&tau), &labels);
        assert!(ari >= 0.95, "ARI {ari}");
    }

    #[test]
    fn m_step_recovers_parameters_from_true_labels() {
        let model = ab_model();
        let (panel, labels) = simulate_balarm(&model, 600, 1200, 17).unwrap();
        let tau: Vec<Vec<f64>> =
            labels.iter().map(|&g| if g == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let flat = flat_model(&model.spec).unwrap();
        let out = m_step(&panel, &tau, &model.spec, &flat, &FitOptions::default()).unwrap();
        for g in 0..2 {
            assert_close(out.model.clusters[g].ar[0], model.clusters[g].ar[0], 0.15);
            assert_close(out.model.clusters[g].intercept, model.clusters[g].intercept, 0.15);
        }
        assert!(out.empty_clusters.is_empty());
    }

    #[test]
    fn m_step_symmetries() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 60, 200, 3).unwrap();
        let flat = flat_model(&model.spec).unwrap();

        let uniform: Vec<Vec<f64>> = vec![vec![0.5, 0.5]; 60];
        let out = m_step(&panel, &uniform, &model.spec, &flat, &FitOptions::default()).unwrap();
        assert_eq!(out.model.clusters[0], out.model.clusters[1]);
        assert_close(out.model.mixing[0], 0.5, 1e-12);

        let one_sided: Vec<Vec<f64>> = vec![vec![1.0, 0.0]; 60];
        let out = m_step(&panel, &one_sided, &model.spec, &flat, &FitOptions::default()).unwrap();
        assert_close(out.model.mixing[0], 1.0, 1e-9);
        assert!(out.model.mixing[1] >= MIXING_FLOOR / 2.0);
        assert_eq!(out.empty_clusters, vec![1]);
        assert_eq!(out.model.clusters[1], flat.clusters[1]);
    }

    #[test]
    fn observed_loglik_matches_single_cluster_sum() {
        let spec = ModelSpec::new(1, 1, 0, 288).unwrap();
        let params = ClusterParams::new(vec![], vec![2.0], -1.5).unwrap();
        let model = BalarmModel::new(spec, vec![1.0], vec![params.clone()]).unwrap();
        let (panel, _) = simulate_balarm(&model, 7, 100, 13).unwrap();
        let direct: f64 =
            (0..7).map(|i| cluster_loglik(&panel, i, &params, &spec).unwrap()).sum();
        assert_close(observed_loglik(&panel, &model).unwrap(), direct, 1e-9);
    }

    #[test]
    fn mixture_likelihood_sums_to_one_over_all_paths() {
        let spec = ModelSpec::new(2, 1, 1, 4).unwrap();
        let model = BalarmModel::new(
            spec,
            vec![0.4, 0.6],
            vec![
                ClusterParams::new(vec![0.5, -0.3], vec![1.2], -0.8).unwrap(),
                ClusterParams::new(vec![-0.2, 0.1], vec![2.5], -2.0).unwrap(),
            ],
        )
        .unwrap();
        let n = 8;
        let mut total = 0.0;
        for bits in 0..(1u32 << (n - 1)) {
            let mut series = vec![1u8];
            for p in 0..(n - 1) {
                series.push(((bits >> p) & 1) as u8);
            }
            let panel = EdgePanel::from_series(vec![series], 0).unwrap();
            total += observed_loglik(&panel, &model).unwrap().exp();
        }
        assert_close(total, 1.0, 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 40, 300, 8).unwrap();
        let swapped = model.permuted(&[1, 0]).unwrap();
        let tau = e_step(&panel, &model).unwrap();
        let tau_swapped = e_step(&panel, &swapped).unwrap();
        for (a, b) in tau.iter().zip(&tau_swapped) {
            assert_close(a[0], b[1], 1e-12);
            assert_close(a[1], b[0], 1e-12);
        }
        let l1 = observed_loglik(&panel, &model).unwrap();
        let l2 = observed_loglik(&panel, &swapped).unwrap();
        assert_close(l1, l2, 1e-10);
    }

    #[test]
    fn edge_order_invariance() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 30, 300, 21).unwrap();
        let order: Vec<usize> = (0..30).rev().collect();
        let reordered = panel.reordered(&order).unwrap();
        let tau = e_step(&panel, &model).unwrap();
        let tau_r = e_step(&reordered, &model).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert_eq!(tau_r[i], tau[src]);
        }

        let labels_tau: Vec<Vec<f64>> = tau.iter().map(|r| r.clone()).collect();
        let flat = flat_model(&model.spec).unwrap();
        let m1 = m_step(&panel, &labels_tau, &model.spec, &flat, &FitOptions::default()).unwrap();
        let tau_perm: Vec<Vec<f64>> = order.iter().map(|&src| tau[src].clone()).collect();
        let m2 = m_step(&reordered, &tau_perm, &model.spec, &flat, &FitOptions::default()).unwrap();
        for g in 0..2 {
            let a = m1.model.clusters[g].to_coefficients();
            let b = m2.model.clusters[g].to_coefficients();
            for (x, y) in a.iter().zip(&b) {
                assert_close(*x, *y, 1e-8);
            }
        }
    }

    #[test]
    fn observed_loglik_dominates_hard_assignment() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 25, 200, 4).unwrap();
        let tau = e_step(&panel, &model).unwrap();
        let labels = hard_labels(&tau);
        let complete: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                model.mixing[g].ln() + cluster_loglik(&panel, i, &model.clusters[g], &model.spec).unwrap()
            })
            .sum();
        let observed = observed_loglik(&panel, &model).unwrap();
        assert!(observed >= complete - 1e-10, "observed {observed} < complete {complete}");
    }

    #[test]
    fn fit_em_single_cluster_matches_pooled_glm() {
        let spec = ModelSpec::new(1, 1, 0, 288).unwrap();
        let params = ClusterParams::new(vec![], vec![2.89], -1.0).unwrap();
        let model = BalarmModel::new(spec, vec![1.0], vec![params]).unwrap();
        let (panel, _) = simulate_balarm(&model, 20, 400, 77).unwrap();
        let fit = fit_em(&panel, &spec, &InitStrategy::RandomResponsibility, 5, &EmSettings::default()).unwrap();

        let rows = crate::glm::build_design(&panel, &spec).unwrap().concat();
        let glm = crate::glm::weighted_logistic_fit(
            &rows,
            &vec![1.0; rows.len()],
            &[0.0, 0.0],
            &FitOptions::default(),
        )
        .unwrap();
        let coef = fit.model.clusters[0].to_coefficients();
        for (a, b) in coef.iter().zip(&glm.coefficients) {
            assert_close(*a, *b, 1e-6);
        }
        assert_eq!(fit.model.mixing, vec![1.0]);
    }

    #[test]
    fn fit_em_recovers_two_clusters() {
        let model = ab_model();
        let mut hits = 0;
        for rep in 0..20 {
            let (panel, truth) = simulate_balarm(&model, 120, 600, 1000 + rep).unwrap();
            let fit = fit_em(&panel, &model.spec, &InitStrategy::SummaryKmeans, rep, &EmSettings::default())
                .unwrap();
            let ari = adjusted_rand_index(&fit.hard_labels, &truth);
            if ari >= 0.95 {
                hits += 1;
            }
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
            }
        }
        assert!(hits >= 18, "only {hits}/20 runs recovered the partition");
    }

    #[test]
    fn fit_em_is_deterministic() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 50, 300, 2).unwrap();
        let s = EmSettings { restarts: Some(3), ..EmSettings::default() };
        let a = fit_em(&panel, &model.spec, &InitStrategy::RandomResponsibility, 11, &s).unwrap();
        let b = fit_em(&panel, &model.spec, &InitStrategy::RandomResponsibility, 11, &s).unwrap();
        assert_eq!(a.model.mixing, b.model.mixing);
        for (x, y) in a.model.clusters.iter().zip(&b.model.clusters) {
            assert_eq!(x, y);
        }
        assert_eq!(a.loglik_trace, b.loglik_trace);
        assert_eq!(a.meta.best_restart, b.meta.best_restart);
    }

    #[test]
    fn initialization_strategies() {
        let model = ab_model();
        let (panel, truth) = simulate_balarm(&model, 120, 600, 55).unwrap();

        let provided = initialize(&panel, &model.spec, &InitStrategy::ProvidedModel(model.clone()), 0).unwrap();
        let EmInit::Model(m) = provided else { panic!("expected a model") };
        let tau = e_step(&panel, &m).unwrap();
        assert!(adjusted_rand_index(&hard_labels(&tau), &truth) >= 0.95);

        let EmInit::Responsibilities(r1) =
            initialize(&panel, &model.spec, &InitStrategy::RandomResponsibility, 9).unwrap()
        else {
            panic!("expected responsibilities")
        };
        let EmInit::Responsibilities(r2) =
            initialize(&panel, &model.spec, &InitStrategy::RandomResponsibility, 9).unwrap()
        else {
            panic!("expected responsibilities")
        };
        let EmInit::Responsibilities(r3) =
            initialize(&panel, &model.spec, &InitStrategy::RandomResponsibility, 10).unwrap()
        else {
            panic!("expected responsibilities")
        };
        assert_eq!(r1, r2);
        assert_ne!(r1, r3);
        for row in &r1 {
            assert_close(row.iter().sum::<f64>(), 1.0, 1e-12);
        }

        let EmInit::Responsibilities(km) =
            initialize(&panel, &model.spec, &InitStrategy::SummaryKmeans, 23).unwrap()
        else {
            panic!("expected responsibilities")
        };
        let km_labels = hard_labels(&km);
        assert_close(adjusted_rand_index(&km_labels, &truth), 1.0, 1e-12);
    }

    #[test]
    fn align_labels_examples() {
        let model = ab_model();
        assert_eq!(align_labels(&model, &model).unwrap(), vec![0, 1]);
        let swapped = model.permuted(&[1, 0]).unwrap();
        assert_eq!(align_labels(&model, &swapped).unwrap(), vec![1, 0]);

        let spec = ModelSpec::new(3, 1, 1, 24).unwrap();
        let clusters: Vec<ClusterParams> = (0..3)
            .map(|g| {
                ClusterParams::new(vec![0.1 * g as f64, -0.2], vec![1.0 + g as f64], -1.0 - g as f64).unwrap()
            })
            .collect();
        let reference = BalarmModel::new(spec, vec![0.2, 0.3, 0.5], clusters).unwrap();
        let shuffled = reference.permuted(&[2, 0, 1]).unwrap();
        let mut nudged = shuffled.clone();
        for (g, c) in nudged.clusters.iter_mut().enumerate() {
            c.intercept += 0.01 * (g as f64 - 1.0);
            c.ar[0] -= 0.007;
        }
        let perm = align_labels(&reference, &nudged).unwrap();
        let restored = nudged.permuted(&perm).unwrap();
        for (a, b) in reference.clusters.iter().zip(&restored.clusters) {
            assert_close(a.intercept, b.intercept, 0.05);
            assert_close(a.ar[0], b.ar[0], 0.05);
        }
    }

    #[test]
    fn ari_extremes() {
        assert_close(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0, 1e-12);
        assert_close(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0, 1e-12);
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 1, 0, 1, 0, 1];
        assert!(adjusted_rand_index(&a, &b) < 0.5);
    }

    #[test]
    fn histogram_and_direct_paths_agree() {
        let spec = ModelSpec::new(2, 1, 1, 12).unwrap();
        let model = BalarmModel::new(
            spec,
            vec![0.5, 0.5],
            vec![
                ClusterParams::new(vec![0.4, -0.1], vec![2.0], -1.5).unwrap(),
                ClusterParams::new(vec![-0.2, 0.3], vec![3.0], -3.0).unwrap(),
            ],
        )
        .unwrap();
        let (panel, _) = simulate_balarm(&model, 15, 150, 99).unwrap();
        let ctx = EmContext::new(&panel, spec).unwrap();
        assert!(ctx.hist.is_some());
        let pooled = loglik_matrix(&ctx, &model);
        let direct = loglik_matrix(&EmContext { panel: &panel, spec, hist: None }, &model);
        for (a, b) in pooled.iter().zip(&direct) {
            for (x, y) in a.iter().zip(b) {
                assert_close(*x, *y, 1e-9);
            }
        }
    }

    #[test]
    fn fit_em_validates_inputs() {
        let model = ab_model();
        let (panel, _) = simulate_balarm(&model, 5, 50, 1).unwrap();
        let spec_big = ModelSpec::new(6, 1, 0, 288).unwrap();
        assert!(matches!(
            fit_em(&panel, &spec_big, &InitStrategy::RandomResponsibility, 0, &EmSettings::default()),
            Err(BalarmError::InsufficientData(_))
        ));
        let bad = EmSettings { tol: 0.0, ..EmSettings::default() };
        assert!(fit_em(&panel, &model.spec, &InitStrategy::RandomResponsibility, 0, &bad).is_err());
    }
}
