//! Model selection: BIC and a grid sweep over cluster count and harmonic
//! order.
//!
//! The sample size in the penalty is the number of conditioned Bernoulli
//! observations, `J * (n - K)`, i.e. the count of likelihood terms; it is
//! emitted alongside `q` and the log-likelihood so alternative conventions
//! can be recomputed from the table.

use rayon::prelude::*;

use crate::em::{fit_em, EmSettings, InitStrategy};
use crate::error::{BalarmError, Result};
use crate::model::{EdgePanel, FitResult, ModelSpec};
use crate::rng::{derive_seed2, tags};

/// Count of free parameters: `G - 1` mixing weights plus `2H + K + 1`
/// coefficients per cluster.
pub fn n_free_params(spec: &ModelSpec) -> usize {
    (spec.n_clusters - 1) + spec.n_clusters * spec.covariate_dim()
}

/// Count of conditioned observations, `J * (n - K)`.
pub fn n_observations(panel: &EdgePanel, spec: &ModelSpec) -> usize {
    panel.n_edges() * (panel.n_snapshots() - spec.ar_order)
}

/// Bayesian information criterion of a fit on the panel it was produced
/// from: `-2 * loglik + q * ln(N)`. Lower is better.
pub fn bic(fit: &FitResult, panel: &EdgePanel) -> f64 {
    let q = n_free_params(&fit.model.spec);
    let n_obs = n_observations(panel, &fit.model.spec);
    -2.0 * fit.loglik() + q as f64 * (n_obs as f64).ln()
}

/// One row of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    /// Cluster count of this cell.
    pub n_clusters: usize,
    /// Harmonic order of this cell.
    pub harmonic_order: usize,
    /// Final observed log-likelihood, when the fit succeeded.
    pub loglik: Option<f64>,
    /// Free-parameter count.
    pub n_params: usize,
    /// Conditioned observation count.
    pub n_obs: usize,
    /// BIC, when the fit succeeded.
    pub bic: Option<f64>,
    /// Whether EM reported convergence.
    pub converged: bool,
    /// Restarts attempted for this cell.
    pub restarts: usize,
    /// Failure description when the fit errored.
    pub error: Option<String>,
}

/// Sweep outcome: all rows in grid order, plus the index of the best row.
#[derive(Debug, Clone)]
pub struct SweepTable {
    /// Rows in `(G, H)` grid order, `G` outermost.
    pub rows: Vec<SweepRow>,
    /// Index of the minimum-BIC row among successful fits.
    pub best: Option<usize>,
}

/// Fits every `(G, H)` grid cell with shared settings and a per-cell seed
/// derived from `(seed, G, H)`, so cells are independent of scheduling and
/// of each other.
///
/// Individual fit failures are recorded in their row rather than aborting
/// the sweep. Fitted models are returned alongside the table, in row order,
/// for callers that keep the winner.
pub fn sweep(
    panel: &EdgePanel, g_list: &[usize], h_list: &[usize], ar_order: usize, period: usize,
    strategy: &InitStrategy, settings: &EmSettings, seed: u64,
) -> Result<(SweepTable, Vec<Option<FitResult>>)> {
    if g_list.is_empty() || h_list.is_empty() {
        return Err(BalarmError::InvalidSpec("sweep needs at least one G and one H".into()));
    }
    let cells: Vec<(usize, usize)> =
        g_list.iter().flat_map(|&g| h_list.iter().map(move |&h| (g, h))).collect();

    let outcomes: Vec<(SweepRow, Option<FitResult>)> = cells
        .par_iter()
        .map(|&(g, h)| {
            let cell_seed = derive_seed2(derive_seed2(seed, tags::SWEEP_CELL, g as u64), tags::SWEEP_CELL, h as u64);
            let fit_attempt = ModelSpec::new(g, ar_order, h, period)
                .and_then(|spec| fit_em(panel, &spec, strategy, cell_seed, settings).map(|f| (spec, f)));
            match fit_attempt {
                Ok((spec, fit)) => {
                    let row = SweepRow {
                        n_clusters: g,
                        harmonic_order: h,
                        loglik: Some(fit.loglik()),
                        n_params: n_free_params(&spec),
                        n_obs: n_observations(panel, &spec),
                        bic: Some(bic(&fit, panel)),
                        converged: fit.converged,
                        restarts: fit.meta.restarts,
                        error: None,
                    };
                    (row, Some(fit))
                }
                Err(e) => {
                    let row = SweepRow {
                        n_clusters: g,
                        harmonic_order: h,
                        loglik: None,
                        n_params: (g - 1) + g * (2 * h + ar_order + 1),
                        n_obs: panel.n_edges() * panel.n_snapshots().saturating_sub(ar_order),
                        bic: None,
                        converged: false,
                        restarts: 0,
                        error: Some(e.to_string()),
                    };
                    (row, None)
                }
            }
        })
        .collect();

    let (rows, fits): (Vec<SweepRow>, Vec<Option<FitResult>>) = outcomes.into_iter().unzip();
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.bic.map(|b| (i, b)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok((SweepTable { rows, best }, fits))
}
