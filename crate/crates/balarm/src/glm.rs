//! Weighted logistic regression by penalized IRLS.
//!
//! Design rows pair a covariate vector (harmonic basis of the timestamp,
//! lagged edge states, constant) with a binary response; one row exists per
//! edge per time step after the conditioning window. The fitter maximizes a
//! weighted Bernoulli log-likelihood with an optional ridge penalty on the
//! non-intercept coefficients, using Newton steps with step-halving so the
//! penalized objective never decreases. Accumulation over rows is
//! parallelized in fixed blocks and reduced in block order, so results are
//! bit-identical for any worker count.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{BalarmError, Result};
use crate::model::{harmonic_basis_into, inv_logit, log1p_exp, EdgePanel, ModelSpec};

/// One observation of the conditional likelihood: covariates, response, and
/// a base weight (multiplied with the caller's weight vector when fitting).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    /// Covariates: harmonic basis, then lags (most recent first), then 1.
    pub covariates: Vec<f64>,
    /// The edge state being predicted.
    pub response: u8,
    /// Base weight; [`build_design`] sets 1.
    pub weight: f64,
}

/// Options for one IRLS fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Ridge strength on non-intercept coefficients.
    pub ridge: f64,
    /// Gradient sup-norm below which the fit counts as converged.
    pub tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { ridge: 1e-6, tol: 1e-8, max_iter: 100 }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !self.ridge.is_finite() || self.ridge < 0.0 {
            return Err(BalarmError::InvalidParams("ridge must be finite and non-negative".into()));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(BalarmError::InvalidParams("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(BalarmError::InvalidParams("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one IRLS fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    /// Coefficients in design-row order: harmonics, lags, intercept.
    pub coefficients: Vec<f64>,
    /// True when the gradient sup-norm reached `tol`.
    pub converged: bool,
    /// Newton steps taken.
    pub n_iters: usize,
    /// Penalized log-likelihood at the returned coefficients.
    pub penalized_loglik: f64,
    /// Gradient sup-norm at the returned coefficients.
    pub grad_sup_norm: f64,
    /// Penalized log-likelihood after each accepted step, starting at init.
    pub objective_trace: Vec<f64>,
}

/// Harmonic basis evaluated at each phase of the period, row-major
/// `period x 2H`.
pub(crate) fn basis_table(spec: &ModelSpec) -> Vec<f64> {
    let h2 = spec.harmonic_dim();
    let mut table = vec![0.0; spec.period * h2];
    for ph in 0..spec.period {
        harmonic_basis_into(ph as i64, spec.harmonic_order, spec.period, &mut table[ph * h2..(ph + 1) * h2]);
    }
    table
}

/// Builds the per-edge design rows for a panel: one row per edge per time
/// step `l` past the conditioning window, with unit base weight.
pub fn build_design(panel: &EdgePanel, spec: &ModelSpec) -> Result<Vec<Vec<DesignRow>>> {
    spec.validate()?;
    let k = spec.ar_order;
    let n = panel.n_snapshots();
    if n <= k {
        return Err(BalarmError::InvalidSpec(format!("panel length {n} must exceed ar_order {k}")));
    }
    let table = basis_table(spec);
    let h2 = spec.harmonic_dim();
    let dim = spec.covariate_dim();
    let design = (0..panel.n_edges())
        .map(|i| {
            (k..n)
                .map(|l| {
                    let ph = panel.timestamp(l).rem_euclid(spec.period as i64) as usize;
                    let mut covariates = vec![0.0; dim];
                    covariates[..h2].copy_from_slice(&table[ph * h2..(ph + 1) * h2]);
                    for lag in 0..k {
                        covariates[h2 + lag] = panel.value(i, l - 1 - lag) as f64;
                    }
                    covariates[dim - 1] = 1.0;
                    DesignRow { covariates, response: panel.value(i, l), weight: 1.0 }
                })
                .collect()
        })
        .collect();
    Ok(design)
}

/// A source of weighted design rows, visited block by block. Blocks are the
/// unit of parallelism; rows within a block are visited in a fixed order and
/// block results are reduced in block order.
pub(crate) trait RowBlocks: Sync {
    fn dim(&self) -> usize;
    fn n_blocks(&self) -> usize;
    /// Calls `f(covariates, response, weight)` for each row of the block.
    fn visit_block(&self, block: usize, f: &mut dyn FnMut(&[f64], f64, f64));
}

const SLICE_CHUNK: usize = 4096;

/// Flat rows with an external weight vector; effective weight is the product.
struct SliceSource<'a> {
    rows: &'a [DesignRow],
    weights: &'a [f64],
    dim: usize,
}

impl RowBlocks for SliceSource<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_blocks(&self) -> usize {
        self.rows.len().div_ceil(SLICE_CHUNK).max(1)
    }

    fn visit_block(&self, block: usize, f: &mut dyn FnMut(&[f64], f64, f64)) {
        let lo = block * SLICE_CHUNK;
        let hi = (lo + SLICE_CHUNK).min(self.rows.len());
        for (row, &w) in self.rows[lo..hi].iter().zip(&self.weights[lo..hi]) {
            f(&row.covariates, row.response as f64, row.weight * w);
        }
    }
}

/// Streams design rows straight from a panel, one block per edge, with an
/// optional per-edge weight. Avoids materializing the row matrix in the EM
/// hot path.
pub(crate) struct PanelSource<'a> {
    panel: &'a EdgePanel,
    spec: &'a ModelSpec,
    basis: Vec<f64>,
    edge_weights: Option<&'a [f64]>,
}

impl<'a> PanelSource<'a> {
    pub(crate) fn new(panel: &'a EdgePanel, spec: &'a ModelSpec) -> Self {
        Self { panel, spec, basis: basis_table(spec), edge_weights: None }
    }

    pub(crate) fn with_edge_weights(mut self, weights: &'a [f64]) -> Self {
        debug_assert_eq!(weights.len(), self.panel.n_edges());
        self.edge_weights = Some(weights);
        self
    }
}

impl RowBlocks for PanelSource<'_> {
    fn dim(&self) -> usize {
        self.spec.covariate_dim()
    }

    fn n_blocks(&self) -> usize {
        self.panel.n_edges()
    }

    fn visit_block(&self, block: usize, f: &mut dyn FnMut(&[f64], f64, f64)) {
        let w = self.edge_weights.map_or(1.0, |ws| ws[block]);
        if w == 0.0 {
            return;
        }
        let k = self.spec.ar_order;
        let h2 = self.spec.harmonic_dim();
        let dim = self.spec.covariate_dim();
        let period = self.spec.period as i64;
        let series = self.panel.series(block);
        let mut cov = vec![0.0; dim];
        cov[dim - 1] = 1.0;
        for l in k..series.len() {
            let ph = self.panel.timestamp(l).rem_euclid(period) as usize;
            cov[..h2].copy_from_slice(&self.basis[ph * h2..(ph + 1) * h2]);
            for lag in 0..k {
                cov[h2 + lag] = series[l - 1 - lag] as f64;
            }
            f(&cov, series[l] as f64, w);
        }
    }
}

/// Penalized log-likelihood, gradient, and expected Hessian at `beta`.
pub(crate) fn accumulate<B: RowBlocks>(src: &B, beta: &[f64], ridge: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = src.dim();
    let parts: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..src.n_blocks())
        .into_par_iter()
        .map(|b| {
            let mut hess = DMatrix::zeros(p, p);
            let mut grad = DVector::zeros(p);
            let mut obj = 0.0;
            src.visit_block(b, &mut |x, y, w| {
                if w == 0.0 {
                    return;
                }
                let mut eta = 0.0;
                for (xi, bi) in x.iter().zip(beta) {
                    eta += xi * bi;
                }
                let mu = inv_logit(eta);
                obj += w * (y * eta - log1p_exp(eta));
                let r = w * (y - mu);
                let v = w * mu * (1.0 - mu);
                for i in 0..p {
                    grad[i] += r * x[i];
                    let vx = v * x[i];
                    for j in i..p {
                        hess[(i, j)] += vx * x[j];
                    }
                }
            });
            (hess, grad, obj)
        })
        .collect();

    let mut hess = DMatrix::zeros(p, p);
    let mut grad = DVector::zeros(p);
    let mut obj = 0.0;
    for (hb, gb, ob) in parts {
        hess += hb;
        grad += gb;
        obj += ob;
    }
    for i in 0..p.saturating_sub(1) {
        hess[(i, i)] += ridge;
        grad[i] -= ridge * beta[i];
        obj -= 0.5 * ridge * beta[i] * beta[i];
    }
    for i in 0..p {
        for j in 0..i {
            hess[(i, j)] = hess[(j, i)];
        }
    }
    (hess, grad, obj)
}

/// Penalized log-likelihood alone, for line-search probes.
pub(crate) fn objective<B: RowBlocks>(src: &B, beta: &[f64], ridge: f64) -> f64 {
    let parts: Vec<f64> = (0..src.n_blocks())
        .into_par_iter()
        .map(|b| {
            let mut obj = 0.0;
            src.visit_block(b, &mut |x, y, w| {
                if w == 0.0 {
                    return;
                }
                let mut eta = 0.0;
                for (xi, bi) in x.iter().zip(beta) {
                    eta += xi * bi;
                }
                obj += w * (y * eta - log1p_exp(eta));
            });
            obj
        })
        .collect();
    let mut obj: f64 = parts.iter().sum();
    for bi in &beta[..beta.len().saturating_sub(1)] {
        obj -= 0.5 * ridge * bi * bi;
    }
    obj
}

/// Newton/IRLS loop with step-halving over any row source.
pub(crate) fn irls<B: RowBlocks>(src: &B, init: &[f64], options: &FitOptions) -> Result<GlmFit> {
    options.validate()?;
    let p = src.dim();
    if init.len() != p {
        return Err(BalarmError::DimensionMismatch(format!("init has {} coefficients, design has {p}", init.len())));
    }
    let mut beta = DVector::from_column_slice(init);
    let (mut hess, mut grad, mut obj) = accumulate(src, beta.as_slice(), options.ridge);
    let mut trace = vec![obj];
    let mut converged = grad.amax() <= options.tol;
    let mut n_iters = 0;

    while !converged && n_iters < options.max_iter {
        let chol = Cholesky::new(hess.clone()).ok_or_else(|| {
            BalarmError::Singular("weighted normal system is not positive definite (separation or empty support)".into())
        })?;
        let delta = chol.solve(&grad);
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(BalarmError::Singular("Newton step is not finite".into()));
        }

        // Once the model gain drops below the objective's floating-point
        // resolution, an objective comparison can no longer certify ascent;
        // the full Newton step still contracts the gradient.
        let predicted_gain = 0.5 * grad.dot(&delta);
        let cand = if predicted_gain <= 32.0 * f64::EPSILON * obj.abs().max(1.0) {
            &beta + &delta
        } else {
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = &beta + &delta * step;
                if objective(src, cand.as_slice(), options.ridge) >= obj {
                    accepted = Some(cand);
                    break;
                }
                step *= 0.5;
            }
            let Some(cand) = accepted else {
                // No ascent direction left; report the current stationary check.
                break;
            };
            cand
        };

        beta = cand;
        let prev = obj;
        (hess, grad, obj) = accumulate(src, beta.as_slice(), options.ridge);
        debug_assert!(
            obj >= prev - 1e-9 * prev.abs().max(1.0),
            "accepted step decreased the objective: {prev} -> {obj}"
        );
        trace.push(obj);
        n_iters += 1;
        if grad.amax() <= options.tol {
            converged = true;
            break;
        }
    }

    Ok(GlmFit {
        coefficients: beta.iter().copied().collect(),
        converged,
        n_iters,
        penalized_loglik: obj,
        grad_sup_norm: grad.amax(),
        objective_trace: trace,
    })
}

/// Fits a weighted logistic regression over `rows`, with effective weight
/// `rows[j].weight * weights[j]`, starting from `init`.
///
/// Returns the last iterate with `converged = false` when the iteration cap
/// is hit; a non-positive-definite normal system (complete separation with
/// no ridge, or zero effective support) is an error so callers can escalate
/// the ridge.
pub fn weighted_logistic_fit(rows: &[DesignRow], weights: &[f64], init: &[f64], options: &FitOptions) -> Result<GlmFit> {
    if rows.is_empty() {
        return Err(BalarmError::InsufficientData("no design rows".into()));
    }
    if weights.len() != rows.len() {
        return Err(BalarmError::DimensionMismatch(format!(
            "{} weights for {} rows",
            weights.len(),
            rows.len()
        )));
    }
    let dim = rows[0].covariates.len();
    for (j, row) in rows.iter().enumerate() {
        if row.covariates.len() != dim {
            return Err(BalarmError::DimensionMismatch(format!("row {j} has dimension {}", row.covariates.len())));
        }
        if row.response > 1 {
            return Err(BalarmError::InvalidParams(format!("row {j} response must be 0 or 1")));
        }
        if !row.weight.is_finite() || row.weight < 0.0 {
            return Err(BalarmError::InvalidParams(format!("row {j} base weight must be finite and non-negative")));
        }
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(BalarmError::InvalidParams("weights must be finite and non-negative".into()));
    }
    let total: f64 = rows.iter().zip(weights).map(|(r, &w)| r.weight * w).sum();
    if total <= 0.0 {
        return Err(BalarmError::InsufficientData("all effective weights are zero".into()));
    }
    irls(&SliceSource { rows, weights, dim }, init, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alarm::simulate_alarm;
    use crate::model::{ClusterParams, EdgePanel};
    use rand::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn intercept_rows(responses: &[u8]) -> Vec<DesignRow> {
        responses.iter().map(|&r| DesignRow { covariates: vec![1.0], response: r, weight: 1.0 }).collect()
    }

    #[test]
    fn intercept_only_matches_closed_form() {
        let rows = intercept_rows(&[1, 0, 0, 0, 1, 0, 0, 0]);
        let weights = vec![1.0; rows.len()];
        let options = FitOptions { ridge: 0.0, ..FitOptions::default() };
        let fit = weighted_logistic_fit(&rows, &weights, &[0.0], &options).unwrap();
        assert!(fit.converged);
        assert!(fit.grad_sup_norm <= 1e-8);
        assert_close(fit.coefficients[0], -1.0986122886681097, 1e-7);
    }

    #[test]
    fn objective_trace_is_nondecreasing() {
        let series = simulate_alarm(
            &ClusterParams::new(vec![], vec![2.89], -1.0).unwrap(),
            &crate::model::ModelSpec::new(1, 1, 0, 288).unwrap(),
            4000,
            5,
            &[1],
            0,
        )
        .unwrap();
        let panel = EdgePanel::from_series(vec![series], 0).unwrap();
        let spec = crate::model::ModelSpec::new(1, 1, 0, 288).unwrap();
        let rows = build_design(&panel, &spec).unwrap().concat();
        let weights = vec![1.0; rows.len()];
        let fit = weighted_logistic_fit(&rows, &weights, &[0.0, 0.0], &FitOptions::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0], "objective fell from {} to {}", w[0], w[1]);
        }
        assert!(fit.converged);
    }

    #[test]
    fn zero_weights_restrict_to_one_edge() {
        let spec = crate::model::ModelSpec::new(1, 1, 1, 12).unwrap();
        let params0 = ClusterParams::new(vec![0.5, -0.2], vec![1.0], -1.0).unwrap();
        let params1 = ClusterParams::new(vec![-0.3, 0.4], vec![2.5], -2.5).unwrap();
        let s0 = simulate_alarm(&params0, &spec, 600, 21, &[0], 0).unwrap();
        let s1 = simulate_alarm(&params1, &spec, 600, 22, &[0], 0).unwrap();
        let panel = EdgePanel::from_series(vec![s0.clone(), s1], 0).unwrap();
        let per_edge = build_design(&panel, &spec).unwrap();
        let flat = per_edge.concat();
        let mut weights = vec![0.0; flat.len()];
        weights[..per_edge[0].len()].fill(1.0);
        let init = vec![0.0; spec.covariate_dim()];
        let opts = FitOptions::default();
        let joint = weighted_logistic_fit(&flat, &weights, &init, &opts).unwrap();

        let solo_panel = EdgePanel::from_series(vec![s0], 0).unwrap();
        let solo_rows = build_design(&solo_panel, &spec).unwrap().concat();
        let solo = weighted_logistic_fit(&solo_rows, &vec![1.0; solo_rows.len()], &init, &opts).unwrap();
        for (a, b) in joint.coefficients.iter().zip(&solo.coefficients) {
            assert_close(*a, *b, 1e-10);
        }
    }

    #[test]
    fn recovers_generating_parameters() {
        let spec = crate::model::ModelSpec::new(1, 1, 0, 288).unwrap();
        let params = ClusterParams::new(vec![], vec![2.89], -1.0).unwrap();
        let series = simulate_alarm(&params, &spec, 100_000, 17, &[1], 0).unwrap();
        let panel = EdgePanel::from_series(vec![series], 0).unwrap();
        let rows = build_design(&panel, &spec).unwrap().concat();
        let fit =
            weighted_logistic_fit(&rows, &vec![1.0; rows.len()], &[0.0, 0.0], &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert_close(fit.coefficients[0], 2.89, 0.1);
        assert_close(fit.coefficients[1], -1.0, 0.1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(99, 0);
        let p = 4;
        let rows: Vec<DesignRow> = (0..60)
            .map(|_| {
                let mut cov: Vec<f64> = (0..p - 1).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                cov.push(1.0);
                DesignRow { covariates: cov, response: (rng.random::<f64>() < 0.4) as u8, weight: 1.0 }
            })
            .collect();
        let weights: Vec<f64> = (0..rows.len()).map(|_| rng.random::<f64>() + 0.1).collect();
        let beta: Vec<f64> = (0..p).map(|_| rng.random::<f64>() - 0.5).collect();
        let ridge = 0.3;
        let src = SliceSource { rows: &rows, weights: &weights, dim: p };
        let (_, grad, _) = accumulate(&src, &beta, ridge);
        let h = 1e-5;
        for i in 0..p {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (objective(&src, &up, ridge) - objective(&src, &dn, ridge)) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                "coefficient {i}: analytic {} vs finite difference {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn weight_scaling_leaves_unpenalized_fit_unchanged() {
        let rows = intercept_rows(&[1, 1, 0, 1, 0, 0, 0, 1, 0, 0]);
        let mut rows2 = rows.clone();
        for r in &mut rows2 {
            r.weight = 1.0;
        }
        let base: Vec<f64> = (1..=rows.len()).map(|i| 0.2 + 0.05 * i as f64).collect();
        let scaled: Vec<f64> = base.iter().map(|w| w * 3.7).collect();
        let opts = FitOptions { ridge: 0.0, ..FitOptions::default() };
        let a = weighted_logistic_fit(&rows, &base, &[0.0], &opts).unwrap();
        let b = weighted_logistic_fit(&rows2, &scaled, &[0.0], &opts).unwrap();
        assert_close(a.coefficients[0], b.coefficients[0], 1e-8);
    }

    #[test]
    fn collinear_columns_without_ridge_are_singular() {
        let mut rng = crate::rng::stream_rng(3, 0);
        let rows: Vec<DesignRow> = (0..50)
            .map(|_| {
                let x = rng.random::<f64>();
                DesignRow {
                    covariates: vec![x, x, 1.0],
                    response: (rng.random::<f64>() < 0.5) as u8,
                    weight: 1.0,
                }
            })
            .collect();
        let weights = vec![1.0; rows.len()];
        let opts = FitOptions { ridge: 0.0, ..FitOptions::default() };
        let err = weighted_logistic_fit(&rows, &weights, &[0.0; 3], &opts).unwrap_err();
        assert!(matches!(err, BalarmError::Singular(_)), "got {err:?}");
        // The same design fits once the ridge makes the system definite.
        let ridged = FitOptions::default();
        assert!(weighted_logistic_fit(&rows, &weights, &[0.0; 3], &ridged).is_ok());
    }

    #[test]
    fn input_validation() {
        let rows = intercept_rows(&[1, 0]);
        let opts = FitOptions::default();
        assert!(weighted_logistic_fit(&[], &[], &[0.0], &opts).is_err());
        assert!(weighted_logistic_fit(&rows, &[1.0], &[0.0], &opts).is_err());
        assert!(weighted_logistic_fit(&rows, &[1.0, -1.0], &[0.0], &opts).is_err());
        assert!(weighted_logistic_fit(&rows, &[0.0, 0.0], &[0.0], &opts).is_err());
        assert!(weighted_logistic_fit(&rows, &[1.0, 1.0], &[0.0, 0.0], &opts).is_err());
        let bad_opts = FitOptions { ridge: -1.0, ..opts };
        assert!(weighted_logistic_fit(&rows, &[1.0, 1.0], &[0.0], &bad_opts).is_err());
    }

    #[test]
    fn design_unrolls_lags_and_harmonics() {
        let spec = crate::model::ModelSpec::new(1, 1, 0, 288).unwrap();
        let panel = EdgePanel::from_series(vec![vec![0, 1, 1]], 0).unwrap();
        let rows = build_design(&panel, &spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].len(), 2);
        assert_eq!(rows[0][0].covariates, vec![0.0, 1.0]);
        assert_eq!(rows[0][0].response, 1);
        assert_eq!(rows[0][1].covariates, vec![1.0, 1.0]);
        assert_eq!(rows[0][1].response, 1);

        let spec_h = crate::model::ModelSpec::new(1, 0, 1, 288).unwrap();
        let rows_h = build_design(&panel, &spec_h).unwrap();
        assert_eq!(rows_h[0].len(), 3);
        assert!(rows_h[0].iter().all(|r| r.covariates.len() == 3));

        let spec_full = crate::model::ModelSpec::new(1, 1, 3, 288).unwrap();
        assert_eq!(spec_full.covariate_dim(), 8);
        let panel5 = EdgePanel::from_series(vec![vec![0, 1, 0, 1, 0, 1, 1]; 5], 0).unwrap();
        let rows5 = build_design(&panel5, &spec_full).unwrap();
        assert_eq!(rows5.len(), 5);
        assert!(rows5.iter().all(|e| e.len() == 6 && e[0].covariates.len() == 8));

        assert!(build_design(&EdgePanel::from_series(vec![vec![1]], 0).unwrap(), &spec).is_err());
    }
}
