//! Parametric bootstrap of a fitted mixture model: simulate replicates,
//! refit starting from the fitted parameters, align labels, and summarize
//! the time-of-day curves by pointwise quantile bands.

use rayon::prelude::*;

use crate::alarm::{cyclo_curves, simulate_balarm, CycloCurves};
use crate::em::{align_labels, fit_em, EmSettings, InitStrategy};
use crate::error::{BalarmError, Result};
use crate::model::BalarmModel;
use crate::rng::{derive_seed2, tags};

/// Options for [`parametric_bootstrap`].
#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    /// Fitted maximum time-of-day probability below which a cluster's
    /// correlation bands are suppressed: they are too unstable to be
    /// meaningful when the edge is almost always off.
    pub rho_threshold: f64,
    /// Settings for the replicate refits. The restart count is forced to
    /// one, since every refit starts at the model being bootstrapped.
    pub em: EmSettings,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { rho_threshold: 0.04, em: EmSettings::default() }
    }
}

/// Pointwise quantile curves across replicates, one entry per time of day.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCurves {
    /// 0.025 quantile.
    pub lower: Vec<f64>,
    /// 0.5 quantile.
    pub median: Vec<f64>,
    /// 0.975 quantile.
    pub upper: Vec<f64>,
}

/// Bands and reference curves for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBands {
    /// Bands for the on-probability curve.
    pub p: BandCurves,
    /// On-probability curve of the model the bootstrap ran on.
    pub p_fit: Vec<f64>,
    /// Bands for the lag-1 autocorrelation curve; `None` when the fitted
    /// maximum on-probability is at or below the reporting threshold.
    pub rho: Option<BandCurves>,
    /// Lag-1 autocorrelation curve of the model the bootstrap ran on.
    pub rho_fit: Vec<f64>,
    /// Mean over time of day of (median − fitted) for the probability curve.
    pub p_bias: f64,
    /// Same for the correlation curve, where bands are reported.
    pub rho_bias: Option<f64>,
}

/// Output of [`parametric_bootstrap`].
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapBands {
    /// Per-cluster bands, indexed like the model's clusters.
    pub clusters: Vec<ClusterBands>,
    /// One row per kept replicate: the mixing weights, then each cluster's
    /// coefficients in [`crate::ClusterParams::to_coefficients`] order,
    /// after label alignment.
    pub replicate_params: Vec<Vec<f64>>,
    /// Replicates dropped because simulation or refitting failed.
    pub n_failed: usize,
    /// Requested replicate count.
    pub n_requested: usize,
}

/// Linear-interpolation quantile of an ascending-sorted sample.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise (0.025, 0.5, 0.975) bands over replicate curves.
fn bands_over(curves: &[&[f64]], period: usize) -> BandCurves {
    let mut lower = vec![0.0; period];
    let mut median = vec![0.0; period];
    let mut upper = vec![0.0; period];
    let mut column = vec![0.0; curves.len()];
    for l in 0..period {
        for (slot, curve) in column.iter_mut().zip(curves) {
            *slot = curve[l];
        }
        column.sort_by(f64::total_cmp);
        lower[l] = quantile_sorted(&column, 0.025);
        median[l] = quantile_sorted(&column, 0.5);
        upper[l] = quantile_sorted(&column, 0.975);
    }
    BandCurves { lower, median, upper }
}

fn mean_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64
}

/// Simulate `n_replicates` panels of `n_edges × n` from `model`, refit each
/// with a single EM run initialized at `model`, align the fitted clusters to
/// `model`, and return pointwise 95% quantile bands for every cluster's
/// time-of-day curves.
///
/// Replicate `b` uses the RNG stream derived from `(seed, b)`, so results
/// are identical across runs and worker counts. Replicates whose refit
/// fails are dropped from the quantiles and counted; more than 20% failures
/// is an error.
///
/// Correlation bands are reported only for clusters whose fitted maximum
/// on-probability exceeds `options.rho_threshold`; for near-silent edges
/// the autocorrelation is not estimable at realistic lengths.
pub fn parametric_bootstrap(
    model: &BalarmModel, n_edges: usize, n: usize, n_replicates: usize, seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapBands> {
    model.validate()?;
    if n_replicates == 0 {
        return Err(BalarmError::InvalidParams("need at least one bootstrap replicate".into()));
    }
    if !options.rho_threshold.is_finite() {
        return Err(BalarmError::InvalidParams("rho_threshold must be finite".into()));
    }
    let spec = model.spec;
    let fitted: Vec<CycloCurves> =
        model.clusters.iter().map(|c| cyclo_curves(c, &spec)).collect::<Result<_>>()?;

    let mut settings = options.em.clone();
    settings.restarts = Some(1);

    let replicates: Vec<Result<(Vec<f64>, Vec<CycloCurves>)>> = (0..n_replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed2(seed, tags::BOOT_REP, rep as u64);
            let (panel, _) = simulate_balarm(model, n_edges, n, rep_seed)?;
            let strategy = InitStrategy::ProvidedModel(model.clone());
            let fit = fit_em(&panel, &spec, &strategy, rep_seed, &settings)?;
            let aligned = fit.model.permuted(&align_labels(model, &fit.model)?)?;
            let curves: Vec<CycloCurves> =
                aligned.clusters.iter().map(|c| cyclo_curves(c, &spec)).collect::<Result<_>>()?;
            let mut row = aligned.mixing;
            for cluster in &aligned.clusters {
                row.extend(cluster.to_coefficients());
            }
            Ok((row, curves))
        })
        .collect();

    let n_failed = replicates.iter().filter(|r| r.is_err()).count();
    if n_failed * 5 > n_replicates {
        let first = replicates.iter().find_map(|r| r.as_ref().err()).expect("at least one failure");
        return Err(BalarmError::NonConvergence(format!(
            "{n_failed}/{n_replicates} bootstrap replicates failed; first failure: {first}"
        )));
    }
    let kept: Vec<(Vec<f64>, Vec<CycloCurves>)> =
        replicates.into_iter().filter_map(|r| r.ok()).collect();

    let clusters = (0..model.n_clusters())
        .map(|g| {
            let p_reps: Vec<&[f64]> = kept.iter().map(|(_, c)| c[g].p_curve.as_slice()).collect();
            let rho_reps: Vec<&[f64]> =
                kept.iter().map(|(_, c)| c[g].rho_curve.as_slice()).collect();
            let p = bands_over(&p_reps, spec.period);
            let p_fit = fitted[g].p_curve.clone();
            let rho_fit = fitted[g].rho_curve.clone();
            let p_bias = mean_diff(&p.median, &p_fit);
            let reportable = p_fit.iter().cloned().fold(f64::MIN, f64::max) > options.rho_threshold;
            let rho = reportable.then(|| bands_over(&rho_reps, spec.period));
            let rho_bias = rho.as_ref().map(|b| mean_diff(&b.median, &rho_fit));
            ClusterBands { p, p_fit, rho, rho_fit, p_bias, rho_bias }
        })
        .collect();

    Ok(BootstrapBands {
        clusters,
        replicate_params: kept.into_iter().map(|(row, _)| row).collect(),
        n_failed,
        n_requested: n_replicates,
    })
}
