//! Sample-path generation and closed-form analysis of the autoregressive
//! logistic edge process.
//!
//! A single edge with AR order 1 and no harmonics is a two-state Markov
//! chain, so its marginal probability and lag-1 autocorrelation have closed
//! forms ([`alarm1_stationary`]). With harmonic terms the marginal becomes a
//! time-of-day curve: the fixed point of the one-step recursion around the
//! period ([`cyclo_curves`]). Simulation draws each edge from its own derived
//! RNG stream, so panels are bit-reproducible under any parallel schedule.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{BalarmError, Result};
use crate::model::{harmonic_basis_into, inv_logit, BalarmModel, ClusterParams, EdgePanel, ModelSpec};
use crate::rng::{derive_seed2, stream_rng, tags};

/// Stationary marginal probability and lag-1 autocorrelation of an AR(1)
/// edge process without harmonics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarySummary {
    /// Long-run probability that the edge is on.
    pub marginal_p: f64,
    /// Lag-1 autocorrelation of the stationary chain.
    pub lag1_rho: f64,
}

/// Time-of-day marginal probability and lag-1 autocorrelation curves, one
/// entry per time step of the period.
#[derive(Debug, Clone, PartialEq)]
pub struct CycloCurves {
    /// Marginal on-probability at each time of day.
    pub p_curve: Vec<f64>,
    /// Lag-1 autocorrelation at each time of day.
    pub rho_curve: Vec<f64>,
}

/// Options for panel simulation.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Steps simulated and discarded before the recorded window; `None`
    /// means one full period.
    pub burn_in: Option<usize>,
    /// Timestamp of the first recorded snapshot.
    pub t_first: i64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { burn_in: None, t_first: 0 }
    }
}

/// Stationary law of the AR(1) process: with `p01 = inv_logit(c)` and
/// `p11 = inv_logit(b + c)`, the marginal is `p01 / (1 + p01 - p11)` and the
/// lag-1 autocorrelation is `p11 - p01`.
pub fn alarm1_stationary(b: f64, c: f64) -> StationarySummary {
    let p01 = inv_logit(c);
    let p11 = inv_logit(b + c);
    StationarySummary { marginal_p: p01 / (1.0 + p01 - p11), lag1_rho: p11 - p01 }
}

/// Per-phase value of `intercept + harmonic terms`, in the same accumulation
/// order as `linear_predictor`, so fast paths agree bitwise with the kernel.
fn phase_offsets(params: &ClusterParams, spec: &ModelSpec) -> Vec<f64> {
    let mut basis = vec![0.0; spec.harmonic_dim()];
    let mut offsets = vec![0.0; spec.period];
    for (ph, slot) in offsets.iter_mut().enumerate() {
        harmonic_basis_into(ph as i64, spec.harmonic_order, spec.period, &mut basis);
        let mut eta = params.intercept;
        for (a, f) in params.harmonic.iter().zip(&basis) {
            eta += a * f;
        }
        *slot = eta;
    }
    offsets
}

/// Cyclostationary marginal curve: fixed point of
/// `p[l] = p[l-1] * pi1(l) + (1 - p[l-1]) * pi0(l)` around the period.
///
/// Lags are collapsed into their coefficient sum, which is exact for AR
/// order 0 or 1 and a warm-start approximation for higher orders. Entries
/// may round to exactly 0 or 1 for extreme parameters; callers that divide
/// by `p(1-p)` must check.
pub(crate) fn cyclo_marginal(params: &ClusterParams, spec: &ModelSpec, start: f64) -> Result<Vec<f64>> {
    params.validate()?;
    params.matches(spec)?;
    let period = spec.period;
    let b_sum: f64 = params.ar.iter().sum();
    let offsets = phase_offsets(params, spec);
    let pi0: Vec<f64> = offsets.iter().map(|&o| inv_logit(o)).collect();
    let pi1: Vec<f64> = offsets.iter().map(|&o| inv_logit(o + b_sum)).collect();
    let mut p = vec![start; period];
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for l in 0..period {
            let prev = if l == 0 { p[period - 1] } else { p[l - 1] };
            let next = prev * pi1[l] + (1.0 - prev) * pi0[l];
            change = change.max((next - p[l]).abs());
            p[l] = next;
        }
        if change < 1e-12 {
            return Ok(p);
        }
    }
    Err(BalarmError::NonConvergence("time-of-day marginal recursion did not reach a fixed point".into()))
}

/// Time-of-day marginal and lag-1 autocorrelation curves for an edge process
/// with AR order at most 1.
pub fn cyclo_curves(params: &ClusterParams, spec: &ModelSpec) -> Result<CycloCurves> {
    if spec.ar_order > 1 {
        return Err(BalarmError::InvalidSpec("time-of-day curves are defined for ar_order <= 1".into()));
    }
    let p_curve = cyclo_marginal(params, spec, 0.5)?;
    if p_curve.iter().any(|&p| p <= 0.0 || p >= 1.0) {
        return Err(BalarmError::NonConvergence(
            "marginal probability saturates at 0 or 1; parameters too extreme for correlation curves".into(),
        ));
    }
    let period = spec.period;
    let rho_curve = if spec.ar_order == 0 {
        vec![0.0; period]
    } else {
        let b = params.ar[0];
        let offsets = phase_offsets(params, spec);
        (0..period)
            .map(|l| {
                let prev = p_curve[(l + period - 1) % period];
                let pi0 = inv_logit(offsets[l]);
                let pi1 = inv_logit(offsets[l] + b);
                ((prev * (1.0 - prev)) / (p_curve[l] * (1.0 - p_curve[l]))).sqrt() * (pi1 - pi0)
            })
            .collect()
    };
    Ok(CycloCurves { p_curve, rho_curve })
}

/// Draws one sequential path, reusing `rng`. `init` supplies the first
/// `ar_order` values; later values are Bernoulli draws from the predictor.
fn simulate_path(
    params: &ClusterParams, spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng, init: &[u8], t_first: i64,
) -> Vec<u8> {
    let k = spec.ar_order;
    let offsets = phase_offsets(params, spec);
    let period = spec.period as i64;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(init);
    for l in k..n {
        let mut eta = offsets[(t_first + l as i64).rem_euclid(period) as usize];
        for (lag, b) in params.ar.iter().enumerate() {
            eta += b * out[l - 1 - lag] as f64;
        }
        let u: f64 = rng.random();
        out.push((u < inv_logit(eta)) as u8);
    }
    out
}

fn check_sim_inputs(params: &ClusterParams, spec: &ModelSpec, n: usize) -> Result<()> {
    spec.validate()?;
    params.validate()?;
    params.matches(spec)?;
    if n <= spec.ar_order {
        return Err(BalarmError::InvalidSpec(format!(
            "series length {n} must exceed ar_order {}",
            spec.ar_order
        )));
    }
    Ok(())
}

/// Simulates one edge series of length `n` starting at timestamp `t_first`.
///
/// The first `ar_order` values equal `init`; the rest are sequential
/// Bernoulli draws from a stream derived from `seed`, so identical inputs
/// give bit-identical output.
pub fn simulate_alarm(
    params: &ClusterParams, spec: &ModelSpec, n: usize, seed: u64, init: &[u8], t_first: i64,
) -> Result<Vec<u8>> {
    check_sim_inputs(params, spec, n)?;
    if init.len() != spec.ar_order {
        return Err(BalarmError::DimensionMismatch(format!(
            "init has {} values, ar_order is {}",
            init.len(),
            spec.ar_order
        )));
    }
    if init.iter().any(|&v| v > 1) {
        return Err(BalarmError::InvalidParams("init values must be 0 or 1".into()));
    }
    let mut rng = stream_rng(seed, tags::SIM_PATH);
    Ok(simulate_path(params, spec, n, &mut rng, init, t_first))
}

/// Simulates a panel of `n_edges` edges from a mixture model with default
/// options (timestamps starting at 0, one period of burn-in).
///
/// Returns the panel and the true cluster label (0-based) of each edge.
pub fn simulate_balarm(model: &BalarmModel, n_edges: usize, n: usize, seed: u64) -> Result<(EdgePanel, Vec<usize>)> {
    simulate_balarm_with(model, n_edges, n, seed, &SimOptions::default())
}

/// [`simulate_balarm`] with explicit burn-in and first-timestamp options.
///
/// Each edge draws a cluster from the mixing weights, then simulates its own
/// path on a stream derived from `(seed, edge index)`. Initial values come
/// from the cluster's time-of-day marginal at the pre-window time steps, and
/// `burn_in` extra steps are simulated and discarded, so the recorded window
/// starts near the cyclostationary regime.
pub fn simulate_balarm_with(
    model: &BalarmModel, n_edges: usize, n: usize, seed: u64, options: &SimOptions,
) -> Result<(EdgePanel, Vec<usize>)> {
    model.validate()?;
    check_sim_inputs(&model.clusters[0], &model.spec, n)?;
    if n_edges == 0 {
        return Err(BalarmError::InvalidSpec("panel needs at least one edge".into()));
    }
    let spec = model.spec;
    let k = spec.ar_order;
    let burn = options.burn_in.unwrap_or(spec.period);
    let t0 = options.t_first - burn as i64;

    let mut label_rng = stream_rng(seed, tags::SIM_LABELS);
    let labels: Vec<usize> = (0..n_edges)
        .map(|_| {
            let u: f64 = label_rng.random();
            let mut cum = 0.0;
            for (g, &pi) in model.mixing.iter().enumerate() {
                cum += pi;
                if u < cum {
                    return g;
                }
            }
            model.n_clusters() - 1
        })
        .collect();

    let marginals: Vec<Vec<f64>> =
        model.clusters.iter().map(|params| cyclo_marginal(params, &spec, 0.5)).collect::<Result<_>>()?;

    let rows: Vec<Vec<u8>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &g)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed2(seed, tags::SIM_EDGE, i as u64));
            let curve = &marginals[g];
            let init: Vec<u8> = (0..k)
                .map(|step| {
                    let ph = (t0 + step as i64).rem_euclid(spec.period as i64) as usize;
                    let u: f64 = rng.random();
                    (u < curve[ph]) as u8
                })
                .collect();
            let path = simulate_path(&model.clusters[g], &spec, burn + n, &mut rng, &init, t0);
            path[burn..].to_vec()
        })
        .collect();

    let panel = EdgePanel::from_series(rows, options.t_first)?;
    Ok((panel, labels))
}
