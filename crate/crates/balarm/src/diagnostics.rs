//! Model-checking diagnostics for binary edge series: run-length
//! extraction, geometric QQ data, a Monte Carlo Kolmogorov-Smirnov test,
//! a mean-vs-run-length probability probe, and simulated cross-correlation
//! null histograms for cluster pairs.

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;

use crate::alarm::simulate_balarm;
use crate::error::{BalarmError, Result};
use crate::model::{BalarmModel, EdgePanel, ModelSpec};
use crate::rng::{derive_seed2, stream_rng, tags};

/// Pair-subsampling cap used by the command-line front end.
pub const DEFAULT_MAX_PAIRS: usize = 20_000;

/// One maximal block of consecutive equal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    /// The repeated value, 0 or 1.
    pub state: u8,
    /// Number of consecutive steps in the block.
    pub length: usize,
    /// True when the block touches the start or end of the series, so its
    /// true length is right- or left-truncated.
    pub censored: bool,
}

/// All runs of a series, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub runs: Vec<Run>,
}

impl RunSummary {
    fn lengths(&self, state: u8, interior_only: bool) -> Vec<usize> {
        self.runs
            .iter()
            .filter(|r| r.state == state && !(interior_only && r.censored))
            .map(|r| r.length)
            .collect()
    }

    /// Lengths of every off-run, censored ones included.
    pub fn off_runs(&self) -> Vec<usize> {
        self.lengths(0, false)
    }

    /// Lengths of every on-run, censored ones included.
    pub fn on_runs(&self) -> Vec<usize> {
        self.lengths(1, false)
    }

    /// Off-run lengths with boundary-truncated runs excluded; the input for
    /// distributional tests.
    pub fn interior_off(&self) -> Vec<usize> {
        self.lengths(0, true)
    }

    /// On-run lengths with boundary-truncated runs excluded.
    pub fn interior_on(&self) -> Vec<usize> {
        self.lengths(1, true)
    }

    /// The series the runs were extracted from.
    pub fn reconstruct(&self) -> Vec<u8> {
        let mut series = Vec::with_capacity(self.runs.iter().map(|r| r.length).sum());
        for run in &self.runs {
            series.extend(std::iter::repeat(run.state).take(run.length));
        }
        series
    }
}

/// Maximal runs of consecutive equal values, flagged as censored where the
/// series boundary truncates them.
pub fn run_lengths(series: &[u8]) -> Result<RunSummary> {
    if series.is_empty() {
        return Err(BalarmError::InvalidParams("run extraction needs a non-empty series".into()));
    }
    if series.iter().any(|&v| v > 1) {
        return Err(BalarmError::InvalidParams("series values must be 0 or 1".into()));
    }
    let mut runs = Vec::new();
    let mut state = series[0];
    let mut length = 0usize;
    for &v in series {
        if v == state {
            length += 1;
        } else {
            runs.push(Run { state, length, censored: runs.is_empty() });
            state = v;
            length = 1;
        }
    }
    runs.push(Run { state, length, censored: true });
    runs[0].censored = true;
    Ok(RunSummary { runs })
}

/// CDF of the geometric distribution on {1, 2, ...} with success
/// probability `p`, evaluated at integer `r`.
fn geom_cdf(r: usize, p: f64) -> f64 {
    -(r as f64 * (-p).ln_1p()).exp_m1()
}

/// Smallest `r >= 1` whose geometric CDF reaches `q`.
fn geom_quantile(q: f64, p: f64) -> usize {
    let r = ((-q).ln_1p() / (-p).ln_1p()).ceil();
    (r as usize).max(1)
}

fn sample_geometric(rng: &mut impl Rng, p: f64) -> usize {
    geom_quantile(rng.random::<f64>(), p)
}

fn check_runs_and_p(runs: &[usize], p: f64) -> Result<()> {
    if runs.is_empty() {
        return Err(BalarmError::InvalidParams("need at least one run".into()));
    }
    if runs.contains(&0) {
        return Err(BalarmError::InvalidParams("run lengths must be positive".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(BalarmError::InvalidParams(format!("success probability {p} outside (0, 1)")));
    }
    Ok(())
}

/// QQ pairs (theoretical quantile, sample quantile) comparing run lengths
/// to the geometric distribution on {1, 2, ...} with success probability
/// `p`. Sample quantiles are the sorted runs at plotting positions
/// `(i - 0.5)/m`; when the runs are geometric the points hug the identity
/// line.
pub fn geometric_qq(runs: &[usize], p: f64) -> Result<Vec<(f64, f64)>> {
    check_runs_and_p(runs, p)?;
    let mut sorted = runs.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &r)| (geom_quantile((i as f64 + 0.5) / m, p) as f64, r as f64))
        .collect())
}

/// Result of [`ks_geometric`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// Sup-distance between the empirical CDF of the runs and the
    /// geometric CDF.
    pub statistic: f64,
    /// Monte Carlo p-value.
    pub p_value: f64,
}

/// Exact sup-distance over the integers between the empirical CDF of
/// `runs` and Geometric(p) on {1, 2, ...}. Tolerates `p = 1` (a point mass
/// at 1), which re-estimation can produce.
fn ks_statistic(runs: &[usize], p: f64) -> f64 {
    let mut sorted = runs.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() as f64;
    let mut d = 0.0f64;
    let mut seen = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let r = sorted[i];
        // The empirical CDF is flat on [previous value, r); the geometric
        // CDF grows, so the gap below r is widest just before the jump.
        if r > 1 {
            d = d.max((seen as f64 / m - geom_cdf(r - 1, p)).abs());
        }
        while i < sorted.len() && sorted[i] == r {
            seen += 1;
            i += 1;
        }
        d = d.max((seen as f64 / m - geom_cdf(r, p)).abs());
    }
    d
}

/// Kolmogorov-Smirnov-type test of `runs` against the geometric
/// distribution with success probability `p`.
///
/// The p-value is calibrated by Monte Carlo for the discrete,
/// estimated-parameter setting: each of the `n_mc` null replicates draws
/// the same number of geometric runs, re-estimates the success probability
/// from their mean, and recomputes the statistic. Identical inputs and
/// seed give an identical p-value.
pub fn ks_geometric(runs: &[usize], p: f64, n_mc: usize, seed: u64) -> Result<KsResult> {
    check_runs_and_p(runs, p)?;
    if n_mc < 100 {
        return Err(BalarmError::InvalidParams("need at least 100 null replicates".into()));
    }
    let statistic = ks_statistic(runs, p);
    let mut rng = stream_rng(seed, tags::DIAG_KS);
    let mut sim = vec![0usize; runs.len()];
    let mut at_least = 0usize;
    for _ in 0..n_mc {
        let mut total = 0usize;
        for slot in sim.iter_mut() {
            *slot = sample_geometric(&mut rng, p);
            total += *slot;
        }
        let p_hat = sim.len() as f64 / total as f64;
        if ks_statistic(&sim, p_hat) >= statistic - 1e-12 {
            at_least += 1;
        }
    }
    Ok(KsResult { statistic, p_value: (at_least + 1) as f64 / (n_mc + 1) as f64 })
}

/// Result of [`independence_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndependenceProbe {
    /// Sample mean of the series.
    pub p_hat_mean: f64,
    /// On-probability implied by the interior off-run lengths: the
    /// reciprocal of their mean, i.e. the geometric fit to the waits
    /// between contacts.
    pub p_hat_runs: f64,
    /// `p_hat_mean - p_hat_runs`.
    pub discrepancy: f64,
}

/// Compares the sample mean with the on-probability implied by the
/// off-run lengths. For an independent series the two estimates agree in
/// expectation; positive serial dependence stretches the off-runs and pulls
/// the run-based estimate below the mean, negative dependence pushes it
/// above.
pub fn independence_probe(series: &[u8]) -> Result<IndependenceProbe> {
    let interior_off = run_lengths(series)?.interior_off();
    if interior_off.is_empty() {
        return Err(BalarmError::InsufficientData(
            "no interior off-run; the probe needs an off-run bounded by contacts on both sides"
                .into(),
        ));
    }
    let p_hat_mean = series.iter().map(|&v| v as f64).sum::<f64>() / series.len() as f64;
    let p_hat_runs = interior_off.len() as f64 / interior_off.iter().sum::<usize>() as f64;
    Ok(IndependenceProbe { p_hat_mean, p_hat_runs, discrepancy: p_hat_mean - p_hat_runs })
}

/// Pearson correlation between `x[t]` and `y[t + lag]` over the
/// overlapping windows, or `None` when either window is constant.
///
/// Both series are binary, so the sums are accumulated exactly as
/// integers.
fn pearson_lag(x: &[u8], y: &[u8], lag: usize) -> Option<f64> {
    let nw = x.len() - lag;
    let (mut sx, mut sy, mut sxy) = (0u64, 0u64, 0u64);
    for (&a, &b) in x[..nw].iter().zip(&y[lag..]) {
        sx += a as u64;
        sy += b as u64;
        sxy += (a & b) as u64;
    }
    let nw = nw as f64;
    let (sx, sy, sxy) = (sx as f64, sy as f64, sxy as f64);
    let var_x = sx - sx * sx / nw;
    let var_y = sy - sy * sy / nw;
    if var_x <= 0.0 || var_y <= 0.0 {
        return None;
    }
    Some((sxy - sx * sy / nw) / (var_x * var_y).sqrt())
}

/// Correlations between pairs of series drawn from one pair of clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrelations {
    /// First cluster of the pair (0-based, `cluster_a <= cluster_b`).
    pub cluster_a: usize,
    /// Second cluster of the pair.
    pub cluster_b: usize,
    /// Pearson correlations, one per evaluated pair.
    pub correlations: Vec<f64>,
    /// Pairs available before subsampling.
    pub n_pairs_total: u64,
    /// Constant series dropped from the group before pairing.
    pub n_constant_excluded: usize,
    /// Sampled pairs dropped because a lagged window was constant.
    pub n_window_degenerate: usize,
    /// True when a side of the pair had fewer than two usable series, so
    /// no correlations were computed.
    pub skipped: bool,
}

fn check_lag(n: usize, lag: usize) -> Result<()> {
    if n < lag + 2 {
        return Err(BalarmError::InvalidParams(format!(
            "series of length {n} leave no window at lag {lag}"
        )));
    }
    Ok(())
}

/// Correlations for every cluster pair `(a, b)` with `a <= b`, sampling at
/// most `max_pairs` pairs per group on a stream derived from `seed`.
fn group_correlations(
    groups: &[Vec<&[u8]>], lag: usize, seed: u64, max_pairs: usize,
) -> Vec<PairCorrelations> {
    let n_groups = groups.len();
    let usable: Vec<Vec<&[u8]>> = groups
        .iter()
        .map(|g| g.iter().filter(|s| s.iter().any(|&v| v != s[0])).copied().collect())
        .collect();
    let mut out = Vec::new();
    for a in 0..n_groups {
        for b in a..n_groups {
            let (ua, ub) = (&usable[a], &usable[b]);
            let n_constant_excluded = (groups[a].len() - ua.len())
                + if a == b { 0 } else { groups[b].len() - ub.len() };
            if ua.len() < 2 || ub.len() < 2 {
                out.push(PairCorrelations {
                    cluster_a: a,
                    cluster_b: b,
                    correlations: Vec::new(),
                    n_pairs_total: 0,
                    n_constant_excluded,
                    n_window_degenerate: 0,
                    skipped: true,
                });
                continue;
            }
            let total = if a == b {
                ua.len() as u64 * (ua.len() as u64 - 1) / 2
            } else {
                ua.len() as u64 * ub.len() as u64
            };
            let sampled: Vec<u64> = if total <= max_pairs as u64 {
                (0..total).collect()
            } else {
                // Distinct pair indices on a per-group stream, disjoint
                // from the per-cluster simulation streams.
                let group_tag = (n_groups + 1 + a * (n_groups + 1) + b) as u64;
                let mut rng = stream_rng(derive_seed2(seed, tags::DIAG_CROSS, group_tag), 0);
                let mut seen = HashSet::new();
                let mut picks = Vec::with_capacity(max_pairs);
                while picks.len() < max_pairs {
                    let k = rng.random_range(0..total);
                    if seen.insert(k) {
                        picks.push(k);
                    }
                }
                picks
            };
            // Within-group pair k maps to (i, j), i < j; starts[i] counts
            // the pairs whose first index precedes i.
            let starts: Vec<u64> = (0..ua.len() as u64)
                .map(|i| i * (ua.len() as u64 - 1) - i * i.saturating_sub(1) / 2)
                .collect();
            let correlations: Vec<Option<f64>> = sampled
                .par_iter()
                .map(|&k| {
                    let (x, y) = if a == b {
                        let i = starts.partition_point(|&s| s <= k) - 1;
                        let j = i + 1 + (k - starts[i]) as usize;
                        (ua[i], ua[j])
                    } else {
                        (ua[(k / ub.len() as u64) as usize], ub[(k % ub.len() as u64) as usize])
                    };
                    pearson_lag(x, y, lag)
                })
                .collect();
            let n_window_degenerate = correlations.iter().filter(|c| c.is_none()).count();
            out.push(PairCorrelations {
                cluster_a: a,
                cluster_b: b,
                correlations: correlations.into_iter().flatten().collect(),
                n_pairs_total: total,
                n_constant_excluded,
                n_window_degenerate,
                skipped: false,
            });
        }
    }
    out
}

/// Null cross-correlation distribution per cluster pair: simulates `m`
/// independent series of length `n` from each cluster of `model` and
/// correlates sampled pairs at the given lag. Any correlation seen here
/// comes from shared structure (the common daily profile), not from
/// dependence between edges.
pub fn crosscorr_null(
    model: &BalarmModel, m: usize, n: usize, lag: usize, seed: u64, max_pairs: usize,
) -> Result<Vec<PairCorrelations>> {
    model.validate()?;
    check_lag(n, lag)?;
    if m < 2 {
        return Err(BalarmError::InvalidParams("need at least two series per cluster".into()));
    }
    if max_pairs == 0 {
        return Err(BalarmError::InvalidParams("max_pairs must be positive".into()));
    }
    let panels: Vec<EdgePanel> = model
        .clusters
        .iter()
        .enumerate()
        .map(|(g, cluster)| {
            let single = BalarmModel {
                spec: ModelSpec { n_clusters: 1, ..model.spec },
                mixing: vec![1.0],
                clusters: vec![cluster.clone()],
            };
            simulate_balarm(&single, m, n, derive_seed2(seed, tags::DIAG_CROSS, g as u64))
                .map(|(panel, _)| panel)
        })
        .collect::<Result<_>>()?;
    let groups: Vec<Vec<&[u8]>> =
        panels.iter().map(|p| (0..m).map(|i| p.series(i)).collect()).collect();
    Ok(group_correlations(&groups, lag, seed, max_pairs))
}

/// Observed cross-correlations per cluster pair: edges grouped by hard
/// label, correlations at the given lag between sampled pairs. Compare
/// with [`crosscorr_null`] through [`overlay_histograms`].
pub fn crosscorr_observed(
    panel: &EdgePanel, labels: &[usize], lag: usize, seed: u64, max_pairs: usize,
) -> Result<Vec<PairCorrelations>> {
    check_lag(panel.n_snapshots(), lag)?;
    if labels.len() != panel.n_edges() {
        return Err(BalarmError::DimensionMismatch(format!(
            "{} labels for {} edges",
            labels.len(),
            panel.n_edges()
        )));
    }
    if max_pairs == 0 {
        return Err(BalarmError::InvalidParams("max_pairs must be positive".into()));
    }
    let n_groups = labels.iter().max().expect("panel has at least one edge") + 1;
    let mut groups: Vec<Vec<&[u8]>> = vec![Vec::new(); n_groups];
    for (i, &g) in labels.iter().enumerate() {
        groups[g].push(panel.series(i));
    }
    Ok(group_correlations(&groups, lag, seed, max_pairs))
}

/// Null and observed correlation histograms on shared bins for one cluster
/// pair. Empty `bin_edges` means neither side had a correlation to bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHistogram {
    pub cluster_a: usize,
    pub cluster_b: usize,
    /// `n_bins + 1` ascending edges spanning both samples.
    pub bin_edges: Vec<f64>,
    pub null_counts: Vec<u64>,
    pub observed_counts: Vec<u64>,
}

fn histogram_counts(values: &[f64], lo: f64, hi: f64, n_bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let idx = ((v - lo) / (hi - lo) * n_bins as f64).floor() as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    counts
}

/// Bins null and observed correlations on shared per-group edges so the
/// two distributions overlay directly. The groups must cover the same
/// cluster pairs in the same order.
pub fn overlay_histograms(
    null: &[PairCorrelations], observed: &[PairCorrelations], n_bins: usize,
) -> Result<Vec<GroupHistogram>> {
    if n_bins == 0 {
        return Err(BalarmError::InvalidParams("need at least one histogram bin".into()));
    }
    if null.len() != observed.len()
        || null
            .iter()
            .zip(observed)
            .any(|(a, b)| (a.cluster_a, a.cluster_b) != (b.cluster_a, b.cluster_b))
    {
        return Err(BalarmError::DimensionMismatch(
            "null and observed correlation groups cover different cluster pairs".into(),
        ));
    }
    Ok(null
        .iter()
        .zip(observed)
        .map(|(nul, obs)| {
            let all = nul.correlations.iter().chain(&obs.correlations);
            let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
            let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() {
                return GroupHistogram {
                    cluster_a: nul.cluster_a,
                    cluster_b: nul.cluster_b,
                    bin_edges: Vec::new(),
                    null_counts: Vec::new(),
                    observed_counts: Vec::new(),
                };
            }
            let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
            let bin_edges: Vec<f64> =
                (0..=n_bins).map(|i| lo + (hi - lo) * i as f64 / n_bins as f64).collect();
            GroupHistogram {
                cluster_a: nul.cluster_a,
                cluster_b: nul.cluster_b,
                bin_edges,
                null_counts: histogram_counts(&nul.correlations, lo, hi, n_bins),
                observed_counts: histogram_counts(&obs.correlations, lo, hi, n_bins),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alarm::simulate_alarm;
    use crate::model::ClusterParams;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bernoulli_series(p: f64, n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| u8::from(rng.random::<f64>() < p)).collect()
    }

    fn cluster_a_path(n: usize, seed: u64) -> Vec<u8> {
        let spec = ModelSpec::new(1, 1, 0, 288).unwrap();
        let params = ClusterParams::new(vec![], vec![2.89], -1.0).unwrap();
        simulate_alarm(&params, &spec, n, seed, &[1], 0).unwrap()
    }

    #[test]
    fn runs_partition_and_flag_censoring() {
        let summary = run_lengths(&[0, 0, 1, 0, 0, 1, 1]).unwrap();
        assert_eq!(summary.off_runs(), vec![2, 2]);
        assert_eq!(summary.on_runs(), vec![1, 2]);
        assert_eq!(summary.interior_off(), vec![2]);
        assert_eq!(summary.interior_on(), vec![1]);
        let censored: Vec<bool> = summary.runs.iter().map(|r| r.censored).collect();
        assert_eq!(censored, vec![true, false, false, true]);
    }

    #[test]
    fn all_zero_series_is_one_censored_run() {
        let summary = run_lengths(&[0; 10]).unwrap();
        assert_eq!(summary.runs, vec![Run { state: 0, length: 10, censored: true }]);
        assert!(summary.on_runs().is_empty());
        assert!(summary.interior_off().is_empty());
    }

    proptest! {
        #[test]
        fn runs_reconstruct_series(series in proptest::collection::vec(0u8..=1, 1..200)) {
            let summary = run_lengths(&series).unwrap();
            prop_assert_eq!(summary.reconstruct(), series.clone());
            let total: usize = summary.runs.iter().map(|r| r.length).sum();
            prop_assert_eq!(total, series.len());
        }
    }

    #[test]
    fn iid_interior_off_run_mean_matches_geometric() {
        let series = bernoulli_series(0.3, 100_000, 31);
        let off = run_lengths(&series).unwrap().interior_off();
        let mean = off.iter().sum::<usize>() as f64 / off.len() as f64;
        assert!((mean - 1.0 / 0.3).abs() < 0.02 / 0.3, "interior off-run mean {mean}");
    }

    #[test]
    fn qq_single_run_sits_at_median() {
        let pairs = geometric_qq(&[2], 0.5).unwrap();
        assert_eq!(pairs, vec![(1.0, 2.0)]);
    }

    #[test]
    fn qq_small_case_matches_hand_quantiles() {
        let pairs = geometric_qq(&[2, 3, 1], 0.5).unwrap();
        assert_eq!(pairs, vec![(1.0, 1.0), (1.0, 2.0), (3.0, 3.0)]);
    }

    #[test]
    fn qq_geometric_sample_hugs_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let runs: Vec<usize> = (0..10_000).map(|_| sample_geometric(&mut rng, 0.2)).collect();
        let gap = geometric_qq(&runs, 0.2)
            .unwrap()
            .iter()
            .map(|(t, s)| (t - s).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 3.0, "worst quantile gap {gap}");
    }

    #[test]
    fn ks_statistic_matches_hand_computation() {
        // Runs (1, 1, 2) vs Geometric(0.5): CDF gaps 1/6 at r=1, 1/4 at r=2.
        assert!((ks_statistic(&[1, 1, 2], 0.5) - 0.25).abs() < 1e-12);
        // A single run of 3 leaves the largest gap just below it, at r=2.
        assert!((ks_statistic(&[3], 0.5) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ks_is_deterministic() {
        let runs: Vec<usize> = (1..40).map(|i| i % 5 + 1).collect();
        let a = ks_geometric(&runs, 0.4, 250, 99).unwrap();
        let b = ks_geometric(&runs, 0.4, 250, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
    }

    #[test]
    fn ks_null_calibration_near_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rejections = 0;
        for trial in 0..500 {
            let runs: Vec<usize> = (0..60).map(|_| sample_geometric(&mut rng, 0.3)).collect();
            let p_hat = runs.len() as f64 / runs.iter().sum::<usize>() as f64;
            let ks = ks_geometric(&runs, p_hat, 199, 1000 + trial).unwrap();
            if ks.p_value <= 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / 500.0;
        assert!((rate - 0.05).abs() <= 0.03, "null rejection rate {rate}");
    }

    #[test]
    fn ks_rejects_persistent_dependence() {
        for rep in 0..10 {
            let series = cluster_a_path(1200, 40 + rep);
            let p_hat_mean = series.iter().map(|&v| v as f64).sum::<f64>() / series.len() as f64;
            let off = run_lengths(&series).unwrap().interior_off();
            let ks = ks_geometric(&off, p_hat_mean, 199, 70 + rep).unwrap();
            assert!(ks.p_value <= 0.05, "replicate {rep} kept the null, p={}", ks.p_value);
        }
    }

    #[test]
    fn probe_matches_iid() {
        let series = bernoulli_series(0.3, 100_000, 5);
        let probe = independence_probe(&series).unwrap();
        assert!(probe.discrepancy.abs() <= 0.01, "discrepancy {}", probe.discrepancy);
    }

    #[test]
    fn probe_flags_alternation_as_negative_dependence() {
        let series: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let probe = independence_probe(&series).unwrap();
        assert!((probe.p_hat_mean - 0.5).abs() < 1e-12);
        assert!((probe.p_hat_runs - 1.0).abs() < 1e-12);
        assert!((probe.discrepancy + 0.5).abs() < 1e-12);
    }

    #[test]
    fn probe_flags_persistence() {
        let probe = independence_probe(&cluster_a_path(20_000, 3)).unwrap();
        assert!(probe.discrepancy > 0.3, "discrepancy {}", probe.discrepancy);
        assert!((probe.p_hat_mean - 0.672).abs() < 0.02);
    }

    #[test]
    fn probe_requires_interior_off_run() {
        for series in [[1u8, 1, 1].as_slice(), &[0, 0, 0], &[0, 0, 1]] {
            assert!(matches!(
                independence_probe(series),
                Err(BalarmError::InsufficientData(_))
            ));
        }
    }

    #[test]
    fn pearson_basics() {
        let x = bernoulli_series(0.5, 100_000, 21);
        let y = bernoulli_series(0.5, 100_000, 22);
        assert!(pearson_lag(&x, &y, 0).unwrap().abs() <= 0.01);
        assert!((pearson_lag(&x, &x, 0).unwrap() - 1.0).abs() < 1e-12);
        // y reproduces x one step later, so the lag-1 correlation is 1.
        let mut shifted = vec![0u8];
        shifted.extend_from_slice(&x[..x.len() - 1]);
        assert!((pearson_lag(&x, &shifted, 1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson_lag(&[0, 0, 0], &x[..3], 0), None);
    }

    #[test]
    fn null_histograms_shift_under_shared_seasonality() {
        let spec = ModelSpec::new(1, 0, 1, 24).unwrap();
        let cluster = ClusterParams::new(vec![2.5, 0.0], vec![], -1.5).unwrap();
        let model = BalarmModel { spec, mixing: vec![1.0], clusters: vec![cluster] };
        let groups = crosscorr_null(&model, 30, 240, 0, 17, 1000).unwrap();
        assert_eq!(groups.len(), 1);
        let g = &groups[0];
        assert!(!g.skipped);
        assert_eq!(g.correlations.len() as u64, g.n_pairs_total);
        let mean = g.correlations.iter().sum::<f64>() / g.correlations.len() as f64;
        assert!(mean > 0.1, "shared daily profile produced mean correlation {mean}");
    }

    #[test]
    fn observed_groups_count_pairs_and_respect_exclusions() {
        let rows = vec![
            bernoulli_series(0.5, 60, 1),
            bernoulli_series(0.5, 60, 2),
            vec![0; 60],
            bernoulli_series(0.5, 60, 3),
            bernoulli_series(0.5, 60, 4),
        ];
        let panel = EdgePanel::from_series(rows, 0).unwrap();
        let groups = crosscorr_observed(&panel, &[0, 0, 0, 1, 1], 0, 9, 100).unwrap();
        assert_eq!(groups.len(), 3);
        let by_key = |a, b| groups.iter().find(|g| (g.cluster_a, g.cluster_b) == (a, b)).unwrap();
        let g00 = by_key(0, 0);
        assert_eq!((g00.n_pairs_total, g00.n_constant_excluded), (1, 1));
        assert_eq!(g00.correlations.len(), 1);
        let g01 = by_key(0, 1);
        assert_eq!((g01.n_pairs_total, g01.n_constant_excluded), (4, 1));
        assert_eq!(g01.correlations.len(), 4);
        let g11 = by_key(1, 1);
        assert_eq!((g11.n_pairs_total, g11.n_constant_excluded), (1, 0));
    }

    #[test]
    fn sparse_groups_are_skipped() {
        let rows = vec![
            bernoulli_series(0.5, 40, 1),
            bernoulli_series(0.5, 40, 2),
            bernoulli_series(0.5, 40, 3),
        ];
        let panel = EdgePanel::from_series(rows, 0).unwrap();
        let groups = crosscorr_observed(&panel, &[0, 0, 1], 0, 9, 100).unwrap();
        let g11 = groups.iter().find(|g| (g.cluster_a, g.cluster_b) == (1, 1)).unwrap();
        assert!(g11.skipped);
        assert!(g11.correlations.is_empty());
        let g01 = groups.iter().find(|g| (g.cluster_a, g.cluster_b) == (0, 1)).unwrap();
        assert!(g01.skipped, "a side with one usable series cannot form a stable group");
    }

    #[test]
    fn pair_subsampling_is_capped_and_deterministic() {
        let rows: Vec<Vec<u8>> = (0..12).map(|i| bernoulli_series(0.5, 50, 100 + i)).collect();
        let panel = EdgePanel::from_series(rows, 0).unwrap();
        let labels = vec![0; 12];
        let a = crosscorr_observed(&panel, &labels, 0, 33, 10).unwrap();
        let b = crosscorr_observed(&panel, &labels, 0, 33, 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].n_pairs_total, 66);
        assert_eq!(a[0].correlations.len(), 10);
    }

    #[test]
    fn overlay_uses_shared_edges_and_counts_everything() {
        let spec = ModelSpec::new(2, 1, 0, 12).unwrap();
        let model = BalarmModel {
            spec,
            mixing: vec![0.5, 0.5],
            clusters: vec![
                ClusterParams::new(vec![], vec![2.89], -1.0).unwrap(),
                ClusterParams::new(vec![], vec![4.48], -4.0).unwrap(),
            ],
        };
        let null = crosscorr_null(&model, 10, 200, 0, 3, 500).unwrap();
        let (panel, _) = simulate_balarm(&model, 30, 200, 11).unwrap();
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let observed = crosscorr_observed(&panel, &labels, 0, 3, 500).unwrap();
        let overlays = overlay_histograms(&null, &observed, 20).unwrap();
        assert_eq!(overlays.len(), 3);
        for (overlay, (nul, obs)) in overlays.iter().zip(null.iter().zip(&observed)) {
            if overlay.bin_edges.is_empty() {
                continue;
            }
            assert_eq!(overlay.bin_edges.len(), 21);
            assert_eq!(overlay.null_counts.iter().sum::<u64>(), nul.correlations.len() as u64);
            assert_eq!(
                overlay.observed_counts.iter().sum::<u64>(),
                obs.correlations.len() as u64
            );
        }
        let mismatched = overlay_histograms(&null[..2], &observed[..1], 20);
        assert!(matches!(mismatched, Err(BalarmError::DimensionMismatch(_))));
    }
}
