//! Implementations of the `balarm` subcommands.
//!
//! Each command resolves its settings (flag, then config file, then
//! default), computes everything in memory, stages its outputs, and commits
//! them in one atomic pass, so interrupted or failed runs leave no partial
//! files. Tables carry a metadata preamble recording the tool version, the
//! subcommand, the seed, and the settings that shaped the run.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;

use balarm::{
    aggregate, bands_table, bic, crosscorr_null, crosscorr_observed, cyclo_curves, e_step, fit_em,
    fmt_f64, geometric_qq, histograms_table, independence_probe, ks_geometric, load_model,
    load_panel, overlay_histograms, parametric_bootstrap, parse_contacts, run_lengths,
    simulate_balarm, AggregateOptions, BalarmError, BootstrapOptions, EmSettings, FitOptions,
    InitStrategy, KsResult, ModelSpec, Result, Table, DEFAULT_MAX_PAIRS,
};

use crate::config::{self, Config};
use crate::output::OutputSet;
use crate::CommonFitArgs;

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Starts a table whose preamble identifies the tool and subcommand.
fn table_for(command: &str, header: &[&str]) -> Table {
    Table::new(header).meta("version", VERSION).meta("command", command)
}

fn parse_init(name: &str) -> Result<InitStrategy> {
    match name {
        "kmeans" => Ok(InitStrategy::SummaryKmeans),
        "random" => Ok(InitStrategy::RandomResponsibility),
        other => Err(BalarmError::InvalidParams(format!(
            "unknown initializer '{other}' (expected 'kmeans' or 'random')"
        ))),
    }
}

fn em_settings(common: &CommonFitArgs, cfg: &Config) -> EmSettings {
    let em = EmSettings::default();
    let glm = FitOptions::default();
    EmSettings {
        tol: config::resolve(common.tol, cfg.tol, em.tol),
        restarts: common.restarts.or(cfg.restarts),
        glm: FitOptions { ridge: config::resolve(common.ridge, cfg.ridge, glm.ridge), ..glm },
        ..em
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Contact log: whitespace-separated `time id_a id_b [status_a status_b]` lines.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,

    /// Aggregation window length in seconds.
    #[arg(long, value_name = "SECONDS")]
    window: i64,

    /// Output panel file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Left edge of the first window (exclusive); default 0.
    #[arg(long, value_name = "SECONDS")]
    t_start: Option<i64>,

    /// End of the aggregation range (inclusive); default: last event time.
    #[arg(long, value_name = "SECONDS")]
    t_end: Option<i64>,

    /// Phase origin for time of day, e.g. the clock midnight preceding
    /// `t_start`; default: `t_start`.
    #[arg(long, value_name = "SECONDS")]
    phase_origin: Option<i64>,
}

pub fn ingest(args: IngestArgs) -> Result<()> {
    let log = parse_contacts(open(&args.input)?)?;
    let options = AggregateOptions {
        window_seconds: args.window,
        t_start: args.t_start,
        t_end: args.t_end,
        phase_origin: args.phase_origin,
    };
    let aggregated = aggregate(&log.events, &log.registry, &options)?;
    let panel = &aggregated.panel;

    let mut outputs = OutputSet::new();
    outputs.stage_panel(&args.out, panel)?;
    outputs.commit()?;

    let statuses = log.registry.status_counts();
    if statuses.is_empty() {
        println!("nodes {}", panel.n_nodes());
    } else {
        let breakdown: Vec<String> =
            statuses.iter().map(|(s, c)| format!("{s} {c}")).collect();
        println!("nodes {} ({})", panel.n_nodes(), breakdown.join(", "));
    }
    println!("edges {}", panel.n_edges());
    println!("snapshots {} (window {} s)", panel.n_snapshots(), args.window);
    println!("density {:.6}", panel.density());
    println!("events {} used, {} outside range", log.events.len() - aggregated.n_dropped_events, aggregated.n_dropped_events);
    println!("wrote {}", args.out.display());
    Ok(())
}

// -------------------------------------------------------------- simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model file to draw from.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Number of edges in the simulated panel.
    #[arg(long, value_name = "J")]
    edges: usize,

    /// Number of snapshots per edge.
    #[arg(long, value_name = "N")]
    snapshots: usize,

    /// Output panel file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Also write the drawn cluster label of each edge as a table.
    #[arg(long, value_name = "FILE")]
    labels_out: Option<PathBuf>,

    /// TOML configuration file (only `seed` applies here).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Random seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let seed = config::resolve(args.seed, cfg.seed, 0);
    let model = load_model(&args.model)?;
    let (panel, labels) = simulate_balarm(&model, args.edges, args.snapshots, seed)?;

    let mut outputs = OutputSet::new();
    outputs.stage_panel(&args.out, &panel)?;
    if let Some(path) = &args.labels_out {
        let mut table = table_for("simulate", &["edge", "cluster"])
            .meta("seed", seed)
            .meta("model", args.model.display());
        for (i, &g) in labels.iter().enumerate() {
            table.push(vec![(i + 1).to_string(), (g + 1).to_string()]);
        }
        outputs.stage_table(path, &table)?;
    }
    outputs.commit()?;

    println!(
        "simulated {} edges x {} snapshots from {} clusters (seed {seed})",
        panel.n_edges(),
        panel.n_snapshots(),
        model.n_clusters()
    );
    println!("density {:.6}", panel.density());
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.labels_out {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ------------------------------------------------------------------- fit

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input panel file.
    #[arg(long, value_name = "FILE")]
    panel: PathBuf,

    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Cluster count G.
    #[arg(short = 'G', long)]
    clusters: Option<usize>,

    /// Autoregressive order K (default 1).
    #[arg(short = 'K', long)]
    ar_order: Option<usize>,

    /// Harmonic order H (default 0).
    #[arg(short = 'H', long)]
    harmonics: Option<usize>,

    /// Snapshots per day P (default 288).
    #[arg(short = 'P', long)]
    period: Option<usize>,

    /// Initialization: `kmeans` or `random`.
    #[arg(long, default_value = "kmeans")]
    init: String,

    /// Responsibilities table; default `<out>` with extension `tau.tsv`.
    #[arg(long, value_name = "FILE")]
    tau_out: Option<PathBuf>,

    /// Log-likelihood trace table; default `<out>` with extension `trace.tsv`.
    #[arg(long, value_name = "FILE")]
    trace_out: Option<PathBuf>,

    /// Hard cluster labels table.
    #[arg(long, value_name = "FILE")]
    labels_out: Option<PathBuf>,

    #[command(flatten)]
    common: CommonFitArgs,
}

/// Gathers the spec from flags and config with the documented defaults.
fn resolve_spec(
    clusters: Option<usize>, ar_order: Option<usize>, harmonics: Option<usize>,
    period: Option<usize>, cfg: &Config,
) -> Result<ModelSpec> {
    ModelSpec::new(
        config::require(clusters, cfg.n_clusters, "cluster count G")?,
        config::resolve(ar_order, cfg.ar_order, 1),
        config::resolve(harmonics, cfg.harmonic_order, 0),
        config::resolve(period, cfg.period, 288),
    )
}

pub fn fit(args: FitArgs) -> Result<()> {
    let cfg = Config::load(args.common.config.as_deref())?;
    let spec = resolve_spec(args.clusters, args.ar_order, args.harmonics, args.period, &cfg)?;
    let seed = config::resolve(args.common.seed, cfg.seed, 0);
    let settings = em_settings(&args.common, &cfg);
    let strategy = parse_init(&args.init)?;
    let panel = load_panel(&args.panel)?;

    let result = fit_em(&panel, &spec, &strategy, seed, &settings)?;
    let bic_value = bic(&result, &panel);
    let meta = &result.meta;

    let describe = |table: Table| {
        table
            .meta("seed", seed)
            .meta("panel", args.panel.display())
            .meta("G", spec.n_clusters)
            .meta("K", spec.ar_order)
            .meta("H", spec.harmonic_order)
            .meta("P", spec.period)
            .meta("init", &meta.init)
            .meta("tol", fmt_f64(meta.tol))
            .meta("restarts", meta.restarts)
            .meta("ridge", fmt_f64(meta.ridge))
    };

    let mut outputs = OutputSet::new();
    outputs.stage_model(&args.out, &result.model)?;

    let tau_path = args.tau_out.clone().unwrap_or_else(|| args.out.with_extension("tau.tsv"));
    let mut tau_table = describe(table_for("fit", &[]));
    tau_table.header = vec!["edge".into(), "node_a".into(), "node_b".into(), "label".into()];
    tau_table.header.extend((1..=spec.n_clusters).map(|g| format!("tau_{g}")));
    for (i, row) in result.responsibilities.iter().enumerate() {
        let (a, b) = panel.edge_pair(i);
        let mut cells = vec![
            (i + 1).to_string(),
            panel.node_names()[a].clone(),
            panel.node_names()[b].clone(),
            (result.hard_labels[i] + 1).to_string(),
        ];
        cells.extend(row.iter().map(|&t| fmt_f64(t)));
        tau_table.push(cells);
    }
    outputs.stage_table(&tau_path, &tau_table)?;

    let trace_path = args.trace_out.clone().unwrap_or_else(|| args.out.with_extension("trace.tsv"));
    let mut trace_table = describe(table_for("fit", &["iteration", "loglik"]));
    for (it, ll) in result.loglik_trace.iter().enumerate() {
        trace_table.push(vec![it.to_string(), fmt_f64(*ll)]);
    }
    outputs.stage_table(&trace_path, &trace_table)?;

    if let Some(path) = &args.labels_out {
        let mut labels_table = describe(table_for("fit", &["edge", "cluster"]));
        for (i, &g) in result.hard_labels.iter().enumerate() {
            labels_table.push(vec![(i + 1).to_string(), (g + 1).to_string()]);
        }
        outputs.stage_table(path, &labels_table)?;
    }
    outputs.commit()?;

    for warning in &meta.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "fit G={} K={} H={} P={} ({}, {} restarts, best {})",
        spec.n_clusters,
        spec.ar_order,
        spec.harmonic_order,
        spec.period,
        meta.init,
        meta.restarts,
        meta.best_restart + 1
    );
    println!(
        "loglik {} after {} iteration{} ({})",
        fmt_f64(result.loglik()),
        result.n_iters,
        if result.n_iters == 1 { "" } else { "s" },
        if result.converged { "converged" } else { "iteration cap reached" }
    );
    println!("BIC {}", fmt_f64(bic_value));
    println!("wrote {}, {}, {}", args.out.display(), tau_path.display(), trace_path.display());
    Ok(())
}

// ----------------------------------------------------------------- sweep

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Input panel file.
    #[arg(long, value_name = "FILE")]
    panel: PathBuf,

    /// Cluster counts to try, comma-separated (e.g. 2,3,4).
    #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
    g_list: Vec<usize>,

    /// Harmonic orders to try, comma-separated (e.g. 0,2,3).
    #[arg(long, value_name = "LIST", value_delimiter = ',', required = true)]
    h_list: Vec<usize>,

    /// Autoregressive order K shared by all cells (default 1).
    #[arg(short = 'K', long)]
    ar_order: Option<usize>,

    /// Snapshots per day P shared by all cells (default 288).
    #[arg(short = 'P', long)]
    period: Option<usize>,

    /// Initialization: `kmeans` or `random`.
    #[arg(long, default_value = "kmeans")]
    init: String,

    /// Output table, one row per (G, H) cell.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Write the minimum-BIC model here.
    #[arg(long, value_name = "FILE")]
    best_out: Option<PathBuf>,

    #[command(flatten)]
    common: CommonFitArgs,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = Config::load(args.common.config.as_deref())?;
    let ar_order = config::resolve(args.ar_order, cfg.ar_order, 1);
    let period = config::resolve(args.period, cfg.period, 288);
    let seed = config::resolve(args.common.seed, cfg.seed, 0);
    let settings = em_settings(&args.common, &cfg);
    let strategy = parse_init(&args.init)?;
    let panel = load_panel(&args.panel)?;

    let (table, fits) =
        balarm::sweep(&panel, &args.g_list, &args.h_list, ar_order, period, &strategy, &settings, seed)?;

    let mut out_table = table_for("sweep", &[
        "G", "H", "K", "n_params", "n_obs", "loglik", "bic", "converged", "restarts", "note",
    ])
    .meta("seed", seed)
    .meta("panel", args.panel.display())
    .meta("K", ar_order)
    .meta("P", period)
    .meta("init", strategy.name())
    .meta("tol", fmt_f64(settings.tol));
    for (idx, row) in table.rows.iter().enumerate() {
        let mut note = row.error.clone().unwrap_or_default().replace(['\t', '\n'], " ");
        if table.best == Some(idx) {
            note = "best".into();
        }
        out_table.push(vec![
            row.n_clusters.to_string(),
            row.harmonic_order.to_string(),
            ar_order.to_string(),
            row.n_params.to_string(),
            row.n_obs.to_string(),
            row.loglik.map(fmt_f64).unwrap_or_default(),
            row.bic.map(fmt_f64).unwrap_or_default(),
            row.converged.to_string(),
            row.restarts.to_string(),
            note,
        ]);
    }

    let mut outputs = OutputSet::new();
    outputs.stage_table(&args.out, &out_table)?;
    if let Some(path) = &args.best_out {
        match table.best {
            Some(idx) => {
                let best_fit = fits[idx].as_ref().expect("best row has a fit");
                outputs.stage_model(path, &best_fit.model)?;
            }
            None => {
                return Err(BalarmError::NonConvergence(
                    "no sweep cell produced a successful fit".into(),
                ))
            }
        }
    }
    outputs.commit()?;

    match table.best {
        Some(idx) => {
            let row = &table.rows[idx];
            println!(
                "best G={} H={} (BIC {})",
                row.n_clusters,
                row.harmonic_order,
                fmt_f64(row.bic.expect("best row has a BIC"))
            );
        }
        None => println!("no cell fit successfully"),
    }
    let n_failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} cells, {} failed", table.rows.len(), n_failed);
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.best_out {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ------------------------------------------------------------- bootstrap

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Fitted model whose curves the bands describe.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Edges per simulated replicate (match the fitted panel).
    #[arg(long, value_name = "J")]
    edges: usize,

    /// Snapshots per simulated replicate (match the fitted panel).
    #[arg(long, value_name = "N")]
    snapshots: usize,

    /// Number of bootstrap replicates B.
    #[arg(short = 'B', long)]
    replicates: Option<usize>,

    /// Suppress correlation bands for clusters whose fitted daily maximum
    /// probability stays below this value.
    #[arg(long)]
    rho_threshold: Option<f64>,

    /// Output band table.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Also write per-replicate parameters (mixing weights, then each
    /// cluster's coefficients).
    #[arg(long, value_name = "FILE")]
    params_out: Option<PathBuf>,

    #[command(flatten)]
    common: CommonFitArgs,
}

pub fn bootstrap(args: BootstrapArgs) -> Result<()> {
    let cfg = Config::load(args.common.config.as_deref())?;
    let seed = config::resolve(args.common.seed, cfg.seed, 0);
    let n_replicates = config::require(args.replicates, cfg.n_replicates, "replicate count B")?;
    let model = load_model(&args.model)?;
    let defaults = BootstrapOptions::default();
    let options = BootstrapOptions {
        rho_threshold: args.rho_threshold.unwrap_or(defaults.rho_threshold),
        em: em_settings(&args.common, &cfg),
    };

    let bands =
        parametric_bootstrap(&model, args.edges, args.snapshots, n_replicates, seed, &options)?;

    let describe = |table: Table| {
        table
            .meta("seed", seed)
            .meta("model", args.model.display())
            .meta("edges", args.edges)
            .meta("snapshots", args.snapshots)
            .meta("replicates", bands.n_requested)
            .meta("failed", bands.n_failed)
            .meta("rho_threshold", fmt_f64(options.rho_threshold))
    };

    let mut band_table = bands_table(&bands);
    band_table.preamble = describe(table_for("bootstrap", &[])).preamble;

    let mut outputs = OutputSet::new();
    outputs.stage_table(&args.out, &band_table)?;
    if let Some(path) = &args.params_out {
        let g = model.n_clusters();
        let spec = model.spec;
        let mut header: Vec<String> = vec!["replicate".into()];
        header.extend((1..=g).map(|i| format!("pi_{i}")));
        for i in 1..=g {
            for m in 1..=spec.harmonic_order {
                header.push(format!("c{i}_cos{m}"));
                header.push(format!("c{i}_sin{m}"));
            }
            for k in 1..=spec.ar_order {
                header.push(format!("c{i}_lag{k}"));
            }
            header.push(format!("c{i}_intercept"));
        }
        let mut params_table = describe(table_for("bootstrap", &[]));
        params_table.header = header;
        for (b, row) in bands.replicate_params.iter().enumerate() {
            let mut cells = vec![(b + 1).to_string()];
            cells.extend(row.iter().map(|&v| fmt_f64(v)));
            params_table.push(cells);
        }
        outputs.stage_table(path, &params_table)?;
    }
    outputs.commit()?;

    println!(
        "bootstrap {} replicates ({} failed), seed {seed}",
        bands.n_requested, bands.n_failed
    );
    for (g, cb) in bands.clusters.iter().enumerate() {
        match cb.rho_bias {
            Some(rho_bias) => println!(
                "cluster {}: p bias {:+.5}, rho bias {:+.5}",
                g + 1,
                cb.p_bias,
                rho_bias
            ),
            None => println!(
                "cluster {}: p bias {:+.5}, rho bands suppressed (max fitted p below {})",
                g + 1,
                cb.p_bias,
                fmt_f64(options.rho_threshold)
            ),
        }
    }
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.params_out {
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- curves

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Model file to tabulate.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// Output table: one row per (cluster, time of day).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

pub fn curves(args: CurvesArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let spec = model.spec;
    let mut table = table_for("curves", &["cluster", "time_of_day", "p", "rho"])
        .meta("model", args.model.display())
        .meta("G", spec.n_clusters)
        .meta("K", spec.ar_order)
        .meta("H", spec.harmonic_order)
        .meta("P", spec.period);
    for (g, params) in model.clusters.iter().enumerate() {
        let curves = cyclo_curves(params, &spec)?;
        for l in 0..spec.period {
            table.push(vec![
                (g + 1).to_string(),
                l.to_string(),
                fmt_f64(curves.p_curve[l]),
                fmt_f64(curves.rho_curve[l]),
            ]);
        }
    }

    let mut outputs = OutputSet::new();
    outputs.stage_table(&args.out, &table)?;
    outputs.commit()?;

    println!("tabulated {} clusters x {} time steps", spec.n_clusters, spec.period);
    println!("wrote {}", args.out.display());
    Ok(())
}

// -------------------------------------------------------------- diagnose

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Input panel file.
    #[arg(long, value_name = "FILE")]
    panel: PathBuf,

    /// Fitted model; enables the cross-correlation overlay, which groups
    /// edges by their most probable cluster under this model.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Output prefix; writes `<prefix>.probe.tsv`, `<prefix>.ks.tsv`,
    /// `<prefix>.qq.tsv`, and (with a model) `<prefix>.crosscorr.tsv`.
    #[arg(long, value_name = "PREFIX")]
    out_prefix: PathBuf,

    /// Monte Carlo replicates per edge for the KS p-value.
    #[arg(long, default_value_t = 199, value_name = "N")]
    null_reps: usize,

    /// Simulated series per cluster for the cross-correlation null.
    #[arg(long, default_value_t = 1000, value_name = "M")]
    null_series: usize,

    /// Lag at which edge pairs are correlated.
    #[arg(long, default_value_t = 0)]
    lag: usize,

    /// Histogram bins for the cross-correlation overlay.
    #[arg(long, default_value_t = 40)]
    bins: usize,

    /// Cap on sampled edge pairs per cluster pair.
    #[arg(long, default_value_t = DEFAULT_MAX_PAIRS, value_name = "N")]
    max_pairs: usize,

    /// TOML configuration file (only `seed` applies here).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Random seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

pub fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let cfg = Config::load(args.config.as_deref())?;
    let seed = config::resolve(args.seed, cfg.seed, 0);
    let panel = load_panel(&args.panel)?;
    let model = args.model.as_deref().map(load_model).transpose()?;

    let describe = |table: Table| {
        let table = table.meta("seed", seed).meta("panel", args.panel.display());
        match &args.model {
            Some(path) => table.meta("model", path.display()),
            None => table,
        }
    };

    let mut probe_table =
        describe(table_for("diagnose", &["edge", "p_hat_mean", "p_hat_runs", "discrepancy", "status"]));
    let mut n_probed = 0usize;
    for i in 0..panel.n_edges() {
        let edge = (i + 1).to_string();
        match independence_probe(panel.series(i)) {
            Ok(probe) => {
                n_probed += 1;
                probe_table.push(vec![
                    edge,
                    fmt_f64(probe.p_hat_mean),
                    fmt_f64(probe.p_hat_runs),
                    fmt_f64(probe.discrepancy),
                    "ok".into(),
                ]);
            }
            Err(BalarmError::InsufficientData(_)) => probe_table.push(vec![
                edge,
                fmt_f64(panel.edge_mean(i)),
                String::new(),
                String::new(),
                "insufficient".into(),
            ]),
            Err(err) => return Err(err),
        }
    }

    // Off-runs against the geometric law implied by the series mean; each
    // edge gets its own Monte Carlo stream so the table is independent of
    // evaluation order.
    let mut ks_table = describe(table_for("diagnose", &[
        "edge", "n_runs", "p_hat", "statistic", "p_value", "status",
    ]))
    .meta("null_reps", args.null_reps);
    let ks_rows: Vec<Option<(usize, f64, KsResult)>> = (0..panel.n_edges())
        .into_par_iter()
        .map(|i| {
            let p_hat = panel.edge_mean(i);
            if p_hat <= 0.0 || p_hat >= 1.0 {
                return Ok(None);
            }
            let runs = run_lengths(panel.series(i))?.interior_off();
            if runs.is_empty() {
                return Ok(None);
            }
            ks_geometric(&runs, p_hat, args.null_reps, seed.wrapping_add(i as u64))
                .map(|ks| Some((runs.len(), p_hat, ks)))
        })
        .collect::<Result<_>>()?;
    let mut n_tested = 0usize;
    for (i, row) in ks_rows.iter().enumerate() {
        let edge = (i + 1).to_string();
        match row {
            Some((n_runs, p_hat, ks)) => {
                n_tested += 1;
                ks_table.push(vec![
                    edge,
                    n_runs.to_string(),
                    fmt_f64(*p_hat),
                    fmt_f64(ks.statistic),
                    fmt_f64(ks.p_value),
                    "ok".into(),
                ]);
            }
            None => ks_table.push(vec![
                edge,
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "insufficient".into(),
            ]),
        }
    }

    // QQ points for both states: interior off-runs against Geometric(p),
    // interior on-runs against Geometric(1 - p).
    let mut qq_table =
        describe(table_for("diagnose", &["edge", "state", "theoretical", "sample"]));
    for i in 0..panel.n_edges() {
        let p_hat = panel.edge_mean(i);
        if p_hat <= 0.0 || p_hat >= 1.0 {
            continue;
        }
        let summary = run_lengths(panel.series(i))?;
        for (state, runs, p) in
            [("off", summary.interior_off(), p_hat), ("on", summary.interior_on(), 1.0 - p_hat)]
        {
            if runs.is_empty() {
                continue;
            }
            for (theoretical, sample) in geometric_qq(&runs, p)? {
                qq_table.push(vec![
                    (i + 1).to_string(),
                    state.into(),
                    fmt_f64(theoretical),
                    fmt_f64(sample),
                ]);
            }
        }
    }

    let mut outputs = OutputSet::new();
    outputs.stage_table(&with_suffix(&args.out_prefix, ".probe.tsv"), &probe_table)?;
    outputs.stage_table(&with_suffix(&args.out_prefix, ".ks.tsv"), &ks_table)?;
    outputs.stage_table(&with_suffix(&args.out_prefix, ".qq.tsv"), &qq_table)?;

    let mut n_overlay_groups = 0usize;
    if let Some(model) = &model {
        let labels = hard_labels(&e_step(&panel, model)?);
        let null =
            crosscorr_null(model, args.null_series, panel.n_snapshots(), args.lag, seed, args.max_pairs)?;
        let observed = crosscorr_observed(&panel, &labels, args.lag, seed, args.max_pairs)?;
        // Hard assignment can leave the highest-numbered clusters without
        // any edge, shrinking the observed group list; keep the null groups
        // that have an observed counterpart.
        let covered: HashSet<(usize, usize)> =
            observed.iter().map(|p| (p.cluster_a, p.cluster_b)).collect();
        let null: Vec<_> =
            null.into_iter().filter(|p| covered.contains(&(p.cluster_a, p.cluster_b))).collect();
        let histograms = overlay_histograms(&null, &observed, args.bins)?;
        n_overlay_groups = histograms.len();
        let mut hist_table = histograms_table(&histograms);
        hist_table.preamble = describe(table_for("diagnose", &[]))
            .meta("lag", args.lag)
            .meta("null_series", args.null_series)
            .meta("bins", args.bins)
            .meta("max_pairs", args.max_pairs)
            .preamble;
        outputs.stage_table(&with_suffix(&args.out_prefix, ".crosscorr.tsv"), &hist_table)?;
    }
    outputs.commit()?;

    println!(
        "probe: {} of {} edges usable; ks: {} tested",
        n_probed,
        panel.n_edges(),
        n_tested
    );
    if model.is_some() {
        println!("crosscorr: {n_overlay_groups} cluster pairs overlaid");
    }
    println!("wrote {}.{{probe,ks,qq{}}}.tsv", args.out_prefix.display(), if model.is_some() { ",crosscorr" } else { "" });
    Ok(())
}

fn hard_labels(responsibilities: &[Vec<f64>]) -> Vec<usize> {
    responsibilities
        .iter()
        .map(|row| {
            let mut best = 0;
            for (g, &t) in row.iter().enumerate() {
                if t > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect()
}
