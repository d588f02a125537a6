//! Mixtures of logistic autoregressive binary time series with
//! daily-periodic covariates: simulation, EM fitting, model selection,
//! parametric bootstrap bands, and model-checking diagnostics.

pub mod alarm;
pub mod bootstrap;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod glm;
pub mod ingest;
pub mod io;
pub mod model;
pub(crate) mod rng;
pub mod selection;

pub use alarm::{
    alarm1_stationary, cyclo_curves, simulate_alarm, simulate_balarm, simulate_balarm_with, CycloCurves, SimOptions,
    StationarySummary,
};
pub use bootstrap::{parametric_bootstrap, BandCurves, BootstrapBands, BootstrapOptions, ClusterBands};
pub use diagnostics::{
    crosscorr_null, crosscorr_observed, geometric_qq, independence_probe, ks_geometric, overlay_histograms,
    run_lengths, GroupHistogram, IndependenceProbe, KsResult, PairCorrelations, Run, RunSummary, DEFAULT_MAX_PAIRS,
};
pub use em::{
    adjusted_rand_index, align_labels, cluster_loglik, e_step, fit_em, initialize, m_step, observed_loglik, EmInit,
    EmSettings, InitStrategy, MStepOutcome,
};
pub use error::{BalarmError, Result};
pub use glm::{build_design, weighted_logistic_fit, DesignRow, FitOptions, GlmFit};
pub use ingest::{
    aggregate, parse_contacts, AggregateOptions, AggregatedPanel, ContactEvent, ContactLog, NodeRegistry,
};
pub use io::{
    bands_table, fmt_f64, histograms_table, load_model, load_panel, read_model, read_panel, save_model, save_panel,
    write_atomic, write_model, write_panel, Table,
};
pub use selection::{bic, n_free_params, n_observations, sweep, SweepRow, SweepTable};
pub use model::{
    bernoulli_loglik_term, harmonic_basis, inv_logit, linear_predictor, BalarmModel, ClusterParams, EdgePanel,
    FitMeta, FitResult, ModelSpec, PanelProvenance,
};

/// Compiles and runs every code snippet in the guide, so the book can never
/// drift from the crate it documents.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/stationary.md")]
    mod stationary {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
