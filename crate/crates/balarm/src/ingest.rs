//! Parsing of timestamped contact-event logs and their aggregation into
//! regular binary edge panels.

use std::collections::HashMap;
use std::io::BufRead;

use crate::error::{BalarmError, Result};
use crate::model::{lex_pair_index, EdgePanel, PanelProvenance};

/// One undirected contact record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactEvent {
    /// Event time in seconds, on the log's own clock.
    pub time: i64,
    /// Dense 0-based node index of the first column.
    pub node_a: usize,
    /// Dense 0-based node index of the second column.
    pub node_b: usize,
}

/// Node identities discovered while parsing, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeRegistry {
    names: Vec<String>,
    status: Vec<Option<String>>,
    index: HashMap<String, usize>,
}

impl NodeRegistry {
    /// Number of distinct nodes.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Raw identifiers, in first-appearance order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// The status recorded for node `i`, if the log carried one.
    pub fn status(&self, i: usize) -> Option<&str> {
        self.status[i].as_deref()
    }

    /// Dense index of a raw identifier.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Distinct statuses with their node counts, largest first.
    pub fn status_counts(&self) -> Vec<(String, usize)> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for status in self.status.iter().flatten() {
            *counts.entry(status).or_insert(0) += 1;
        }
        let mut out: Vec<(String, usize)> =
            counts.into_iter().map(|(s, c)| (s.to_string(), c)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    fn intern(&mut self, name: &str, status: Option<&str>, line: usize) -> Result<usize> {
        if let Some(&i) = self.index.get(name) {
            match (&self.status[i], status) {
                (Some(old), Some(new)) if old != new => {
                    return Err(BalarmError::Parse {
                        line,
                        message: format!("node {name} changes status from {old} to {new}"),
                    });
                }
                (None, Some(new)) => self.status[i] = Some(new.to_string()),
                _ => {}
            }
            return Ok(i);
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.status.push(status.map(str::to_string));
        self.index.insert(name.to_string(), i);
        Ok(i)
    }
}

/// A parsed contact log: events sorted by time, plus the node registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactLog {
    pub events: Vec<ContactEvent>,
    pub registry: NodeRegistry,
}

/// Parses a plain-text contact log.
///
/// Each non-empty line is whitespace-separated `time id_a id_b`, optionally
/// followed by `status_a status_b`; lines starting with `#` are comments.
/// Raw identifiers are mapped to dense indices in first-appearance order,
/// and a node's status must not change across lines. Events are returned
/// sorted by time (ties keep file order).
pub fn parse_contacts<R: BufRead>(reader: R) -> Result<ContactLog> {
    let mut events = Vec::new();
    let mut registry = NodeRegistry::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(BalarmError::Parse {
                line: line_no,
                message: format!(
                    "expected 'time id_a id_b' or 'time id_a id_b status_a status_b', found {} fields",
                    fields.len()
                ),
            });
        }
        let time: i64 = fields[0].parse().map_err(|_| BalarmError::Parse {
            line: line_no,
            message: format!("unreadable time '{}'", fields[0]),
        })?;
        let (status_a, status_b) = if fields.len() == 5 {
            (Some(fields[3]), Some(fields[4]))
        } else {
            (None, None)
        };
        let node_a = registry.intern(fields[1], status_a, line_no)?;
        let node_b = registry.intern(fields[2], status_b, line_no)?;
        if node_a == node_b {
            return Err(BalarmError::Parse {
                line: line_no,
                message: format!("self-contact for node {}", fields[1]),
            });
        }
        events.push(ContactEvent { time, node_a, node_b });
    }
    events.sort_by_key(|e| e.time);
    Ok(ContactLog { events, registry })
}

/// Options for [`aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateOptions {
    /// Aggregation window in seconds.
    pub window_seconds: i64,
    /// Left edge of the first window; defaults to 0.
    pub t_start: Option<i64>,
    /// End of the aggregation range; defaults to the last event time.
    pub t_end: Option<i64>,
    /// Harmonic phase origin on the log's clock; defaults to `t_start`.
    /// Supply the preceding clock midnight to phase harmonics on wall-clock
    /// days.
    pub phase_origin: Option<i64>,
}

impl AggregateOptions {
    pub fn new(window_seconds: i64) -> Self {
        Self { window_seconds, t_start: None, t_end: None, phase_origin: None }
    }
}

/// An aggregated panel plus the count of events that fell outside the
/// aggregation range.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPanel {
    pub panel: EdgePanel,
    pub n_dropped_events: usize,
}

/// Aggregates events into a binary panel over every node pair.
///
/// Snapshot `l` (1-based) covers the left-open window
/// `(t_start + (l-1)·w, t_start + l·w]`, and an edge is on when the window
/// holds at least one of its events; `n = ceil((t_end - t_start)/w)`. All
/// `N(N-1)/2` node pairs are materialized in lexicographic order, including
/// never-active ones. Events at or before `t_start`, or after `t_end`, are
/// dropped and counted.
///
/// Panel timestamps are the snapshot indices `1..n` shifted so that step 0
/// falls on `phase_origin`; with the default origin the timestamps are
/// exactly `1..n`. Window, range start, and phase origin are recorded as
/// provenance on the panel.
pub fn aggregate(
    events: &[ContactEvent], registry: &NodeRegistry, options: &AggregateOptions,
) -> Result<AggregatedPanel> {
    let w = options.window_seconds;
    if w <= 0 {
        return Err(BalarmError::InvalidParams("window must be a positive number of seconds".into()));
    }
    let n_nodes = registry.len();
    if n_nodes < 2 {
        return Err(BalarmError::InsufficientData(format!(
            "{n_nodes} node(s) cannot form an edge"
        )));
    }
    let t_start = options.t_start.unwrap_or(0);
    let t_end = match options.t_end {
        Some(t) => t,
        None => events.iter().map(|e| e.time).max().ok_or_else(|| {
            BalarmError::InvalidParams("t_end is required when the event list is empty".into())
        })?,
    };
    if t_start >= t_end {
        return Err(BalarmError::InvalidParams(format!(
            "aggregation range ({t_start}, {t_end}] is empty"
        )));
    }
    let phase_origin = options.phase_origin.unwrap_or(t_start);
    let n = ((t_end - t_start + w - 1) / w) as usize;
    let n_edges = n_nodes * (n_nodes - 1) / 2;

    let mut rows = vec![vec![0u8; n]; n_edges];
    let mut n_dropped_events = 0usize;
    for event in events {
        if event.node_a >= n_nodes || event.node_b >= n_nodes {
            return Err(BalarmError::DimensionMismatch(format!(
                "event references node {} outside the registry",
                event.node_a.max(event.node_b)
            )));
        }
        if event.time <= t_start || event.time > t_end {
            n_dropped_events += 1;
            continue;
        }
        let l = ((event.time - t_start + w - 1) / w) as usize;
        let (k, j) = (event.node_a.min(event.node_b), event.node_a.max(event.node_b));
        rows[lex_pair_index(n_nodes, k, j)][l - 1] = 1;
    }

    let edge_pairs: Vec<(usize, usize)> =
        (0..n_nodes).flat_map(|k| (k + 1..n_nodes).map(move |j| (k, j))).collect();
    let node_status = if registry.status.iter().all(Option::is_none) {
        None
    } else {
        Some(registry.status.iter().map(|s| s.clone().unwrap_or_else(|| "-".into())).collect())
    };
    // Timestamps count whole windows since the phase origin, so time of day
    // is preserved when the origin is an earlier clock midnight.
    let t_first = (t_start - phase_origin).div_euclid(w) + 1;
    let panel = EdgePanel::new(rows, t_first, edge_pairs, registry.names.clone(), node_status)?
        .with_provenance(PanelProvenance {
            window_seconds: w,
            t_start_seconds: t_start,
            phase_origin_seconds: phase_origin,
        });
    Ok(AggregatedPanel { panel, n_dropped_events })
}
