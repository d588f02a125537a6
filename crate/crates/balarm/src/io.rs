//! Serialization: the versioned panel text format, model JSON files,
//! plot-ready tab-separated tables, and atomic file writes.
//!
//! Floating-point values are written with Rust's shortest round-trip
//! formatting, so write → read reproduces every bit and identical inputs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapBands;
use crate::diagnostics::GroupHistogram;
use crate::error::{BalarmError, Result};
use crate::model::{BalarmModel, EdgePanel, PanelProvenance};

const PANEL_MAGIC: &str = "balarm-panel v1";
const MODEL_FORMAT: &str = "balarm-model";
const MODEL_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary file in the same
/// directory, renamed into place only when complete, so failures never
/// leave a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| BalarmError::Io(e.error))?;
    Ok(())
}

fn format_token(name: &str) -> Result<&str> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(BalarmError::Format(format!(
            "name '{name}' cannot be serialized as a whitespace-separated token"
        )));
    }
    Ok(name)
}

/// Serializes a panel in the `balarm-panel v1` text format.
///
/// Layout: the magic line; `nodes`, `edges`, `snapshots`, `t_first`
/// key-value lines; `window`, `t_start`, `phase_origin` lines when the
/// panel carries provenance; one `node <name> [<status>]` line per node;
/// one `edge <k> <j> <bits>` line per edge with 1-based node indices and
/// the series as a 0/1 string.
pub fn write_panel(mut w: impl Write, panel: &EdgePanel) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{PANEL_MAGIC}").unwrap();
    writeln!(out, "nodes {}", panel.n_nodes()).unwrap();
    writeln!(out, "edges {}", panel.n_edges()).unwrap();
    writeln!(out, "snapshots {}", panel.n_snapshots()).unwrap();
    writeln!(out, "t_first {}", panel.timestamp(0)).unwrap();
    if let Some(p) = panel.provenance() {
        writeln!(out, "window {}", p.window_seconds).unwrap();
        writeln!(out, "t_start {}", p.t_start_seconds).unwrap();
        writeln!(out, "phase_origin {}", p.phase_origin_seconds).unwrap();
    }
    for (i, name) in panel.node_names().iter().enumerate() {
        match panel.node_status() {
            Some(status) => {
                writeln!(out, "node {} {}", format_token(name)?, format_token(&status[i])?).unwrap()
            }
            None => writeln!(out, "node {}", format_token(name)?).unwrap(),
        }
    }
    let mut bits = String::with_capacity(panel.n_snapshots());
    for i in 0..panel.n_edges() {
        let (k, j) = panel.edge_pair(i);
        bits.clear();
        bits.extend(panel.series(i).iter().map(|&v| if v == 1 { '1' } else { '0' }));
        writeln!(out, "edge {} {} {bits}", k + 1, j + 1).unwrap();
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

struct LineReader<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> LineReader<R> {
    fn next(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(BalarmError::Parse {
                line: self.line_no,
                message: "unexpected end of panel file".into(),
            }),
        }
    }

    fn error(&self, message: String) -> BalarmError {
        BalarmError::Parse { line: self.line_no, message }
    }

    fn keyed(&mut self, key: &str) -> Result<i64> {
        let line = self.next()?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.error(format!("expected '{key} <value>', found '{line}'")))?;
        rest.trim().parse().map_err(|_| self.error(format!("unreadable {key} value '{rest}'")))
    }
}

/// Reads a panel in the `balarm-panel v1` text format.
pub fn read_panel(reader: impl BufRead) -> Result<EdgePanel> {
    let mut lines = LineReader { inner: reader.lines(), line_no: 0 };
    let magic = lines.next()?;
    if magic.trim() != PANEL_MAGIC {
        return Err(lines.error(format!("not a '{PANEL_MAGIC}' file (found '{magic}')")));
    }
    let n_nodes = lines.keyed("nodes")? as usize;
    let n_edges = lines.keyed("edges")? as usize;
    let n_snapshots = lines.keyed("snapshots")? as usize;
    let t_first = lines.keyed("t_first")?;

    let mut provenance = None;
    let mut pending = lines.next()?;
    if pending.starts_with("window ") {
        let window_seconds = pending[7..]
            .trim()
            .parse()
            .map_err(|_| lines.error(format!("unreadable window value in '{pending}'")))?;
        let t_start_seconds = lines.keyed("t_start")?;
        let phase_origin_seconds = lines.keyed("phase_origin")?;
        provenance = Some(PanelProvenance { window_seconds, t_start_seconds, phase_origin_seconds });
        pending = lines.next()?;
    }

    let mut node_names = Vec::with_capacity(n_nodes);
    let mut statuses: Vec<Option<String>> = Vec::with_capacity(n_nodes);
    for i in 0..n_nodes {
        let line = if i == 0 { std::mem::take(&mut pending) } else { lines.next()? };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["node", name] => {
                node_names.push(name.to_string());
                statuses.push(None);
            }
            ["node", name, status] => {
                node_names.push(name.to_string());
                statuses.push(Some(status.to_string()));
            }
            _ => return Err(lines.error(format!("expected 'node <name> [<status>]', found '{line}'"))),
        }
    }
    let node_status = if statuses.iter().all(Option::is_none) {
        None
    } else if statuses.iter().all(Option::is_some) {
        Some(statuses.into_iter().flatten().collect())
    } else {
        return Err(lines.error("some nodes carry a status and some do not".into()));
    };

    let mut rows = Vec::with_capacity(n_edges);
    let mut edge_pairs = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let line = lines.next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let ["edge", k, j, bits] = fields.as_slice() else {
            return Err(lines.error(format!("expected 'edge <k> <j> <bits>', found '{line}'")));
        };
        let parse_id = |tok: &str| -> Result<usize> {
            let id: usize = tok
                .parse()
                .map_err(|_| lines.error(format!("unreadable node index '{tok}'")))?;
            if id == 0 || id > n_nodes {
                return Err(lines.error(format!("node index {id} outside 1..{n_nodes}")));
            }
            Ok(id - 1)
        };
        edge_pairs.push((parse_id(k)?, parse_id(j)?));
        if bits.len() != n_snapshots {
            return Err(lines.error(format!(
                "series has {} values, header announced {n_snapshots}",
                bits.len()
            )));
        }
        let row: Vec<u8> = bits
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0),
                b'1' => Ok(1),
                other => Err(lines.error(format!("series value '{}' is not 0 or 1", other as char))),
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }

    let panel = EdgePanel::new(rows, t_first, edge_pairs, node_names, node_status)?;
    Ok(match provenance {
        Some(p) => panel.with_provenance(p),
        None => panel,
    })
}

/// Writes a panel to `path` atomically.
pub fn save_panel(path: &Path, panel: &EdgePanel) -> Result<()> {
    let mut bytes = Vec::new();
    write_panel(&mut bytes, panel)?;
    write_atomic(path, &bytes)
}

/// Reads a panel from `path`.
pub fn load_panel(path: &Path) -> Result<EdgePanel> {
    read_panel(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct ModelEnvelope {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: BalarmModel,
}

/// Serializes a model as versioned, human-readable JSON.
pub fn write_model(mut w: impl Write, model: &BalarmModel) -> Result<()> {
    model.validate()?;
    let envelope = ModelEnvelope {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| BalarmError::Format(format!("model serialization failed: {e}")))?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads a model written by [`write_model`], validating it.
pub fn read_model(reader: impl std::io::Read) -> Result<BalarmModel> {
    let envelope: ModelEnvelope = serde_json::from_reader(reader)
        .map_err(|e| BalarmError::Format(format!("unreadable model file: {e}")))?;
    if envelope.format != MODEL_FORMAT || envelope.version != MODEL_VERSION {
        return Err(BalarmError::Format(format!(
            "unsupported model file ({} v{}); this build reads {MODEL_FORMAT} v{MODEL_VERSION}",
            envelope.format, envelope.version
        )));
    }
    envelope.model.validate()?;
    Ok(envelope.model)
}

/// Writes a model to `path` atomically.
pub fn save_model(path: &Path, model: &BalarmModel) -> Result<()> {
    let mut bytes = Vec::new();
    write_model(&mut bytes, model)?;
    write_atomic(path, &bytes)
}

/// Reads a model from `path`.
pub fn load_model(path: &Path) -> Result<BalarmModel> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// A tab-separated table with a commented metadata preamble: `# key: value`
/// lines, a header row, then data rows. Empty cells stay empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub preamble: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), ..Self::default() }
    }

    pub fn meta(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.preamble.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let mut out = String::new();
        for (key, value) in &self.preamble {
            writeln!(out, "# {key}: {value}").unwrap();
        }
        writeln!(out, "{}", self.header.join("\t")).unwrap();
        for row in &self.rows {
            writeln!(out, "{}", row.join("\t")).unwrap();
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Writes the table to `path` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write(&mut bytes)?;
        write_atomic(path, &bytes)
    }
}

/// Formats a float with shortest round-trip precision.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Bootstrap bands as a table: one row per (cluster, time of day) with
/// probability and correlation band columns; correlation cells are blank
/// for clusters below the reporting threshold. Clusters are 1-based.
pub fn bands_table(bands: &BootstrapBands) -> Table {
    let mut table = Table::new(&[
        "cluster", "time_of_day", "p_lo", "p_med", "p_hi", "p_fit", "rho_lo", "rho_med", "rho_hi",
        "rho_fit",
    ]);
    for (g, cb) in bands.clusters.iter().enumerate() {
        for l in 0..cb.p_fit.len() {
            let mut row = vec![
                (g + 1).to_string(),
                l.to_string(),
                fmt_f64(cb.p.lower[l]),
                fmt_f64(cb.p.median[l]),
                fmt_f64(cb.p.upper[l]),
                fmt_f64(cb.p_fit[l]),
            ];
            match &cb.rho {
                Some(rho) => {
                    row.push(fmt_f64(rho.lower[l]));
                    row.push(fmt_f64(rho.median[l]));
                    row.push(fmt_f64(rho.upper[l]));
                    row.push(fmt_f64(cb.rho_fit[l]));
                }
                None => row.extend(std::iter::repeat(String::new()).take(4)),
            }
            table.push(row);
        }
    }
    table
}

/// Cross-correlation overlays as a table: one row per (cluster pair, bin)
/// with shared bin edges and both counts. The pair group is `a-b` with
/// 1-based cluster indices.
pub fn histograms_table(histograms: &[GroupHistogram]) -> Table {
    let mut table = Table::new(&["pair_group", "bin_lo", "bin_hi", "null_count", "observed_count"]);
    for h in histograms {
        let group = format!("{}-{}", h.cluster_a + 1, h.cluster_b + 1);
        for b in 0..h.null_counts.len() {
            table.push(vec![
                group.clone(),
                fmt_f64(h.bin_edges[b]),
                fmt_f64(h.bin_edges[b + 1]),
                h.null_counts[b].to_string(),
                h.observed_counts[b].to_string(),
            ]);
        }
    }
    table
}
