//! Staged, all-or-nothing file output.
//!
//! Commands render every output into memory first and only then touch the
//! filesystem. Each file is written atomically; if any write fails, files
//! already committed by the same command are removed again, so a failed run
//! never leaves a partial set of outputs behind.

use std::path::{Path, PathBuf};

use balarm::{write_atomic, write_model, write_panel, BalarmModel, EdgePanel, Result, Table};

/// Collects rendered outputs and commits them in one pass.
#[derive(Debug, Default)]
pub struct OutputSet {
    staged: Vec<(PathBuf, Vec<u8>)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage_bytes(&mut self, path: &Path, bytes: Vec<u8>) {
        self.staged.push((path.to_path_buf(), bytes));
    }

    pub fn stage_table(&mut self, path: &Path, table: &Table) -> Result<()> {
        let mut buf = Vec::new();
        table.write(&mut buf)?;
        self.stage_bytes(path, buf);
        Ok(())
    }

    pub fn stage_panel(&mut self, path: &Path, panel: &EdgePanel) -> Result<()> {
        let mut buf = Vec::new();
        write_panel(&mut buf, panel)?;
        self.stage_bytes(path, buf);
        Ok(())
    }

    pub fn stage_model(&mut self, path: &Path, model: &BalarmModel) -> Result<()> {
        let mut buf = Vec::new();
        write_model(&mut buf, model)?;
        self.stage_bytes(path, buf);
        Ok(())
    }

    /// Writes all staged files. On failure the files written so far are
    /// removed before the error is returned.
    pub fn commit(self) -> Result<()> {
        let mut written: Vec<PathBuf> = Vec::with_capacity(self.staged.len());
        for (path, bytes) in &self.staged {
            if let Err(err) = write_atomic(path, bytes) {
                for done in &written {
                    let _ = std::fs::remove_file(done);
                }
                return Err(err);
            }
            written.push(path.clone());
        }
        Ok(())
    }
}
