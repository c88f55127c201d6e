//! Atomic output files.
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written file and a failing cell cannot clobber
//! earlier results.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> fairsurvey::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
    }
    tmp.persist(path).with_context(|| format!("moving output into place at {}", path.display()))?;
    Ok(())
}

/// Collects the paths written by a command for the closing summary.
#[derive(Debug, Default)]
pub struct Written(Vec<PathBuf>);

impl Written {
    pub fn file<F>(&mut self, path: PathBuf, fill: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<&mut File>) -> fairsurvey::Result<()>,
    {
        write_atomic(&path, fill)?;
        self.0.push(path);
        Ok(())
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.0
    }
}
