use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tempfile::NamedTempFile;

use nettop::Topology;

/// Writes `path` through a temporary file in the same directory, so a
/// failed command never leaves a partial file behind.
pub fn atomic_write<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, lines: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        for line in lines {
            serde_json::to_writer(&mut *w, line)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

#[derive(Serialize)]
pub struct TopologyDoc {
    pub nodes: usize,
    pub edges: Vec<Edge>,
}

impl From<&Topology> for TopologyDoc {
    fn from(g: &Topology) -> Self {
        Self {
            nodes: g.nodes(),
            edges: g.edges().map(|(source, target)| Edge { source, target }).collect(),
        }
    }
}
