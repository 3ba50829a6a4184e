//! JSON and CSV artifacts plus the per-run manifest.

use std::path::Path;

use anyhow::{Context, Result};
use safemark_core::distort::HeatmapReport;
use safemark_core::trainer::StepRecord;
use serde::Serialize;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Serialises `rows` with a header taken from the row type.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, csv_string(rows)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_steps_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    write_csv(path, records)
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// `prompt,<column>...` with one row per prompt.
pub fn heatmap_csv(h: &HeatmapReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["prompt".to_string()];
    header.extend(h.columns.iter().cloned());
    w.write_record(&header)?;
    for (row, cells) in h.rows.iter().zip(&h.cells) {
        let mut rec = vec![row.clone()];
        rec.extend(cells.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_heatmap_csv(path: &Path, h: &HeatmapReport) -> Result<()> {
    std::fs::write(path, heatmap_csv(h)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct Versions {
    pub safemark_lab: &'static str,
    pub safemark_core: &'static str,
}

/// Provenance for one run directory. No timestamps, so identical runs
/// produce identical manifests.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64, artifacts: &[&str]) -> Self {
        Self {
            command: command.into(),
            config_hash,
            seed,
            versions: Versions {
                safemark_lab: env!("CARGO_PKG_VERSION"),
                safemark_core: safemark_core::VERSION,
            },
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_layout() {
        let h = HeatmapReport {
            rows: vec!["a".into()],
            columns: vec!["none".into(), "blur_1".into()],
            cells: vec![vec![0.0, 0.25]],
        };
        assert_eq!(heatmap_csv(&h).unwrap(), "prompt,none,blur_1\na,0,0.25\n");
    }

    #[test]
    fn steps_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = StepRecord {
            step: 3,
            loss_sem: 0.1,
            loss_wm: 0.2,
            loss_total: 0.3,
            soft_acc: 0.8,
            hard_acc: 0.75,
            hinge_active: true,
        };
        let path = dir.path().join("steps.csv");
        write_steps_csv(&path, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_steps_csv(&path).unwrap(), vec![rec]);
    }
}
