//! Cohort manifests and per-subject result tables.

use std::path::{Path, PathBuf};

use cortexmorph::volume::io::{load_labels, load_pv};
use cortexmorph::{LabelVolume, ScalarVolume};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One volume set. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject: usize,
    pub atrophy_mm: f64,
    pub wm: PathBuf,
    pub wmgm: PathBuf,
    pub labels: Option<PathBuf>,
    pub true_thickness_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub subject: usize,
    pub atrophy_mm: f64,
    pub true_thickness_mm: Option<f64>,
    pub mean_thickness_mm: f64,
    pub std_mm: f64,
    pub count: usize,
    pub final_loss: f64,
    pub iterations: usize,
}

pub struct Subject {
    pub wm: ScalarVolume,
    pub wmgm: ScalarVolume,
    pub labels: LabelVolume,
}

pub struct Manifest {
    pub base: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let rows: Vec<ManifestRow> = read_rows(path)?;
        if rows.is_empty() {
            return Err(CliError::Input(format!(
                "{}: manifest has no rows",
                path.display()
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base, rows })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load(&self, row: &ManifestRow) -> CliResult<Subject> {
        load_subject(
            &self.resolve(&row.wm),
            &self.resolve(&row.wmgm),
            row.labels.as_deref().map(|p| self.resolve(p)).as_deref(),
        )
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

/// Loads a PV pair. Without a parcellation every voxel gets label 1.
pub fn load_subject(wm: &Path, wmgm: &Path, labels: Option<&Path>) -> CliResult<Subject> {
    require(wm)?;
    require(wmgm)?;
    let wm = load_pv(wm)?;
    let wmgm = load_pv(wmgm)?;
    let labels = match labels {
        Some(p) => {
            require(p)?;
            load_labels(p)?
        }
        None => LabelVolume::uniform(wm.meta, 1),
    };
    Ok(Subject { wm, wmgm, labels })
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    require(path)?;
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(rows)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::from_io(path, e))
}
