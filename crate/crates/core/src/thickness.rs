//! Thickness read-out: locate the gray–white interface, take the length of
//! the reverse displacement there, and aggregate per parcellation label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GwiThresholds {
    pub wm: f64,
    pub gm: f64,
}

impl Default for GwiThresholds {
    fn default() -> Self {
        Self { wm: 0.5, gm: 0.5 }
    }
}

impl GwiThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("wm", self.wm), ("gm", self.gm)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} threshold must be in (0, 1), got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// White-matter voxels with at least one 6-connected gray-matter neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct GwiMask {
    pub meta: GridMeta,
    pub mask: Vec<bool>,
}

impl GwiMask {
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn extract_gwi(
    wm: &ScalarVolume,
    gm: &ScalarVolume,
    thresholds: GwiThresholds,
) -> Result<GwiMask> {
    thresholds.validate()?;
    wm.meta.check_same("wm vs gm", &gm.meta)?;
    let meta = wm.meta;
    let is_gm: Vec<bool> = gm.data.iter().map(|&g| g >= thresholds.gm).collect();
    let mask = (0..meta.len())
        .map(|i| {
            if wm.data[i] < thresholds.wm {
                return false;
            }
            let c = meta.coords(i);
            (0..3).any(|a| {
                let stride = [1, meta.dims[0], meta.dims[0] * meta.dims[1]][a];
                (c[a] > 0 && is_gm[i - stride]) || (c[a] + 1 < meta.dims[a] && is_gm[i + stride])
            })
        })
        .collect();
    Ok(GwiMask { meta, mask })
}

/// Gray-matter map from WM and WM+GM maps, `max(wmgm - wm, 0)`.
pub fn gm_from_wmgm(wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<ScalarVolume> {
    wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
    Ok(ScalarVolume {
        meta: wm.meta,
        data: wm
            .data
            .iter()
            .zip(&wmgm.data)
            .map(|(w, t)| (t - w).max(0.0))
            .collect(),
    })
}

/// Thickness in mm at each GWI voxel, in voxel index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessMap {
    pub meta: GridMeta,
    pub indices: Vec<usize>,
    pub values_mm: Vec<f64>,
}

impl ThicknessMap {
    pub fn mean(&self) -> f64 {
        mean_std(&self.values_mm).0
    }

    /// Dense volume with zeros off the interface.
    pub fn to_volume(&self) -> ScalarVolume {
        let mut v = ScalarVolume::zeros(self.meta);
        for (&i, &t) in self.indices.iter().zip(&self.values_mm) {
            v.data[i] = t;
        }
        v
    }
}

pub fn thickness_map(
    phi_neg: &VectorField,
    mask: &GwiMask,
    meta: &GridMeta,
) -> Result<ThicknessMap> {
    meta.check_same("grid vs reverse field", &phi_neg.meta)?;
    meta.check_same("grid vs interface mask", &mask.meta)?;
    let s = meta.spacing_mm;
    let indices = mask.indices();
    let values_mm = indices
        .iter()
        .map(|&i| {
            let u = phi_neg.data[i];
            let (a, b, c) = (u[0] * s[0], u[1] * s[1], u[2] * s[2]);
            (a * a + b * b + c * c).sqrt()
        })
        .collect();
    Ok(ThicknessMap {
        meta: *meta,
        indices,
        values_mm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub label: u32,
    pub mean_mm: f64,
    pub std_mm: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean_mm: f64,
    pub std_mm: f64,
    pub count: usize,
}

/// Regional and global thickness summaries. Standard deviations are
/// population (divide by `n`); an empty interface reports zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThicknessReport {
    pub global: GlobalStats,
    pub regions: Vec<RegionStats>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups interface voxels by label; label 0 counts toward the global
/// statistics only.
pub fn regional_thickness(
    map: &ThicknessMap,
    parcellation: &LabelVolume,
) -> Result<ThicknessReport> {
    map.meta
        .check_same("thickness map vs parcellation", &parcellation.meta)?;
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&i, &t) in map.indices.iter().zip(&map.values_mm) {
        let label = parcellation.labels[i];
        if label != 0 {
            groups.entry(label).or_default().push(t);
        }
    }
    let (mean_mm, std_mm) = mean_std(&map.values_mm);
    Ok(ThicknessReport {
        global: GlobalStats {
            mean_mm,
            std_mm,
            count: map.values_mm.len(),
        },
        regions: groups
            .into_iter()
            .map(|(label, v)| {
                let (mean_mm, std_mm) = mean_std(&v);
                RegionStats {
                    label,
                    mean_mm,
                    std_mm,
                    count: v.len(),
                }
            })
            .collect(),
    })
}

impl ThicknessReport {
    /// `label,mean_mm,std_mm,count`, one row per region.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mean_mm,std_mm,count\n");
        for r in &self.regions {
            let _ = writeln!(out, "{},{},{},{}", r.label, r.mean_mm, r.std_mm, r.count);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn region(&self, label: u32) -> Option<&RegionStats> {
        self.regions.iter().find(|r| r.label == label)
    }
}
