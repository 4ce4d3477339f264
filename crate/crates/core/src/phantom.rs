//! Analytic cortical phantoms with known thickness and subvoxel atrophy.
//!
//! Voxel `i` covers `[i - 0.5, i + 0.5]` along each axis. Slab phantoms put
//! the gray–white interface (GWI) on a plane normal to x and use exact
//! coverage fractions; perturbed slabs and spherical shells average coverage
//! over 4×4(×4) subsamples in boundary voxels. Atrophy moves only the pial
//! boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridMeta, LabelVolume, ScalarVolume};

const SUBSAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Slab,
    SphericalShell,
}

/// Sinusoidal displacement of the GWI (and, rigidly, the pial surface).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub amplitude_mm: f64,
    pub wavelength_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Slab: number of white-matter voxel layers along x before the GWI.
    /// Shell: inner (GWI) radius in x-voxels.
    pub wm_extent: f64,
    pub gm_thickness_mm: f64,
    #[serde(default)]
    pub atrophy_mm: f64,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    /// Seeds a uniform `[0, 1)` voxel shift of the GWI; `None` keeps it on
    /// the voxel grid.
    #[serde(default)]
    pub jitter_seed: Option<u64>,
}

impl PhantomSpec {
    pub fn slab(dims: [usize; 3], wm_extent: f64, gm_thickness_mm: f64) -> Self {
        Self {
            kind: PhantomKind::Slab,
            dims,
            spacing_mm: [1.0; 3],
            wm_extent,
            gm_thickness_mm,
            atrophy_mm: 0.0,
            perturbation: None,
            jitter_seed: None,
        }
    }

    pub fn shell(dims: [usize; 3], inner_radius: f64, gm_thickness_mm: f64) -> Self {
        Self {
            kind: PhantomKind::SphericalShell,
            ..Self::slab(dims, inner_radius, gm_thickness_mm)
        }
    }

    pub fn with_atrophy(mut self, atrophy_mm: f64) -> Self {
        self.atrophy_mm = atrophy_mm;
        self
    }

    /// Effective cortical thickness after atrophy.
    pub fn effective_thickness_mm(&self) -> f64 {
        self.gm_thickness_mm - self.atrophy_mm
    }

    fn jitter(&self) -> f64 {
        self.jitter_seed
            .map(|s| ChaCha8Rng::seed_from_u64(s).gen::<f64>())
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<GridMeta> {
        let meta = GridMeta::new(self.dims, self.spacing_mm)?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gm_thickness_mm.is_finite() && self.gm_thickness_mm > 0.0) {
            return bad(format!(
                "gm thickness must be positive, got {}",
                self.gm_thickness_mm
            ));
        }
        if !(self.atrophy_mm.is_finite() && self.atrophy_mm >= 0.0) {
            return bad(format!(
                "atrophy must be non-negative, got {}",
                self.atrophy_mm
            ));
        }
        if self.effective_thickness_mm() <= 0.0 {
            return bad(format!(
                "atrophy {} leaves no cortex from thickness {}",
                self.atrophy_mm, self.gm_thickness_mm
            ));
        }
        if !(self.wm_extent.is_finite() && self.wm_extent > 0.0) {
            return bad(format!(
                "wm extent must be positive, got {}",
                self.wm_extent
            ));
        }
        if let Some(p) = self.perturbation {
            if !(p.amplitude_mm >= 0.0 && p.wavelength_mm > 0.0) {
                return bad(format!("invalid perturbation {p:?}"));
            }
        }
        let amp = self.perturbation.map_or(0.0, |p| p.amplitude_mm);
        let sx = self.spacing_mm[0];
        match self.kind {
            PhantomKind::Slab => {
                let pial = self.wm_extent + 1.0 + (self.gm_thickness_mm + amp) / sx;
                if pial > self.dims[0] as f64 {
                    return bad(format!(
                        "slab does not fit: pial surface reaches x = {pial:.2} of {}",
                        self.dims[0]
                    ));
                }
            }
            PhantomKind::SphericalShell => {
                let outer = (self.wm_extent + 1.0) * sx + self.gm_thickness_mm + amp;
                let room = (0..3)
                    .map(|a| (self.dims[a] as f64 - 1.0) / 2.0 * self.spacing_mm[a])
                    .fold(f64::INFINITY, f64::min);
                if outer > room {
                    return bad(format!(
                        "shell does not fit: outer radius {outer:.2}mm exceeds {room:.2}mm"
                    ));
                }
            }
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomInstance {
    pub wm: ScalarVolume,
    pub wmgm: ScalarVolume,
    pub parcellation: LabelVolume,
    pub true_thickness_mm: f64,
}

impl PhantomInstance {
    /// Gray-matter partial volume, `wmgm - wm`.
    pub fn gm(&self) -> ScalarVolume {
        ScalarVolume {
            meta: self.wm.meta,
            data: self
                .wm
                .data
                .iter()
                .zip(&self.wmgm.data)
                .map(|(w, t)| (t - w).max(0.0))
                .collect(),
        }
    }
}

/// Fraction of `[lo, lo + 1]` lying below `c`.
#[inline]
fn coverage_below(c: f64, lo: f64) -> f64 {
    (c - lo).clamp(0.0, 1.0)
}

fn sub_offsets() -> [f64; SUBSAMPLES] {
    std::array::from_fn(|k| (k as f64 + 0.5) / SUBSAMPLES as f64 - 0.5)
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomInstance> {
    let meta = spec.validate()?;
    let jitter = spec.jitter();
    let (wm, wmgm, labels) = match spec.kind {
        PhantomKind::Slab => slab_maps(spec, meta, jitter),
        PhantomKind::SphericalShell => shell_maps(spec, meta, jitter),
    };
    Ok(PhantomInstance {
        wm: ScalarVolume { meta, data: wm },
        wmgm: ScalarVolume { meta, data: wmgm },
        parcellation: LabelVolume { meta, labels },
        true_thickness_mm: spec.effective_thickness_mm(),
    })
}

fn slab_maps(spec: &PhantomSpec, meta: GridMeta, jitter: f64) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let sx = spec.spacing_mm[0];
    // GWI plane in voxel coordinates along x.
    let gwi = spec.wm_extent - 0.5 + jitter;
    let band = spec.effective_thickness_mm() / sx;
    let offsets = sub_offsets();
    let pv = par::map_indexed(meta.len(), |i| {
        let [x, y, _] = meta.coords(i);
        let lo = x as f64 - 0.5;
        match spec.perturbation {
            None => (coverage_below(gwi, lo), coverage_below(gwi + band, lo)),
            // The interface varies along y only, so subsample y and keep the
            // exact coverage along x.
            Some(p) => {
                let mut acc = (0.0, 0.0);
                for oy in offsets {
                    let ymm = (y as f64 + oy) * spec.spacing_mm[1];
                    let shift = p.amplitude_mm / sx
                        * (2.0 * std::f64::consts::PI * ymm / p.wavelength_mm).sin();
                    acc.0 += coverage_below(gwi + shift, lo);
                    acc.1 += coverage_below(gwi + shift + band, lo);
                }
                let n = SUBSAMPLES as f64;
                (acc.0 / n, acc.1 / n)
            }
        }
    });
    let labels = pv.iter().map(|&(_, t)| u32::from(t > 0.0)).collect();
    let (wm, wmgm) = pv.into_iter().unzip();
    (wm, wmgm, labels)
}

fn shell_maps(spec: &PhantomSpec, meta: GridMeta, jitter: f64) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let s = spec.spacing_mm;
    let center: [f64; 3] = std::array::from_fn(|a| (meta.dims[a] as f64 - 1.0) / 2.0);
    let r_in = (spec.wm_extent + jitter) * s[0];
    let r_out_rel = spec.effective_thickness_mm();
    let pert = spec.perturbation;
    let amp = pert.map_or(0.0, |p| p.amplitude_mm);
    let half_diag = 0.5 * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    let offsets = sub_offsets();

    // Returns (inside GWI, inside pial) for a point in mm relative to center.
    let classify = |p: [f64; 3]| {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let base = r_in
            + pert.map_or(0.0, |q| {
                q.amplitude_mm * (2.0 * std::f64::consts::PI * p[0] / q.wavelength_mm).sin()
            });
        (r < base, r < base + r_out_rel)
    };

    let pv = par::map_indexed(meta.len(), |i| {
        let c = meta.coords(i);
        let p: [f64; 3] = std::array::from_fn(|a| (c[a] as f64 - center[a]) * s[a]);
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let margin = half_diag + amp;
        let near = |radius: f64| (r - radius).abs() < margin;
        if !near(r_in) && !near(r_in + r_out_rel) {
            let (a, b) = classify(p);
            return (f64::from(u8::from(a)), f64::from(u8::from(b)));
        }
        let mut acc = (0.0, 0.0);
        for ox in offsets {
            for oy in offsets {
                for oz in offsets {
                    let q = [p[0] + ox * s[0], p[1] + oy * s[1], p[2] + oz * s[2]];
                    let (a, b) = classify(q);
                    acc.0 += f64::from(u8::from(a));
                    acc.1 += f64::from(u8::from(b));
                }
            }
        }
        let n = (SUBSAMPLES * SUBSAMPLES * SUBSAMPLES) as f64;
        (acc.0 / n, acc.1 / n)
    });
    let labels = pv
        .iter()
        .enumerate()
        .map(|(i, &(_, t))| {
            if t <= 0.0 {
                return 0;
            }
            let c = meta.coords(i);
            let octant = (0..3).fold(0u32, |acc, a| {
                acc | (u32::from(c[a] as f64 >= center[a]) << a)
            });
            octant + 1
        })
        .collect();
    let (wm, wmgm) = pv.into_iter().unzip();
    (wm, wmgm, labels)
}

/// Induced atrophy levels of the reference phantom: ten steps of 0.01mm up to
/// 0.1mm, then nine steps of 0.1mm up to 1mm.
pub fn reference_atrophy_levels() -> Vec<f64> {
    let fine = (1..=10).map(|k| k as f64 * 0.01);
    let coarse = (2..=10).map(|k| k as f64 * 0.1);
    fine.chain(coarse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortEntry {
    pub subject: usize,
    pub atrophy_mm: f64,
    pub spec: PhantomSpec,
    pub instance: PhantomInstance,
}

/// One baseline plus one follow-up per atrophy level for every subject.
///
/// Each subject gets its own GWI jitter (shared by its follow-ups) drawn from
/// `seed`. A leading level of 0 is the baseline itself.
pub fn generate_cohort(
    subjects: &[PhantomSpec],
    levels: &[f64],
    seed: u64,
) -> Result<Vec<CohortEntry>> {
    if levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidArgument(
            "atrophy levels must be non-negative".into(),
        ));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "atrophy levels must be strictly increasing".into(),
        ));
    }
    let mut all_levels = Vec::with_capacity(levels.len() + 1);
    if levels.first() != Some(&0.0) {
        all_levels.push(0.0);
    }
    all_levels.extend_from_slice(levels);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subject_seeds: Vec<u64> = subjects.iter().map(|_| rng.gen()).collect();
    let jobs: Vec<(usize, f64, PhantomSpec)> = subjects
        .iter()
        .enumerate()
        .flat_map(|(s, base)| {
            let subject_seed = subject_seeds[s];
            all_levels.iter().map(move |&a| {
                let mut spec = base.clone();
                spec.atrophy_mm = a;
                spec.jitter_seed = Some(subject_seed);
                (s, a, spec)
            })
        })
        .collect();
    for (_, _, spec) in &jobs {
        spec.validate()?;
    }
    par::map_indexed(jobs.len(), |j| {
        let (subject, atrophy_mm, spec) = &jobs[j];
        make_phantom(spec).map(|instance| CohortEntry {
            subject: *subject,
            atrophy_mm: *atrophy_mm,
            spec: spec.clone(),
            instance,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_slab_has_sharp_layers() {
        let inst = make_phantom(&PhantomSpec::slab([16, 2, 2], 5.0, 3.0)).unwrap();
        let gm = inst.gm();
        for i in 0..inst.wm.data.len() {
            let x = inst.wm.meta.coords(i)[0];
            let (w, g) = (inst.wm.data[i], gm.data[i]);
            match x {
                0..=4 => assert_eq!((w, g), (1.0, 0.0)),
                5..=7 => assert_eq!((w, g), (0.0, 1.0)),
                _ => assert_eq!((w, g), (0.0, 0.0)),
            }
        }
        assert_eq!(inst.true_thickness_mm, 3.0);
    }

    #[test]
    fn quarter_atrophy_coverage() {
        let inst =
            make_phantom(&PhantomSpec::slab([16, 1, 1], 5.0, 3.0).with_atrophy(0.25)).unwrap();
        let gm = inst.gm();
        assert_eq!(gm.data[7], 0.75);
        assert_eq!(gm.data[6], 1.0);
        assert_eq!(gm.data[8], 0.0);
    }

    #[test]
    fn gm_volume_linear_in_atrophy() {
        let base = PhantomSpec {
            jitter_seed: Some(3),
            ..PhantomSpec::slab([20, 3, 2], 6.0, 3.0)
        };
        let gm_sum = |a: f64| {
            make_phantom(&base.clone().with_atrophy(a))
                .unwrap()
                .gm()
                .sum()
        };
        let n_cols = 6.0;
        let g0 = gm_sum(0.0);
        for a in [0.1, 0.35, 0.8, 1.3] {
            assert!((g0 - gm_sum(a) - a * n_cols).abs() < 1e-9);
        }
    }

    #[test]
    fn shell_volume_matches_analytic() {
        let spec = PhantomSpec::shell([28, 28, 28], 8.0, 2.5);
        let inst = make_phantom(&spec).unwrap();
        let gm = inst.gm().sum();
        let (r0, r1) = (8.0f64, 10.5f64);
        let exact = 4.0 / 3.0 * std::f64::consts::PI * (r1.powi(3) - r0.powi(3));
        assert!(((gm - exact) / exact).abs() < 0.02, "{gm} vs {exact}");
        let octants: std::collections::BTreeSet<u32> = inst
            .parcellation
            .labels
            .iter()
            .copied()
            .filter(|&l| l > 0)
            .collect();
        assert_eq!(octants.len(), 8);
    }

    #[test]
    fn wmgm_dominates_wm() {
        let specs = [
            PhantomSpec {
                perturbation: Some(Perturbation {
                    amplitude_mm: 1.2,
                    wavelength_mm: 7.0,
                }),
                jitter_seed: Some(9),
                ..PhantomSpec::slab([20, 8, 3], 6.0, 2.7).with_atrophy(0.3)
            },
            PhantomSpec::shell([24, 24, 24], 6.5, 3.0).with_atrophy(0.4),
        ];
        for spec in &specs {
            let inst = make_phantom(spec).unwrap();
            for (w, t) in inst.wm.data.iter().zip(&inst.wmgm.data) {
                assert!((0.0..=1.0).contains(w) && (0.0..=1.0).contains(t));
                assert!(t >= w);
            }
        }
    }

    #[test]
    fn rejects_full_atrophy_and_overflow() {
        assert!(make_phantom(&PhantomSpec::slab([16, 1, 1], 5.0, 1.0).with_atrophy(1.0)).is_err());
        assert!(make_phantom(&PhantomSpec::slab([8, 1, 1], 5.0, 3.0)).is_err());
        assert!(make_phantom(&PhantomSpec::shell([10, 10, 10], 4.0, 3.0)).is_err());
    }

    #[test]
    fn cohort_sizes() {
        let base = PhantomSpec::slab([12, 1, 1], 4.0, 3.0);
        assert_eq!(
            generate_cohort(std::slice::from_ref(&base), &[0.0], 1)
                .unwrap()
                .len(),
            1
        );
        let subjects = vec![base.clone(); 20];
        let levels = reference_atrophy_levels();
        assert_eq!(levels.len(), 19);
        assert_eq!(generate_cohort(&subjects, &levels, 1).unwrap().len(), 400);
    }

    #[test]
    fn cohort_is_deterministic_and_validated() {
        let subjects = vec![PhantomSpec::slab([12, 2, 1], 4.0, 3.0); 3];
        let a = generate_cohort(&subjects, &[0.2, 0.5], 42).unwrap();
        let b = generate_cohort(&subjects, &[0.2, 0.5], 42).unwrap();
        assert_eq!(a, b);
        assert!(generate_cohort(&subjects, &[0.5, 0.2], 42).is_err());
        assert!(generate_cohort(&subjects, &[-0.1], 42).is_err());
        // Follow-ups share the subject's GWI.
        assert_eq!(a[0].instance.wm, a[2].instance.wm);
    }

    #[test]
    fn reference_levels() {
        let l = reference_atrophy_levels();
        assert!((l[0] - 0.01).abs() < 1e-12);
        assert!((l[9] - 0.1).abs() < 1e-12);
        assert!((l[18] - 1.0).abs() < 1e-12);
    }
}
