//! 3D grid containers, trilinear sampling and spatial gradients.
//!
//! All grids are stored x-fastest: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Displacements and velocities are in voxel units.

pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Grid dimensions and voxel spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!(
                "dims must be >= 1, got {dims:?}"
            )));
        }
        if spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing_mm:?}"
            )));
        }
        Ok(Self { dims, spacing_mm })
    }

    /// Isotropic 1mm grid.
    pub fn iso(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// True when the voxel is at least one voxel away from every face.
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 1 && c[a] + 1 < self.dims[a])
    }

    pub(crate) fn check_same(&self, what: &'static str, other: &GridMeta) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dims(what, self.dims, other.dims));
        }
        Ok(())
    }

    fn require_min_dim(&self, min: usize, what: &str) -> Result<()> {
        if self.dims.iter().any(|&d| d < min) {
            return Err(Error::InvalidGrid(format!(
                "{what} requires every dim >= {min}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Scalar 3D grid (partial-volume map, intensity, thickness, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub meta: GridMeta,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(meta: GridMeta, data: Vec<f64>) -> Result<Self> {
        if data.len() != meta.len() {
            return Err(Error::ShapeMismatch {
                what: "scalar volume data",
                expected: meta.len(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar volume data"));
        }
        Ok(Self { meta, data })
    }

    pub fn filled(meta: GridMeta, value: f64) -> Self {
        Self {
            meta,
            data: vec![value; meta.len()],
        }
    }

    pub fn zeros(meta: GridMeta) -> Self {
        Self::filled(meta, 0.0)
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(meta: GridMeta, f: impl Fn(usize, usize, usize) -> f64 + Sync + Send) -> Self {
        let data = par::map_indexed(meta.len(), |i| {
            let [x, y, z] = meta.coords(i);
            f(x, y, z)
        });
        Self { meta, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.meta.index(x, y, z)]
    }

    /// Checks the partial-volume range `[0, 1]` within `tol`, then clamps.
    pub fn validate_pv(mut self, tol: f64) -> Result<Self> {
        for (i, v) in self.data.iter_mut().enumerate() {
            if *v < -tol || *v > 1.0 + tol {
                return Err(Error::InvalidArgument(format!(
                    "partial-volume value {v} at voxel {i} outside [0, 1]"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        par::sum(self.data.len(), |i| self.data[i])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Grid of 3-vectors in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub meta: GridMeta,
    pub data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(meta: GridMeta, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != meta.len() {
            return Err(Error::ShapeMismatch {
                what: "vector field data",
                expected: meta.len(),
                got: data.len(),
            });
        }
        let field = Self { meta, data };
        field.check_finite("vector field data")?;
        Ok(field)
    }

    pub fn zeros(meta: GridMeta) -> Self {
        Self::constant(meta, [0.0; 3])
    }

    pub fn constant(meta: GridMeta, v: [f64; 3]) -> Self {
        Self {
            meta,
            data: vec![v; meta.len()],
        }
    }

    pub fn from_fn(
        meta: GridMeta,
        f: impl Fn(usize, usize, usize) -> [f64; 3] + Sync + Send,
    ) -> Self {
        let data = par::map_indexed(meta.len(), |i| {
            let [x, y, z] = meta.coords(i);
            f(x, y, z)
        });
        Self { meta, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            meta: self.meta,
            data: self
                .data
                .iter()
                .map(|v| [v[0] * s, v[1] * s, v[2] * s])
                .collect(),
        }
    }

    pub fn neg(&self) -> Self {
        Self {
            meta: self.meta,
            data: self.data.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }

    /// Largest Euclidean vector norm.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(norm3(*v)))
    }

    /// Largest absolute component over voxels selected by `keep`.
    pub fn max_abs_where(&self, keep: impl Fn([usize; 3]) -> bool) -> f64 {
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(self.meta.coords(*i)))
            .fold(0.0, |m, (_, v)| {
                m.max(v[0].abs()).max(v[1].abs()).max(v[2].abs())
            })
    }

    /// Extracts one component as a scalar volume.
    pub fn component(&self, c: usize) -> ScalarVolume {
        ScalarVolume {
            meta: self.meta,
            data: self.data.iter().map(|v| v[c]).collect(),
        }
    }

    /// Flattens into `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn from_flat(meta: GridMeta, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * meta.len() {
            return Err(Error::ShapeMismatch {
                what: "flat vector field",
                expected: 3 * meta.len(),
                got: flat.len(),
            });
        }
        Ok(Self {
            meta,
            data: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// Parcellation labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub meta: GridMeta,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(meta: GridMeta, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != meta.len() {
            return Err(Error::ShapeMismatch {
                what: "label volume data",
                expected: meta.len(),
                got: labels.len(),
            });
        }
        Ok(Self { meta, labels })
    }

    pub fn uniform(meta: GridMeta, label: u32) -> Self {
        Self {
            meta,
            labels: vec![label; meta.len()],
        }
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        ScalarVolume {
            meta: self.meta,
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Converts a scalar volume holding non-negative integers.
    pub fn from_scalar(v: &ScalarVolume) -> Result<Self> {
        let labels = v
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if x < 0.0 || x.fract() != 0.0 || x > u32::MAX as f64 {
                    Err(Error::InvalidArgument(format!(
                        "label value {x} at voxel {i} is not a non-negative integer"
                    )))
                } else {
                    Ok(x as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            meta: v.meta,
            labels,
        })
    }
}

#[inline]
pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// One axis of a trilinear stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AxisStencil {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    /// False when the coordinate was clamped (or the axis has one voxel), so
    /// the sample does not depend on it locally.
    pub active: bool,
}

impl AxisStencil {
    #[inline]
    pub fn new(p: f64, n: usize) -> Self {
        let max = (n - 1) as f64;
        let (q, active) = if p < 0.0 {
            (0.0, false)
        } else if p > max {
            (max, false)
        } else {
            (p, n > 1)
        };
        let lo = (q.floor() as usize).min(n - 1);
        Self {
            lo,
            hi: (lo + 1).min(n - 1),
            frac: q - lo as f64,
            active,
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// The eight corners and weights of a clamped trilinear sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Stencil {
    pub axes: [AxisStencil; 3],
}

impl Stencil {
    #[inline]
    pub fn new(meta: &GridMeta, p: [f64; 3]) -> Self {
        Self {
            axes: [
                AxisStencil::new(p[0], meta.dims[0]),
                AxisStencil::new(p[1], meta.dims[1]),
                AxisStencil::new(p[2], meta.dims[2]),
            ],
        }
    }

    /// Corner indices in order `(cx, cy, cz)` with `cx` fastest.
    #[inline]
    pub fn corners(&self, meta: &GridMeta) -> [usize; 8] {
        let [ax, ay, az] = self.axes;
        let xs = [ax.lo, ax.hi];
        let ys = [ay.lo, ay.hi];
        let zs = [az.lo, az.hi];
        let mut out = [0usize; 8];
        for k in 0..8 {
            out[k] = meta.index(xs[k & 1], ys[(k >> 1) & 1], zs[(k >> 2) & 1]);
        }
        out
    }

    /// Interpolation weights matching [`Stencil::corners`].
    #[inline]
    pub fn weights(&self) -> [f64; 8] {
        let w = |a: &AxisStencil| [1.0 - a.frac, a.frac];
        let wx = w(&self.axes[0]);
        let wy = w(&self.axes[1]);
        let wz = w(&self.axes[2]);
        let mut out = [0.0; 8];
        for k in 0..8 {
            out[k] = wx[k & 1] * wy[(k >> 1) & 1] * wz[(k >> 2) & 1];
        }
        out
    }

    /// Nested linear interpolation of corner values (ordered as in
    /// [`Stencil::corners`]); reproduces constants and lattice values exactly.
    #[inline]
    pub fn interpolate(&self, v: [f64; 8]) -> f64 {
        let [fx, fy, fz] = [self.axes[0].frac, self.axes[1].frac, self.axes[2].frac];
        let c00 = lerp(v[0], v[1], fx);
        let c10 = lerp(v[2], v[3], fx);
        let c01 = lerp(v[4], v[5], fx);
        let c11 = lerp(v[6], v[7], fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Derivatives of the weights with respect to each sample coordinate.
    /// Clamped axes contribute zero.
    #[inline]
    pub fn weight_derivs(&self) -> [[f64; 8]; 3] {
        let w = |a: &AxisStencil| [1.0 - a.frac, a.frac];
        let d = |a: &AxisStencil| if a.active { [-1.0, 1.0] } else { [0.0, 0.0] };
        let (wx, wy, wz) = (w(&self.axes[0]), w(&self.axes[1]), w(&self.axes[2]));
        let (dx, dy, dz) = (d(&self.axes[0]), d(&self.axes[1]), d(&self.axes[2]));
        let mut out = [[0.0; 8]; 3];
        for k in 0..8 {
            let (i, j, l) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            out[0][k] = dx[i] * wy[j] * wz[l];
            out[1][k] = wx[i] * dy[j] * wz[l];
            out[2][k] = wx[i] * wy[j] * dz[l];
        }
        out
    }
}

/// Trilinear interpolation at a continuous voxel coordinate, with clamped
/// (replicated-edge) coordinates outside the grid.
pub fn trilinear_sample(v: &ScalarVolume, p: [f64; 3]) -> Result<f64> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("sample point"));
    }
    Ok(sample_unchecked(v, p))
}

#[inline]
pub(crate) fn sample_unchecked(v: &ScalarVolume, p: [f64; 3]) -> f64 {
    let st = Stencil::new(&v.meta, p);
    let idx = st.corners(&v.meta);
    st.interpolate(idx.map(|i| v.data[i]))
}

/// Vector analogue of [`trilinear_sample`], component-wise with the same kernel.
pub fn trilinear_sample_vector(f: &VectorField, p: [f64; 3]) -> Result<[f64; 3]> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("sample point"));
    }
    let st = Stencil::new(&f.meta, p);
    let idx = st.corners(&f.meta);
    Ok([0, 1, 2].map(|c| st.interpolate(idx.map(|i| f.data[i][c]))))
}

/// Central differences in the interior, one-sided at faces; value per voxel.
pub fn spatial_gradient(v: &ScalarVolume) -> Result<VectorField> {
    v.meta.require_min_dim(2, "spatial gradient")?;
    let meta = v.meta;
    let data = par::map_indexed(meta.len(), |i| {
        let c = meta.coords(i);
        let mut g = [0.0; 3];
        for a in 0..3 {
            let n = meta.dims[a];
            let step = |d: isize| {
                let mut cc = c;
                cc[a] = (cc[a] as isize + d) as usize;
                v.data[meta.index(cc[0], cc[1], cc[2])]
            };
            g[a] = if c[a] == 0 {
                step(1) - step(0)
            } else if c[a] == n - 1 {
                step(0) - step(-1)
            } else {
                0.5 * (step(1) - step(-1))
            };
        }
        g
    });
    Ok(VectorField { meta, data })
}
