//! Spatial transformer: pull-warping of scalar volumes, composition of
//! displacement fields, and the exact adjoints of both.
//!
//! Convention: `warp(m, u)(x) = m(x + u(x))`, sampled trilinearly with
//! clamped coordinates.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridMeta, ScalarVolume, Stencil, VectorField};

/// Sampling coordinates recorded by a forward warp or composition.
///
/// The stencil weights are a pure function of the coordinates, so replaying
/// the tape reproduces the forward output bit-exactly.
#[derive(Debug, Clone)]
pub struct WarpTape {
    meta: GridMeta,
    displacement_fingerprint: u64,
    points: Vec<[f64; 3]>,
}

impl WarpTape {
    fn record(u: &VectorField) -> Self {
        let meta = u.meta;
        let points = par::map_indexed(meta.len(), |i| {
            let [x, y, z] = meta.coords(i);
            let d = u.data[i];
            [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]]
        });
        Self {
            meta,
            displacement_fingerprint: fingerprint(u),
            points,
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    /// Sample coordinate used for voxel `i`.
    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    fn check(&self, displacement: &VectorField) -> Result<()> {
        self.meta
            .check_same("tape vs displacement", &displacement.meta)?;
        if fingerprint(displacement) != self.displacement_fingerprint {
            return Err(Error::StaleTape(
                "displacement differs from the one recorded on the tape",
            ));
        }
        Ok(())
    }

    /// Re-runs the recorded scalar warp.
    pub fn replay_scalar(&self, m: &ScalarVolume) -> Result<ScalarVolume> {
        self.meta.check_same("tape vs moving image", &m.meta)?;
        Ok(apply_scalar(m, &self.points))
    }

    /// Re-runs the recorded composition `b + a(x + b(x))`, given the `b` the
    /// tape was recorded with.
    pub fn replay_compose(&self, a: &VectorField, b: &VectorField) -> Result<VectorField> {
        self.check(b)?;
        a.meta.check_same("compose operands", &b.meta)?;
        Ok(apply_compose(a, b, &self.points))
    }
}

fn fingerprint(f: &VectorField) -> u64 {
    let mut h = DefaultHasher::new();
    for v in &f.data {
        for c in v {
            h.write_u64(c.to_bits());
        }
    }
    h.finish()
}

fn apply_scalar(m: &ScalarVolume, points: &[[f64; 3]]) -> ScalarVolume {
    let meta = m.meta;
    let data = par::map_indexed(meta.len(), |i| {
        let st = Stencil::new(&meta, points[i]);
        let idx = st.corners(&meta);
        st.interpolate(idx.map(|j| m.data[j]))
    });
    ScalarVolume { meta, data }
}

fn apply_compose(a: &VectorField, b: &VectorField, points: &[[f64; 3]]) -> VectorField {
    let meta = a.meta;
    let data = par::map_indexed(meta.len(), |i| {
        let st = Stencil::new(&meta, points[i]);
        let idx = st.corners(&meta);
        let base = b.data[i];
        [0, 1, 2].map(|c| base[c] + st.interpolate(idx.map(|j| a.data[j][c])))
    });
    VectorField { meta, data }
}

/// Warps `m` by the displacement `u`: `output(x) = m(x + u(x))`.
pub fn warp_scalar(m: &ScalarVolume, u: &VectorField) -> Result<(ScalarVolume, WarpTape)> {
    m.meta.check_same("warp image vs displacement", &u.meta)?;
    let tape = WarpTape::record(u);
    let out = apply_scalar(m, &tape.points);
    Ok((out, tape))
}

/// Gradients of `sum_x g_out(x) * warp(m, u)(x)` with respect to `m` and `u`.
pub fn warp_scalar_adjoint(
    tape: &WarpTape,
    m: &ScalarVolume,
    u: &VectorField,
    g_out: &ScalarVolume,
) -> Result<(ScalarVolume, VectorField)> {
    tape.check(u)?;
    tape.meta.check_same("tape vs moving image", &m.meta)?;
    tape.meta
        .check_same("tape vs output gradient", &g_out.meta)?;
    let meta = tape.meta;

    let g_u = par::map_indexed(meta.len(), |i| {
        let g = g_out.data[i];
        if g == 0.0 {
            return [0.0; 3];
        }
        let st = Stencil::new(&meta, tape.points[i]);
        let idx = st.corners(&meta);
        let dw = st.weight_derivs();
        let mut out = [0.0; 3];
        for k in 0..8 {
            let v = m.data[idx[k]];
            for a in 0..3 {
                out[a] += dw[a][k] * v;
            }
        }
        [out[0] * g, out[1] * g, out[2] * g]
    });

    let mut g_m = vec![0.0; meta.len()];
    for i in 0..meta.len() {
        let g = g_out.data[i];
        if g == 0.0 {
            continue;
        }
        let st = Stencil::new(&meta, tape.points[i]);
        let idx = st.corners(&meta);
        let w = st.weights();
        for k in 0..8 {
            g_m[idx[k]] += w[k] * g;
        }
    }

    Ok((
        ScalarVolume { meta, data: g_m },
        VectorField { meta, data: g_u },
    ))
}

/// Composes displacement fields as maps: the result `r` satisfies
/// `x + r(x) = (x + b(x)) + a(x + b(x))`, i.e. `b` is applied first.
pub fn compose_displacements(a: &VectorField, b: &VectorField) -> Result<(VectorField, WarpTape)> {
    a.meta.check_same("compose operands", &b.meta)?;
    let tape = WarpTape::record(b);
    let out = apply_compose(a, b, &tape.points);
    Ok((out, tape))
}

/// Gradients of `sum_x <g_r(x), compose(a, b)(x)>` with respect to `a` and `b`.
pub fn compose_adjoint(
    tape: &WarpTape,
    a: &VectorField,
    b: &VectorField,
    g_r: &VectorField,
) -> Result<(VectorField, VectorField)> {
    tape.check(b)?;
    tape.meta.check_same("tape vs outer field", &a.meta)?;
    tape.meta.check_same("tape vs output gradient", &g_r.meta)?;
    let meta = tape.meta;

    // d r_c / d p_a = sum_k dw_a[k] * a_c[k]; g_b = g_r + J^T g_r.
    let g_b = par::map_indexed(meta.len(), |i| {
        let g = g_r.data[i];
        let st = Stencil::new(&meta, tape.points[i]);
        let idx = st.corners(&meta);
        let dw = st.weight_derivs();
        let mut out = g;
        for k in 0..8 {
            let v = a.data[idx[k]];
            let dot = g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
            for ax in 0..3 {
                out[ax] += dw[ax][k] * dot;
            }
        }
        out
    });

    let mut g_a = vec![[0.0; 3]; meta.len()];
    for i in 0..meta.len() {
        let g = g_r.data[i];
        if g == [0.0; 3] {
            continue;
        }
        let st = Stencil::new(&meta, tape.points[i]);
        let idx = st.corners(&meta);
        let w = st.weights();
        for k in 0..8 {
            let t = &mut g_a[idx[k]];
            t[0] += w[k] * g[0];
            t[1] += w[k] * g[1];
            t[2] += w[k] * g[2];
        }
    }

    Ok((
        VectorField { meta, data: g_a },
        VectorField { meta, data: g_b },
    ))
}
