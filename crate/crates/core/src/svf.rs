//! Scaling and squaring: exponentiate a stationary velocity field into a
//! diffeomorphic displacement, with the reverse-mode gradient through every
//! squaring step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{spatial_gradient, GridMeta, ScalarVolume, VectorField};
use crate::warp::{compose_adjoint, compose_displacements, WarpTape};

pub const DEFAULT_STEPS: u32 = 7;
pub const MAX_STEPS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub steps: u32,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
        }
    }
}

impl IntegrationConfig {
    pub fn new(steps: u32) -> Result<Self> {
        let cfg = Self { steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STEPS).contains(&self.steps) {
            return Err(Error::InvalidArgument(format!(
                "integration steps must be in [1, {MAX_STEPS}], got {}",
                self.steps
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 / (1u64 << self.steps) as f64
    }
}

/// Intermediate fields `u_0 .. u_{steps-1}` and their composition tapes.
#[derive(Debug, Clone)]
pub struct SvfTape {
    cfg: IntegrationConfig,
    meta: GridMeta,
    fields: Vec<VectorField>,
    tapes: Vec<WarpTape>,
}

impl SvfTape {
    pub fn steps(&self) -> u32 {
        self.cfg.steps
    }

    /// Recomputes the integrated field from the recorded intermediates.
    pub fn replay(&self) -> Result<VectorField> {
        let mut out = None;
        for (u, tape) in self.fields.iter().zip(&self.tapes) {
            out = Some(tape.replay_compose(u, u)?);
        }
        Ok(out.expect("at least one step"))
    }
}

/// Integrates `z` with `cfg.steps` squarings: `u_0 = z / 2^steps`,
/// `u_{k+1} = u_k ∘ u_k`.
pub fn integrate_svf(z: &VectorField, cfg: IntegrationConfig) -> Result<(VectorField, SvfTape)> {
    cfg.validate()?;
    z.check_finite("velocity field")?;
    let mut u = z.scaled(cfg.scale());
    let mut fields = Vec::with_capacity(cfg.steps as usize);
    let mut tapes = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let (next, tape) = compose_displacements(&u, &u)?;
        fields.push(u);
        tapes.push(tape);
        u = next;
    }
    Ok((
        u,
        SvfTape {
            cfg,
            meta: z.meta,
            fields,
            tapes,
        },
    ))
}

/// Integrates `-z`, giving the inverse flow.
pub fn integrate_svf_reverse(
    z: &VectorField,
    cfg: IntegrationConfig,
) -> Result<(VectorField, SvfTape)> {
    integrate_svf(&z.neg(), cfg)
}

/// Reverse-mode gradient of the integrated field with respect to the velocity.
///
/// For a tape from [`integrate_svf_reverse`] the result is the gradient with
/// respect to the negated input; callers negate it themselves.
pub fn svf_backward(tape: &SvfTape, g_phi: &VectorField) -> Result<VectorField> {
    tape.meta.check_same("svf tape vs gradient", &g_phi.meta)?;
    let mut g = g_phi.clone();
    for (u, wt) in tape.fields.iter().zip(&tape.tapes).rev() {
        let (g_outer, g_inner) = compose_adjoint(wt, u, u, &g)?;
        let data = par::map_indexed(g.data.len(), |i| {
            let a = g_outer.data[i];
            let b = g_inner.data[i];
            [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
        });
        g = VectorField {
            meta: tape.meta,
            data,
        };
    }
    Ok(g.scaled(tape.cfg.scale()))
}

/// `det(I + ∇u)` per voxel, with central differences in the interior and
/// one-sided differences at faces.
pub fn jacobian_determinant(phi: &VectorField) -> Result<ScalarVolume> {
    let grads: Vec<VectorField> = (0..3)
        .map(|c| spatial_gradient(&phi.component(c)))
        .collect::<Result<_>>()?;
    let meta = phi.meta;
    let data = par::map_indexed(meta.len(), |i| {
        let mut j = [[0.0; 3]; 3];
        for (r, row) in j.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = grads[r].data[i][c] + if r == c { 1.0 } else { 0.0 };
            }
        }
        det3(&j)
    });
    Ok(ScalarVolume { meta, data })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Separable Gaussian smoothing of each component with replicated edges.
pub fn gaussian_smooth(f: &VectorField, sigma: f64) -> VectorField {
    VectorField {
        meta: f.meta,
        data: separable_blur(f.meta, &f.data, sigma, |acc: &mut [f64; 3], w, v| {
            for c in 0..3 {
                acc[c] += w * v[c];
            }
        }),
    }
}

/// Scalar counterpart of [`gaussian_smooth`].
pub fn gaussian_smooth_scalar(v: &ScalarVolume, sigma: f64) -> ScalarVolume {
    ScalarVolume {
        meta: v.meta,
        data: separable_blur(v.meta, &v.data, sigma, |acc: &mut f64, w, x| *acc += w * x),
    }
}

fn separable_blur<T>(
    meta: GridMeta,
    data: &[T],
    sigma: f64,
    fma: impl Fn(&mut T, f64, &T) + Sync,
) -> Vec<T>
where
    T: Copy + Default + Send + Sync,
{
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = meta.dims[axis] as isize;
        let src = cur;
        cur = par::map_indexed(meta.len(), |i| {
            let c = meta.coords(i);
            let mut acc = T::default();
            for (t, w) in kernel.iter().enumerate() {
                let mut cc = c;
                cc[axis] = (c[axis] as isize + t as isize - radius).clamp(0, n - 1) as usize;
                fma(&mut acc, *w, &src[meta.index(cc[0], cc[1], cc[2])]);
            }
            acc
        });
    }
    cur
}
