//! Unsupervised registration objective:
//!
//! `L(WM, (WM+GM) ∘ φ₋z) + L(WM+GM, WM ∘ φz) + λ · smooth(z)`
//!
//! with mean-reduced similarity terms and its exact gradient in `z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::svf::{integrate_svf, integrate_svf_reverse, svf_backward, IntegrationConfig};
use crate::volume::{ScalarVolume, VectorField};
use crate::warp::{warp_scalar, warp_scalar_adjoint};

/// Upper end of the accepted smoothness weight unless the range check is
/// explicitly lifted.
pub const LAMBDA_MAX: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub similarity: Similarity,
    pub lambda: f64,
    pub integration: IntegrationConfig,
    /// Permit `lambda` above [`LAMBDA_MAX`].
    pub allow_large_lambda: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Mse,
            lambda: 0.02,
            integration: IntegrationConfig::default(),
            allow_large_lambda: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        if self.lambda > LAMBDA_MAX && !self.allow_large_lambda {
            return Err(Error::InvalidArgument(format!(
                "lambda {} exceeds {LAMBDA_MAX}; set allow_large_lambda to override",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `L(WM+GM, WM ∘ φz)`
    pub sim_forward: f64,
    /// `L(WM, (WM+GM) ∘ φ₋z)`
    pub sim_reverse: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Mean similarity between `a` and `b`, with its gradient with respect to `b`.
pub fn similarity(
    a: &ScalarVolume,
    b: &ScalarVolume,
    kind: Similarity,
) -> Result<(f64, ScalarVolume)> {
    a.meta.check_same("similarity operands", &b.meta)?;
    let n = a.data.len() as f64;
    let value = match kind {
        Similarity::Mse => par::sum(a.data.len(), |i| {
            let d = a.data[i] - b.data[i];
            d * d
        }),
        Similarity::L1 => par::sum(a.data.len(), |i| (a.data[i] - b.data[i]).abs()),
    } / n;
    let grad = par::map_indexed(a.data.len(), |i| {
        let d = b.data[i] - a.data[i];
        match kind {
            Similarity::Mse => 2.0 * d / n,
            Similarity::L1 => {
                if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            }
        }
    });
    Ok((
        value,
        ScalarVolume {
            meta: a.meta,
            data: grad,
        },
    ))
}

/// Number of (forward-difference pair, component) terms averaged by [`smoothness`].
pub fn smoothness_terms(dims: [usize; 3]) -> usize {
    let [nx, ny, nz] = dims;
    3 * ((nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1))
}

/// Mean squared forward difference of `z` over all neighbor pairs and
/// components, with its gradient.
pub fn smoothness(z: &VectorField) -> Result<(f64, VectorField)> {
    if z.meta.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidGrid(format!(
            "smoothness requires every dim >= 2, got {:?}",
            z.meta.dims
        )));
    }
    let meta = z.meta;
    let count = smoothness_terms(meta.dims) as f64;
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];

    let value = par::sum(meta.len(), |i| {
        let c = meta.coords(i);
        let mut acc = 0.0;
        for a in 0..3 {
            if c[a] + 1 < meta.dims[a] {
                let (p, q) = (z.data[i], z.data[i + strides[a]]);
                for k in 0..3 {
                    let d = q[k] - p[k];
                    acc += d * d;
                }
            }
        }
        acc
    }) / count;

    // d/dz_i of sum (z_j - z_i)^2 over pairs touching i.
    let grad = par::map_indexed(meta.len(), |i| {
        let c = meta.coords(i);
        let mut g = [0.0; 3];
        for a in 0..3 {
            if c[a] + 1 < meta.dims[a] {
                let q = z.data[i + strides[a]];
                for k in 0..3 {
                    g[k] -= 2.0 * (q[k] - z.data[i][k]);
                }
            }
            if c[a] >= 1 {
                let p = z.data[i - strides[a]];
                for k in 0..3 {
                    g[k] += 2.0 * (z.data[i][k] - p[k]);
                }
            }
        }
        [g[0] / count, g[1] / count, g[2] / count]
    });
    Ok((value, VectorField { meta, data: grad }))
}

/// Everything produced by one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    pub grad: VectorField,
    pub phi: VectorField,
    pub phi_neg: VectorField,
}

/// Evaluates the bidirectional objective at velocity `z` and its gradient.
pub fn cortexmorph_loss(
    wm: &ScalarVolume,
    wmgm: &ScalarVolume,
    z: &VectorField,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, VectorField)> {
    let eval = evaluate(wm, wmgm, z, cfg)?;
    Ok((eval.breakdown, eval.grad))
}

/// Like [`cortexmorph_loss`] but also returns both integrated fields.
pub fn evaluate(
    wm: &ScalarVolume,
    wmgm: &ScalarVolume,
    z: &VectorField,
    cfg: &LossConfig,
) -> Result<LossEvaluation> {
    cfg.validate()?;
    wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
    wm.meta.check_same("wm vs velocity", &z.meta)?;

    let (phi, tape_fwd) = integrate_svf(z, cfg.integration)?;
    let (phi_neg, tape_rev) = integrate_svf_reverse(z, cfg.integration)?;

    let (wm_warped, wt_fwd) = warp_scalar(wm, &phi)?;
    let (wmgm_warped, wt_rev) = warp_scalar(wmgm, &phi_neg)?;

    let (sim_forward, g_fwd_img) = similarity(wmgm, &wm_warped, cfg.similarity)?;
    let (sim_reverse, g_rev_img) = similarity(wm, &wmgm_warped, cfg.similarity)?;

    let (_, g_phi) = warp_scalar_adjoint(&wt_fwd, wm, &phi, &g_fwd_img)?;
    let (_, g_phi_neg) = warp_scalar_adjoint(&wt_rev, wmgm, &phi_neg, &g_rev_img)?;
    let g_z_fwd = svf_backward(&tape_fwd, &g_phi)?;
    let g_z_rev = svf_backward(&tape_rev, &g_phi_neg)?;

    let (smooth, g_smooth) = if cfg.lambda > 0.0 {
        smoothness(z)?
    } else {
        (0.0, VectorField::zeros(z.meta))
    };
    let lambda = cfg.lambda;
    let data = par::map_indexed(z.data.len(), |i| {
        let (a, b, s) = (g_z_fwd.data[i], g_z_rev.data[i], g_smooth.data[i]);
        [0, 1, 2].map(|k| a[k] - b[k] + lambda * s[k])
    });
    let total = sim_forward + sim_reverse + lambda * smooth;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossEvaluation {
        breakdown: LossBreakdown {
            sim_forward,
            sim_reverse,
            smooth,
            total,
        },
        grad: VectorField { meta: z.meta, data },
        phi,
        phi_neg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, fd_gradient};
    use crate::svf::gaussian_smooth;
    use crate::volume::GridMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(meta: GridMeta, rng: &mut ChaCha8Rng) -> ScalarVolume {
        ScalarVolume::new(meta, (0..meta.len()).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn lambda_range_enforced() {
        let cfg = LossConfig {
            lambda: 0.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = LossConfig {
            allow_large_lambda: true,
            ..cfg
        };
        assert!(cfg.validate().is_ok());
        let cfg = LossConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn similarity_of_equal_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meta = GridMeta::iso([3, 3, 3]).unwrap();
        let a = rand_volume(meta, &mut rng);
        for kind in [Similarity::Mse, Similarity::L1] {
            let (v, g) = similarity(&a, &a, kind).unwrap();
            assert_eq!(v, 0.0);
            assert!(g.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mse_zero_vs_one() {
        let meta = GridMeta::iso([2, 3, 4]).unwrap();
        let n = meta.len() as f64;
        let (v, g) = similarity(
            &ScalarVolume::zeros(meta),
            &ScalarVolume::filled(meta, 1.0),
            Similarity::Mse,
        )
        .unwrap();
        assert_eq!(v, 1.0);
        assert!(g.data.iter().all(|&x| (x - 2.0 / n).abs() < 1e-15));
    }

    #[test]
    fn similarity_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let meta = GridMeta::iso([4, 4, 4]).unwrap();
        let a = rand_volume(meta, &mut rng);
        let b = rand_volume(meta, &mut rng);
        for kind in [Similarity::Mse, Similarity::L1] {
            let (_, g) = similarity(&a, &b, kind).unwrap();
            let fd = fd_gradient(&b.data, 1e-3, |x| {
                similarity(&a, &ScalarVolume::new(meta, x.to_vec()).unwrap(), kind)
                    .unwrap()
                    .0
            });
            check_gradient(&g.data, &fd, 1e-4).unwrap();
        }
    }

    #[test]
    fn smoothness_of_constant() {
        let meta = GridMeta::iso([3, 4, 2]).unwrap();
        let (v, g) = smoothness(&VectorField::constant(meta, [1.0, -2.0, 0.5])).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|x| *x == [0.0; 3]));
    }

    #[test]
    fn smoothness_alternating_closed_form() {
        let meta = GridMeta::iso([5, 3, 4]).unwrap();
        let c = 0.7;
        let z = VectorField::from_fn(meta, |x, _, _| [if x % 2 == 0 { c } else { -c }, 0.0, 0.0]);
        let (v, _) = smoothness(&z).unwrap();
        // Each x-pair contributes (2c)^2 in one component; all other terms vanish.
        let x_pairs = (5 - 1) * 3 * 4;
        let terms = 3 * (x_pairs + 5 * 2 * 4 + 5 * 3 * 3);
        let expected = 4.0 * c * c * x_pairs as f64 / terms as f64;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meta = GridMeta::iso([5, 5, 5]).unwrap();
        let z = VectorField::from_flat(
            meta,
            &(0..3 * meta.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (_, g) = smoothness(&z).unwrap();
        let fd = fd_gradient(&z.to_flat(), 1e-3, |x| {
            smoothness(&VectorField::from_flat(meta, x).unwrap())
                .unwrap()
                .0
        });
        check_gradient(&g.to_flat(), &fd, 1e-4).unwrap();
    }

    #[test]
    fn smoothness_needs_two_voxels() {
        assert!(smoothness(&VectorField::zeros(GridMeta::iso([1, 4, 4]).unwrap())).is_err());
    }

    #[test]
    fn registered_pair_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let meta = GridMeta::iso([4, 4, 4]).unwrap();
        let wm = rand_volume(meta, &mut rng);
        let (b, g) =
            cortexmorph_loss(&wm, &wm, &VectorField::zeros(meta), &LossConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
        assert!(g.data.iter().all(|x| *x == [0.0; 3]));
    }

    #[test]
    fn identity_loss_is_twice_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let meta = GridMeta::iso([4, 4, 4]).unwrap();
        let wm = rand_volume(meta, &mut rng);
        let wmgm = rand_volume(meta, &mut rng);
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (b, _) = cortexmorph_loss(&wm, &wmgm, &VectorField::zeros(meta), &cfg).unwrap();
        let mse = wm
            .data
            .iter()
            .zip(&wmgm.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / meta.len() as f64;
        assert!((b.total - 2.0 * mse).abs() <= 1e-12 * mse);
    }

    fn smooth_instance(seed: u64) -> (ScalarVolume, ScalarVolume, VectorField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = GridMeta::iso([6, 6, 6]).unwrap();
        let wm = rand_volume(meta, &mut rng);
        let wmgm = rand_volume(meta, &mut rng);
        // Same-signed smooth components keep every sample point off the lattice.
        let raw = VectorField::from_fn(meta, |_, _, _| [0.0; 3]);
        let raw = VectorField::new(
            meta,
            raw.data
                .iter()
                .map(|_| {
                    [
                        rng.gen_range(0.1..0.5),
                        rng.gen_range(0.1..0.5),
                        rng.gen_range(0.1..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap();
        (wm, wmgm, gaussian_smooth(&raw, 1.0))
    }

    #[test]
    fn breakdown_identity_and_role_symmetry() {
        let (wm, wmgm, z) = smooth_instance(6);
        let cfg = LossConfig::default();
        let (b, _) = cortexmorph_loss(&wm, &wmgm, &z, &cfg).unwrap();
        let recomposed = b.sim_forward + b.sim_reverse + cfg.lambda * b.smooth;
        assert!((b.total - recomposed).abs() <= 1e-9 * b.total.abs());
        let (swapped, _) = cortexmorph_loss(&wmgm, &wm, &z.neg(), &cfg).unwrap();
        assert!((swapped.total - b.total).abs() <= 1e-9 * b.total.abs());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (wm, wmgm, z) = smooth_instance(7);
        let meta = z.meta;
        for similarity in [Similarity::Mse, Similarity::L1] {
            let cfg = LossConfig {
                similarity,
                lambda: 0.05,
                ..Default::default()
            };
            let (_, g) = cortexmorph_loss(&wm, &wmgm, &z, &cfg).unwrap();
            let fd = fd_gradient(&z.to_flat(), 1e-3, |x| {
                cortexmorph_loss(&wm, &wmgm, &VectorField::from_flat(meta, x).unwrap(), &cfg)
                    .unwrap()
                    .0
                    .total
            });
            check_gradient(&g.to_flat(), &fd, 1e-4).unwrap();
        }
    }
}
