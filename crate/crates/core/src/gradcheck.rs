//! Central finite-difference gradients and a comparison helper, used to check
//! every hand-written adjoint in this crate.

/// Components with magnitude below this fraction of the largest reference
/// component are compared against that floor instead of their own size.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central difference of `f` at selected coordinates only.
pub fn fd_gradient_at(
    x: &[f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut work = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Worst component-wise relative error between an analytic gradient and a
/// reference, `|a - r| / max(|a|, |r|, RELATIVE_FLOOR * max|r|)`.
///
/// Returns `(worst error, index)`; the error is 0 when both are all-zero.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), reference.len(), "gradient lengths differ");
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(i, (a, r))| {
            let denom = a.abs().max(r.abs()).max(floor);
            let err = (a - r).abs();
            (if err == 0.0 { 0.0 } else { err / denom }, i)
        })
        .fold(
            (0.0, 0),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        )
}

/// Fails with a description of the worst component when the relative error
/// exceeds `tol`.
pub fn check_gradient(analytic: &[f64], reference: &[f64], tol: f64) -> Result<f64, String> {
    let (err, i) = max_relative_error(analytic, reference);
    if err <= tol {
        Ok(err)
    } else {
        Err(format!(
            "gradient mismatch at component {i}: analytic {} vs finite-difference {} (rel err {err:.3e} > {tol:.1e})",
            analytic[i], reference[i]
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = [1.0, -2.0, 0.5];
        let g = fd_gradient(&x, 1e-3, |x| x.iter().map(|v| v * v).sum());
        let exact: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(check_gradient(&exact, &g, 1e-9).is_ok());
    }

    #[test]
    fn detects_wrong_gradient() {
        assert!(check_gradient(&[1.0, 2.0], &[1.0, 2.1], 1e-4).is_err());
    }

    #[test]
    fn subset_matches_full() {
        let x = [0.3, 0.7, -1.1, 2.0];
        let f = |x: &[f64]| x[0] * x[1] + x[2].sin() * x[3];
        let full = fd_gradient(&x, 1e-4, f);
        let part = fd_gradient_at(&x, &[1, 3], 1e-4, f);
        assert_eq!(part, vec![full[1], full[3]]);
    }
}
