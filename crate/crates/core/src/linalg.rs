//! Dense helpers for log-Cholesky covariance blocks and multivariate normal
//! densities with gradients.
//!
//! A `d × d` covariance `Σ = L Lᵀ` is stored as `d(d+1)/2` reals walking the
//! lower triangle row by row; diagonal entries hold `log L_ii`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Dimension `d` with `tri_len(d) == len`.
pub fn tri_dim(len: usize) -> Option<usize> {
    let mut d = 0;
    while tri_len(d) < len {
        d += 1;
    }
    (tri_len(d) == len).then_some(d)
}

pub fn lower_from_log_chol(p: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(p.len(), tri_len(d));
    let mut l = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j { p[k].exp() } else { p[k] };
            k += 1;
        }
    }
    l
}

/// Inverse of [`lower_from_log_chol`]. `l` must have a positive diagonal.
pub fn log_chol_from_lower(l: &DMatrix<f64>, out: &mut [f64]) {
    let d = l.nrows();
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            out[k] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            k += 1;
        }
    }
}

/// Cholesky factor of a nominally SPD matrix. Re-symmetrizes, then retries
/// once with `1e-10` diagonal jitter before giving up.
pub fn spd_cholesky(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.l());
    }
    let d = sym.nrows();
    let jittered = sym + DMatrix::identity(d, d) * 1e-10;
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// `Σ log L_ii`, i.e. `½ log |Σ|`.
pub fn half_log_det(l: &DMatrix<f64>) -> f64 {
    l.diagonal().iter().map(|x| x.ln()).sum()
}

/// Solves `L z = r` in place.
pub fn forward_solve(l: &DMatrix<f64>, z: &mut [f64]) {
    let d = l.nrows();
    for i in 0..d {
        let mut s = z[i];
        for j in 0..i {
            s -= l[(i, j)] * z[j];
        }
        z[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ w = z` in place.
pub fn backward_solve_t(l: &DMatrix<f64>, w: &mut [f64]) {
    let d = l.nrows();
    for i in (0..d).rev() {
        let mut s = w[i];
        for j in i + 1..d {
            s -= l[(j, i)] * w[j];
        }
        w[i] = s / l[(i, i)];
    }
}

/// `log N(r | 0, L Lᵀ)`.
pub fn mvn_logpdf_chol(l: &DMatrix<f64>, r: &[f64]) -> f64 {
    let d = r.len();
    let mut z = r.to_vec();
    forward_solve(l, &mut z);
    let q: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * q - half_log_det(l) - 0.5 * d as f64 * LN_2PI
}

/// `log N(r | 0, L Lᵀ)` with `scale ×` its gradient accumulated into
/// `grad_r` (w.r.t. the residual) and `grad_l` (w.r.t. the lower factor).
pub fn mvn_logpdf_chol_grad(
    l: &DMatrix<f64>,
    r: &[f64],
    scale: f64,
    grad_r: &mut [f64],
    grad_l: &mut DMatrix<f64>,
) -> f64 {
    let d = r.len();
    let mut z = r.to_vec();
    forward_solve(l, &mut z);
    let mut w = z.clone();
    backward_solve_t(l, &mut w);
    let q: f64 = z.iter().map(|v| v * v).sum();
    for i in 0..d {
        grad_r[i] -= scale * w[i];
        for j in 0..=i {
            grad_l[(i, j)] += scale * w[i] * z[j];
        }
        grad_l[(i, i)] -= scale / l[(i, i)];
    }
    -0.5 * q - half_log_det(l) - 0.5 * d as f64 * LN_2PI
}

/// Maps a gradient w.r.t. the lower factor onto the log-Cholesky parameters.
pub fn chain_log_chol(grad_l: &DMatrix<f64>, l: &DMatrix<f64>, out: &mut [f64]) {
    let d = l.nrows();
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            out[k] += if i == j { grad_l[(i, i)] * l[(i, i)] } else { grad_l[(i, j)] };
            k += 1;
        }
    }
}

/// `log |∂Σ/∂p|` for the log-Cholesky map `p ↦ Σ = L Lᵀ`.
pub fn log_chol_log_jacobian(l: &DMatrix<f64>) -> f64 {
    let d = l.nrows();
    let mut acc = d as f64 * std::f64::consts::LN_2;
    for i in 0..d {
        acc += (d - i + 1) as f64 * l[(i, i)].ln();
    }
    acc
}

/// `L⁻¹`, or `None` when a diagonal entry has under- or overflowed.
pub fn lower_inverse(l: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if l.diagonal().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    l.clone().solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
}

/// Inverse-Wishart log density of `Σ = L Lᵀ` (up to a constant in `Σ`) plus
/// the log-Cholesky Jacobian: a density over the unconstrained parameters.
pub fn iw_log_chol_logpdf(l: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>) -> f64 {
    let d = l.nrows() as f64;
    let Some(linv) = lower_inverse(l) else { return f64::NEG_INFINITY };
    let a = &linv * psi * linv.transpose();
    -(nu + d + 1.0) * half_log_det(l) - 0.5 * a.trace() + log_chol_log_jacobian(l)
}

/// Gradient of [`iw_log_chol_logpdf`] w.r.t. the lower factor, accumulated into `grad_l`.
pub fn iw_log_chol_grad(l: &DMatrix<f64>, nu: f64, psi: &DMatrix<f64>, grad_l: &mut DMatrix<f64>) -> f64 {
    let n = l.nrows();
    let d = n as f64;
    let Some(linv) = lower_inverse(l) else { return f64::NEG_INFINITY };
    // ∂/∂L of -½ tr(Ψ Σ⁻¹) is Σ⁻¹ Ψ L⁻ᵀ.
    let sigma_inv = linv.transpose() * &linv;
    let g = &sigma_inv * psi * linv.transpose();
    for i in 0..n {
        for j in 0..=i {
            grad_l[(i, j)] += g[(i, j)];
        }
        grad_l[(i, i)] += (-(nu + d + 1.0) + (n - i + 1) as f64) / l[(i, i)];
    }
    let a = &linv * psi * linv.transpose();
    -(nu + d + 1.0) * half_log_det(l) - 0.5 * a.trace() + log_chol_log_jacobian(l)
}

/// Draws `N(mean, Q⁻¹)` given the precision `Q`.
pub fn sample_mvn_precision(
    q: &DMatrix<f64>,
    mean: &DVector<f64>,
    normals: &[f64],
) -> Result<DVector<f64>> {
    let l = spd_cholesky(q, "precision")?;
    // Q = L Lᵀ, so x = mean + L⁻ᵀ ε has covariance Q⁻¹.
    let mut e = normals.to_vec();
    backward_solve_t(&l, &mut e);
    Ok(mean + DVector::from_vec(e))
}

/// Draws `N(mean, L Lᵀ)` from standard normals.
pub fn sample_mvn_chol(l: &DMatrix<f64>, mean: &DVector<f64>, normals: &[f64]) -> DVector<f64> {
    mean + l * DVector::from_column_slice(normals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn log_chol_round_trip() {
        let p = [0.3, -0.2, 0.1, 0.5, 0.7, -0.4];
        let l = lower_from_log_chol(&p, 3);
        let mut q = [0.0; 6];
        log_chol_from_lower(&l, &mut q);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(tri_dim(6), Some(3));
        assert_eq!(tri_dim(5), None);
    }

    #[test]
    fn mvn_identity() {
        let l = DMatrix::identity(3, 3);
        assert!((mvn_logpdf_chol(&l, &[0.0; 3]) + 1.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn mvn_matches_dense_formula() {
        let p = [0.2, 0.4, -0.3];
        let l = lower_from_log_chol(&p, 2);
        let s = &l * l.transpose();
        let r = [0.7, -1.1];
        let rv = DVector::from_column_slice(&r);
        let inv = s.clone().try_inverse().unwrap();
        let dense = -0.5 * (rv.transpose() * inv * &rv)[(0, 0)] - 0.5 * s.determinant().ln() - LN_2PI;
        assert!((mvn_logpdf_chol(&l, &r) - dense).abs() < 1e-12);
    }

    #[test]
    fn mvn_gradients_match_finite_differences() {
        let p = vec![0.1, 0.3, -0.2, -0.5, 0.2, 0.4];
        let r = vec![0.4, -0.9, 1.3];
        let f = |x: &[f64]| mvn_logpdf_chol(&lower_from_log_chol(&x[3..], 3), &x[..3]);
        let x: Vec<f64> = r.iter().chain(&p).copied().collect();
        let num = fd(f, &x);
        let l = lower_from_log_chol(&p, 3);
        let mut gr = vec![0.0; 3];
        let mut gl = DMatrix::zeros(3, 3);
        mvn_logpdf_chol_grad(&l, &r, 1.0, &mut gr, &mut gl);
        let mut gp = vec![0.0; 6];
        chain_log_chol(&gl, &l, &mut gp);
        for (a, b) in gr.iter().chain(&gp).zip(&num) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn iw_gradient_matches_finite_differences() {
        let p = vec![0.1, 0.3, -0.2, -0.5, 0.2, 0.4];
        let psi = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 1.5]);
        let f = |x: &[f64]| iw_log_chol_logpdf(&lower_from_log_chol(x, 3), 7.0, &psi);
        let num = fd(f, &p);
        let l = lower_from_log_chol(&p, 3);
        let mut gl = DMatrix::zeros(3, 3);
        let v = iw_log_chol_grad(&l, 7.0, &psi, &mut gl);
        assert!((v - f(&p)).abs() < 1e-12);
        let mut gp = vec![0.0; 6];
        chain_log_chol(&gl, &l, &mut gp);
        for (a, b) in gp.iter().zip(&num) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn jacobian_matches_numeric_determinant() {
        // |∂vech(Σ)/∂p| by finite differences for d = 2.
        let p = [0.3, -0.4, 0.2];
        let vech = |x: &[f64]| {
            let l = lower_from_log_chol(x, 2);
            let s = &l * l.transpose();
            [s[(0, 0)], s[(1, 0)], s[(1, 1)]]
        };
        let h = 1e-6;
        let mut jac = DMatrix::zeros(3, 3);
        for j in 0..3 {
            let mut a = p;
            let mut b = p;
            a[j] += h;
            b[j] -= h;
            let (va, vb) = (vech(&a), vech(&b));
            for i in 0..3 {
                jac[(i, j)] = (va[i] - vb[i]) / (2.0 * h);
            }
        }
        let l = lower_from_log_chol(&p, 2);
        assert!((jac.determinant().abs().ln() - log_chol_log_jacobian(&l)).abs() < 1e-6);
    }
}
