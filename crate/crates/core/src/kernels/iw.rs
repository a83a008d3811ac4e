use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;

/// Inverse-Wishart draw `Σ ~ IW(ν, S)` by the Bartlett decomposition:
/// `Σ = B Bᵀ` with `B = L_S A⁻ᵀ`, `S = L_S L_Sᵀ`, and `A` the lower Bartlett
/// factor of a `W(ν, I)` draw. `ν` may be fractional.
pub fn iw_sample<R: Rng + ?Sized>(nu: f64, s: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if !(nu > d as f64 - 1.0) {
        return Err(Error::InvalidArgument(format!("inverse-Wishart needs nu > {}, got {nu}", d as f64 - 1.0)));
    }
    let ls = spd_cholesky(s, "inverse-Wishart scale")?;
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // B = L_S A⁻ᵀ, i.e. solve Bᵀ from A Bᵀ = L_Sᵀ.
    let bt = a
        .solve_lower_triangular(&ls.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("Bartlett factor".into()))?;
    let sigma = bt.transpose() * &bt;
    Ok((&sigma + sigma.transpose()) * 0.5)
}
