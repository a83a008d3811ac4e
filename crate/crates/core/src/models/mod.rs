//! Built-in models and their synthetic data generators.

pub mod conjugate;
pub mod dns;
pub mod radon;
pub mod spatial;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;

pub use conjugate::{ConjugateData, ConjugateGaussianModel, ConjugateParams, ConjugateShape};
pub use dns::{DnsData, DnsModel, DnsShape};
pub use radon::{MultilevelNormalModel, RadonData, RadonShape};
pub use spatial::{M5Data, M5Shape, SpatialMvnModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Radon,
    Dns,
    M5,
    Conjugate,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "radon" => Ok(Self::Radon),
            "dns" => Ok(Self::Dns),
            "m5" => Ok(Self::M5),
            "conjugate" => Ok(Self::Conjugate),
            other => Err(format!("unknown model '{other}' (expected radon, dns, m5 or conjugate)")),
        }
    }
}

/// Observed data for any built-in model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Dataset {
    Radon(RadonData),
    Dns(DnsData),
    M5(M5Data),
    Conjugate(ConjugateData),
}

/// Model options that are not part of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Nelson–Siegel decay.
    pub lambda: f64,
    /// Known scales of the conjugate model.
    pub conjugate: ConjugateParams,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { lambda: dns::DEFAULT_LAMBDA, conjugate: ConjugateParams::default() }
    }
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Shape {
    Radon(RadonShape),
    Dns(DnsShape),
    M5(M5Shape),
    Conjugate(ConjugateShape),
}

impl Shape {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Radon => Self::Radon(RadonShape::default()),
            ModelKind::Dns => Self::Dns(DnsShape::default()),
            ModelKind::M5 => Self::M5(M5Shape::default()),
            ModelKind::Conjugate => Self::Conjugate(ConjugateShape::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Radon(_) => ModelKind::Radon,
            Self::Dns(_) => ModelKind::Dns,
            Self::M5(_) => ModelKind::M5,
            Self::Conjugate(_) => ModelKind::Conjugate,
        }
    }
}

/// A generated dataset with the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthetic {
    pub data: Dataset,
    pub truth: Vec<(String, Vec<f64>)>,
}

pub fn generate_synthetic<R: Rng + ?Sized>(shape: &Shape, rng: &mut R) -> Result<Synthetic> {
    let (data, truth) = match shape {
        Shape::Radon(s) => {
            let (d, t) = MultilevelNormalModel::generate(s, rng)?;
            (Dataset::Radon(d), t)
        }
        Shape::Dns(s) => {
            let (d, t) = DnsModel::generate(s, rng)?;
            (Dataset::Dns(d), t)
        }
        Shape::M5(s) => {
            let (d, t) = SpatialMvnModel::generate(s, rng)?;
            (Dataset::M5(d), t)
        }
        Shape::Conjugate(s) => {
            let (d, t) = ConjugateGaussianModel::generate(s, rng)?;
            (Dataset::Conjugate(d), t)
        }
    };
    Ok(Synthetic { data, truth })
}

impl Dataset {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Radon(_) => ModelKind::Radon,
            Self::Dns(_) => ModelKind::Dns,
            Self::M5(_) => ModelKind::M5,
            Self::Conjugate(_) => ModelKind::Conjugate,
        }
    }

    pub fn into_model(self, opts: &ModelOptions) -> Result<Arc<dyn Model>> {
        Ok(match self {
            Self::Radon(d) => Arc::new(MultilevelNormalModel::new(d)?),
            Self::Dns(d) => Arc::new(DnsModel::new(d, opts.lambda)?),
            Self::M5(d) => Arc::new(SpatialMvnModel::new(d)?),
            Self::Conjugate(d) => Arc::new(ConjugateGaussianModel::new(d, opts.conjugate)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Exponents;
    use crate::scheme::UnitIndex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_models(rng: &mut ChaCha8Rng) -> Vec<Arc<dyn Model>> {
        let shapes = [
            Shape::Radon(RadonShape { groups: 4, max_size: 5, ..Default::default() }),
            Shape::Dns(DnsShape { months: 4, maturities: vec![2.0, 10.0, 30.0], ..Default::default() }),
            Shape::M5(M5Shape { stores: 3, departments: 2, items: 3 }),
            Shape::Conjugate(ConjugateShape { groups: 3, size: 2, ..Default::default() }),
        ];
        shapes
            .iter()
            .map(|s| generate_synthetic(s, rng).unwrap().data.into_model(&ModelOptions::default()).unwrap())
            .collect()
    }

    fn random_exponents(m: &dyn Model, rng: &mut ChaCha8Rng) -> Exponents {
        let mut e = Exponents::ones(m.group_sizes());
        for (g, &n) in m.group_sizes().iter().enumerate() {
            for i in 1..=n {
                e.set(UnitIndex::new(g + 1, i), rng.random());
            }
        }
        e
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for m in small_models(&mut rng) {
            for _ in 0..10 {
                let exps = random_exponents(&*m, &mut rng);
                let x: Vec<f64> = m.initial_point().iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                let mut g = vec![0.0; x.len()];
                let lp = m.log_target_grad(&x, &exps, &mut g).unwrap();
                let direct = m.log_target(&x, &exps);
                assert!((lp - direct).abs() <= 1e-9 * (1.0 + direct.abs()), "{}: {lp} vs {direct}", m.name());
                for j in 0..x.len() {
                    let h = 1e-5 * (1.0 + x[j].abs());
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[j] += h;
                    b[j] -= h;
                    let num = (m.log_target(&a, &exps) - m.log_target(&b, &exps)) / (2.0 * h);
                    assert!(
                        (num - g[j]).abs() <= 1e-5 * (1.0 + num.abs().max(g[j].abs())),
                        "{} coord {j}: analytic {} numeric {num}",
                        m.name(),
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn target_at_unit_exponents_is_prior_plus_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in small_models(&mut rng) {
            let x = m.initial_point();
            let exps = Exponents::ones(m.group_sizes());
            let mut sum = m.log_prior(&x);
            for (g, &n) in m.group_sizes().iter().enumerate() {
                for i in 1..=n {
                    sum += m.unit_log_lik(&x, UnitIndex::new(g + 1, i));
                }
            }
            assert!((m.log_target(&x, &exps) - sum).abs() <= 1e-10 * (1.0 + sum.abs()), "{}", m.name());
        }
    }

    #[test]
    fn shapes_round_trip_through_serde() {
        let s = Shape::default_for(ModelKind::Dns);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Shape>(&j).unwrap(), s);
        assert_eq!("m5".parse::<ModelKind>().unwrap(), ModelKind::M5);
        assert!("x".parse::<ModelKind>().is_err());
    }
}
