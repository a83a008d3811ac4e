//! Run configuration: a TOML file with `[model]`, `[data]`, `[scheme]`,
//! `[estimand]` and `[smc]` sections.

use std::path::{Path, PathBuf};

use asmc_core::engine::rng::{stream, SCHEME};
use asmc_core::engine::{Estimator, SmcConfig};
use asmc_core::models::{ModelKind, ModelOptions, Shape};
use asmc_core::scheme::{
    build_group_kfold_scheme, build_leo_schedule, build_lgo_scheme, build_loo_scheme, build_lso_scheme,
};
use asmc_core::{DeletionScheme, EstimandSpec, LeoTarget, UnitIndex};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    /// Worker threads; `None` defers to `ASMC_THREADS`, then to the machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub scheme: SchemeConfig,
    /// Filled in by [`parse_config`]: multi-step with horizon 1 for
    /// leave-end-out schemes, joint otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimand: Option<EstimandSpec>,
    #[serde(default)]
    pub smc: SmcConfig,
}

fn default_estimator() -> Estimator {
    Estimator::Asmc
}

fn default_output() -> PathBuf {
    PathBuf::from("asmc-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub options: ModelOptions,
}

/// Where the observations come from. With neither key set a synthetic
/// dataset of the model's default shape is generated from the run seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Shape fields for the model's synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SchemeConfig {
    Loo,
    Lgo,
    GroupKfold { k: usize },
    /// Trims the end of one group's series, from its length down to `t_min`.
    LeoWithin { group: usize, t_min: usize },
    /// Trims every series together.
    LeoAcross { t_min: usize },
    /// Explicit folds of `[group, item]` pairs, both 1-based.
    Lso { sets: Vec<Vec<[usize; 2]>> },
}

impl SchemeConfig {
    pub fn is_leo(&self) -> bool {
        matches!(self, Self::LeoWithin { .. } | Self::LeoAcross { .. })
    }

    pub fn build(&self, sizes: &[usize], seed: u64) -> asmc_core::Result<DeletionScheme> {
        match self {
            Self::Loo => build_loo_scheme(sizes),
            Self::Lgo => build_lgo_scheme(sizes),
            Self::GroupKfold { k } => build_group_kfold_scheme(sizes, *k, &mut stream(seed, &[SCHEME])),
            Self::LeoWithin { group, t_min } => {
                let len = sizes.get(group.wrapping_sub(1)).copied().unwrap_or(0);
                build_leo_schedule(LeoTarget::Group(*group), sizes, len, *t_min)
            }
            Self::LeoAcross { t_min } => {
                build_leo_schedule(LeoTarget::All, sizes, sizes.first().copied().unwrap_or(0), *t_min)
            }
            Self::Lso { sets } => build_lso_scheme(
                sizes,
                sets.iter().map(|s| s.iter().map(|&[g, i]| UnitIndex::new(g, i)).collect()).collect(),
            ),
        }
    }
}

impl RunConfig {
    /// The resolved estimand.
    pub fn estimand(&self) -> EstimandSpec {
        self.estimand.unwrap_or(if self.scheme.is_leo() {
            EstimandSpec::MultiStep { horizon: 1 }
        } else {
            EstimandSpec::Joint
        })
    }

    /// The synthetic shape to generate, or `None` when reading a file.
    pub fn synthetic_shape(&self) -> Result<Option<Shape>, CliError> {
        if self.data.path.is_some() {
            return Ok(None);
        }
        let Some(table) = &self.data.synthetic else {
            return Ok(Some(Shape::default_for(self.model.kind)));
        };
        shape_from_table(self.model.kind, table.clone()).map(Some).map_err(|e| CliError::Config(format!("data.synthetic: {e}")))
    }

    /// The configuration as recorded in the report: defaults filled in and
    /// the thread count dropped, since output must not depend on it.
    pub fn echo(&self) -> RunConfig {
        RunConfig { threads: None, estimand: Some(self.estimand()), ..self.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs are representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.smc;
        if s.particles < 25 {
            return bad(format!("smc.particles must be >= 25, got {}", s.particles));
        }
        if !(s.ess_ratio > 0.0 && s.ess_ratio < 1.0) {
            return bad(format!("smc.ess_ratio must satisfy 0 < ess_ratio < 1, got {}", s.ess_ratio));
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        if self.data.path.is_some() && self.data.synthetic.is_some() {
            return bad("data.path and data.synthetic are mutually exclusive".into());
        }
        if let SchemeConfig::GroupKfold { k } = self.scheme {
            if k < 2 {
                return bad(format!("scheme.k must be >= 2, got {k}"));
            }
        }
        s.validate().map_err(|e| CliError::Config(format!("smc: {e}")))?;
        self.estimand().validate(scheme_kind(&self.scheme)).map_err(|e| CliError::Config(format!("estimand: {e}")))?;
        self.synthetic_shape()?;
        Ok(())
    }
}

fn scheme_kind(s: &SchemeConfig) -> asmc_core::SchemeKind {
    use asmc_core::SchemeKind as K;
    match s {
        SchemeConfig::Loo => K::Loo,
        SchemeConfig::Lgo => K::Lgo,
        SchemeConfig::GroupKfold { .. } | SchemeConfig::Lso { .. } => K::Lso,
        SchemeConfig::LeoWithin { .. } => K::LeoWithin,
        SchemeConfig::LeoAcross { .. } => K::LeoAcross,
    }
}

/// Builds a [`Shape`] for `kind` from its field table.
pub fn shape_from_table(kind: ModelKind, mut table: toml::Table) -> Result<Shape, String> {
    let tag = serde_json::to_value(kind).map_err(|e| e.to_string())?;
    table.insert("model".into(), toml::Value::String(tag.as_str().unwrap_or_default().to_string()));
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string())
}

/// Parses `k=v,k=v` shape overrides. Values are TOML literals, so
/// `maturities=[2,10,30]` works; commas inside brackets do not split.
pub fn parse_shape_spec(spec: &str) -> Result<toml::Table, String> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in spec.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&spec[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&spec[start..]);
    let mut src = String::new();
    for p in parts.iter().map(|p| p.trim()).filter(|p| !p.is_empty()) {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("expected key=value, got '{p}'"))?;
        src.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    src.parse::<toml::Table>().map_err(|e| format!("invalid shape '{spec}': {}", e.message()))
}

/// Reads, defaults and validates a run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(describe_toml_error(&e)))?;
    cfg.estimand = Some(cfg.estimand());
    cfg.validate()?;
    Ok(cfg)
}

fn describe_toml_error(e: &toml::de::Error) -> String {
    e.to_string().trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str("seed = 3\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n").unwrap();
        assert_eq!(c.smc.particles, 1000);
        assert_eq!(c.smc.ess_ratio, 0.5);
        assert_eq!(c.smc.khat_threshold, 0.7);
        assert_eq!(c.estimator, Estimator::Asmc);
        assert_eq!(c.estimand, Some(EstimandSpec::Joint));
    }

    #[test]
    fn leo_defaults_to_one_step_ahead() {
        let c = parse_config_str("seed = 0\n[model]\nkind = \"dns\"\n[scheme]\nkind = \"leo-within\"\ngroup = 1\nt_min = 50\n")
            .unwrap();
        assert_eq!(c.estimand, Some(EstimandSpec::MultiStep { horizon: 1 }));
    }

    #[test]
    fn infinite_threshold_accepted() {
        let c = parse_config_str(
            "seed = 0\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n[smc]\nkhat_threshold = \"inf\"\n",
        )
        .unwrap();
        assert!(c.smc.accept_psis(f64::INFINITY));
    }

    #[test]
    fn violations_name_the_key() {
        let e = parse_config_str("seed = 0\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n[smc]\ness_ratio = 1.5\n")
            .unwrap_err();
        assert!(e.to_string().contains("smc.ess_ratio"), "{e}");
        let e = parse_config_str("seed = 0\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n[smc]\nparticle = 10\n")
            .unwrap_err();
        assert!(e.to_string().contains("particle"), "{e}");
        let e = parse_config_str("[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
        let e = parse_config_str("seed = \"x\"\n[model]\nkind = \"radon\"\n[scheme]\nkind = \"lgo\"\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn toml_echo_round_trips() {
        let c = parse_config_str(
            "seed = 9\nestimator = \"all\"\n[model]\nkind = \"dns\"\n[data.synthetic]\nmonths = 12\n\
             maturities = [2.0, 10.0]\n[scheme]\nkind = \"leo-within\"\ngroup = 1\nt_min = 6\n\
             [smc]\nparticles = 200\nkhat_threshold = \"-inf\"\n[smc.kernel]\nkind = \"gibbs\"\n",
        )
        .unwrap();
        let back = parse_config_str(&c.echo().to_toml()).unwrap();
        assert_eq!(back, c.echo());
    }

    #[test]
    fn shape_specs() {
        let t = parse_shape_spec("groups=5, max_size=7").unwrap();
        assert_eq!(t["groups"].as_integer(), Some(5));
        let t = parse_shape_spec("months=24,maturities=[2,10,30]").unwrap();
        assert_eq!(t["maturities"].as_array().unwrap().len(), 3);
        assert!(parse_shape_spec("groups").is_err());
        let s = shape_from_table(ModelKind::Radon, parse_shape_spec("groups=5").unwrap()).unwrap();
        assert!(matches!(s, Shape::Radon(r) if r.groups == 5 && r.max_size == 30));
        assert!(shape_from_table(ModelKind::Radon, parse_shape_spec("group=5").unwrap()).is_err());
    }
}
