//! JSON configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mvspde::coefficients::{BuiltinFamily, CoefficientSet};
use mvspde::multiscale::{FrozenInput, MultiscaleConfig};
use mvspde::solver::SimConfig;
use mvspde::{OperatorSpec, SpectralField};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub operator: OperatorSpec,
    pub coefficients: CoefficientsSection,
    pub sim: SimSection,
    #[serde(default)]
    pub study: StudySection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    /// `bounded_smooth` or `linear_test`.
    pub variant: String,
    pub a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_mu: Option<f64>,
    pub c: f64,
    /// Active modes of `bounded_smooth`; defaults to `min(N, 4)`.
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_fast: Option<f64>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    /// Initial slow value; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    /// Initial fast value; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub x: Vec<f64>,
    pub mu_stat: f64,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Informational label; the subcommand selects what runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// eps values for `rate-study`, delta values for `hoelder-study`, times
    /// for `ergodicity`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<f64>,
    /// Moment of the error norms; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Scale separation used by `hoelder-study`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iters: Option<usize>,
    /// Frozen-equation replicas for `ergodicity`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_steps_per_eps: Option<usize>,
    /// Frozen inputs for `ergodicity`; defaults to `(xi, |xi|, eta)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputSection>,
}

/// Parse failure carrying the JSON pointer of the offending key.
#[derive(Debug)]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config at {}: {}", self.pointer, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Converts serde_path_to_error's dotted path into a JSON pointer.
fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let ptr = pointer(e.path());
            let message = e.inner().to_string();
            ConfigError { pointer: ptr, message }
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn coefficient_set(&self) -> anyhow::Result<CoefficientSet> {
        let c = &self.coefficients;
        let family = match c.variant.as_str() {
            "bounded_smooth" => BuiltinFamily::BoundedSmooth {
                a: c.a,
                b_mu: c.b_mu.unwrap_or(0.0),
                c: c.c,
                k: c.k.unwrap_or_else(|| BuiltinFamily::default_active_modes(self.operator.n_modes)),
            },
            "linear_test" => {
                if c.b_mu.is_some() || c.k.is_some() {
                    return Err(ConfigError {
                        pointer: "/coefficients".into(),
                        message: "linear_test takes only a and c".into(),
                    }
                    .into());
                }
                BuiltinFamily::LinearTest { a: c.a, c: c.c }
            }
            other => {
                return Err(ConfigError {
                    pointer: "/coefficients/variant".into(),
                    message: format!("unknown variant {other:?}; expected bounded_smooth or linear_test"),
                }
                .into())
            }
        };
        Ok(CoefficientSet::builtin(family, self.operator.p)?)
    }

    fn field(&self, v: &Option<Vec<f64>>, name: &str) -> anyhow::Result<SpectralField> {
        let n = self.operator.n_modes;
        match v {
            None => Ok(SpectralField::zeros(n)),
            Some(v) if v.len() == n => Ok(SpectralField(v.clone())),
            Some(v) => Err(ConfigError {
                pointer: format!("/sim/{name}"),
                message: format!("expected {n} coordinates, got {}", v.len()),
            }
            .into()),
        }
    }

    pub fn sim_config(&self) -> anyhow::Result<SimConfig> {
        Ok(SimConfig {
            spec: self.operator.clone(),
            coeffs: self.coefficient_set()?,
            t_end: self.sim.t_end,
            h: self.sim.h,
            m: self.sim.m,
            xi: self.field(&self.sim.xi, "xi")?,
            seed: self.sim.seed,
        })
    }

    /// Slow-fast settings at separation `epsilon`; `h_fast` defaults to `eps/10`.
    pub fn multiscale_config(&self, epsilon: f64) -> anyhow::Result<MultiscaleConfig> {
        Ok(MultiscaleConfig {
            base: self.sim_config()?,
            epsilon,
            h_fast: self.sim.h_fast.unwrap_or(epsilon / 10.0),
            delta: None,
            eta: self.field(&self.sim.eta, "eta")?,
        })
    }

    pub fn frozen_inputs(&self) -> anyhow::Result<Vec<FrozenInput>> {
        if self.study.inputs.is_empty() {
            let xi = self.field(&self.sim.xi, "xi")?;
            let mu = xi.norm();
            return Ok(vec![FrozenInput::new(xi, mu, self.field(&self.sim.eta, "eta")?)?]);
        }
        self.study
            .inputs
            .iter()
            .map(|i| Ok(FrozenInput::new(SpectralField(i.x.clone()), i.mu_stat, SpectralField(i.y.clone()))?))
            .collect()
    }

    pub fn grid(&self, what: &str) -> anyhow::Result<&[f64]> {
        if self.study.grid.is_empty() {
            bail!(ConfigError {
                pointer: "/study/grid".into(),
                message: format!("{what} needs a nonempty grid"),
            });
        }
        Ok(&self.study.grid)
    }

    /// The configuration as hashed into result metadata: everything except
    /// the output directory.
    pub fn canonical(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.study.out_dir = None;
        serde_json::to_value(c).expect("configs serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "operator": {"n_modes": 2, "a": 2, "b": 1, "g": 1, "c_lambda": 1, "c_beta": 1,
                     "c_gamma": 1, "alpha": 1.5, "theta": 1.3333333333333333, "p": 1},
        "coefficients": {"variant": "bounded_smooth", "a": 1, "b_mu": 0.5, "c": 0.5},
        "sim": {"T": 1, "h": 0.0625, "M": 8, "seed": 1}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let c = ConfigFile::parse(MINIMAL).unwrap();
        assert_eq!(c.sim.m, 8);
        let s = c.sim_config().unwrap();
        assert_eq!(s.xi.len(), 2);
    }

    #[test]
    fn unknown_key_is_pointed_at() {
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"sede\": 2");
        let err = ConfigFile::parse(&text).unwrap_err();
        assert_eq!(err.pointer, "/sim/sede");
    }

    #[test]
    fn wrong_type_is_pointed_at() {
        let text = MINIMAL.replace("\"alpha\": 1.5", "\"alpha\": \"x\"");
        let err = ConfigFile::parse(&text).unwrap_err();
        assert_eq!(err.pointer, "/operator/alpha");
    }

    #[test]
    fn canonical_drops_out_dir() {
        let mut c = ConfigFile::parse(MINIMAL).unwrap();
        let a = c.canonical();
        c.study.out_dir = Some("elsewhere".into());
        assert_eq!(a, c.canonical());
    }
}
