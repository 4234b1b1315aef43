//! Convergence studies and their on-disk records.

mod persist;
pub mod stats;
mod studies;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use persist::{load, persist, MANIFEST_FILE};
pub use studies::{
    auxiliary_gap_study, ergodicity_study, hoelder_study, picard_study, rate_study, RateStudy,
};

/// One row of a study: the swept parameter, the measured error and its
/// standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub param: f64,
    pub error: f64,
    pub stderr: f64,
}

/// Outcome of a study. `runtime_s` is kept out of the hashed metadata and
/// stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: String,
    pub grid: Vec<GridPoint>,
    /// Log-log slope over the points not excluded (exponential rate for the
    /// ergodicity study). `None` with fewer than three usable points.
    pub fitted_slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub fit_r2: Option<f64>,
    /// Slope the theory predicts, when there is one.
    pub reference_slope: Option<f64>,
    /// Grid indices left out of the fit.
    pub excluded: Vec<usize>,
    pub flags: Vec<String>,
    /// Auxiliary per-point or per-iteration series.
    pub series: BTreeMap<String, Vec<f64>>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub runtime_s: f64,
}

impl ExperimentResult {
    pub fn new(kind: &str) -> Self {
        ExperimentResult {
            kind: kind.to_string(),
            grid: Vec::new(),
            fitted_slope: None,
            slope_stderr: None,
            fit_r2: None,
            reference_slope: None,
            excluded: Vec::new(),
            flags: Vec::new(),
            series: BTreeMap::new(),
            config: serde_json::Value::Null,
            config_hash: config_hash(&serde_json::Value::Null),
            seeds: Vec::new(),
            runtime_s: 0.0,
        }
    }

    /// Attaches the configuration that produced the result and its hash.
    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config_hash = config_hash(&config);
        self.config = config;
        self
    }

    pub fn params(&self) -> Vec<f64> {
        self.grid.iter().map(|g| g.param).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.grid.iter().map(|g| g.error).collect()
    }
}

/// SHA-256 of the compact JSON serialization. Object keys serialize in
/// sorted order, so equal values hash equally regardless of input order.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("JSON values always serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x": 1, "y": [1.5, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y": [1.5, 2], "x": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"y": [1.5, 2], "x": 2}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
