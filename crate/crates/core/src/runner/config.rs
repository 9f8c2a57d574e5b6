//! Run configuration: a single JSON document with strict key checking.
//!
//! ```json
//! {
//!   "dataset": {"kind": "generated", "n": 20, "d": 5, "target_margin": 0.25},
//!   "loss": {"kind": "exp"},
//!   "policy": {"kind": "aggressive_risk", "c": 1.0},
//!   "w0": "zero",
//!   "steps": 10000,
//!   "record_every": 100,
//!   "tolerances": {"oracle_tol": 1e-12, "rel_tol": 1e-9},
//!   "out": "runs/exp20",
//!   "seed": 7
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_separable, load_dataset, lower_bound_dataset, Dataset};
use crate::descent::StepSizePolicy;
use crate::error::{Error, Result};
use crate::loss::LossFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Generated {
        n: usize,
        d: usize,
        target_margin: f64,
        /// Falls back to the top-level seed, then 0.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Path {
        path: PathBuf,
    },
    LowerBound {
        n: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum W0Spec {
    #[default]
    Zero,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
    /// Defaults to `1e-6 * gamma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_tol: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
}

fn default_oracle_tol() -> f64 {
    1e-12
}

fn default_rel_tol() -> f64 {
    crate::bounds::DEFAULT_REL_TOL
}

fn default_record_every() -> usize {
    1
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            oracle_tol: default_oracle_tol(),
            support_tol: None,
            rel_tol: default_rel_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub loss: LossFunction,
    pub policy: StepSizePolicy,
    #[serde(default)]
    pub w0: W0Spec,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config file. Relative dataset paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if let DatasetSpec::Path { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Seed used by the generator.
    pub fn generator_seed(&self) -> u64 {
        match self.dataset {
            DatasetSpec::Generated { seed: Some(s), .. } => s,
            _ => self.seed.unwrap_or(0),
        }
    }

    /// Checks everything that can be checked before data is built.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be at least 1"));
        }
        let tol = &self.tolerances;
        for (name, v) in [
            ("oracle_tol", Some(tol.oracle_tol)),
            ("support_tol", tol.support_tol),
            ("rel_tol", Some(tol.rel_tol)),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Path { path } if !path.is_file() => {
                Err(Error::config(format!("dataset file {} does not exist", path.display())))
            }
            DatasetSpec::Generated { n: 0, .. } | DatasetSpec::Generated { d: 0, .. } => {
                Err(Error::config("generated dataset needs n >= 1 and d >= 1"))
            }
            DatasetSpec::LowerBound { n } if *n < 2 => {
                Err(Error::config("lower-bound dataset needs n >= 2"))
            }
            _ => Ok(()),
        }
    }

    /// Validates, builds the dataset and checks the step policy against it.
    pub fn build_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let ds = match &self.dataset {
            DatasetSpec::Generated {
                n, d, target_margin, ..
            } => gen_separable(*n, *d, *target_margin, self.generator_seed()).map_err(as_config)?,
            DatasetSpec::Path { path } => load_dataset(path)?,
            DatasetSpec::LowerBound { n } => lower_bound_dataset(*n).map_err(as_config)?,
        };
        self.policy.validate(&self.loss, ds.n())?;
        if let W0Spec::Explicit(w) = &self.w0 {
            if w.len() != ds.d() {
                return Err(Error::config(format!(
                    "w0 has {} entries, data has dimension {}",
                    w.len(),
                    ds.d()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("w0 must be finite"));
            }
        }
        Ok(ds)
    }

    pub fn w0(&self, d: usize) -> Vec<f64> {
        match &self.w0 {
            W0Spec::Zero => vec![0.0; d],
            W0Spec::Explicit(w) => w.clone(),
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "dataset": {"kind": "generated", "n": 20, "d": 5, "target_margin": 0.25},
        "loss": {"kind": "exp"},
        "policy": {"kind": "constant_hat_eta", "c": 1.0},
        "steps": 100
    }"#;

    #[test]
    fn defaults() {
        let c = RunConfig::from_json(BASE).unwrap();
        assert_eq!(c.w0, W0Spec::Zero);
        assert_eq!(c.record_every, 1);
        assert_eq!(c.tolerances, Tolerances::default());
        assert_eq!(c.generator_seed(), 0);
        let ds = c.build_dataset().unwrap();
        assert_eq!((ds.n(), ds.d()), (20, 5));
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = BASE.replace("\"steps\"", "\"stpes\"");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Config(_))));
        let bad = BASE.replace("\"c\": 1.0", "\"c\": 1.0, \"eta\": 2");
        assert!(RunConfig::from_json(&bad).is_err());
        let bad = BASE.replace("\"target_margin\": 0.25", "\"target_margin\": 0.25, \"gamma\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
    }

    #[test]
    fn step_above_inverse_beta_rejected() {
        let bad = BASE.replace("\"c\": 1.0", "\"c\": 2.0");
        let c = RunConfig::from_json(&bad).unwrap();
        let err = c.build_dataset().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("1/beta"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values() {
        let c = RunConfig::from_json(&BASE.replace("100", "0")).unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::from_json(BASE).unwrap();
        c.tolerances.rel_tol = 0.0;
        assert!(c.validate().is_err());
        c.tolerances.rel_tol = 1e-9;
        c.dataset = DatasetSpec::Path {
            path: "/nonexistent/data.csv".into(),
        };
        assert!(c.validate().unwrap_err().to_string().contains("does not exist"));
        c.dataset = DatasetSpec::LowerBound { n: 1 };
        assert!(c.validate().is_err());
        let poly = BASE.replace("{\"kind\": \"exp\"}", "{\"kind\": \"poly_tail\", \"k\": -1}");
        assert!(RunConfig::from_json(&poly).is_err());
    }

    #[test]
    fn explicit_w0_and_seed() {
        let text = BASE.replace("\"steps\"", "\"w0\": {\"explicit\": [0,0,0,0,1]}, \"seed\": 9, \"steps\"");
        let c = RunConfig::from_json(&text).unwrap();
        assert_eq!(c.w0(5), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(c.generator_seed(), 9);
        c.build_dataset().unwrap();
        let bad = text.replace("[0,0,0,0,1]", "[0,1]");
        assert!(RunConfig::from_json(&bad).unwrap().build_dataset().is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_json(BASE).unwrap();
        let again = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
