//! Run configurations. Each command resolves defaults, then an optional JSON
//! file, then explicit flags, and rejects keys it does not know.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbreuConfig {
    pub domain: String,
    pub inner: Option<String>,
    pub n: usize,
    pub q: f64,
    pub delta: f64,
    pub phi: String,
    pub psi: String,
    pub f0z: String,
    pub tol: f64,
    pub max_outer: usize,
    /// `auto` compares against the exact solution known for `phi`, `none`
    /// skips the comparison.
    pub exact: String,
    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for AbreuConfig {
    fn default() -> Self {
        Self {
            domain: "disk".into(),
            inner: None,
            n: 65,
            q: 2.0,
            delta: 0.0,
            phi: "quad".into(),
            psi: "const:1".into(),
            f0z: "quadsrc".into(),
            tol: 1e-7,
            max_outer: 200,
            exact: "auto".into(),
            jobs: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcConfig {
    pub domain: String,
    pub inner: Option<String>,
    pub n: usize,
    pub q: f64,
    pub gamma: String,
    pub phi: String,
    pub psi: String,
    pub f0: String,
    pub eps: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for RcConfig {
    fn default() -> Self {
        Self {
            domain: "classic".into(),
            inner: None,
            n: 33,
            q: 2.0,
            gamma: "const:1".into(),
            phi: "zero".into(),
            psi: "const:1".into(),
            f0: "linear".into(),
            eps: 0.1,
            tol: 1e-9,
            max_iter: 60,
            jobs: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub domain: String,
    pub inner: Option<String>,
    pub n: usize,
    pub q: f64,
    pub gamma: String,
    pub phi: String,
    pub psi: String,
    pub f0: String,
    pub eps_list: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    /// Oracle grid; at most 33.
    pub oracle_n: usize,
    pub oracle_iters: usize,
    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let rc = RcConfig::default();
        Self {
            domain: rc.domain,
            inner: rc.inner,
            n: rc.n,
            q: rc.q,
            gamma: rc.gamma,
            phi: rc.phi,
            psi: rc.psi,
            f0: rc.f0,
            eps_list: vec![0.3, 0.1, 0.03, 0.01],
            tol: rc.tol,
            max_iter: rc.max_iter,
            oracle_n: 33,
            oracle_iters: 2000,
            jobs: None,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn rc(&self, eps: f64) -> RcConfig {
        RcConfig {
            domain: self.domain.clone(),
            inner: self.inner.clone(),
            n: self.n,
            q: self.q,
            gamma: self.gamma.clone(),
            phi: self.phi.clone(),
            psi: self.psi.clone(),
            f0: self.f0.clone(),
            eps,
            tol: self.tol,
            max_iter: self.max_iter,
            jobs: self.jobs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub domain: String,
    pub inner: Option<String>,
    pub n: usize,
    pub q: f64,
    pub gamma: String,
    pub phi: String,
    pub psi: String,
    pub f0: String,
    pub iters: usize,
    pub sweeps: usize,
    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let rc = RcConfig::default();
        Self {
            domain: rc.domain,
            inner: rc.inner,
            n: 25,
            q: rc.q,
            gamma: rc.gamma,
            phi: rc.phi,
            psi: rc.psi,
            f0: rc.f0,
            iters: 2000,
            sweeps: 50,
            jobs: None,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn rc(&self) -> RcConfig {
        RcConfig {
            domain: self.domain.clone(),
            inner: self.inner.clone(),
            n: self.n,
            q: self.q,
            gamma: self.gamma.clone(),
            phi: self.phi.clone(),
            psi: self.psi.clone(),
            f0: self.f0.clone(),
            jobs: self.jobs,
            seed: self.seed,
            ..RcConfig::default()
        }
    }
}

/// Thresholds for `check-duality`. Unset geometric thresholds resolve to
/// `6h` (involution) and `10h` (reciprocal determinant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityConfig {
    pub max_involution: Option<f64>,
    pub max_reciprocal: Option<f64>,
    pub max_lt: f64,
    pub max_plt: f64,
    /// Fraction of the dual box kept for the residual norms.
    pub core_frac: f64,
    pub jobs: Option<usize>,
    pub seed: u64,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            max_involution: None,
            max_reciprocal: None,
            max_lt: 1.0,
            max_plt: 1.0,
            core_frac: 0.64,
            jobs: None,
            seed: 0,
        }
    }
}

/// `defaults <- file <- flags`, then a strict parse.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, flags: Map<String, Value>) -> Result<T, CliError> {
    let mut merged = match file {
        None => Map::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Config(format!("{} must hold a JSON object", p.display()))),
                Err(e) => return Err(CliError::Config(format!("{}: {e}", p.display()))),
            }
        }
    };
    merged.extend(flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

/// Pretty JSON to `path`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flags(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"n": 33, "q": 3}"#).unwrap();
        let c: AbreuConfig = resolve(Some(&f), flags(json!({"q": 1.5, "delta": 0.01}))).unwrap();
        assert_eq!((c.n, c.q, c.delta), (33, 1.5, 0.01));
        assert_eq!(c.phi, "quad");
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = resolve::<AbreuConfig>(None, flags(json!({"colour": 1}))).unwrap_err();
        assert!(e.to_string().contains("unknown field `colour`"), "{e}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = SweepConfig::default();
        let back: SweepConfig = resolve(None, serde_json::to_value(&c).unwrap().as_object().unwrap().clone()).unwrap();
        assert_eq!(back, c);
    }
}
