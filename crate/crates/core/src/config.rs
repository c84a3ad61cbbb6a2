//! Harness configuration: one JSON document with nested sections, plus the
//! command-line overrides layered on top of it.
//!
//! Every section is optional and falls back to the library defaults. Unknown
//! keys are rejected. Errors found while loading a file carry the line of the
//! offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::disturbance::{DisturbanceKind, DisturbanceModel};
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::qp::QpSettings;
use crate::residual_nn::NnConfig;
use crate::residual_q::QConfig;
use crate::scenario::{validate_experiment, ControllerKind, ExperimentConfig, ScenarioKind, ScenarioSpec};

pub const OUT_ENV: &str = "PLATOON_PERL_OUT";
pub const DEFAULT_OUT_DIR: &str = "platoon-perl-out";

/// Predefined experiment matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    /// Both scenarios × affine and quadratic error × all three controllers.
    Full,
}

impl std::str::FromStr for Matrix {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            other => Err(format!("unknown matrix `{other}` (expected `full`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub scenario: ScenarioSpec,
    pub disturbance: DisturbanceModel,
    pub controllers: Vec<ControllerKind>,
    pub mpc: MpcConfig,
    pub qp: QpSettings,
    pub q_learning: QConfig,
    pub neural_net: NnConfig,
    pub seeds: Vec<u64>,
    /// When set, replaces the scenario kind, error kind and controller
    /// selection with a predefined grid.
    pub matrix: Option<Matrix>,
    pub output_dir: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            disturbance: DisturbanceModel::default(),
            controllers: vec![ControllerKind::MpcQ],
            mpc: MpcConfig::default(),
            qp: QpSettings::default(),
            q_learning: QConfig::default(),
            neural_net: NnConfig::default(),
            seeds: vec![1],
            matrix: None,
            output_dir: None,
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scenario: Option<ScenarioKind>,
    pub error: Option<DisturbanceKind>,
    pub controllers: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    pub matrix: Option<Matrix>,
    pub out: Option<PathBuf>,
}

impl HarnessConfig {
    /// Parse and validate a JSON document. `source` names it in diagnostics.
    pub fn from_json_str(text: &str, source: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: HarnessConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::ConfigFile {
                file: source.to_string(),
                line: inner.line(),
                path,
                message: strip_position(&inner.to_string()),
            }
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::ConfigFile {
                file: source.to_string(),
                line: locate_key(text, &path).unwrap_or(1),
                path,
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: format!("cannot read config file: {e}"),
        })?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(kind) = o.scenario {
            self.scenario.kind = kind;
        }
        if let Some(kind) = o.error {
            self.disturbance.kind = kind;
        }
        if !o.controllers.is_empty() {
            self.controllers = o.controllers.clone();
        }
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if o.matrix.is_some() {
            self.matrix = o.matrix;
        }
        if o.out.is_some() {
            self.output_dir = o.out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config {
                path: "seeds".into(),
                message: "at least one seed is required".into(),
            });
        }
        if self.matrix.is_none() && self.controllers.is_empty() {
            return Err(Error::Config {
                path: "controllers".into(),
                message: "at least one controller is required".into(),
            });
        }
        let qp = &self.qp;
        if !(qp.tol.is_finite() && qp.tol > 0.0) {
            return Err(Error::Config {
                path: "qp.tol".into(),
                message: "must be > 0".into(),
            });
        }
        if qp.max_iter == 0 {
            return Err(Error::Config {
                path: "qp.max_iter".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(qp.regularization.is_finite() && qp.regularization >= 0.0) {
            return Err(Error::Config {
                path: "qp.regularization".into(),
                message: "must be >= 0".into(),
            });
        }
        for cfg in self.experiments() {
            validate_experiment(&cfg)?;
        }
        Ok(())
    }

    /// Expand into one experiment per (scenario, error, controller, seed),
    /// in that nesting order.
    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        let (scenarios, errors, controllers) = match self.matrix {
            Some(Matrix::Full) => (
                ScenarioKind::ALL.to_vec(),
                vec![DisturbanceKind::Affine, DisturbanceKind::Quadratic],
                ControllerKind::ALL.to_vec(),
            ),
            None => (
                vec![self.scenario.kind],
                vec![self.disturbance.kind],
                self.controllers.clone(),
            ),
        };
        let mut out = Vec::new();
        for &scenario in &scenarios {
            for &error in &errors {
                for &controller in &controllers {
                    for &seed in &self.seeds {
                        out.push(ExperimentConfig {
                            scenario: ScenarioSpec {
                                kind: scenario,
                                ..self.scenario.clone()
                            },
                            controller,
                            disturbance: DisturbanceModel {
                                kind: error,
                                ..self.disturbance
                            },
                            mpc: self.mpc,
                            qp: self.qp,
                            q_learning: self.q_learning,
                            neural_net: self.neural_net.clone(),
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// Output directory: the configured one, else `$PLATOON_PERL_OUT`, else
    /// the built-in default.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// The effective configuration as pretty JSON. Loading it back yields an
    /// equal value.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Line (1-based) of the last key of a dotted path, found by searching for
/// each key in turn after the previous one.
pub fn locate_key(text: &str, path: &str) -> Option<usize> {
    let mut from = 0;
    let mut found = None;
    for key in path.split('.') {
        let key = key.split('[').next().unwrap_or(key);
        let needle = format!("\"{key}\"");
        let at = from + text[from..].find(&needle)?;
        found = Some(at);
        from = at + needle.len();
    }
    found.map(|at| text[..at].matches('\n').count() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = HarnessConfig::from_json_str("{}", "cfg.json").unwrap();
        assert_eq!(cfg, HarnessConfig::default());
    }

    #[test]
    fn unknown_key_reports_line_and_path() {
        let text = "{\n  \"mpc\": {\n    \"horizn\": 5\n  }\n}\n";
        match HarnessConfig::from_json_str(text, "cfg.json").unwrap_err() {
            Error::ConfigFile { line, path, message, .. } => {
                assert_eq!(line, 3);
                assert!(path.starts_with("mpc"), "{path}");
                assert!(message.contains("horizn"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_value_reports_line() {
        let text = "{\n  \"seeds\": [1],\n  \"mpc\": {\n    \"q1\": 1.0,\n    \"horizon\": 0\n  }\n}\n";
        let err = HarnessConfig::from_json_str(text, "cfg.json").unwrap_err();
        match &err {
            Error::ConfigFile { line, path, .. } => {
                assert_eq!(*line, 5);
                assert_eq!(path, "mpc.horizon");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().starts_with("cfg.json:5:"));
        assert!(err.is_config());
    }

    #[test]
    fn empty_seed_list_rejected() {
        let text = "{\n  \"seeds\": []\n}";
        match HarnessConfig::from_json_str(text, "c").unwrap_err() {
            Error::ConfigFile { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "seeds");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn type_error_has_line() {
        let text = "{\n  \"scenario\": {\n    \"kind\": \"sideways\"\n  }\n}";
        match HarnessConfig::from_json_str(text, "c").unwrap_err() {
            Error::ConfigFile { line, path, .. } => {
                assert_eq!(line, 3);
                assert_eq!(path, "scenario.kind");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = HarnessConfig::from_json_str(r#"{"seeds": [3, 4], "controllers": ["mpc_only"]}"#, "c").unwrap();
        cfg.apply(&Overrides {
            scenario: Some(ScenarioKind::Variable),
            error: Some(DisturbanceKind::Affine),
            controllers: vec![ControllerKind::MpcNn],
            seeds: vec![7],
            ..Overrides::default()
        });
        let exps = cfg.experiments();
        assert_eq!(exps.len(), 1);
        assert_eq!(exps[0].scenario.kind, ScenarioKind::Variable);
        assert_eq!(exps[0].disturbance.kind, DisturbanceKind::Affine);
        assert_eq!(exps[0].controller, ControllerKind::MpcNn);
        assert_eq!(exps[0].seed, 7);
    }

    #[test]
    fn full_matrix_has_twelve_cells_per_seed() {
        let cfg = HarnessConfig {
            matrix: Some(Matrix::Full),
            seeds: vec![1, 2],
            ..HarnessConfig::default()
        };
        assert_eq!(cfg.experiments().len(), 24);
    }

    #[test]
    fn round_trip() {
        let mut cfg = HarnessConfig::default();
        cfg.seeds = vec![5, 9];
        cfg.mpc.horizon = 8;
        cfg.output_dir = Some(PathBuf::from("out/x"));
        let text = cfg.to_json().unwrap();
        assert_eq!(HarnessConfig::from_json_str(&text, "c").unwrap(), cfg);
    }

    #[test]
    fn locate_nested_key() {
        let text = "{\n \"q_learning\": {\n  \"alpha\": 2\n },\n \"mpc\": {\n  \"alpha\": 1\n }\n}";
        assert_eq!(locate_key(text, "mpc.alpha"), Some(6));
        assert_eq!(locate_key(text, "q_learning.alpha"), Some(3));
        assert_eq!(locate_key(text, "missing"), None);
    }
}
