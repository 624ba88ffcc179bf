//! Named experiment presets and their TOML form.
//!
//! A preset file holds three tables, each optional (missing keys fall back to
//! the built-in 10 km values):
//!
//! ```toml
//! name = "lab"
//!
//! [model]
//! alpha_db_per_km = 0.19
//! fibre_km = 25.0
//! extra_loss_db = 0.3
//! eta_bob = 0.5608
//! p_dc = 1e-8
//! e_mis = 0.004
//! p_ap = 0.0
//! tau_dead_ns = 0.7
//! eta0 = 0.78
//!
//! [params]
//! p_z = 0.94
//! q_z = 0.94
//! mu1 = 0.59
//! mu2 = 0.15
//! p_mu1 = 0.82
//! clock_hz = 2.5e9
//! n_z_target = 100000000
//! security = { eps_sec = 1e-10, eps_cor = 1e-15 }
//!
//! [runtime]
//! session_pulses = 100000000
//! calibration_period = 256
//! strong_pulse_gain_db = 0.0
//! feedback_accumulation_s = 0.5
//! f_ec = 1.16
//! ```
//!
//! `QKDF_CONFIG_DIR/<name>.toml`, when present, overrides a built-in preset
//! of the same name.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelDetectorModel;
use crate::finitekey::ProtocolParams;
use crate::optimizer::DEFAULT_SIM_F;

pub const CONFIG_DIR_ENV: &str = "QKDF_CONFIG_DIR";
pub const BUILTIN: [&str; 4] = ["10km", "50km", "101km", "328km"];

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("unknown preset {0:?}")]
    Unknown(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("preset {name}: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeKnobs {
    /// Pulses simulated by a desk-scale session run.
    pub session_pulses: u64,
    pub calibration_period: u64,
    /// Calibration pulse intensity over the signal, in dB; 0 for weak pulses.
    pub strong_pulse_gain_db: f64,
    pub feedback_accumulation_s: f64,
    /// Reconciliation efficiency assumed by rate simulations.
    pub f_ec: f64,
}

impl Default for RuntimeKnobs {
    fn default() -> Self {
        RuntimeKnobs {
            session_pulses: 100_000_000,
            calibration_period: 256,
            strong_pulse_gain_db: 0.0,
            feedback_accumulation_s: 0.5,
            f_ec: DEFAULT_SIM_F,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    #[serde(default)]
    pub name: String,
    pub model: ChannelDetectorModel,
    pub params: ProtocolParams,
    pub runtime: RuntimeKnobs,
}

impl Default for ExperimentPreset {
    fn default() -> Self {
        builtin("10km").expect("10km is built in")
    }
}

/// Optimized (p_z = q_z, mu1, mu2, p_mu1) for the reference detector model at
/// the preset's loss with n_Z = 1e8.
fn params(p_z: f64, mu1: f64, mu2: f64, p_mu1: f64) -> ProtocolParams {
    ProtocolParams {
        p_z,
        q_z: p_z,
        mu1,
        mu2,
        p_mu1,
        ..Default::default()
    }
}

/// Built-in preset by name.
pub fn builtin(name: &str) -> Option<ExperimentPreset> {
    let base = ChannelDetectorModel::default();
    let (model, params, runtime) = match name {
        "10km" => (
            ChannelDetectorModel {
                fibre_km: 10.0,
                extra_loss_db: 0.3,
                e_mis: 0.0061,
                ..base
            },
            params(0.942719, 0.593342, 0.148099, 0.821078),
            RuntimeKnobs::default(),
        ),
        "50km" => (
            ChannelDetectorModel {
                fibre_km: 50.0,
                ..base
            },
            params(0.935472, 0.634219, 0.136011, 0.831148),
            RuntimeKnobs::default(),
        ),
        "101km" => (
            ChannelDetectorModel {
                fibre_km: 101.0,
                extra_loss_db: 0.41,
                ..base
            },
            params(0.933142, 0.648740, 0.133662, 0.833095),
            RuntimeKnobs::default(),
        ),
        // ultra-low-loss fibre
        "328km" => (
            ChannelDetectorModel {
                alpha_db_per_km: 0.167,
                fibre_km: 328.0,
                extra_loss_db: 0.324,
                e_mis: 0.014,
                ..base
            },
            params(0.779109, 0.589920, 0.099691, 0.855581),
            RuntimeKnobs {
                calibration_period: 8,
                strong_pulse_gain_db: 12.9,
                ..Default::default()
            },
        ),
        _ => return None,
    };
    Some(ExperimentPreset {
        name: name.to_owned(),
        model,
        params,
        runtime,
    })
}

impl ExperimentPreset {
    pub fn validate(&self) -> Result<(), PresetError> {
        let invalid = |reason: String| PresetError::Invalid {
            name: self.name.clone(),
            reason,
        };
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        if self.runtime.calibration_period == 0 {
            return Err(invalid("calibration_period must be positive".into()));
        }
        if !(self.runtime.f_ec >= 1.0) {
            return Err(invalid(format!("f_ec must be >= 1, got {}", self.runtime.f_ec)));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<ExperimentPreset, PresetError> {
        let text = fs::read_to_string(path).map_err(|source| PresetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |source| PresetError::Parse {
            path: path.to_owned(),
            source: Box::new(source),
        };
        let overlay: toml::Table = toml::from_str(&text).map_err(parse_err)?;
        let mut merged = toml::Table::try_from(ExperimentPreset::default()).expect("preset serializes");
        merged.remove("name");
        merge(&mut merged, overlay);
        let mut p: ExperimentPreset = merged.try_into().map_err(parse_err)?;
        if p.name.is_empty() {
            p.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("preset serializes")
    }

    /// Same preset with the total channel loss replaced by `loss_db`.
    pub fn with_loss_db(mut self, loss_db: f64) -> ExperimentPreset {
        self.model = self.model.with_loss_db(loss_db);
        self
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves `name`: a path to a TOML file, a file in `QKDF_CONFIG_DIR`, or a
/// built-in preset, in that order.
pub fn load_preset(name: &str) -> Result<ExperimentPreset, PresetError> {
    let as_path = Path::new(name);
    if as_path.extension().is_some_and(|e| e == "toml") {
        return ExperimentPreset::from_toml_file(as_path);
    }
    if let Some(dir) = env::var_os(CONFIG_DIR_ENV) {
        let p = Path::new(&dir).join(format!("{name}.toml"));
        if p.is_file() {
            return ExperimentPreset::from_toml_file(&p);
        }
    }
    builtin(name).ok_or_else(|| PresetError::Unknown(name.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn builtins_have_their_channel_loss() {
        for (name, loss) in [("10km", 2.2), ("50km", 9.5), ("101km", 19.6), ("328km", 55.1)] {
            let p = builtin(name).unwrap();
            p.validate().unwrap();
            assert_relative_eq!(p.model.loss_db(), loss, epsilon = 1e-9);
            assert_eq!(p.params.p_z, p.params.q_z);
        }
        assert!(builtin("7km").is_none());
    }

    #[test]
    fn toml_roundtrip() {
        let p = builtin("328km").unwrap();
        let back: ExperimentPreset = toml::from_str(&p.to_toml()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.toml");
        fs::write(&path, "[model]\ne_mis = 0.02\n").unwrap();
        let p = ExperimentPreset::from_toml_file(&path).unwrap();
        assert_eq!(p.name, "lab");
        assert_eq!(p.model.e_mis, 0.02);
        assert_eq!(p.params, builtin("10km").unwrap().params);
        assert_eq!(load_preset(path.to_str().unwrap()).unwrap(), p);
    }

    #[test]
    fn bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[params]\np_z = 0.2\n").unwrap();
        assert!(matches!(ExperimentPreset::from_toml_file(&path), Err(PresetError::Invalid { .. })));
        fs::write(&path, "[params\n").unwrap();
        assert!(matches!(ExperimentPreset::from_toml_file(&path), Err(PresetError::Parse { .. })));
        assert!(matches!(load_preset("nope"), Err(PresetError::Unknown(_))));
    }
}
