//! Toolkit configuration, loaded from a sectioned TOML file.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{CrossingRule, VoltageWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub cell: CellConfig,
    pub segmentation: SegmentationConfig,
    pub peaks: PeakConfig,
    pub windows: WindowConfig,
    pub autocorr: AutocorrConfig,
    pub preprocessing: PreprocessingConfig,
}

impl ToolkitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ToolkitConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell.nominal_capacity_ah > 0.0) {
            return Err(Error::Config("cell.nominal_capacity_Ah must be positive".into()));
        }
        if self.peaks.w_step == 0 || self.peaks.hold_min == 0 || self.peaks.baseline_len == 0 {
            return Err(Error::Config(
                "peaks.w_step, peaks.hold_min and peaks.baseline_len must be >= 1".into(),
            ));
        }
        for (name, w) in [
            ("z_chg", &self.windows.z_chg),
            ("e_ch", &self.windows.e_ch),
            ("e_dis", &self.windows.e_dis),
        ] {
            if w[0] == w[1] {
                return Err(Error::Config(format!("windows.{name} has zero width")));
            }
        }
        if !(self.preprocessing.outlier_decades > 0.0) {
            return Err(Error::Config("preprocessing.outlier_decades must be positive".into()));
        }
        Ok(())
    }

    pub fn z_chg_window(&self) -> VoltageWindow {
        VoltageWindow::between(self.windows.z_chg[0], self.windows.z_chg[1])
    }

    pub fn e_ch_window(&self) -> VoltageWindow {
        VoltageWindow::between(self.windows.e_ch[0], self.windows.e_ch[1])
    }

    pub fn e_dis_window(&self) -> VoltageWindow {
        VoltageWindow::between(self.windows.e_dis[0], self.windows.e_dis[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    /// Used for C-rate conversions when the manifest does not carry it.
    #[serde(rename = "nominal_capacity_Ah")]
    pub nominal_capacity_ah: f64,
    /// State of charge at the start of charging (end of the previous discharge).
    pub soc_anchor: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            nominal_capacity_ah: 4.85,
            soc_anchor: 0.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// CC constancy tolerance, as a fraction of the median phase current.
    pub eps_i: f64,
    /// The CV hold at 4.0 V ends once |I| is within this fraction of the CC-B level.
    pub cv_exit_tol: f64,
    #[serde(rename = "cc_a_end_V")]
    pub cc_a_end_v: f64,
    #[serde(rename = "cc_b_end_V")]
    pub cc_b_end_v: f64,
    /// CC-B rate in 1/h.
    pub cc_b_rate: f64,
    #[serde(rename = "cutoff_A")]
    pub cutoff_a: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            eps_i: 0.02,
            cv_exit_tol: 0.005,
            cc_a_end_v: 4.0,
            cc_b_end_v: 4.2,
            cc_b_rate: 0.25,
            cutoff_a: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    /// Minimum current rise; defaults to half the 1C current when absent.
    #[serde(rename = "i_step_min_A")]
    pub i_step_min_a: Option<f64>,
    pub w_step: usize,
    pub hold_min: usize,
    pub baseline_len: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            i_step_min_a: None,
            w_step: 3,
            hold_min: 5,
            baseline_len: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub z_chg: [f64; 2],
    pub e_ch: [f64; 2],
    pub e_dis: [f64; 2],
    pub crossing: CrossingRule,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            z_chg: [3.8, 3.9],
            e_ch: [3.6, 3.9],
            e_dis: [3.85, 3.4],
            crossing: CrossingRule::FirstExit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutocorrConfig {
    pub tau_max_s: f64,
}

impl Default for AutocorrConfig {
    fn default() -> Self {
        Self { tau_max_s: 3000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessingConfig {
    pub outlier_decades: f64,
}

impl Default for PreprocessingConfig {
    fn default() -> Self {
        Self {
            outlier_decades: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ToolkitConfig::from_toml("").unwrap();
        assert_eq!(cfg, ToolkitConfig::default());
        assert_eq!(cfg.windows.e_dis, [3.85, 3.4]);
        assert_eq!(cfg.autocorr.tau_max_s, 3000.0);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = ToolkitConfig::from_toml(
            "[windows]\ne_ch = [3.7, 3.8]\ncrossing = \"last-exit\"\n[peaks]\ni_step_min_A = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.windows.e_ch, [3.7, 3.8]);
        assert_eq!(cfg.windows.crossing, CrossingRule::LastExit);
        assert_eq!(cfg.peaks.i_step_min_a, Some(1.5));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ToolkitConfig::from_toml("[peaks]\nbogus = 1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reference_config_parses() {
        let text = include_str!("../../../configs/reference.toml");
        assert_eq!(ToolkitConfig::from_toml(text).unwrap(), ToolkitConfig::default());
    }
}
