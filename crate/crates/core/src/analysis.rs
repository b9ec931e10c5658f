//! Correlation screening and voltage-window sensitivity sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::{
    averaged_charging_impedance, impedance_stride_s, instantaneous_charging_impedance,
    windowed_energy, CrossingRule, VoltageWindow,
};
use crate::model::{CapacitySeries, SampleSeries};
use crate::preprocessing::{remove_outliers, Feature, FeatureMatrix};

/// Pearson's correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!(
            "pearson: length mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const POOLED_SCOPE: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    /// Cell id, or `ALL` for the pooled row.
    pub scope: String,
    pub feature: Feature,
    /// `None` when the feature is absent for the scope or the correlation is undefined.
    pub r: Option<f64>,
    pub n: usize,
}

fn correlate_rows<'a>(rows: impl Iterator<Item = &'a crate::preprocessing::FeatureRow>, f: Feature) -> (Option<f64>, usize) {
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .filter_map(|r| r.get(f).map(|v| (v, r.q_loss_pct)))
        .unzip();
    let n = x.len();
    (pearson(&x, &y).ok(), n)
}

/// Per-cell correlation of each feature with capacity loss (percent), plus
/// a pooled row over all cells when `pooled` is set.
pub fn correlation_report(matrix: &FeatureMatrix, features: &[Feature], pooled: bool) -> Vec<CorrelationEntry> {
    let mut out = Vec::new();
    for cell in matrix.cells() {
        for &f in features {
            let (r, n) = correlate_rows(matrix.rows.iter().filter(|r| r.cell_id == cell), f);
            out.push(CorrelationEntry { scope: cell.clone(), feature: f, r, n });
        }
    }
    if pooled {
        for &f in features {
            let (r, n) = correlate_rows(matrix.rows.iter(), f);
            out.push(CorrelationEntry {
                scope: POOLED_SCOPE.into(),
                feature: f,
                r,
                n,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Impedance,
    EnergyCh,
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impedance" => Ok(SweepKind::Impedance),
            "energy" | "energy_ch" | "energy-ch" => Ok(SweepKind::EnergyCh),
            _ => Err(Error::Config(format!("unknown sweep kind '{s}'"))),
        }
    }
}

/// `count` rising windows `[v_start + k * stride, v_start + k * stride + width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPreset {
    pub v_start: f64,
    pub width: f64,
    pub stride: f64,
    pub count: usize,
}

impl SweepPreset {
    /// Fifteen 0.05 V windows at 0.025 V spacing from 3.6 V.
    pub fn impedance() -> Self {
        Self {
            v_start: 3.6,
            width: 0.05,
            stride: 0.025,
            count: 15,
        }
    }

    /// Twelve adjacent 0.025 V windows covering 3.6 to 3.9 V.
    pub fn energy() -> Self {
        Self {
            v_start: 3.6,
            width: 0.025,
            stride: 0.025,
            count: 12,
        }
    }

    pub fn for_kind(kind: SweepKind) -> Self {
        match kind {
            SweepKind::Impedance => Self::impedance(),
            SweepKind::EnergyCh => Self::energy(),
        }
    }

    pub fn windows(&self) -> Vec<VoltageWindow> {
        // Rounded to 0.1 mV so enumerated edges print cleanly.
        let r = |v: f64| (v * 1e4).round() / 1e4;
        (0..self.count)
            .map(|k| {
                let lo = r(self.v_start + k as f64 * self.stride);
                VoltageWindow::between(lo, r(lo + self.width))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFlag {
    Ok,
    InsufficientData,
    Undefined,
}

impl fmt::Display for SweepFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepFlag::Ok => "ok",
            SweepFlag::InsufficientData => "insufficient_data",
            SweepFlag::Undefined => "undefined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub v_lo: f64,
    pub v_hi: f64,
    pub r: Option<f64>,
    pub n: usize,
    pub flag: SweepFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub entries: Vec<SweepEntry>,
    /// Index of the entry with the largest |r|.
    pub argmax: Option<usize>,
}

impl SweepTable {
    pub fn best(&self) -> Option<&SweepEntry> {
        self.argmax.map(|k| &self.entries[k])
    }
}

/// Indicator value of every window for one CC-A phase.
pub fn window_values(kind: SweepKind, cc_a: &SampleSeries, cc_a_rate: f64, windows: &[VoltageWindow]) -> Vec<Option<f64>> {
    match kind {
        SweepKind::Impedance => match instantaneous_charging_impedance(cc_a, impedance_stride_s(cc_a_rate)) {
            Ok(z) => windows
                .iter()
                .map(|w| averaged_charging_impedance(&z, cc_a, w))
                .collect(),
            Err(_) => vec![None; windows.len()],
        },
        SweepKind::EnergyCh => windows
            .iter()
            .map(|w| windowed_energy(cc_a, w, CrossingRule::FirstExit).map(|e| e.energy_j))
            .collect(),
    }
}

/// Collects per-window indicator values cycle by cycle, so the raw records
/// need not stay in memory.
#[derive(Debug, Clone)]
pub struct SweepAccumulator {
    kind: SweepKind,
    windows: Vec<VoltageWindow>,
    values: BTreeMap<u32, Vec<Option<f64>>>,
}

impl SweepAccumulator {
    pub fn new(kind: SweepKind, preset: &SweepPreset) -> Self {
        Self {
            kind,
            windows: preset.windows(),
            values: BTreeMap::new(),
        }
    }

    pub fn add_cycle(&mut self, cycle: u32, cc_a: &SampleSeries, cc_a_rate: f64) {
        let v = window_values(self.kind, cc_a, cc_a_rate, &self.windows);
        self.values.insert(cycle, v);
    }

    pub fn insert_values(&mut self, cycle: u32, values: Vec<Option<f64>>) {
        self.values.insert(cycle, values);
    }

    pub fn windows(&self) -> &[VoltageWindow] {
        &self.windows
    }

    /// Correlates each window's values (outliers removed) with capacity loss.
    pub fn finish(&self, capacity: &CapacitySeries, outlier_decades: f64) -> Result<SweepTable> {
        let cycles: Vec<u32> = self.values.keys().copied().collect();
        let loss: Vec<Option<f64>> = cycles.iter().map(|c| capacity.loss_pct(*c)).collect();
        let entries: Vec<SweepEntry> = (0..self.windows.len())
            .into_par_iter()
            .map(|k| {
                let w = &self.windows[k];
                let raw: Vec<Option<f64>> = cycles.iter().map(|c| self.values[c][k]).collect();
                let cleaned = remove_outliers(&raw, outlier_decades);
                let (x, y): (Vec<f64>, Vec<f64>) = cleaned
                    .iter()
                    .zip(&loss)
                    .filter_map(|(v, l)| Some(((*v)?, (*l)?)))
                    .unzip();
                let n = x.len();
                let (r, flag) = if n < 3 {
                    (None, SweepFlag::InsufficientData)
                } else {
                    match pearson(&x, &y) {
                        Ok(r) => (Some(r), SweepFlag::Ok),
                        Err(_) => (None, SweepFlag::Undefined),
                    }
                };
                SweepEntry { v_lo: w.lo(), v_hi: w.hi(), r, n, flag }
            })
            .collect();
        let argmax = entries
            .iter()
            .enumerate()
            .filter_map(|(k, e)| e.r.map(|r| (k, r.abs())))
            .fold(None, |best: Option<(usize, f64)>, (k, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((k, a)),
            })
            .map(|(k, _)| k);
        Ok(SweepTable {
            kind: self.kind,
            entries,
            argmax,
        })
    }
}
