//! Domain types shared by every stage of the pipeline.
//!
//! Current sign convention: negative while charging, positive while
//! discharging. Times are seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-oriented voltage/current record sampled on a (nominally) uniform grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSeries {
    pub time: Vec<f64>,
    pub voltage: Vec<f64>,
    pub current: Vec<f64>,
    pub soc: Option<Vec<f64>>,
}

impl SampleSeries {
    pub fn new(time: Vec<f64>, voltage: Vec<f64>, current: Vec<f64>) -> Result<Self> {
        Self::with_soc(time, voltage, current, None)
    }

    pub fn with_soc(
        time: Vec<f64>,
        voltage: Vec<f64>,
        current: Vec<f64>,
        soc: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = time.len();
        if voltage.len() != n || current.len() != n || soc.as_ref().is_some_and(|s| s.len() != n)
        {
            return Err(Error::Domain(format!(
                "channel lengths differ (time {n}, voltage {}, current {})",
                voltage.len(),
                current.len()
            )));
        }
        Ok(Self {
            time,
            voltage,
            current,
            soc,
        })
    }

    /// Uniformly sampled series starting at t = 0.
    pub fn uniform(dt_s: f64, voltage: Vec<f64>, current: Vec<f64>) -> Result<Self> {
        let time = (0..voltage.len()).map(|k| k as f64 * dt_s).collect();
        Self::new(time, voltage, current)
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Nominal sampling step, from the first and last timestamps.
    pub fn dt_s(&self) -> Option<f64> {
        let n = self.len();
        (n >= 2).then(|| (self.time[n - 1] - self.time[0]) / (n - 1) as f64)
    }

    pub fn duration_s(&self) -> f64 {
        match (self.time.first(), self.time.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Copy of `range` with time re-based so the first sample sits at t = 0.
    pub fn slice(&self, range: Range<usize>) -> SampleSeries {
        let t0 = self.time.get(range.start).copied().unwrap_or(0.0);
        SampleSeries {
            time: self.time[range.clone()].iter().map(|t| t - t0).collect(),
            voltage: self.voltage[range.clone()].to_vec(),
            current: self.current[range.clone()].to_vec(),
            soc: self.soc.as_ref().map(|s| s[range].to_vec()),
        }
    }

    pub fn mean_current(&self) -> f64 {
        mean(&self.current)
    }
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// The five segments of one aging cycle, in protocol order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "CC_A")]
    CcA,
    #[serde(rename = "CV_4V0")]
    Cv4V0,
    #[serde(rename = "CC_B")]
    CcB,
    #[serde(rename = "CV_4V2")]
    Cv4V2,
    #[serde(rename = "DISCHARGE")]
    Discharge,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::CcA,
        Phase::Cv4V0,
        Phase::CcB,
        Phase::Cv4V2,
        Phase::Discharge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::CcA => "CC_A",
            Phase::Cv4V0 => "CV_4V0",
            Phase::CcB => "CC_B",
            Phase::Cv4V2 => "CV_4V2",
            Phase::Discharge => "DISCHARGE",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Schema(format!("unknown phase '{s}'")))
    }
}

/// Half-open sample-index ranges for each phase of a cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseBoundaries(pub BTreeMap<Phase, [usize; 2]>);

impl PhaseBoundaries {
    pub fn from_ends(ends: [usize; 5]) -> Self {
        let mut map = BTreeMap::new();
        let mut start = 0;
        for (phase, end) in Phase::ALL.into_iter().zip(ends) {
            map.insert(phase, [start, end]);
            start = end;
        }
        PhaseBoundaries(map)
    }

    pub fn range(&self, phase: Phase) -> Option<Range<usize>> {
        self.0.get(&phase).map(|[a, b]| *a..*b)
    }

    /// Checks that the ranges tile `0..len` without gaps or overlaps.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut ranges: Vec<_> = self.0.iter().map(|(p, r)| (r[0], r[1], *p)).collect();
        ranges.sort();
        let mut cursor = 0;
        for (a, b, phase) in ranges {
            if a != cursor || b < a {
                return Err(Error::Schema(format!(
                    "phase {phase} range [{a}, {b}) does not continue from row {cursor}"
                )));
            }
            cursor = b;
        }
        if cursor != len {
            return Err(Error::Schema(format!(
                "phase ranges cover {cursor} rows but the cycle has {len}"
            )));
        }
        Ok(())
    }
}

/// Identifying metadata of an aging cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMeta {
    pub cell_id: String,
    pub cycle_index: u32,
    pub batch_index: u32,
    /// CC-A charging rate in 1/h.
    pub cc_a_rate: f64,
}

/// One aging cycle: raw series plus (once known) its phase partition.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub meta: CycleMeta,
    pub raw: SampleSeries,
    pub phases: Option<PhaseBoundaries>,
}

impl CycleRecord {
    pub fn phase(&self, phase: Phase) -> Option<SampleSeries> {
        let boundaries = self.phases.as_ref()?;
        boundaries.range(phase).map(|r| self.raw.slice(r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RptRecord {
    pub cell_id: String,
    pub rpt_index: u32,
    pub preceding_cycle: u32,
    #[serde(rename = "capacity_Ah")]
    pub capacity_ah: f64,
}

/// Per-cycle capacity and capacity loss for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitySeries {
    pub cell_id: String,
    pub q_fresh_ah: f64,
    /// Cycle index to capacity (Ah).
    pub capacity_ah: BTreeMap<u32, f64>,
}

impl CapacitySeries {
    pub fn capacity(&self, cycle: u32) -> Option<f64> {
        self.capacity_ah.get(&cycle).copied()
    }

    pub fn loss_pct(&self, cycle: u32) -> Option<f64> {
        self.capacity(cycle)
            .map(|q| (self.q_fresh_ah - q) / self.q_fresh_ah * 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcvDirection {
    Charge,
    Discharge,
}

/// Tabulated open-circuit voltage against state of charge.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvCurve {
    pub direction: OcvDirection,
    pub soc: Vec<f64>,
    pub ocv: Vec<f64>,
}

impl OcvCurve {
    pub fn new(direction: OcvDirection, soc: Vec<f64>, ocv: Vec<f64>) -> Result<Self> {
        if soc.len() != ocv.len() || soc.len() < 2 {
            return Err(Error::Domain(
                "OCV curve needs at least two (soc, ocv) pairs of equal length".into(),
            ));
        }
        if soc.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Domain("OCV soc grid must lie in [0, 1]".into()));
        }
        if soc.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("OCV soc grid must be strictly increasing".into()));
        }
        if ocv.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("OCV must be strictly increasing in soc".into()));
        }
        Ok(Self { direction, soc, ocv })
    }

    pub fn soc_span(&self) -> (f64, f64) {
        (self.soc[0], self.soc[self.soc.len() - 1])
    }

    /// Piecewise-linear evaluation, clamped to the end values outside the grid.
    pub fn eval(&self, soc: f64) -> f64 {
        interp_linear(&self.soc, &self.ocv, soc)
    }
}

pub(crate) fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let w = (x - x0) / (x1 - x0);
    ys[k - 1] + w * (ys[k] - ys[k - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeMode {
    /// `(reference - value) / reference * 100`
    Loss,
    /// `(value - reference) / reference * 100`
    Increase,
}

pub fn percent_change(reference: f64, value: f64, mode: ChangeMode) -> Result<f64> {
    if reference == 0.0 {
        return Err(Error::Domain("percent change against a zero reference".into()));
    }
    Ok(match mode {
        ChangeMode::Loss => (reference - value) / reference * 100.0,
        ChangeMode::Increase => (value - reference) / reference * 100.0,
    })
}
