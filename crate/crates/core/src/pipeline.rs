//! Per-cycle indicator extraction.

use std::fmt;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ToolkitConfig;
use crate::error::{Error, Result};
use crate::indicators::{
    averaged_charging_impedance, charging_impedance_with_ocv, cycle_resistance, impedance_stride_s,
    instantaneous_charging_impedance, power_autocorrelation_indicator, power_series,
    windowed_energy, SocReconstruction,
};
use crate::model::{CycleRecord, OcvCurve, Phase, PhaseBoundaries};
use crate::segmentation::{detect_acceleration_peaks, resolve_phases, AccelerationPeak, PeakParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Indicator {
    PAutocorr,
    R,
    ZChg,
    ZChg2,
    ECh,
    EDis,
}

impl Indicator {
    pub const ALL: [Indicator; 6] = [
        Indicator::PAutocorr,
        Indicator::R,
        Indicator::ZChg,
        Indicator::ZChg2,
        Indicator::ECh,
        Indicator::EDis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Indicator::PAutocorr => "P_autocorr",
            Indicator::R => "R",
            Indicator::ZChg => "Z_chg",
            Indicator::ZChg2 => "Z_chg2",
            Indicator::ECh => "E_ch",
            Indicator::EDis => "E_dis",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        Indicator::ALL
            .into_iter()
            .find(|i| i.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::Config(format!("unknown indicator '{key}'")))
    }
}

/// Indicator values of one cycle; `None` marks an invalid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleIndicators {
    pub cell_id: String,
    pub cycle: u32,
    pub batch: u32,
    pub p_autocorr: Option<f64>,
    pub r: Option<f64>,
    pub z_chg: Option<f64>,
    pub z_chg2: Option<f64>,
    pub e_ch: Option<f64>,
    pub e_dis: Option<f64>,
}

impl CycleIndicators {
    pub fn empty(cell_id: &str, cycle: u32, batch: u32) -> Self {
        Self {
            cell_id: cell_id.to_string(),
            cycle,
            batch,
            p_autocorr: None,
            r: None,
            z_chg: None,
            z_chg2: None,
            e_ch: None,
            e_dis: None,
        }
    }

    pub fn get(&self, ind: Indicator) -> Option<f64> {
        match ind {
            Indicator::PAutocorr => self.p_autocorr,
            Indicator::R => self.r,
            Indicator::ZChg => self.z_chg,
            Indicator::ZChg2 => self.z_chg2,
            Indicator::ECh => self.e_ch,
            Indicator::EDis => self.e_dis,
        }
    }

    pub fn set(&mut self, ind: Indicator, value: Option<f64>) {
        let slot = match ind {
            Indicator::PAutocorr => &mut self.p_autocorr,
            Indicator::R => &mut self.r,
            Indicator::ZChg => &mut self.z_chg,
            Indicator::ZChg2 => &mut self.z_chg2,
            Indicator::ECh => &mut self.e_ch,
            Indicator::EDis => &mut self.e_dis,
        };
        *slot = value.filter(|v| v.is_finite());
    }

    /// One `0`/`1` character per indicator, in [`Indicator::ALL`] order.
    pub fn valid_mask(&self) -> String {
        Indicator::ALL
            .iter()
            .map(|i| if self.get(*i).is_some() { '1' } else { '0' })
            .collect()
    }
}

/// Everything extracted from one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleExtraction {
    pub indicators: CycleIndicators,
    pub phases: Option<PhaseBoundaries>,
    pub peaks: Vec<AccelerationPeak>,
    /// Why entries were masked.
    pub notes: Vec<String>,
}

/// Extraction settings that do not live in the config file.
#[derive(Debug, Clone, Copy)]
pub struct ExtractContext<'a> {
    pub config: &'a ToolkitConfig,
    pub nominal_capacity_ah: f64,
    pub ocv_charge: Option<&'a OcvCurve>,
}

pub fn extract_cycle(record: &CycleRecord, ctx: &ExtractContext<'_>) -> CycleExtraction {
    let meta = &record.meta;
    let cfg = ctx.config;
    let mut ind = CycleIndicators::empty(&meta.cell_id, meta.cycle_index, meta.batch_index);
    let mut notes = Vec::new();
    let phases = match resolve_phases(record, ctx.nominal_capacity_ah, &cfg.segmentation) {
        Ok(p) => p,
        Err(e) => {
            notes.push(e.to_string());
            return CycleExtraction {
                indicators: ind,
                phases: None,
                peaks: Vec::new(),
                notes,
            };
        }
    };
    let rec = CycleRecord {
        meta: meta.clone(),
        raw: record.raw.clone(),
        phases: Some(phases.clone()),
    };
    let cc_a = rec.phase(Phase::CcA).unwrap_or_default();
    let discharge = rec.phase(Phase::Discharge).unwrap_or_default();
    let mut note = |ind: Indicator, why: String| notes.push(format!("{ind}: {why}"));

    match power_autocorrelation_indicator(&power_series(&discharge)) {
        Ok(v) => ind.set(Indicator::PAutocorr, Some(v)),
        Err(e) => note(Indicator::PAutocorr, e.to_string()),
    }

    let peaks = detect_acceleration_peaks(
        &discharge,
        &PeakParams::from_config(&cfg.peaks, ctx.nominal_capacity_ah),
    );
    let r = cycle_resistance(&peaks).mean_ohm;
    if r.is_none() {
        note(Indicator::R, "no acceleration peak".into());
    }
    ind.set(Indicator::R, r);

    let z = instantaneous_charging_impedance(&cc_a, impedance_stride_s(meta.cc_a_rate))
        .map(|series| averaged_charging_impedance(&series, &cc_a, &cfg.z_chg_window()));
    match z {
        Ok(Some(v)) => ind.set(Indicator::ZChg, Some(v)),
        Ok(None) => note(Indicator::ZChg, "no impedance sample in window".into()),
        Err(e) => note(Indicator::ZChg, e.to_string()),
    }

    if let Some(ocv) = ctx.ocv_charge {
        let fallback = SocReconstruction {
            anchor: cfg.cell.soc_anchor,
            capacity_ah: ctx.nominal_capacity_ah,
        };
        match charging_impedance_with_ocv(&cc_a, Some(ocv), &cfg.z_chg_window(), Some(fallback)) {
            Ok(z2) => ind.set(Indicator::ZChg2, z2.mean_ohm),
            Err(e) => note(Indicator::ZChg2, e.to_string()),
        }
    }

    let rule = cfg.windows.crossing;
    match windowed_energy(&cc_a, &cfg.e_ch_window(), rule) {
        Some(e) => ind.set(Indicator::ECh, Some(e.energy_j)),
        None => note(Indicator::ECh, "window crossing missing".into()),
    }
    match windowed_energy(&discharge, &cfg.e_dis_window(), rule) {
        Some(e) => ind.set(Indicator::EDis, Some(e.energy_j)),
        None => note(Indicator::EDis, "window crossing missing".into()),
    }

    for n in &notes {
        debug!("{} cycle {}: {n}", meta.cell_id, meta.cycle_index);
    }
    CycleExtraction {
        indicators: ind,
        phases: Some(phases),
        peaks,
        notes,
    }
}

/// Loads and extracts `items` on `jobs` threads. Output is sorted by
/// (cell, cycle) whatever the thread count; load failures become masked rows.
pub fn extract_parallel<T, L>(
    items: &[T],
    jobs: usize,
    ctx_for: impl Fn(&T) -> (String, u32, u32) + Sync,
    load: L,
    ctx: &ExtractContext<'_>,
) -> Result<Vec<(CycleExtraction, Option<Error>)>>
where
    T: Sync,
    L: Fn(&T) -> Result<(CycleRecord, f64)> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut out: Vec<(CycleExtraction, Option<Error>)> = pool.install(|| {
        items
            .par_iter()
            .map(|item| match load(item) {
                Ok((record, nominal)) => {
                    let local = ExtractContext {
                        nominal_capacity_ah: nominal,
                        ..*ctx
                    };
                    (extract_cycle(&record, &local), None)
                }
                Err(e) => {
                    let (cell, cycle, batch) = ctx_for(item);
                    let failed = CycleExtraction {
                        indicators: CycleIndicators::empty(&cell, cycle, batch),
                        phases: None,
                        peaks: Vec::new(),
                        notes: vec![e.to_string()],
                    };
                    (failed, Some(e))
                }
            })
            .collect()
    });
    out.sort_by(|a, b| {
        let (x, y) = (&a.0.indicators, &b.0.indicators);
        (&x.cell_id, x.cycle).cmp(&(&y.cell_id, y.cycle))
    });
    Ok(out)
}
