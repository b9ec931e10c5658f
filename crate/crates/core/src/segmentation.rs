//! Phase segmentation of raw cycles and acceleration-peak detection in the
//! discharge.

use serde::{Deserialize, Serialize};

use crate::config::{PeakConfig, SegmentationConfig};
use crate::error::{Error, Result};
use crate::model::{mean, median, CycleRecord, PhaseBoundaries, SampleSeries};

/// Splits one raw cycle into CC-A, CV at 4.0 V, CC-B, CV at 4.2 V and the
/// discharge.
///
/// The CV hold at 4.0 V is empty when the CC-A rate already equals the CC-B
/// rate.
pub fn segment_phases(
    raw: &SampleSeries,
    cc_a_rate: f64,
    nominal_capacity_ah: f64,
    cfg: &SegmentationConfig,
) -> Result<PhaseBoundaries> {
    let n = raw.len();
    let v = &raw.voltage;
    let i = &raw.current;
    if n == 0 {
        return Err(Error::Segmentation("empty cycle".into()));
    }
    if !(cc_a_rate > 0.0) || !(nominal_capacity_ah > 0.0) {
        return Err(Error::Segmentation(
            "C-rate and nominal capacity must be positive".into(),
        ));
    }

    let reach_4v0 = v.iter().position(|&x| x >= cfg.cc_a_end_v);
    let reach_4v0 = match reach_4v0 {
        Some(0) | None => {
            return Err(Error::Segmentation(format!(
                "CC-A endpoint not found (no rising crossing of {} V)",
                cfg.cc_a_end_v
            )))
        }
        Some(k) => k,
    };
    let med = median(&i[..reach_4v0]);
    if !(med < 0.0) {
        return Err(Error::Segmentation(
            "CC-A endpoint not found (cycle does not start charging)".into(),
        ));
    }
    let tol = cfg.eps_i * med.abs();
    let cc_a_end = i[..reach_4v0]
        .iter()
        .position(|&x| x >= 0.0 || (x - med).abs() > tol)
        .unwrap_or(reach_4v0);
    if cc_a_end == 0 {
        return Err(Error::Segmentation("CC-A phase is empty".into()));
    }

    let i_b = cfg.cc_b_rate * nominal_capacity_ah;
    let cv0_end = (cc_a_end..n)
        .find(|&k| i[k] < 0.0 && i[k].abs() <= i_b * (1.0 + cfg.cv_exit_tol))
        .ok_or_else(|| Error::Segmentation("CC-B phase not found".into()))?;
    let cc_b_end = (cv0_end..n)
        .find(|&k| v[k] >= cfg.cc_b_end_v)
        .ok_or_else(|| {
            Error::Segmentation(format!("CC-B endpoint ({} V) not found", cfg.cc_b_end_v))
        })?;
    let cv2_end = (cc_b_end..n)
        .find(|&k| i[k] >= 0.0 || i[k].abs() < cfg.cutoff_a)
        .ok_or_else(|| Error::Segmentation("discharge absent".into()))?;
    if cv2_end == n || !(mean(&i[cv2_end..]) > 0.0) {
        return Err(Error::Segmentation("discharge absent".into()));
    }

    Ok(PhaseBoundaries::from_ends([
        cc_a_end, cv0_end, cc_b_end, cv2_end, n,
    ]))
}

/// Returns the cycle's phase partition: manifest-supplied boundaries are used
/// verbatim, otherwise the cycle is segmented.
pub fn resolve_phases(
    record: &CycleRecord,
    nominal_capacity_ah: f64,
    cfg: &SegmentationConfig,
) -> Result<PhaseBoundaries> {
    match &record.phases {
        Some(p) => Ok(p.clone()),
        None => segment_phases(&record.raw, record.meta.cc_a_rate, nominal_capacity_ah, cfg),
    }
}

/// A discharge current step caused by an acceleration event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelerationPeak {
    /// Sample index where the current starts to rise.
    pub index: usize,
    /// Baseline voltage mean minus the plateau voltage minimum (V).
    pub delta_v: f64,
    /// Plateau current mean minus baseline current mean (A).
    pub delta_i: f64,
    /// Baseline samples, half-open.
    pub pre_window: [usize; 2],
    pub soc_at_peak: Option<f64>,
}

impl AccelerationPeak {
    pub fn resistance(&self) -> f64 {
        self.delta_v / self.delta_i
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakParams {
    pub i_step_min_a: f64,
    pub w_step: usize,
    pub hold_min: usize,
    pub baseline_len: usize,
}

impl PeakParams {
    pub fn from_config(cfg: &PeakConfig, nominal_capacity_ah: f64) -> Self {
        Self {
            i_step_min_a: cfg.i_step_min_a.unwrap_or(0.5 * nominal_capacity_ah),
            w_step: cfg.w_step,
            hold_min: cfg.hold_min,
            baseline_len: cfg.baseline_len,
        }
    }
}

/// Finds acceleration events: the current rises by at least `i_step_min_a`
/// over the baseline within `w_step` samples of onset and stays there for
/// `hold_min` samples. Overlapping candidates keep the larger step (earlier on
/// ties). Result is sorted by index.
pub fn detect_acceleration_peaks(
    discharge: &SampleSeries,
    params: &PeakParams,
) -> Vec<AccelerationPeak> {
    let i = &discharge.current;
    let v = &discharge.voltage;
    let n = i.len();
    let PeakParams {
        i_step_min_a: step,
        w_step,
        hold_min,
        baseline_len: nb,
    } = *params;

    struct Candidate {
        onset: usize,
        end: usize,
        peak: AccelerationPeak,
    }

    let mut candidates = Vec::new();
    for s in nb.max(1)..n {
        if !(i[s] - i[s - 1] > 0.0) {
            continue;
        }
        let base = s - nb..s;
        let i_base = mean(&i[base.clone()]);
        let Some(q) = (s..(s + w_step).min(n)).find(|&k| i[k] - i_base >= step) else {
            continue;
        };
        let plateau = q..q + hold_min;
        if plateau.end > n || i[plateau.clone()].iter().any(|&x| x - i_base < step) {
            continue;
        }
        let v_min = v[plateau.clone()].iter().copied().fold(f64::INFINITY, f64::min);
        let peak = AccelerationPeak {
            index: s,
            delta_v: mean(&v[base.clone()]) - v_min,
            delta_i: mean(&i[plateau.clone()]) - i_base,
            pre_window: [base.start, base.end],
            soc_at_peak: discharge.soc.as_ref().map(|soc| soc[s]),
        };
        candidates.push(Candidate {
            onset: s,
            end: plateau.end,
            peak,
        });
    }

    candidates.sort_by(|a, b| {
        b.peak
            .delta_i
            .total_cmp(&a.peak.delta_i)
            .then(a.onset.cmp(&b.onset))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| c.end <= k.onset || k.end <= c.onset) {
            kept.push(c);
        }
    }
    let mut peaks: Vec<_> = kept.into_iter().map(|c| c.peak).collect();
    peaks.sort_by_key(|p| p.index);
    peaks
}
