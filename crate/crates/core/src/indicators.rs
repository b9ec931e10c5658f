//! The five health indicators and their supporting quantities.
//!
//! * power autocorrelation of the discharge power at zero lag,
//! * mean resistance over the discharge acceleration peaks,
//! * averaged charging impedance over a voltage window of CC-A,
//! * charge and discharge energy inside fixed voltage windows.
//!
//! The OCV-referenced impedance, pseudo-DV and OCV hysteresis are provided for
//! diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{interp_linear, mean, OcvCurve, SampleSeries};
use crate::segmentation::AccelerationPeak;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowDirection {
    Rising,
    Falling,
}

/// Voltage interval traversed in a given direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageWindow {
    pub v_start: f64,
    pub v_end: f64,
    pub direction: WindowDirection,
}

impl VoltageWindow {
    pub fn rising(v_start: f64, v_end: f64) -> Result<Self> {
        if v_start > v_end {
            return Err(Error::Domain(format!(
                "rising window needs v_start <= v_end, got [{v_start}, {v_end}]"
            )));
        }
        Ok(Self {
            v_start,
            v_end,
            direction: WindowDirection::Rising,
        })
    }

    pub fn falling(v_start: f64, v_end: f64) -> Result<Self> {
        if v_start < v_end {
            return Err(Error::Domain(format!(
                "falling window needs v_start >= v_end, got [{v_start}, {v_end}]"
            )));
        }
        Ok(Self {
            v_start,
            v_end,
            direction: WindowDirection::Falling,
        })
    }

    /// Direction inferred from the endpoint order (equal endpoints count as rising).
    pub fn between(v_start: f64, v_end: f64) -> Self {
        let direction = if v_end < v_start {
            WindowDirection::Falling
        } else {
            WindowDirection::Rising
        };
        Self {
            v_start,
            v_end,
            direction,
        }
    }

    pub fn lo(&self) -> f64 {
        self.v_start.min(self.v_end)
    }

    pub fn hi(&self) -> f64 {
        self.v_start.max(self.v_end)
    }
}

/// Which crossing of `v_end` closes a window when the voltage is not monotone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CrossingRule {
    #[default]
    FirstExit,
    LastExit,
}

/// Sub-sample crossing of `level` in interval `k-1..k`, if any.
fn crossing_at(time: &[f64], v: &[f64], k: usize, level: f64, dir: WindowDirection) -> Option<f64> {
    let (a, b) = (v[k - 1], v[k]);
    let hit = match dir {
        WindowDirection::Rising => a < level && level <= b,
        WindowDirection::Falling => a > level && level >= b,
    };
    hit.then(|| time[k - 1] + (level - a) / (b - a) * (time[k] - time[k - 1]))
}

/// Entry and exit times of `window` along the series, interpolated between
/// bracketing samples. Returns the bracketing interval indices too.
pub fn window_times(
    time: &[f64],
    voltage: &[f64],
    window: &VoltageWindow,
    rule: CrossingRule,
) -> Option<((f64, usize), (f64, usize))> {
    let n = voltage.len();
    let dir = window.direction;
    let (t_in, k_in) = (1..n).find_map(|k| crossing_at(time, voltage, k, window.v_start, dir).map(|t| (t, k)))?;
    let mut exits = (k_in..n).filter_map(|k| {
        crossing_at(time, voltage, k, window.v_end, dir)
            .filter(|&t| t >= t_in)
            .map(|t| (t, k))
    });
    let exit = match rule {
        CrossingRule::FirstExit => exits.next(),
        CrossingRule::LastExit => exits.next_back(),
    }?;
    Some(((t_in, k_in), exit))
}

pub fn power_series(series: &SampleSeries) -> Vec<f64> {
    series
        .voltage
        .iter()
        .zip(&series.current)
        .map(|(v, i)| v * i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autocorrelation {
    /// Integer sample lags, `-max..=max`.
    pub lags: Vec<i64>,
    pub rho: Vec<f64>,
}

impl Autocorrelation {
    pub fn at_lag(&self, lag: i64) -> Option<f64> {
        let max = *self.lags.last()?;
        (lag.abs() <= max).then(|| self.rho[(lag + max) as usize])
    }

    /// The power autocorrelation indicator: the zero-lag value.
    pub fn zero_lag(&self) -> f64 {
        self.at_lag(0).unwrap_or(f64::NAN)
    }
}

fn deviations(power: &[f64]) -> Result<Vec<f64>> {
    if power.len() < 2 {
        return Err(Error::Domain(
            "autocorrelation needs at least two samples".into(),
        ));
    }
    let p_bar = mean(power);
    Ok(power.iter().map(|p| p - p_bar).collect())
}

fn lag_sum(d: &[f64], lag: usize) -> f64 {
    d[lag..].iter().zip(d).map(|(a, b)| a * b).sum()
}

/// Unnormalized autocorrelation of the power signal,
/// `rho(tau) = sum_{t > tau} (P(t) - mean) (P(t - tau) - mean)`, for integer
/// lags up to `floor(tau_max_s / dt_s)` on both sides.
pub fn power_autocorrelation(power: &[f64], dt_s: f64, tau_max_s: f64) -> Result<Autocorrelation> {
    let d = deviations(power)?;
    if !(dt_s > 0.0) || tau_max_s < 0.0 {
        return Err(Error::Domain("dt_s must be positive and tau_max non-negative".into()));
    }
    let max_lag = (tau_max_s / dt_s).floor() as usize;
    if max_lag >= d.len() {
        return Err(Error::Domain(format!(
            "tau_max {tau_max_s} s exceeds the series duration ({} samples)",
            d.len()
        )));
    }
    let half: Vec<f64> = (0..=max_lag).map(|lag| lag_sum(&d, lag)).collect();
    let max = max_lag as i64;
    let lags = (-max..=max).collect();
    let rho = half.iter().rev().chain(&half[1..]).copied().collect();
    Ok(Autocorrelation { lags, rho })
}

/// Zero-lag autocorrelation: the sum of squared deviations from the mean power.
pub fn power_autocorrelation_indicator(power: &[f64]) -> Result<f64> {
    let d = deviations(power)?;
    Ok(lag_sum(&d, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleResistance {
    /// Mean over peaks; `None` when no peak was found.
    pub mean_ohm: Option<f64>,
    /// Per-peak resistance and state of charge at the peak, if known.
    pub per_peak: Vec<(f64, Option<f64>)>,
}

pub fn cycle_resistance(peaks: &[AccelerationPeak]) -> CycleResistance {
    let per_peak: Vec<_> = peaks.iter().map(|p| (p.resistance(), p.soc_at_peak)).collect();
    let mean_ohm = (!per_peak.is_empty())
        .then(|| per_peak.iter().map(|(r, _)| r).sum::<f64>() / per_peak.len() as f64);
    CycleResistance { mean_ohm, per_peak }
}

/// Differencing interval for the instantaneous impedance, chosen by the CC-A
/// rate: 60 s at C/4, 30 s at C/2 and 1 s at 1C. Other rates use the nearest
/// entry on a log scale.
pub fn impedance_stride_s(cc_a_rate: f64) -> f64 {
    const TABLE: [(f64, f64); 3] = [(0.25, 60.0), (0.5, 30.0), (1.0, 1.0)];
    TABLE
        .iter()
        .min_by(|a, b| {
            let da = (cc_a_rate / a.0).ln().abs();
            let db = (cc_a_rate / b.0).ln().abs();
            da.total_cmp(&db)
        })
        .map(|e| e.1)
        .unwrap()
}

/// Impedance samples with the time and terminal voltage at which they apply.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImpedanceSeries {
    pub time: Vec<f64>,
    pub voltage: Vec<f64>,
    pub z: Vec<f64>,
}

/// `Z(t_k) = -(V(t_k) - V(t_{k-1})) / I_ch` on a grid of step `stride_s`,
/// where `I_ch` is the mean CC-A current.
pub fn instantaneous_charging_impedance(cc_a: &SampleSeries, stride_s: f64) -> Result<ImpedanceSeries> {
    let dt = cc_a
        .dt_s()
        .ok_or_else(|| Error::Domain("CC-A phase has fewer than two samples".into()))?;
    let stride = ((stride_s / dt).round() as usize).max(1);
    if stride >= cc_a.len() {
        return Err(Error::Domain(format!(
            "CC-A phase ({:.0} s) is shorter than the {stride_s} s differencing interval",
            cc_a.duration_s()
        )));
    }
    let i_ch = cc_a.mean_current();
    if !(i_ch < 0.0) {
        return Err(Error::Domain("CC-A current is not a charging current".into()));
    }
    let mut out = ImpedanceSeries::default();
    for k in (stride..cc_a.len()).step_by(stride) {
        out.time.push(cc_a.time[k]);
        out.voltage.push(cc_a.voltage[k]);
        out.z.push(-(cc_a.voltage[k] - cc_a.voltage[k - stride]) / i_ch);
    }
    Ok(out)
}

/// Mean of the impedance samples whose time lies between the window's entry
/// and exit crossings on the phase voltage.
pub fn averaged_charging_impedance(
    z: &ImpedanceSeries,
    phase: &SampleSeries,
    window: &VoltageWindow,
) -> Option<f64> {
    let ((t_in, _), (t_fin, _)) =
        window_times(&phase.time, &phase.voltage, window, CrossingRule::FirstExit)?;
    mean_in_time_range(&z.time, &z.z, t_in, t_fin)
}

fn mean_in_time_range(time: &[f64], values: &[f64], t_in: f64, t_fin: f64) -> Option<f64> {
    let picked: Vec<f64> = time
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= t_in && **t <= t_fin)
        .map(|(_, z)| *z)
        .collect();
    (!picked.is_empty()).then(|| mean(&picked))
}

/// Where the state of charge comes from when the phase carries no SOC channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocReconstruction {
    /// State of charge at the first sample of the phase.
    pub anchor: f64,
    pub capacity_ah: f64,
}

pub fn phase_soc(phase: &SampleSeries, fallback: Option<SocReconstruction>) -> Result<Vec<f64>> {
    if let Some(soc) = &phase.soc {
        return Ok(soc.clone());
    }
    let rec = fallback.ok_or_else(|| {
        Error::Config("no SOC channel and no coulomb-counting anchor available".into())
    })?;
    let mut soc = Vec::with_capacity(phase.len());
    let mut s = rec.anchor;
    for k in 0..phase.len() {
        if k > 0 {
            let dt = phase.time[k] - phase.time[k - 1];
            let i_avg = 0.5 * (phase.current[k] + phase.current[k - 1]);
            s -= i_avg * dt / 3600.0 / rec.capacity_ah;
        }
        soc.push(s);
    }
    Ok(soc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcvImpedance {
    /// Per-sample `-(V - OCV(SOC)) / I`, negative values kept for inspection.
    pub z_ist: Vec<f64>,
    /// Window mean over the non-negative samples; `None` when none remain.
    pub mean_ohm: Option<f64>,
}

/// Charging impedance against the fresh-cell charge OCV,
/// `Z(t) = -(V(t) - OCV(SOC(t))) / I(t)`. Negative samples (polarization left
/// over from the preceding discharge) are left out of the window mean.
pub fn charging_impedance_with_ocv(
    cc_a: &SampleSeries,
    ocv_charge: Option<&OcvCurve>,
    window: &VoltageWindow,
    soc_fallback: Option<SocReconstruction>,
) -> Result<OcvImpedance> {
    let ocv = ocv_charge.ok_or_else(|| Error::Config("charge OCV curve is required".into()))?;
    let soc = phase_soc(cc_a, soc_fallback)?;
    let z_ist: Vec<f64> = (0..cc_a.len())
        .map(|k| -(cc_a.voltage[k] - ocv.eval(soc[k])) / cc_a.current[k])
        .collect();
    let mean_ohm = window_times(&cc_a.time, &cc_a.voltage, window, CrossingRule::FirstExit)
        .and_then(|((t_in, _), (t_fin, _))| {
            let (t, z): (Vec<f64>, Vec<f64>) = cc_a
                .time
                .iter()
                .zip(&z_ist)
                .filter(|(_, z)| **z >= 0.0)
                .map(|(t, z)| (*t, *z))
                .unzip();
            mean_in_time_range(&t, &z, t_in, t_fin)
        });
    Ok(OcvImpedance { z_ist, mean_ohm })
}

/// Pseudo differential-voltage curve: the impedance scaled by `3600 / dt`.
pub fn pseudo_dv(z: &[f64], delta_t_s: f64) -> Result<Vec<f64>> {
    if !(delta_t_s > 0.0) {
        return Err(Error::Domain("pseudo-DV interval must be positive".into()));
    }
    let scale = 3600.0 / delta_t_s;
    Ok(z.iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowedEnergy {
    /// |integral of V I dt| between the crossings (J).
    pub energy_j: f64,
    pub elapsed_s: f64,
    pub t_in: f64,
    pub t_fin: f64,
}

/// Trapezoidal integral of the power between the window's entry and exit
/// crossings. Power at the crossing instants is interpolated linearly.
pub fn windowed_energy(
    phase: &SampleSeries,
    window: &VoltageWindow,
    rule: CrossingRule,
) -> Option<WindowedEnergy> {
    let ((t_in, k_in), (t_fin, k_fin)) = window_times(&phase.time, &phase.voltage, window, rule)?;
    let t = &phase.time;
    let p = |k: usize| phase.voltage[k] * phase.current[k];
    let p_at = |time: f64, k: usize| {
        let w = (time - t[k - 1]) / (t[k] - t[k - 1]);
        p(k - 1) + w * (p(k) - p(k - 1))
    };
    let p_in = p_at(t_in, k_in);
    let p_fin = p_at(t_fin, k_fin);
    let integral = if k_in == k_fin {
        0.5 * (p_in + p_fin) * (t_fin - t_in)
    } else {
        let mut acc = 0.5 * (p_in + p(k_in)) * (t[k_in] - t_in);
        for k in k_in + 1..k_fin {
            acc += 0.5 * (p(k - 1) + p(k)) * (t[k] - t[k - 1]);
        }
        acc + 0.5 * (p(k_fin - 1) + p_fin) * (t_fin - t[k_fin - 1])
    };
    Some(WindowedEnergy {
        energy_j: integral.abs(),
        elapsed_s: t_fin - t_in,
        t_in,
        t_fin,
    })
}

/// Charge minus discharge OCV on the union of both SOC grids, restricted to
/// the range where both curves are defined.
pub fn ocv_hysteresis(charge: &OcvCurve, discharge: &OcvCurve) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c0, c1) = charge.soc_span();
    let (d0, d1) = discharge.soc_span();
    let (lo, hi) = (c0.max(d0), c1.min(d1));
    if lo > hi {
        return Err(Error::Domain("OCV curves have disjoint SOC supports".into()));
    }
    let mut grid: Vec<f64> = charge
        .soc
        .iter()
        .chain(&discharge.soc)
        .copied()
        .filter(|s| (lo..=hi).contains(s))
        .collect();
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    let h = grid
        .iter()
        .map(|&s| interp_linear(&charge.soc, &charge.ocv, s) - interp_linear(&discharge.soc, &discharge.ocv, s))
        .collect();
    Ok((grid, h))
}
