//! Synthetic aging campaigns with known ground truth.
//!
//! A zero-order equivalent circuit (`V = OCV(SOC) - R I`) is driven through
//! the charging protocol and a periodic drive-cycle discharge. Every quantity
//! the pipeline estimates is recorded in a ledger next to the emitted series.

mod ocv;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PeakConfig, ToolkitConfig};
use crate::error::{Error, Result};
use crate::model::{
    CycleMeta, CycleRecord, OcvCurve, OcvDirection, Phase, PhaseBoundaries, RptRecord, SampleSeries,
};
use crate::pipeline::{extract_cycle, CycleIndicators, ExtractContext};
use crate::preprocessing::{assemble_features, FeatureMatrix};

pub use ocv::{OcvModel, Pchip};

/// Guard against specs that never reach a phase endpoint.
const MAX_PHASE_S: f64 = 48.0 * 3600.0;

/// Resolution of the tabulated OCV curves handed to the pipeline.
pub const OCV_POINTS: usize = 201;

/// Repeating discharge current profile in C units, one value per second.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveTemplate {
    pub current_c: Vec<f64>,
    /// Seconds at which an acceleration step starts.
    pub onsets: Vec<usize>,
}

impl DriveTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let mut current_c = Vec::new();
        let mut onsets = Vec::new();
        for (k, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::Parse {
                line: k + 1,
                message: format!("bad template row '{line}'"),
            };
            if fields.len() != 3 {
                return Err(bad());
            }
            let c: f64 = fields[1].parse().map_err(|_| bad())?;
            if fields[2] == "1" {
                onsets.push(current_c.len());
            }
            current_c.push(c);
        }
        if current_c.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "empty drive template".into(),
            });
        }
        Ok(Self { current_c, onsets })
    }

    /// The bundled 1369 s urban drive surrogate.
    pub fn udds() -> &'static DriveTemplate {
        static T: OnceLock<DriveTemplate> = OnceLock::new();
        T.get_or_init(|| {
            DriveTemplate::parse(include_str!("../../data/udds_surrogate.csv"))
                .expect("bundled template parses")
        })
    }

    pub fn len(&self) -> usize {
        self.current_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current_c.is_empty()
    }

    fn at(&self, t_s: f64) -> (usize, f64) {
        let j = (t_s.floor() as usize) % self.len();
        (j, self.current_c[j])
    }
}

/// Voltage offset fault on one phase of selected cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub cycles: Vec<u32>,
    pub phase: Phase,
    /// The offset starts once the clean voltage reaches this level.
    #[serde(default, rename = "start_V")]
    pub start_v: Option<f64>,
    #[serde(default)]
    pub start_frac: f64,
    #[serde(default = "one")]
    pub end_frac: f64,
    #[serde(rename = "offset_V")]
    pub offset_v: f64,
}

/// Extra CC-A resistance that ramps in across a voltage band and grows with
/// cycle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpedanceBand {
    #[serde(rename = "v_lo")]
    pub v_lo: f64,
    #[serde(rename = "v_hi")]
    pub v_hi: f64,
    pub growth_ohm_per_cycle: f64,
}

impl ImpedanceBand {
    fn extra_ohm(&self, v_clean: f64, cycle: u32) -> f64 {
        let ramp = ((v_clean - self.v_lo) / (self.v_hi - self.v_lo)).clamp(0.0, 1.0);
        self.growth_ohm_per_cycle * f64::from(cycle) * ramp
    }
}

/// One-off capacity drop from `cycle` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepFade {
    pub cycle: u32,
    #[serde(rename = "drop_Ah")]
    pub drop_ah: f64,
}

fn one() -> f64 {
    1.0
}
fn default_capacity() -> f64 {
    4.85
}
fn default_r0() -> f64 {
    0.02
}
fn default_tau() -> f64 {
    200.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub cell_id: String,
    /// CC-A rate in 1/h.
    pub cc_a_rate: f64,
    #[serde(default = "default_capacity", rename = "nominal_capacity_Ah")]
    pub nominal_capacity_ah: f64,
    #[serde(default = "default_r0")]
    pub r0_ohm: f64,
    #[serde(default)]
    pub r_growth_ohm_per_cycle: f64,
    #[serde(default, rename = "fade_Ah_per_cycle")]
    pub fade_ah_per_cycle: f64,
    #[serde(default)]
    pub sigma_v: f64,
    #[serde(default)]
    pub sigma_i: f64,
    #[serde(default = "one")]
    pub hysteresis_scale: f64,
    /// Time constant of the CV current decay.
    #[serde(default = "default_tau")]
    pub tau_cv_s: f64,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    #[serde(default)]
    pub impedance_band: Option<ImpedanceBand>,
    #[serde(default)]
    pub step_fade: Option<StepFade>,
}

impl CellSpec {
    pub fn new(cell_id: &str, cc_a_rate: f64) -> Self {
        Self {
            cell_id: cell_id.to_string(),
            cc_a_rate,
            nominal_capacity_ah: default_capacity(),
            r0_ohm: default_r0(),
            r_growth_ohm_per_cycle: 0.0,
            fade_ah_per_cycle: 0.0,
            sigma_v: 0.0,
            sigma_i: 0.0,
            hysteresis_scale: 1.0,
            tau_cv_s: default_tau(),
            anomalies: Vec::new(),
            impedance_band: None,
            step_fade: None,
        }
    }

    /// True capacity after `cycle` aging cycles.
    pub fn capacity_ah(&self, cycle: u32) -> f64 {
        let mut q = self.nominal_capacity_ah - self.fade_ah_per_cycle * f64::from(cycle);
        if let Some(s) = &self.step_fade {
            if cycle >= s.cycle {
                q -= s.drop_ah;
            }
        }
        q
    }

    pub fn resistance_ohm(&self, cycle: u32) -> f64 {
        self.r0_ohm + self.r_growth_ohm_per_cycle * f64::from(cycle)
    }

    pub fn validate(&self, protocol: &Protocol, total_cycles: u32) -> Result<()> {
        let id = &self.cell_id;
        let bad = |what: &str| Err(Error::Config(format!("cell {id}: {what}")));
        if id.is_empty() {
            return bad("empty cell id");
        }
        let non_negative = [
            self.r0_ohm,
            self.r_growth_ohm_per_cycle,
            self.fade_ah_per_cycle,
            self.sigma_v,
            self.sigma_i,
            self.hysteresis_scale,
        ];
        if non_negative.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return bad("rates, noise levels and resistances must be finite and non-negative");
        }
        if !(self.nominal_capacity_ah > 0.0) || !(self.tau_cv_s > 0.0) {
            return bad("nominal capacity and CV time constant must be positive");
        }
        if !(self.cc_a_rate >= protocol.cc_b_rate) {
            return bad("CC-A rate must be at least the CC-B rate");
        }
        if !(self.capacity_ah(total_cycles) > 0.0) {
            return bad("capacity fade over the campaign exceeds the nominal capacity");
        }
        for a in &self.anomalies {
            if !(0.0..=1.0).contains(&a.start_frac) || !(a.start_frac..=1.0).contains(&a.end_frac) {
                return bad("anomaly fractions must satisfy 0 <= start <= end <= 1");
            }
        }
        if let Some(b) = &self.impedance_band {
            if !(b.v_hi > b.v_lo) || !(b.growth_ohm_per_cycle >= 0.0) {
                return bad("impedance band needs v_lo < v_hi and non-negative growth");
            }
        }
        if let Some(s) = &self.step_fade {
            if !(s.drop_ah >= 0.0) {
                return bad("step fade must be non-negative");
            }
        }
        Ok(())
    }
}

/// Charging protocol limits shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    #[serde(rename = "cc_a_end_V")]
    pub cc_a_end_v: f64,
    #[serde(rename = "cc_b_end_V")]
    pub cc_b_end_v: f64,
    pub cc_b_rate: f64,
    #[serde(rename = "cutoff_A")]
    pub cutoff_a: f64,
    /// SOC at the start of charging and the floor of the discharge.
    pub soc_min: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            cc_a_end_v: 4.0,
            cc_b_end_v: 4.2,
            cc_b_rate: 0.25,
            cutoff_a: 0.05,
            soc_min: 0.20,
        }
    }
}

fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    /// Cycles per batch; an RPT follows every batch.
    pub batches: Vec<u32>,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub protocol: Protocol,
}

impl CampaignSpec {
    pub fn total_cycles(&self) -> u32 {
        self.batches.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0) || !self.dt_s.is_finite() {
            return Err(Error::Config("dt_s must be positive".into()));
        }
        if self.batches.is_empty() || self.batches.contains(&0) {
            return Err(Error::Config("batch plan must list at least one non-empty batch".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("campaign has no cells".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            if !seen.insert(c.cell_id.as_str()) {
                return Err(Error::Config(format!("duplicate cell id {}", c.cell_id)));
            }
            c.validate(&self.protocol, self.total_cycles())?;
        }
        Ok(())
    }

    /// `(cycle, batch)` pairs in run order; both are 1-based.
    pub fn schedule(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        let mut cycle = 0;
        for (b, n) in self.batches.iter().enumerate() {
            for _ in 0..*n {
                cycle += 1;
                out.push((cycle, b as u32 + 1));
            }
        }
        out
    }

    /// Noise-free RPTs: the fresh cell plus one after every batch.
    pub fn rpts(&self, cell: &CellSpec) -> Vec<RptRecord> {
        let mut cycle = 0;
        let mut out = vec![RptRecord {
            cell_id: cell.cell_id.clone(),
            rpt_index: 1,
            preceding_cycle: 0,
            capacity_ah: cell.capacity_ah(0),
        }];
        for (k, n) in self.batches.iter().enumerate() {
            cycle += n;
            out.push(RptRecord {
                cell_id: cell.cell_id.clone(),
                rpt_index: k as u32 + 2,
                preceding_cycle: cycle,
                capacity_ah: cell.capacity_ah(cycle),
            });
        }
        out
    }
}

/// A planted acceleration step, measured on the noise-free series with the
/// detector's own baseline and plateau definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPeak {
    /// Index within the discharge phase.
    pub index: usize,
    pub delta_i: f64,
    pub delta_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTruth {
    pub cycle: u32,
    pub batch: u32,
    #[serde(rename = "capacity_Ah")]
    pub capacity_ah: f64,
    pub resistance_ohm: f64,
    pub phases: PhaseBoundaries,
    pub peaks: Vec<PlantedPeak>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCycle {
    pub record: CycleRecord,
    pub truth: CycleTruth,
}

/// Per-cycle random stream: independent of run order and thread count.
pub fn cycle_rng(campaign_seed: u64, cell_ordinal: usize, cycle: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(campaign_seed ^ cell_ordinal as u64);
    rng.set_stream(u64::from(cycle));
    rng
}

struct Trace {
    time: Vec<f64>,
    v_clean: Vec<f64>,
    i_clean: Vec<f64>,
    soc: Vec<f64>,
    dt: f64,
}

impl Trace {
    fn push(&mut self, v: f64, i: f64, soc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(Error::Simulation(format!(
                "state of charge {soc:.4} left [0, 1] at t = {} s",
                self.time.len() as f64 * self.dt
            )));
        }
        self.time.push(self.time.len() as f64 * self.dt);
        self.v_clean.push(v);
        self.i_clean.push(i);
        self.soc.push(soc);
        Ok(())
    }

    fn len(&self) -> usize {
        self.time.len()
    }
}

fn phase_guard(steps: usize, dt: f64, phase: Phase) -> Result<()> {
    if steps as f64 * dt > MAX_PHASE_S {
        return Err(Error::Simulation(format!("{phase} did not terminate")));
    }
    Ok(())
}

/// Simulates one aging cycle. `cycle` counts completed aging cycles at the
/// end of this one, so cycle 1 runs on a cell with one cycle of fade.
pub fn simulate_cycle(
    cell: &CellSpec,
    ocv: &OcvModel,
    protocol: &Protocol,
    dt_s: f64,
    cycle: u32,
    batch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedCycle> {
    let q = cell.capacity_ah(cycle);
    let r = cell.resistance_ohm(cycle);
    let q_nom = cell.nominal_capacity_ah;
    let dsoc = |i: f64| -i * dt_s / 3600.0 / q;
    let mut tr = Trace {
        time: Vec::new(),
        v_clean: Vec::new(),
        i_clean: Vec::new(),
        soc: Vec::new(),
        dt: dt_s,
    };
    let mut soc = protocol.soc_min;

    let i_a = -cell.cc_a_rate * q_nom;
    let i_b = -protocol.cc_b_rate * q_nom;
    let mut steps = 0;
    loop {
        let base = ocv.charge.eval(soc) - r * i_a;
        let extra = cell
            .impedance_band
            .as_ref()
            .map_or(0.0, |b| b.extra_ohm(base, cycle));
        let v = base - extra * i_a;
        if v >= protocol.cc_a_end_v {
            break;
        }
        tr.push(v, i_a, soc)?;
        soc += dsoc(i_a);
        steps += 1;
        phase_guard(steps, dt_s, Phase::CcA)?;
    }
    let cc_a_end = tr.len();

    let mut t = 0.0;
    loop {
        let i = i_a * (-t / cell.tau_cv_s).exp();
        if i.abs() <= i_b.abs() {
            break;
        }
        tr.push(protocol.cc_a_end_v, i, soc)?;
        soc += dsoc(i);
        t += dt_s;
        phase_guard((t / dt_s) as usize, dt_s, Phase::Cv4V0)?;
    }
    let cv0_end = tr.len();

    steps = 0;
    loop {
        let v = ocv.charge.eval(soc) - r * i_b;
        if v >= protocol.cc_b_end_v {
            break;
        }
        tr.push(v, i_b, soc)?;
        soc += dsoc(i_b);
        steps += 1;
        phase_guard(steps, dt_s, Phase::CcB)?;
    }
    let cc_b_end = tr.len();

    t = 0.0;
    loop {
        let i = i_b * (-t / cell.tau_cv_s).exp();
        if i.abs() < protocol.cutoff_a {
            break;
        }
        tr.push(protocol.cc_b_end_v, i, soc)?;
        soc += dsoc(i);
        t += dt_s;
        phase_guard((t / dt_s) as usize, dt_s, Phase::Cv4V2)?;
    }
    let cv2_end = tr.len();

    let template = DriveTemplate::udds();
    let mut onsets = Vec::new();
    let mut prev_j = usize::MAX;
    steps = 0;
    loop {
        let (j, c) = template.at(steps as f64 * dt_s);
        let i = c * q_nom;
        if soc + dsoc(i) < protocol.soc_min {
            break;
        }
        if j != prev_j && template.onsets.binary_search(&j).is_ok() {
            onsets.push(steps);
        }
        prev_j = j;
        tr.push(ocv.discharge.eval(soc) - r * i, i, soc)?;
        soc += dsoc(i);
        steps += 1;
        phase_guard(steps, dt_s, Phase::Discharge)?;
    }
    let n = tr.len();
    if n == cv2_end {
        return Err(Error::Simulation("discharge is empty".into()));
    }
    let phases = PhaseBoundaries::from_ends([cc_a_end, cv0_end, cc_b_end, cv2_end, n]);

    let peaks = planted_peaks(
        &tr.v_clean[cv2_end..],
        &tr.i_clean[cv2_end..],
        &onsets,
        &PeakConfig::default(),
    );

    let mut voltage = tr.v_clean.clone();
    for a in cell.anomalies.iter().filter(|a| a.cycles.contains(&cycle)) {
        let range = phases.range(a.phase).unwrap_or(0..0);
        let len = range.len() as f64;
        let trigger = match a.start_v {
            Some(v0) => range.clone().find(|&k| tr.v_clean[k] >= v0),
            None => Some(range.start),
        };
        let Some(trigger) = trigger else { continue };
        for k in range.clone() {
            let frac = (k - range.start) as f64 / len;
            if k >= trigger && frac >= a.start_frac && frac < a.end_frac {
                voltage[k] += a.offset_v;
            }
        }
    }
    let mut current = tr.i_clean.clone();
    if cell.sigma_v > 0.0 || cell.sigma_i > 0.0 {
        for (v, i) in voltage.iter_mut().zip(current.iter_mut()) {
            let zv: f64 = StandardNormal.sample(rng);
            let zi: f64 = StandardNormal.sample(rng);
            *v += cell.sigma_v * zv;
            *i += cell.sigma_i * zi;
        }
    }

    let raw = SampleSeries::with_soc(tr.time, voltage, current, Some(tr.soc))?;
    Ok(SimulatedCycle {
        record: CycleRecord {
            meta: CycleMeta {
                cell_id: cell.cell_id.clone(),
                cycle_index: cycle,
                batch_index: batch,
                cc_a_rate: cell.cc_a_rate,
            },
            raw,
            phases: None,
        },
        truth: CycleTruth {
            cycle,
            batch,
            capacity_ah: q,
            resistance_ohm: r,
            phases,
            peaks,
        },
    })
}

fn planted_peaks(v: &[f64], i: &[f64], onsets: &[usize], cfg: &PeakConfig) -> Vec<PlantedPeak> {
    let (bl, hold) = (cfg.baseline_len, cfg.hold_min);
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    onsets
        .iter()
        .filter(|&&k| k >= bl && k + hold <= v.len())
        .map(|&k| PlantedPeak {
            index: k,
            delta_i: mean(&i[k..k + hold]) - mean(&i[k - bl..k]),
            delta_v: mean(&v[k - bl..k]) - v[k..k + hold].iter().copied().fold(f64::INFINITY, f64::min),
        })
        .collect()
}

/// Ground truth of one simulated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLedger {
    pub cell_id: String,
    pub cc_a_rate: f64,
    #[serde(rename = "nominal_capacity_Ah")]
    pub nominal_capacity_ah: f64,
    pub rpts: Vec<RptRecord>,
    pub cycles: Vec<CycleTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignLedger {
    pub seed: u64,
    pub dt_s: f64,
    pub cells: Vec<CellLedger>,
}

/// Runs the whole campaign, handing every cycle to `sink` as soon as it is
/// generated so that nothing but the ledger is kept in memory. Cells run in
/// parallel; cycles of one cell arrive in order.
pub fn simulate_campaign<F>(spec: &CampaignSpec, sink: F) -> Result<CampaignLedger>
where
    F: Fn(&CellSpec, SimulatedCycle) -> Result<()> + Sync,
{
    spec.validate()?;
    let schedule = spec.schedule();
    let cells: Vec<CellLedger> = spec
        .cells
        .par_iter()
        .enumerate()
        .map(|(ordinal, cell)| {
            let ocv = OcvModel::new(cell.hysteresis_scale)?;
            let mut truths = Vec::with_capacity(schedule.len());
            for &(cycle, batch) in &schedule {
                let mut rng = cycle_rng(spec.seed, ordinal, cycle);
                let sim = simulate_cycle(cell, &ocv, &spec.protocol, spec.dt_s, cycle, batch, &mut rng)
                    .map_err(|e| Error::Simulation(format!("cell {} cycle {cycle}: {e}", cell.cell_id)))?;
                truths.push(sim.truth.clone());
                sink(cell, sim)?;
            }
            Ok(CellLedger {
                cell_id: cell.cell_id.clone(),
                cc_a_rate: cell.cc_a_rate,
                nominal_capacity_ah: cell.nominal_capacity_ah,
                rpts: spec.rpts(cell),
                cycles: truths,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CampaignLedger {
        seed: spec.seed,
        dt_s: spec.dt_s,
        cells,
    })
}

/// Simulates the campaign and extracts indicators cycle by cycle without
/// touching the disk. Rows are sorted by (cell, cycle).
pub fn extract_campaign(
    spec: &CampaignSpec,
    config: &ToolkitConfig,
) -> Result<(Vec<CycleIndicators>, CampaignLedger)> {
    let curves: Vec<OcvCurve> = spec
        .cells
        .iter()
        .map(|c| OcvModel::new(c.hysteresis_scale)?.curve(OcvDirection::Charge, OCV_POINTS))
        .collect::<Result<_>>()?;
    let rows = Mutex::new(Vec::new());
    let ledger = simulate_campaign(spec, |cell, sim| {
        let k = spec.cells.iter().position(|c| c.cell_id == cell.cell_id).unwrap_or(0);
        let ctx = ExtractContext {
            config,
            nominal_capacity_ah: cell.nominal_capacity_ah,
            ocv_charge: Some(&curves[k]),
        };
        let ex = extract_cycle(&sim.record, &ctx);
        rows.lock().expect("indicator sink").push(ex.indicators);
        Ok(())
    })?;
    let mut rows = rows.into_inner().expect("indicator sink");
    rows.sort_by(|a, b| (&a.cell_id, a.cycle).cmp(&(&b.cell_id, b.cycle)));
    Ok((rows, ledger))
}

/// Feature matrix of a simulated campaign, using the ledger's RPTs as
/// capacity anchors.
pub fn campaign_features(
    indicators: &[CycleIndicators],
    ledger: &CampaignLedger,
    outlier_decades: f64,
) -> Result<FeatureMatrix> {
    let rpts: Vec<RptRecord> = ledger.cells.iter().flat_map(|c| c.rpts.iter().cloned()).collect();
    assemble_features(indicators, &rpts, &BTreeMap::new(), outlier_decades)
}
