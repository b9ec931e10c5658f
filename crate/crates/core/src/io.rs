//! On-disk formats: cycle CSVs, the cycle manifest, RPT and OCV tables, and
//! every table or JSON document the pipeline writes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{CorrelationEntry, SweepTable};
use crate::error::{Error, Result};
use crate::estimation::{EvaluationReport, GridSearch, RegressionModel};
use crate::model::{CycleMeta, CycleRecord, OcvCurve, OcvDirection, PhaseBoundaries, RptRecord, SampleSeries};
use crate::pipeline::{CycleIndicators, Indicator};
use crate::preprocessing::{Feature, FeatureMatrix, FeatureRow};
use crate::simulator::{simulate_campaign, CampaignLedger, CampaignSpec, OcvModel, OCV_POINTS};

/// Version of the file formats written by this crate.
pub const SCHEMA_VERSION: &str = "1.0";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    if e.is_io_error() {
        if let csv::ErrorKind::Io(source) = e.into_kind() {
            return Error::io(path, source);
        }
        unreachable!("is_io_error implies an io kind");
    }
    match line {
        Some(line) => Error::Parse {
            line,
            message: format!("{}: {e}", path.display()),
        },
        None => Error::format(path, e.to_string()),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(create(path)?))
}

fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), num)
}

/// Column positions of `required` names in `headers`; a missing name is a
/// schema error naming that column.
fn columns(path: &Path, headers: &csv::StringRecord, required: &[&str]) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.trim() == *name).ok_or_else(|| {
                Error::Schema(format!("{}: missing required column '{name}'", path.display()))
            })
        })
        .collect()
}

fn field(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
    let line = rec.position().map_or(0, |p| p.line() as usize);
    let text = rec.get(col).unwrap_or("").trim();
    text.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("{}: column '{name}' holds '{text}', not a number", path.display()),
    })
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source)
}

// ---------------------------------------------------------------- cycles

/// Ingestion switches.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    /// Flip the current sign for data logged with charging positive.
    pub invert_current: bool,
    /// Accept repeated timestamps instead of rejecting the file.
    pub allow_duplicate_time: bool,
    /// Plausible voltage band; samples outside are flagged, not dropped.
    pub voltage_range: [f64; 2],
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            invert_current: false,
            allow_duplicate_time: false,
            voltage_range: [0.5, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFlag {
    /// 1-based data row.
    pub row: usize,
    pub column: String,
    pub value: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestedCycle {
    pub record: CycleRecord,
    pub flags: Vec<SampleFlag>,
}

/// Parses a cycle CSV (`time_s,voltage_V,current_A[,soc]`) from any reader.
/// `origin` only labels error messages.
pub fn parse_cycle_csv<R: Read>(
    source: R,
    origin: &Path,
    meta: CycleMeta,
    phases: Option<PhaseBoundaries>,
    opts: &IngestOptions,
) -> Result<IngestedCycle> {
    let mut rdr = reader(source);
    let headers = rdr.headers().map_err(|e| csv_error(origin, e))?.clone();
    let cols = columns(origin, &headers, &["time_s", "voltage_V", "current_A"])?;
    let soc_col = headers.iter().position(|h| h.trim() == "soc");
    let (mut time, mut voltage, mut current) = (Vec::new(), Vec::new(), Vec::new());
    let mut soc = soc_col.map(|_| Vec::new());
    let mut flags = Vec::new();
    let sign = if opts.invert_current { -1.0 } else { 1.0 };
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(origin, e))?;
        let row = k + 1;
        let t = field(origin, &rec, cols[0], "time_s")?;
        let v = field(origin, &rec, cols[1], "voltage_V")?;
        let i = field(origin, &rec, cols[2], "current_A")?;
        for (x, name) in [(t, "time_s"), (v, "voltage_V"), (i, "current_A")] {
            if !x.is_finite() {
                return Err(Error::Parse {
                    line: rec.position().map_or(0, |p| p.line() as usize),
                    message: format!("{}: non-finite {name}", origin.display()),
                });
            }
        }
        if let Some(&prev) = time.last() {
            if t < prev || (t == prev && !opts.allow_duplicate_time) {
                let what = if t < prev { "goes backwards" } else { "repeats" };
                return Err(Error::Integrity {
                    row,
                    message: format!("{}: time {what} ({prev} s then {t} s)", origin.display()),
                });
            }
        }
        let [lo, hi] = opts.voltage_range;
        if !(lo..=hi).contains(&v) {
            flags.push(SampleFlag {
                row,
                column: "voltage_V".into(),
                value: v,
                reason: format!("outside [{lo}, {hi}] V"),
            });
        }
        if let (Some(col), Some(s)) = (soc_col, soc.as_mut()) {
            let x = field(origin, &rec, col, "soc")?;
            if !(0.0..=1.0).contains(&x) {
                flags.push(SampleFlag {
                    row,
                    column: "soc".into(),
                    value: x,
                    reason: "outside [0, 1]".into(),
                });
            }
            s.push(x);
        }
        time.push(t);
        voltage.push(v);
        current.push(sign * i);
    }
    if time.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", origin.display())));
    }
    let raw = SampleSeries::with_soc(time, voltage, current, soc)?;
    if let Some(p) = &phases {
        p.validate(raw.len())
            .map_err(|e| Error::Schema(format!("{}: {e}", origin.display())))?;
    }
    Ok(IngestedCycle {
        record: CycleRecord { meta, raw, phases },
        flags,
    })
}

pub fn read_cycle_csv(
    path: &Path,
    meta: CycleMeta,
    phases: Option<PhaseBoundaries>,
    opts: &IngestOptions,
) -> Result<IngestedCycle> {
    parse_cycle_csv(open(path)?, path, meta, phases, opts)
}

/// Writes a cycle CSV. Values use the shortest representation that parses
/// back to the same bits.
pub fn write_cycle<W: Write>(out: W, series: &SampleSeries) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    match &series.soc {
        Some(_) => writeln!(w, "time_s,voltage_V,current_A,soc")?,
        None => writeln!(w, "time_s,voltage_V,current_A")?,
    }
    for k in 0..series.len() {
        write!(w, "{},{},{}", series.time[k], series.voltage[k], series.current[k])?;
        if let Some(s) = &series.soc {
            write!(w, ",{}", s[k])?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_cycle_csv(path: &Path, series: &SampleSeries) -> Result<()> {
    let f = create(path)?;
    write_cycle(f, series).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleEntry {
    pub cell_id: String,
    pub cycle_index: u32,
    pub batch_index: u32,
    pub cc_a_rate: f64,
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<PhaseBoundaries>,
    #[serde(default, rename = "nominal_capacity_Ah", skip_serializing_if = "Option::is_none")]
    pub nominal_capacity_ah: Option<f64>,
}

impl CycleEntry {
    pub fn meta(&self) -> CycleMeta {
        CycleMeta {
            cell_id: self.cell_id.clone(),
            cycle_index: self.cycle_index,
            batch_index: self.batch_index,
            cc_a_rate: self.cc_a_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocklistEntry {
    pub cell_id: String,
    pub exclude_features: Vec<String>,
}

/// The cycle manifest: one entry per cycle file plus per-cell feature
/// blocklists. Relative file paths are resolved against `dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub dir: PathBuf,
    pub cycles: Vec<CycleEntry>,
    pub blocklist: BTreeMap<String, Vec<Feature>>,
}

impl Manifest {
    pub fn parse(text: &str, dir: &Path, origin: &Path) -> Result<Self> {
        let values: Vec<serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("{}: {e}", origin.display())))?;
        let mut out = Manifest {
            dir: dir.to_path_buf(),
            ..Manifest::default()
        };
        for (k, v) in values.into_iter().enumerate() {
            let bad = |e: serde_json::Error| Error::Schema(format!("{} entry {k}: {e}", origin.display()));
            if v.get("exclude_features").is_some() {
                let b: BlocklistEntry = serde_json::from_value(v).map_err(bad)?;
                let feats = b
                    .exclude_features
                    .iter()
                    .map(|s| s.parse::<Feature>())
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Schema(format!("{} entry {k}: {e}", origin.display())))?;
                out.blocklist.entry(b.cell_id).or_default().extend(feats);
            } else {
                let c: CycleEntry = serde_json::from_value(v).map_err(bad)?;
                if !(c.cc_a_rate > 0.0) {
                    return Err(Error::Schema(format!(
                        "{} entry {k}: cc_a_rate must be positive",
                        origin.display()
                    )));
                }
                out.cycles.push(c);
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &out.cycles {
            if !seen.insert((&c.cell_id, c.cycle_index)) {
                return Err(Error::Schema(format!(
                    "{}: cell {} cycle {} listed twice",
                    origin.display(),
                    c.cell_id,
                    c.cycle_index
                )));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<serde_json::Value> = self
            .cycles
            .iter()
            .map(|c| serde_json::to_value(c).expect("manifest entry serializes"))
            .collect();
        for (cell, feats) in &self.blocklist {
            let b = BlocklistEntry {
                cell_id: cell.clone(),
                exclude_features: feats.iter().map(|f| f.name().to_string()).collect(),
            };
            entries.push(serde_json::to_value(b).expect("blocklist serializes"));
        }
        write_json(path, &entries)
    }

    pub fn path_of(&self, entry: &CycleEntry) -> PathBuf {
        if entry.file.is_absolute() {
            entry.file.clone()
        } else {
            self.dir.join(&entry.file)
        }
    }

    pub fn read_cycle(&self, entry: &CycleEntry, opts: &IngestOptions) -> Result<IngestedCycle> {
        read_cycle_csv(&self.path_of(entry), entry.meta(), entry.phases.clone(), opts)
    }

    pub fn cells(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.cycles.iter().map(|c| &c.cell_id).collect();
        set.into_iter().cloned().collect()
    }

    pub fn blocked(&self, cell: &str) -> &[Feature] {
        self.blocklist.get(cell).map_or(&[], Vec::as_slice)
    }
}

// ---------------------------------------------------------------- RPT, OCV

pub fn read_rpt_csv(path: &Path) -> Result<Vec<RptRecord>> {
    let mut rdr = reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    columns(path, &headers, &["cell_id", "rpt_index", "preceding_cycle", "capacity_Ah"])?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let r: RptRecord = rec.map_err(|e| csv_error(path, e))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_rpt_csv(path: &Path, rpts: &[RptRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["cell_id", "rpt_index", "preceding_cycle", "capacity_Ah"])
        .map_err(|e| csv_error(path, e))?;
    for r in rpts {
        w.write_record([
            r.cell_id.clone(),
            r.rpt_index.to_string(),
            r.preceding_cycle.to_string(),
            num(r.capacity_ah),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

/// RPT rows grouped by cell.
pub fn rpts_by_cell(rpts: &[RptRecord]) -> BTreeMap<String, Vec<RptRecord>> {
    let mut out: BTreeMap<String, Vec<RptRecord>> = BTreeMap::new();
    for r in rpts {
        out.entry(r.cell_id.clone()).or_default().push(r.clone());
    }
    out
}

pub fn read_ocv_csv(path: &Path, direction: OcvDirection) -> Result<OcvCurve> {
    let mut rdr = reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = columns(path, &headers, &["soc", "ocv_V"])?;
    let (mut soc, mut ocv) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        soc.push(field(path, &rec, cols[0], "soc")?);
        ocv.push(field(path, &rec, cols[1], "ocv_V")?);
    }
    OcvCurve::new(direction, soc, ocv).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_ocv_csv(path: &Path, curve: &OcvCurve) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["soc", "ocv_V"]).map_err(|e| csv_error(path, e))?;
    for (s, v) in curve.soc.iter().zip(&curve.ocv) {
        w.write_record([num(*s), num(*v)]).map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

/// `<dir>/<cell>_charge.csv` or `<dir>/<cell>_discharge.csv`.
pub fn ocv_path(dir: &Path, cell: &str, direction: OcvDirection) -> PathBuf {
    let tag = match direction {
        OcvDirection::Charge => "charge",
        OcvDirection::Discharge => "discharge",
    };
    dir.join(format!("{cell}_{tag}.csv"))
}

// ---------------------------------------------------------------- indicators

const INDICATOR_COLUMNS: [(&str, Indicator); 6] = [
    ("P_autocorr_W2", Indicator::PAutocorr),
    ("R_ohm", Indicator::R),
    ("Z_chg_ohm", Indicator::ZChg),
    ("Z_chg2_ohm", Indicator::ZChg2),
    ("E_ch_J", Indicator::ECh),
    ("E_dis_J", Indicator::EDis),
];

pub fn write_indicators_csv(path: &Path, rows: &[CycleIndicators]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["cell_id", "cycle", "batch"];
    header.extend(INDICATOR_COLUMNS.iter().map(|(n, _)| *n));
    header.push("valid_mask");
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![r.cell_id.clone(), r.cycle.to_string(), r.batch.to_string()];
        rec.extend(INDICATOR_COLUMNS.iter().map(|(_, i)| opt(r.get(*i))));
        rec.push(r.valid_mask());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

pub fn read_indicators_csv(path: &Path) -> Result<Vec<CycleIndicators>> {
    let mut rdr = reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut names = vec!["cell_id", "cycle", "batch"];
    names.extend(INDICATOR_COLUMNS.iter().map(|(n, _)| *n));
    let cols = columns(path, &headers, &names)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let cycle = int_field(path, &rec, cols[1], "cycle")?;
        let batch = int_field(path, &rec, cols[2], "batch")?;
        let mut row = CycleIndicators::empty(rec.get(cols[0]).unwrap_or(""), cycle, batch);
        for (k, (name, ind)) in INDICATOR_COLUMNS.iter().enumerate() {
            let v = field(path, &rec, cols[3 + k], name)?;
            row.set(*ind, Some(v));
        }
        out.push(row);
    }
    Ok(out)
}

fn int_field(path: &Path, rec: &csv::StringRecord, col: usize, name: &str) -> Result<u32> {
    let text = rec.get(col).unwrap_or("").trim();
    text.parse().map_err(|_| Error::Parse {
        line: rec.position().map_or(0, |p| p.line() as usize),
        message: format!("{}: column '{name}' holds '{text}', not a cycle number", path.display()),
    })
}

// ---------------------------------------------------------------- features

pub fn write_features_csv(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["cell_id", "cycle"];
    header.extend(Feature::ALL.iter().map(|f| f.name()));
    header.extend(["Q_Ah", "Q_loss_pct"]);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in &matrix.rows {
        let mut rec = vec![r.cell_id.clone(), r.cycle.to_string()];
        rec.extend(Feature::ALL.iter().map(|f| opt(r.get(*f))));
        rec.extend([num(r.q_ah), num(r.q_loss_pct)]);
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

/// Reads a feature matrix. Fresh capacities are recovered from each cell's
/// first row as `Q / (1 - loss / 100)`.
pub fn read_features_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut rdr = reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut names = vec!["cell_id", "cycle"];
    names.extend(Feature::ALL.iter().map(|f| f.name()));
    names.extend(["Q_Ah", "Q_loss_pct"]);
    let cols = columns(path, &headers, &names)?;
    let mut m = FeatureMatrix::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let cell = rec.get(cols[0]).unwrap_or("").to_string();
        let mut values = [None; 5];
        for k in 0..5 {
            let v = field(path, &rec, cols[2 + k], Feature::ALL[k].name())?;
            values[k] = Some(v).filter(|v| v.is_finite());
        }
        let q_ah = field(path, &rec, cols[7], "Q_Ah")?;
        let q_loss_pct = field(path, &rec, cols[8], "Q_loss_pct")?;
        m.q_fresh_ah
            .entry(cell.clone())
            .or_insert(q_ah / (1.0 - q_loss_pct / 100.0));
        m.rows.push(FeatureRow {
            cell_id: cell,
            cycle: int_field(path, &rec, cols[1], "cycle")?,
            batch: 0,
            values,
            q_ah,
            q_loss_pct,
        });
    }
    m.rows.sort_by(|a, b| (&a.cell_id, a.cycle).cmp(&(&b.cell_id, b.cycle)));
    Ok(m)
}

// ---------------------------------------------------------------- analysis

pub fn write_correlation_csv(path: &Path, entries: &[CorrelationEntry]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scope", "feature", "r", "n"]).map_err(|e| csv_error(path, e))?;
    for e in entries {
        w.write_record([e.scope.clone(), e.feature.name().to_string(), opt(e.r), e.n.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

pub fn write_sweep_csv(path: &Path, table: &SweepTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["v_lo", "v_hi", "r", "n", "flag"]).map_err(|e| csv_error(path, e))?;
    for e in &table.entries {
        w.write_record([num(e.v_lo), num(e.v_hi), opt(e.r), e.n.to_string(), e.flag.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

/// ARMAX order search log, one row per grid point and fold. Timings are
/// left out so reruns are byte-identical.
pub fn write_grid_csv(path: &Path, folds: &[(String, &GridSearch)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["fold", "na", "nb", "nc", "rmse", "selected", "error"])
        .map_err(|e| csv_error(path, e))?;
    for (fold, search) in folds {
        for p in &search.table {
            let o = p.orders;
            w.write_record([
                fold.clone(),
                o.na.to_string(),
                o.nb.to_string(),
                o.nc.to_string(),
                opt(p.rmse),
                (o == search.best).to_string(),
                p.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    finish(path, w)
}

/// Per-cycle estimates followed by `max` and `rmse` summary rows that carry
/// their value in the `ape_pct` column.
pub fn write_evaluation_csv(path: &Path, report: &EvaluationReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["cell_id", "cycle", "Q_true_Ah", "Q_est_Ah", "ape_pct"])
        .map_err(|e| csv_error(path, e))?;
    for k in 0..report.cycles.len() {
        w.write_record([
            report.cell_id.clone(),
            report.cycles[k].to_string(),
            num(report.q_true_ah[k]),
            num(report.q_est_ah[k]),
            num(report.ape_pct[k]),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    for (label, v) in [("max", report.max_ape_pct), ("rmse", report.rmse_pct)] {
        w.write_record([report.cell_id.clone(), label.to_string(), String::new(), String::new(), num(v)])
            .map_err(|e| csv_error(path, e))?;
    }
    finish(path, w)
}

/// Per-cycle estimates of several cells in one table.
pub fn write_tracks_csv(path: &Path, reports: &[EvaluationReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["cell_id", "cycle", "Q_true_Ah", "Q_est_Ah", "ape_pct"])
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        for k in 0..r.cycles.len() {
            w.write_record([
                r.cell_id.clone(),
                r.cycles[k].to_string(),
                num(r.q_true_ah[k]),
                num(r.q_est_ah[k]),
                num(r.ape_pct[k]),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    finish(path, w)
}

/// Reads an evaluation CSV back, recomputing the summary from the rows.
pub fn read_evaluation_csv(path: &Path) -> Result<EvaluationReport> {
    let mut rdr = reader(open(path)?);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = columns(path, &headers, &["cell_id", "cycle", "Q_true_Ah", "Q_est_Ah"])?;
    let (mut cell, mut cycles, mut q, mut est) = (String::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let c = rec.get(cols[1]).unwrap_or("");
        if c == "max" || c == "rmse" {
            continue;
        }
        cell = rec.get(cols[0]).unwrap_or("").to_string();
        cycles.push(int_field(path, &rec, cols[1], "cycle")?);
        q.push(field(path, &rec, cols[2], "Q_true_Ah")?);
        est.push(field(path, &rec, cols[3], "Q_est_Ah")?);
    }
    crate::estimation::evaluate(&cell, &cycles, &q, &est)
}

// ---------------------------------------------------------------- JSON

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// A model file holds one model or, for leave-one-out runs, a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    One(RegressionModel),
    Many(Vec<RegressionModel>),
}

impl ModelFile {
    pub fn models(&self) -> Vec<&RegressionModel> {
        match self {
            ModelFile::One(m) => vec![m],
            ModelFile::Many(v) => v.iter().collect(),
        }
    }
}

pub fn read_models(path: &Path) -> Result<ModelFile> {
    let file: ModelFile = read_json(path)?;
    for m in file.models() {
        m.validate()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    }
    Ok(file)
}

// ---------------------------------------------------------------- campaigns

pub fn cycle_file_name(cell: &str, cycle: u32) -> PathBuf {
    PathBuf::from("cycles").join(cell).join(format!("cycle_{cycle:04}.csv"))
}

/// Simulates a campaign into `out`: cycle files, `manifest.json`, `rpt.csv`,
/// OCV curves under `ocv/`, the spec as run and the ground-truth
/// `ledger.json`.
pub fn write_campaign(spec: &CampaignSpec, out: &Path) -> Result<CampaignLedger> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for cell in &spec.cells {
        let ocv = OcvModel::new(cell.hysteresis_scale)?;
        for dir in [OcvDirection::Charge, OcvDirection::Discharge] {
            write_ocv_csv(&ocv_path(&out.join("ocv"), &cell.cell_id, dir), &ocv.curve(dir, OCV_POINTS)?)?;
        }
    }
    let ledger = simulate_campaign(spec, |cell, sim| {
        let path = out.join(cycle_file_name(&cell.cell_id, sim.truth.cycle));
        write_cycle_csv(&path, &sim.record.raw)
    })?;
    let mut manifest = Manifest::default();
    let mut rpts = Vec::new();
    for (cell, led) in spec.cells.iter().zip(&ledger.cells) {
        for t in &led.cycles {
            manifest.cycles.push(CycleEntry {
                cell_id: cell.cell_id.clone(),
                cycle_index: t.cycle,
                batch_index: t.batch,
                cc_a_rate: cell.cc_a_rate,
                file: cycle_file_name(&cell.cell_id, t.cycle),
                phases: None,
                nominal_capacity_ah: Some(cell.nominal_capacity_ah),
            });
        }
        rpts.extend(led.rpts.iter().cloned());
    }
    manifest.save(&out.join("manifest.json"))?;
    write_rpt_csv(&out.join("rpt.csv"), &rpts)?;
    write_json(&out.join("campaign.json"), spec)?;
    write_json(&out.join("ledger.json"), &ledger)?;
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> CycleMeta {
        CycleMeta {
            cell_id: "A".into(),
            cycle_index: 1,
            batch_index: 1,
            cc_a_rate: 0.5,
        }
    }

    fn parse(text: &str) -> Result<IngestedCycle> {
        parse_cycle_csv(text.as_bytes(), Path::new("t.csv"), meta(), None, &IngestOptions::default())
    }

    #[test]
    fn three_rows() {
        let c = parse("time_s,voltage_V,current_A\n0,3.5,-1\n1,3.6,-1\r\n2,3.7,-1\n").unwrap();
        assert_eq!(c.record.raw.len(), 3);
        assert!(c.flags.is_empty());
        assert_eq!(c.record.raw.voltage, vec![3.5, 3.6, 3.7]);
    }

    #[test]
    fn backwards_time_names_the_row() {
        let mut text = String::from("time_s,voltage_V,current_A\n");
        for k in 0..16 {
            text.push_str(&format!("{k},3.7,1\n"));
        }
        text.push_str("3,3.7,1\n");
        match parse(&text) {
            Err(Error::Integrity { row, .. }) => assert_eq!(row, 17),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("time_s,voltage_V,current_A\n0,3,1\n0,3,1\n"),
            Err(Error::Integrity { row: 2, .. })
        ));
    }

    #[test]
    fn committed_fixture_flags_high_voltage() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/flagged_voltage.csv");
        let c = read_cycle_csv(&path, meta(), None, &IngestOptions::default()).unwrap();
        assert_eq!(c.record.raw.len(), 5);
        assert_eq!(c.flags.len(), 1);
        assert_eq!((c.flags[0].row, c.flags[0].value), (3, 5.6));
    }

    #[test]
    fn bad_input_errors() {
        assert!(matches!(
            parse("time_s,current_A\n0,1\n"),
            Err(Error::Schema(m)) if m.contains("voltage_V")
        ));
        assert!(matches!(
            parse("time_s,voltage_V,current_A\n0,3.5,1\n1,abc,1\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(parse("time_s,voltage_V,current_A\n0,3.5\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn invert_current() {
        let opts = IngestOptions {
            invert_current: true,
            ..IngestOptions::default()
        };
        let c = parse_cycle_csv("time_s,voltage_V,current_A\n0,3.5,2\n".as_bytes(), Path::new("x"), meta(), None, &opts)
            .unwrap();
        assert_eq!(c.record.raw.current, vec![-2.0]);
    }

    #[test]
    fn manifest_entries() {
        let text = r#"[
            {"cell_id": "W7", "cycle_index": 1, "batch_index": 1, "cc_a_rate": 0.5, "file": "a.csv"},
            {"cell_id": "W7", "cycle_index": 2, "batch_index": 1, "cc_a_rate": 0.5, "file": "b.csv",
             "phases": {"CC_A": [0, 2], "CV_4V0": [2, 2], "CC_B": [2, 3], "CV_4V2": [3, 4], "DISCHARGE": [4, 6]}},
            {"cell_id": "W7", "exclude_features": ["dR"]}
        ]"#;
        let m = Manifest::parse(text, Path::new("/data"), Path::new("m.json")).unwrap();
        assert_eq!(m.cycles.len(), 2);
        assert_eq!(m.blocked("W7"), &[Feature::R]);
        assert_eq!(m.path_of(&m.cycles[0]), PathBuf::from("/data/a.csv"));
        assert!(m.cycles[1].phases.is_some());
        let bad = r#"[{"cell_id": "W7", "cycle_index": 1, "batch_index": 1, "file": "a.csv"}]"#;
        assert!(matches!(
            Manifest::parse(bad, Path::new("."), Path::new("m.json")),
            Err(Error::Schema(msg)) if msg.contains("cc_a_rate")
        ));
    }

    #[test]
    fn table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = CycleIndicators::empty("A", 3, 1);
        a.e_ch = Some(1234.5);
        a.r = Some(0.021);
        let p = dir.path().join("ind.csv");
        write_indicators_csv(&p, &[a.clone()]).unwrap();
        assert_eq!(read_indicators_csv(&p).unwrap(), vec![a]);

        let rpts = vec![RptRecord {
            cell_id: "A".into(),
            rpt_index: 1,
            preceding_cycle: 0,
            capacity_ah: 4.85,
        }];
        let p = dir.path().join("rpt.csv");
        write_rpt_csv(&p, &rpts).unwrap();
        assert_eq!(read_rpt_csv(&p).unwrap(), rpts);

        let m = FeatureMatrix {
            rows: vec![FeatureRow {
                cell_id: "A".into(),
                cycle: 1,
                batch: 0,
                values: [Some(0.0), None, Some(-1.5), Some(2.0), None],
                q_ah: 4.0,
                q_loss_pct: 20.0,
            }],
            q_fresh_ah: BTreeMap::from([("A".to_string(), 5.0)]),
        };
        let p = dir.path().join("f.csv");
        write_features_csv(&p, &m).unwrap();
        assert_eq!(read_features_csv(&p).unwrap(), m);
    }

    #[test]
    fn missing_feature_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "cell_id,cycle,dP_autocorr,dR,dZ_norm,dE_dis,Q_Ah,Q_loss_pct\n").unwrap();
        assert!(matches!(read_features_csv(&p), Err(Error::Schema(m)) if m.contains("dE_ch")));
    }

    proptest! {
        #[test]
        fn cycle_csv_round_trip_is_exact(
            rows in prop::collection::vec((-1e3f64..1e3, 0.0f64..5.0, -50.0f64..50.0, 0.0f64..1.0), 1..40),
        ) {
            let mut t = 0.0;
            let mut time = Vec::new();
            for (dt, ..) in &rows {
                t += dt.abs() + 1e-3;
                time.push(t);
            }
            let series = SampleSeries::with_soc(
                time,
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
                Some(rows.iter().map(|r| r.3).collect()),
            ).unwrap();
            let mut buf = Vec::new();
            write_cycle(&mut buf, &series).unwrap();
            let back = parse_cycle_csv(buf.as_slice(), Path::new("x"), meta(), None, &IngestOptions::default()).unwrap();
            prop_assert_eq!(back.record.raw, series);
        }
    }
}
