use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use sohkit::analysis::{correlation_report, window_values, SweepAccumulator, SweepPreset};
use sohkit::estimation::{
    evaluate_model, scenario_splits, train_model, EvaluationReport, ModelSpec, Orders, Scenario, Target, TrainedModel,
};
use sohkit::io::{self, IngestOptions, Manifest, ModelFile};
use sohkit::pipeline::{extract_parallel, ExtractContext};
use sohkit::preprocessing::assemble_features;
use sohkit::segmentation::resolve_phases;
use sohkit::simulator::CampaignSpec;
use sohkit::{
    CycleIndicators, CycleRecord, Error, Feature, FeatureMatrix, Indicator, OcvCurve, OcvDirection, Phase, Result,
    ToolkitConfig,
};

use crate::{
    Cli, Command, CorrelateArgs, EstimateArgs, ExtractArgs, ModelArg, ReportArgs, SimulateArgs, SweepArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Extract(a) => extract(a, &config),
        Command::Correlate(a) => correlate(a, &config),
        Command::Sweep(a) => sweep(a, &config),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate(a),
        Command::Report(a) => report(a),
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut spec: CampaignSpec = io::read_json(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ledger = io::write_campaign(&spec, &a.out)?;
    let cycles: usize = ledger.cells.iter().map(|c| c.cycles.len()).sum();
    info!("simulated {} cells, {cycles} cycles into {}", ledger.cells.len(), a.out.display());
    Ok(())
}

fn ocv_dir(explicit: Option<&PathBuf>, manifest: &Manifest) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| manifest.dir.join("ocv"))
}

/// The cell's charge OCV curve, when a file for it exists.
fn charge_curve(dir: &Path, cell: &str) -> Result<Option<OcvCurve>> {
    let path = io::ocv_path(dir, cell, OcvDirection::Charge);
    if !path.exists() {
        return Ok(None);
    }
    io::read_ocv_csv(&path, OcvDirection::Charge).map(Some)
}

fn ingest(manifest: &Manifest, opts: &IngestOptions, entry: &io::CycleEntry, fallback_ah: f64) -> Result<(CycleRecord, f64)> {
    let cycle = manifest.read_cycle(entry, opts)?;
    for f in &cycle.flags {
        warn!(
            "{} cycle {} row {}: {} = {} {}",
            entry.cell_id, entry.cycle_index, f.row, f.column, f.value, f.reason
        );
    }
    Ok((cycle.record, entry.nominal_capacity_ah.unwrap_or(fallback_ah)))
}

fn extract(a: &ExtractArgs, config: &ToolkitConfig) -> Result<()> {
    let keep: Option<Vec<Indicator>> = a
        .features
        .as_ref()
        .map(|names| names.iter().map(|n| n.parse()).collect::<Result<_>>())
        .transpose()?;
    let manifest = Manifest::load(&a.manifest)?;
    let ocv_dir = ocv_dir(a.ocv_dir.as_ref(), &manifest);
    let opts = IngestOptions {
        invert_current: a.invert_current,
        ..IngestOptions::default()
    };
    let mut rows: Vec<CycleIndicators> = Vec::with_capacity(manifest.cycles.len());
    let mut succeeded = 0usize;
    let mut first_error = None;
    for cell in manifest.cells() {
        let entries: Vec<&io::CycleEntry> = manifest.cycles.iter().filter(|c| c.cell_id == cell).collect();
        let curve = charge_curve(&ocv_dir, &cell)?;
        let ctx = ExtractContext {
            config,
            nominal_capacity_ah: config.cell.nominal_capacity_ah,
            ocv_charge: curve.as_ref(),
        };
        let out = extract_parallel(
            &entries,
            a.jobs,
            |e| (e.cell_id.clone(), e.cycle_index, e.batch_index),
            |e| ingest(&manifest, &opts, e, config.cell.nominal_capacity_ah),
            &ctx,
        )?;
        for (ex, err) in out {
            let ind = ex.indicators;
            match err {
                Some(e) => {
                    warn!("{} cycle {}: {e}", ind.cell_id, ind.cycle);
                    first_error.get_or_insert(e);
                }
                None if ex.phases.is_none() => {
                    warn!("{} cycle {}: {}", ind.cell_id, ind.cycle, ex.notes.join("; "));
                }
                None => succeeded += 1,
            }
            rows.push(ind);
        }
    }
    if succeeded == 0 {
        return Err(first_error.unwrap_or_else(|| Error::Pipeline("no cycle could be segmented".into())));
    }
    if let Some(keep) = &keep {
        for r in &mut rows {
            for ind in Indicator::ALL {
                if !keep.contains(&ind) {
                    r.set(ind, None);
                }
            }
        }
    }
    info!("{succeeded} of {} cycles extracted", rows.len());
    io::write_indicators_csv(&a.out, &rows)?;
    if let (Some(rpt), Some(out)) = (&a.rpt, &a.features_out) {
        let rpts = io::read_rpt_csv(rpt)?;
        let m = assemble_features(&rows, &rpts, &manifest.blocklist, config.preprocessing.outlier_decades)?;
        io::write_features_csv(out, &m)?;
    }
    Ok(())
}

fn correlate(a: &CorrelateArgs, config: &ToolkitConfig) -> Result<()> {
    let matrix = match (&a.matrix, &a.indicators, &a.rpt) {
        (Some(m), _, _) => io::read_features_csv(m)?,
        (None, Some(ind), Some(rpt)) => {
            let blocklist = match &a.manifest {
                Some(p) => Manifest::load(p)?.blocklist,
                None => BTreeMap::new(),
            };
            assemble_features(
                &io::read_indicators_csv(ind)?,
                &io::read_rpt_csv(rpt)?,
                &blocklist,
                config.preprocessing.outlier_decades,
            )?
        }
        _ => return Err(Error::Config("give --matrix, or --indicators with --rpt".into())),
    };
    let features = match &a.features {
        Some(list) => Feature::parse_list(list)?,
        None => Feature::ALL.to_vec(),
    };
    io::write_correlation_csv(&a.out, &correlation_report(&matrix, &features, true))
}

fn sweep(a: &SweepArgs, config: &ToolkitConfig) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let rpts = io::rpts_by_cell(&io::read_rpt_csv(&a.rpt)?);
    let opts = IngestOptions {
        invert_current: a.invert_current,
        ..IngestOptions::default()
    };
    let preset = SweepPreset::for_kind(a.kind.into());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    for cell in manifest.cells() {
        let mut acc = SweepAccumulator::new(a.kind.into(), &preset);
        let entries: Vec<&io::CycleEntry> = manifest.cycles.iter().filter(|c| c.cell_id == cell).collect();
        let values: Vec<(u32, Option<Vec<Option<f64>>>)> = pool.install(|| {
            entries
                .par_iter()
                .map(|e| {
                    let cc_a = ingest(&manifest, &opts, e, config.cell.nominal_capacity_ah).and_then(|(mut rec, q)| {
                        rec.phases = Some(resolve_phases(&rec, q, &config.segmentation)?);
                        rec.phase(Phase::CcA)
                            .ok_or_else(|| Error::Segmentation("no CC-A phase".into()))
                    });
                    match cc_a {
                        Ok(s) => (e.cycle_index, Some(window_values(a.kind.into(), &s, e.cc_a_rate, acc.windows()))),
                        Err(err) => {
                            warn!("{cell} cycle {}: {err}", e.cycle_index);
                            (e.cycle_index, None)
                        }
                    }
                })
                .collect()
        });
        for (cycle, v) in values {
            if let Some(v) = v {
                acc.insert_values(cycle, v);
            }
        }
        let own = rpts
            .get(&cell)
            .ok_or_else(|| Error::Pipeline(format!("cell {cell}: no RPT rows")))?;
        let cycles: BTreeSet<u32> = entries.iter().map(|e| e.cycle_index).collect();
        let capacity = sohkit::preprocessing::augment_capacity(own, &cycles)?;
        let table = acc.finish(&capacity, config.preprocessing.outlier_decades)?;
        if let Some(best) = table.best() {
            info!("{cell}: strongest window [{}, {}] V, r = {:?}", best.v_lo, best.v_hi, best.r);
        }
        io::write_sweep_csv(&a.out_dir.join(format!("{cell}.csv")), &table)?;
    }
    Ok(())
}

fn parse_orders(text: &str) -> Result<Orders> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("orders '{text}' must be three non-negative integers")))?;
    match parts[..] {
        [na, nb, nc] => Ok(Orders::new(na, nb, nc)),
        _ => Err(Error::Config(format!("orders '{text}' must be three non-negative integers"))),
    }
}

fn parse_grid(text: &str) -> Result<Vec<Orders>> {
    let bad = || Error::Config(format!("grid '{text}' must look like lo:hi"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok(Orders::grid(lo, hi))
}

fn model_spec(a: &TrainArgs) -> Result<ModelSpec> {
    Ok(match a.model {
        ModelArg::Lrm => {
            if a.orders.is_some() || a.armax_grid.is_some() {
                return Err(Error::Config("--orders and --armax-grid need --model armax".into()));
            }
            ModelSpec::Lrm
        }
        ModelArg::Armax => match (&a.orders, &a.armax_grid) {
            (Some(o), _) => ModelSpec::Armax(parse_orders(o)?),
            (None, g) => ModelSpec::ArmaxGrid(parse_grid(g.as_deref().unwrap_or("0:3"))?),
        },
    })
}

/// Trains one model per fold of the scenario.
pub fn train_folds(
    matrix: &FeatureMatrix,
    features: &[Feature],
    scenario: &Scenario,
    spec: &ModelSpec,
    target: Target,
) -> Result<Vec<TrainedModel>> {
    let data = matrix.select(features)?;
    let label = scenario.to_string();
    scenario_splits(&data.cells(), scenario)?
        .into_iter()
        .map(|(train_cells, _)| train_model(&data.filter(|r| train_cells.contains(&r.cell_id)), spec, target, &label))
        .collect()
}

fn train(a: &TrainArgs) -> Result<()> {
    let scenario: Scenario = a.scenario.parse()?;
    let features = Feature::parse_list(&a.features)?;
    let target: Target = a.target.parse()?;
    let spec = model_spec(a)?;
    let matrix = io::read_features_csv(&a.matrix)?;
    let trained = train_folds(&matrix, &features, &scenario, &spec, target)?;
    if let Some(log) = &a.grid_log {
        let folds: Vec<(String, &sohkit::estimation::GridSearch)> = trained
            .iter()
            .filter_map(|t| t.grid.as_ref().map(|g| (t.model.trained_on.join("+"), g)))
            .collect();
        if folds.is_empty() {
            warn!("no order search ran, so the grid log is empty");
        }
        io::write_grid_csv(log, &folds)?;
    }
    let mut models: Vec<_> = trained.into_iter().map(|t| t.model).collect();
    let file = match scenario {
        Scenario::SingleTrain(_) => ModelFile::One(models.remove(0)),
        Scenario::LeaveOneOut => ModelFile::Many(models),
    };
    io::write_json(&a.out, &file)
}

/// Evaluates every model on the matrix cells it was not trained on.
pub fn evaluate_file(models: &ModelFile, matrix: &FeatureMatrix) -> Result<Vec<EvaluationReport>> {
    let mut out: BTreeMap<String, EvaluationReport> = BTreeMap::new();
    for model in models.models() {
        let data = matrix.select(&model.features)?;
        let test = data.filter(|r| !model.trained_on.contains(&r.cell_id));
        if test.rows.is_empty() {
            return Err(Error::Config(format!(
                "the matrix has no cell outside [{}]",
                model.trained_on.join(", ")
            )));
        }
        for rep in evaluate_model(model, &test)? {
            if out.contains_key(&rep.cell_id) {
                return Err(Error::Config(format!("cell {} is a test cell of two models", rep.cell_id)));
            }
            out.insert(rep.cell_id.clone(), rep);
        }
    }
    Ok(out.into_values().collect())
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let models = io::read_models(&a.model)?;
    let matrix = io::read_features_csv(&a.matrix)?;
    for rep in evaluate_file(&models, &matrix)? {
        info!("{}: max APE {:.3} %", rep.cell_id, rep.max_ape_pct);
        io::write_evaluation_csv(&a.out_dir.join(format!("{}.csv", rep.cell_id)), &rep)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CellSummary {
    cell_id: String,
    n_cycles: usize,
    max_ape_pct: f64,
    rmse_pct: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    schema_version: &'static str,
    toolkit_version: &'static str,
    cells: Vec<CellSummary>,
    max_ape_pct: f64,
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.eval_dir)
        .map_err(|e| Error::io(&a.eval_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("{}: no evaluation tables", a.eval_dir.display())));
    }
    let reports = paths.iter().map(|p| io::read_evaluation_csv(p)).collect::<Result<Vec<_>>>()?;
    let summary = Summary {
        schema_version: io::SCHEMA_VERSION,
        toolkit_version: env!("CARGO_PKG_VERSION"),
        cells: reports
            .iter()
            .map(|r| CellSummary {
                cell_id: r.cell_id.clone(),
                n_cycles: r.cycles.len(),
                max_ape_pct: r.max_ape_pct,
                rmse_pct: r.rmse_pct,
            })
            .collect(),
        max_ape_pct: reports.iter().map(|r| r.max_ape_pct).fold(0.0, f64::max),
    };
    io::write_json(&a.out, &summary)?;
    if let Some(path) = &a.tracks {
        io::write_tracks_csv(path, &reports)?;
    }
    Ok(())
}
