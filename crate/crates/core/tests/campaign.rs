use std::fs;

use proptest::prelude::*;
use tempfile::TempDir;

use sohkit::io::{self, IngestOptions, Manifest};
use sohkit::pipeline::{extract_parallel, ExtractContext};
use sohkit::preprocessing::assemble_features;
use sohkit::simulator::{campaign_features, extract_campaign, CampaignSpec, CellSpec, Protocol};
use sohkit::{OcvDirection, ToolkitConfig};

fn spec(batches: Vec<u32>, rates: &[f64]) -> CampaignSpec {
    let cells = rates
        .iter()
        .enumerate()
        .map(|(k, r)| CellSpec {
            fade_ah_per_cycle: 0.004,
            r_growth_ohm_per_cycle: 1e-5,
            sigma_v: 1e-3,
            sigma_i: 1e-3,
            ..CellSpec::new(&format!("C{k}"), *r)
        })
        .collect();
    CampaignSpec {
        seed: 11,
        dt_s: 1.0,
        batches,
        cells,
        protocol: Protocol::default(),
    }
}

#[test]
fn one_cell_three_batches() {
    let dir = TempDir::new().unwrap();
    let ledger = io::write_campaign(&spec(vec![2, 2, 2], &[0.5]), dir.path()).unwrap();
    let files = fs::read_dir(dir.path().join("cycles/C0")).unwrap().count();
    assert_eq!(files, 6);
    let rpts = io::read_rpt_csv(&dir.path().join("rpt.csv")).unwrap();
    assert_eq!(rpts.len(), 4);
    assert_eq!(rpts.iter().map(|r| r.preceding_cycle).collect::<Vec<_>>(), [0, 2, 4, 6]);
    assert_eq!(ledger.cells[0].rpts, rpts);
}

#[test]
fn table_one_rates_reach_the_manifest() {
    let dir = TempDir::new().unwrap();
    let rates = [0.25, 0.5, 0.5, 0.25, 1.0];
    io::write_campaign(&spec(vec![1], &rates), dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let got: Vec<f64> = m.cycles.iter().map(|c| c.cc_a_rate).collect();
    assert_eq!(got, rates);
}

#[test]
fn files_on_disk_give_the_in_memory_indicators() {
    let dir = TempDir::new().unwrap();
    let s = spec(vec![3, 3], &[0.25, 1.0]);
    io::write_campaign(&s, dir.path()).unwrap();
    let config = ToolkitConfig::default();
    let (memory, ledger) = extract_campaign(&s, &config).unwrap();

    let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let mut from_disk = Vec::new();
    for cell in manifest.cells() {
        let entries: Vec<_> = manifest.cycles.iter().filter(|c| c.cell_id == cell).collect();
        let curve = io::read_ocv_csv(
            &io::ocv_path(&dir.path().join("ocv"), &cell, OcvDirection::Charge),
            OcvDirection::Charge,
        )
        .unwrap();
        let ctx = ExtractContext {
            config: &config,
            nominal_capacity_ah: config.cell.nominal_capacity_ah,
            ocv_charge: Some(&curve),
        };
        let out = extract_parallel(
            &entries,
            2,
            |e| (e.cell_id.clone(), e.cycle_index, e.batch_index),
            |e| {
                let c = manifest.read_cycle(e, &IngestOptions::default())?;
                Ok((c.record, e.nominal_capacity_ah.unwrap()))
            },
            &ctx,
        )
        .unwrap();
        from_disk.extend(out.into_iter().map(|(ex, err)| {
            assert!(err.is_none());
            ex.indicators
        }));
    }
    assert_eq!(from_disk, memory);

    let rpts = io::read_rpt_csv(&dir.path().join("rpt.csv")).unwrap();
    let a = assemble_features(&from_disk, &rpts, &Default::default(), 1.0).unwrap();
    let b = campaign_features(&memory, &ledger, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn feature_table_round_trip_keeps_values() {
    let dir = TempDir::new().unwrap();
    let s = spec(vec![4], &[0.5, 0.5]);
    let (rows, ledger) = extract_campaign(&s, &ToolkitConfig::default()).unwrap();
    let m = campaign_features(&rows, &ledger, 1.0).unwrap();
    let path = dir.path().join("f.csv");
    io::write_features_csv(&path, &m).unwrap();
    let back = io::read_features_csv(&path).unwrap();
    assert_eq!(back.rows.len(), m.rows.len());
    for (a, b) in back.rows.iter().zip(&m.rows) {
        assert_eq!((a.values, a.q_ah, a.q_loss_pct), (b.values, b.q_ah, b.q_loss_pct));
    }
    for (cell, q) in &m.q_fresh_ah {
        assert!((back.q_fresh_ah[cell] - q).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn true_capacity_is_linear_in_cycle(fade in 0.0f64..0.01, q in 2.0f64..6.0, i in 0u32..1000, j in 0u32..1000) {
        let cell = CellSpec { fade_ah_per_cycle: fade, nominal_capacity_ah: q, ..CellSpec::new("X", 0.5) };
        let slope = (cell.capacity_ah(j) - cell.capacity_ah(i)) / (f64::from(j) - f64::from(i));
        if i != j {
            prop_assert!((slope + fade).abs() < 1e-9);
        }
        prop_assert_eq!(cell.capacity_ah(0), q);
    }

    #[test]
    fn schedule_has_one_rpt_per_batch(batches in proptest::collection::vec(1u32..5, 1..6)) {
        let s = spec(batches.clone(), &[0.5]);
        let rpts = s.rpts(&s.cells[0]);
        prop_assert_eq!(rpts.len(), batches.len() + 1);
        let sched = s.schedule();
        prop_assert_eq!(sched.len() as u32, batches.iter().sum::<u32>());
        let ends: Vec<u32> = rpts.iter().skip(1).map(|r| r.preceding_cycle).collect();
        let mut acc = 0;
        let want: Vec<u32> = batches.iter().map(|b| { acc += b; acc }).collect();
        prop_assert_eq!(ends, want);
    }
}
