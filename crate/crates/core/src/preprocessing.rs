//! Outlier removal, incremental features and capacity augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mean, CapacitySeries, RptRecord};
use crate::pipeline::{CycleIndicators, Indicator};

/// Masks entries whose magnitude lies outside `[m / 10^d, m * 10^d]`, where
/// `m` is the mean of the absolute values of the valid entries. Single pass.
pub fn remove_outliers(values: &[Option<f64>], decades: f64) -> Vec<Option<f64>> {
    let abs: Vec<f64> = values.iter().flatten().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return values.to_vec();
    }
    let m = mean(&abs);
    let factor = 10f64.powf(decades);
    let (lo, hi) = (m / factor, m * factor);
    values
        .iter()
        .map(|v| v.filter(|x| (lo..=hi).contains(&x.abs())))
        .collect()
}

/// Subtracts the first valid entry from every valid entry.
pub fn incremental(values: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let base = values
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::Pipeline("incremental feature has no valid entry".into()))?;
    Ok(values.iter().map(|v| v.map(|x| x - base)).collect())
}

/// Divides impedance increments by the fresh-cell impedance.
pub fn normalize_impedance(delta_z: &[Option<f64>], z_fresh: f64) -> Result<Vec<Option<f64>>> {
    if !(z_fresh > 0.0) {
        return Err(Error::Domain(format!(
            "fresh-cell impedance must be positive, got {z_fresh}"
        )));
    }
    Ok(delta_z.iter().map(|v| v.map(|x| x / z_fresh)).collect())
}

/// Per-cycle capacity by linear interpolation between RPT anchors. The
/// capacity before the first aging cycle is taken as the fresh capacity.
pub fn augment_capacity(rpts: &[RptRecord], cycles: &BTreeSet<u32>) -> Result<CapacitySeries> {
    let cell_id = match rpts.first() {
        Some(r) => r.cell_id.clone(),
        None => return Err(Error::Pipeline("no RPT records".into())),
    };
    if rpts.iter().any(|r| r.cell_id != cell_id) {
        return Err(Error::Pipeline("RPT records span more than one cell".into()));
    }
    let mut anchors: Vec<&RptRecord> = rpts.iter().collect();
    anchors.sort_by_key(|r| r.rpt_index);
    if anchors.len() < 2 {
        return Err(Error::Pipeline(format!(
            "cell {cell_id}: at least two RPTs are needed for augmentation"
        )));
    }
    if anchors.windows(2).any(|w| w[1].preceding_cycle <= w[0].preceding_cycle) {
        return Err(Error::Integrity {
            row: 0,
            message: format!("cell {cell_id}: RPT preceding cycles must increase with rpt_index"),
        });
    }
    if let Some(bad) = anchors.iter().find(|r| !(r.capacity_ah > 0.0)) {
        return Err(Error::Domain(format!(
            "cell {cell_id}: RPT {} capacity must be positive",
            bad.rpt_index
        )));
    }
    let first = anchors[0].preceding_cycle;
    let last = anchors[anchors.len() - 1].preceding_cycle;
    let mut capacity_ah = BTreeMap::new();
    for &i in cycles {
        if i < first || i > last {
            return Err(Error::Extrapolation { cycle: i, first, last });
        }
        let j = anchors.partition_point(|r| r.preceding_cycle <= i) - 1;
        let lo = anchors[j];
        let q = if lo.preceding_cycle == i {
            lo.capacity_ah
        } else {
            let hi = anchors[j + 1];
            let w = (i - lo.preceding_cycle) as f64 / (hi.preceding_cycle - lo.preceding_cycle) as f64;
            w * (hi.capacity_ah - lo.capacity_ah) + lo.capacity_ah
        };
        capacity_ah.insert(i, q);
    }
    Ok(CapacitySeries {
        cell_id,
        q_fresh_ah: anchors[0].capacity_ah,
        capacity_ah,
    })
}

/// Incremental predictor columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "dP_autocorr")]
    PAutocorr,
    #[serde(rename = "dR")]
    R,
    #[serde(rename = "dZ_norm")]
    ZNorm,
    #[serde(rename = "dE_ch")]
    ECh,
    #[serde(rename = "dE_dis")]
    EDis,
}

impl Feature {
    pub const ALL: [Feature; 5] = [
        Feature::PAutocorr,
        Feature::R,
        Feature::ZNorm,
        Feature::ECh,
        Feature::EDis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::PAutocorr => "dP_autocorr",
            Feature::R => "dR",
            Feature::ZNorm => "dZ_norm",
            Feature::ECh => "dE_ch",
            Feature::EDis => "dE_dis",
        }
    }

    pub fn indicator(self) -> Indicator {
        match self {
            Feature::PAutocorr => Indicator::PAutocorr,
            Feature::R => Indicator::R,
            Feature::ZNorm => Indicator::ZChg,
            Feature::ECh => Indicator::ECh,
            Feature::EDis => Indicator::EDis,
        }
    }

    fn column(self) -> usize {
        self as usize
    }

    /// Parses a comma-separated list such as `dE_ch,dE_dis`.
    pub fn parse_list(s: &str) -> Result<Vec<Feature>> {
        let list: Vec<Feature> = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::Config("empty feature list".into()));
        }
        Ok(list)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches('d').trim_start_matches("Δ");
        let found = match key.to_ascii_lowercase().as_str() {
            "p_autocorr" | "pautocorr" | "p" => Feature::PAutocorr,
            "r" => Feature::R,
            "z_norm" | "z_chg" | "z" | "z_chg_norm" => Feature::ZNorm,
            "e_ch" | "ech" => Feature::ECh,
            "e_dis" | "edis" => Feature::EDis,
            _ => return Err(Error::Config(format!("unknown feature '{s}'"))),
        };
        Ok(found)
    }
}

/// One cycle of a cell: incremental features (masked entries are `None`)
/// and the capacity target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub cell_id: String,
    pub cycle: u32,
    pub batch: u32,
    pub values: [Option<f64>; 5],
    pub q_ah: f64,
    pub q_loss_pct: f64,
}

impl FeatureRow {
    pub fn get(&self, f: Feature) -> Option<f64> {
        self.values[f.column()]
    }
}

/// Aligned incremental features and capacity for one or more cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    pub rows: Vec<FeatureRow>,
    pub q_fresh_ah: BTreeMap<String, f64>,
}

impl FeatureMatrix {
    pub fn cells(&self) -> Vec<String> {
        self.q_fresh_ah.keys().cloned().collect()
    }

    pub fn for_cell(&self, cell: &str) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.rows.iter().filter(|r| r.cell_id == cell).cloned().collect(),
            q_fresh_ah: self
                .q_fresh_ah
                .iter()
                .filter(|(c, _)| *c == cell)
                .map(|(c, q)| (c.clone(), *q))
                .collect(),
        }
    }

    pub fn merge(parts: impl IntoIterator<Item = FeatureMatrix>) -> FeatureMatrix {
        let mut out = FeatureMatrix::default();
        for p in parts {
            out.rows.extend(p.rows);
            out.q_fresh_ah.extend(p.q_fresh_ah);
        }
        out.rows.sort_by(|a, b| (&a.cell_id, a.cycle).cmp(&(&b.cell_id, b.cycle)));
        out
    }

    /// Rows where every requested feature is valid, reduced to those columns.
    pub fn select(&self, features: &[Feature]) -> Result<DesignSet> {
        if features.is_empty() {
            return Err(Error::Config("no features selected".into()));
        }
        let rows: Vec<DesignRow> = self
            .rows
            .iter()
            .filter_map(|r| {
                let u: Option<Vec<f64>> = features.iter().map(|f| r.get(*f)).collect();
                u.map(|u| DesignRow {
                    cell_id: r.cell_id.clone(),
                    cycle: r.cycle,
                    u,
                    q_ah: r.q_ah,
                    q_loss_pct: r.q_loss_pct,
                })
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::Pipeline(format!(
                "no cycle has all of [{}] valid",
                features.iter().map(|f| f.name()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(DesignSet {
            features: features.to_vec(),
            rows,
            q_fresh_ah: self.q_fresh_ah.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub cell_id: String,
    pub cycle: u32,
    pub u: Vec<f64>,
    pub q_ah: f64,
    pub q_loss_pct: f64,
}

/// Complete-case predictor rows for a fixed feature list.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    pub features: Vec<Feature>,
    pub rows: Vec<DesignRow>,
    pub q_fresh_ah: BTreeMap<String, f64>,
}

impl DesignSet {
    pub fn cells(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().map(|r| &r.cell_id).collect();
        set.into_iter().cloned().collect()
    }

    pub fn filter(&self, keep: impl Fn(&DesignRow) -> bool) -> DesignSet {
        DesignSet {
            features: self.features.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            q_fresh_ah: self.q_fresh_ah.clone(),
        }
    }
}

/// Turns one cell's indicator table into incremental features aligned with
/// its augmented capacity. `blocked` features are masked for the whole cell.
pub fn build_feature_matrix(
    indicators: &[CycleIndicators],
    capacity: &CapacitySeries,
    outlier_decades: f64,
    blocked: &[Feature],
) -> Result<FeatureMatrix> {
    let cell = &capacity.cell_id;
    let mut rows: Vec<&CycleIndicators> = indicators.iter().filter(|r| &r.cell_id == cell).collect();
    if rows.is_empty() {
        return Err(Error::Pipeline(format!("cell {cell}: no indicator rows")));
    }
    rows.sort_by_key(|r| r.cycle);
    let mut columns: Vec<Vec<Option<f64>>> = Vec::with_capacity(5);
    for f in Feature::ALL {
        let raw: Vec<Option<f64>> = if blocked.contains(&f) {
            vec![None; rows.len()]
        } else {
            rows.iter().map(|r| r.get(f.indicator())).collect()
        };
        if raw.iter().all(Option::is_none) {
            columns.push(raw);
            continue;
        }
        let cleaned = remove_outliers(&raw, outlier_decades);
        if cleaned.iter().all(Option::is_none) {
            return Err(Error::Pipeline(format!(
                "cell {cell}: every {} value was masked as an outlier",
                f.indicator()
            )));
        }
        let delta = incremental(&cleaned)?;
        let col = if f == Feature::ZNorm {
            let z_fresh = cleaned.iter().flatten().next().copied().unwrap();
            normalize_impedance(&delta, z_fresh)?
        } else {
            delta
        };
        columns.push(col);
    }
    let mut out = Vec::with_capacity(rows.len());
    for (k, r) in rows.iter().enumerate() {
        let q = capacity.capacity(r.cycle).ok_or_else(|| {
            Error::Pipeline(format!("cell {cell}: no capacity for cycle {}", r.cycle))
        })?;
        let mut values = [None; 5];
        for (c, col) in columns.iter().enumerate() {
            values[c] = col[k];
        }
        out.push(FeatureRow {
            cell_id: cell.clone(),
            cycle: r.cycle,
            batch: r.batch,
            values,
            q_ah: q,
            q_loss_pct: capacity.loss_pct(r.cycle).unwrap(),
        });
    }
    Ok(FeatureMatrix {
        rows: out,
        q_fresh_ah: BTreeMap::from([(cell.clone(), capacity.q_fresh_ah)]),
    })
}

/// Feature matrix of every cell in an indicator table, with capacity taken
/// from that cell's RPT rows.
pub fn assemble_features(
    indicators: &[CycleIndicators],
    rpts: &[RptRecord],
    blocklist: &BTreeMap<String, Vec<Feature>>,
    outlier_decades: f64,
) -> Result<FeatureMatrix> {
    let mut cycles: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in indicators {
        cycles.entry(&r.cell_id).or_default().insert(r.cycle);
    }
    let parts = cycles
        .into_iter()
        .map(|(cell, cycles)| {
            let own: Vec<RptRecord> = rpts.iter().filter(|r| r.cell_id == cell).cloned().collect();
            if own.is_empty() {
                return Err(Error::Pipeline(format!("cell {cell}: no RPT rows")));
            }
            let capacity = augment_capacity(&own, &cycles)?;
            let blocked = blocklist.get(cell).map_or(&[][..], Vec::as_slice);
            build_feature_matrix(indicators, &capacity, outlier_decades, blocked)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix::merge(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn outliers_four_values_cannot_reach_ten_times_the_mean() {
        // mean 7.0, band [0.7, 70]
        let out = remove_outliers(&some(&[1.0, 1.1, 0.9, 25.0]), 1.0);
        assert_eq!(out, some(&[1.0, 1.1, 0.9, 25.0]));
        // 80 lifts the mean to 20.75: the small values fall under the lower bound instead
        let out = remove_outliers(&some(&[1.0, 1.1, 0.9, 80.0]), 1.0);
        assert_eq!(out, vec![None, None, None, Some(80.0)]);
    }

    #[test]
    fn outlier_high_value_masked() {
        let mut v = vec![1.0; 20];
        v.push(80.0);
        // mean 100/21 = 4.76, upper bound 47.6
        let out = remove_outliers(&some(&v), 1.0);
        assert_eq!(out[20], None);
        assert!(out[..20].iter().all(|x| *x == Some(1.0)));
    }

    #[test]
    fn outlier_zero_among_positives_masked() {
        let out = remove_outliers(&some(&[2.0, 2.2, 1.8, 0.0, 2.0]), 1.0);
        assert_eq!(out[3], None);
        assert_eq!(out.iter().flatten().count(), 4);
        let same = remove_outliers(&some(&[3.0; 6]), 1.0);
        assert!(same.iter().all(|x| *x == Some(3.0)));
    }

    proptest! {
        #[test]
        fn outlier_masking_keeps_values(v in prop::collection::vec(prop::option::of(-1e3f64..1e3), 1..40)) {
            let out = remove_outliers(&v, 1.0);
            for (a, b) in v.iter().zip(&out) {
                if let Some(x) = b { prop_assert_eq!(Some(*x), *a); }
            }
        }

        #[test]
        fn incremental_is_idempotent(v in prop::collection::vec(prop::option::of(-1e3f64..1e3), 1..40)) {
            prop_assume!(v.iter().any(Option::is_some));
            let once = incremental(&v).unwrap();
            prop_assert_eq!(incremental(&once).unwrap(), once);
        }

        #[test]
        fn normalization_cancels_scale(
            dz in prop::collection::vec(-1.0f64..1.0, 1..20), z in 0.001f64..1.0, e in -8i32..8,
        ) {
            let k = 2f64.powi(e);
            let a = normalize_impedance(&some(&dz), z).unwrap();
            let scaled: Vec<f64> = dz.iter().map(|x| x * k).collect();
            let b = normalize_impedance(&some(&scaled), z * k).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn incremental_examples() {
        assert_eq!(incremental(&some(&[5.0, 6.0, 8.0])).unwrap(), some(&[0.0, 1.0, 3.0]));
        assert_eq!(
            incremental(&[None, Some(4.0), Some(5.0)]).unwrap(),
            vec![None, Some(0.0), Some(1.0)]
        );
        assert!(incremental(&[None, None]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_impedance(&some(&[0.0, 0.01]), 0.02).unwrap();
        assert_eq!(n, some(&[0.0, 0.5]));
        assert!(normalize_impedance(&some(&[0.0]), 0.0).is_err());
    }

    fn rpt(idx: u32, cycle: u32, q: f64) -> RptRecord {
        RptRecord {
            cell_id: "V4".into(),
            rpt_index: idx,
            preceding_cycle: cycle,
            capacity_ah: q,
        }
    }

    #[test]
    fn augmentation_examples() {
        let (q2, q3) = (4.7, 4.6);
        let rpts = [rpt(1, 0, 4.85), rpt(2, 20, q2), rpt(3, 45, q3)];
        let s = augment_capacity(&rpts, &BTreeSet::from([0, 20, 30, 45])).unwrap();
        assert_eq!(s.capacity(20), Some(q2));
        assert_eq!(s.capacity(45), Some(q3));
        let expect = q2 + 10.0 / 25.0 * (q3 - q2);
        assert!((s.capacity(30).unwrap() - expect).abs() < 1e-12);
        assert_eq!(s.q_fresh_ah, 4.85);

        let flat = augment_capacity(&[rpt(1, 0, 4.0), rpt(2, 10, 4.0)], &(0..=10).collect()).unwrap();
        assert!(flat.capacity_ah.values().all(|&q| q == 4.0));

        assert!(matches!(
            augment_capacity(&rpts, &BTreeSet::from([46])),
            Err(Error::Extrapolation { cycle: 46, .. })
        ));
    }

    proptest! {
        #[test]
        fn augmentation_monotone(mut drops in prop::collection::vec(0.0f64..0.2, 2..6), gaps in prop::collection::vec(1u32..30, 6)) {
            drops.insert(0, 0.0);
            let mut cycle = 0;
            let mut q = 5.0;
            let mut rpts = Vec::new();
            for (k, d) in drops.iter().enumerate() {
                q -= d;
                rpts.push(rpt(k as u32 + 1, cycle, q));
                cycle += gaps[k];
            }
            let last = rpts.last().unwrap().preceding_cycle;
            let s = augment_capacity(&rpts, &(0..=last).collect()).unwrap();
            let qs: Vec<f64> = s.capacity_ah.values().copied().collect();
            prop_assert!(qs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            for r in &rpts {
                prop_assert_eq!(s.capacity(r.preceding_cycle), Some(r.capacity_ah));
            }
        }
    }

    fn indicator_row(cycle: u32, values: [Option<f64>; 6]) -> CycleIndicators {
        CycleIndicators {
            cell_id: "W1".into(),
            cycle,
            batch: 1,
            p_autocorr: values[0],
            r: values[1],
            z_chg: values[2],
            z_chg2: values[3],
            e_ch: values[4],
            e_dis: values[5],
        }
    }

    #[test]
    fn feature_matrix_drops_incomplete_rows() {
        let rows: Vec<CycleIndicators> = (1..=10)
            .map(|c| {
                let x = c as f64;
                let e_ch = if c == 7 { None } else { Some(1000.0 - x) };
                indicator_row(c, [Some(50.0 + x), Some(0.02 + 1e-4 * x), Some(0.01 + 1e-4 * x), None, e_ch, Some(900.0 - x)])
            })
            .collect();
        let rpts = [
            RptRecord { cell_id: "W1".into(), rpt_index: 1, preceding_cycle: 0, capacity_ah: 5.0 },
            RptRecord { cell_id: "W1".into(), rpt_index: 2, preceding_cycle: 10, capacity_ah: 4.9 },
        ];
        let cap = augment_capacity(&rpts, &(1..=10).collect()).unwrap();
        let m = build_feature_matrix(&rows, &cap, 1.0, &[]).unwrap();
        assert_eq!(m.rows.len(), 10);
        assert_eq!(m.rows[0].get(Feature::PAutocorr), Some(0.0));
        assert!((m.rows[9].get(Feature::ZNorm).unwrap() - 9e-4 / 0.0101).abs() < 1e-12);

        let three = m.select(&[Feature::PAutocorr, Feature::ECh, Feature::EDis]).unwrap();
        assert_eq!(three.rows.len(), 9);
        assert!(three.rows.iter().all(|r| r.cycle != 7));
        let two = m.select(&[Feature::ECh, Feature::EDis]).unwrap();
        assert_eq!(two.rows[0].u.len(), 2);

        let blocked = build_feature_matrix(&rows, &cap, 1.0, &[Feature::R]).unwrap();
        assert!(blocked.rows.iter().all(|r| r.get(Feature::R).is_none()));
        assert!(blocked.select(&[Feature::R]).is_err());
    }

    #[test]
    fn feature_names_parse() {
        assert_eq!(Feature::parse_list("dE_ch, dE_dis").unwrap(), vec![Feature::ECh, Feature::EDis]);
        assert_eq!("dZ_norm".parse::<Feature>().unwrap(), Feature::ZNorm);
        assert!("dQ".parse::<Feature>().is_err());
    }
}
