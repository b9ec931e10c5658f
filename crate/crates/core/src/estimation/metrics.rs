use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative capacity errors of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cell_id: String,
    pub cycles: Vec<u32>,
    pub q_true_ah: Vec<f64>,
    pub q_est_ah: Vec<f64>,
    /// `(Q - Q_est) / Q`
    pub residuals: Vec<f64>,
    pub ape_pct: Vec<f64>,
    pub rmse_pct: f64,
    pub max_ape_pct: f64,
}

pub fn evaluate(cell_id: &str, cycles: &[u32], actual: &[f64], estimated: &[f64]) -> Result<EvaluationReport> {
    if actual.len() != estimated.len() || actual.len() != cycles.len() {
        return Err(Error::Schema(format!(
            "evaluation series differ in length ({} cycles, {} actual, {} estimated)",
            cycles.len(),
            actual.len(),
            estimated.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Pipeline(format!("cell {cell_id}: nothing to evaluate")));
    }
    if let Some(k) = actual.iter().position(|q| !(*q > 0.0)) {
        return Err(Error::Domain(format!(
            "cell {cell_id}: actual capacity at cycle {} is not positive",
            cycles[k]
        )));
    }
    let residuals: Vec<f64> = actual.iter().zip(estimated).map(|(q, e)| (q - e) / q).collect();
    let ape_pct: Vec<f64> = residuals.iter().map(|e| e.abs() * 100.0).collect();
    let rmse_pct = (residuals.iter().map(|e| (e * 100.0).powi(2)).sum::<f64>() / residuals.len() as f64).sqrt();
    let max_ape_pct = ape_pct.iter().copied().fold(0.0, f64::max);
    Ok(EvaluationReport {
        cell_id: cell_id.to_string(),
        cycles: cycles.to_vec(),
        q_true_ah: actual.to_vec(),
        q_est_ah: estimated.to_vec(),
        residuals,
        ape_pct,
        rmse_pct,
        max_ape_pct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let r = evaluate("A", &[1, 2], &[5.0, 4.0], &[5.0, 4.0]).unwrap();
        assert_eq!((r.rmse_pct, r.max_ape_pct), (0.0, 0.0));
        let r = evaluate("A", &[1], &[5.0], &[4.9]).unwrap();
        assert!((r.ape_pct[0] - 2.0).abs() < 1e-12);
        // residuals 0.01, -0.02, 0.03, 0 -> sqrt((1 + 4 + 9 + 0) / 4) percent
        let r = evaluate("A", &[1, 2, 3, 4], &[1.0, 1.0, 1.0, 1.0], &[0.99, 1.02, 0.97, 1.0]).unwrap();
        assert!((r.rmse_pct - 3.5f64.sqrt()).abs() < 1e-9);
        assert!((r.max_ape_pct - 3.0).abs() < 1e-9);
        assert!(matches!(evaluate("A", &[1], &[0.0], &[1.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn rmse_bounded_by_max_ape(pairs in prop::collection::vec((0.5f64..6.0, 0.0f64..7.0), 1..50)) {
            let (q, e): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let cycles: Vec<u32> = (0..q.len() as u32).collect();
            let r = evaluate("A", &cycles, &q, &e).unwrap();
            prop_assert!(r.rmse_pct >= 0.0);
            prop_assert!(r.rmse_pct <= r.max_ape_pct * (1.0 + 1e-12));
            let again = (r.residuals.iter().map(|x| (100.0 * x).powi(2)).sum::<f64>() / q.len() as f64).sqrt();
            prop_assert!((again - r.rmse_pct).abs() <= 1e-9 * (1.0 + again));
        }
    }
}
