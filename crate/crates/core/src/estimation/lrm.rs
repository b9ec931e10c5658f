//! Ordinary least squares with an intercept.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Intercept and weights of `y = beta0 + beta . u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub beta0: f64,
    pub beta: Vec<f64>,
}

impl LinearFit {
    pub fn predict_row(&self, u: &[f64]) -> f64 {
        self.beta0 + self.beta.iter().zip(u).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Relative singular-value floor below which the scaled design is treated as
/// rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Same floor for Gram eigenvalues, which are squared singular values. The
/// normal equations lose half the digits, so the floor is looser.
const GRAM_EIG_TOL: f64 = 1e-15;

/// Least squares on `[1 | U]`. `names` labels the predictor columns in
/// singularity errors.
pub fn fit_ols(u: &[Vec<f64>], y: &[f64], names: &[String]) -> Result<LinearFit> {
    let n = y.len();
    let p = names.len();
    if u.len() != n || u.iter().any(|row| row.len() != p) {
        return Err(Error::Schema(format!(
            "design has {} rows for {n} targets or a row width other than {p}",
            u.len()
        )));
    }
    let labels: Vec<String> = std::iter::once("intercept".to_string())
        .chain(names.iter().cloned())
        .collect();
    if n < p + 1 {
        return Err(Error::Singular { columns: labels });
    }
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { u[i][j - 1] });
    let theta = solve_least_squares(x, DVector::from_column_slice(y), &labels)?;
    Ok(LinearFit {
        beta0: theta[0],
        beta: theta.iter().skip(1).copied().collect(),
    })
}

fn column_scales(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter()
        .map(|c| {
            let s = c.norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}

/// Minimum-norm solve of an explicit design after column equilibration.
pub(crate) fn solve_least_squares(mut x: DMatrix<f64>, y: DVector<f64>, labels: &[String]) -> Result<Vec<f64>> {
    let scales = column_scales(&x);
    for (j, s) in scales.iter().enumerate() {
        x.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = x.svd(true, true);
    let s_max = svd.singular_values.max();
    let v_t = svd.v_t.as_ref().unwrap();
    let weak: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| !(svd.singular_values[k] > RANK_TOL * s_max))
        .collect();
    if !weak.is_empty() || svd.singular_values.len() < labels.len() {
        return Err(Error::Singular {
            columns: collinear_columns(labels, weak.iter().map(|&k| v_t.row(k).transpose())),
        });
    }
    let theta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Pipeline(format!("least-squares solve failed: {e}")))?;
    Ok(theta.iter().zip(&scales).map(|(t, s)| t / s).collect())
}

fn collinear_columns(labels: &[String], null_vectors: impl Iterator<Item = DVector<f64>>) -> Vec<String> {
    let mut involved = vec![false; labels.len()];
    for v in null_vectors {
        let m = v.amax();
        for (j, c) in v.iter().enumerate() {
            if c.abs() > 1e-6 * m {
                involved[j] = true;
            }
        }
    }
    let named: Vec<String> = labels
        .iter()
        .zip(&involved)
        .filter(|(_, k)| **k)
        .map(|(l, _)| l.clone())
        .collect();
    if named.is_empty() {
        labels.to_vec()
    } else {
        named
    }
}

/// Accumulated normal equations `X'X theta = X'y` for designs too tall to
/// hold in memory.
#[derive(Debug, Clone)]
pub(crate) struct Gram {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    rows: usize,
}

impl Gram {
    pub fn new(p: usize) -> Self {
        Self {
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            rows: 0,
        }
    }

    pub fn add(&mut self, phi: &[f64], y: f64) {
        for (i, &a) in phi.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            self.xty[i] += a * y;
            for (j, &b) in phi.iter().enumerate().skip(i) {
                self.xtx[(i, j)] += a * b;
            }
        }
        self.rows += 1;
    }

    pub fn solve(&self, labels: &[String]) -> Result<Vec<f64>> {
        let p = self.xty.len();
        if self.rows < p {
            return Err(Error::Singular { columns: labels.to_vec() });
        }
        let mut g = self.xtx.clone();
        for i in 0..p {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
        let d: Vec<f64> = (0..p)
            .map(|i| if g[(i, i)] > 0.0 { g[(i, i)].sqrt() } else { 1.0 })
            .collect();
        let scaled = DMatrix::from_fn(p, p, |i, j| g[(i, j)] / (d[i] * d[j]));
        let rhs = DVector::from_fn(p, |i, _| self.xty[i] / d[i]);
        let eig = SymmetricEigen::new(scaled.clone());
        let e_max = eig.eigenvalues.max();
        let weak: Vec<usize> = (0..p)
            .filter(|&k| !(eig.eigenvalues[k] > GRAM_EIG_TOL * e_max))
            .collect();
        if !weak.is_empty() {
            return Err(Error::Singular {
                columns: collinear_columns(labels, weak.iter().map(|&k| eig.eigenvectors.column(k).into_owned())),
            });
        }
        let chol = scaled
            .cholesky()
            .ok_or_else(|| Error::Singular { columns: labels.to_vec() })?;
        let z = chol.solve(&rhs);
        Ok((0..p).map(|i| z[i] / d[i]).collect())
    }
}
