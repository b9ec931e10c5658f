//! ARMAX models fitted by pseudo-linear regression.
//!
//! ```text
//! y(t) + a1 y(t-1) + .. + a_na y(t-na)
//!     = beta0 + beta . u(t) + b1 . u(t-1) + .. + b_nb . u(t-nb)
//!       + e(t) + c1 e(t-1) + .. + c_nc e(t-nc)
//! ```
//!
//! Training data may consist of several independent segments (one per cell);
//! lags never reach across a segment boundary.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lrm::{fit_ols, Gram};
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 50;
pub const COEF_TOL: f64 = 1e-8;
/// Validation RMSEs within this relative distance of the best count as tied.
pub const GRID_TIE_REL_TOL: f64 = 1e-3;
/// Reconstructed innovations larger than this multiple of the output scale
/// mean the recursion has blown up.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Orders {
    pub na: usize,
    pub nb: usize,
    pub nc: usize,
}

impl Orders {
    pub const fn new(na: usize, nb: usize, nc: usize) -> Self {
        Self { na, nb, nc }
    }

    pub fn max_lag(&self) -> usize {
        self.na.max(self.nb).max(self.nc)
    }

    pub fn sum(&self) -> usize {
        self.na + self.nb + self.nc
    }

    /// Every order triple with entries in `lo..=hi`.
    pub fn grid(lo: usize, hi: usize) -> Vec<Orders> {
        let mut out = Vec::new();
        for na in lo..=hi {
            for nb in lo..=hi {
                for nc in lo..=hi {
                    out.push(Orders::new(na, nb, nc));
                }
            }
        }
        out
    }
}

impl fmt::Display for Orders {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.na, self.nb, self.nc)
    }
}

impl FromStr for Orders {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .trim_matches(|c| c == '(' || c == ')')
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad ARMAX orders '{s}'")))?;
        match parts[..] {
            [na, nb, nc] => Ok(Orders::new(na, nb, nc)),
            _ => Err(Error::Config(format!("ARMAX orders need three values, got '{s}'"))),
        }
    }
}

/// One contiguous record: `u[t]` holds the inputs at step `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    pub y: Vec<f64>,
    pub u: Vec<Vec<f64>>,
}

impl Segment {
    pub fn new(y: Vec<f64>, u: Vec<Vec<f64>>) -> Result<Self> {
        if y.len() != u.len() {
            return Err(Error::Schema(format!(
                "segment has {} outputs and {} input rows",
                y.len(),
                u.len()
            )));
        }
        Ok(Self { y, u })
    }

    fn inputs(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Observed past outputs and reconstructed innovations.
    OneStep,
    /// Free run from the first observed output with zero innovations.
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaxFit {
    pub orders: Orders,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    /// `b[i][j]`: weight of input `j` at lag `i + 1`.
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub iterations: usize,
}

struct Layout {
    m: usize,
    orders: Orders,
}

impl Layout {
    fn width(&self, with_ma: bool) -> usize {
        1 + self.m + self.orders.na + self.orders.nb * self.m + if with_ma { self.orders.nc } else { 0 }
    }

    fn labels(&self, names: &[String], with_ma: bool) -> Vec<String> {
        let mut l = vec!["intercept".to_string()];
        l.extend(names.iter().cloned());
        l.extend((1..=self.orders.na).map(|i| format!("a{i}")));
        for i in 1..=self.orders.nb {
            l.extend(names.iter().map(|n| format!("{n}(t-{i})")));
        }
        if with_ma {
            l.extend((1..=self.orders.nc).map(|i| format!("c{i}")));
        }
        l
    }

    /// Regressor at step `t`; `y_at`, `u_at` and `e_at` resolve lagged values.
    fn fill<'u>(
        &self,
        phi: &mut Vec<f64>,
        u_now: &[f64],
        y_at: impl Fn(usize) -> f64,
        u_at: impl Fn(usize) -> &'u [f64],
        e_at: impl Fn(usize) -> f64,
        with_ma: bool,
    ) {
        phi.clear();
        phi.push(1.0);
        phi.extend_from_slice(u_now);
        for i in 1..=self.orders.na {
            phi.push(-y_at(i));
        }
        for i in 1..=self.orders.nb {
            phi.extend_from_slice(u_at(i));
        }
        if with_ma {
            for i in 1..=self.orders.nc {
                phi.push(e_at(i));
            }
        }
    }

    fn unpack(&self, theta: &[f64], iterations: usize) -> ArmaxFit {
        let (m, o) = (self.m, self.orders);
        let mut k = 0;
        let mut take = |n: usize| {
            let s = theta[k..k + n].to_vec();
            k += n;
            s
        };
        let beta0 = take(1)[0];
        let beta = take(m);
        let a = take(o.na);
        let b = (0..o.nb).map(|_| take(m)).collect();
        let c = if theta.len() > 1 + m + o.na + o.nb * m { take(o.nc) } else { vec![0.0; o.nc] };
        ArmaxFit { orders: o, beta0, beta, a, b, c, iterations }
    }
}

impl ArmaxFit {
    fn pack(&self) -> Vec<f64> {
        let mut th = vec![self.beta0];
        th.extend(&self.beta);
        th.extend(&self.a);
        for bi in &self.b {
            th.extend(bi);
        }
        th.extend(&self.c);
        th
    }

    fn layout(&self) -> Layout {
        Layout { m: self.beta.len(), orders: self.orders }
    }

    /// Predicted outputs for a whole segment. Lags before the first sample
    /// repeat the first sample; innovations inside the first lag window are
    /// taken as zero, as in training.
    pub fn predict(&self, seg: &Segment, mode: PredictionMode) -> Vec<f64> {
        let n = seg.y.len();
        if n == 0 {
            return Vec::new();
        }
        let layout = self.layout();
        let theta = self.pack();
        let lag = self.orders.max_lag();
        let clamp = |t: usize, i: usize| t.saturating_sub(i);
        let mut yhat = vec![0.0; n];
        let mut e = vec![0.0; n];
        let mut phi = Vec::with_capacity(theta.len());
        for t in 0..n {
            if mode == PredictionMode::Simulation && t == 0 && self.orders.na > 0 {
                yhat[0] = seg.y[0];
                continue;
            }
            match mode {
                PredictionMode::OneStep => layout.fill(
                    &mut phi,
                    &seg.u[t],
                    |i| seg.y[clamp(t, i)],
                    |i| &seg.u[clamp(t, i)],
                    |i| if t >= i { e[t - i] } else { 0.0 },
                    true,
                ),
                PredictionMode::Simulation => layout.fill(
                    &mut phi,
                    &seg.u[t],
                    |i| yhat[clamp(t, i)],
                    |i| &seg.u[clamp(t, i)],
                    |_| 0.0,
                    true,
                ),
            }
            yhat[t] = dot(&phi, &theta);
            if mode == PredictionMode::OneStep && t >= lag {
                e[t] = seg.y[t] - yhat[t];
            }
        }
        yhat
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Recomputes innovations recursively for the rows used in the fit; rows
/// before the first full lag window get zero.
fn update_residuals(segments: &[Segment], layout: &Layout, theta: &[f64], e: &mut [Vec<f64>]) {
    let lag = layout.orders.max_lag();
    let mut phi = Vec::with_capacity(theta.len());
    for (seg, es) in segments.iter().zip(e.iter_mut()) {
        for t in 0..seg.y.len() {
            if t < lag {
                es[t] = 0.0;
                continue;
            }
            layout.fill(&mut phi, &seg.u[t], |i| seg.y[t - i], |i| &seg.u[t - i], |i| es[t - i], true);
            es[t] = seg.y[t] - dot(&phi, theta);
        }
    }
}

fn gram_fit(segments: &[Segment], layout: &Layout, e: Option<&[Vec<f64>]>, labels: &[String]) -> Result<Vec<f64>> {
    let with_ma = e.is_some();
    let lag = layout.orders.max_lag();
    let mut gram = Gram::new(layout.width(with_ma));
    let mut phi = Vec::with_capacity(layout.width(with_ma));
    for (s, seg) in segments.iter().enumerate() {
        for t in lag..seg.y.len() {
            let es = e.map(|e| &e[s]);
            layout.fill(
                &mut phi,
                &seg.u[t],
                |i| seg.y[t - i],
                |i| &seg.u[t - i],
                |i| es.map_or(0.0, |es| es[t - i]),
                with_ma,
            );
            gram.add(&phi, seg.y[t]);
        }
    }
    gram.solve(labels)
}

/// Fits an ARMAX model. Without a moving-average part the problem is linear
/// and solved in one least-squares step; otherwise an ARX fit seeds the
/// innovations and the regression is repeated on lagged residuals until the
/// coefficients move by less than [`COEF_TOL`].
pub fn fit_armax(segments: &[Segment], orders: Orders, names: &[String]) -> Result<ArmaxFit> {
    let m = names.len();
    if segments.iter().any(|s| s.inputs() != m && !s.y.is_empty()) {
        return Err(Error::Schema(format!("segments must carry {m} inputs per row")));
    }
    let layout = Layout { m, orders };
    let lag = orders.max_lag();
    let rows: usize = segments.iter().map(|s| s.y.len().saturating_sub(lag)).sum();
    if rows < layout.width(true) + 1 {
        return Err(Error::Pipeline(format!(
            "ARMAX{orders} needs more than {} usable rows, got {rows}",
            layout.width(true)
        )));
    }

    if orders.nc == 0 {
        let mut u = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(rows);
        let mut phi = Vec::new();
        for seg in segments {
            for t in lag..seg.y.len() {
                layout.fill(&mut phi, &seg.u[t], |i| seg.y[t - i], |i| &seg.u[t - i], |_| 0.0, false);
                u.push(phi[1..].to_vec());
                y.push(seg.y[t]);
            }
        }
        let labels = layout.labels(names, false);
        let fit = fit_ols(&u, &y, &labels[1..])?;
        let mut theta = vec![fit.beta0];
        theta.extend(fit.beta);
        return Ok(layout.unpack(&theta, 1));
    }

    let y_max = segments.iter().flat_map(|s| s.y.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let arx = gram_fit(segments, &layout, None, &layout.labels(names, false))?;
    let mut theta = arx.clone();
    theta.extend(std::iter::repeat_n(0.0, orders.nc));
    let mut e: Vec<Vec<f64>> = segments.iter().map(|s| vec![0.0; s.y.len()]).collect();
    let labels = layout.labels(names, true);
    let mut trace = Vec::new();
    for it in 1..=MAX_ITERATIONS {
        update_residuals(segments, &layout, &theta, &mut e);
        let e_max = e.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(e_max <= DIVERGENCE_FACTOR * (1.0 + y_max)) {
            return Err(Error::Pipeline(format!(
                "ARMAX{orders}: innovation recursion diverged (moving-average part not invertible)"
            )));
        }
        let next = gram_fit(segments, &layout, Some(&e), &labels)?;
        let delta = next
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = next;
        trace.push(delta);
        if !theta.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta < COEF_TOL {
            return Ok(layout.unpack(&theta, it));
        }
    }
    Err(Error::NoConvergence {
        iterations: trace.len(),
        last_delta: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

pub fn rmse(actual: &[f64], predicted: &[f64]) -> f64 {
    let n = actual.len().min(predicted.len());
    if n == 0 {
        return f64::NAN;
    }
    let sse: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    (sse / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub orders: Orders,
    /// Validation RMSE; `None` when the fit failed.
    pub rmse: Option<f64>,
    pub error: Option<String>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: Orders,
    pub best_rmse: f64,
    pub table: Vec<GridPoint>,
}

/// Picks the winner among successful grid points: lowest RMSE, where RMSEs
/// within [`GRID_TIE_REL_TOL`] of the minimum tie and ties go to the smaller
/// order sum, then the lexicographically smaller triple.
pub fn select_orders(table: &[GridPoint]) -> Option<(Orders, f64)> {
    let min = table
        .iter()
        .filter_map(|g| g.rmse)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    table
        .iter()
        .filter_map(|g| g.rmse.map(|r| (g.orders, r)))
        .filter(|(_, r)| *r <= min * (1.0 + GRID_TIE_REL_TOL) || *r == min)
        .min_by_key(|(o, _)| (o.sum(), *o))
}

/// Fits every order triple on `train` and scores it on `validate`.
pub fn grid_search_armax(
    train: &[Segment],
    validate: &[Segment],
    grid: &[Orders],
    names: &[String],
    mode: PredictionMode,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::Config("empty ARMAX order grid".into()));
    }
    // every grid point is scored on the same rows: those past the longest lag
    let skip = grid.iter().map(Orders::max_lag).max().unwrap_or(0);
    let actual: Vec<f64> = validate.iter().flat_map(|s| s.y.iter().skip(skip).copied()).collect();
    if actual.is_empty() {
        return Err(Error::Pipeline(format!("validation data is shorter than the longest lag ({skip})")));
    }
    let table: Vec<GridPoint> = grid
        .par_iter()
        .map(|&orders| {
            let start = Instant::now();
            let outcome = fit_armax(train, orders, names).map(|fit| {
                let pred: Vec<f64> = validate
                    .iter()
                    .flat_map(|s| fit.predict(s, mode).into_iter().skip(skip))
                    .collect();
                rmse(&actual, &pred)
            });
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            match outcome {
                Ok(r) if r.is_finite() => GridPoint { orders, rmse: Some(r), error: None, elapsed_ms },
                Ok(_) => GridPoint { orders, rmse: None, error: Some("non-finite prediction".into()), elapsed_ms },
                Err(e) => GridPoint { orders, rmse: None, error: Some(e.to_string()), elapsed_ms },
            }
        })
        .collect();
    let (best, best_rmse) = select_orders(&table)
        .ok_or_else(|| Error::Pipeline("every ARMAX grid point failed".into()))?;
    Ok(GridSearch { best, best_rmse, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|k| format!("u{k}")).collect()
    }

    /// Runs the defining recursion forward from zero initial conditions.
    pub(crate) fn generate(fit: &ArmaxFit, u: &[Vec<f64>], eps: &[f64], y0: f64) -> Vec<f64> {
        let n = u.len();
        let mut y = vec![y0; n];
        for t in 1..n {
            let mut v = fit.beta0 + dot(&fit.beta, &u[t]) + eps[t];
            for (i, a) in fit.a.iter().enumerate() {
                if t > i {
                    v -= a * y[t - i - 1];
                }
            }
            for (i, b) in fit.b.iter().enumerate() {
                if t > i {
                    v += dot(b, &u[t - i - 1]);
                }
            }
            for (i, c) in fit.c.iter().enumerate() {
                if t > i {
                    v += c * eps[t - i - 1];
                }
            }
            y[t] = v;
        }
        y
    }

    fn model(orders: Orders, beta0: f64, beta: Vec<f64>, a: Vec<f64>, b: Vec<Vec<f64>>, c: Vec<f64>) -> ArmaxFit {
        ArmaxFit { orders, beta0, beta, a, b, c, iterations: 0 }
    }

    fn inputs(n: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..m).map(|_| d.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn order_parsing_and_grid() {
        assert_eq!("(1,0,2)".parse::<Orders>().unwrap(), Orders::new(1, 0, 2));
        assert!("1,2".parse::<Orders>().is_err());
        assert_eq!(Orders::grid(0, 3).len(), 64);
    }

    #[test]
    fn zero_orders_match_linear_regression() {
        let u = inputs(200, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let y: Vec<f64> = u.iter().map(|r| 1.0 + 2.0 * r[0] - r[1] + noise.sample(&mut rng)).collect();
        let lrm = fit_ols(&u, &y, &names(2)).unwrap();
        let seg = Segment::new(y, u).unwrap();
        let fit = fit_armax(&[seg], Orders::new(0, 0, 0), &names(2)).unwrap();
        assert_eq!(fit.beta0, lrm.beta0);
        assert_eq!(fit.beta, lrm.beta);
    }

    #[test]
    fn one_step_prediction_follows_the_recursion() {
        // AR(1) data from a (1,0,2) model with no innovations.
        let truth = model(Orders::new(1, 0, 2), 0.2, vec![0.5], vec![-0.8], vec![], vec![0.4, 0.2]);
        let u = inputs(300, 1, 5);
        let y = generate(&truth, &u, &vec![0.0; 300], 1.0);
        let seg = Segment::new(y.clone(), u).unwrap();
        let pred = truth.predict(&seg, PredictionMode::OneStep);
        for t in 1..300 {
            assert!((pred[t] - y[t]).abs() < 1e-9, "t={t}");
        }
        let sim = truth.predict(&seg, PredictionMode::Simulation);
        for t in 0..300 {
            assert!((sim[t] - y[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_free_arx_is_recovered() {
        let truth = model(Orders::new(2, 1, 0), 0.3, vec![0.7], vec![-1.2, 0.35], vec![vec![-0.25]], vec![]);
        let u = inputs(500, 1, 6);
        let y = generate(&truth, &u, &vec![0.0; 500], 0.0);
        let fit = fit_armax(&[Segment::new(y, u).unwrap()], truth.orders, &names(1)).unwrap();
        assert!((fit.beta0 - 0.3).abs() < 1e-6);
        assert!((fit.beta[0] - 0.7).abs() < 1e-6);
        assert!((fit.a[0] + 1.2).abs() < 1e-6 && (fit.a[1] - 0.35).abs() < 1e-6);
        assert!((fit.b[0][0] + 0.25).abs() < 1e-6);
    }

    #[test]
    fn pseudo_linear_regression_recovers_ma_terms() {
        let truth = model(Orders::new(1, 0, 2), 0.2, vec![0.5], vec![-0.9], vec![], vec![0.5, 0.3]);
        let n = 60_000;
        let u = inputs(n, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Normal::new(0.0, 0.05).unwrap();
        let eps: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let y = generate(&truth, &u, &eps, 2.0);
        let fit = fit_armax(&[Segment::new(y, u).unwrap()], truth.orders, &names(1)).unwrap();
        assert!((fit.a[0] + 0.9).abs() < 5e-3);
        assert!((fit.c[0] - 0.5).abs() < 2e-2 && (fit.c[1] - 0.3).abs() < 2e-2);
        assert!(fit.iterations > 1);
    }

    #[test]
    fn lags_do_not_cross_segments() {
        // Two segments whose concatenation would break the AR(1) relation.
        let truth = model(Orders::new(1, 0, 0), 1.0, vec![2.0], vec![-0.5], vec![], vec![]);
        let u1 = inputs(50, 1, 9);
        let u2 = inputs(50, 1, 10);
        let s1 = Segment::new(generate(&truth, &u1, &vec![0.0; 50], 0.0), u1).unwrap();
        let s2 = Segment::new(generate(&truth, &u2, &vec![0.0; 50], 100.0), u2).unwrap();
        let fit = fit_armax(&[s1, s2], truth.orders, &names(1)).unwrap();
        assert!((fit.a[0] + 0.5).abs() < 1e-9 && (fit.beta0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_selection_rules() {
        let pt = |o: Orders, r: f64| GridPoint { orders: o, rmse: Some(r), error: None, elapsed_ms: 0.0 };
        let table = vec![
            pt(Orders::new(2, 0, 2), 1.0),
            pt(Orders::new(1, 0, 2), 1.0005),
            pt(Orders::new(0, 1, 2), 1.0004),
            pt(Orders::new(0, 0, 1), 1.2),
            GridPoint { orders: Orders::new(0, 0, 0), rmse: None, error: Some("x".into()), elapsed_ms: 0.0 },
        ];
        assert_eq!(select_orders(&table).unwrap().0, Orders::new(0, 1, 2));
        let single = grid_search_armax(
            &[Segment::new(vec![1.0, 2.0, 3.0, 4.0], vec![vec![1.0], vec![2.0], vec![3.0], vec![4.5]]).unwrap()],
            &[Segment::new(vec![1.0, 2.0], vec![vec![1.0], vec![2.0]]).unwrap()],
            &[Orders::new(0, 0, 0)],
            &names(1),
            PredictionMode::OneStep,
        )
        .unwrap();
        assert_eq!(single.best, Orders::new(0, 0, 0));
        assert_eq!(single.table.len(), 1);
    }
}
