use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

use super::hypothesis::{per_cluster_correlation_ttest, per_cluster_slope_ttest};
use super::{group_index, DEGENERATE_VARIANCE};

/// Search range for `ln(sigma_group² / sigma_resid²)`.
pub const LOG_LAMBDA_BOUND: f64 = 12.0;
const GRID_STEP: f64 = 0.5;
const GOLDEN_TOL: f64 = 1e-7;
/// Optima closer than this to either end of the range count as boundary fits.
const BOUNDARY_TOL: f64 = 1e-3;

/// Random-intercept linear mixed model fitted by REML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub fixed_effects: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub wald_z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma_group_sq: f64,
    pub sigma_resid_sq: f64,
    /// Maximized restricted log-likelihood, up to a constant.
    pub log_reml: f64,
    /// False when the variance ratio sits on the edge of its search range;
    /// callers should use a fallback test.
    pub converged: bool,
    pub n_obs: usize,
    pub n_clusters: usize,
}

/// Per-cluster sufficient statistics.
struct Group {
    n: f64,
    xtx: DMatrix<f64>,
    xt1: DVector<f64>,
    xty: DVector<f64>,
    sum_y: f64,
    yty: f64,
}

struct Profile {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    sigma_sq: f64,
    log_reml: f64,
}

struct Problem {
    groups: Vec<Group>,
    n: usize,
    p: usize,
}

impl Problem {
    /// GLS solution and profiled REML objective at variance ratio `lambda`.
    ///
    /// Within a cluster `H = I + lambda 11'`, so
    /// `H^-1 = I - c 11'` with `c = lambda / (1 + lambda n_g)` and
    /// `log|H| = log(1 + lambda n_g)`.
    fn profile(&self, lambda: f64) -> Result<Profile> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut yhy = 0.0;
        let mut log_det_h = 0.0;
        for g in &self.groups {
            let c = lambda / (1.0 + lambda * g.n);
            a += &g.xtx - (&g.xt1 * g.xt1.transpose()) * c;
            b += &g.xty - &g.xt1 * (c * g.sum_y);
            yhy += g.yty - c * g.sum_y * g.sum_y;
            log_det_h += (lambda * g.n).ln_1p();
        }
        let chol = a.clone().cholesky().ok_or(Error::RankDeficient)?;
        let beta = chol.solve(&b);
        let a_inv = chol.inverse();
        let log_det_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let df = (self.n - p) as f64;
        let rss = (yhy - b.dot(&beta)).max(f64::MIN_POSITIVE);
        let sigma_sq = rss / df;
        let log_reml = -0.5 * (df * sigma_sq.ln() + log_det_h + log_det_a);
        Ok(Profile { beta, a_inv, sigma_sq, log_reml })
    }

    fn objective(&self, theta: f64) -> f64 {
        self.profile(theta.exp()).map(|p| p.log_reml).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Maximizes a unimodal function on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    // the endpoints themselves may beat the interior for monotone objectives
    let mid = (a + b) / 2.0;
    [a, mid, b].into_iter().max_by(|x, y| f(*x).total_cmp(&f(*y))).expect("non-empty")
}

/// Fits `y = X beta + u_cluster + e` with `u ~ N(0, sigma_group²)` and
/// `e ~ N(0, sigma_resid²)`.
///
/// The variance ratio is profiled out of the REML likelihood and optimized
/// on the log scale by a grid scan followed by golden-section refinement.
/// A fit whose optimum hits the lower end of the range is reported with
/// `sigma_group² = 0` (the ordinary least-squares solution).
pub fn lmm_fit<K: std::hash::Hash + Eq>(x: &DMatrix<f64>, y: &[f64], clusters: &[K]) -> Result<LmmFit> {
    let (n, p) = x.shape();
    if y.len() != n || clusters.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, y {} and clusters {}",
            y.len(),
            clusters.len()
        )));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixed model input".into()));
    }
    let (idx, k) = group_index(clusters);
    if k < 2 {
        return Err(Error::TooFewClusters { found: k, required: 2 });
    }
    if n <= p || p == 0 {
        return Err(Error::RankDeficient);
    }
    let sv = x.clone().singular_values();
    let smax = sv.max();
    if !(smax > 0.0) || sv.min() / smax < 1e-10 {
        return Err(Error::RankDeficient);
    }

    let mut groups: Vec<Group> = (0..k)
        .map(|_| Group {
            n: 0.0,
            xtx: DMatrix::zeros(p, p),
            xt1: DVector::zeros(p),
            xty: DVector::zeros(p),
            sum_y: 0.0,
            yty: 0.0,
        })
        .collect();
    for (row, &g) in idx.iter().enumerate() {
        let xi = x.row(row).transpose();
        let gr = &mut groups[g];
        gr.n += 1.0;
        gr.xtx += &xi * xi.transpose();
        gr.xt1 += &xi;
        gr.xty += &xi * y[row];
        gr.sum_y += y[row];
        gr.yty += y[row] * y[row];
    }
    let problem = Problem { groups, n, p };

    let ols = problem.profile(0.0)?;
    let finish = |prof: &Profile, lambda: f64, converged: bool, degenerate: bool| {
        let sigma_sq = if degenerate { 0.0 } else { prof.sigma_sq };
        let std_errors: Vec<f64> = (0..p).map(|j| (sigma_sq * prof.a_inv[(j, j)]).max(0.0).sqrt()).collect();
        let (wald_z, p_values) = prof
            .beta
            .iter()
            .zip(&std_errors)
            .map(|(b, se)| {
                if *se > 0.0 {
                    let z = b / se;
                    (z, erfc(z.abs() / std::f64::consts::SQRT_2))
                } else {
                    (0.0, 1.0)
                }
            })
            .unzip();
        LmmFit {
            fixed_effects: prof.beta.iter().copied().collect(),
            std_errors,
            wald_z,
            p_values,
            sigma_group_sq: lambda * sigma_sq,
            sigma_resid_sq: sigma_sq,
            log_reml: prof.log_reml,
            converged,
            n_obs: n,
            n_clusters: k,
        }
    };

    if ols.sigma_sq * ((n - p) as f64) < DEGENERATE_VARIANCE {
        // exact fit: no residual variance to partition
        return Ok(finish(&ols, 0.0, false, true));
    }

    let steps = (2.0 * LOG_LAMBDA_BOUND / GRID_STEP).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| -LOG_LAMBDA_BOUND + i as f64 * GRID_STEP).collect();
    let values: Vec<f64> = grid.iter().map(|&t| problem.objective(t)).collect();
    let best =
        (0..grid.len()).max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a))).expect("non-empty grid");
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(steps)];
    let theta = golden_max(|t| problem.objective(t), lo, hi);

    if theta <= -LOG_LAMBDA_BOUND + BOUNDARY_TOL {
        return Ok(finish(&ols, 0.0, false, false));
    }
    let lambda = theta.exp();
    let prof = problem.profile(lambda)?;
    let converged = theta < LOG_LAMBDA_BOUND - BOUNDARY_TOL;
    Ok(finish(&prof, lambda, converged, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    PerClusterSlope,
    PerClusterCorrelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendMethod {
    MixedModel,
    PerClusterSlope,
    PerClusterCorrelation,
}

/// Outcome of a trend test of `y` on `x` within clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub method: TrendMethod,
    /// Fixed slope, mean per-cluster slope or mean per-cluster correlation.
    pub estimate: f64,
    /// Wald z or t statistic.
    pub statistic: f64,
    pub p: f64,
}

/// Tests `y ~ x + (1 | cluster)` and switches to the per-cluster test when
/// the mixed model does not converge.
pub fn trend_with_fallback<K: std::hash::Hash + Eq>(
    x: &[f64],
    y: &[f64],
    clusters: &[K],
    fallback: Fallback,
) -> Result<TrendTest> {
    let design = DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let fit = lmm_fit(&design, y, clusters)?;
    if fit.converged {
        return Ok(TrendTest {
            method: TrendMethod::MixedModel,
            estimate: fit.fixed_effects[1],
            statistic: fit.wald_z[1],
            p: fit.p_values[1],
        });
    }
    log::debug!("mixed model hit the variance boundary, using per-cluster fallback");
    let r = match fallback {
        Fallback::PerClusterSlope => per_cluster_slope_ttest(x, y, clusters)?,
        Fallback::PerClusterCorrelation => per_cluster_correlation_ttest(x, y, clusters)?,
    };
    Ok(TrendTest {
        method: match fallback {
            Fallback::PerClusterSlope => TrendMethod::PerClusterSlope,
            Fallback::PerClusterCorrelation => TrendMethod::PerClusterCorrelation,
        },
        estimate: r.mean,
        statistic: r.t,
        p: r.p,
    })
}
