use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

use super::{group_index, mean_var, pearson, spearman_rho, DEGENERATE_VARIANCE};

/// Two-sided tail probability of Student's t.
fn t_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("welch t needs at least 2 values per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va < DEGENERATE_VARIANCE && vb < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("both groups are constant".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult { t, df, p: t_two_sided(t, df) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneSampleT {
    pub mean: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided one-sample t-test against zero.
///
/// Values that are all zero give `p = 1`; any other constant sample is
/// degenerate.
pub fn one_sample_t(values: &[f64]) -> Result<OneSampleT> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("one-sample t needs at least 2 values".into()));
    }
    let (m, v) = mean_var(values);
    let n = values.len();
    let df = (n - 1) as f64;
    if v < DEGENERATE_VARIANCE {
        if m.abs() < DEGENERATE_VARIANCE.sqrt() {
            return Ok(OneSampleT { mean: m, t: 0.0, df, p: 1.0, n });
        }
        return Err(Error::DegenerateVariance(format!("all {n} values equal {m}")));
    }
    let t = m / (v / n as f64).sqrt();
    Ok(OneSampleT { mean: m, t, df, p: t_two_sided(t, df), n })
}

fn split_by_cluster<'a, K: std::hash::Hash + Eq>(
    x: &'a [f64],
    y: &'a [f64],
    clusters: &[K],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if x.len() != y.len() || x.len() != clusters.len() {
        return Err(Error::DimensionMismatch("x, y and cluster ids differ in length".into()));
    }
    let (idx, k) = group_index(clusters);
    let mut out = vec![(Vec::new(), Vec::new()); k];
    for (i, &g) in idx.iter().enumerate() {
        out[g].0.push(x[i]);
        out[g].1.push(y[i]);
    }
    if k < 3 {
        return Err(Error::TooFewClusters { found: k, required: 3 });
    }
    Ok(out)
}

fn slope(x: &[f64], y: &[f64]) -> Result<f64> {
    let (mx, vx) = mean_var(x);
    if x.len() < 2 || vx < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("cluster with constant x".into()));
    }
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / (vx * (x.len() - 1) as f64))
}

/// OLS slope within each cluster, then a one-sample t-test of the slopes.
pub fn per_cluster_slope_ttest<K: std::hash::Hash + Eq>(x: &[f64], y: &[f64], clusters: &[K]) -> Result<OneSampleT> {
    let slopes = split_by_cluster(x, y, clusters)?.iter().map(|(cx, cy)| slope(cx, cy)).collect::<Result<Vec<_>>>()?;
    one_sample_t(&slopes)
}

/// Pearson correlation within each cluster, then a one-sample t-test of
/// the correlations. A cluster whose `y` is constant contributes `r = 0`.
pub fn per_cluster_correlation_ttest<K: std::hash::Hash + Eq>(
    x: &[f64],
    y: &[f64],
    clusters: &[K],
) -> Result<OneSampleT> {
    let rs = split_by_cluster(x, y, clusters)?
        .iter()
        .map(|(cx, cy)| {
            if cx.len() < 3 || mean_var(cx).1 < DEGENERATE_VARIANCE {
                return Err(Error::DegenerateVariance("cluster with constant x".into()));
            }
            Ok(pearson(cx, cy).unwrap_or(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    one_sample_t(&rs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    pub q: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini–Hochberg adjusted p-values and rejections at `level`.
pub fn bh_correct(p_values: &[f64], level: f64) -> Result<BhResult> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let order: Vec<usize> = (0..m).sorted_by(|&a, &b| p_values[a].total_cmp(&p_values[b])).collect();
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p_values[i] * m as f64 / (rank + 1) as f64);
        // p * m / m can round below p
        q[i] = running.max(p_values[i]);
    }
    let reject = q.iter().map(|&v| v <= level).collect();
    Ok(BhResult { q, reject })
}

fn permutation_counts(means: &[f64], alphas: &[f64]) -> Result<(usize, usize)> {
    if means.len() != 5 || alphas.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "exact permutation needs 5 alpha levels, got {} and {}",
            alphas.len(),
            means.len()
        )));
    }
    let observed = match spearman_rho(alphas, means) {
        Ok(r) => r,
        Err(Error::DegenerateVariance(_)) => return Ok((120, 120)),
        Err(e) => return Err(e),
    };
    let (mut up, mut down) = (0, 0);
    for perm in (0..5).permutations(5) {
        let permuted: Vec<f64> = perm.iter().map(|&i| means[i]).collect();
        let r = spearman_rho(alphas, &permuted)?;
        if r >= observed - 1e-12 {
            up += 1;
        }
        if r <= observed + 1e-12 {
            down += 1;
        }
    }
    Ok((up, down))
}

/// One-sided exact permutation p for an increasing trend of `means` in
/// `alphas`, over all 120 orderings of five levels.
pub fn exact_alpha_permutation(means: &[f64], alphas: &[f64]) -> Result<f64> {
    Ok(permutation_counts(means, alphas)?.0 as f64 / 120.0)
}

/// Doubled smaller one-sided p, capped at 1.
pub fn exact_alpha_permutation_two_sided(means: &[f64], alphas: &[f64]) -> Result<f64> {
    let (up, down) = permutation_counts(means, alphas)?;
    Ok((2.0 * up.min(down) as f64 / 120.0).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
    pub t: f64,
    pub p_slope: f64,
    pub residuals: Vec<f64>,
}

/// Simple linear regression with a t-test on the slope.
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument("ols needs equal lengths >= 3".into()));
    }
    let slope = slope(x, y)?;
    let n = x.len() as f64;
    let (mx, vx) = mean_var(x);
    let my = y.iter().sum::<f64>() / n;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let se_slope = (rss / (n - 2.0) / (vx * (n - 1.0))).sqrt();
    let (t, p_slope) = if se_slope < DEGENERATE_VARIANCE {
        if slope.abs() < DEGENERATE_VARIANCE.sqrt() {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(slope), 0.0)
        }
    } else {
        let t = slope / se_slope;
        (t, t_two_sided(t, n - 2.0))
    };
    Ok(OlsFit { slope, intercept, se_slope, t, p_slope, residuals })
}
