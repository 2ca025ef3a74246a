use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::derive_seed;

pub const DEFAULT_REPLICATES: usize = 1000;
/// Abort when more than this fraction of resample attempts fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
/// Fresh resamples tried per replicate before giving up.
const MAX_ATTEMPTS_PER_REPLICATE: usize = 20;

/// Observations grouped into clusters (one cluster per conversation).
///
/// `x` is empty for single-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Dense cluster index per observation.
    pub cluster: Vec<usize>,
    /// Optional per-observation tag carried through resampling; empty if unused.
    pub tag: Vec<usize>,
    labels: Vec<String>,
    rows: Vec<Vec<usize>>,
}

impl ClusteredSample {
    pub fn pairs<K: ToString>(x: Vec<f64>, y: Vec<f64>, ids: &[K]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("x has {} values, y has {}", x.len(), y.len())));
        }
        Self::build(x, y, ids)
    }

    pub fn values<K: ToString>(y: Vec<f64>, ids: &[K]) -> Result<Self> {
        Self::build(Vec::new(), y, ids)
    }

    fn build<K: ToString>(x: Vec<f64>, y: Vec<f64>, ids: &[K]) -> Result<Self> {
        if ids.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} cluster ids for {} observations", ids.len(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clustered sample".into()));
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        let cluster = ids
            .iter()
            .enumerate()
            .map(|(row, id)| {
                let key = id.to_string();
                let c = *index.entry(key.clone()).or_insert_with(|| {
                    labels.push(key);
                    rows.push(Vec::new());
                    labels.len() - 1
                });
                rows[c].push(row);
                c
            })
            .collect();
        Ok(ClusteredSample { x, y, cluster, tag: Vec::new(), labels, rows })
    }

    /// Attaches one tag per observation (for example a concept index).
    pub fn with_tags(mut self, tag: Vec<usize>) -> Result<Self> {
        if tag.len() != self.y.len() {
            return Err(Error::DimensionMismatch(format!("{} tags for {} observations", tag.len(), self.y.len())));
        }
        self.tag = tag;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Concatenates the rows of the picked clusters; each pick becomes its
    /// own pseudo-cluster even when a cluster is drawn twice.
    pub fn resample(&self, picks: &[usize]) -> ClusteredSample {
        let n: usize = picks.iter().map(|&c| self.rows[c].len()).sum();
        let has_x = !self.x.is_empty();
        let has_tag = !self.tag.is_empty();
        let mut x = Vec::with_capacity(if has_x { n } else { 0 });
        let mut tag = Vec::with_capacity(if has_tag { n } else { 0 });
        let mut y = Vec::with_capacity(n);
        let mut cluster = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(picks.len());
        for (j, &c) in picks.iter().enumerate() {
            let mut these = Vec::with_capacity(self.rows[c].len());
            for &r in &self.rows[c] {
                if has_x {
                    x.push(self.x[r]);
                }
                if has_tag {
                    tag.push(self.tag[r]);
                }
                these.push(y.len());
                y.push(self.y[r]);
                cluster.push(j);
            }
            rows.push(these);
        }
        let labels = (0..picks.len()).map(|j| j.to_string()).collect();
        ClusteredSample { x, y, cluster, tag, labels, rows }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Two-sided p for a null of zero.
    pub p_two_sided: f64,
    pub replicates: Vec<f64>,
    /// Failed resample attempts that were retried.
    pub failures: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(point: f64, outcomes: Vec<(f64, usize)>) -> Result<BootstrapResult> {
    let b = outcomes.len();
    let failures: usize = outcomes.iter().map(|o| o.1).sum();
    if failures as f64 > MAX_FAILURE_FRACTION * b as f64 {
        return Err(Error::BootstrapDegenerate { failures, replicates: b });
    }
    let replicates: Vec<f64> = outcomes.into_iter().map(|o| o.0).collect();
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let le = sorted.iter().filter(|&&v| v <= 0.0).count() as f64 / b as f64;
    let ge = sorted.iter().filter(|&&v| v >= 0.0).count() as f64 / b as f64;
    let p = (2.0 * le.min(ge)).clamp(2.0 / b as f64, 1.0);
    Ok(BootstrapResult {
        point,
        ci_lo: quantile(&sorted, 0.025),
        ci_hi: quantile(&sorted, 0.975),
        p_two_sided: p,
        replicates,
        failures,
    })
}

fn run_replicates<F>(k: usize, b: usize, seed: u64, eval: F) -> Result<Vec<(f64, usize)>>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 replicates, got {b}")));
    }
    (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut picks = vec![0usize; k];
            let mut failed = 0;
            loop {
                for p in picks.iter_mut() {
                    *p = rng.random_range(0..k);
                }
                match eval(&picks) {
                    Ok(v) if v.is_finite() => return Ok((v, failed)),
                    _ => {
                        failed += 1;
                        if failed >= MAX_ATTEMPTS_PER_REPLICATE {
                            return Err(Error::BootstrapDegenerate { failures: failed, replicates: b });
                        }
                    }
                }
            }
        })
        .collect()
}

/// Percentile bootstrap over whole clusters.
pub fn cluster_bootstrap<F>(sample: &ClusteredSample, statistic: F, b: usize, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&ClusteredSample) -> Result<f64> + Sync,
{
    let k = sample.cluster_count();
    if k < 2 {
        return Err(Error::TooFewClusters { found: k, required: 2 });
    }
    let point = statistic(sample)?;
    let outcomes = run_replicates(k, b, seed, |picks| statistic(&sample.resample(picks)))?;
    summarize(point, outcomes)
}

/// Bootstraps `stat(a) - stat(b)` drawing the same clusters for both samples.
pub fn paired_cluster_bootstrap<F>(
    a: &ClusteredSample,
    b_sample: &ClusteredSample,
    statistic: F,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult>
where
    F: Fn(&ClusteredSample) -> Result<f64> + Sync,
{
    let k = a.cluster_count();
    if k < 2 {
        return Err(Error::TooFewClusters { found: k, required: 2 });
    }
    if b_sample.cluster_count() != k {
        return Err(Error::ClusterMismatch);
    }
    // cluster c of `a` corresponds to `to_b[c]` in `b_sample`
    let pos: HashMap<&str, usize> = b_sample.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let to_b: Vec<usize> =
        a.labels.iter().map(|l| pos.get(l.as_str()).copied().ok_or(Error::ClusterMismatch)).collect::<Result<_>>()?;
    let point = statistic(a)? - statistic(b_sample)?;
    let outcomes = run_replicates(k, b, seed, |picks| {
        let picks_b: Vec<usize> = picks.iter().map(|&c| to_b[c]).collect();
        Ok(statistic(&a.resample(picks))? - statistic(&b_sample.resample(&picks_b))?)
    })?;
    summarize(point, outcomes)
}
