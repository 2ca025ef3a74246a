use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DEGENERATE_VARIANCE;

/// One-based ranks with ties given the average of the positions they span.
pub fn fractional_ranks<T: Scalar>(xs: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs two equal-length samples of size >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx / n < DEGENERATE_VARIANCE || syy / n < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("correlation of a constant variable".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of fractional ranks.
pub fn spearman_rho<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs equal lengths >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}
