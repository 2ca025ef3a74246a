//! Statistical machinery: rank correlation, isotonic regression, clustered
//! bootstrap inference, random-intercept mixed models with a per-cluster
//! fallback, classical tests, multiple-testing correction and entropy.

mod bootstrap;
mod entropy;
mod hypothesis;
mod isotonic;
mod lmm;
mod rank;

pub use bootstrap::{
    cluster_bootstrap, paired_cluster_bootstrap, BootstrapResult, ClusteredSample, DEFAULT_REPLICATES,
    MAX_FAILURE_FRACTION,
};
pub use entropy::{shannon_entropy, EntropyScheme, RATING_BIN_WIDTH};
pub use hypothesis::{
    bh_correct, exact_alpha_permutation, exact_alpha_permutation_two_sided, ols_fit, one_sample_t,
    per_cluster_correlation_ttest, per_cluster_slope_ttest, welch_t, BhResult, OlsFit, OneSampleT, WelchResult,
};
pub use isotonic::{isotonic_fit, isotonic_r2};
pub use lmm::{lmm_fit, trend_with_fallback, Fallback, LmmFit, TrendMethod, TrendTest, LOG_LAMBDA_BOUND};
pub use rank::{fractional_ranks, pearson, spearman_rho};

/// Variances and sums of squares below this are treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Mean and Bessel-corrected variance (`0` variance for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Index of each distinct key in first-seen order, plus the number of groups.
pub(crate) fn group_index<K: std::hash::Hash + Eq>(keys: &[K]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let idx = keys
        .iter()
        .map(|k| {
            let next = map.len();
            *map.entry(k).or_insert(next)
        })
        .collect();
    (idx, map.len())
}

/// SplitMix64 finalizer over `seed` combined with a counter; used for
/// per-replicate and per-cell seeds.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
