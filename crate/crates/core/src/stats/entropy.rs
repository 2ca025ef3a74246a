use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bin width for continuous ratings on the 0..=9 scale (36 bins).
pub const RATING_BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntropyScheme {
    /// Every distinct value is its own outcome.
    Discrete,
    /// Fixed-width bins over `[lo, hi]`; values outside are clamped to the end bins.
    Binned { width: f64, lo: f64, hi: f64 },
}

impl EntropyScheme {
    pub fn ratings() -> Self {
        EntropyScheme::Binned { width: RATING_BIN_WIDTH, lo: 0.0, hi: 9.0 }
    }
}

/// Shannon entropy in bits of the empirical distribution of `values`.
pub fn shannon_entropy<T: Scalar>(values: &[T], scheme: EntropyScheme) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("entropy of an empty sample".into()));
    }
    let mut counts: HashMap<i64, usize> = HashMap::new();
    match scheme {
        EntropyScheme::Discrete => {
            for v in values {
                // +0.0 folds -0.0 into 0.0
                let key = (v.as_f64() + 0.0).to_bits() as i64;
                *counts.entry(key).or_default() += 1;
            }
        }
        EntropyScheme::Binned { width, lo, hi } => {
            if !(width > 0.0) || !(hi > lo) {
                return Err(Error::InvalidArgument(format!("bin width {width} over [{lo}, {hi}] is not valid")));
            }
            let bins = ((hi - lo) / width).ceil() as i64;
            for v in values {
                let b = ((v.as_f64() - lo) / width).floor() as i64;
                *counts.entry(b.clamp(0, bins - 1)).or_default() += 1;
            }
        }
    }
    let n = values.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_zero_bits() {
        assert_eq!(shannon_entropy(&[3.0; 10], EntropyScheme::Discrete).unwrap(), 0.0);
        assert_eq!(shannon_entropy(&[3.1, 3.15, 3.2], EntropyScheme::ratings()).unwrap(), 0.0);
    }

    #[test]
    fn ten_integers_give_log2_ten() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let h = shannon_entropy(&v, EntropyScheme::Discrete).unwrap();
        assert!((h - 10f64.log2()).abs() < 1e-12);
        let hb = shannon_entropy(&v, EntropyScheme::ratings()).unwrap();
        assert!((hb - 10f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn binned_maximum_is_log2_36() {
        let v: Vec<f64> = (0..36).map(|i| i as f64 * 0.25 + 0.1).collect();
        let h = shannon_entropy(&v, EntropyScheme::ratings()).unwrap();
        assert!((h - 36f64.log2()).abs() < 1e-12);
        // 9.0 lands in the last bin
        let edge = shannon_entropy(&[8.9, 9.0], EntropyScheme::ratings()).unwrap();
        assert_eq!(edge, 0.0);
    }

    #[test]
    fn invalid_scheme() {
        let bad = EntropyScheme::Binned { width: 0.0, lo: 0.0, hi: 9.0 };
        assert!(shannon_entropy(&[1.0], bad).is_err());
        assert!(shannon_entropy::<f64>(&[], EntropyScheme::Discrete).is_err());
    }
}
