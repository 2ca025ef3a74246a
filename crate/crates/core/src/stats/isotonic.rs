use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DEGENERATE_VARIANCE;

struct Block<T> {
    sum: T,
    weight: T,
    /// Range of tie groups covered, in x order.
    start: usize,
    end: usize,
}

impl<T: Scalar> Block<T> {
    fn mean(&self) -> T {
        self.sum / self.weight
    }
}

/// Least-squares non-decreasing fit of `y` against `x` by pool-adjacent-violators.
///
/// Observations with equal `x` are first pooled into one weighted block, so
/// they always receive the same fitted value. The result is in input order.
pub fn isotonic_fit<T: Scalar>(x: &[T], y: &[T]) -> Result<Vec<T>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "isotonic fit needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("isotonic input".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite"));

    // tie groups: (first index into `order`, one past last)
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if x[order[g.0]] == x[i] => g.1 = pos + 1,
            _ => groups.push((pos, pos + 1)),
        }
    }

    let mut stack: Vec<Block<T>> = Vec::with_capacity(groups.len());
    for (gi, &(a, b)) in groups.iter().enumerate() {
        let sum = order[a..b].iter().map(|&i| y[i]).sum::<T>();
        let mut block = Block { sum, weight: T::from_usize_lossy(b - a), start: gi, end: gi + 1 };
        while let Some(prev) = stack.last() {
            if prev.mean() > block.mean() {
                let prev = stack.pop().expect("non-empty");
                block = Block {
                    sum: prev.sum + block.sum,
                    weight: prev.weight + block.weight,
                    start: prev.start,
                    end: block.end,
                };
            } else {
                break;
            }
        }
        stack.push(block);
    }

    let mut fitted = vec![T::zero(); x.len()];
    for block in &stack {
        let m = block.mean();
        for &(a, b) in &groups[block.start..block.end] {
            for &i in &order[a..b] {
                fitted[i] = m;
            }
        }
    }
    Ok(fitted)
}

/// `1 - SS_res / SS_tot` of the isotonic fit.
pub fn isotonic_r2<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    let fitted = isotonic_fit(x, y)?;
    let n = y.len() as f64;
    let my = y.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v.as_f64() - my).powi(2)).sum();
    if ss_tot < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance("isotonic R² of a constant response".into()));
    }
    let ss_res: f64 = y.iter().zip(&fitted).map(|(v, f)| (v.as_f64() - f.as_f64()).powi(2)).sum();
    // the constant fit is feasible, so anything below zero is rounding
    Ok((1.0 - ss_res / ss_tot).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn already_monotone_is_unchanged() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [0.5, 0.5, 2.0, 7.0];
        assert_eq!(isotonic_fit(&x, &y).unwrap(), y.to_vec());
        assert!((isotonic_r2(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn decreasing_collapses_to_mean() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(isotonic_fit(&x, &y).unwrap(), vec![2.5; 4]);
        assert_eq!(isotonic_r2(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn hand_case() {
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0];
        assert_eq!(isotonic_fit(&x, &y).unwrap(), vec![1.0, 2.5, 2.5]);
        assert!((isotonic_r2(&x, &y).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn unsorted_x_and_ties() {
        let x = [3.0, 1.0, 2.0, 2.0];
        let y = [5.0, 1.0, 4.0, 0.0];
        // tie block at x=2 pools to 2.0
        assert_eq!(isotonic_fit(&x, &y).unwrap(), vec![5.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_response_is_degenerate() {
        assert!(matches!(isotonic_r2(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn no_perturbation_beats_the_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.2 * v + rng.random_range(-2.0..2.0)).collect();
        let fit = isotonic_fit(&x, &y).unwrap();
        let sse = |f: &[f64]| f.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = sse(&fit);
        for _ in 0..1000 {
            let mut g: Vec<f64> = fit.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            // restore monotonicity with a running max
            for i in 1..g.len() {
                if g[i] < g[i - 1] {
                    g[i] = g[i - 1];
                }
            }
            assert!(sse(&g) >= best - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn idempotent_mean_preserving_monotone(
            pts in prop::collection::vec((0u8..6, -5.0f64..5.0), 2..40)
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let f = isotonic_fit(&x, &y).unwrap();
            let again = isotonic_fit(&x, &f).unwrap();
            for (a, b) in f.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let my: f64 = y.iter().sum::<f64>() / y.len() as f64;
            let mf: f64 = f.iter().sum::<f64>() / f.len() as f64;
            prop_assert!((my - mf).abs() < 1e-9);
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x[i] < x[j] {
                        prop_assert!(f[i] <= f[j] + 1e-12);
                    }
                    if x[i] == x[j] {
                        prop_assert!((f[i] - f[j]).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn r2_at_least_squared_pearson_for_linear_fit(
            y in prop::collection::vec(-5.0f64..5.0, 3..30)
        ) {
            let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
            if let (Ok(r2), Ok(r)) = (isotonic_r2(&x, &y), crate::stats::pearson(&x, &y)) {
                if r > 0.0 {
                    prop_assert!(r2 >= r * r - 1e-9);
                }
            }
        }
    }
}
