//! Numeric self-reports from the logits of the first generated token.
//!
//! Each digit `i` owns a set of vocabulary tokens; its score is the
//! log-sum-exp of their logits. The ten scores give a softmax distribution
//! over ratings 0..=9, from which the greedy digit, a sampled digit and the
//! probability-weighted expected rating are read.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DIGITS: usize = 10;

/// Vocabulary token ids that spell each digit as a single token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigitTokenMap {
    sets: [Vec<u32>; DIGITS],
}

impl DigitTokenMap {
    pub fn new(sets: [Vec<u32>; DIGITS], vocab_size: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for (digit, ids) in sets.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::InvalidDigitMap(format!("digit {digit} has no tokens")));
            }
            for &id in ids {
                if id as usize >= vocab_size {
                    return Err(Error::InvalidDigitMap(format!(
                        "token {id} for digit {digit} outside vocabulary of {vocab_size}"
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::InvalidDigitMap(format!("token {id} assigned to more than one digit")));
                }
            }
        }
        Ok(Self { sets })
    }

    /// Digit `i` maps to token id `i`.
    pub fn identity(vocab_size: usize) -> Result<Self> {
        Self::new(std::array::from_fn(|i| vec![i as u32]), vocab_size)
    }

    pub fn tokens(&self, digit: usize) -> &[u32] {
        &self.sets[digit]
    }

    pub fn max_token(&self) -> u32 {
        self.sets.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Serialized form: `{"0": [ids], ..., "9": [ids]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, &Vec<u32>> =
            self.sets.iter().enumerate().map(|(i, ids)| (i.to_string(), ids)).collect();
        serde_json::to_value(map).expect("digit map serializes")
    }

    pub fn from_json(value: &serde_json::Value, vocab_size: usize) -> Result<Self> {
        let map: BTreeMap<String, Vec<u32>> = serde_json::from_value(value.clone())?;
        let mut sets: [Vec<u32>; DIGITS] = Default::default();
        for (k, ids) in map {
            let digit: usize = k
                .parse()
                .ok()
                .filter(|d| *d < DIGITS)
                .ok_or_else(|| Error::InvalidDigitMap(format!("unexpected key `{k}`")))?;
            sets[digit] = ids;
        }
        Self::new(sets, vocab_size)
    }
}

/// Aggregated digit scores `s_0..s_9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DigitLogits<T> {
    s: [T; DIGITS],
}

impl<T: Scalar> DigitLogits<T> {
    pub fn new(s: [T; DIGITS]) -> Result<Self> {
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("digit score s_{i}")));
        }
        Ok(Self { s })
    }

    pub fn scores(&self) -> &[T; DIGITS] {
        &self.s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SelfReport<T> {
    pub greedy: u8,
    /// Unset until a draw is made with [`sample_rating`].
    pub sampled: Option<u8>,
    pub expected: T,
    pub probs: [T; DIGITS],
}

fn logsumexp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// `s_i = logsumexp { logits[t] : t in T_i }`.
pub fn aggregate_digit_logits<T: Scalar>(full_logits: &[T], map: &DigitTokenMap) -> Result<DigitLogits<T>> {
    if map.max_token() as usize >= full_logits.len() {
        return Err(Error::DimensionMismatch(format!(
            "digit map references token {} but logits have length {}",
            map.max_token(),
            full_logits.len()
        )));
    }
    let mut s = [T::zero(); DIGITS];
    for (digit, slot) in s.iter_mut().enumerate() {
        let ids = map.tokens(digit);
        if let Some(&bad) = ids.iter().find(|&&t| !full_logits[t as usize].is_finite()) {
            return Err(Error::NonFinite(format!("logit of token {bad} (digit {digit})")));
        }
        *slot = logsumexp(ids.iter().map(|&t| full_logits[t as usize]));
    }
    DigitLogits::new(s)
}

fn softmax<T: Scalar>(s: &[T; DIGITS], temperature: T) -> [T; DIGITS] {
    let m = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut p = s.map(|x| ((x - m) / temperature).exp());
    let z: T = p.iter().copied().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Index of the largest score; the lowest digit wins ties.
pub fn greedy_digit<T: Scalar>(d: &DigitLogits<T>) -> u8 {
    let mut best = 0;
    for i in 1..DIGITS {
        if d.s[i] > d.s[best] {
            best = i;
        }
    }
    best as u8
}

/// Softmax over the ten digit scores and the probability-weighted rating.
pub fn expected_rating<T: Scalar>(d: &DigitLogits<T>) -> SelfReport<T> {
    let probs = softmax(&d.s, T::one());
    let expected =
        probs.iter().enumerate().map(|(i, &p)| T::from_usize_lossy(i) * p).sum::<T>().max(T::zero()).min(T::lit(9.0));
    SelfReport { greedy: greedy_digit(d), sampled: None, expected, probs }
}

/// Draws a digit from `softmax(s / temperature)`.
pub fn sample_rating<T: Scalar, R: Rng + ?Sized>(d: &DigitLogits<T>, temperature: T, rng: &mut R) -> Result<u8> {
    if !(temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let p = softmax(&d.s, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi.as_f64();
        if u < acc {
            return Ok(i as u8);
        }
    }
    // Rounding left `acc` just below 1; fall back to the last non-zero digit.
    Ok(p.iter().rposition(|&x| x > T::zero()).unwrap_or(0) as u8)
}

pub fn sample_rating_seeded<T: Scalar>(d: &DigitLogits<T>, temperature: T, seed: u64) -> Result<u8> {
    sample_rating(d, temperature, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Number of distinct values; continuous ratings are rounded to 1e-6 first.
pub fn distinct_value_count(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no reports to count".into()));
    }
    let set: HashSet<i64> = values.iter().map(|v| (v * 1e6).round() as i64).collect();
    Ok(set.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn logits(s: [f64; 10]) -> DigitLogits<f64> {
        DigitLogits::new(s).unwrap()
    }

    #[test]
    fn singleton_map_passes_logits_through() {
        let map = DigitTokenMap::identity(12).unwrap();
        let full: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let d = aggregate_digit_logits(&full, &map).unwrap();
        for i in 0..10 {
            assert_eq!(d.scores()[i], full[i]);
        }
    }

    #[test]
    fn two_zero_logits_give_ln2() {
        let mut sets: [Vec<u32>; 10] = std::array::from_fn(|i| vec![i as u32]);
        sets[7] = vec![7, 10];
        let map = DigitTokenMap::new(sets, 11).unwrap();
        let mut full = vec![1.0; 11];
        full[7] = 0.0;
        full[10] = 0.0;
        let d = aggregate_digit_logits(&full, &map).unwrap();
        assert!((d.scores()[7] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_multi_token_map_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sets: [Vec<u32>; 10] = std::array::from_fn(|i| vec![i as u32, 10 + i as u32, 20 + i as u32]);
        let map = DigitTokenMap::new(sets.clone(), 30).unwrap();
        for _ in 0..50 {
            let full: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = aggregate_digit_logits(&full, &map).unwrap();
            for (i, ids) in sets.iter().enumerate() {
                let naive = ids.iter().map(|&t| full[t as usize].exp()).sum::<f64>().ln();
                assert!((d.scores()[i] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_validation() {
        let mut sets: [Vec<u32>; 10] = std::array::from_fn(|i| vec![i as u32]);
        sets[3].push(4);
        assert!(DigitTokenMap::new(sets, 10).is_err());
        let mut sets: [Vec<u32>; 10] = std::array::from_fn(|i| vec![i as u32]);
        sets[0].clear();
        assert!(DigitTokenMap::new(sets, 10).is_err());
        assert!(DigitTokenMap::identity(9).is_err());
    }

    #[test]
    fn map_json_round_trip() {
        let sets: [Vec<u32>; 10] = std::array::from_fn(|i| vec![i as u32, 40 + i as u32]);
        let map = DigitTokenMap::new(sets, 64).unwrap();
        let back = DigitTokenMap::from_json(&map.to_json(), 64).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn non_finite_mapped_logit_rejected() {
        let map = DigitTokenMap::identity(10).unwrap();
        let mut full = vec![0.0; 10];
        full[4] = f64::NAN;
        assert!(matches!(aggregate_digit_logits(&full, &map), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_scores_expect_four_and_a_half() {
        let r = expected_rating(&logits([0.3; 10]));
        assert!((r.expected - 4.5).abs() < 1e-9);
        assert_eq!(r.greedy, 0);
    }

    #[test]
    fn near_one_hot_expect_seven() {
        let mut s = [0.0; 10];
        s[7] = 30.0;
        assert!((expected_rating(&logits(s)).expected - 7.0).abs() < 1e-9);
    }

    #[test]
    fn ln9_on_nine_gives_six_and_a_half() {
        let mut s = [0.0; 10];
        s[9] = 9f64.ln();
        let r = expected_rating(&logits(s));
        assert!((r.probs[9] - 0.5).abs() < 1e-12);
        assert!((r.probs[0] - 1.0 / 18.0).abs() < 1e-12);
        assert!((r.expected - 6.5).abs() < 1e-9);
    }

    #[test]
    fn greedy_tie_breaks_low() {
        let mut s = [0.0; 10];
        s[3] = 2.0;
        s[8] = 2.0;
        assert_eq!(expected_rating(&logits(s)).greedy, 3);
    }

    #[test]
    fn sampling_limits() {
        let mut s = [0.0; 10];
        s[6] = 0.4;
        s[2] = 0.3;
        let d = logits(s);
        for seed in 0..50 {
            assert_eq!(sample_rating_seeded(&d, 1e-6, seed).unwrap(), 6);
        }
        let mut s = [0.0; 10];
        s[4] = 30.0;
        for seed in 0..50 {
            assert_eq!(sample_rating_seeded(&logits(s), 0.8, seed).unwrap(), 4);
        }
        assert!(sample_rating_seeded(&d, 0.0, 1).is_err());
        assert!(sample_rating_seeded(&d, -1.0, 1).is_err());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let d = logits([1.0; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[sample_rating(&d, 0.8, &mut rng).unwrap() as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn distinct_counts() {
        assert_eq!(distinct_value_count(&[2.0, 2.0, 2.0]).unwrap(), 1);
        assert_eq!(distinct_value_count(&[3.0, 5.0, 3.0, 7.0]).unwrap(), 3);
        assert_eq!(distinct_value_count(&[4.1234561, 4.1234562]).unwrap(), 1);
        assert!(distinct_value_count(&[]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let mut s = [0.0f32; 10];
        s[9] = 9f32.ln();
        let r = expected_rating(&DigitLogits::new(s).unwrap());
        assert!((r.expected - 6.5).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn shift_invariance(s in prop::array::uniform10(-20.0f64..20.0), c in -100.0f64..100.0) {
            let a = expected_rating(&logits(s));
            let b = expected_rating(&logits(s.map(|x| x + c)));
            prop_assert!((a.expected - b.expected).abs() < 1e-9);
            prop_assert_eq!(a.greedy, b.greedy);
            for i in 0..10 {
                prop_assert!((a.probs[i] - b.probs[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn report_invariants(s in prop::array::uniform10(-50.0f64..50.0)) {
            let r = expected_rating(&logits(s));
            let total: f64 = r.probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let ev: f64 = r.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
            prop_assert!((ev - r.expected).abs() < 1e-9);
            prop_assert!((0.0..=9.0).contains(&r.expected));
        }

        #[test]
        fn raising_one_score_raises_its_probability(
            s in prop::array::uniform10(-5.0f64..5.0),
            k in 0usize..10,
            bump in 0.01f64..3.0,
        ) {
            let before = expected_rating(&logits(s));
            let mut t = s;
            t[k] += bump;
            let after = expected_rating(&logits(t));
            prop_assert!(after.probs[k] > before.probs[k]);
            // Expected value moves toward k.
            let k = k as f64;
            prop_assert!((after.expected - k).abs() <= (before.expected - k).abs() + 1e-12);
        }
    }
}
