//! Summaries over observation sets: drift, introspection strength,
//! cross-steering screens, entropy decomposition, sign validation and
//! scaling across model sizes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    bh_correct, cluster_bootstrap, derive_seed, exact_alpha_permutation, exact_alpha_permutation_two_sided,
    isotonic_r2, ols_fit, paired_cluster_bootstrap, shannon_entropy, spearman_rho, trend_with_fallback,
    BootstrapResult, ClusteredSample, EntropyScheme, Fallback, OlsFit, TrendMethod, TrendTest, DEGENERATE_VARIANCE,
};
use crate::tensorio::Observation;

/// Family-wise false discovery rate for BH corrections.
pub const FDR_LEVEL: f64 = 0.05;
/// Significance level of single tests such as sign validation.
pub const SIGNIFICANCE: f64 = 0.05;
/// Minimum conversations for per-turn summaries.
pub const MIN_CONVERSATIONS_PER_TURN: usize = 5;
/// Minimum pooled observations for an introspection summary.
pub const MIN_POOLED_OBSERVATIONS: usize = 10;
/// Probe-score entropy uses this many equal-width bins over the pooled range.
pub const PROBE_ENTROPY_BINS: usize = 36;

/// Suffix that marks a random-direction control concept.
pub const CONTROL_SUFFIX: &str = "#random";

pub fn is_control(concept: &str) -> bool {
    concept.ends_with(CONTROL_SUFFIX)
}

pub fn control_name(concept: &str) -> String {
    format!("{concept}{CONTROL_SUFFIX}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Probe,
    LogitReport,
    Greedy,
    Sampled,
}

impl Channel {
    pub fn value(self, o: &Observation) -> Result<f64> {
        Ok(match self {
            Channel::Probe => o.probe_score_prev,
            Channel::LogitReport => o.report.expected,
            Channel::Greedy => f64::from(o.report.greedy),
            Channel::Sampled => {
                f64::from(o.report.sampled.ok_or_else(|| Error::Missing(format!("sampled rating in {}", describe(o))))?)
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Probe => "probe",
            Channel::LogitReport => "logit_report",
            Channel::Greedy => "greedy",
            Channel::Sampled => "sampled",
        }
    }
}

fn describe(o: &Observation) -> String {
    format!("{} turn {} ({})", o.conversation_id, o.turn, o.concept)
}

/// Bootstrap point estimate with its percentile interval and p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p: f64,
}

impl Estimate {
    /// Widens the interval to include the point estimate when skewed
    /// replicate distributions leave it outside.
    pub fn from_bootstrap(r: &BootstrapResult) -> Self {
        Estimate { value: r.point, ci_lo: r.ci_lo.min(r.point), ci_hi: r.ci_hi.max(r.point), p: r.p_two_sided }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.ci_lo <= v && v <= self.ci_hi
    }
}

/// Concept names in order of first appearance.
pub fn concepts(observations: &[Observation]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for o in observations {
        if !out.contains(&o.concept) {
            out.push(o.concept.clone());
        }
    }
    out
}

/// Unsteered measurements of `concept`: alpha-zero rows, one per
/// (conversation, turn), preferring rows without a steering concept, then
/// self-steered rows, then any other.
pub fn baseline<'a>(observations: &'a [Observation], concept: &str) -> Vec<&'a Observation> {
    let rank = |o: &Observation| match o.steer_concept.as_deref() {
        None => 0,
        Some(s) if s == concept => 1,
        Some(_) => 2,
    };
    let mut chosen: Vec<&Observation> = Vec::new();
    let mut slot: HashMap<(&str, usize), usize> = HashMap::new();
    for o in observations.iter().filter(|o| o.concept == concept && o.alpha == 0.0) {
        match slot.get(&(o.conversation_id.as_str(), o.turn)) {
            Some(&i) if rank(chosen[i]) <= rank(o) => {}
            Some(&i) => chosen[i] = o,
            None => {
                slot.insert((o.conversation_id.as_str(), o.turn), chosen.len());
                chosen.push(o);
            }
        }
    }
    chosen
}

/// Trend test that reports "no trend" for a constant response instead of
/// surfacing a degenerate fit.
pub fn trend_or_flat(x: &[f64], y: &[f64], clusters: &[&str], fallback: Fallback) -> Result<TrendTest> {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y.is_empty() || hi - lo < DEGENERATE_VARIANCE {
        return Ok(TrendTest {
            method: match fallback {
                Fallback::PerClusterSlope => TrendMethod::PerClusterSlope,
                Fallback::PerClusterCorrelation => TrendMethod::PerClusterCorrelation,
            },
            estimate: 0.0,
            statistic: 0.0,
            p: 1.0,
        });
    }
    trend_with_fallback(x, y, clusters, fallback)
}

fn distinct_count<'a>(items: impl Iterator<Item = &'a str>) -> usize {
    let mut v: Vec<&str> = items.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub concept: String,
    pub channel: Channel,
    pub n_observations: usize,
    pub n_conversations: usize,
    pub trend: TrendTest,
    pub first_turn: usize,
    pub last_turn: usize,
    pub first_turn_mean: f64,
    pub last_turn_mean: f64,
    /// Last-turn mean minus first-turn mean.
    pub first_to_last_delta: f64,
}

/// Turn slope of a channel per concept on unsteered measurements.
pub fn drift_summary(observations: &[Observation], channel: Channel) -> Result<Vec<DriftResult>> {
    concepts(observations).into_iter().map(|c| drift_one(&baseline(observations, &c), &c, channel)).collect()
}

fn drift_one(obs: &[&Observation], concept: &str, channel: Channel) -> Result<DriftResult> {
    let n_conv = distinct_count(obs.iter().map(|o| o.conversation_id.as_str()));
    let first_turn = obs.iter().map(|o| o.turn).min().unwrap_or(0);
    let last_turn = obs.iter().map(|o| o.turn).max().unwrap_or(0);
    if n_conv < 3 || first_turn == last_turn {
        return Err(Error::InvalidArgument(format!(
            "drift of `{concept}` needs 2 turns and 3 conversations, found turns {first_turn}..={last_turn} in {n_conv} conversations"
        )));
    }
    let x: Vec<f64> = obs.iter().map(|o| o.turn as f64).collect();
    let y = obs.iter().map(|o| channel.value(o)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = obs.iter().map(|o| o.conversation_id.as_str()).collect();
    let trend = trend_or_flat(&x, &y, &ids, Fallback::PerClusterSlope)?;
    let mean_at = |t: usize| {
        let v: Vec<f64> = obs.iter().zip(&y).filter(|(o, _)| o.turn == t).map(|(_, &v)| v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (mean_at(first_turn), mean_at(last_turn));
    Ok(DriftResult {
        concept: concept.to_string(),
        channel,
        n_observations: obs.len(),
        n_conversations: n_conv,
        trend,
        first_turn,
        last_turn,
        first_turn_mean: first,
        last_turn_mean: last,
        first_to_last_delta: last - first,
    })
}

fn rho_stat(s: &ClusteredSample) -> Result<f64> {
    spearman_rho(&s.x, &s.y)
}

fn r2_stat(s: &ClusteredSample) -> Result<f64> {
    isotonic_r2(&s.x, &s.y)
}

/// `(probe_score_prev, expected rating)` pairs clustered by conversation.
pub fn coupling_sample(obs: &[&Observation]) -> Result<ClusteredSample> {
    ClusteredSample::pairs(
        obs.iter().map(|o| o.probe_score_prev).collect(),
        obs.iter().map(|o| o.report.expected).collect(),
        &obs.iter().map(|o| o.conversation_id.as_str()).collect::<Vec<_>>(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub turn: usize,
    pub n: usize,
    /// `None` when the turn's data were too degenerate to bootstrap.
    pub rho: Option<Estimate>,
    pub iso_r2: Option<Estimate>,
}

/// True-probe minus random-direction-probe coupling, paired by conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlContrast {
    pub control_concept: String,
    pub control_rho: Estimate,
    pub control_iso_r2: Estimate,
    pub delta_rho: Estimate,
    pub delta_iso_r2: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionSummary {
    pub concept: String,
    pub n_observations: usize,
    pub n_conversations: usize,
    pub rho: Estimate,
    pub iso_r2: Estimate,
    pub per_turn: Vec<TurnSummary>,
    pub per_turn_suppressed: bool,
    pub control: Option<ControlContrast>,
    /// BH-adjusted p of `rho` and `iso_r2` across the concept family.
    pub q_rho: Option<f64>,
    pub q_iso_r2: Option<f64>,
}

/// Pooled and per-turn coupling between probe scores and expected ratings
/// for the given measurements of one concept.
pub fn introspection_summary(observations: &[&Observation], b: usize, seed: u64) -> Result<IntrospectionSummary> {
    let Some(first) = observations.first() else {
        return Err(Error::InvalidArgument("no observations".into()));
    };
    if observations.len() < MIN_POOLED_OBSERVATIONS {
        return Err(Error::InvalidArgument(format!(
            "introspection summary needs {MIN_POOLED_OBSERVATIONS} observations, got {}",
            observations.len()
        )));
    }
    let sample = coupling_sample(observations)?;
    let rho = Estimate::from_bootstrap(&cluster_bootstrap(&sample, rho_stat, b, derive_seed(seed, 0))?);
    let iso_r2 = Estimate::from_bootstrap(&cluster_bootstrap(&sample, r2_stat, b, derive_seed(seed, 1))?);
    let n_conv = sample.cluster_count();
    let suppressed = n_conv < MIN_CONVERSATIONS_PER_TURN;
    let mut per_turn = Vec::new();
    if suppressed {
        log::warn!(
            "`{}`: per-turn summaries need {MIN_CONVERSATIONS_PER_TURN} conversations, found {n_conv}",
            first.concept
        );
    } else {
        let mut turns: Vec<usize> = observations.iter().map(|o| o.turn).collect();
        turns.sort_unstable();
        turns.dedup();
        for t in turns {
            let at: Vec<&Observation> = observations.iter().copied().filter(|o| o.turn == t).collect();
            let s = coupling_sample(&at)?;
            let turn_seed = derive_seed(seed, 100 + t as u64);
            let est = |stat: fn(&ClusteredSample) -> Result<f64>, k| {
                cluster_bootstrap(&s, stat, b, derive_seed(turn_seed, k))
                    .map(|r| Estimate::from_bootstrap(&r))
                    .map_err(|e| log::warn!("`{}` turn {t}: {e}", first.concept))
                    .ok()
            };
            per_turn.push(TurnSummary { turn: t, n: at.len(), rho: est(rho_stat, 0), iso_r2: est(r2_stat, 1) });
        }
    }
    Ok(IntrospectionSummary {
        concept: first.concept.clone(),
        n_observations: observations.len(),
        n_conversations: n_conv,
        rho,
        iso_r2,
        per_turn,
        per_turn_suppressed: suppressed,
        control: None,
        q_rho: None,
        q_iso_r2: None,
    })
}

/// Introspection summaries of every non-control concept on unsteered data,
/// with random-direction contrasts when control concepts are present and BH
/// correction across the family.
pub fn introspection_family(observations: &[Observation], b: usize, seed: u64) -> Result<Vec<IntrospectionSummary>> {
    let names: Vec<String> = concepts(observations).into_iter().filter(|c| !is_control(c)).collect();
    let mut out = Vec::with_capacity(names.len());
    for (i, c) in names.iter().enumerate() {
        let cseed = derive_seed(seed, i as u64);
        let base = baseline(observations, c);
        let mut summary = introspection_summary(&base, b, cseed)?;
        let ctrl_name = control_name(c);
        let ctrl = baseline(observations, &ctrl_name);
        if !ctrl.is_empty() {
            let (a, z) = (coupling_sample(&base)?, coupling_sample(&ctrl)?);
            let boot = |stat: fn(&ClusteredSample) -> Result<f64>, k| -> Result<Estimate> {
                Ok(Estimate::from_bootstrap(&cluster_bootstrap(&z, stat, b, derive_seed(cseed, k))?))
            };
            let paired = |stat: fn(&ClusteredSample) -> Result<f64>, k| -> Result<Estimate> {
                Ok(Estimate::from_bootstrap(&paired_cluster_bootstrap(&a, &z, stat, b, derive_seed(cseed, k))?))
            };
            summary.control = Some(ControlContrast {
                control_concept: ctrl_name,
                control_rho: boot(rho_stat, 2)?,
                control_iso_r2: boot(r2_stat, 3)?,
                delta_rho: paired(rho_stat, 4)?,
                delta_iso_r2: paired(r2_stat, 5)?,
            });
        }
        out.push(summary);
    }
    if !out.is_empty() {
        let q_rho = bh_correct(&out.iter().map(|s| s.rho.p).collect::<Vec<_>>(), FDR_LEVEL)?.q;
        let q_r2 = bh_correct(&out.iter().map(|s| s.iso_r2.p).collect::<Vec<_>>(), FDR_LEVEL)?.q;
        for (s, (a, b)) in out.iter_mut().zip(q_rho.into_iter().zip(q_r2)) {
            s.q_rho = Some(a);
            s.q_iso_r2 = Some(b);
        }
    }
    Ok(out)
}

/// Observations of each (steering concept, measured concept) pair, keyed
/// in order of first appearance. Rows without a steering concept are skipped.
fn steering_pairs(observations: &[Observation]) -> Vec<((String, String), Vec<&Observation>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&Observation>> = HashMap::new();
    for o in observations {
        let Some(s) = &o.steer_concept else { continue };
        let key = (s.clone(), o.concept.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(o);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

/// Splits a pair's observations by alpha in the order of `alphas`.
fn by_alpha<'a>(obs: &[&'a Observation], alphas: &[f64], pair: &(String, String)) -> Result<Vec<Vec<&'a Observation>>> {
    alphas
        .iter()
        .map(|&a| {
            let v: Vec<&Observation> = obs.iter().copied().filter(|o| o.alpha == a).collect();
            if v.is_empty() {
                Err(Error::Missing(format!("alpha {a} for steering {} -> {}", pair.0, pair.1)))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Distinct alphas in ascending order.
pub fn alpha_grid(observations: &[Observation]) -> Vec<f64> {
    let mut a: Vec<f64> = observations.iter().map(|o| o.alpha).collect();
    a.sort_by(f64::total_cmp);
    a.dedup();
    a
}

fn zero_index(alphas: &[f64]) -> Result<usize> {
    alphas.iter().position(|&a| a == 0.0).ok_or_else(|| Error::Missing("alpha 0 in the steering grid".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCell {
    pub steer_concept: String,
    pub measured_concept: String,
    pub alphas: Vec<f64>,
    pub iso_r2_by_alpha: Vec<f64>,
    /// `R²(alpha) - R²(0)`.
    pub delta_r2_by_alpha: Vec<f64>,
    pub best_alpha: f64,
    pub max_delta_r2: f64,
    /// Paired cluster-bootstrap interval and p of the best delta.
    pub max_delta: Estimate,
    pub q: f64,
    pub significant: bool,
    /// Expected rating against alpha within conversations.
    pub report_trend: TrendTest,
    /// Exact two-sided permutation p of the R² series over five alphas.
    pub r2_permutation_p: Option<f64>,
}

/// Largest isotonic-R² gain over alpha 0 for every steering pair.
pub fn cross_steering_matrix(
    observations: &[Observation],
    alphas: &[f64],
    b: usize,
    seed: u64,
) -> Result<Vec<CrossCell>> {
    let z = zero_index(alphas)?;
    let mut cells = Vec::new();
    for (i, (pair, obs)) in steering_pairs(observations).into_iter().enumerate() {
        if is_control(&pair.1) {
            continue;
        }
        let split = by_alpha(&obs, alphas, &pair)?;
        let samples = split.iter().map(|v| coupling_sample(v)).collect::<Result<Vec<_>>>()?;
        let r2 = samples.iter().map(r2_stat).collect::<Result<Vec<_>>>()?;
        let delta: Vec<f64> = r2.iter().map(|v| v - r2[z]).collect();
        let mut best = None;
        for (k, &d) in delta.iter().enumerate() {
            if k != z && best.is_none_or(|j: usize| d > delta[j]) {
                best = Some(k);
            }
        }
        let best = best.ok_or_else(|| Error::Missing("a non-zero alpha".into()))?;
        let boot = paired_cluster_bootstrap(&samples[best], &samples[z], r2_stat, b, derive_seed(seed, i as u64))?;
        let x: Vec<f64> = obs.iter().map(|o| o.alpha).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.report.expected).collect();
        let ids: Vec<&str> = obs.iter().map(|o| o.conversation_id.as_str()).collect();
        let report_trend = trend_or_flat(&x, &y, &ids, Fallback::PerClusterCorrelation)?;
        let r2_permutation_p =
            (alphas.len() == 5).then(|| exact_alpha_permutation_two_sided(&r2, alphas)).transpose()?;
        cells.push(CrossCell {
            steer_concept: pair.0,
            measured_concept: pair.1,
            alphas: alphas.to_vec(),
            iso_r2_by_alpha: r2,
            best_alpha: alphas[best],
            max_delta_r2: delta[best],
            delta_r2_by_alpha: delta,
            max_delta: Estimate::from_bootstrap(&boot),
            q: f64::NAN,
            significant: false,
            report_trend,
            r2_permutation_p,
        });
    }
    if !cells.is_empty() {
        let bh = bh_correct(&cells.iter().map(|c| c.max_delta.p).collect::<Vec<_>>(), FDR_LEVEL)?;
        for (c, (q, r)) in cells.iter_mut().zip(bh.q.into_iter().zip(bh.reject)) {
            c.q = q;
            c.significant = r;
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub steer_concept: String,
    pub measured_concept: String,
    pub alpha: f64,
    pub n: usize,
    pub probe_entropy: f64,
    pub report_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrend {
    pub steer_concept: String,
    pub measured_concept: String,
    pub channel: Channel,
    /// Per-conversation entropy against alpha.
    pub trend: TrendTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDecomposition {
    pub rows: Vec<EntropyRow>,
    pub trends: Vec<EntropyTrend>,
}

/// Equal-width bins over the pooled probe range; `None` when the range is empty.
fn probe_scheme(values: &[f64]) -> Option<EntropyScheme> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi - lo > DEGENERATE_VARIANCE).then(|| EntropyScheme::Binned {
        width: (hi - lo) / PROBE_ENTROPY_BINS as f64,
        lo,
        hi,
    })
}

fn entropy_or_zero(values: &[f64], scheme: Option<EntropyScheme>) -> Result<f64> {
    match scheme {
        Some(s) => shannon_entropy(values, s),
        None => Ok(0.0),
    }
}

/// Binned probe-score and report entropy per alpha for each steering pair,
/// with trend tests on per-conversation entropies.
pub fn entropy_decomposition(observations: &[Observation], alphas: &[f64]) -> Result<EntropyDecomposition> {
    zero_index(alphas)?;
    let mut rows = Vec::new();
    let mut trends = Vec::new();
    for (pair, obs) in steering_pairs(observations) {
        if is_control(&pair.1) {
            continue;
        }
        let split = by_alpha(&obs, alphas, &pair)?;
        let probe_all: Vec<f64> = obs.iter().map(|o| o.probe_score_prev).collect();
        let probe_bins = probe_scheme(&probe_all);
        let report_bins = Some(EntropyScheme::ratings());
        for (&alpha, at) in alphas.iter().zip(&split) {
            let p: Vec<f64> = at.iter().map(|o| o.probe_score_prev).collect();
            let r: Vec<f64> = at.iter().map(|o| o.report.expected).collect();
            rows.push(EntropyRow {
                steer_concept: pair.0.clone(),
                measured_concept: pair.1.clone(),
                alpha,
                n: at.len(),
                probe_entropy: entropy_or_zero(&p, probe_bins)?,
                report_entropy: entropy_or_zero(&r, report_bins)?,
            });
        }
        for (channel, scheme) in [(Channel::Probe, probe_bins), (Channel::LogitReport, report_bins)] {
            // one entropy per (conversation, alpha)
            let mut per: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
            for (k, at) in split.iter().enumerate() {
                for o in at {
                    per.entry((k, o.conversation_id.clone())).or_default().push(channel.value(o)?);
                }
            }
            let mut x = Vec::with_capacity(per.len());
            let mut y = Vec::with_capacity(per.len());
            let mut ids = Vec::with_capacity(per.len());
            for ((k, conv), values) in &per {
                x.push(alphas[*k]);
                y.push(entropy_or_zero(values, scheme)?);
                ids.push(conv.as_str());
            }
            trends.push(EntropyTrend {
                steer_concept: pair.0.clone(),
                measured_concept: pair.1.clone(),
                channel,
                trend: trend_or_flat(&x, &y, &ids, Fallback::PerClusterSlope)?,
            });
        }
    }
    Ok(EntropyDecomposition { rows, trends })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignValidation {
    pub concept: String,
    /// Pooled Spearman rho of alpha against expected rating; 0 when the
    /// ratings do not vary.
    pub rho: f64,
    pub trend: TrendTest,
    pub mean_by_alpha: Vec<f64>,
    /// One-sided exact permutation p of an increasing mean over five alphas.
    pub permutation_p: Option<f64>,
    pub passed: bool,
}

/// Self-steering check: ratings must rise with alpha.
pub fn steering_sign_validation(observations: &[Observation], alphas: &[f64]) -> Result<Vec<SignValidation>> {
    let mut out = Vec::new();
    for (pair, obs) in steering_pairs(observations) {
        if pair.0 != pair.1 {
            continue;
        }
        let split = by_alpha(&obs, alphas, &pair)?;
        let x: Vec<f64> = obs.iter().map(|o| o.alpha).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.report.expected).collect();
        let ids: Vec<&str> = obs.iter().map(|o| o.conversation_id.as_str()).collect();
        let rho = match spearman_rho(&x, &y) {
            Ok(r) => r,
            Err(Error::DegenerateVariance(_)) => 0.0,
            Err(e) => return Err(e),
        };
        let trend = trend_or_flat(&x, &y, &ids, Fallback::PerClusterCorrelation)?;
        let mean_by_alpha: Vec<f64> =
            split.iter().map(|v| v.iter().map(|o| o.report.expected).sum::<f64>() / v.len() as f64).collect();
        let permutation_p = (alphas.len() == 5).then(|| exact_alpha_permutation(&mean_by_alpha, alphas)).transpose()?;
        let passed = rho > 0.0 && trend.estimate > 0.0 && trend.p < SIGNIFICANCE;
        out.push(SignValidation { concept: pair.0, rho, trend, mean_by_alpha, permutation_p, passed });
    }
    Ok(out)
}

/// One model's run for the scaling summary.
#[derive(Debug, Clone)]
pub struct ScalingRun {
    pub label: String,
    /// Parameter count or any positive size measure.
    pub size: f64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub label: String,
    pub size: f64,
    pub validated: Vec<String>,
    pub excluded: Vec<String>,
    /// Mean pooled isotonic R² over validated concepts; `None` when no
    /// concept passed sign validation.
    pub mean_iso_r2: Option<Estimate>,
    /// Per conversation, the mean over validated concepts of that
    /// conversation's isotonic R².
    pub conversation_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub points: Vec<ScalingPoint>,
    /// Conversation-level values regressed on ln(size); needs three sizes.
    pub ols: Option<OlsFit>,
}

/// Mean of per-concept isotonic R² over the tags present in the sample.
fn tagged_mean_r2(s: &ClusteredSample) -> Result<f64> {
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&t, &x), &y) in s.tag.iter().zip(&s.x).zip(&s.y) {
        let g = groups.entry(t).or_default();
        g.0.push(x);
        g.1.push(y);
    }
    let r2 = groups.values().map(|(x, y)| isotonic_r2(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(r2.iter().sum::<f64>() / r2.len() as f64)
}

fn scaling_point(run: &ScalingRun, b: usize, seed: u64) -> Result<ScalingPoint> {
    let alphas = alpha_grid(&run.observations);
    let checks = steering_sign_validation(&run.observations, &alphas)?;
    if checks.is_empty() {
        return Err(Error::Missing(format!("self-steering cells in run `{}`", run.label)));
    }
    let (validated, excluded): (Vec<_>, Vec<_>) = checks.iter().partition(|c| c.passed);
    let validated: Vec<String> = validated.into_iter().map(|c| c.concept.clone()).collect();
    let excluded: Vec<String> = excluded.into_iter().map(|c| c.concept.clone()).collect();
    if validated.is_empty() {
        return Ok(ScalingPoint {
            label: run.label.clone(),
            size: run.size,
            validated,
            excluded,
            mean_iso_r2: None,
            conversation_values: Vec::new(),
        });
    }
    let mut rows: Vec<&Observation> = Vec::new();
    let mut tags = Vec::new();
    for (k, c) in validated.iter().enumerate() {
        let base = baseline(&run.observations, c);
        tags.extend(std::iter::repeat_n(k, base.len()));
        rows.extend(base);
    }
    let sample = coupling_sample(&rows)?.with_tags(tags.clone())?;
    let mean = Estimate::from_bootstrap(&cluster_bootstrap(&sample, tagged_mean_r2, b, seed)?);
    // conversation-level values in first-seen conversation order
    let mut conv_order: Vec<&str> = Vec::new();
    let mut per_conv: HashMap<&str, BTreeMap<usize, (Vec<f64>, Vec<f64>)>> = HashMap::new();
    for (o, &t) in rows.iter().zip(&tags) {
        let id = o.conversation_id.as_str();
        if !per_conv.contains_key(id) {
            conv_order.push(id);
        }
        let g = per_conv.entry(id).or_default().entry(t).or_default();
        g.0.push(o.probe_score_prev);
        g.1.push(o.report.expected);
    }
    let conversation_values = conv_order
        .iter()
        .filter_map(|id| {
            let r2: Vec<f64> = per_conv[id].values().filter_map(|(x, y)| isotonic_r2(x, y).ok()).collect();
            (!r2.is_empty()).then(|| r2.iter().sum::<f64>() / r2.len() as f64)
        })
        .collect();
    Ok(ScalingPoint {
        label: run.label.clone(),
        size: run.size,
        validated,
        excluded,
        mean_iso_r2: Some(mean),
        conversation_values,
    })
}

/// OLS of conversation-level values on ln(size), over points that carry values.
pub fn scaling_regression(points: &[ScalingPoint]) -> Result<Option<OlsFit>> {
    let mut sizes: Vec<f64> = points.iter().filter(|p| !p.conversation_values.is_empty()).map(|p| p.size).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    if sizes.len() < 3 {
        log::warn!("scaling regression needs 3 model sizes, found {}", sizes.len());
        return Ok(None);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for p in points {
        if !(p.size > 0.0) {
            return Err(Error::InvalidArgument(format!("model size {} of `{}` is not positive", p.size, p.label)));
        }
        for &v in &p.conversation_values {
            x.push(p.size.ln());
            y.push(v);
        }
    }
    ols_fit(&x, &y).map(Some)
}

/// Validated-mean isotonic R² per model and its regression on log size.
pub fn scaling_summary(runs: &[ScalingRun], b: usize, seed: u64) -> Result<ScalingSummary> {
    let points = runs
        .iter()
        .enumerate()
        .map(|(i, r)| scaling_point(r, b, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let ols = scaling_regression(&points)?;
    Ok(ScalingSummary { points, ols })
}
