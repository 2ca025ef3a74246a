//! Tabular and plot-ready outputs of the analyses.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::derive_seed;
use crate::tensorio::{read_observations, Observation};

use super::analysis::{
    alpha_grid, baseline, concepts, cross_steering_matrix, drift_summary, entropy_decomposition, introspection_family,
    is_control, steering_sign_validation, Channel, CrossCell, DriftResult, EntropyDecomposition, Estimate,
    IntrospectionSummary, ScalingSummary, SignValidation,
};
use super::grid::OBSERVATIONS;

/// Column headers and stringified rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(headers: &[&str]) -> Self {
        Table { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.headers).map_err(csv_error)?;
        for r in &self.rows {
            out.write_record(r).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn est(e: &Estimate) -> [String; 4] {
    [f(e.value), f(e.ci_lo), f(e.ci_hi), f(e.p)]
}

fn est_opt(e: Option<&Estimate>) -> [String; 4] {
    e.map(est).unwrap_or_default()
}

pub fn drift_table(rows: &[DriftResult]) -> Table {
    let mut t = Table::new(&[
        "concept",
        "channel",
        "method",
        "slope",
        "statistic",
        "p",
        "first_turn_mean",
        "last_turn_mean",
        "delta",
        "n_conversations",
    ]);
    for d in rows {
        t.push(vec![
            d.concept.clone(),
            d.channel.name().into(),
            format!("{:?}", d.trend.method),
            f(d.trend.estimate),
            f(d.trend.statistic),
            f(d.trend.p),
            f(d.first_turn_mean),
            f(d.last_turn_mean),
            f(d.first_to_last_delta),
            d.n_conversations.to_string(),
        ]);
    }
    t
}

pub fn introspection_table(rows: &[IntrospectionSummary]) -> Table {
    let mut t = Table::new(&[
        "concept",
        "n",
        "rho",
        "rho_lo",
        "rho_hi",
        "rho_p",
        "rho_q",
        "iso_r2",
        "iso_r2_lo",
        "iso_r2_hi",
        "iso_r2_p",
        "iso_r2_q",
        "control_rho",
        "delta_rho",
        "delta_rho_lo",
        "delta_rho_hi",
        "delta_rho_p",
    ]);
    for s in rows {
        let mut row = vec![s.concept.clone(), s.n_observations.to_string()];
        row.extend(est(&s.rho));
        row.push(opt(s.q_rho));
        row.extend(est(&s.iso_r2));
        row.push(opt(s.q_iso_r2));
        row.push(opt(s.control.as_ref().map(|c| c.control_rho.value)));
        row.extend(est_opt(s.control.as_ref().map(|c| &c.delta_rho)));
        t.push(row);
    }
    t
}

pub fn per_turn_table(rows: &[IntrospectionSummary]) -> Table {
    let mut t = Table::new(&[
        "concept",
        "turn",
        "n",
        "rho",
        "rho_lo",
        "rho_hi",
        "rho_p",
        "iso_r2",
        "iso_r2_lo",
        "iso_r2_hi",
        "iso_r2_p",
    ]);
    for s in rows {
        for p in &s.per_turn {
            let mut row = vec![s.concept.clone(), p.turn.to_string(), p.n.to_string()];
            row.extend(est_opt(p.rho.as_ref()));
            row.extend(est_opt(p.iso_r2.as_ref()));
            t.push(row);
        }
    }
    t
}

pub fn cross_table(rows: &[CrossCell]) -> Table {
    let mut t = Table::new(&[
        "steer",
        "measured",
        "best_alpha",
        "max_delta_r2",
        "lo",
        "hi",
        "p",
        "q",
        "significant",
        "report_trend",
        "report_trend_p",
        "r2_permutation_p",
    ]);
    for c in rows {
        t.push(vec![
            c.steer_concept.clone(),
            c.measured_concept.clone(),
            f(c.best_alpha),
            f(c.max_delta_r2),
            f(c.max_delta.ci_lo),
            f(c.max_delta.ci_hi),
            f(c.max_delta.p),
            f(c.q),
            c.significant.to_string(),
            f(c.report_trend.estimate),
            f(c.report_trend.p),
            opt(c.r2_permutation_p),
        ]);
    }
    t
}

pub fn entropy_table(e: &EntropyDecomposition) -> Table {
    let mut t = Table::new(&["steer", "measured", "alpha", "n", "probe_entropy_bits", "report_entropy_bits"]);
    for r in &e.rows {
        t.push(vec![
            r.steer_concept.clone(),
            r.measured_concept.clone(),
            f(r.alpha),
            r.n.to_string(),
            f(r.probe_entropy),
            f(r.report_entropy),
        ]);
    }
    t
}

pub fn entropy_trend_table(e: &EntropyDecomposition) -> Table {
    let mut t = Table::new(&["steer", "measured", "channel", "method", "slope", "statistic", "p"]);
    for r in &e.trends {
        t.push(vec![
            r.steer_concept.clone(),
            r.measured_concept.clone(),
            r.channel.name().into(),
            format!("{:?}", r.trend.method),
            f(r.trend.estimate),
            f(r.trend.statistic),
            f(r.trend.p),
        ]);
    }
    t
}

pub fn sign_table(rows: &[SignValidation]) -> Table {
    let mut t = Table::new(&["concept", "rho", "method", "slope", "p", "permutation_p", "passed"]);
    for s in rows {
        t.push(vec![
            s.concept.clone(),
            f(s.rho),
            format!("{:?}", s.trend.method),
            f(s.trend.estimate),
            f(s.trend.p),
            opt(s.permutation_p),
            s.passed.to_string(),
        ]);
    }
    t
}

pub fn scaling_table(s: &ScalingSummary) -> Table {
    let mut t =
        Table::new(&["label", "size", "validated", "excluded", "mean_iso_r2", "lo", "hi", "ols_slope", "ols_p"]);
    for p in &s.points {
        let m = p.mean_iso_r2.as_ref();
        t.push(vec![
            p.label.clone(),
            f(p.size),
            p.validated.join(";"),
            p.excluded.join(";"),
            opt(m.map(|e| e.value)),
            opt(m.map(|e| e.ci_lo)),
            opt(m.map(|e| e.ci_hi)),
            opt(s.ols.as_ref().map(|o| o.slope)),
            opt(s.ols.as_ref().map(|o| o.p_slope)),
        ]);
    }
    t
}

/// Every analysis that the observations support; sections that cannot be
/// computed are `None` with the reason in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullReport {
    pub drift: Option<Vec<DriftResult>>,
    pub introspection: Option<Vec<IntrospectionSummary>>,
    pub cross: Option<Vec<CrossCell>>,
    pub entropy: Option<EntropyDecomposition>,
    pub sign_validation: Option<Vec<SignValidation>>,
    pub notes: Vec<String>,
}

fn section<T>(name: &str, notes: &mut Vec<String>, r: Result<T>) -> Option<T> {
    r.map_err(|e| {
        log::warn!("{name}: {e}");
        notes.push(format!("{name}: {e}"));
    })
    .ok()
}

pub fn full_report(observations: &[Observation], b: usize, seed: u64) -> FullReport {
    let mut notes = Vec::new();
    let alphas = alpha_grid(observations);
    let drift = [Channel::Probe, Channel::LogitReport, Channel::Greedy, Channel::Sampled]
        .into_iter()
        .map(|c| drift_summary(observations, c))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect());
    let drift = section("drift", &mut notes, drift);
    let introspection =
        section("introspection", &mut notes, introspection_family(observations, b, derive_seed(seed, 1)));
    let steered = observations.iter().any(|o| o.steer_concept.is_some());
    let (cross, entropy, sign_validation) = if steered {
        (
            section("cross", &mut notes, cross_steering_matrix(observations, &alphas, b, derive_seed(seed, 2))),
            section("entropy", &mut notes, entropy_decomposition(observations, &alphas)),
            section("sign_validation", &mut notes, steering_sign_validation(observations, &alphas)),
        )
    } else {
        notes.push("no steering cells; cross, entropy and sign validation skipped".into());
        (None, None, None)
    };
    FullReport { drift, introspection, cross, entropy, sign_validation, notes }
}

/// Plot-ready series: turn means per channel, per-turn coupling, the
/// cross-steering matrix, entropy and mean rating against alpha.
pub fn figure_series(observations: &[Observation], report: &FullReport) -> Result<serde_json::Value> {
    let mut drift = Vec::new();
    for c in concepts(observations).iter().filter(|c| !is_control(c)) {
        let base = baseline(observations, c);
        let mut turns: Vec<usize> = base.iter().map(|o| o.turn).collect();
        turns.sort_unstable();
        turns.dedup();
        for ch in [Channel::Probe, Channel::LogitReport, Channel::Greedy] {
            let means = turns
                .iter()
                .map(|&t| {
                    let v = base.iter().filter(|o| o.turn == t).map(|o| ch.value(o)).collect::<Result<Vec<_>>>()?;
                    Ok(v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            drift.push(serde_json::json!({ "concept": c, "channel": ch.name(), "turn": turns, "mean": means }));
        }
    }
    let per_turn: Vec<_> = report
        .introspection
        .iter()
        .flatten()
        .map(|s| {
            serde_json::json!({
                "concept": s.concept,
                "turn": s.per_turn.iter().map(|p| p.turn).collect::<Vec<_>>(),
                "rho": s.per_turn.iter().map(|p| p.rho.map(|e| e.value)).collect::<Vec<_>>(),
                "iso_r2": s.per_turn.iter().map(|p| p.iso_r2.map(|e| e.value)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let cross: Vec<_> = report
        .cross
        .iter()
        .flatten()
        .map(|c| {
            serde_json::json!({
                "steer": c.steer_concept, "measured": c.measured_concept,
                "alpha": c.alphas, "iso_r2": c.iso_r2_by_alpha, "max_delta_r2": c.max_delta_r2, "q": c.q,
            })
        })
        .collect();
    let entropy = report.entropy.as_ref().map(|e| &e.rows);
    let rating_by_alpha: Vec<_> = report
        .sign_validation
        .iter()
        .flatten()
        .map(|s| serde_json::json!({ "concept": s.concept, "alpha": alpha_grid(observations), "mean_rating": s.mean_by_alpha }))
        .collect();
    Ok(serde_json::json!({
        "drift_by_turn": drift,
        "introspection_by_turn": per_turn,
        "cross_steering": cross,
        "entropy_by_alpha": entropy,
        "self_steering_rating_by_alpha": rating_by_alpha,
    }))
}

/// Observations of a run directory, or of a JSONL file given directly.
pub fn load_run_observations(path: &Path) -> Result<Vec<Observation>> {
    let path = if path.is_dir() { path.join(OBSERVATIONS) } else { path.to_path_buf() };
    let observations = read_observations(&path)?;
    if observations.is_empty() {
        return Err(Error::Missing(format!("observations in {}", path.display())));
    }
    Ok(observations)
}

/// Reads a run's observations and writes every table as CSV, the full
/// report as JSON and the plot series to `out_dir`.
pub fn write_report(in_dir: &Path, out_dir: &Path, b: usize, seed: u64) -> Result<FullReport> {
    let observations = load_run_observations(in_dir)?;
    let report = full_report(&observations, b, seed);
    fs::create_dir_all(out_dir)?;
    let mut tables: Vec<(&str, Table)> = Vec::new();
    if let Some(d) = &report.drift {
        tables.push(("drift.csv", drift_table(d)));
    }
    if let Some(i) = &report.introspection {
        tables.push(("introspection.csv", introspection_table(i)));
        tables.push(("introspection_by_turn.csv", per_turn_table(i)));
    }
    if let Some(c) = &report.cross {
        tables.push(("cross_steering.csv", cross_table(c)));
    }
    if let Some(e) = &report.entropy {
        tables.push(("entropy.csv", entropy_table(e)));
        tables.push(("entropy_trends.csv", entropy_trend_table(e)));
    }
    if let Some(s) = &report.sign_validation {
        tables.push(("sign_validation.csv", sign_table(s)));
    }
    for (name, t) in tables {
        t.write_csv(fs::File::create(out_dir.join(name))?)?;
    }
    fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(out_dir.join("series.json"), serde_json::to_vec_pretty(&figure_series(&observations, &report)?)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfreport::SelfReport;

    fn obs(conv: usize, turn: usize, steer: Option<&str>, alpha: f64, probe: f64, rating: f64) -> Observation {
        Observation {
            conversation_id: format!("c{conv}"),
            turn,
            concept: "x".into(),
            steer_concept: steer.map(String::from),
            alpha,
            probe_score_prev: probe,
            report: SelfReport {
                greedy: rating.round() as u8,
                sampled: Some(rating.round() as u8),
                expected: rating,
                probs: [0.1; 10],
            },
            seed: 1,
        }
    }

    #[test]
    fn csv_quotes_and_headers() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["x,y".into(), "1".into()]);
        assert_eq!(t.to_csv_string().unwrap(), "a,b\n\"x,y\",1\n");
    }

    #[test]
    fn report_sections_follow_available_data() {
        let mut data = Vec::new();
        for c in 0..6 {
            for t in 1..=4 {
                let p = (c * 7 + t * 3) as f64 % 5.0;
                data.push(obs(c, t, None, 0.0, p, 2.0 + p + 0.1 * t as f64));
            }
        }
        let r = full_report(&data, 50, 1);
        assert!(r.drift.is_some() && r.introspection.is_some());
        assert!(r.cross.is_none() && r.notes.iter().any(|n| n.contains("no steering")));
        let dir = tempfile::tempdir().unwrap();
        crate::tensorio::write_observations(&data, &dir.path().join(OBSERVATIONS)).unwrap();
        write_report(dir.path(), &dir.path().join("rep"), 50, 1).unwrap();
        for name in ["drift.csv", "introspection.csv", "introspection_by_turn.csv", "report.json", "series.json"] {
            assert!(dir.path().join("rep").join(name).is_file(), "{name}");
        }
        let csv = fs::read_to_string(dir.path().join("rep/drift.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
    }
}
