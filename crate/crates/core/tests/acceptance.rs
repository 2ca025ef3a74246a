//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with its
//! runtime and fails unless both the check and the time budget hold.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use introspect_core::pipeline::analysis::{introspection_summary, steering_sign_validation};
use introspect_core::pipeline::config::{BackendConfig, ConceptEntry, DecodeConfig, DirectionSource, RunConfig};
use introspect_core::pipeline::grid::{run_grid, GridConcept, GridSpec, OBSERVATIONS};
use introspect_core::pipeline::measure::{ToySource, RATING_TEMPERATURE};
use introspect_core::pipeline::query::{build_rating_query, DEFAULT_ASSISTANT_SYSTEM_PROMPT};
use introspect_core::pipeline::run_config;
use introspect_core::pipeline::synth::{default_topics, synthetic_conversations};
use introspect_core::probes::{
    pooled_representation, probe_score, search_band, sweep_and_select, train_concept_vectors, ConceptVectorSet,
};
use introspect_core::scalar::{cosine, dot};
use introspect_core::selfreport::{expected_rating, DigitLogits, SelfReport};
use introspect_core::stats::{
    bh_correct, cluster_bootstrap, isotonic_fit, isotonic_r2, lmm_fit, ols_fit, spearman_rho, trend_with_fallback,
    ClusteredSample, Fallback, TrendMethod,
};
use introspect_core::steering::{apply_to_tensor, build_plan, DEFAULT_ALPHAS};
use introspect_core::tensorio::{
    make_planted_fixture, write_conversations, ActivationTensor, PlantedFixture, RoleFilter,
};
use introspect_core::toybackend::{build_introspective_toy, ReadoutOptions, ToyModelConfig};
use introspect_core::{Observation, TokenRole};

fn verdict(name: &str, ok: bool, detail: String, elapsed: Duration, budget: Option<Duration>) {
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let status = if ok && in_time { "PASS" } else { "FAIL" };
    let budget = budget.map_or(String::new(), |b| format!(" (budget {:.0?})", b));
    println!("{status} {name}: {detail}; {:.2?}{budget}", elapsed);
    assert!(ok, "{name}: {detail}");
    assert!(in_time, "{name}: took {elapsed:.2?}{budget}");
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| z.sample(rng)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn expected_rating_is_exact() {
    let t = Instant::now();
    let uniform = expected_rating(&DigitLogits::new([0.0f64; 10]).unwrap()).expected;
    let mut s = [0.0f64; 10];
    s[9] = 9f64.ln();
    let skewed = expected_rating(&DigitLogits::new(s).unwrap()).expected;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let s: [f64; 10] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
        let c: f64 = rng.random_range(-100.0..100.0);
        let a = expected_rating(&DigitLogits::new(s).unwrap()).expected;
        let b = expected_rating(&DigitLogits::new(s.map(|v| v + c)).unwrap()).expected;
        worst_shift = worst_shift.max((a - b).abs());
    }
    let ok = (uniform - 4.5).abs() <= 1e-9 && (skewed - 6.5).abs() <= 1e-9 && worst_shift <= 1e-9;
    verdict(
        "expected rating exactness",
        ok,
        format!("uniform {uniform}, ln9 case {skewed}, max shift deviation {worst_shift:.1e}"),
        t.elapsed(),
        Some(Duration::from_secs(1)),
    );
}

#[test]
fn contrastive_probe_recovers_planted_direction() {
    let t = Instant::now();
    let (layers, dim, per_pole) = (6, 48, 64);
    let band = search_band(layers).unwrap();
    let planted = (band.0 + band.1) / 2;
    let filter = RoleFilter::Only(TokenRole::Assistant);
    let (mut cos_hits, mut layer_hits) = (0, 0);
    for seed in 0..20u64 {
        let train = PlantedFixture::with_random_direction(seed, layers, dim, per_pole, planted, 4.0, 1.0);
        let eval = PlantedFixture { seed: seed + 10_000, ..train.clone() };
        let (pos, neg) = make_planted_fixture::<f64>(&train).unwrap();
        let (eval_pos, eval_neg) = make_planted_fixture::<f64>(&eval).unwrap();
        let pool = |ts: &[ActivationTensor<f64>]| -> Vec<_> {
            ts.iter().map(|t| pooled_representation(t, filter).unwrap()).collect()
        };
        let dirs = train_concept_vectors(&pool(&pos), &pool(&neg)).unwrap();
        if cosine(&dirs.vectors[planted], &train.planted_direction) >= 0.99 {
            cos_hits += 1;
        }
        let (_, set) = sweep_and_select("planted", &dirs, &eval_pos, &eval_neg, filter, false).unwrap();
        if set.best_layer == planted {
            layer_hits += 1;
        }
    }
    verdict(
        "contrastive direction recovery",
        cos_hits >= 19 && layer_hits >= 19,
        format!("cosine >= 0.99 in {cos_hits}/20 seeds, planted layer selected in {layer_hits}/20"),
        t.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

#[test]
fn post_hoc_steering_shifts_probe_by_alpha_over_window() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Normal::new(0.0, 1.0).unwrap();
    let (layers, dim) = (8, 16);
    let (mut worst_match, mut worst_orth) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let tokens = rng.random_range(2..12);
        let values: Vec<f64> = (0..layers * tokens * dim).map(|_| z.sample(&mut rng)).collect();
        let mut roles = vec![TokenRole::User; tokens];
        for r in roles.iter_mut().skip(tokens / 2) {
            *r = TokenRole::Assistant;
        }
        let tensor = ActivationTensor::new(layers, tokens, dim, values, roles).unwrap();
        let best = rng.random_range(0..layers);
        let mut set = ConceptVectorSet::uniform("c", &unit(&mut rng, dim), layers, best, i % 2 == 0).unwrap();
        set.vectors = (0..layers).map(|_| unit(&mut rng, dim)).collect();
        let mut orth = set.clone();
        orth.concept_name = "o".into();
        for (w, v) in orth.vectors.iter_mut().zip(&set.vectors) {
            let r = unit(&mut rng, dim);
            let p = dot(&r, v);
            let g: Vec<f64> = r.iter().zip(v).map(|(a, b)| a - p * b).collect();
            let n = dot(&g, &g).sqrt();
            *w = g.into_iter().map(|x| x / n).collect();
        }
        let alpha = rng.random_range(-6.0..6.0);
        let steered = apply_to_tensor(&tensor, &build_plan(&set, alpha)).unwrap();
        let filter = RoleFilter::LastSpan(TokenRole::Assistant);
        let shift = probe_score(&steered, &set, filter).unwrap() - probe_score(&tensor, &set, filter).unwrap();
        worst_match = worst_match.max((shift - alpha / set.window.len() as f64).abs());
        let o = probe_score(&steered, &orth, filter).unwrap() - probe_score(&tensor, &orth, filter).unwrap();
        worst_orth = worst_orth.max(o.abs());
    }
    verdict(
        "steering algebra",
        worst_match <= 1e-9 && worst_orth <= 1e-9,
        format!("max |shift - alpha/|L|| {worst_match:.1e}, max orthogonal change {worst_orth:.1e}"),
        t.elapsed(),
        Some(Duration::from_secs(5)),
    );
}

fn causal_chain(negated: bool) -> (Vec<f64>, introspect_core::pipeline::analysis::SignValidation) {
    let config = ToyModelConfig { seed: 11, ..Default::default() };
    let (model, u) = build_introspective_toy::<f64>(config, ReadoutOptions { gain: 0.25, negated }).unwrap();
    let layer = model.readout().unwrap().layer;
    let set = ConceptVectorSet::uniform("interest", &u, model.config().layer_count, layer, false).unwrap();
    let spec = GridSpec {
        concepts: vec![GridConcept { set, query: build_rating_query("interest").unwrap() }],
        alphas: DEFAULT_ALPHAS.to_vec(),
        master_seed: 5,
        random_controls: false,
        bootstrap_replicates: 0,
        rating_temperature: RATING_TEMPERATURE,
    };
    let convs = synthetic_conversations(20, 10, 8, &default_topics()).unwrap();
    let source = ToySource { model: &model, system_prompt: DEFAULT_ASSISTANT_SYSTEM_PROMPT.into() };
    let obs = run_grid(&spec, &convs, &source, None).unwrap().observations();
    let sign = steering_sign_validation(&obs, &spec.alphas).unwrap().remove(0);
    (sign.mean_by_alpha.clone(), sign)
}

#[test]
fn steering_causally_moves_toy_self_reports() {
    let t = Instant::now();
    let (means, aligned) = causal_chain(false);
    let increasing = means.windows(2).all(|w| w[1] > w[0]);
    let exact_p = aligned.permutation_p == Some(1.0 / 120.0);
    let (_, negated) = causal_chain(true);
    verdict(
        "causal toy chain",
        increasing && exact_p && aligned.passed && !negated.passed && negated.rho < 0.0,
        format!(
            "means by alpha {:?}, permutation p {:?}, aligned pass {}, negated pass {} with rho {:.3}",
            means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
            aligned.permutation_p,
            aligned.passed,
            negated.passed,
            negated.rho
        ),
        t.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

/// Best monotone fit by enumerating every split of the x-sorted data into
/// consecutive blocks held at their means.
fn brute_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut feasible = true;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let m = y[start..end].iter().sum::<f64>() / (end - start) as f64;
                feasible &= m >= prev - 1e-12;
                prev = m;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if !feasible {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
        if best.as_ref().is_none_or(|b| sse < b.0) {
            best = Some((sse, fit));
        }
    }
    best.unwrap().1
}

#[test]
fn isotonic_matches_brute_force() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=8);
        let mut xs: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
        // present the points in shuffled order
        for i in (1..n).rev() {
            xs.swap(i, rng.random_range(0..=i));
        }
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = isotonic_fit(&xs, &y).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let sorted_y: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let oracle = brute_isotonic(&sorted_y);
        for (k, &i) in order.iter().enumerate() {
            worst = worst.max((fit[i] - oracle[k]).abs());
        }
    }
    let hand: Vec<f64> = isotonic_fit(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let r2 = isotonic_r2(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let hand_ok = hand.iter().zip([1.0, 2.5, 2.5]).all(|(a, b)| (a - b).abs() <= 1e-9) && (r2 - 0.75).abs() <= 1e-9;
    verdict(
        "isotonic oracle",
        worst <= 1e-9 && hand_ok,
        format!("max deviation from enumeration {worst:.1e}, hand case {hand:?} with R2 {r2}"),
        t.elapsed(),
        None,
    );
}

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

fn naive_pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[test]
fn spearman_matches_naive_ranks() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut compared, mut agreed_degenerate) = (0.0f64, 0, 0);
    let mut disagreements = 0;
    for _ in 0..1000 {
        let n = rng.random_range(3..40);
        let levels = rng.random_range(1..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        match (spearman_rho(&x, &y), naive_pearson(&naive_ranks(&x), &naive_ranks(&y))) {
            (Ok(r), Some(o)) => {
                worst = worst.max((r - o).abs());
                compared += 1;
            }
            (Err(_), None) => agreed_degenerate += 1,
            _ => disagreements += 1,
        }
    }
    verdict(
        "spearman oracle",
        worst <= 1e-12 && disagreements == 0,
        format!("{compared} compared, max deviation {worst:.1e}, {agreed_degenerate} degenerate in both, {disagreements} mismatched"),
        t.elapsed(),
        None,
    );
}

#[test]
fn cluster_bootstrap_covers_the_truth() {
    let t = Instant::now();
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut covered = 0;
    for sim in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + sim);
        let (mut y, mut ids) = (Vec::new(), Vec::new());
        for c in 0..40 {
            let u = z.sample(&mut rng);
            for _ in 0..10 {
                y.push(u + z.sample(&mut rng));
                ids.push(c);
            }
        }
        let sample = ClusteredSample::values(y, &ids).unwrap();
        let mean = |s: &ClusteredSample| Ok(s.y.iter().sum::<f64>() / s.len() as f64);
        let r = cluster_bootstrap(&sample, mean, 500, sim).unwrap();
        if r.ci_lo <= 0.0 && 0.0 <= r.ci_hi {
            covered += 1;
        }
    }
    let coverage = covered as f64 / 200.0;
    verdict(
        "cluster bootstrap coverage",
        (0.90..=0.98).contains(&coverage),
        format!("95% CI covered the true mean in {:.1}% of 200 simulations", 100.0 * coverage),
        t.elapsed(),
        Some(Duration::from_secs(120)),
    );
}

fn simulate_lmm(seed: u64, k: usize, sd_u: f64, slope: f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let (mut x, mut y, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for g in 0..k {
        let u = sd_u * z.sample(&mut rng);
        for t in 1..=10 {
            x.push(t as f64);
            y.push(1.0 + slope * t as f64 + u + 0.5 * z.sample(&mut rng));
            c.push(g);
        }
    }
    (x, y, c)
}

fn design(x: &[f64]) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] })
}

#[test]
fn mixed_model_recovers_slopes_and_falls_back() {
    let t = Instant::now();
    // exactly zero group variance: every cluster carries the same data
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let one: Vec<f64> = (1..=10).map(|t| 0.3 * t as f64 + rng.random_range(-1.0..1.0)).collect();
    let (mut x, mut y, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for g in 0..20 {
        for (t, v) in one.iter().enumerate() {
            x.push((t + 1) as f64);
            y.push(*v);
            c.push(g);
        }
    }
    let fit = lmm_fit(&design(&x), &y, &c).unwrap();
    let ols = ols_fit(&x, &y).unwrap();
    let beta_err = (fit.fixed_effects[0] - ols.intercept).abs().max((fit.fixed_effects[1] - ols.slope).abs());

    let slopes: Vec<f64> = (0..50)
        .map(|s| {
            let (x, y, c) = simulate_lmm(500 + s, 30, 1.0, 0.5);
            lmm_fit(&design(&x), &y, &c).unwrap().fixed_effects[1]
        })
        .collect();
    let mean_slope = slopes.iter().sum::<f64>() / slopes.len() as f64;

    let (mut boundary, mut routed) = (0, 0);
    for s in 0..30 {
        let (x, y, c) = simulate_lmm(900 + s, 30, 0.0, 0.3);
        if !lmm_fit(&design(&x), &y, &c).unwrap().converged {
            boundary += 1;
            if trend_with_fallback(&x, &y, &c, Fallback::PerClusterSlope).unwrap().method
                == TrendMethod::PerClusterSlope
            {
                routed += 1;
            }
        }
    }
    verdict(
        "mixed model",
        !fit.converged && beta_err <= 1e-4 && (mean_slope - 0.5).abs() <= 0.05 && boundary > 0 && routed == boundary,
        format!(
            "zero-variance beta vs OLS {beta_err:.1e}, mean slope over 50 seeds {mean_slope:.4}, \
             {routed}/{boundary} boundary fits used the fallback"
        ),
        t.elapsed(),
        None,
    );
}

#[test]
fn benjamini_hochberg() {
    let t = Instant::now();
    let hand = bh_correct(&[0.01, 0.02, 0.04], 0.05).unwrap().q;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let q = bh_correct(&p, 0.05).unwrap().q;
        for i in 0..n {
            if q[i] < p[i] || q[i] > 1.0 {
                violations += 1;
            }
            for j in 0..n {
                if p[i] <= p[j] && q[i] > q[j] {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        "benjamini-hochberg",
        hand == vec![0.03, 0.03, 0.04] && violations == 0,
        format!("q {hand:?}, {violations} monotonicity violations over 1000 vectors"),
        t.elapsed(),
        None,
    );
}

fn synthetic_observations(seed: u64, coupled: bool) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::new();
    for c in 0..20 {
        let offset = 0.5 * z.sample(&mut rng);
        for turn in 1..=10 {
            let probe = offset + z.sample(&mut rng);
            let raw: f64 =
                if coupled { 4.5 + 1.5 * probe + 0.5 * z.sample(&mut rng) } else { 4.5 + 1.5 * z.sample(&mut rng) };
            let rating = raw.clamp(0.0, 9.0);
            out.push(Observation {
                conversation_id: format!("c{c:02}"),
                turn,
                concept: "interest".into(),
                steer_concept: None,
                alpha: 0.0,
                probe_score_prev: probe,
                report: SelfReport {
                    greedy: rating.round() as u8,
                    sampled: Some(rating.round() as u8),
                    expected: rating,
                    probs: [0.1; 10],
                },
                seed,
            });
        }
    }
    out
}

#[test]
fn introspection_separates_coupled_from_independent_reports() {
    let t = Instant::now();
    let (mut null_covered, mut detected) = (0, 0);
    for seed in 0..100u64 {
        let null = synthetic_observations(seed, false);
        let refs: Vec<&Observation> = null.iter().collect();
        if introspection_summary(&refs, 200, seed).unwrap().rho.contains(0.0) {
            null_covered += 1;
        }
        let coupled = synthetic_observations(seed + 5000, true);
        let refs: Vec<&Observation> = coupled.iter().collect();
        let s = introspection_summary(&refs, 200, seed).unwrap();
        if s.rho.value > 0.5 && s.iso_r2.value > 0.25 && s.rho.p < 0.05 && s.iso_r2.p < 0.05 {
            detected += 1;
        }
    }
    verdict(
        "introspection null and detection",
        null_covered >= 90 && detected >= 95,
        format!("null rho CI contains 0 in {null_covered}/100 seeds, coupling detected in {detected}/100"),
        t.elapsed(),
        None,
    );
}

fn grid_config(dir: &Path, out: &str) -> RunConfig {
    let concepts = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/concepts");
    RunConfig {
        backend: BackendConfig::Toy { model: ToyModelConfig::default(), readout: Some(ReadoutOptions::default()) },
        concepts: ["interest", "wellbeing"]
            .iter()
            .map(|c| ConceptEntry {
                spec: concepts.join(format!("{c}.toml")),
                vectors: None,
                direction: DirectionSource::Train,
            })
            .collect(),
        alphas: vec![-2.0, 0.0, 2.0],
        conversations: dir.join("convs.jsonl"),
        bootstrap_replicates: 100,
        seed: 42,
        decode: DecodeConfig::default(),
        output_dir: dir.join(out),
        system_prompt: DEFAULT_ASSISTANT_SYSTEM_PROMPT.into(),
        random_controls: false,
    }
}

#[test]
fn grid_runs_are_byte_identical() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let convs = synthetic_conversations(10, 10, 1, &default_topics()).unwrap();
    write_conversations(&convs, &dir.path().join("convs.jsonl")).unwrap();
    let a = run_config(&grid_config(dir.path(), "a")).unwrap();
    let b = run_config(&grid_config(dir.path(), "b")).unwrap();
    let bytes_a = std::fs::read(dir.path().join("a").join(OBSERVATIONS)).unwrap();
    let bytes_b = std::fs::read(dir.path().join("b").join(OBSERVATIONS)).unwrap();
    let n = a.observations().len();
    verdict(
        "grid determinism",
        !a.is_partial() && !b.is_partial() && n == 2 * 2 * 3 * 10 * 10 && bytes_a == bytes_b,
        format!(
            "{} cells, {n} observations, {} bytes, identical: {}",
            a.cells.len(),
            bytes_a.len(),
            bytes_a == bytes_b
        ),
        t.elapsed(),
        Some(Duration::from_secs(300)),
    );
}
