//! Acceptance suite: one PASS or FAIL line per criterion.
//!
//! Runs as a plain binary so the lines always reach the console. The process
//! exits non-zero when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gwas_verify::audit::{
    attack_power, edit_distance, edit_distance_score, lrt_statistic, Attack, Cohort, LrtVariant, PowerResult, Suspicion,
};
use gwas_verify::experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};
use gwas_verify::genotype::{synthesize_with_truth, CaseControlDataset, SynthesisConfig};
use gwas_verify::gwas::{compute_statistics, run_gwas, ContingencyTable};
use gwas_verify::ldp::{build_partial_noisy_dataset, estimate_counts, perturb_value, round_to_total, RrParameters};
use gwas_verify::metadata::build_metadata;
use gwas_verify::rng::{derive, stream};
use gwas_verify::verifier::{classify_statistic, relative_change, verify_bundle, CutoffSet, StatKind, Verdict};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Monte-Carlo tolerance, in standard errors, for trend comparisons.
const SIGMAS: f64 = 3.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn fmt(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn randomized_response() -> Outcome {
    let start = Instant::now();
    let params = RrParameters::genotype(2f64.ln()).unwrap();
    let exact = params.p_keep == 0.5 && params.q_flip == 0.25;
    let draws = 1_000_000;
    let mut r = stream(1, &[1]);
    let kept = (0..draws).filter(|i| {
        let v = (i % 3) as u8;
        perturb_value(v, &params, &mut r) == v
    });
    let rate = kept.count() as f64 / draws as f64;
    let elapsed = start.elapsed();
    outcome(
        exact && (rate - 0.5).abs() <= 0.002 && within(elapsed, 5),
        format!(
            "p_keep {} q_flip {}; keep rate over 10^6 draws {rate:.4}; {:.2}s",
            params.p_keep,
            params.q_flip,
            elapsed.as_secs_f64()
        ),
    )
}

fn aggregation_unbiasedness() -> Outcome {
    let start = Instant::now();
    let params = RrParameters::genotype(3.0).unwrap();
    let truth = [7000u32, 2000, 1000];
    let n: u32 = truth.iter().sum();
    let trials = 100;
    let mut estimates = vec![Vec::new(); 3];
    let mut totals_ok = true;
    let mut r = stream(2, &[1]);
    for _ in 0..trials {
        let mut observed = [0u64; 3];
        for (value, &count) in truth.iter().enumerate() {
            for _ in 0..count {
                observed[perturb_value(value as u8, &params, &mut r) as usize] += 1;
            }
        }
        let est = estimate_counts(&observed, &params).unwrap();
        for (column, raw) in estimates.iter_mut().zip(est.raw) {
            column.push(raw);
        }
        totals_ok &= round_to_total(&est.adjusted, n).iter().sum::<u32>() == n;
    }
    let mut ok = totals_ok;
    let mut parts = Vec::new();
    for (v, xs) in estimates.iter().enumerate() {
        let mean = xs.iter().sum::<f64>() / trials as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        let z = (mean - truth[v] as f64) / se;
        ok &= z.abs() <= SIGMAS;
        parts.push(format!("{mean:.1} vs {} ({z:+.2} se)", truth[v]));
    }
    let elapsed = start.elapsed();
    outcome(
        ok && within(elapsed, 10),
        format!(
            "mean raw estimates {}; rounded totals exact: {totals_ok}; {:.2}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn gwas_formula_oracle() -> Outcome {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / b.abs() };
    let mut r = stream(3, &[1]);
    let mut worst = 0.0f64;
    let mut worst_swap = 0.0f64;
    for _ in 0..50 {
        let case: [u32; 3] = [r.gen_range(1..80), r.gen_range(0..60), r.gen_range(1..40)];
        let control: [u32; 3] = [r.gen_range(1..80), r.gen_range(1..60), r.gen_range(0..40)];
        let got = compute_statistics("x", &ContingencyTable::new(case, control), false).unwrap();
        let s0 = case[0] as f64;
        let s12 = (case[1] + case[2]) as f64;
        let c0 = control[0] as f64;
        let c12 = (control[1] + control[2]) as f64;
        let o = c0 * s12 / (s0 * c12);
        let se = (1.0 / s0 + 1.0 / s12 + 1.0 / c0 + 1.0 / c12).sqrt();
        let z = o.ln() / se;
        let want = [
            o,
            se,
            (o.ln() - 1.96 * se).exp(),
            (o.ln() + 1.96 * se).exp(),
            z,
            2.0 * normal.cdf(-z.abs()),
            (case[1] + 2 * case[2]) as f64 / (2.0 * (s0 + s12)),
        ];
        let have = [
            got.odds_ratio,
            got.se,
            got.ci_low,
            got.ci_high,
            got.z,
            got.p_value,
            got.maf,
        ];
        for (h, w) in have.iter().zip(want) {
            worst = worst.max(rel(*h, w));
        }
        let swapped = compute_statistics("x", &ContingencyTable::new(control, case), false).unwrap();
        worst_swap = worst_swap
            .max(rel(swapped.odds_ratio, 1.0 / got.odds_ratio))
            .max(rel(swapped.p_value, got.p_value));
    }
    outcome(
        worst <= 1e-9 && worst_swap <= 1e-12,
        format!("50 tables: max relative error {worst:.2e}; swap symmetry error {worst_swap:.2e}"),
    )
}

fn single(kind: ExperimentKind) -> (ExperimentReport, Duration) {
    let config = ExperimentConfig {
        experiments: vec![kind],
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let report = run_experiment(&config).expect("experiment runs");
    (report, start.elapsed())
}

fn p_mean(report: &ExperimentReport, kind: ExperimentKind, eps: f64, value: Option<f64>, metric: &str) -> f64 {
    report.mean(kind, Some(StatKind::P), Some(eps), value, metric)
}

fn seeds_of(report: &ExperimentReport) -> usize {
    report.config.as_ref().map_or(0, |c| c.seeds)
}

fn tpr_epsilon_trend() -> Outcome {
    let (report, elapsed) = single(ExperimentKind::Epsilon);
    let eps = [1.0, 2.0, 3.0, 5.0];
    let tpr: Vec<f64> = eps
        .iter()
        .map(|&e| p_mean(&report, ExperimentKind::Epsilon, e, None, "tpr"))
        .collect();
    let monotone = tpr.windows(2).all(|w| w[1] >= w[0]);
    let gain = tpr[3] - tpr[0];
    let m = report.config.as_ref().map_or(0, |c| c.research.m);
    outcome(
        monotone && gain >= 0.2 && seeds_of(&report) >= 20 && within(elapsed, 180),
        format!(
            "p-value TPR at epsilon 1/2/3/5: [{}], gain {gain:.3}; {} seeds, m = {m}; {:.1}s",
            fmt(&tpr),
            seeds_of(&report),
            elapsed.as_secs_f64()
        ),
    )
}

fn tnr_loss_trend() -> Outcome {
    let (report, _) = single(ExperimentKind::Loss);
    let losses = [0.1, 0.2, 0.3, 0.4];
    let tnr: Vec<f64> = losses
        .iter()
        .map(|&x| p_mean(&report, ExperimentKind::Loss, 3.0, Some(x), "tnr"))
        .collect();
    let monotone = tnr.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        monotone && tnr[3] >= 0.85 && tnr[0] <= 0.5 && seeds_of(&report) >= 20,
        format!("p-value TNR at epsilon 3 over loss 0.1/0.2/0.3/0.4: [{}]", fmt(&tnr)),
    )
}

fn strong_association_detection() -> Outcome {
    let (report, _) = single(ExperimentKind::Strong);
    let accept = p_mean(&report, ExperimentKind::Strong, 3.0, None, "strong_tpr");
    let flag = p_mean(&report, ExperimentKind::Strong, 3.0, None, "weak_tnr");
    outcome(
        accept >= 0.9 && flag >= 0.9,
        format!("correct p < 0.05 accepted {accept:.3}; oversold weak flagged {flag:.3}"),
    )
}

fn mixed_scenario_accuracy() -> Outcome {
    let (report, _) = single(ExperimentKind::Mixed);
    let offsets = report
        .config
        .as_ref()
        .map(|c| c.mixed.offsets.clone())
        .unwrap_or_default();
    let mut ok = true;
    let mut reached = false;
    let mut parts = Vec::new();
    for o in offsets {
        let v = Some(o as f64);
        let d = p_mean(&report, ExperimentKind::Mixed, 3.0, v, "p_distance");
        let three = p_mean(&report, ExperimentKind::Mixed, 3.0, v, "accuracy_3way");
        let two = p_mean(&report, ExperimentKind::Mixed, 3.0, v, "accuracy_2way");
        ok &= two >= three;
        if d >= 0.03 {
            reached = true;
            ok &= three >= 0.6 && two > three;
        }
        parts.push(format!("distance {d:.3}: 3-way {three:.3}, 2-way {two:.3}"));
    }
    outcome(ok && reached, parts.join("; "))
}

fn attack_ordering() -> Outcome {
    let (report, _) = single(ExperimentKind::Attack);
    let spec = report.config.as_ref().map(|c| c.attack.clone()).unwrap_or_default();
    let power = &report.power;
    let curve = |attack: Attack, eps: Option<f64>| -> Vec<&PowerResult> {
        let mut c: Vec<&PowerResult> = power
            .iter()
            .filter(|r| r.attack == attack && r.epsilon == eps)
            .collect();
        c.sort_by_key(|r| r.value);
        c
    };
    let slack = |a: &PowerResult, b: &PowerResult| SIGMAS * (a.power_se.powi(2) + b.power_se.powi(2)).sqrt();
    let rising = |c: &[&PowerResult]| c.windows(2).all(|w| w[1].power + slack(w[0], w[1]) >= w[0].power);
    let lrt = curve(Attack::Lrt, None);
    let mut failures = Vec::new();
    if lrt.is_empty() || !rising(&lrt) {
        failures.push("LRT not non-decreasing in l".to_string());
    }
    let eds: Vec<(f64, Vec<&PowerResult>)> = spec
        .epsilons
        .iter()
        .map(|&e| (e, curve(Attack::EditDistance, Some(e))))
        .collect();
    for (e, c) in &eds {
        if !rising(c) {
            failures.push(format!("ED at epsilon {e} not non-decreasing in k"));
        }
        for r in c {
            let Some(l) = lrt.iter().find(|x| x.value == r.value) else {
                failures.push(format!("no LRT point at {}", r.value));
                continue;
            };
            if *e <= 3.0 && r.power > l.power + slack(r, l) {
                failures.push(format!("ED at epsilon {e} above LRT at {}", r.value));
            }
            if *e == 5.0 && r.value >= 60 && r.power <= l.power {
                failures.push(format!("ED at epsilon 5 not above LRT at {}", r.value));
            }
        }
    }
    for w in eds.windows(2) {
        for (a, b) in w[0].1.iter().zip(&w[1].1) {
            if b.power + slack(a, b) < a.power {
                failures.push(format!(
                    "ED at k = {} drops from epsilon {} to {}",
                    a.value, w[0].0, w[1].0
                ));
            }
        }
    }
    let setup_ok = spec.size_a == 25 && spec.size_b == 25 && spec.fpr == 0.05 && spec.repetitions >= 50;
    let powers = |c: &[&PowerResult]| fmt(&c.iter().map(|r| r.power).collect::<Vec<_>>());
    let mut detail = format!(
        "|A| = {}, |B| = {}, {} repetitions on each of {} datasets; LRT [{}]",
        spec.size_a,
        spec.size_b,
        spec.repetitions,
        spec.replicates,
        powers(&lrt)
    );
    for (e, c) in &eds {
        detail += &format!("; ED epsilon {e} [{}]", powers(c));
    }
    if !failures.is_empty() {
        detail += &format!("; failures: {}", failures.join(", "));
    }
    outcome(setup_ok && failures.is_empty(), detail)
}

fn metadata_epsilon_error() -> Outcome {
    let (report, _) = single(ExperimentKind::Metadata);
    let tpr = |a: f64| p_mean(&report, ExperimentKind::Metadata, 3.0, Some(a), "tpr");
    let (low, same, high) = (tpr(1.0), tpr(3.0), tpr(5.0));
    outcome(
        same - low >= 0.15 && high >= same,
        format!("declared 3; TPR with actual 1 / 3 / 5: {low:.3} / {same:.3} / {high:.3}"),
    )
}

fn dp_statistics() -> Outcome {
    let (report, _) = single(ExperimentKind::Dp);
    let get = |v: Option<f64>, metric: &str| p_mean(&report, ExperimentKind::Dp, 3.0, v, metric);
    let tpr = [
        get(Some(1.0), "strong_tpr"),
        get(Some(3.0), "strong_tpr"),
        get(None, "strong_tpr"),
    ];
    let tnr = [
        get(Some(1.0), "weak_tnr"),
        get(Some(3.0), "weak_tnr"),
        get(None, "weak_tnr"),
    ];
    let ordered = |x: &[f64; 3]| x[0] < x[1] && x[1] < x[2];
    outcome(
        ordered(&tpr) && ordered(&tnr),
        format!(
            "epsilon_dp 1 / 3 / none: TPR {}; TNR {}",
            fmt(&tpr).replace(", ", " / "),
            fmt(&tnr).replace(", ", " / ")
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = common::datasets(dir);
    let first = common::run_every_command(dir, &data, "a", "1");
    let second = common::run_every_command(dir, &data, "b", "4");
    let compared: usize = first.iter().map(Vec::len).sum();
    let identical = first == second && first.iter().all(|files| !files.is_empty());
    outcome(
        identical,
        format!("7 commands, {compared} output files compared between 1-thread and 4-thread reruns"),
    )
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: 512,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn strong_dataset(seed: u64) -> CaseControlDataset {
    let cfg = SynthesisConfig {
        m: 2000,
        n_associated: 200,
        seed,
        ..SynthesisConfig::default()
    };
    synthesize_with_truth(&cfg).unwrap().dataset
}

/// Mean LRT and edit-distance power when members and non-members come from
/// one outsider pool, so both attacks face the null hypothesis.
fn null_powers(epsilon: f64, size: usize, reps: usize, fpr: f64) -> (f64, f64) {
    let research = strong_dataset(20);
    let pool = synthesize_with_truth(&SynthesisConfig {
        n_case: 1000,
        n_control: 1000,
        m: 2000,
        n_associated: 0,
        seed: 21,
        ..SynthesisConfig::default()
    })
    .unwrap()
    .dataset;
    let top = run_gwas(&research, 100, true).unwrap();
    let ids: Vec<String> = top.iter().map(|s| s.snp_id.clone()).collect();
    let cols = pool.snp_indices(&ids).unwrap();
    let case_freqs: Vec<f64> = top.iter().map(|s| s.maf).collect();
    let freqs = Cohort::all_rows(&pool).unwrap().allele_frequencies();
    let pops: Vec<f64> = ids.iter().map(|id| freqs[id]).collect();
    let (mut lrt_total, mut ed_total) = (0.0, 0.0);
    for r in 0..reps {
        let mut rows: Vec<usize> = (0..pool.n()).collect();
        rows.shuffle(&mut stream(22, &[r as u64]));
        let pick = |range: std::ops::Range<usize>| -> Vec<Vec<u8>> {
            rows[range].iter().map(|&i| pool.row(i, &cols)).collect()
        };
        let (a, b) = (pick(0..size), pick(size..2 * size));
        let partial = build_partial_noisy_dataset(&research, &ids, epsilon, derive(23, &[r as u64])).unwrap();
        let lrt = |set: &[Vec<u8>]| -> Vec<f64> {
            set.iter()
                .map(|g| lrt_statistic(g, &case_freqs, &pops, LrtVariant::Literal).unwrap().score)
                .collect()
        };
        let ed = |set: &[Vec<u8>]| -> Vec<f64> {
            set.iter()
                .map(|g| edit_distance_score(g, &partial).unwrap() as f64)
                .collect()
        };
        lrt_total += attack_power(&lrt(&a), &lrt(&b), Suspicion::HigherSuspicious, fpr)
            .unwrap()
            .power;
        ed_total += attack_power(&ed(&a), &ed(&b), Suspicion::LowerSuspicious, fpr)
            .unwrap()
            .power;
    }
    (lrt_total / reps as f64, ed_total / reps as f64)
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();
    let genotypes = |n: usize| prop::collection::vec(0u8..3, n);
    let metric = run_property(
        "edit-distance metric",
        (1usize..80).prop_flat_map(move |n| (genotypes(n), genotypes(n), genotypes(n))),
        |(x, y, z)| {
            let d = |a: &[u8], b: &[u8]| edit_distance(a, b).unwrap();
            prop_assert_eq!(d(&x, &y) == 0, x == y);
            prop_assert_eq!(d(&x, &y), d(&y, &x));
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
            Ok(())
        },
    );
    let scale = run_property(
        "phi scale invariance",
        (0.0f64..50.0, 1e-6f64..50.0, 1e-3f64..1e3),
        |(re_d, re_e, c)| {
            let base = relative_change(re_d, re_e).unwrap();
            let scaled = relative_change(c * re_d, c * re_e).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
            Ok(())
        },
    );
    let monotone = run_property(
        "verdict monotone in tau",
        (0.0f64..20.0, 0.0f64..20.0, 0.0f64..20.0, 1e-6f64..0.999, 1e-6f64..0.999),
        |(phi, tau, raise, rep, rec)| {
            for kind in StatKind::ALL {
                let (low, _) = classify_statistic(phi, tau, rep, rec, kind);
                let (high, _) = classify_statistic(phi, tau + raise, rep, rec, kind);
                prop_assert!(low != Verdict::Correct || high == Verdict::Correct);
            }
            Ok(())
        },
    );
    failures.extend([metric, scale, monotone].into_iter().filter_map(Result::err));

    let huge = 1e6;
    let (bundle, _) = build_metadata(&strong_dataset(1), 100, 100, huge, 3).unwrap();
    let cutoffs = CutoffSet::fixed([0.0; 3], Some(huge), 100);
    let report = verify_bundle(&bundle, &strong_dataset(2), &cutoffs, 3, 4).unwrap();
    let zero_phi = report.rows.iter().all(|r| r.phi == Some(0.0));
    if !(zero_phi && report.all_correct() && !report.rows.is_empty()) {
        failures.push("identity pipeline has non-zero phi or an incorrect verdict".into());
    }
    let (size, reps, fpr) = (200, 100, 0.05);
    let (lrt, ed) = null_powers(huge, size, reps, fpr);
    let sigma = (fpr * (1.0 - fpr) / (size * reps) as f64).sqrt();
    for (name, p) in [("LRT", lrt), ("edit distance", ed)] {
        if (p - fpr).abs() > SIGMAS * sigma {
            failures.push(format!(
                "{name} null power {p:.4} outside {fpr} +/- {:.4}",
                SIGMAS * sigma
            ));
        }
    }
    let detail = format!(
        "metric, scale and tau properties over 512 cases each; identity pipeline {} rows all phi 0 and correct: \
         {}; null powers LRT {lrt:.4}, ED {ed:.4} (band {fpr} +/- {:.4}){}",
        report.rows.len(),
        zero_phi && report.all_correct(),
        SIGMAS * sigma,
        if failures.is_empty() {
            String::new()
        } else {
            format!("; failures: {}", failures.join(", "))
        }
    );
    outcome(failures.is_empty(), detail)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("randomized-response correctness", randomized_response),
        ("aggregation unbiasedness", aggregation_unbiasedness),
        ("gwas formula oracle", gwas_formula_oracle),
        ("tpr-epsilon trend", tpr_epsilon_trend),
        ("tnr-utility-loss trend", tnr_loss_trend),
        ("strong-association detection", strong_association_detection),
        ("mixed-scenario accuracy", mixed_scenario_accuracy),
        ("attack ordering", attack_ordering),
        ("metadata-error scenario", metadata_epsilon_error),
        ("dp-statistics scenario", dp_statistics),
        ("determinism", determinism),
        ("property suites", property_suites),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let tag = if result.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!result.passed);
        println!("{tag} criterion {:>2} {name}: {}", i + 1, result.detail);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
