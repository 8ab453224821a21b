//! Independent oracles for the statistical building blocks: closed-form
//! values, brute-force re-implementations and Monte-Carlo checks.

use gwas_verify::genotype::{random_label, synthesize_with_truth, CaseControlDataset, Label, SynthesisConfig};
use gwas_verify::gwas::{compute_statistics, rank_all, run_gwas, ContingencyTable};
use gwas_verify::ldp::Mechanism;
use gwas_verify::ldp::{
    build_partial_noisy_dataset, estimate_counts, laplace_noise, perturb_value, round_to_total, RrParameters,
};
use gwas_verify::metadata::{build_metadata, genotype_r2, inject_errors, ld_prune, ErrorScenario};
use gwas_verify::rng::stream;
use gwas_verify::verifier::{expected_deviation, StatKind};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

struct OracleStats {
    odds_ratio: f64,
    se: f64,
    ci_low: f64,
    ci_high: f64,
    z: f64,
    p: f64,
    maf: f64,
}

/// Direct evaluation of the association formulas on a zero-free table, with
/// the normal tail taken from an unrelated CDF implementation.
fn oracle(case: [u32; 3], control: [u32; 3]) -> OracleStats {
    let s0 = case[0] as f64;
    let s12 = (case[1] + case[2]) as f64;
    let c0 = control[0] as f64;
    let c12 = (control[1] + control[2]) as f64;
    let odds_ratio = (c0 * s12) / (s0 * c12);
    let se = (1.0 / s0 + 1.0 / s12 + 1.0 / c0 + 1.0 / c12).sqrt();
    let log_or = odds_ratio.ln();
    let z = log_or / se;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = 2.0 * normal.cdf(-z.abs());
    let s = (case[0] + case[1] + case[2]) as f64;
    OracleStats {
        odds_ratio,
        se,
        ci_low: (log_or - 1.96 * se).exp(),
        ci_high: (log_or + 1.96 * se).exp(),
        z,
        p,
        maf: (case[1] as f64 + 2.0 * case[2] as f64) / (2.0 * s),
    }
}

#[test]
fn worked_table_matches_high_precision_values() {
    let t = ContingencyTable::new([2, 1, 1], [1, 2, 1]);
    let s = compute_statistics("x", &t, false).unwrap();
    assert!(rel_err(s.odds_ratio, 1.0 / 3.0) < 1e-15);
    assert!(rel_err(s.maf, 0.375) < 1e-15);
    assert!(rel_err(s.se, 1.527_525_231_651_946_8) < 1e-14);
    assert!(rel_err(s.z, -0.719_210_567_461_469_8) < 1e-13);
    assert!(rel_err(s.p_value, 0.472_011_189_273_175_1) < 1e-12);
    assert!(rel_err(s.ci_low, 0.016_696_406_828_062_38) < 1e-12);
    assert!(rel_err(s.ci_high, 6.654_791_791_750_176) < 1e-12);
}

#[test]
fn gwas_matches_brute_force_on_random_tables() {
    let mut r = stream(11, &[1]);
    for _ in 0..50 {
        let case = [r.gen_range(1..80), r.gen_range(0..60), r.gen_range(1..40)];
        let control = [r.gen_range(1..80), r.gen_range(1..60), r.gen_range(0..40)];
        let got = compute_statistics("x", &ContingencyTable::new(case, control), false).unwrap();
        let want = oracle(case, control);
        for (g, w) in [
            (got.odds_ratio, want.odds_ratio),
            (got.se, want.se),
            (got.ci_low, want.ci_low),
            (got.ci_high, want.ci_high),
            (got.z, want.z),
            (got.p_value, want.p),
            (got.maf, want.maf),
        ] {
            assert!(rel_err(g, w) <= 1e-9, "{case:?} {control:?}: {g} vs {w}");
        }
        let swapped = compute_statistics("x", &ContingencyTable::new(control, case), false).unwrap();
        assert!(rel_err(swapped.odds_ratio, 1.0 / got.odds_ratio) <= 1e-12);
        assert!(rel_err(swapped.p_value, got.p_value) <= 1e-12);
    }
}

#[test]
fn randomized_response_keeps_and_flips_at_the_stated_rates() {
    let params = RrParameters::genotype(2f64.ln()).unwrap();
    assert!((params.p_keep - 0.5).abs() < 1e-15);
    assert!((params.q_flip - 0.25).abs() < 1e-15);
    let n = 1_000_000;
    let mut r = stream(12, &[1]);
    let mut counts = [0u64; 3];
    for _ in 0..n {
        counts[perturb_value(1, &params, &mut r) as usize] += 1;
    }
    let keep = counts[1] as f64 / n as f64;
    assert!((keep - 0.5).abs() <= 0.002, "keep rate {keep}");
    let diff = counts[0] as f64 - counts[2] as f64;
    let sd = (2.0 * n as f64 * params.q_flip).sqrt();
    assert!(diff.abs() <= 3.0 * sd, "flip asymmetry {diff} vs sd {sd}");
}

fn small_dataset(seed: u64, m: usize) -> CaseControlDataset {
    let cfg = SynthesisConfig {
        m,
        n_associated: m / 10,
        seed,
        ..SynthesisConfig::default()
    };
    synthesize_with_truth(&cfg).unwrap().dataset
}

#[test]
fn perturbed_cells_change_at_the_flip_rate() {
    let d = small_dataset(3, 400);
    let ids = d.snp_ids().to_vec();
    let eps = 3.0;
    let params = RrParameters::genotype(eps).unwrap();
    let a = build_partial_noisy_dataset(&d, &ids, eps, 1).unwrap();
    let b = build_partial_noisy_dataset(&d, &ids, eps, 2).unwrap();
    let cells = (d.n() * d.m()) as f64;
    let mut vs_original = 0usize;
    let mut between = 0usize;
    for j in 0..d.m() {
        for i in 0..d.n() {
            vs_original += usize::from(a.data.get(i, j) != d.get(i, j));
            between += usize::from(a.data.get(i, j) != b.data.get(i, j));
        }
    }
    let check = |count: usize, rate: f64| {
        let sd = (rate * (1.0 - rate) / cells).sqrt();
        let got = count as f64 / cells;
        assert!((got - rate).abs() <= 3.0 * sd, "rate {got} vs {rate}");
    };
    check(vs_original, 1.0 - params.p_keep);
    check(between, 1.0 - params.p_keep.powi(2) - 2.0 * params.q_flip.powi(2));
}

#[test]
fn count_inversion_is_unbiased() {
    let ln2 = RrParameters::genotype(2f64.ln()).unwrap();
    let est = estimate_counts(&[40, 30, 30], &ln2).unwrap();
    for (g, w) in est.raw.iter().zip([60.0, 20.0, 20.0]) {
        assert!((g - w).abs() < 1e-9);
    }

    let params = RrParameters::genotype(3.0).unwrap();
    let truth = [7000u32, 2000, 1000];
    let n: u32 = truth.iter().sum();
    let trials = 100;
    let mut sum = [0.0; 3];
    let mut sum_sq = [0.0; 3];
    let mut r = stream(13, &[1]);
    for _ in 0..trials {
        let mut observed = [0u64; 3];
        for (value, &count) in truth.iter().enumerate() {
            for _ in 0..count {
                observed[perturb_value(value as u8, &params, &mut r) as usize] += 1;
            }
        }
        let est = estimate_counts(&observed, &params).unwrap();
        for v in 0..3 {
            sum[v] += est.raw[v];
            sum_sq[v] += est.raw[v] * est.raw[v];
        }
        assert_eq!(round_to_total(&est.adjusted, n).iter().sum::<u32>(), n);
    }
    for v in 0..3 {
        let mean = sum[v] / trials as f64;
        let var = (sum_sq[v] - trials as f64 * mean * mean) / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - truth[v] as f64).abs() <= 3.0 * se,
            "value {v}: {mean} vs {} (se {se})",
            truth[v]
        );
    }
}

#[test]
fn laplace_noise_has_zero_mean_and_requested_scale() {
    let n = 100_000;
    for scale in [1.0f64, 1.0 / 3.0, 0.2] {
        let mut r = stream(14, &[scale.to_bits()]);
        let draws: Vec<f64> = (0..n).map(|_| laplace_noise(scale, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (2.0f64).sqrt() * scale / (n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sd, "mean {mean}");
        let mean_abs = draws.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!((mean_abs / scale - 1.0).abs() <= 0.02, "scale {mean_abs} vs {scale}");
    }
}

#[test]
fn planted_associations_lead_the_ranking() {
    let mut hits = Vec::new();
    for seed in 0..20 {
        let cfg = SynthesisConfig {
            m: 5000,
            n_associated: 50,
            seed,
            ..SynthesisConfig::default()
        };
        let s = synthesize_with_truth(&cfg).unwrap();
        let top = run_gwas(&s.dataset, 100, true).unwrap();
        hits.push(top.iter().filter(|t| s.associated.contains(&t.snp_id)).count());
    }
    let mean = hits.iter().sum::<usize>() as f64 / hits.len() as f64;
    assert!(mean >= 40.0, "planted SNPs in top 100: {hits:?}");
    assert!(hits.iter().all(|&h| h >= 35), "planted SNPs in top 100: {hits:?}");
}

#[test]
fn relabelled_data_is_null() {
    let mut fractions = Vec::new();
    for seed in 0..20 {
        let d = small_dataset(seed, 2000);
        let shuffled = random_label(&d, seed + 100).unwrap();
        let stats = rank_all(&shuffled, true);
        fractions.push(stats.iter().filter(|s| s.p_value < 0.05).count() as f64 / stats.len() as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let sd = (0.05 * 0.95 / (20.0 * 2000.0f64)).sqrt();
    assert!((mean - 0.05).abs() <= 0.01 + 3.0 * sd, "null fraction {mean}");
}

#[test]
fn pruning_keeps_one_snp_per_block() {
    let cfg = SynthesisConfig {
        n_case: 500,
        n_control: 500,
        m: 200,
        n_associated: 0,
        ld_block_size: 5,
        ld_flip_prob: 0.05,
        seed: 9,
        ..SynthesisConfig::default()
    };
    let d = synthesize_with_truth(&cfg).unwrap().dataset;
    let ids = d.snp_ids().to_vec();
    let kept = ld_prune(&d, &ids, 0.2).unwrap().representatives;
    let controls = d.control_indices();
    let column = |j: usize| -> Vec<u8> { controls.iter().map(|&i| d.get(i, j)).collect() };
    let mut greedy: Vec<usize> = Vec::new();
    for j in 0..d.m() {
        if greedy.iter().all(|&k| brute_r2(&column(j), &column(k)) < 0.2) {
            greedy.push(j);
        }
    }
    let want: Vec<String> = greedy.iter().map(|&j| ids[j].clone()).collect();
    assert_eq!(kept, want);
    let blocks: std::collections::BTreeSet<usize> = greedy.iter().map(|j| j / 5).collect();
    assert_eq!(blocks.len(), 40);
    assert_eq!(greedy.len(), 40);
    assert!((genotype_r2(&column(0), &column(1)) - brute_r2(&column(0), &column(1))).abs() < 1e-12);
}

fn brute_r2(x: &[u8], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64 - mx, b as f64 - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy * sxy / (sxx * syy)
    }
}

#[test]
fn metadata_epsilon_error_perturbs_at_the_actual_epsilon() {
    let d = small_dataset(21, 2000);
    let (bundle, truth) = build_metadata(&d, 100, 100, 3.0, 5).unwrap();
    let ids = bundle.partial.snp_ids().to_vec();
    let cols = d.snp_indices(&ids).unwrap();
    for actual in [1.0, 5.0] {
        let out = inject_errors(
            &bundle,
            &d,
            &truth,
            &ErrorScenario::MetadataEpsilon { epsilon_actual: actual },
            6,
        )
        .unwrap();
        assert_eq!(out.bundle.epsilon_declared, Some(3.0));
        let partial = &out.bundle.partial.data;
        let mut kept = 0usize;
        for (pj, &j) in cols.iter().enumerate() {
            for i in 0..d.n() {
                kept += usize::from(partial.get(i, pj) == d.get(i, j));
            }
        }
        let cells = (d.n() * cols.len()) as f64;
        let p = RrParameters::genotype(actual).unwrap().p_keep;
        let sd = (p * (1.0 - p) / cells).sqrt();
        assert!((kept as f64 / cells - p).abs() <= 3.0 * sd, "epsilon {actual}");
    }
}

#[test]
fn averaging_trials_shrinks_expected_deviation_variance() {
    let public = small_dataset(31, 2000);
    let labelled = random_label(&public, 4).unwrap();
    let e = expected_deviation(&labelled, 100, Mechanism::Rr { epsilon: 3.0 }, 1, 5).unwrap();
    assert!(StatKind::ALL
        .iter()
        .all(|&k| e.of(k).iter().all(|&v| v.is_finite() && v >= 0.0)));
    let mean_re = |trials: usize, seed: u64| -> f64 {
        let e = expected_deviation(&public, 100, Mechanism::Rr { epsilon: 3.0 }, seed, trials).unwrap();
        e.of(StatKind::P).iter().sum::<f64>() / 100.0
    };
    let variance = |trials: usize| -> f64 {
        let xs: Vec<f64> = (0..30).map(|s| mean_re(trials, 1000 + s)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let (one, five) = (variance(1), variance(5));
    assert!(five < one, "variance with 5 trials {five} vs 1 trial {one}");
    let strong = expected_deviation(&public, 100, Mechanism::Rr { epsilon: 3.0 }, 2, 5).unwrap();
    assert!(strong.of(StatKind::P).iter().all(|&v| v > 0.0));
}

#[test]
fn labels_are_balanced_after_relabelling() {
    let d = small_dataset(41, 100);
    let shuffled = random_label(&d, 1).unwrap();
    let cases = shuffled.labels().iter().filter(|&&l| l == Label::Case).count();
    assert_eq!(cases, d.n() / 2);
}
