//! Verifier side: recompute statistics from the partial dataset, measure how
//! far the reported values sit from them, and compare that distance with the
//! distance the privacy mechanism alone produces on a public dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confusion_metrics, ConfusionMetrics};
use crate::genotype::{CaseControlDataset, Label};
use crate::gwas::{compute_statistics, run_gwas, ContingencyTable, SnpStatistics};
use crate::ldp::{
    build_partial_noisy_dataset, estimate_counts, round_to_total, sample_partial_dataset, DpRelease, Mechanism,
    PartialNoisyDataset, RrParameters,
};
use crate::metadata::{
    build_metadata_with, inject_errors, ErrorScenario, GroundTruth, MetadataBundle, MetadataOptions, PartialMode, Truth,
};
use crate::rng::{derive, tag};

/// Which released statistic a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    P,
    O,
    A,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::P, StatKind::O, StatKind::A];

    pub fn value(self, s: &SnpStatistics) -> f64 {
        match self {
            StatKind::P => s.p_value,
            StatKind::O => s.odds_ratio,
            StatKind::A => s.maf,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StatKind::P => "p",
            StatKind::O => "o",
            StatKind::A => "a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "p" => Some(StatKind::P),
            "o" => Some(StatKind::O),
            "a" => Some(StatKind::A),
            _ => None,
        }
    }

    /// How strongly a value claims association: `-ln p` for p-values and the
    /// raw value otherwise.
    pub fn strength(self, v: f64) -> f64 {
        match self {
            StatKind::P => -v.ln(),
            _ => v,
        }
    }

    /// Utility-loss normalizer: 1 for p, 0.5 for MAF, and the largest correct
    /// odds ratio for OR.
    pub fn normalizer(self, correct: &[f64]) -> f64 {
        match self {
            StatKind::P => 1.0,
            StatKind::A => 0.5,
            StatKind::O => correct.iter().copied().fold(0.0, f64::max),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative error between a reported and a reconstructed value.
///
/// For p-values the error is taken on `-ln p`.
pub fn deviation(kind: StatKind, reported: f64, reconstructed: f64) -> Result<f64> {
    match kind {
        StatKind::P => {
            if !(reported > 0.0 && reported < 1.0) {
                return Err(Error::UndefinedDeviation(format!("reported p-value {reported}")));
            }
            let rep = -reported.ln();
            Ok((rep + reconstructed.ln()).abs() / rep)
        }
        StatKind::O | StatKind::A => {
            if !(reported > 0.0) {
                return Err(Error::UndefinedDeviation(format!(
                    "reported {} = {reported}",
                    kind.name()
                )));
            }
            Ok((reported - reconstructed).abs() / reported)
        }
    }
}

/// `|re_d - re_e| / re_e`.
///
/// Two zero deviations agree exactly and give 0; a zero reference with a
/// non-zero deviation is undefined.
pub fn relative_change(re_d: f64, re_e: f64) -> Result<f64> {
    if re_d == 0.0 && re_e == 0.0 {
        return Ok(0.0);
    }
    if !(re_e > 0.0) {
        return Err(Error::UndefinedPhi);
    }
    Ok((re_d - re_e).abs() / re_e)
}

/// Tallies per group, inverts the mechanism with the declared ε, rounds back
/// to group totals and recomputes statistics (continuity correction on).
///
/// With no declared ε the partial dataset is used as is.
pub fn reconstruct_statistics(
    partial: &PartialNoisyDataset,
    epsilon_declared: Option<f64>,
) -> Result<Vec<SnpStatistics>> {
    let data = &partial.data;
    let params = epsilon_declared.map(RrParameters::genotype).transpose()?;
    (0..data.m())
        .into_par_iter()
        .map(|j| {
            let table = observed_table(data.column(j), data.labels());
            let table = match &params {
                Some(p) => ContingencyTable::new(estimate_group(&table.case, p)?, estimate_group(&table.control, p)?),
                None => table,
            };
            compute_statistics(&data.snp_ids()[j], &table, true)
        })
        .collect()
}

fn observed_table(column: &[u8], labels: &[Label]) -> ContingencyTable {
    let mut t = ContingencyTable::default();
    for (&g, &l) in column.iter().zip(labels) {
        match l {
            Label::Case => t.case[g as usize] += 1,
            Label::Control => t.control[g as usize] += 1,
        }
    }
    t
}

fn estimate_group(observed: &[u32; 3], params: &RrParameters) -> Result<[u32; 3]> {
    let counts: Vec<u64> = observed.iter().map(|&c| c as u64).collect();
    let total: u32 = observed.iter().sum();
    let est = estimate_counts(&counts, params)?;
    let r = round_to_total(&est.adjusted, total);
    Ok([r[0], r[1], r[2]])
}

/// How reported statistic `j` is paired with the public-dataset deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// The j-th reported statistic against the j-th public statistic.
    #[default]
    RankWise,
    /// Every statistic against the mean public deviation of its kind.
    Mean,
}

/// Per-rank deviations measured on the public dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedDeviation {
    pub epsilon: Option<f64>,
    pub l: usize,
    pub trials: usize,
    /// Indexed by [`StatKind`] order (p, o, a), each of length `l`.
    pub re: [Vec<f64>; 3],
    pub mean_top_p: f64,
    pub warning: Option<String>,
}

impl ExpectedDeviation {
    pub fn of(&self, kind: StatKind) -> &[f64] {
        &self.re[kind.index()]
    }

    /// Reference deviation for reported statistic `j`.
    pub fn reference(&self, kind: StatKind, j: usize, pairing: Pairing) -> f64 {
        let v = self.of(kind);
        match pairing {
            Pairing::RankWise => v[j.min(v.len() - 1)],
            Pairing::Mean => v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Deviation of the mechanism on a public dataset, averaged over `trials`
/// independent applications of it to the public top-`l` SNPs.
pub fn expected_deviation(
    public: &CaseControlDataset,
    l: usize,
    mechanism: Mechanism,
    seed: u64,
    trials: usize,
) -> Result<ExpectedDeviation> {
    if trials == 0 {
        return Err(Error::OutOfRange("trials must be at least 1".into()));
    }
    let top = run_gwas(public, l, true)?;
    let ids: Vec<String> = top.iter().map(|s| s.snp_id.clone()).collect();
    let mut re = [vec![0.0; l], vec![0.0; l], vec![0.0; l]];
    for t in 0..trials {
        let trial_seed = derive(seed, &[tag::EXPECTED, t as u64]);
        let rec = match mechanism {
            Mechanism::Rr { epsilon } => {
                let partial = build_partial_noisy_dataset(public, &ids, epsilon, trial_seed)?;
                reconstruct_statistics(&partial, Some(epsilon))?
            }
            Mechanism::Sampling { b } => {
                let partial = sample_partial_dataset(public, &ids, b, trial_seed)?;
                reconstruct_statistics(&partial, None)?
            }
        };
        for kind in StatKind::ALL {
            for (j, (g, h)) in top.iter().zip(&rec).enumerate() {
                re[kind.index()][j] += deviation(kind, kind.value(g), kind.value(h))? / trials as f64;
            }
        }
    }
    let mean_top_p = top.iter().map(|s| s.p_value).sum::<f64>() / l as f64;
    let warning = (mean_top_p >= 0.05)
        .then(|| format!("public dataset associations are weak: mean top-{l} p-value is {mean_top_p:.4}"));
    Ok(ExpectedDeviation {
        epsilon: match mechanism {
            Mechanism::Rr { epsilon } => Some(epsilon),
            Mechanism::Sampling { .. } => None,
        },
        l,
        trials,
        re,
        mean_top_p,
        warning,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Oversell,
    Undersell,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Correct => "correct",
            Verdict::Incorrect => "incorrect",
        }
    }
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Oversell => "oversell",
            Direction::Undersell => "undersell",
            Direction::NotApplicable => "n/a",
        }
    }
}

/// Verdict and direction for one statistic. `Correct` iff `phi <= tau`.
pub fn classify_statistic(
    phi: f64,
    tau: f64,
    reported: f64,
    reconstructed: f64,
    kind: StatKind,
) -> (Verdict, Direction) {
    if phi <= tau {
        return (Verdict::Correct, Direction::NotApplicable);
    }
    (Verdict::Incorrect, direction(kind, reported, reconstructed))
}

fn direction(kind: StatKind, reported: f64, reconstructed: f64) -> Direction {
    if kind.strength(reported) > kind.strength(reconstructed) {
        Direction::Oversell
    } else {
        Direction::Undersell
    }
}

/// Φ for one reported statistic, or the reason it is undefined.
fn phi_of(
    kind: StatKind,
    reported: &SnpStatistics,
    reconstructed: &SnpStatistics,
    reference: f64,
) -> std::result::Result<f64, &'static str> {
    let re_d = deviation(kind, kind.value(reported), kind.value(reconstructed)).map_err(|_| "undefined-deviation")?;
    relative_change(re_d, reference).map_err(|_| "undefined-phi")
}

/// Calibrated thresholds with a record of how they were obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSet {
    pub tau_p: f64,
    pub tau_o: f64,
    pub tau_a: f64,
    pub record: CalibrationRecord,
}

impl CutoffSet {
    /// Hand-picked thresholds for bundles with the given ε and l; the record
    /// carries no calibration runs.
    pub fn fixed(taus: [f64; 3], epsilon: Option<f64>, l: usize) -> Self {
        Self {
            tau_p: taus[0],
            tau_o: taus[1],
            tau_a: taus[2],
            record: CalibrationRecord {
                epsilon,
                l,
                splits: 0,
                split_snps: Vec::new(),
                public_snps: 0,
                scenarios: Vec::new(),
                trials: 0,
                pairing: Pairing::default(),
                grid_size: 0,
                rule: ThresholdRule::default(),
                anchor: 0,
                sampling_b: 0,
                release_noise: None,
                fit: Vec::new(),
            },
        }
    }

    pub fn tau(&self, kind: StatKind) -> f64 {
        match kind {
            StatKind::P => self.tau_p,
            StatKind::O => self.tau_o,
            StatKind::A => self.tau_a,
        }
    }

    pub fn set_tau(&mut self, kind: StatKind, tau: f64) {
        match kind {
            StatKind::P => self.tau_p = tau,
            StatKind::O => self.tau_o = tau,
            StatKind::A => self.tau_a = tau,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub epsilon: Option<f64>,
    pub l: usize,
    pub splits: usize,
    pub split_snps: Vec<usize>,
    pub public_snps: usize,
    pub scenarios: Vec<ErrorScenario>,
    pub trials: usize,
    pub pairing: Pairing,
    pub grid_size: usize,
    pub rule: ThresholdRule,
    pub anchor: usize,
    #[serde(default)]
    pub sampling_b: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_noise: Option<DpRelease>,
    /// Per statistic: (tau, FP rate, FN rate, correct count, incorrect count).
    pub fit: Vec<CalibrationFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub statistic: StatKind,
    pub tau: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub separated: bool,
}

/// Knobs shared by calibration and verification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub trials: usize,
    pub seed: u64,
    pub pairing: Pairing,
    pub grid_size: usize,
    pub rule: ThresholdRule,
    /// Rank of the strongest statistic an oversold calibration window
    /// borrows; the window itself starts `offset` ranks below it.
    pub anchor: usize,
    /// Partition count used when no ε is declared.
    pub sampling_b: usize,
    /// Laplace noise the researcher adds to every released statistic.
    pub release_noise: Option<DpRelease>,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            pairing: Pairing::RankWise,
            grid_size: 512,
            rule: ThresholdRule::SumOfRates,
            anchor: 0,
            sampling_b: 3,
            release_noise: None,
        }
    }
}

/// Objective minimized by [`select_threshold`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// FP rate + FN rate.
    #[default]
    SumOfRates,
    /// The larger of the FP and FN rates.
    Balanced,
}

impl ThresholdRule {
    fn cost(self, fp: f64, fn_: f64) -> f64 {
        match self {
            ThresholdRule::SumOfRates => fp + fn_,
            ThresholdRule::Balanced => fp.max(fn_),
        }
    }
}

/// Threshold minimizing `rule` over an evenly spaced grid on the pooled Φ
/// range. Ties go to the larger τ. Perfectly separated classes get the
/// midpoint between the two supports.
///
/// Infinite Φ values (undefined relative change) count as always flagged and
/// do not widen the grid.
pub fn select_threshold(
    correct: &[f64],
    incorrect: &[f64],
    grid_size: usize,
    rule: ThresholdRule,
) -> Result<(f64, f64, f64, bool)> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::Calibration(
            "scenario sweep must produce both correct and incorrect statistics".into(),
        ));
    }
    let first = correct[0];
    if correct.iter().chain(incorrect).all(|&v| v == first) {
        return Err(Error::Calibration("all relative changes are identical".into()));
    }
    let rates = |tau: f64| {
        let fp = incorrect.iter().filter(|&&v| v <= tau).count() as f64 / incorrect.len() as f64;
        let fn_ = correct.iter().filter(|&&v| v > tau).count() as f64 / correct.len() as f64;
        (fp, fn_)
    };
    let max_correct = correct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_incorrect = incorrect.iter().copied().fold(f64::INFINITY, f64::min);
    if max_correct < min_incorrect {
        let tau = if min_incorrect.is_finite() {
            0.5 * (max_correct + min_incorrect)
        } else {
            max_correct
        };
        return Ok((tau, 0.0, 0.0, true));
    }
    let finite = correct.iter().chain(incorrect).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let steps = grid_size.max(2);
    let mut best = (f64::INFINITY, lo, 0.0, 0.0);
    for i in 0..steps {
        let tau = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
        let (fp, fn_) = rates(tau);
        let cost = rule.cost(fp, fn_);
        if cost <= best.0 {
            best = (cost, tau, fp, fn_);
        }
    }
    Ok((best.1, best.2, best.3, false))
}

/// Φ values for one injected bundle, grouped by the statistic's truth label.
fn phis_for(
    injected: &MetadataBundle,
    labels: &[Truth],
    expected: &ExpectedDeviation,
    pairing: Pairing,
    out: &mut CalibrationSamples,
) -> Result<()> {
    let rec = reconstruct_statistics(&injected.partial, injected.epsilon_declared)?;
    let by_id: std::collections::HashMap<&str, &SnpStatistics> = rec.iter().map(|s| (s.snp_id.as_str(), s)).collect();
    for (j, (rep, label)) in injected.reported.iter().zip(labels).enumerate() {
        let Some(h) = by_id.get(rep.snp_id.as_str()) else {
            continue;
        };
        for kind in StatKind::ALL {
            let phi = phi_of(kind, rep, h, expected.reference(kind, j, pairing)).unwrap_or(f64::INFINITY);
            let slot = &mut out[kind.index()];
            if *label == Truth::Correct {
                slot.0.push(phi);
            } else {
                slot.1.push(phi);
            }
        }
    }
    Ok(())
}

/// Pooled Φ values of one calibration run, per statistic in [`StatKind`]
/// order: `(correct, incorrect)`. Undefined Φ values are stored as +∞.
pub type CalibrationSamples = [(Vec<f64>, Vec<f64>); 3];

/// Simulates correct and incorrect reporting on SNP-disjoint splits of a
/// labelled public dataset and collects the resulting Φ values.
///
/// Every split yields one correctly reported bundle plus one bundle per
/// scenario. Oversell and mixed bundles report the window starting `offset`
/// ranks below `opts.anchor`, so stronger statistics exist for every
/// reported SNP.
pub fn calibration_samples(
    f_splits: &[CaseControlDataset],
    public: &CaseControlDataset,
    l: usize,
    epsilon: Option<f64>,
    scenarios: &[ErrorScenario],
    opts: &CalibrationOptions,
) -> Result<CalibrationSamples> {
    if f_splits.len() < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 splits, got {}",
            f_splits.len()
        )));
    }
    for s in scenarios {
        s.validate()?;
    }
    let mechanism = match epsilon {
        Some(e) => Mechanism::Rr { epsilon: e },
        None => Mechanism::Sampling { b: opts.sampling_b },
    };
    let expected = expected_deviation(public, l, mechanism, opts.seed, opts.trials)?;
    let per_split: Vec<CalibrationSamples> = f_splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| -> Result<_> {
            let truth = GroundTruth::from_dataset(split);
            let mut acc: CalibrationSamples = Default::default();
            let mut run = |start: usize, scenario: &ErrorScenario, c: usize, t: usize| -> Result<()> {
                let seed = derive(opts.seed, &[tag::CALIBRATE, i as u64, c as u64, t as u64]);
                let mode = match mechanism {
                    Mechanism::Rr { epsilon } => PartialMode::Rr { epsilon },
                    Mechanism::Sampling { b } => PartialMode::Sampling { b },
                };
                let mut mo = MetadataOptions::new(l, l, 1.0, seed);
                mo.mode = mode;
                mo.start = start;
                let b = build_metadata_with(split, &truth, &mo)?;
                let mut inj = inject_errors(&b, split, &truth, scenario, seed)?;
                if let Some(dp) = &opts.release_noise {
                    let noise_seed = derive(seed, &[tag::LAPLACE]);
                    inj.bundle.reported = dp.apply(&inj.bundle.reported, split.n_case(), noise_seed)?;
                }
                phis_for(&inj.bundle, &inj.labels, &expected, opts.pairing, &mut acc)
            };
            for t in 0..opts.trials.max(1) {
                run(0, &ErrorScenario::Correct, 0, t)?;
                for (c, s) in scenarios.iter().enumerate() {
                    let start = match *s {
                        ErrorScenario::Oversell { offset } | ErrorScenario::Mixed { offset, .. } => {
                            opts.anchor + offset
                        }
                        _ => opts.anchor,
                    };
                    run(start, s, c + 1, t)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut pooled: CalibrationSamples = Default::default();
    for split in per_split {
        for (dst, src) in pooled.iter_mut().zip(split) {
            dst.0.extend(src.0);
            dst.1.extend(src.1);
        }
    }
    Ok(pooled)
}

/// Chooses τ per statistic from the Φ values of [`calibration_samples`].
pub fn calibrate_cutoffs(
    f_splits: &[CaseControlDataset],
    public: &CaseControlDataset,
    l: usize,
    epsilon: Option<f64>,
    scenarios: &[ErrorScenario],
    opts: &CalibrationOptions,
) -> Result<CutoffSet> {
    let pooled = calibration_samples(f_splits, public, l, epsilon, scenarios, opts)?;
    let mut fit = Vec::new();
    for kind in StatKind::ALL {
        let (c, w) = &pooled[kind.index()];
        let (tau, fp_rate, fn_rate, separated) = select_threshold(c, w, opts.grid_size, opts.rule)?;
        fit.push(CalibrationFit {
            statistic: kind,
            tau,
            fp_rate,
            fn_rate,
            n_correct: c.len(),
            n_incorrect: w.len(),
            separated,
        });
    }
    Ok(CutoffSet {
        tau_p: fit[0].tau,
        tau_o: fit[1].tau,
        tau_a: fit[2].tau,
        record: CalibrationRecord {
            epsilon,
            l,
            splits: f_splits.len(),
            split_snps: f_splits.iter().map(|s| s.m()).collect(),
            public_snps: public.m(),
            scenarios: scenarios.to_vec(),
            trials: opts.trials,
            pairing: opts.pairing,
            grid_size: opts.grid_size,
            rule: opts.rule,
            anchor: opts.anchor,
            sampling_b: opts.sampling_b,
            release_noise: opts.release_noise,
            fit,
        },
    })
}

/// One line of a verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub snp_id: String,
    pub statistic: StatKind,
    /// `None` when Φ is undefined; see `reason`.
    pub phi: Option<f64>,
    pub tau: f64,
    pub verdict: Verdict,
    pub direction: Direction,
    pub reported: f64,
    pub reconstructed: f64,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub rows: Vec<ReportRow>,
    /// Reported SNPs absent from the partial dataset (LD-linked or unknown).
    pub unverified: Vec<String>,
    pub warnings: Vec<String>,
}

impl VerificationReport {
    pub fn rows_for(&self, kind: StatKind) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.statistic == kind)
    }

    pub fn all_correct(&self) -> bool {
        self.rows.iter().all(|r| r.verdict == Verdict::Correct)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["snp_id", "statistic", "phi", "tau", "verdict", "direction", "reason"])?;
        for r in &self.rows {
            wtr.write_record([
                r.snp_id.clone(),
                r.statistic.name().to_string(),
                r.phi.map(|v| v.to_string()).unwrap_or_default(),
                r.tau.to_string(),
                r.verdict.as_str().to_string(),
                r.direction.as_str().to_string(),
                r.reason.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Checks that `cutoffs` were calibrated for this bundle's ε and l.
pub fn check_calibration(bundle: &MetadataBundle, cutoffs: &CutoffSet) -> Result<()> {
    let same_eps = match (bundle.epsilon_declared, cutoffs.record.epsilon) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * a.abs().max(1.0),
        (None, None) => true,
        _ => false,
    };
    if !same_eps || bundle.l() != cutoffs.record.l {
        return Err(Error::CalibrationMismatch(format!(
            "bundle has epsilon {:?}, l = {}; cut-offs were calibrated for epsilon {:?}, l = {}",
            bundle.epsilon_declared,
            bundle.l(),
            cutoffs.record.epsilon,
            cutoffs.record.l
        )));
    }
    Ok(())
}

/// Verifies a bundle against precomputed public-dataset deviations.
pub fn verify_with_expected(
    bundle: &MetadataBundle,
    expected: &ExpectedDeviation,
    cutoffs: &CutoffSet,
) -> Result<VerificationReport> {
    check_calibration(bundle, cutoffs)?;
    if expected.l < bundle.l() {
        return Err(Error::CalibrationMismatch(format!(
            "expected deviations cover {} ranks, bundle reports {}",
            expected.l,
            bundle.l()
        )));
    }
    let pairing = cutoffs.record.pairing;
    let rec = reconstruct_statistics(&bundle.partial, bundle.epsilon_declared)?;
    let by_id: std::collections::HashMap<&str, &SnpStatistics> = rec.iter().map(|s| (s.snp_id.as_str(), s)).collect();
    let mut report = VerificationReport::default();
    report.warnings.extend(expected.warning.clone());
    for (j, rep) in bundle.reported.iter().enumerate() {
        let Some(h) = by_id.get(rep.snp_id.as_str()) else {
            report.unverified.push(rep.snp_id.clone());
            continue;
        };
        for kind in StatKind::ALL {
            let tau = cutoffs.tau(kind);
            let (reported, reconstructed) = (kind.value(rep), kind.value(h));
            let row = match phi_of(kind, rep, h, expected.reference(kind, j, pairing)) {
                Ok(phi) => {
                    let (verdict, direction) = classify_statistic(phi, tau, reported, reconstructed, kind);
                    ReportRow {
                        snp_id: rep.snp_id.clone(),
                        statistic: kind,
                        phi: Some(phi),
                        tau,
                        verdict,
                        direction,
                        reported,
                        reconstructed,
                        reason: None,
                    }
                }
                Err(code) => ReportRow {
                    snp_id: rep.snp_id.clone(),
                    statistic: kind,
                    phi: None,
                    tau,
                    verdict: Verdict::Incorrect,
                    direction: direction(kind, reported, reconstructed),
                    reported,
                    reconstructed,
                    reason: Some(code.to_string()),
                },
            };
            report.rows.push(row);
        }
    }
    Ok(report)
}

/// Full verification: expected deviations on `public`, then classification.
pub fn verify_bundle(
    bundle: &MetadataBundle,
    public: &CaseControlDataset,
    cutoffs: &CutoffSet,
    trials: usize,
    seed: u64,
) -> Result<VerificationReport> {
    check_calibration(bundle, cutoffs)?;
    let mechanism = match bundle.epsilon_declared {
        Some(epsilon) => Mechanism::Rr { epsilon },
        None => bundle.partial.mechanism,
    };
    let expected = expected_deviation(public, bundle.l(), mechanism, seed, trials)?;
    verify_with_expected(bundle, &expected, cutoffs)
}

/// Verdict counts for one statistic, with confusion metrics when ground
/// truth is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticSummary {
    pub statistic: StatKind,
    pub rows: usize,
    pub correct: usize,
    pub oversell: usize,
    pub undersell: usize,
    pub metrics: Option<ConfusionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub all_correct: bool,
    pub statistics: Vec<StatisticSummary>,
    pub unverified: Vec<String>,
    pub warnings: Vec<String>,
}

/// Summarizes a report. With `labels`, every verified SNP must have a label.
pub fn summarize(report: &VerificationReport, labels: Option<&BTreeMap<String, Truth>>) -> Result<VerificationSummary> {
    let mut statistics = Vec::new();
    for kind in StatKind::ALL {
        let rows: Vec<&ReportRow> = report.rows_for(kind).collect();
        let count = |d: Direction| {
            rows.iter()
                .filter(|r| r.verdict == Verdict::Incorrect && r.direction == d)
                .count()
        };
        let metrics = match labels {
            None => None,
            Some(map) => {
                let truth = rows
                    .iter()
                    .map(|r| {
                        map.get(&r.snp_id)
                            .map(|t| *t == Truth::Correct)
                            .ok_or_else(|| Error::UnknownSnp(r.snp_id.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let verdicts: Vec<bool> = rows.iter().map(|r| r.verdict == Verdict::Correct).collect();
                Some(confusion_metrics(&truth, &verdicts)?)
            }
        };
        statistics.push(StatisticSummary {
            statistic: kind,
            rows: rows.len(),
            correct: rows.iter().filter(|r| r.verdict == Verdict::Correct).count(),
            oversell: count(Direction::Oversell),
            undersell: count(Direction::Undersell),
            metrics,
        });
    }
    Ok(VerificationSummary {
        all_correct: report.all_correct(),
        statistics,
        unverified: report.unverified.clone(),
        warnings: report.warnings.clone(),
    })
}

/// Writes the CSV report to `path`.
pub fn write_report_csv(report: &VerificationReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    report.write_csv(file)
}
