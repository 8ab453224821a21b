//! Membership-inference risk of the released artefacts.
//!
//! Two attacks are measured. The likelihood-ratio test scores a target genome
//! against the released case MAFs and a population reference. The edit-distance
//! attack scores a target by its smallest Hamming distance to a case row of the
//! partial dataset. Power is the fraction of true members flagged once the
//! threshold is set to admit a fixed false-positive rate on non-members.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{CaseControlDataset, Label};
use crate::gwas::SnpStatistics;
use crate::ldp::{build_partial_noisy_dataset, PartialNoisyDataset};
use crate::rng::{self, derive, tag};

/// Frequencies are clamped into `[FREQ_CLAMP, 1 - FREQ_CLAMP]`.
pub const FREQ_CLAMP: f64 = 1e-6;

/// Default false-positive rate for power estimates.
pub const DEFAULT_FPR: f64 = 0.05;

/// Encoding used by the likelihood-ratio score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrtVariant {
    /// `x ln(a/pop) + (1 - x) ln((1-a)/(1-pop))` with `x` the 0/1/2 genotype.
    #[default]
    Literal,
    /// `x ln(a/pop) + (2 - x) ln((1-a)/(1-pop))`, counting both alleles.
    PerAllele,
}

/// Likelihood-ratio score plus how many frequencies had to be clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrtScore {
    pub score: f64,
    pub clamped: usize,
}

fn clamp_freq(f: f64, clamped: &mut usize) -> f64 {
    if !(FREQ_CLAMP..=1.0 - FREQ_CLAMP).contains(&f) {
        *clamped += 1;
    }
    f.clamp(FREQ_CLAMP, 1.0 - FREQ_CLAMP)
}

/// Log-likelihood ratio of "target is in the case group" against "target is
/// drawn from the reference population".
pub fn lrt_statistic(target: &[u8], case_freqs: &[f64], pop_freqs: &[f64], variant: LrtVariant) -> Result<LrtScore> {
    if target.len() != case_freqs.len() || target.len() != pop_freqs.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: case_freqs.len().min(pop_freqs.len()),
        });
    }
    let other = match variant {
        LrtVariant::Literal => 1.0,
        LrtVariant::PerAllele => 2.0,
    };
    let mut clamped = 0;
    let mut score = 0.0;
    for ((&x, &a), &p) in target.iter().zip(case_freqs).zip(pop_freqs) {
        let a = clamp_freq(a, &mut clamped);
        let p = clamp_freq(p, &mut clamped);
        let x = x as f64;
        score += x * (a / p).ln() + (other - x) * ((1.0 - a) / (1.0 - p)).ln();
    }
    Ok(LrtScore { score, clamped })
}

/// Number of positions at which two equal-length genotype vectors differ.
pub fn edit_distance(g1: &[u8], g2: &[u8]) -> Result<usize> {
    if g1.len() != g2.len() {
        return Err(Error::LengthMismatch {
            expected: g1.len(),
            got: g2.len(),
        });
    }
    Ok(g1.iter().zip(g2).filter(|(a, b)| a != b).count())
}

/// Smallest distance from `target` to a case row of the partial dataset,
/// using its first `target.len()` SNP columns.
pub fn edit_distance_score(target: &[u8], partial: &PartialNoisyDataset) -> Result<usize> {
    let data = &partial.data;
    if target.len() > data.m() {
        return Err(Error::LengthMismatch {
            expected: data.m(),
            got: target.len(),
        });
    }
    let cols: Vec<usize> = (0..target.len()).collect();
    data.case_indices()
        .into_iter()
        .map(|i| cols.iter().zip(target).filter(|(&j, &t)| data.get(i, j) != t).count())
        .min()
        .ok_or(Error::EmptyGroup("case"))
}

/// Which side of the threshold marks a target as a member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suspicion {
    HigherSuspicious,
    LowerSuspicious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attack {
    Lrt,
    EditDistance,
}

impl Attack {
    pub fn name(self) -> &'static str {
        match self {
            Attack::Lrt => "lrt",
            Attack::EditDistance => "edit-distance",
        }
    }

    pub fn axis(self) -> &'static str {
        match self {
            Attack::Lrt => "l",
            Attack::EditDistance => "k",
        }
    }

    fn suspicion(self) -> Suspicion {
        match self {
            Attack::Lrt => Suspicion::HigherSuspicious,
            Attack::EditDistance => Suspicion::LowerSuspicious,
        }
    }
}

/// Threshold and power at a target false-positive rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Power {
    pub gamma: f64,
    pub power: f64,
    pub fpr_target: f64,
    /// Probability with which a score equal to `gamma` is flagged.
    pub tie_weight: f64,
}

/// Sets γ so that `ceil((1 - fpr) |A|)` non-members fall on the safe side,
/// then reports the expected fraction of members flagged.
///
/// Scores strictly beyond γ are flagged. Scores equal to γ are flagged with the
/// probability that makes the expected number of flagged non-members exactly
/// `|A| - ceil((1 - fpr) |A|)`, so heavily tied score sets keep their nominal
/// false-positive rate instead of collapsing to zero power.
pub fn attack_power(scores_a: &[f64], scores_b: &[f64], direction: Suspicion, fpr: f64) -> Result<Power> {
    if scores_a.is_empty() || scores_b.is_empty() {
        return Err(Error::Empty("attack cohort scores"));
    }
    if !(0.0..1.0).contains(&fpr) {
        return Err(Error::OutOfRange(format!("fpr must be in [0, 1), got {fpr}")));
    }
    let mut sorted = scores_a.to_vec();
    sorted.sort_by(|a, b| match direction {
        Suspicion::HigherSuspicious => a.total_cmp(b),
        Suspicion::LowerSuspicious => b.total_cmp(a),
    });
    let keep = ((1.0 - fpr) * scores_a.len() as f64 - 1e-9).ceil() as usize;
    let gamma = sorted[keep.max(1) - 1];
    let beyond = |s: f64| match direction {
        Suspicion::HigherSuspicious => s > gamma,
        Suspicion::LowerSuspicious => s < gamma,
    };
    let allowed = scores_a.len() - keep.max(1);
    let beyond_a = scores_a.iter().filter(|&&s| beyond(s)).count();
    let tied_a = scores_a.iter().filter(|&&s| s == gamma).count();
    let tie_weight = (allowed - beyond_a) as f64 / tied_a as f64;
    let beyond_b = scores_b.iter().filter(|&&s| beyond(s)).count();
    let tied_b = scores_b.iter().filter(|&&s| s == gamma).count();
    Ok(Power {
        gamma,
        power: (beyond_b as f64 + tie_weight * tied_b as f64) / scores_b.len() as f64,
        fpr_target: fpr,
        tie_weight,
    })
}

/// Unlabelled genotype rows over a fixed SNP list: attack targets or a
/// population reference panel.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub sample_ids: Vec<String>,
    pub snp_ids: Vec<String>,
    /// One row per sample, aligned with `snp_ids`.
    pub rows: Vec<Vec<u8>>,
}

impl Cohort {
    /// Rows `samples` of `dataset`, over all of its SNPs.
    pub fn from_dataset(dataset: &CaseControlDataset, samples: &[usize]) -> Result<Self> {
        let all: Vec<usize> = (0..dataset.m()).collect();
        let rows = samples
            .iter()
            .map(|&i| {
                if i >= dataset.n() {
                    Err(Error::OutOfRange(format!("sample index {i}")))
                } else {
                    Ok(dataset.row(i, &all))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample_ids: samples.iter().map(|&i| dataset.sample_ids()[i].clone()).collect(),
            snp_ids: dataset.snp_ids().to_vec(),
            rows,
        })
    }

    /// Every row of `dataset`, regardless of label.
    pub fn all_rows(dataset: &CaseControlDataset) -> Result<Self> {
        Self::from_dataset(dataset, &(0..dataset.n()).collect::<Vec<_>>())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    fn select(&self, samples: &[usize]) -> Self {
        Self {
            sample_ids: samples.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            snp_ids: self.snp_ids.clone(),
            rows: samples.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Allele frequency per SNP over all rows.
    pub fn allele_frequencies(&self) -> HashMap<String, f64> {
        let denom = (2 * self.rows.len().max(1)) as f64;
        self.snp_ids
            .iter()
            .enumerate()
            .map(|(j, id)| {
                let alleles: u32 = self.rows.iter().map(|r| r[j] as u32).sum();
                (id.clone(), alleles as f64 / denom)
            })
            .collect()
    }
}

/// Non-members (set A) and members (set B) of the case group.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackCohorts {
    pub set_a: Cohort,
    pub set_b: Cohort,
}

impl AttackCohorts {
    pub fn new(set_a: Cohort, set_b: Cohort) -> Result<Self> {
        if set_a.snp_ids != set_b.snp_ids {
            return Err(Error::Config("attack cohorts must share snp ids".into()));
        }
        if set_a.sample_ids.iter().any(|id| set_b.sample_ids.contains(id)) {
            return Err(Error::Config("attack cohorts overlap".into()));
        }
        Ok(Self { set_a, set_b })
    }
}

/// Draws `size_b` members from the case group of `dataset` and `size_a`
/// non-members from `outsiders`. Both must share the dataset's SNP ids.
pub fn draw_cohorts(
    dataset: &CaseControlDataset,
    outsiders: &Cohort,
    size_a: usize,
    size_b: usize,
    seed: u64,
) -> Result<AttackCohorts> {
    if dataset.snp_ids() != outsiders.snp_ids.as_slice() {
        return Err(Error::Config("outsider pool must share the dataset's snp ids".into()));
    }
    let mut r = rng::stream(seed, &[tag::AUDIT, 0]);
    let mut cases = dataset.case_indices();
    if cases.len() < size_b || outsiders.n() < size_a || size_a == 0 || size_b == 0 {
        return Err(Error::OutOfRange(format!(
            "cannot draw {size_b} members from {} cases and {size_a} outsiders from {}",
            cases.len(),
            outsiders.n()
        )));
    }
    cases.shuffle(&mut r);
    cases.truncate(size_b);
    cases.sort_unstable();
    let mut rows: Vec<usize> = (0..outsiders.n()).collect();
    rows.shuffle(&mut r);
    rows.truncate(size_a);
    rows.sort_unstable();
    AttackCohorts::new(outsiders.select(&rows), Cohort::from_dataset(dataset, &cases)?)
}

/// Population allele frequency per SNP from the control rows of a labelled
/// reference dataset.
pub fn population_frequencies(reference: &CaseControlDataset) -> HashMap<String, f64> {
    let rows = reference.control_indices();
    reference
        .snp_ids()
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let col = reference.column(j);
            let alleles: u32 = rows.iter().map(|&i| col[i] as u32).sum();
            (id.clone(), alleles as f64 / (2 * rows.len()) as f64)
        })
        .collect()
}

/// One point of a power curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub attack: Attack,
    /// Number of statistics (LRT) or partial-dataset SNPs (edit distance).
    pub value: usize,
    pub epsilon: Option<f64>,
    /// Mean γ over repetitions.
    pub gamma: f64,
    /// Mean power over repetitions.
    pub power: f64,
    /// Standard error of the mean power.
    pub power_se: f64,
    pub fpr_target: f64,
    pub repetitions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditOptions {
    pub fpr: f64,
    pub size_a: usize,
    pub size_b: usize,
    pub repetitions: usize,
    pub variant: LrtVariant,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            fpr: DEFAULT_FPR,
            size_a: 25,
            size_b: 25,
            repetitions: 50,
            variant: LrtVariant::Literal,
            seed: 0,
        }
    }
}

/// Power of `attack` at each axis value (and each ε for edit distance).
///
/// `ranking` orders the SNPs of `dataset` from strongest to weakest; the
/// first `value` entries are attacked. Every repetition draws fresh cohorts
/// and, for edit distance, a fresh partial dataset. Reported numbers are
/// means over repetitions.
#[allow(clippy::too_many_arguments)]
pub fn power_curve(
    dataset: &CaseControlDataset,
    outsiders: &Cohort,
    ranking: &[SnpStatistics],
    pop_freqs: &HashMap<String, f64>,
    attack: Attack,
    axis_values: &[usize],
    epsilons: &[f64],
    opts: &AuditOptions,
) -> Result<Vec<PowerResult>> {
    if axis_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("axis values must be sorted ascending".into()));
    }
    let max_axis = axis_values.last().copied().unwrap_or(0);
    if max_axis == 0 || max_axis > ranking.len() {
        return Err(Error::OutOfRange(format!(
            "axis values must lie in 1..={}",
            ranking.len()
        )));
    }
    if opts.repetitions == 0 {
        return Err(Error::OutOfRange("repetitions must be at least 1".into()));
    }
    let ids: Vec<String> = ranking[..max_axis].iter().map(|s| s.snp_id.clone()).collect();
    let cols = dataset.snp_indices(&ids)?;
    let eps_list: Vec<Option<f64>> = match attack {
        Attack::Lrt => vec![None],
        Attack::EditDistance => {
            if epsilons.is_empty() {
                return Err(Error::Config("edit-distance curve needs at least one epsilon".into()));
            }
            epsilons.iter().map(|&e| Some(e)).collect()
        }
    };
    let pops: Vec<f64> = ids
        .iter()
        .map(|id| pop_freqs.get(id).copied().ok_or_else(|| Error::UnknownSnp(id.clone())))
        .collect::<Result<_>>()?;
    let case_freqs: Vec<f64> = ranking[..max_axis].iter().map(|s| s.maf).collect();

    // per repetition: per (eps index, axis index) -> (gamma, power)
    let per_rep: Vec<Vec<Power>> = (0..opts.repetitions)
        .into_par_iter()
        .map(|r| -> Result<Vec<Power>> {
            let rep_seed = derive(opts.seed, &[tag::AUDIT, r as u64]);
            let cohorts = draw_cohorts(dataset, outsiders, opts.size_a, opts.size_b, rep_seed)?;
            let rows =
                |c: &Cohort| -> Vec<Vec<u8>> { c.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect() };
            let (rows_a, rows_b) = (rows(&cohorts.set_a), rows(&cohorts.set_b));
            let mut out = Vec::new();
            for (e_idx, eps) in eps_list.iter().enumerate() {
                let partial = match eps {
                    Some(e) => Some(build_partial_noisy_dataset(
                        dataset,
                        &ids,
                        *e,
                        derive(rep_seed, &[tag::RR, e_idx as u64]),
                    )?),
                    None => None,
                };
                for &v in axis_values {
                    let score = |g: &Vec<u8>| -> Result<f64> {
                        match &partial {
                            None => Ok(lrt_statistic(&g[..v], &case_freqs[..v], &pops[..v], opts.variant)?.score),
                            Some(p) => Ok(edit_distance_score(&g[..v], p)? as f64),
                        }
                    };
                    let sa = rows_a.iter().map(score).collect::<Result<Vec<_>>>()?;
                    let sb = rows_b.iter().map(score).collect::<Result<Vec<_>>>()?;
                    out.push(attack_power(&sa, &sb, attack.suspicion(), opts.fpr)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut results = Vec::new();
    for (e_idx, eps) in eps_list.iter().enumerate() {
        for (a_idx, &v) in axis_values.iter().enumerate() {
            let cell = e_idx * axis_values.len() + a_idx;
            let reps = per_rep.len() as f64;
            let power = per_rep.iter().map(|p| p[cell].power).sum::<f64>() / reps;
            let var = if per_rep.len() > 1 {
                per_rep.iter().map(|p| (p[cell].power - power).powi(2)).sum::<f64>() / (reps - 1.0)
            } else {
                0.0
            };
            results.push(PowerResult {
                attack,
                value: v,
                epsilon: *eps,
                gamma: per_rep.iter().map(|p| p[cell].gamma).sum::<f64>() / reps,
                power,
                power_se: (var / reps).sqrt(),
                fpr_target: opts.fpr,
                repetitions: per_rep.len(),
            });
        }
    }
    Ok(results)
}

/// Writes power curves as `attack,axis,value,epsilon,gamma,power,power_se`.
pub fn write_power_csv<W: Write>(w: W, results: &[PowerResult]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["attack", "axis", "value", "epsilon", "gamma", "power", "power_se"])?;
    for r in results {
        wtr.write_record([
            r.attack.name().to_string(),
            r.attack.axis().to_string(),
            r.value.to_string(),
            r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            r.gamma.to_string(),
            r.power.to_string(),
            r.power_se.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_power_csv_file(path: &Path, results: &[PowerResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_power_csv(file, results)
}

/// Moves `count` random rows carrying `label` out of `dataset`, returning
/// the remaining dataset and the held-out rows.
pub fn hold_out(
    dataset: &CaseControlDataset,
    label: Label,
    count: usize,
    seed: u64,
) -> Result<(CaseControlDataset, Cohort)> {
    let mut pool: Vec<usize> = (0..dataset.n()).filter(|&i| dataset.labels()[i] == label).collect();
    if pool.len() < count {
        return Err(Error::OutOfRange(format!(
            "cannot hold out {count} of {} {} rows",
            pool.len(),
            label.as_str()
        )));
    }
    pool.shuffle(&mut rng::stream(seed, &[tag::AUDIT, 1]));
    pool.truncate(count);
    pool.sort_unstable();
    let rest: Vec<usize> = (0..dataset.n()).filter(|i| pool.binary_search(i).is_err()).collect();
    Ok((dataset.select_samples(&rest)?, Cohort::from_dataset(dataset, &pool)?))
}
