//! Local-privacy mechanisms for the partial dataset and differential-privacy
//! noise for released statistics.
//!
//! Direct-encoding randomized response over a domain of size `d` keeps a value
//! with probability `p = e^ε / (d - 1 + e^ε)` and otherwise reports one of the
//! `d - 1` other values uniformly, each with probability `q = 1 / (d - 1 + e^ε)`.
//! An aggregator that observes `c_i` reports of value `i` out of `n` estimates
//! the true count as `(c_i - n q) / (p - q)`.

use std::path::Path;

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{partition_dataset, Axis, CaseControlDataset, Label};
use crate::gwas::{SnpStatistics, P_FLOOR};
use crate::kv::KvDoc;
use crate::rng::{self, tag};

/// Genotype domain size.
pub const GENOTYPE_DOMAIN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RrParameters {
    pub epsilon: f64,
    pub d: usize,
    pub p_keep: f64,
    pub q_flip: f64,
}

impl RrParameters {
    /// Report probabilities for `epsilon` over a domain of `d` values.
    pub fn new(epsilon: f64, d: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::NonPositiveEpsilon(epsilon));
        }
        if d < 2 {
            return Err(Error::OutOfRange(format!("domain size must be >= 2, got {d}")));
        }
        let shrink = (-epsilon).exp();
        let denom = 1.0 + (d - 1) as f64 * shrink;
        Ok(Self {
            epsilon,
            d,
            p_keep: 1.0 / denom,
            q_flip: shrink / denom,
        })
    }

    pub fn genotype(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, GENOTYPE_DOMAIN)
    }
}

/// Same as [`RrParameters::new`].
pub fn rr_probabilities(epsilon: f64, d: usize) -> Result<RrParameters> {
    RrParameters::new(epsilon, d)
}

/// Randomized response on one value in `0..d`.
pub fn perturb_value<R: Rng + ?Sized>(value: u8, params: &RrParameters, rng: &mut R) -> u8 {
    debug_assert!((value as usize) < params.d);
    if rng.gen::<f64>() < params.p_keep {
        return value;
    }
    let alt = rng.gen_range(0..params.d - 1) as u8;
    if alt >= value {
        alt + 1
    } else {
        alt
    }
}

/// How the partial dataset was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum Mechanism {
    Rr { epsilon: f64 },
    Sampling { b: usize },
}

/// The k-SNP submatrix released alongside the statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialNoisyDataset {
    pub data: CaseControlDataset,
    pub mechanism: Mechanism,
    pub seed_commitment: String,
}

impl PartialNoisyDataset {
    pub fn k(&self) -> usize {
        self.data.m()
    }

    pub fn snp_ids(&self) -> &[String] {
        self.data.snp_ids()
    }

    pub fn labels(&self) -> &[Label] {
        self.data.labels()
    }

    pub fn sidecar(&self) -> String {
        let mut out = String::new();
        match self.mechanism {
            Mechanism::Rr { epsilon } => {
                out.push_str("mechanism = rr\n");
                out.push_str(&format!("epsilon = {epsilon}\n"));
            }
            Mechanism::Sampling { b } => {
                out.push_str("mechanism = sampling\n");
                out.push_str(&format!("b = {b}\n"));
            }
        }
        out.push_str(&format!("seed_commitment = {}\n", self.seed_commitment));
        out
    }

    pub fn parse_sidecar(text: &str) -> Result<(Mechanism, String)> {
        let doc = KvDoc::parse(text)?;
        doc.only(&["mechanism", "epsilon", "b", "seed_commitment"])?;
        let mechanism = match doc.raw("mechanism") {
            Some("rr") => {
                let epsilon: f64 = doc.require("epsilon")?;
                RrParameters::genotype(epsilon)?;
                Mechanism::Rr { epsilon }
            }
            Some("sampling") => Mechanism::Sampling { b: doc.require("b")? },
            other => {
                return Err(Error::Config(format!(
                    "mechanism must be rr or sampling, got {other:?}"
                )))
            }
        };
        let commitment = doc.raw("seed_commitment").unwrap_or_default().to_string();
        Ok((mechanism, commitment))
    }

    /// Writes `<stem>.tsv` and `<stem>.mech` next to each other.
    pub fn write(&self, tsv: &Path, sidecar: &Path) -> Result<()> {
        self.data.write_tsv(tsv)?;
        std::fs::write(sidecar, self.sidecar()).map_err(|e| Error::io(sidecar, e))
    }

    pub fn read(tsv: &Path, sidecar: &Path) -> Result<Self> {
        let data = crate::genotype::load_dataset(tsv, crate::genotype::MatrixFormat::Tsv)?;
        let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let (mechanism, seed_commitment) = Self::parse_sidecar(&text)?;
        Ok(Self {
            data,
            mechanism,
            seed_commitment,
        })
    }
}

fn anonymous_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("r{i:05}")).collect()
}

/// Perturbs every cell of the chosen SNP columns with randomized response.
///
/// Column `j` of the output draws from its own stream, so the result does not
/// depend on evaluation order. Labels are copied; sample ids are replaced by
/// anonymous row ids in the original row order.
pub fn build_partial_noisy_dataset(
    dataset: &CaseControlDataset,
    snp_ids: &[String],
    epsilon: f64,
    seed: u64,
) -> Result<PartialNoisyDataset> {
    let params = RrParameters::genotype(epsilon)?;
    if snp_ids.is_empty() {
        return Err(Error::Empty("partial dataset snp list"));
    }
    let idx = dataset.snp_indices(snp_ids)?;
    let n = dataset.n();
    let mut genotypes = Vec::with_capacity(n * idx.len());
    for (j, &col) in idx.iter().enumerate() {
        let mut r = rng::stream(seed, &[tag::RR, j as u64]);
        genotypes.extend(dataset.column(col).iter().map(|&g| perturb_value(g, &params, &mut r)));
    }
    let data = CaseControlDataset::from_columns(
        anonymous_ids(n),
        dataset.labels().to_vec(),
        snp_ids.to_vec(),
        genotypes,
        dataset.phenotype(),
        dataset.population(),
    )?;
    Ok(PartialNoisyDataset {
        data,
        mechanism: Mechanism::Rr { epsilon },
        seed_commitment: rng::commitment(seed),
    })
}

/// Raw and post-processed count estimates for one group of reports.
#[derive(Clone, Debug, PartialEq)]
pub struct CountEstimate {
    /// `(c_i - n q) / (p - q)`; unbiased, may be negative.
    pub raw: Vec<f64>,
    /// Negatives clamped to zero, then rescaled to sum to `n`.
    pub adjusted: Vec<f64>,
}

/// Inverts randomized response on observed per-value tallies.
pub fn estimate_counts(observed: &[u64], params: &RrParameters) -> Result<CountEstimate> {
    if observed.len() != params.d {
        return Err(Error::LengthMismatch {
            expected: params.d,
            got: observed.len(),
        });
    }
    let gap = params.p_keep - params.q_flip;
    if gap.abs() < 1e-12 {
        return Err(Error::Unidentifiable);
    }
    let n: u64 = observed.iter().sum();
    let nf = n as f64;
    let raw: Vec<f64> = observed
        .iter()
        .map(|&c| (c as f64 - nf * params.q_flip) / gap)
        .collect();
    let clamped: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let adjusted = if total > 0.0 {
        clamped.iter().map(|&x| x * nf / total).collect()
    } else {
        vec![0.0; params.d]
    };
    Ok(CountEstimate { raw, adjusted })
}

/// Rounds non-negative reals to integers summing to `total` (largest remainder).
pub fn round_to_total(values: &[f64], total: u32) -> Vec<u32> {
    let mut floors: Vec<u32> = values.iter().map(|&v| v.max(0.0).floor() as u32).collect();
    let assigned: u32 = floors.iter().sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Largest fractional part first; lower index wins ties.
    order.sort_by(|&a, &b| {
        let fa = values[a] - values[a].floor();
        let fb = values[b] - values[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(assigned);
    let mut i = 0;
    while missing > 0 && !order.is_empty() {
        floors[order[i % order.len()]] += 1;
        missing -= 1;
        i += 1;
    }
    let mut excess = assigned.saturating_sub(total);
    while excess > 0 {
        if let Some(j) = (0..floors.len()).filter(|&j| floors[j] > 0).max_by_key(|&j| floors[j]) {
            floors[j] -= 1;
        }
        excess -= 1;
    }
    floors
}

/// Builds a partial dataset by sampling each SNP from one of `b` sample
/// partitions instead of adding noise.
///
/// `dataset` is split into `b` balanced sample partitions. Every output column
/// copies the rows of one partition chosen uniformly at random for that SNP.
/// The output holds as many cases and controls as the smallest partition.
pub fn sample_partial_dataset(
    dataset: &CaseControlDataset,
    snp_ids: &[String],
    b: usize,
    seed: u64,
) -> Result<PartialNoisyDataset> {
    if b < 2 {
        return Err(Error::OutOfRange(format!("b must be at least 2, got {b}")));
    }
    if b > dataset.n() / 2 {
        return Err(Error::OutOfRange(format!("b = {b} exceeds n/2 = {}", dataset.n() / 2)));
    }
    if snp_ids.is_empty() {
        return Err(Error::Empty("partial dataset snp list"));
    }
    let idx = dataset.snp_indices(snp_ids)?;
    let parts = partition_dataset(dataset, b, Axis::Samples, rng::derive(seed, &[tag::SAMPLING]))?;
    let n_case = parts.iter().map(|p| p.n_case()).min().unwrap_or(0);
    let n_control = parts.iter().map(|p| p.n_control()).min().unwrap_or(0);
    let rows: Vec<Vec<usize>> = parts
        .iter()
        .map(|p| {
            let mut r = p.case_indices();
            r.truncate(n_case);
            let mut c = p.control_indices();
            c.truncate(n_control);
            r.extend(c);
            r
        })
        .collect();
    let n_out = n_case + n_control;
    let mut genotypes = Vec::with_capacity(n_out * idx.len());
    let mut pick = rng::stream(seed, &[tag::SAMPLING, 1]);
    for &col in &idx {
        let which = pick.gen_range(0..b);
        let part = &parts[which];
        let pj = part
            .snp_index(&dataset.snp_ids()[col])
            .expect("partitions keep every snp");
        genotypes.extend(rows[which].iter().map(|&i| part.get(i, pj)));
    }
    let labels = std::iter::repeat_n(Label::Case, n_case)
        .chain(std::iter::repeat_n(Label::Control, n_control))
        .collect();
    let data = CaseControlDataset::from_columns(
        anonymous_ids(n_out),
        labels,
        snp_ids.to_vec(),
        genotypes,
        dataset.phenotype(),
        dataset.population(),
    )?;
    Ok(PartialNoisyDataset {
        data,
        mechanism: Mechanism::Sampling { b },
        seed_commitment: rng::commitment(seed),
    })
}

/// Per-statistic sensitivities for the Laplace mechanism.
///
/// MAF changes by at most `1 / S` when one case individual changes. P-values
/// and odds ratios have no useful global bound, so theirs are supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityModel {
    pub p_value: f64,
    pub odds_ratio: f64,
    pub n_case: usize,
}

impl SensitivityModel {
    pub fn new(n_case: usize) -> Self {
        Self {
            p_value: 1.0,
            odds_ratio: 1.0,
            n_case,
        }
    }

    pub fn maf(&self) -> f64 {
        1.0 / self.n_case.max(1) as f64
    }
}

/// One draw from a zero-mean Laplace distribution with the given scale.
pub fn laplace_noise<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds independent Laplace noise to the released p-value, odds ratio and MAF
/// of every statistic, then clamps each to its domain. Other fields are left
/// as computed.
pub fn laplace_perturb_statistics(
    stats: &[SnpStatistics],
    epsilon_dp: f64,
    sensitivity: &SensitivityModel,
    seed: u64,
) -> Result<Vec<SnpStatistics>> {
    if !(epsilon_dp > 0.0) {
        return Err(Error::NonPositiveEpsilon(epsilon_dp));
    }
    Ok(stats
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut r = rng::stream(seed, &[tag::LAPLACE, j as u64]);
            let mut out = s.clone();
            out.p_value = (s.p_value + laplace_noise(sensitivity.p_value / epsilon_dp, &mut r)).clamp(P_FLOOR, 1.0);
            out.odds_ratio = (s.odds_ratio + laplace_noise(sensitivity.odds_ratio / epsilon_dp, &mut r)).max(1e-12);
            out.maf = (s.maf + laplace_noise(sensitivity.maf() / epsilon_dp, &mut r)).clamp(0.0, 1.0);
            out
        })
        .collect())
}

/// Laplace noise applied by the researcher to the released statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpRelease {
    pub epsilon_dp: f64,
    /// Sensitivity assumed for the p-value.
    pub p_value_sensitivity: f64,
    /// Sensitivity assumed for the odds ratio.
    pub odds_ratio_sensitivity: f64,
}

impl DpRelease {
    pub fn new(epsilon_dp: f64) -> Self {
        Self {
            epsilon_dp,
            p_value_sensitivity: 1.0,
            odds_ratio_sensitivity: 1.0,
        }
    }

    /// Sensitivity model for a study with `n_case` cases.
    pub fn model(&self, n_case: usize) -> SensitivityModel {
        SensitivityModel {
            p_value: self.p_value_sensitivity,
            odds_ratio: self.odds_ratio_sensitivity,
            n_case,
        }
    }

    /// Noisy copy of `stats` for a study with `n_case` cases.
    pub fn apply(&self, stats: &[SnpStatistics], n_case: usize, seed: u64) -> Result<Vec<SnpStatistics>> {
        laplace_perturb_statistics(stats, self.epsilon_dp, &self.model(n_case), seed)
    }
}
