//! Case/control association statistics from genotype contingency tables.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{CaseControlDataset, Label};

/// Smallest reported p-value; keeps `-ln p` finite.
pub const P_FLOOR: f64 = 1e-300;

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Genotype counts per group. `case[g]` is S_g, `control[g]` is C_g.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub case: [u32; 3],
    pub control: [u32; 3],
}

impl ContingencyTable {
    pub fn new(case: [u32; 3], control: [u32; 3]) -> Self {
        Self { case, control }
    }

    /// S
    pub fn n_case(&self) -> u32 {
        self.case.iter().sum()
    }

    /// C
    pub fn n_control(&self) -> u32 {
        self.control.iter().sum()
    }

    /// n_g = S_g + C_g
    pub fn genotype_total(&self, g: usize) -> u32 {
        self.case[g] + self.control[g]
    }

    pub fn n(&self) -> u32 {
        self.n_case() + self.n_control()
    }

    /// Collapsed 2x2 view `[[S0, S1+S2], [C0, C1+C2]]`.
    pub fn collapsed(&self) -> [[u32; 2]; 2] {
        [
            [self.case[0], self.case[1] + self.case[2]],
            [self.control[0], self.control[1] + self.control[2]],
        ]
    }

    /// Table with the group roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            case: self.control,
            control: self.case,
        }
    }
}

/// Tallies one SNP column against the sample labels.
pub fn contingency_table(genotypes: &[u8], labels: &[Label]) -> Result<ContingencyTable> {
    if genotypes.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: genotypes.len(),
        });
    }
    if genotypes.is_empty() {
        return Err(Error::Empty("genotype column"));
    }
    let mut t = ContingencyTable::default();
    for (&g, &l) in genotypes.iter().zip(labels) {
        if g > 2 {
            return Err(Error::OutOfRange(format!("genotype {g}")));
        }
        match l {
            Label::Case => t.case[g as usize] += 1,
            Label::Control => t.control[g as usize] += 1,
        }
    }
    Ok(t)
}

/// Per-SNP association output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnpStatistics {
    pub snp_id: String,
    pub odds_ratio: f64,
    pub p_value: f64,
    /// Minor-allele frequency in the case group.
    pub maf: f64,
    /// Standard error of ln(OR).
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
}

/// Two-sided standard normal tail mass outside `±z`.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).max(P_FLOOR)
}

/// Odds ratio, its standard error and CI, z, p and case MAF for one table.
///
/// With `continuity_correction`, a table with a zero cell in its 2x2 view has
/// 0.5 added to all four cells; without it such a table is an error. The MAF
/// always uses the raw counts.
pub fn compute_statistics(
    snp_id: &str,
    table: &ContingencyTable,
    continuity_correction: bool,
) -> Result<SnpStatistics> {
    let s = table.n_case();
    if s == 0 || table.n_control() == 0 {
        return Err(Error::DegenerateTable(format!("{snp_id}: empty group")));
    }
    let [[s0, s12], [c0, c12]] = table.collapsed();
    let has_zero = s0 == 0 || s12 == 0 || c0 == 0 || c12 == 0;
    let shift = match (has_zero, continuity_correction) {
        (false, _) => 0.0,
        (true, true) => 0.5,
        (true, false) => {
            return Err(Error::DegenerateTable(format!(
                "{snp_id}: zero cell in [[{s0}, {s12}], [{c0}, {c12}]]"
            )))
        }
    };
    let (s0, s12, c0, c12) = (
        s0 as f64 + shift,
        s12 as f64 + shift,
        c0 as f64 + shift,
        c12 as f64 + shift,
    );
    let odds_ratio = (c0 * s12) / (s0 * c12);
    let se = (1.0 / s12 + 1.0 / s0 + 1.0 / c12 + 1.0 / c0).sqrt();
    let log_or = odds_ratio.ln();
    let z = log_or / se;
    let maf = (table.case[1] as f64 + 2.0 * table.case[2] as f64) / (2.0 * s as f64);
    Ok(SnpStatistics {
        snp_id: snp_id.to_string(),
        odds_ratio,
        p_value: two_sided_p(z),
        maf,
        se,
        ci_low: (log_or - Z_95 * se).exp(),
        ci_high: (log_or + Z_95 * se).exp(),
        z,
    })
}

/// Ordering used for every ranking: increasing p, then snp id.
pub fn rank_order(a: &SnpStatistics, b: &SnpStatistics) -> Ordering {
    a.p_value.total_cmp(&b.p_value).then_with(|| a.snp_id.cmp(&b.snp_id))
}

/// Statistics for every SNP, sorted by [`rank_order`]. Without continuity
/// correction, SNPs with degenerate tables are left out.
pub fn rank_all(dataset: &CaseControlDataset, continuity_correction: bool) -> Vec<SnpStatistics> {
    let labels = dataset.labels();
    let mut stats: Vec<SnpStatistics> = (0..dataset.m())
        .into_par_iter()
        .filter_map(|j| {
            let table = contingency_table(dataset.column(j), labels).ok()?;
            compute_statistics(&dataset.snp_ids()[j], &table, continuity_correction).ok()
        })
        .collect();
    stats.sort_by(rank_order);
    stats
}

/// The `l` most associated SNPs.
pub fn run_gwas(dataset: &CaseControlDataset, l: usize, continuity_correction: bool) -> Result<Vec<SnpStatistics>> {
    if l == 0 || l > dataset.m() {
        return Err(Error::OutOfRange(format!("l must be in 1..={}, got {l}", dataset.m())));
    }
    let mut all = rank_all(dataset, continuity_correction);
    if all.len() < l {
        return Err(Error::InsufficientSnps {
            needed: l,
            found: all.len(),
        });
    }
    all.truncate(l);
    Ok(all)
}

pub fn write_statistics_csv(path: &Path, stats: &[SnpStatistics]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_statistics(file, stats)
}

pub fn write_statistics<W: std::io::Write>(w: W, stats: &[SnpStatistics]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in stats {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_statistics_csv(path: &Path) -> Result<Vec<SnpStatistics>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
