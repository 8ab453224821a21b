//! Case/control genotype matrices: validation, TSV I/O, synthesis,
//! partitioning and random relabelling.
//!
//! Genotypes are minor-allele counts in `{0, 1, 2}` stored column-major (one
//! contiguous slice per SNP), since almost every consumer works SNP by SNP.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{parse_pair, KvDoc};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Case => "case",
            Label::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "case" => Some(Label::Case),
            "control" => Some(Label::Control),
            _ => None,
        }
    }
}

/// Supported genotype matrix encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    /// Header `sample_id  label  <snp ids...>`, one sample per row.
    Tsv,
}

/// Axis along which a dataset is split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Snps,
    Samples,
}

/// An immutable case/control genotype matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseControlDataset {
    sample_ids: Vec<String>,
    labels: Vec<Label>,
    snp_ids: Vec<String>,
    /// Column-major: `genotypes[snp * n + sample]`.
    genotypes: Vec<u8>,
    phenotype: String,
    population: String,
}

impl CaseControlDataset {
    /// Builds a dataset from column-major genotypes, enforcing every invariant.
    pub fn from_columns(
        sample_ids: Vec<String>,
        labels: Vec<Label>,
        snp_ids: Vec<String>,
        genotypes: Vec<u8>,
        phenotype: impl Into<String>,
        population: impl Into<String>,
    ) -> Result<Self> {
        let n = sample_ids.len();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        if genotypes.len() != n * snp_ids.len() {
            return Err(Error::LengthMismatch {
                expected: n * snp_ids.len(),
                got: genotypes.len(),
            });
        }
        if snp_ids.is_empty() {
            return Err(Error::Empty("snp list"));
        }
        if let Some(pos) = genotypes.iter().position(|&g| g > 2) {
            return Err(Error::GenotypeDomain {
                sample: sample_ids[pos % n].clone(),
                snp: snp_ids[pos / n].clone(),
                value: genotypes[pos].to_string(),
            });
        }
        if !labels.contains(&Label::Case) {
            return Err(Error::EmptyGroup("case"));
        }
        if !labels.contains(&Label::Control) {
            return Err(Error::EmptyGroup("control"));
        }
        Ok(Self {
            sample_ids,
            labels,
            snp_ids,
            genotypes,
            phenotype: phenotype.into(),
            population: population.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn m(&self) -> usize {
        self.snp_ids.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    pub fn phenotype(&self) -> &str {
        &self.phenotype
    }

    pub fn population(&self) -> &str {
        &self.population
    }

    pub fn n_case(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Case).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_case()
    }

    /// Genotypes of SNP `j` across all samples.
    pub fn column(&self, j: usize) -> &[u8] {
        let n = self.n();
        &self.genotypes[j * n..(j + 1) * n]
    }

    pub fn get(&self, sample: usize, snp: usize) -> u8 {
        self.genotypes[snp * self.n() + sample]
    }

    /// Genotype vector of one sample restricted to `snps`.
    pub fn row(&self, sample: usize, snps: &[usize]) -> Vec<u8> {
        snps.iter().map(|&j| self.get(sample, j)).collect()
    }

    pub fn snp_index(&self, id: &str) -> Option<usize> {
        self.snp_ids.iter().position(|s| s == id)
    }

    /// Indices of `ids`, failing on the first unknown identifier.
    pub fn snp_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: std::collections::HashMap<&str, usize> =
            self.snp_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownSnp(id.clone()))
            })
            .collect()
    }

    pub fn case_indices(&self) -> Vec<usize> {
        self.indices_of(Label::Case)
    }

    pub fn control_indices(&self) -> Vec<usize> {
        self.indices_of(Label::Control)
    }

    fn indices_of(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// New dataset restricted to the given SNP columns, in the given order.
    pub fn select_snps(&self, snps: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut genotypes = Vec::with_capacity(n * snps.len());
        for &j in snps {
            genotypes.extend_from_slice(self.column(j));
        }
        Self::from_columns(
            self.sample_ids.clone(),
            self.labels.clone(),
            snps.iter().map(|&j| self.snp_ids[j].clone()).collect(),
            genotypes,
            self.phenotype.clone(),
            self.population.clone(),
        )
    }

    /// New dataset restricted to the given sample rows, in the given order.
    pub fn select_samples(&self, samples: &[usize]) -> Result<Self> {
        let mut genotypes = Vec::with_capacity(samples.len() * self.m());
        for j in 0..self.m() {
            let col = self.column(j);
            genotypes.extend(samples.iter().map(|&i| col[i]));
        }
        Self::from_columns(
            samples.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            samples.iter().map(|&i| self.labels[i]).collect(),
            self.snp_ids.clone(),
            genotypes,
            self.phenotype.clone(),
            self.population.clone(),
        )
    }

    /// Same genotypes under a different labelling.
    pub fn with_labels(&self, labels: Vec<Label>) -> Result<Self> {
        Self::from_columns(
            self.sample_ids.clone(),
            labels,
            self.snp_ids.clone(),
            self.genotypes.clone(),
            self.phenotype.clone(),
            self.population.clone(),
        )
    }

    /// Serializes to the TSV format. Phenotype and population travel as
    /// leading `#key=value` comment lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#phenotype={}", self.phenotype);
        let _ = writeln!(out, "#population={}", self.population);
        out.push_str("sample_id\tlabel");
        for id in &self.snp_ids {
            out.push('\t');
            out.push_str(id);
        }
        out.push('\n');
        for i in 0..self.n() {
            out.push_str(&self.sample_ids[i]);
            out.push('\t');
            out.push_str(self.labels[i].as_str());
            for j in 0..self.m() {
                out.push('\t');
                out.push((b'0' + self.get(i, j)) as char);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut phenotype = String::new();
        let mut population = String::new();
        let mut header: Option<Vec<String>> = None;
        let mut sample_ids = Vec::new();
        let mut labels = Vec::new();
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    match k.trim() {
                        "phenotype" => phenotype = v.trim().to_string(),
                        "population" => population = v.trim().to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let Some(head) = &header else {
                if fields.len() < 3 || fields[0] != "sample_id" || fields[1] != "label" {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "header must start with sample_id<TAB>label and name at least one snp".into(),
                    });
                }
                header = Some(fields[2..].iter().map(|s| s.to_string()).collect());
                continue;
            };
            if fields.len() != head.len() + 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", head.len() + 2, fields.len()),
                });
            }
            let label = Label::parse(fields[1]).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("label must be case or control, got {:?}", fields[1]),
            })?;
            let mut row = Vec::with_capacity(head.len());
            for (j, tok) in fields[2..].iter().enumerate() {
                let g = match *tok {
                    "0" => 0,
                    "1" => 1,
                    "2" => 2,
                    other => {
                        return Err(Error::GenotypeDomain {
                            sample: fields[0].to_string(),
                            snp: head[j].clone(),
                            value: other.to_string(),
                        })
                    }
                };
                row.push(g);
            }
            sample_ids.push(fields[0].to_string());
            labels.push(label);
            rows.push(row);
        }
        let snp_ids = header.ok_or(Error::Empty("genotype file"))?;
        let n = rows.len();
        let mut genotypes = vec![0u8; n * snp_ids.len()];
        for (i, row) in rows.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                genotypes[j * n + i] = g;
            }
        }
        Self::from_columns(sample_ids, labels, snp_ids, genotypes, phenotype, population)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a genotype file.
pub fn load_dataset(path: &Path, format: MatrixFormat) -> Result<CaseControlDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        MatrixFormat::Tsv => CaseControlDataset::from_tsv(&text),
    }
}

/// Parameters of the synthetic case/control generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n_case: usize,
    pub n_control: usize,
    pub m: usize,
    pub n_associated: usize,
    /// Range of case MAF minus control MAF for associated SNPs.
    pub effect_range: (f64, f64),
    /// Range of control-group MAF.
    pub baseline_maf_range: (f64, f64),
    pub seed: u64,
    /// SNPs per LD block; 1 disables block LD.
    #[serde(default = "one")]
    pub ld_block_size: usize,
    /// Per-cell probability that a copied SNP is redrawn instead of copied.
    #[serde(default)]
    pub ld_flip_prob: f64,
    #[serde(default = "default_phenotype")]
    pub phenotype: String,
    #[serde(default = "default_population")]
    pub population: String,
}

fn one() -> usize {
    1
}

fn default_phenotype() -> String {
    "synthetic".into()
}

fn default_population() -> String {
    "synthetic".into()
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_case: 60,
            n_control: 60,
            m: 5000,
            n_associated: 50,
            effect_range: (0.25, 0.25),
            baseline_maf_range: (0.05, 0.25),
            seed: 0,
            ld_block_size: 1,
            ld_flip_prob: 0.0,
            phenotype: default_phenotype(),
            population: default_population(),
        }
    }
}

const SYNTH_KEYS: &[&str] = &[
    "n_case",
    "n_control",
    "m",
    "n_associated",
    "effect_range",
    "baseline_maf_range",
    "seed",
    "ld_block_size",
    "ld_flip_prob",
    "phenotype",
    "population",
];

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_case == 0 || self.n_control == 0 {
            return Err(Error::Config("n_case and n_control must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        if self.n_associated > self.m {
            return Err(Error::Config(format!(
                "n_associated ({}) exceeds m ({})",
                self.n_associated, self.m
            )));
        }
        let (lo, hi) = self.baseline_maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!(
                "baseline_maf_range must lie in (0, 0.5], got ({lo}, {hi})"
            )));
        }
        let (elo, ehi) = self.effect_range;
        if !(elo.is_finite() && ehi.is_finite() && elo <= ehi) {
            return Err(Error::Config(format!("bad effect_range ({elo}, {ehi})")));
        }
        if self.n_associated > 0 {
            // Every effect in range needs some baseline keeping both MAFs in [0, 0.5].
            for gap in [elo, ehi] {
                if feasible_baseline(self.baseline_maf_range, gap).is_none() {
                    return Err(Error::Infeasible(format!(
                        "effect {gap} pushes case MAF outside [0, 0.5] for every baseline in ({lo}, {hi})"
                    )));
                }
            }
        }
        if self.ld_block_size == 0 {
            return Err(Error::Config("ld_block_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ld_flip_prob) {
            return Err(Error::Config("ld_flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        doc.only(SYNTH_KEYS)?;
        let d = Self::default();
        let pair = |key: &str, default: (f64, f64)| -> Result<(f64, f64)> {
            match doc.raw(key) {
                None => Ok(default),
                Some(v) => parse_pair(v).ok_or_else(|| Error::Config(format!("{key} must be \"lo,hi\", got {v:?}"))),
            }
        };
        let cfg = Self {
            n_case: doc.get("n_case")?.unwrap_or(d.n_case),
            n_control: doc.get("n_control")?.unwrap_or(d.n_control),
            m: doc.get("m")?.unwrap_or(d.m),
            n_associated: doc.get("n_associated")?.unwrap_or(d.n_associated),
            effect_range: pair("effect_range", d.effect_range)?,
            baseline_maf_range: pair("baseline_maf_range", d.baseline_maf_range)?,
            seed: doc.get("seed")?.unwrap_or(d.seed),
            ld_block_size: doc.get("ld_block_size")?.unwrap_or(d.ld_block_size),
            ld_flip_prob: doc.get("ld_flip_prob")?.unwrap_or(d.ld_flip_prob),
            phenotype: doc.raw("phenotype").map_or(d.phenotype, str::to_string),
            population: doc.raw("population").map_or(d.population, str::to_string),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_case = {}\nn_control = {}\nm = {}\nn_associated = {}\neffect_range = {},{}\n\
             baseline_maf_range = {},{}\nseed = {}\nld_block_size = {}\nld_flip_prob = {}\n\
             phenotype = {}\npopulation = {}\n",
            self.n_case,
            self.n_control,
            self.m,
            self.n_associated,
            self.effect_range.0,
            self.effect_range.1,
            self.baseline_maf_range.0,
            self.baseline_maf_range.1,
            self.seed,
            self.ld_block_size,
            self.ld_flip_prob,
            self.phenotype,
            self.population
        )
    }
}

/// Interval of control MAFs for which `control + gap` stays inside [0, 0.5].
fn feasible_baseline((lo, hi): (f64, f64), gap: f64) -> Option<(f64, f64)> {
    let a = lo.max(-gap);
    let b = hi.min(0.5 - gap);
    (a <= b).then_some((a, b))
}

fn draw_hwe<R: Rng>(rng: &mut R, maf: f64) -> u8 {
    u8::from(rng.gen::<f64>() < maf) + u8::from(rng.gen::<f64>() < maf)
}

/// Synthetic dataset plus the identifiers of the SNPs carrying a planted effect.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: CaseControlDataset,
    pub associated: Vec<String>,
}

/// Generates a case/control dataset with `n_associated` planted effects.
///
/// Without block LD each SNP is independent. With `ld_block_size > 1` the
/// first SNP of each block is drawn from its MAFs and each following SNP
/// copies its predecessor cell by cell, redrawing a cell with probability
/// `ld_flip_prob`; associations are then planted per block.
pub fn synthesize_dataset(config: &SynthesisConfig) -> Result<CaseControlDataset> {
    synthesize_with_truth(config).map(|s| s.dataset)
}

pub fn synthesize_with_truth(config: &SynthesisConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let n = config.n_case + config.n_control;
    let block = config.ld_block_size;
    let n_blocks = config.m.div_ceil(block);

    let mut chosen: Vec<usize> = (0..n_blocks).collect();
    chosen.shuffle(&mut rng::stream(config.seed, &[tag::SYNTH, 0]));
    let mut is_assoc = vec![false; n_blocks];
    for &b in chosen.iter().take(config.n_associated.min(n_blocks)) {
        is_assoc[b] = true;
    }

    let labels: Vec<Label> = (0..n)
        .map(|i| if i < config.n_case { Label::Case } else { Label::Control })
        .collect();
    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let snp_ids: Vec<String> = (0..config.m).map(|j| format!("snp{j:06}")).collect();

    let blocks: Vec<Result<Vec<u8>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut prng = rng::stream(config.seed, &[tag::SYNTH, 1, b as u64]);
            let gap = if is_assoc[b] {
                let (lo, hi) = config.effect_range;
                if hi > lo {
                    prng.gen_range(lo..=hi)
                } else {
                    lo
                }
            } else {
                0.0
            };
            let (blo, bhi) = feasible_baseline(config.baseline_maf_range, gap)
                .ok_or_else(|| Error::Infeasible(format!("effect {gap} has no feasible baseline")))?;
            let control_maf = if bhi > blo { prng.gen_range(blo..=bhi) } else { blo };
            let case_maf = control_maf + gap;
            let start = b * block;
            let end = (start + block).min(config.m);
            let mut out = Vec::with_capacity((end - start) * n);
            for j in start..end {
                let mut crng = rng::stream(config.seed, &[tag::SYNTH, 2, j as u64]);
                for i in 0..n {
                    let maf = if i < config.n_case { case_maf } else { control_maf };
                    let fresh = draw_hwe(&mut crng, maf);
                    let g = if j == start {
                        fresh
                    } else {
                        let prev = out[(j - start - 1) * n + i];
                        if crng.gen::<f64>() < config.ld_flip_prob {
                            fresh
                        } else {
                            prev
                        }
                    };
                    out.push(g);
                }
            }
            Ok(out)
        })
        .collect();

    let mut genotypes = Vec::with_capacity(n * config.m);
    for b in blocks {
        genotypes.extend(b?);
    }
    let associated = (0..config.m)
        .filter(|j| is_assoc[j / block])
        .map(|j| snp_ids[j].clone())
        .collect();
    let dataset = CaseControlDataset::from_columns(
        sample_ids,
        labels,
        snp_ids,
        genotypes,
        config.phenotype.clone(),
        config.population.clone(),
    )?;
    Ok(SyntheticDataset { dataset, associated })
}

/// Splits `count` items into `parts` chunk sizes differing by at most one.
fn chunk_sizes(count: usize, parts: usize, extra_first: bool) -> Vec<usize> {
    let base = count / parts;
    let rem = count % parts;
    (0..parts)
        .map(|p| {
            let gets_extra = if extra_first { p < rem } else { p >= parts - rem };
            base + usize::from(gets_extra)
        })
        .collect()
}

/// Randomly partitions a dataset into `parts` disjoint pieces.
///
/// Along the SNP axis the pieces have SNP counts differing by at most one
/// (original column order kept within a piece). Along the sample axis cases
/// and controls are dealt separately so each piece keeps the group balance
/// within one sample.
pub fn partition_dataset(
    dataset: &CaseControlDataset,
    parts: usize,
    axis: Axis,
    seed: u64,
) -> Result<Vec<CaseControlDataset>> {
    if parts < 2 {
        return Err(Error::OutOfRange(format!("parts must be at least 2, got {parts}")));
    }
    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    match axis {
        Axis::Snps => {
            if parts > dataset.m() {
                return Err(Error::OutOfRange(format!("{parts} parts exceed {} snps", dataset.m())));
            }
            let mut idx: Vec<usize> = (0..dataset.m()).collect();
            idx.shuffle(&mut rng);
            let mut offset = 0;
            chunk_sizes(dataset.m(), parts, true)
                .into_iter()
                .map(|size| {
                    let mut piece = idx[offset..offset + size].to_vec();
                    offset += size;
                    piece.sort_unstable();
                    dataset.select_snps(&piece)
                })
                .collect()
        }
        Axis::Samples => {
            let limit = dataset.n_case().min(dataset.n_control());
            if parts > limit {
                return Err(Error::OutOfRange(format!(
                    "{parts} parts exceed the smaller group size {limit}"
                )));
            }
            let mut cases = dataset.case_indices();
            let mut controls = dataset.control_indices();
            cases.shuffle(&mut rng);
            controls.shuffle(&mut rng);
            let cs = chunk_sizes(cases.len(), parts, true);
            let ks = chunk_sizes(controls.len(), parts, false);
            let (mut co, mut ko) = (0, 0);
            (0..parts)
                .map(|p| {
                    let mut piece: Vec<usize> = cases[co..co + cs[p]]
                        .iter()
                        .chain(&controls[ko..ko + ks[p]])
                        .copied()
                        .collect();
                    co += cs[p];
                    ko += ks[p];
                    piece.sort_unstable();
                    dataset.select_samples(&piece)
                })
                .collect()
        }
    }
}

/// Replaces the labels with a uniformly random balanced assignment.
pub fn random_label(dataset: &CaseControlDataset, seed: u64) -> Result<CaseControlDataset> {
    let n = dataset.n();
    if !n.is_multiple_of(2) {
        return Err(Error::OutOfRange(format!(
            "random labelling needs an even sample count, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag::LABEL]));
    let mut labels = vec![Label::Control; n];
    for &i in &idx[..n / 2] {
        labels[i] = Label::Case;
    }
    dataset.with_labels(labels)
}
