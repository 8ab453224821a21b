//! Researcher-side bundle construction and controlled error injection.
//!
//! A bundle carries the released statistics for the `l` most associated SNPs
//! and a `k`-SNP partial dataset restricted to LD-independent SNPs. The full
//! ranking stays on the researcher side as [`GroundTruth`] and is only used to
//! simulate reporting errors and to score verifier output.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::utility_loss;
use crate::genotype::CaseControlDataset;
use crate::gwas::{rank_all, read_statistics_csv, write_statistics_csv, SnpStatistics};
use crate::ldp::{build_partial_noisy_dataset, sample_partial_dataset, PartialNoisyDataset};
use crate::rng::{self, tag};
use crate::verifier::StatKind;

/// Default r² above which two SNPs are treated as linked.
pub const DEFAULT_R2_THRESHOLD: f64 = 0.2;

/// Squared Pearson correlation of two genotype columns.
///
/// A constant column has r² = 1 against an identical column and 0 otherwise.
pub fn genotype_r2(x: &[u8], y: &[u8]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let vx = sxx - sx * sx / n;
    let vy = syy - sy * sy / n;
    if vx <= 1e-12 || vy <= 1e-12 {
        return if x == y { 1.0 } else { 0.0 };
    }
    let cov = sxy - sx * sy / n;
    (cov * cov / (vx * vy)).min(1.0)
}

/// Result of greedy LD pruning.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LdPruning {
    /// Retained SNPs in candidate order.
    pub representatives: Vec<String>,
    /// Pruned SNP -> the representative it is most correlated with.
    pub linkage: BTreeMap<String, String>,
}

/// Greedy pruning in candidate order: a SNP is kept when its r² with every
/// SNP kept so far is below `r2_threshold`.
///
/// r² is measured over control rows only.
pub fn ld_prune(dataset: &CaseControlDataset, candidates: &[String], r2_threshold: f64) -> Result<LdPruning> {
    check_threshold(r2_threshold)?;
    let idx = dataset.snp_indices(candidates)?;
    let mut pruner = Pruner::new(dataset, r2_threshold);
    for (id, &j) in candidates.iter().zip(&idx) {
        pruner.offer(id, j);
    }
    Ok(pruner.finish())
}

fn check_threshold(r2_threshold: f64) -> Result<()> {
    if !(r2_threshold > 0.0 && r2_threshold <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "r2 threshold must be in (0, 1], got {r2_threshold}"
        )));
    }
    Ok(())
}

struct Pruner<'a> {
    dataset: &'a CaseControlDataset,
    rows: Vec<usize>,
    threshold: f64,
    kept: Vec<(String, usize)>,
    linkage: BTreeMap<String, String>,
}

impl<'a> Pruner<'a> {
    fn new(dataset: &'a CaseControlDataset, threshold: f64) -> Self {
        Self {
            dataset,
            rows: dataset.control_indices(),
            threshold,
            kept: Vec::new(),
            linkage: BTreeMap::new(),
        }
    }

    /// Returns true when the SNP was kept.
    fn offer(&mut self, id: &str, j: usize) -> bool {
        let col = self.controls(j);
        let best = self
            .kept
            .iter()
            .map(|(rid, rj)| (rid, genotype_r2(&col, &self.controls(*rj))))
            .filter(|(_, r2)| *r2 >= self.threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((rid, _)) => {
                self.linkage.insert(id.to_string(), rid.clone());
                false
            }
            None => {
                self.kept.push((id.to_string(), j));
                true
            }
        }
    }

    fn controls(&self, j: usize) -> Vec<u8> {
        let col = self.dataset.column(j);
        self.rows.iter().map(|&i| col[i]).collect()
    }

    fn finish(self) -> LdPruning {
        LdPruning {
            representatives: self.kept.into_iter().map(|(id, _)| id).collect(),
            linkage: self.linkage,
        }
    }
}

/// Everything the verifier receives.
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataBundle {
    pub phenotype: String,
    pub population: String,
    pub n: usize,
    pub m: usize,
    /// Privacy parameter stated to the verifier. `None` for sampled partials.
    pub epsilon_declared: Option<f64>,
    pub partial: PartialNoisyDataset,
    pub reported: Vec<SnpStatistics>,
    /// Reported SNPs left out of the partial dataset, keyed to their
    /// representative.
    pub linkage: BTreeMap<String, String>,
}

/// On-disk form of a bundle; data files are referenced relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleDocument {
    phenotype: String,
    population: String,
    n: usize,
    m: usize,
    epsilon: Option<f64>,
    partial_ref: String,
    reported_ref: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    linkage: BTreeMap<String, String>,
}

impl MetadataBundle {
    pub fn l(&self) -> usize {
        self.reported.len()
    }

    pub fn k(&self) -> usize {
        self.partial.k()
    }

    /// Writes `bundle.json`, `partial.tsv`, `partial.mech` and `reported.csv`
    /// into `dir` and returns the path of the JSON document.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let doc = BundleDocument {
            phenotype: self.phenotype.clone(),
            population: self.population.clone(),
            n: self.n,
            m: self.m,
            epsilon: self.epsilon_declared,
            partial_ref: "partial.tsv".into(),
            reported_ref: "reported.csv".into(),
            linkage: self.linkage.clone(),
        };
        let tsv = dir.join(&doc.partial_ref);
        self.partial.write(&tsv, &tsv.with_extension("mech"))?;
        write_statistics_csv(&dir.join(&doc.reported_ref), &self.reported)?;
        let json = dir.join("bundle.json");
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok(json)
    }

    /// Reads a bundle written by [`MetadataBundle::write`].
    pub fn read(json: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
        let doc: BundleDocument = serde_json::from_str(&text)?;
        let base = json.parent().unwrap_or(Path::new("."));
        let tsv = base.join(&doc.partial_ref);
        let partial = PartialNoisyDataset::read(&tsv, &tsv.with_extension("mech"))?;
        let reported = read_statistics_csv(&base.join(&doc.reported_ref))?;
        Ok(Self {
            phenotype: doc.phenotype,
            population: doc.population,
            n: doc.n,
            m: doc.m,
            epsilon_declared: doc.epsilon,
            partial,
            reported,
            linkage: doc.linkage,
        })
    }
}

/// Researcher-side knowledge kept out of the bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Every SNP's statistics, strongest first.
    pub ranking: Vec<SnpStatistics>,
    rank_of: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(ranking: Vec<SnpStatistics>) -> Self {
        let rank_of = ranking.iter().enumerate().map(|(r, s)| (s.snp_id.clone(), r)).collect();
        Self { ranking, rank_of }
    }

    pub fn from_dataset(dataset: &CaseControlDataset) -> Self {
        Self::new(rank_all(dataset, true))
    }

    pub fn rank(&self, snp_id: &str) -> Option<usize> {
        self.rank_of.get(snp_id).copied()
    }

    pub fn correct(&self, snp_id: &str) -> Option<&SnpStatistics> {
        self.rank(snp_id).map(|r| &self.ranking[r])
    }

    /// Mean |p(start + j) - p(start + j - offset)| over a window of `l` ranks.
    pub fn window_p_loss(&self, start: usize, offset: usize, l: usize) -> Option<f64> {
        if offset > start || start + l > self.ranking.len() || l == 0 {
            return None;
        }
        let total: f64 = (0..l)
            .map(|j| (self.ranking[start + j].p_value - self.ranking[start + j - offset].p_value).abs())
            .sum();
        Some(total / l as f64)
    }

    /// Smallest offset `v` such that reporting the top-`l` statistics against
    /// ranks `v..v + l` costs at least `target` in p-value utility loss.
    pub fn offset_for_loss(&self, l: usize, target: f64) -> Option<usize> {
        (1..self.ranking.len()).find(|&v| self.window_p_loss(v, v, l).is_some_and(|u| u >= target))
    }

    /// Window start and offset of the first oversold window, borrowing the
    /// statistics from rank `anchor` onwards, whose p-value loss reaches
    /// `target`.
    pub fn oversell_window(&self, anchor: usize, l: usize, target: f64) -> Option<(usize, usize)> {
        (1..self.ranking.len())
            .find(|&v| self.window_p_loss(anchor + v, v, l).is_some_and(|u| u >= target))
            .map(|v| (anchor + v, v))
    }

    /// Smallest offset `v <= start` such that the window at `start` costs at
    /// least `target` when it reports the statistics of ranks `start - v..`.
    pub fn offset_for_loss_at(&self, start: usize, l: usize, target: f64) -> Option<usize> {
        (1..=start).find(|&v| self.window_p_loss(start, v, l).is_some_and(|u| u >= target))
    }
}

/// How the partial dataset is built.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PartialMode {
    Rr { epsilon: f64 },
    Sampling { b: usize },
}

/// Options for [`build_metadata_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetadataOptions {
    pub l: usize,
    pub k: usize,
    /// Rank at which the reported window starts (0 for the true top-l).
    pub start: usize,
    pub r2_threshold: f64,
    pub mode: PartialMode,
    pub seed: u64,
}

impl MetadataOptions {
    pub fn new(l: usize, k: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            l,
            k,
            start: 0,
            r2_threshold: DEFAULT_R2_THRESHOLD,
            mode: PartialMode::Rr { epsilon },
            seed,
        }
    }
}

/// Bundle for the true top-`l` with a `k`-SNP randomized-response partial.
pub fn build_metadata(
    dataset: &CaseControlDataset,
    l: usize,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(MetadataBundle, GroundTruth)> {
    let truth = GroundTruth::from_dataset(dataset);
    let bundle = build_metadata_with(dataset, &truth, &MetadataOptions::new(l, k, epsilon, seed))?;
    Ok((bundle, truth))
}

/// Bundle whose reported SNPs are ranks `start..start + l` of `truth`.
///
/// The partial dataset holds the first `k` LD-independent SNPs met while
/// walking the ranking from `start`. Reported SNPs linked to a kept SNP are
/// listed in the bundle's linkage map instead.
pub fn build_metadata_with(
    dataset: &CaseControlDataset,
    truth: &GroundTruth,
    opts: &MetadataOptions,
) -> Result<MetadataBundle> {
    let MetadataOptions { l, k, start, .. } = *opts;
    if l == 0 || l > k || k > dataset.m() {
        return Err(Error::OutOfRange(format!(
            "need 1 <= l <= k <= m, got l = {l}, k = {k}, m = {}",
            dataset.m()
        )));
    }
    check_threshold(opts.r2_threshold)?;
    if start + l > truth.ranking.len() {
        return Err(Error::InsufficientSnps {
            needed: start + l,
            found: truth.ranking.len(),
        });
    }
    let mut pruner = Pruner::new(dataset, opts.r2_threshold);
    for (visited, s) in truth.ranking[start..].iter().enumerate() {
        if pruner.kept.len() == k && visited >= l {
            break;
        }
        let j = dataset
            .snp_index(&s.snp_id)
            .ok_or_else(|| Error::UnknownSnp(s.snp_id.clone()))?;
        if pruner.kept.len() < k || visited < l {
            pruner.offer(&s.snp_id, j);
        }
    }
    let pruning = pruner.finish();
    if pruning.representatives.len() < k {
        return Err(Error::InsufficientSnps {
            needed: k,
            found: pruning.representatives.len(),
        });
    }
    let reported: Vec<SnpStatistics> = truth.ranking[start..start + l].to_vec();
    let linkage = reported
        .iter()
        .filter_map(|s| pruning.linkage.get(&s.snp_id).map(|r| (s.snp_id.clone(), r.clone())))
        .collect();
    let (partial, epsilon_declared) = match opts.mode {
        PartialMode::Rr { epsilon } => (
            build_partial_noisy_dataset(dataset, &pruning.representatives, epsilon, opts.seed)?,
            Some(epsilon),
        ),
        PartialMode::Sampling { b } => (
            sample_partial_dataset(dataset, &pruning.representatives, b, opts.seed)?,
            None,
        ),
    };
    Ok(MetadataBundle {
        phenotype: dataset.phenotype().to_string(),
        population: dataset.population().to_string(),
        n: dataset.n(),
        m: dataset.m(),
        epsilon_declared,
        partial,
        reported,
        linkage,
    })
}

/// Simulated reporting error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorScenario {
    Correct,
    /// Each reported SNP takes the statistics of the SNP `offset` ranks stronger.
    Oversell {
        offset: usize,
    },
    /// Each reported SNP takes the statistics of the SNP `offset` ranks weaker.
    Undersell {
        offset: usize,
    },
    /// Per SNP: oversell, undersell or correct with the given probabilities.
    Mixed {
        offset: usize,
        fractions: [f64; 3],
    },
    /// Partial dataset rebuilt with `epsilon_actual`; the declared value is kept.
    MetadataEpsilon {
        epsilon_actual: f64,
    },
}

impl ErrorScenario {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ErrorScenario::Oversell { offset } | ErrorScenario::Undersell { offset } if offset == 0 => {
                Err(Error::Config("offset must be at least 1".into()))
            }
            ErrorScenario::Mixed { offset, fractions } => {
                if offset == 0 {
                    return Err(Error::Config("offset must be at least 1".into()));
                }
                if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "mix fractions must be non-negative and sum to 1, got {fractions:?}"
                    )));
                }
                Ok(())
            }
            ErrorScenario::MetadataEpsilon { epsilon_actual } if !(epsilon_actual > 0.0) => {
                Err(Error::NonPositiveEpsilon(epsilon_actual))
            }
            _ => Ok(()),
        }
    }
}

/// What a reported statistic really is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Correct,
    Oversell,
    Undersell,
}

/// Mean normalized deviation of reported from correct statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityLedger {
    pub p: f64,
    pub o: f64,
    pub a: f64,
}

impl UtilityLedger {
    pub fn between(reported: &[SnpStatistics], correct: &[SnpStatistics]) -> Result<Self> {
        let col = |kind: StatKind, v: &[SnpStatistics]| v.iter().map(|s| kind.value(s)).collect::<Vec<_>>();
        let loss = |kind: StatKind| {
            let c = col(kind, correct);
            utility_loss(&col(kind, reported), &c, kind.normalizer(&c))
        };
        Ok(Self {
            p: loss(StatKind::P)?,
            o: loss(StatKind::O)?,
            a: loss(StatKind::A)?,
        })
    }

    pub fn get(&self, kind: StatKind) -> f64 {
        match kind {
            StatKind::P => self.p,
            StatKind::O => self.o,
            StatKind::A => self.a,
        }
    }
}

/// A bundle after error injection, with the labels needed to score it.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectedBundle {
    pub bundle: MetadataBundle,
    /// Per reported SNP, in bundle order.
    pub labels: Vec<Truth>,
    /// Correct statistics of the reported SNPs, in bundle order.
    pub correct: Vec<SnpStatistics>,
    pub utility: UtilityLedger,
}

fn with_values(id: &str, source: &SnpStatistics) -> SnpStatistics {
    SnpStatistics {
        snp_id: id.to_string(),
        ..source.clone()
    }
}

/// Applies `scenario` to a bundle built from `dataset`.
///
/// Reported SNP ids are never changed; only the attached values move. For
/// [`ErrorScenario::MetadataEpsilon`] the partial dataset is rebuilt from
/// `dataset` with the actual ε and the same SNPs and seed.
pub fn inject_errors(
    bundle: &MetadataBundle,
    dataset: &CaseControlDataset,
    truth: &GroundTruth,
    scenario: &ErrorScenario,
    seed: u64,
) -> Result<InjectedBundle> {
    scenario.validate()?;
    let ranks: Vec<usize> = bundle
        .reported
        .iter()
        .map(|s| truth.rank(&s.snp_id).ok_or_else(|| Error::UnknownSnp(s.snp_id.clone())))
        .collect::<Result<_>>()?;
    let correct: Vec<SnpStatistics> = ranks.iter().map(|&r| truth.ranking[r].clone()).collect();
    let shift = |id: &str, rank: usize, offset: usize, stronger: bool| -> Result<SnpStatistics> {
        let target = if stronger {
            rank.checked_sub(offset)
        } else {
            Some(rank + offset).filter(|&t| t < truth.ranking.len())
        };
        let target = target.ok_or_else(|| {
            Error::OutOfRange(format!(
                "offset {offset} from rank {rank} leaves the ranking of {} snps",
                truth.ranking.len()
            ))
        })?;
        Ok(with_values(id, &truth.ranking[target]))
    };
    let mut out = bundle.clone();
    let mut labels = vec![Truth::Correct; ranks.len()];
    match *scenario {
        ErrorScenario::Correct => {}
        ErrorScenario::Oversell { offset } | ErrorScenario::Undersell { offset } => {
            let stronger = matches!(scenario, ErrorScenario::Oversell { .. });
            for (j, &r) in ranks.iter().enumerate() {
                out.reported[j] = shift(&correct[j].snp_id, r, offset, stronger)?;
                labels[j] = if stronger { Truth::Oversell } else { Truth::Undersell };
            }
        }
        ErrorScenario::Mixed { offset, fractions } => {
            for (j, &r) in ranks.iter().enumerate() {
                let u: f64 = rng::stream(seed, &[tag::MIXED, j as u64]).gen();
                let label = if u < fractions[0] {
                    Truth::Oversell
                } else if u < fractions[0] + fractions[1] {
                    Truth::Undersell
                } else {
                    Truth::Correct
                };
                if label != Truth::Correct {
                    out.reported[j] = shift(&correct[j].snp_id, r, offset, label == Truth::Oversell)?;
                }
                labels[j] = label;
            }
        }
        ErrorScenario::MetadataEpsilon { epsilon_actual } => {
            out.partial = build_partial_noisy_dataset(dataset, bundle.partial.snp_ids(), epsilon_actual, seed)?;
        }
    }
    let utility = UtilityLedger::between(&out.reported, &correct)?;
    Ok(InjectedBundle {
        bundle: out,
        labels,
        correct,
        utility,
    })
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    snp_id: String,
    truth: Truth,
    correct_p_value: f64,
}

/// Writes `snp_id,truth,correct_p_value` for every reported SNP.
pub fn write_labels(path: &Path, injected: &InjectedBundle) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    for ((rep, truth), correct) in injected
        .bundle
        .reported
        .iter()
        .zip(&injected.labels)
        .zip(&injected.correct)
    {
        wtr.serialize(LabelRow {
            snp_id: rep.snp_id.clone(),
            truth: *truth,
            correct_p_value: correct.p_value,
        })?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Truth>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{other:?}")),
    })?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        out.insert(row.snp_id, row.truth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{synthesize_dataset, Label, SynthesisConfig};
    use crate::ldp::Mechanism;

    fn data(seed: u64) -> CaseControlDataset {
        synthesize_dataset(&SynthesisConfig {
            m: 400,
            n_associated: 20,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn r2_basics() {
        assert_eq!(genotype_r2(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert!((genotype_r2(&[0, 1, 2], &[2, 1, 0]) - 1.0).abs() < 1e-12);
        assert_eq!(genotype_r2(&[1, 1, 1], &[1, 1, 1]), 1.0);
        assert_eq!(genotype_r2(&[1, 1, 1], &[0, 1, 2]), 0.0);
    }

    #[test]
    fn duplicate_column_pruned() {
        let labels = vec![Label::Case, Label::Case, Label::Control, Label::Control];
        let d = CaseControlDataset::from_columns(
            (0..4).map(|i| format!("s{i}")).collect(),
            labels,
            vec!["a".into(), "b".into(), "c".into()],
            vec![0, 1, 2, 0, 0, 1, 2, 0, 1, 1, 0, 0],
            "t",
            "p",
        )
        .unwrap();
        let ids: Vec<String> = d.snp_ids().to_vec();
        let pr = ld_prune(&d, &ids, 0.2).unwrap();
        assert_eq!(pr.representatives, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(pr.linkage.get("b").map(String::as_str), Some("a"));
        assert!(ld_prune(&d, &ids, 0.0).is_err());
    }

    #[test]
    fn bundle_shape_and_roundtrip() {
        let d = data(1);
        let (b, truth) = build_metadata(&d, 20, 25, 3.0, 9).unwrap();
        assert_eq!((b.l(), b.k(), b.n, b.m), (20, 25, 120, 400));
        assert_eq!(b.epsilon_declared, Some(3.0));
        for s in &b.reported {
            assert!(b.partial.snp_ids().contains(&s.snp_id) || b.linkage.contains_key(&s.snp_id));
        }
        assert_eq!(truth.ranking.len(), 400);
        let dir = tempfile::tempdir().unwrap();
        let json = b.write(dir.path()).unwrap();
        let back = MetadataBundle::read(&json).unwrap();
        assert_eq!(back.reported.len(), b.reported.len());
        for (x, y) in back.reported.iter().zip(&b.reported) {
            assert_eq!(x.snp_id, y.snp_id);
            assert_eq!(x.p_value, y.p_value);
        }
        assert_eq!(back.partial, b.partial);
        let text = std::fs::read_to_string(&json).unwrap();
        for key in [
            "phenotype",
            "population",
            "\"n\"",
            "\"m\"",
            "epsilon",
            "partial_ref",
            "reported_ref",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert!(!text.contains("p_value"));
    }

    #[test]
    fn bounds_are_checked() {
        let d = data(1);
        assert!(build_metadata(&d, 30, 20, 3.0, 1).is_err());
        assert!(build_metadata(&d, 0, 20, 3.0, 1).is_err());
        assert!(build_metadata(&d, 10, 401, 3.0, 1).is_err());
    }

    #[test]
    fn oversell_and_undersell_move_p() {
        let d = data(2);
        let truth = GroundTruth::from_dataset(&d);
        let mut opts = MetadataOptions::new(10, 10, 3.0, 4);
        opts.start = 30;
        let b = build_metadata_with(&d, &truth, &opts).unwrap();
        let over = inject_errors(&b, &d, &truth, &ErrorScenario::Oversell { offset: 30 }, 1).unwrap();
        let under = inject_errors(&b, &d, &truth, &ErrorScenario::Undersell { offset: 30 }, 1).unwrap();
        for j in 0..10 {
            assert_eq!(over.bundle.reported[j].snp_id, b.reported[j].snp_id);
            assert!(over.bundle.reported[j].p_value <= b.reported[j].p_value);
            assert!(under.bundle.reported[j].p_value >= b.reported[j].p_value);
        }
        assert!(over.labels.iter().all(|&t| t == Truth::Oversell));
        assert!(over.utility.p > 0.0);
        assert!(inject_errors(&b, &d, &truth, &ErrorScenario::Oversell { offset: 31 }, 1).is_err());
        assert!(inject_errors(&b, &d, &truth, &ErrorScenario::Oversell { offset: 0 }, 1).is_err());
        let same = inject_errors(&b, &d, &truth, &ErrorScenario::Correct, 1).unwrap();
        assert_eq!(same.bundle, b);
        assert_eq!(same.utility, UtilityLedger::default());
    }

    #[test]
    fn mixed_and_epsilon_scenarios() {
        let d = data(3);
        let truth = GroundTruth::from_dataset(&d);
        let mut opts = MetadataOptions::new(40, 40, 3.0, 4);
        opts.start = 50;
        let b = build_metadata_with(&d, &truth, &opts).unwrap();
        let mix = ErrorScenario::Mixed {
            offset: 20,
            fractions: [0.4, 0.3, 0.3],
        };
        let out = inject_errors(&b, &d, &truth, &mix, 7).unwrap();
        for t in [Truth::Oversell, Truth::Undersell, Truth::Correct] {
            assert!(out.labels.contains(&t));
        }
        assert!(ErrorScenario::Mixed {
            offset: 2,
            fractions: [0.5, 0.6, -0.1]
        }
        .validate()
        .is_err());
        let eps = inject_errors(
            &b,
            &d,
            &truth,
            &ErrorScenario::MetadataEpsilon { epsilon_actual: 1.0 },
            4,
        )
        .unwrap();
        assert_eq!(eps.bundle.epsilon_declared, Some(3.0));
        assert_eq!(eps.bundle.partial.mechanism, Mechanism::Rr { epsilon: 1.0 });
        assert_eq!(eps.bundle.reported, b.reported);
    }

    #[test]
    fn offset_for_loss_reaches_target() {
        let d = data(4);
        let truth = GroundTruth::from_dataset(&d);
        let v = truth.offset_for_loss(20, 0.2).unwrap();
        assert!(truth.window_p_loss(v, v, 20).unwrap() >= 0.2);
        assert!(truth.window_p_loss(v - 1, v - 1, 20).unwrap() < 0.2);
    }
}
