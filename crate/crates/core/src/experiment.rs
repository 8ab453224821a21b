//! Experiment grids: configuration, per-cell execution, report files and
//! trend checks.
//!
//! A run synthesizes one research dataset per seed, one public dataset and
//! one calibration dataset, then evaluates each requested experiment. Every
//! random choice is keyed by the root seed, the experiment, the cell's
//! parameter values and the seed index, so adding or removing a cell never
//! changes another cell's numbers.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{hold_out, power_curve, write_power_csv, Attack, AuditOptions, Cohort, LrtVariant, PowerResult};
use crate::error::{Error, Result};
use crate::genotype::{partition_dataset, synthesize_dataset, Axis, CaseControlDataset, Label, SynthesisConfig};
use crate::gwas::rank_all;
use crate::ldp::{build_partial_noisy_dataset, DpRelease, Mechanism};
use crate::metadata::{
    build_metadata_with, inject_errors, ErrorScenario, GroundTruth, InjectedBundle, MetadataBundle, MetadataOptions,
    PartialMode, Truth,
};
use crate::rng::{derive, tag};
use crate::verifier::{
    calibrate_cutoffs, expected_deviation, verify_with_expected, CalibrationOptions, CutoffSet, Direction,
    ExpectedDeviation, Pairing, StatKind, ThresholdRule, Verdict, VerificationReport,
};

/// Synthetic dataset parameters; the seed is supplied by the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_case: usize,
    pub n_control: usize,
    pub m: usize,
    pub n_associated: usize,
    /// Case MAF minus control MAF at associated SNPs.
    pub effect: f64,
    /// Range of control-group MAF.
    pub baseline_maf: (f64, f64),
    pub ld_block_size: usize,
    pub ld_flip_prob: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_case: 60,
            n_control: 60,
            m: 5000,
            n_associated: 200,
            effect: 0.25,
            baseline_maf: (0.05, 0.25),
            ld_block_size: 1,
            ld_flip_prob: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn synthesis(&self, seed: u64) -> SynthesisConfig {
        SynthesisConfig {
            n_case: self.n_case,
            n_control: self.n_control,
            m: self.m,
            n_associated: self.n_associated,
            effect_range: (self.effect, self.effect),
            baseline_maf_range: self.baseline_maf,
            seed,
            ld_block_size: self.ld_block_size,
            ld_flip_prob: self.ld_flip_prob,
            ..Default::default()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<CaseControlDataset> {
        synthesize_dataset(&self.synthesis(seed))
    }
}

/// The calibration dataset and how cut-offs are fitted on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub dataset: DatasetSpec,
    /// SNP-disjoint splits of the calibration dataset.
    pub splits: usize,
    /// Oversell offsets simulated on every split.
    pub offsets: Vec<usize>,
    /// Rank of the strongest statistic an oversold window borrows.
    pub anchor: usize,
    pub pairing: Pairing,
    pub rule: ThresholdRule,
    pub grid_size: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                m: 25_000,
                n_associated: 1000,
                ..DatasetSpec::default()
            },
            splits: 5,
            offsets: vec![250, 500, 1000, 1500, 2000],
            anchor: 0,
            pairing: Pairing::Mean,
            rule: ThresholdRule::SumOfRates,
            grid_size: 512,
        }
    }
}

/// Oversold windows of increasing utility loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub epsilons: Vec<f64>,
    pub losses: Vec<f64>,
    /// The borrowed statistics start at the first rank whose p-value is at
    /// least this value.
    pub anchor_p: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            epsilons: vec![1.0, 2.0, 3.0, 5.0],
            losses: vec![0.1, 0.2, 0.3, 0.4],
            anchor_p: 0.005,
        }
    }
}

/// Strong correct statistics against oversold weak ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongSpec {
    pub epsilon: f64,
    /// Correct statistics below this p-value are scored.
    pub strong_p: f64,
    /// The oversold window starts at the first rank at or above this p-value
    /// and reports the top statistics.
    pub weak_p: f64,
}

impl Default for StrongSpec {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            strong_p: 0.05,
            weak_p: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSpec {
    pub epsilon: f64,
    pub offsets: Vec<usize>,
    /// Oversell, undersell and correct fractions.
    pub fractions: [f64; 3],
    /// The window starts `offset` ranks after the first rank whose p-value
    /// is at least this value.
    pub anchor_p: f64,
}

impl Default for MixedSpec {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            offsets: vec![25, 50, 100, 200, 400, 800],
            fractions: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            anchor_p: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetadataErrorSpec {
    pub declared: f64,
    pub actual: Vec<f64>,
}

impl Default for MetadataErrorSpec {
    fn default() -> Self {
        Self {
            declared: 3.0,
            actual: vec![1.0, 3.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSpec {
    pub epsilon: f64,
    pub epsilon_dp: Vec<f64>,
    pub p_value_sensitivity: f64,
    pub odds_ratio_sensitivity: f64,
}

impl Default for DpSpec {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            epsilon_dp: vec![1.0, 3.0, 5.0],
            p_value_sensitivity: 0.01,
            odds_ratio_sensitivity: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LSweepSpec {
    pub epsilon: f64,
    pub values: Vec<usize>,
}

impl Default for LSweepSpec {
    fn default() -> Self {
        Self {
            epsilon: 5.0,
            values: vec![10, 50, 100, 200],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    pub b: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { b: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffSweepSpec {
    pub epsilon: f64,
    /// Factors applied to the calibrated p-value threshold.
    pub multipliers: Vec<f64>,
}

impl Default for CutoffSweepSpec {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            multipliers: vec![0.5, 0.75, 1.0, 1.5, 2.0],
        }
    }
}

/// Public and calibration datasets of weaker or stronger association than
/// the research data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PublicStrengthSpec {
    pub epsilon: f64,
    /// Effect sizes used for both the public and the calibration dataset.
    pub effects: Vec<f64>,
}

impl Default for PublicStrengthSpec {
    fn default() -> Self {
        Self {
            epsilon: 3.0,
            effects: vec![0.15, 0.25, 0.35],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// Attacked study; cases are the members.
    pub dataset: DatasetSpec,
    /// Controls drawn from the same population and used as non-members.
    pub outsiders: usize,
    /// Controls drawn from the same population and used as the reference panel.
    pub reference: usize,
    /// Independent attacked datasets whose power curves are averaged.
    pub replicates: usize,
    pub size_a: usize,
    pub size_b: usize,
    pub repetitions: usize,
    pub fpr: f64,
    pub axis: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub variant: LrtVariant,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                effect: 0.02,
                baseline_maf: (0.01, 0.05),
                ..DatasetSpec::default()
            },
            outsiders: 25,
            reference: 1000,
            replicates: 5,
            size_a: 25,
            size_b: 25,
            repetitions: 200,
            fpr: 0.05,
            axis: (1..=10).map(|i| i * 10).collect(),
            epsilons: vec![1.0, 2.0, 3.0, 5.0],
            variant: LrtVariant::Literal,
        }
    }
}

/// Named experiments a configuration can request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// True positive rate per statistic across ε.
    Epsilon,
    /// True negative rate against utility loss.
    Loss,
    /// Strong correct statistics and oversold weak ones.
    Strong,
    /// Mixed oversell, undersell and correct reporting.
    Mixed,
    /// Partial dataset built with a different ε than declared.
    Metadata,
    /// Laplace noise on the released statistics.
    Dp,
    /// True positive rate across the number of reported statistics.
    LSweep,
    /// Sampling-based partial datasets.
    Sampling,
    /// Scaled p-value thresholds.
    Cutoff,
    /// Public data of different association strength.
    PublicStrength,
    /// Membership-inference power curves.
    Attack,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        ExperimentKind::Epsilon,
        ExperimentKind::Loss,
        ExperimentKind::Strong,
        ExperimentKind::Mixed,
        ExperimentKind::Metadata,
        ExperimentKind::Dp,
        ExperimentKind::LSweep,
        ExperimentKind::Sampling,
        ExperimentKind::Cutoff,
        ExperimentKind::PublicStrength,
        ExperimentKind::Attack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Epsilon => "epsilon",
            ExperimentKind::Loss => "loss",
            ExperimentKind::Strong => "strong",
            ExperimentKind::Mixed => "mixed",
            ExperimentKind::Metadata => "metadata",
            ExperimentKind::Dp => "dp",
            ExperimentKind::LSweep => "l-sweep",
            ExperimentKind::Sampling => "sampling",
            ExperimentKind::Cutoff => "cutoff",
            ExperimentKind::PublicStrength => "public-strength",
            ExperimentKind::Attack => "attack",
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

/// Complete description of an experiment run, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    /// Number of research datasets; every metric is averaged over them.
    pub seeds: usize,
    /// Repetitions of the mechanism inside calibration and expected deviation.
    pub trials: usize,
    pub l: usize,
    pub experiments: Vec<ExperimentKind>,
    /// Research dataset, regenerated per seed.
    pub research: DatasetSpec,
    /// Public dataset used for expected deviations.
    pub public: DatasetSpec,
    pub calibration: CalibrationSpec,
    /// ε values of the TPR table.
    pub epsilons: Vec<f64>,
    pub loss: LossSpec,
    pub strong: StrongSpec,
    pub mixed: MixedSpec,
    pub metadata: MetadataErrorSpec,
    pub dp: DpSpec,
    pub l_sweep: LSweepSpec,
    pub sampling: SamplingSpec,
    pub cutoff: CutoffSweepSpec,
    pub public_strength: PublicStrengthSpec,
    pub attack: AttackSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            root_seed: 2024,
            seeds: 20,
            trials: 5,
            l: 100,
            experiments: ExperimentKind::ALL.to_vec(),
            research: DatasetSpec::default(),
            public: DatasetSpec::default(),
            calibration: CalibrationSpec::default(),
            epsilons: vec![1.0, 2.0, 3.0, 5.0],
            loss: LossSpec::default(),
            strong: StrongSpec::default(),
            mixed: MixedSpec::default(),
            metadata: MetadataErrorSpec::default(),
            dp: DpSpec::default(),
            l_sweep: LSweepSpec::default(),
            sampling: SamplingSpec::default(),
            cutoff: CutoffSweepSpec::default(),
            public_strength: PublicStrengthSpec::default(),
            attack: AttackSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.l == 0 {
            return Err(Error::Config("l must be at least 1".into()));
        }
        if self.calibration.splits < 2 {
            return Err(Error::Config("calibration needs at least 2 splits".into()));
        }
        let positive = self
            .epsilons
            .iter()
            .chain(&self.loss.epsilons)
            .chain(&self.metadata.actual)
            .chain(&self.dp.epsilon_dp)
            .chain(&self.attack.epsilons)
            .chain([
                &self.strong.epsilon,
                &self.mixed.epsilon,
                &self.metadata.declared,
                &self.dp.epsilon,
                &self.l_sweep.epsilon,
                &self.cutoff.epsilon,
                &self.public_strength.epsilon,
            ]);
        for &e in positive {
            if !(e > 0.0) {
                return Err(Error::NonPositiveEpsilon(e));
            }
        }
        Ok(())
    }
}

/// One aggregated metric of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub experiment: String,
    pub statistic: Option<StatKind>,
    pub epsilon: Option<f64>,
    pub l: usize,
    /// Name of the swept parameter, empty when the cell has none.
    pub parameter: String,
    pub value: Option<f64>,
    pub metric: String,
    /// Mean of the finite per-seed values.
    pub mean: f64,
    /// Sample standard deviation of the finite per-seed values.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricCell {
    fn new(key: &CellKey, statistic: Option<StatKind>, metric: &str, per_seed: Vec<f64>) -> Self {
        let finite: Vec<f64> = per_seed.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let std = if finite.len() > 1 {
            (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (finite.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            experiment: key.experiment.name().to_string(),
            statistic,
            epsilon: key.epsilon,
            l: key.l,
            parameter: key.parameter.to_string(),
            value: key.value,
            metric: metric.to_string(),
            mean,
            std,
            per_seed,
        }
    }
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub experiment: String,
    pub parameter: String,
    pub value: Option<f64>,
    pub epsilon: Option<f64>,
    pub status: String,
}

/// Everything a run produces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: Option<ExperimentConfig>,
    pub cells: Vec<MetricCell>,
    pub power: Vec<PowerResult>,
    pub cutoffs: Vec<CutoffSet>,
    pub status: Vec<CellStatus>,
}

impl ExperimentReport {
    /// The cell matching every given field.
    pub fn find(
        &self,
        experiment: ExperimentKind,
        statistic: Option<StatKind>,
        epsilon: Option<f64>,
        value: Option<f64>,
        metric: &str,
    ) -> Option<&MetricCell> {
        self.cells.iter().find(|c| {
            c.experiment == experiment.name()
                && c.statistic == statistic
                && c.epsilon == epsilon
                && c.value == value
                && c.metric == metric
        })
    }

    /// Mean of the matching cell, or NaN.
    pub fn mean(
        &self,
        experiment: ExperimentKind,
        statistic: Option<StatKind>,
        epsilon: Option<f64>,
        value: Option<f64>,
        metric: &str,
    ) -> f64 {
        self.find(experiment, statistic, epsilon, value, metric)
            .map_or(f64::NAN, |c| c.mean)
    }

    fn is_utility_cell(c: &MetricCell) -> bool {
        c.parameter == "loss"
    }

    /// `experiment,statistic,epsilon,l,parameter,value,metric,mean,std,seeds`
    /// for every cell outside the utility sweeps.
    pub fn write_tpr_tnr<W: Write>(&self, w: W) -> Result<()> {
        self.write_cells(w, |c| !Self::is_utility_cell(c))
    }

    /// The same columns for the utility-loss sweeps.
    pub fn write_utility_sweep<W: Write>(&self, w: W) -> Result<()> {
        self.write_cells(w, Self::is_utility_cell)
    }

    fn write_cells<W: Write>(&self, w: W, keep: impl Fn(&MetricCell) -> bool) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "experiment",
            "statistic",
            "epsilon",
            "l",
            "parameter",
            "value",
            "metric",
            "mean",
            "std",
            "seeds",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in self.cells.iter().filter(|c| keep(c)) {
            wtr.write_record([
                c.experiment.clone(),
                c.statistic.map(|s| s.name().to_string()).unwrap_or_default(),
                opt(c.epsilon),
                c.l.to_string(),
                c.parameter.clone(),
                opt(c.value),
                c.metric.clone(),
                c.mean.to_string(),
                c.std.to_string(),
                c.per_seed.len().to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    /// Writes `tpr_tnr.csv`, `utility_sweep.csv`, `power_curves.csv` and
    /// `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path).map_err(|e| Error::io(&path, e))
        };
        self.write_tpr_tnr(create("tpr_tnr.csv")?)?;
        self.write_utility_sweep(create("utility_sweep.csv")?)?;
        write_power_csv(create("power_curves.csv")?, &self.power)?;
        let summary = Summary {
            report: self,
            checks: trend_checks(self),
        };
        let mut f = create("summary.json")?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f).map_err(|e| Error::io(dir.join("summary.json"), e))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    report: &'a ExperimentReport,
    checks: Vec<TrendCheck>,
}

#[derive(Clone, Debug)]
struct CellKey {
    experiment: ExperimentKind,
    epsilon: Option<f64>,
    l: usize,
    parameter: &'static str,
    value: Option<f64>,
}

impl CellKey {
    fn new(experiment: ExperimentKind, epsilon: Option<f64>, l: usize) -> Self {
        Self {
            experiment,
            epsilon,
            l,
            parameter: "",
            value: None,
        }
    }

    fn with(mut self, parameter: &'static str, value: f64) -> Self {
        self.parameter = parameter;
        self.value = Some(value);
        self
    }

    fn status(&self, status: String) -> CellStatus {
        CellStatus {
            experiment: self.experiment.name().to_string(),
            parameter: self.parameter.to_string(),
            value: self.value,
            epsilon: self.epsilon,
            status,
        }
    }
}

/// Seed-path component for an optional real parameter.
fn bits(v: Option<f64>) -> u64 {
    v.map_or(u64::MAX, f64::to_bits)
}

const DATA_RESEARCH: u64 = 0x100;
const DATA_PUBLIC: u64 = 0x101;
const DATA_CALIBRATION: u64 = 0x102;
const DATA_ATTACK: u64 = 0x103;
const STAGE_CUTOFF: u64 = 0x200;
const STAGE_EXPECTED: u64 = 0x201;

/// Which partial-dataset mechanism a set of cut-offs is fitted for.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Release {
    Rr(f64),
    Sampling(usize),
}

impl Release {
    fn epsilon(self) -> Option<f64> {
        match self {
            Release::Rr(e) => Some(e),
            Release::Sampling(_) => None,
        }
    }

    fn mechanism(self) -> Mechanism {
        match self {
            Release::Rr(epsilon) => Mechanism::Rr { epsilon },
            Release::Sampling(b) => Mechanism::Sampling { b },
        }
    }

    fn mode(self) -> PartialMode {
        match self {
            Release::Rr(epsilon) => PartialMode::Rr { epsilon },
            Release::Sampling(b) => PartialMode::Sampling { b },
        }
    }

    fn path(self) -> [u64; 2] {
        match self {
            Release::Rr(e) => [0, e.to_bits()],
            Release::Sampling(b) => [1, b as u64],
        }
    }
}

/// Public and calibration data plus the cut-offs fitted on them, shared by
/// every cell that uses the same release and l.
struct Reference {
    cutoffs: CutoffSet,
    expected: ExpectedDeviation,
}

/// Release path, experiment id and number of released statistics.
type ReferenceKey = (u64, u64, u64, usize);

struct Context<'a> {
    config: &'a ExperimentConfig,
    research: Vec<CaseControlDataset>,
    truths: Vec<GroundTruth>,
    public: CaseControlDataset,
    splits: Vec<CaseControlDataset>,
    references: Mutex<HashMap<ReferenceKey, std::sync::Arc<Reference>>>,
    recorded: Mutex<BTreeMap<(ReferenceKey, u64), CutoffSet>>,
}

impl<'a> Context<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let root = config.root_seed;
        let research: Vec<CaseControlDataset> = (0..config.seeds)
            .into_par_iter()
            .map(|s| {
                config
                    .research
                    .generate(derive(root, &[tag::EXPERIMENT, DATA_RESEARCH, s as u64]))
            })
            .collect::<Result<_>>()?;
        let truths = research.par_iter().map(GroundTruth::from_dataset).collect();
        let public = config.public.generate(derive(root, &[tag::EXPERIMENT, DATA_PUBLIC]))?;
        let splits = Self::splits_for(config, &config.calibration.dataset)?;
        Ok(Self {
            config,
            research,
            truths,
            public,
            splits,
            references: Mutex::new(HashMap::new()),
            recorded: Mutex::new(BTreeMap::new()),
        })
    }

    fn splits_for(config: &ExperimentConfig, spec: &DatasetSpec) -> Result<Vec<CaseControlDataset>> {
        let root = config.root_seed;
        let full = spec.generate(derive(root, &[tag::EXPERIMENT, DATA_CALIBRATION]))?;
        partition_dataset(
            &full,
            config.calibration.splits,
            Axis::Snps,
            derive(root, &[tag::EXPERIMENT, DATA_CALIBRATION, 1]),
        )
    }

    fn calibration_options(&self, release: Release, l: usize, dp: Option<DpRelease>) -> CalibrationOptions {
        let c = &self.config.calibration;
        let [kind, value] = release.path();
        CalibrationOptions {
            trials: self.config.trials,
            seed: derive(
                self.config.root_seed,
                &[tag::EXPERIMENT, STAGE_CUTOFF, kind, value, l as u64],
            ),
            pairing: c.pairing,
            grid_size: c.grid_size,
            rule: c.rule,
            anchor: c.anchor,
            sampling_b: match release {
                Release::Sampling(b) => b,
                Release::Rr(_) => self.config.sampling.b,
            },
            release_noise: dp,
        }
    }

    fn scenarios(&self) -> Vec<ErrorScenario> {
        self.config
            .calibration
            .offsets
            .iter()
            .map(|&offset| ErrorScenario::Oversell { offset })
            .collect()
    }

    /// Cut-offs and expected deviations for the default public data.
    fn reference(&self, release: Release, l: usize) -> Result<std::sync::Arc<Reference>> {
        let [kind, value] = release.path();
        let key = (kind, value, 0, l);
        if let Some(r) = self.references.lock().expect("reference cache").get(&key) {
            return Ok(r.clone());
        }
        let r = std::sync::Arc::new(self.fit(release, l, &self.public, &self.splits)?);
        self.recorded
            .lock()
            .expect("cutoff record")
            .insert((key, 0), r.cutoffs.clone());
        self.references.lock().expect("reference cache").insert(key, r.clone());
        Ok(r)
    }

    fn fit(
        &self,
        release: Release,
        l: usize,
        public: &CaseControlDataset,
        splits: &[CaseControlDataset],
    ) -> Result<Reference> {
        let opts = self.calibration_options(release, l, None);
        let cutoffs = calibrate_cutoffs(splits, public, l, release.epsilon(), &self.scenarios(), &opts)?;
        let [kind, value] = release.path();
        let seed = derive(
            self.config.root_seed,
            &[tag::EXPERIMENT, STAGE_EXPECTED, kind, value, l as u64],
        );
        let expected = expected_deviation(public, l, release.mechanism(), seed, self.config.trials)?;
        Ok(Reference { cutoffs, expected })
    }

    fn seed(&self, key: &CellKey, s: usize, extra: u64) -> u64 {
        derive(
            self.config.root_seed,
            &[
                tag::EXPERIMENT,
                key.experiment.id(),
                bits(key.epsilon),
                key.l as u64,
                bits(key.value),
                s as u64,
                extra,
            ],
        )
    }

    /// Bundle reporting ranks `start..start + l` at their true values.
    fn bundle(&self, s: usize, release: Release, l: usize, start: usize, seed: u64) -> Result<MetadataBundle> {
        let mut mo = MetadataOptions::new(l, l, 1.0, seed);
        mo.mode = release.mode();
        mo.start = start;
        build_metadata_with(&self.research[s], &self.truths[s], &mo)
    }

    /// Window at `start` reporting the statistics `offset` ranks stronger.
    fn oversold(
        &self,
        s: usize,
        release: Release,
        l: usize,
        start: usize,
        offset: usize,
        seed: u64,
    ) -> Result<InjectedBundle> {
        let b = self.bundle(s, release, l, start, seed)?;
        inject_errors(
            &b,
            &self.research[s],
            &self.truths[s],
            &ErrorScenario::Oversell { offset },
            seed,
        )
    }

    fn first_rank_at_or_above(&self, s: usize, p: f64) -> Result<usize> {
        self.truths[s]
            .ranking
            .iter()
            .position(|st| st.p_value >= p)
            .ok_or_else(|| Error::Config(format!("no SNP with p >= {p} in research dataset {s}")))
    }

    /// Start and offset of the oversold window whose p-value loss first
    /// reaches `target`, borrowing statistics from the first rank at or above
    /// `anchor_p`.
    fn loss_window(&self, s: usize, l: usize, anchor_p: f64, target: f64) -> Result<(usize, usize)> {
        let anchor = self.first_rank_at_or_above(s, anchor_p)?;
        self.truths[s]
            .oversell_window(anchor, l, target)
            .ok_or_else(|| Error::Config(format!("utility loss {target} is unreachable in research dataset {s}")))
    }
}

fn rate(report: &VerificationReport, kind: StatKind, verdict: Verdict) -> f64 {
    let rows: Vec<_> = report.rows_for(kind).collect();
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().filter(|r| r.verdict == verdict).count() as f64 / rows.len() as f64
}

fn verify(bundle: &MetadataBundle, reference: &Reference) -> Result<VerificationReport> {
    verify_with_expected(bundle, &reference.expected, &reference.cutoffs)
}

/// Per-seed values of several metrics, collected in seed order.
type SeedRows = Vec<Vec<f64>>;

fn transpose(rows: SeedRows, width: usize) -> Vec<Vec<f64>> {
    (0..width).map(|i| rows.iter().map(|r| r[i]).collect()).collect()
}

/// Runs `per_seed` for every research dataset in parallel and returns one
/// vector per metric.
fn over_seeds(
    ctx: &Context,
    width: usize,
    per_seed: impl Fn(usize) -> Result<Vec<f64>> + Sync,
) -> Result<Vec<Vec<f64>>> {
    let rows: SeedRows = (0..ctx.research.len())
        .into_par_iter()
        .map(&per_seed)
        .collect::<Result<_>>()?;
    Ok(transpose(rows, width))
}

fn push_stats(out: &mut Vec<MetricCell>, key: &CellKey, metric: &str, columns: Vec<Vec<f64>>) {
    for (kind, col) in StatKind::ALL.into_iter().zip(columns) {
        out.push(MetricCell::new(key, Some(kind), metric, col));
    }
}

fn tpr_correct(ctx: &Context, key: &CellKey, release: Release, reference: &Reference) -> Result<Vec<Vec<f64>>> {
    over_seeds(ctx, 3, |s| {
        let b = ctx.bundle(s, release, key.l, 0, ctx.seed(key, s, 0))?;
        let rep = verify(&b, reference)?;
        Ok(StatKind::ALL.iter().map(|&k| rate(&rep, k, Verdict::Correct)).collect())
    })
}

/// TNR and realized utility loss per statistic for one loss target.
fn loss_cell(
    ctx: &Context,
    key: &CellKey,
    release: Release,
    reference: &Reference,
    transform: impl Fn(usize, InjectedBundle) -> Result<InjectedBundle> + Sync,
) -> Result<Vec<Vec<f64>>> {
    let target = key.value.expect("loss cell carries its target");
    over_seeds(ctx, 6, |s| {
        let (start, offset) = ctx.loss_window(s, key.l, ctx.config.loss.anchor_p, target)?;
        let inj = ctx.oversold(s, release, key.l, start, offset, ctx.seed(key, s, 0))?;
        let inj = transform(s, inj)?;
        let rep = verify(&inj.bundle, reference)?;
        let mut row: Vec<f64> = StatKind::ALL
            .iter()
            .map(|&k| rate(&rep, k, Verdict::Incorrect))
            .collect();
        row.extend(StatKind::ALL.iter().map(|&k| inj.utility.get(k)));
        Ok(row)
    })
}

fn push_loss(out: &mut Vec<MetricCell>, key: &CellKey, mut columns: Vec<Vec<f64>>) {
    let losses = columns.split_off(3);
    push_stats(out, key, "tnr", columns);
    push_stats(out, key, "utility_loss", losses);
}

/// Strong-statistic acceptance and weak-oversell detection rates for p.
fn strong_cell(
    ctx: &Context,
    key: &CellKey,
    release: Release,
    reference: &Reference,
    noise: Option<DpRelease>,
) -> Result<Vec<Vec<f64>>> {
    let spec = &ctx.config.strong;
    over_seeds(ctx, 2, |s| {
        let add_noise = |b: &mut MetadataBundle, extra: u64| -> Result<()> {
            if let Some(dp) = &noise {
                let seed = derive(ctx.seed(key, s, extra), &[tag::LAPLACE]);
                b.reported = dp.apply(&b.reported, ctx.research[s].n_case(), seed)?;
            }
            Ok(())
        };
        let truth = &ctx.truths[s];
        let mut b = ctx.bundle(s, release, key.l, 0, ctx.seed(key, s, 0))?;
        let strong: Vec<bool> = b.reported.iter().map(|st| st.p_value < spec.strong_p).collect();
        let ids: Vec<String> = b.reported.iter().map(|st| st.snp_id.clone()).collect();
        add_noise(&mut b, 0)?;
        let rep = verify(&b, reference)?;
        let (mut hit, mut total) = (0usize, 0usize);
        for row in rep.rows_for(StatKind::P) {
            let j = ids.iter().position(|id| *id == row.snp_id).expect("reported id");
            if strong[j] {
                total += 1;
                hit += usize::from(row.verdict == Verdict::Correct);
            }
        }
        let start = ctx.first_rank_at_or_above(s, spec.weak_p)?;
        if start + key.l > truth.ranking.len() {
            return Err(Error::Config(format!("weak window at rank {start} leaves the ranking")));
        }
        let mut inj = ctx.oversold(s, release, key.l, start, start, ctx.seed(key, s, 1))?;
        add_noise(&mut inj.bundle, 1)?;
        let weak = rate(&verify(&inj.bundle, reference)?, StatKind::P, Verdict::Incorrect);
        let accept = if total == 0 {
            f64::NAN
        } else {
            hit as f64 / total as f64
        };
        Ok(vec![accept, weak])
    })
}

/// Accuracy of three-way and two-way classification of p plus the mean
/// p-value distance of the incorrect statistics.
fn mixed_cell(ctx: &Context, key: &CellKey, release: Release, reference: &Reference) -> Result<Vec<Vec<f64>>> {
    let spec = &ctx.config.mixed;
    let offset = key.value.expect("mixed cell carries its offset") as usize;
    over_seeds(ctx, 3, |s| {
        let start = ctx.first_rank_at_or_above(s, spec.anchor_p)? + offset;
        let seed = ctx.seed(key, s, 0);
        let b = ctx.bundle(s, release, key.l, start, seed)?;
        let scenario = ErrorScenario::Mixed {
            offset,
            fractions: spec.fractions,
        };
        let inj = inject_errors(&b, &ctx.research[s], &ctx.truths[s], &scenario, seed)?;
        let rep = verify(&inj.bundle, reference)?;
        let index: HashMap<&str, usize> = inj
            .bundle
            .reported
            .iter()
            .enumerate()
            .map(|(j, st)| (st.snp_id.as_str(), j))
            .collect();
        let (mut three, mut two, mut n) = (0usize, 0usize, 0usize);
        for row in rep.rows_for(StatKind::P) {
            let truth = inj.labels[index[row.snp_id.as_str()]];
            n += 1;
            let flagged = row.verdict == Verdict::Incorrect;
            two += usize::from(flagged == (truth != Truth::Correct));
            three += usize::from(match truth {
                Truth::Correct => !flagged,
                Truth::Oversell => flagged && row.direction == Direction::Oversell,
                Truth::Undersell => flagged && row.direction == Direction::Undersell,
            });
        }
        let distances: Vec<f64> = inj
            .labels
            .iter()
            .zip(inj.bundle.reported.iter().zip(&inj.correct))
            .filter(|(t, _)| **t != Truth::Correct)
            .map(|(_, (r, c))| (r.p_value - c.p_value).abs())
            .collect();
        let distance = if distances.is_empty() {
            f64::NAN
        } else {
            distances.iter().sum::<f64>() / distances.len() as f64
        };
        let n = n as f64;
        Ok(vec![three as f64 / n, two as f64 / n, distance])
    })
}

fn record(report: &mut ExperimentReport, key: &CellKey, result: Result<()>) {
    let status = match result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("{}: {e}", e.code()),
    };
    report.status.push(key.status(status));
}

/// Runs every experiment listed in `config.experiments`.
///
/// A failing cell is recorded in the report's status list and the remaining
/// cells still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport {
        config: Some(config.clone()),
        ..Default::default()
    };
    let mut kinds = config.experiments.clone();
    kinds.sort();
    kinds.dedup();
    let needs_verifier = kinds.iter().any(|k| *k != ExperimentKind::Attack);
    let ctx = if needs_verifier {
        Some(Context::new(config)?)
    } else {
        None
    };
    for kind in kinds {
        match (kind, &ctx) {
            (ExperimentKind::Attack, _) => run_attack(config, &mut report),
            (_, Some(ctx)) => run_verification(ctx, kind, &mut report),
            (_, None) => unreachable!("verification context exists for verification experiments"),
        }
    }
    if let Some(ctx) = ctx {
        report.cutoffs = ctx
            .recorded
            .into_inner()
            .expect("cutoff record")
            .into_values()
            .collect();
    }
    Ok(report)
}

fn run_verification(ctx: &Context, kind: ExperimentKind, report: &mut ExperimentReport) {
    let config = ctx.config;
    let l = config.l;
    let mut cells = Vec::new();
    match kind {
        ExperimentKind::Epsilon => {
            for &eps in &config.epsilons {
                let key = CellKey::new(kind, Some(eps), l);
                let r = (|| {
                    let reference = ctx.reference(Release::Rr(eps), l)?;
                    push_stats(
                        &mut cells,
                        &key,
                        "tpr",
                        tpr_correct(ctx, &key, Release::Rr(eps), &reference)?,
                    );
                    Ok(())
                })();
                record(report, &key, r);
            }
        }
        ExperimentKind::Loss => {
            for &eps in &config.loss.epsilons {
                for &loss in &config.loss.losses {
                    let key = CellKey::new(kind, Some(eps), l).with("loss", loss);
                    let r = (|| {
                        let reference = ctx.reference(Release::Rr(eps), l)?;
                        push_loss(
                            &mut cells,
                            &key,
                            loss_cell(ctx, &key, Release::Rr(eps), &reference, |_, b| Ok(b))?,
                        );
                        Ok(())
                    })();
                    record(report, &key, r);
                }
            }
        }
        ExperimentKind::Strong => {
            let eps = config.strong.epsilon;
            let key = CellKey::new(kind, Some(eps), l);
            let r = (|| {
                let reference = ctx.reference(Release::Rr(eps), l)?;
                let cols = strong_cell(ctx, &key, Release::Rr(eps), &reference, None)?;
                for (metric, col) in ["strong_tpr", "weak_tnr"].into_iter().zip(cols) {
                    cells.push(MetricCell::new(&key, Some(StatKind::P), metric, col));
                }
                Ok(())
            })();
            record(report, &key, r);
        }
        ExperimentKind::Mixed => {
            let eps = config.mixed.epsilon;
            for &offset in &config.mixed.offsets {
                let key = CellKey::new(kind, Some(eps), l).with("offset", offset as f64);
                let r = (|| {
                    let reference = ctx.reference(Release::Rr(eps), l)?;
                    let cols = mixed_cell(ctx, &key, Release::Rr(eps), &reference)?;
                    for (metric, col) in ["accuracy_3way", "accuracy_2way", "p_distance"].into_iter().zip(cols) {
                        cells.push(MetricCell::new(&key, Some(StatKind::P), metric, col));
                    }
                    Ok(())
                })();
                record(report, &key, r);
            }
        }
        ExperimentKind::Metadata => run_metadata(ctx, &mut cells, report),
        ExperimentKind::Dp => run_dp(ctx, &mut cells, report),
        ExperimentKind::LSweep => {
            let eps = config.l_sweep.epsilon;
            for &lv in &config.l_sweep.values {
                let key = CellKey::new(kind, Some(eps), lv).with("l", lv as f64);
                let r = (|| {
                    let reference = ctx.reference(Release::Rr(eps), lv)?;
                    push_stats(
                        &mut cells,
                        &key,
                        "tpr",
                        tpr_correct(ctx, &key, Release::Rr(eps), &reference)?,
                    );
                    Ok(())
                })();
                record(report, &key, r);
            }
        }
        ExperimentKind::Sampling => {
            let release = Release::Sampling(config.sampling.b);
            let key = CellKey::new(kind, None, l).with("b", config.sampling.b as f64);
            let r = (|| {
                let reference = ctx.reference(release, l)?;
                push_stats(&mut cells, &key, "tpr", tpr_correct(ctx, &key, release, &reference)?);
                Ok(())
            })();
            record(report, &key, r);
            for &loss in &config.loss.losses {
                let key = CellKey::new(kind, None, l).with("loss", loss);
                let r = (|| {
                    let reference = ctx.reference(release, l)?;
                    push_loss(
                        &mut cells,
                        &key,
                        loss_cell(ctx, &key, release, &reference, |_, b| Ok(b))?,
                    );
                    Ok(())
                })();
                record(report, &key, r);
            }
        }
        ExperimentKind::Cutoff => {
            let eps = config.cutoff.epsilon;
            for &mult in &config.cutoff.multipliers {
                for &loss in &config.loss.losses {
                    let key = CellKey::new(kind, Some(eps), l).with("loss", loss);
                    let key = CellKey {
                        parameter: "loss",
                        ..key
                    };
                    let r = (|| {
                        let base = ctx.reference(Release::Rr(eps), l)?;
                        let mut cutoffs = base.cutoffs.clone();
                        cutoffs.set_tau(StatKind::P, base.cutoffs.tau_p * mult);
                        let scaled = Reference {
                            cutoffs,
                            expected: base.expected.clone(),
                        };
                        let mut cols = loss_cell(ctx, &key, Release::Rr(eps), &scaled, |_, b| Ok(b))?;
                        cols.truncate(1);
                        let mut cell = MetricCell::new(&key, Some(StatKind::P), "tnr", cols.remove(0));
                        cell.metric = format!("tnr_tau_x{mult}");
                        cells.push(cell);
                        Ok(())
                    })();
                    record(report, &key, r);
                }
            }
        }
        ExperimentKind::PublicStrength => run_public_strength(ctx, &mut cells, report),
        ExperimentKind::Attack => unreachable!("attack curves are handled separately"),
    }
    report.cells.extend(cells);
}

fn run_metadata(ctx: &Context, cells: &mut Vec<MetricCell>, report: &mut ExperimentReport) {
    let config = ctx.config;
    let spec = &config.metadata;
    let l = config.l;
    let kind = ExperimentKind::Metadata;
    for &actual in &spec.actual {
        let key = CellKey::new(kind, Some(spec.declared), l).with("epsilon_actual", actual);
        let r = (|| {
            let reference = ctx.reference(Release::Rr(spec.declared), l)?;
            let cols = over_seeds(ctx, 3, |s| {
                let seed = ctx.seed(&key, s, 0);
                let b = ctx.bundle(s, Release::Rr(spec.declared), l, 0, seed)?;
                let scenario = ErrorScenario::MetadataEpsilon { epsilon_actual: actual };
                let inj = inject_errors(&b, &ctx.research[s], &ctx.truths[s], &scenario, seed)?;
                let rep = verify(&inj.bundle, &reference)?;
                Ok(StatKind::ALL.iter().map(|&k| rate(&rep, k, Verdict::Correct)).collect())
            })?;
            push_stats(cells, &key, "tpr", cols);
            Ok(())
        })();
        record(report, &key, r);
        for &loss in &config.loss.losses {
            let key = CellKey {
                parameter: "loss",
                value: Some(loss),
                ..CellKey::new(kind, Some(spec.declared), l)
            };
            let r = (|| {
                let reference = ctx.reference(Release::Rr(spec.declared), l)?;
                let cols = loss_cell(ctx, &key, Release::Rr(spec.declared), &reference, |s, mut inj| {
                    let seed = derive(ctx.seed(&key, s, 1), &[actual.to_bits()]);
                    let ids = inj.bundle.partial.snp_ids().to_vec();
                    inj.bundle.partial = build_partial_noisy_dataset(&ctx.research[s], &ids, actual, seed)?;
                    Ok(inj)
                })?;
                let before = cells.len();
                push_loss(cells, &key, cols);
                for c in &mut cells[before..] {
                    c.metric = format!("{}_actual_{actual}", c.metric);
                }
                Ok(())
            })();
            record(report, &key, r);
        }
    }
}

fn run_dp(ctx: &Context, cells: &mut Vec<MetricCell>, report: &mut ExperimentReport) {
    let config = ctx.config;
    let spec = &config.dp;
    let l = config.l;
    let kind = ExperimentKind::Dp;
    let release = Release::Rr(spec.epsilon);
    let mut levels: Vec<Option<f64>> = vec![None];
    levels.extend(spec.epsilon_dp.iter().map(|&e| Some(e)));
    for edp in levels {
        let key = match edp {
            Some(e) => CellKey::new(kind, Some(spec.epsilon), l).with("epsilon_dp", e),
            None => CellKey::new(kind, Some(spec.epsilon), l),
        };
        let noise = edp.map(|e| DpRelease {
            epsilon_dp: e,
            p_value_sensitivity: spec.p_value_sensitivity,
            odds_ratio_sensitivity: spec.odds_ratio_sensitivity,
        });
        let r = (|| {
            let reference = ctx.reference(release, l)?;
            let cols = strong_cell(ctx, &key, release, &reference, noise)?;
            for (metric, col) in ["strong_tpr", "weak_tnr"].into_iter().zip(cols) {
                cells.push(MetricCell::new(&key, Some(StatKind::P), metric, col));
            }
            let cols = over_seeds(ctx, 3, |s| {
                let mut b = ctx.bundle(s, release, l, 0, ctx.seed(&key, s, 2))?;
                if let Some(dp) = &noise {
                    let seed = derive(ctx.seed(&key, s, 3), &[tag::LAPLACE]);
                    b.reported = dp.apply(&b.reported, ctx.research[s].n_case(), seed)?;
                }
                let rep = verify(&b, &reference)?;
                Ok(StatKind::ALL.iter().map(|&k| rate(&rep, k, Verdict::Correct)).collect())
            })?;
            push_stats(cells, &key, "tpr", cols);
            Ok(())
        })();
        record(report, &key, r);
    }
}

fn run_public_strength(ctx: &Context, cells: &mut Vec<MetricCell>, report: &mut ExperimentReport) {
    let config = ctx.config;
    let spec = &config.public_strength;
    let l = config.l;
    let kind = ExperimentKind::PublicStrength;
    let release = Release::Rr(spec.epsilon);
    for &effect in &spec.effects {
        let key = CellKey::new(kind, Some(spec.epsilon), l).with("effect", effect);
        let r = (|| {
            let public_spec = DatasetSpec {
                effect,
                ..config.public.clone()
            };
            let cal_spec = DatasetSpec {
                effect,
                ..config.calibration.dataset.clone()
            };
            let public = public_spec.generate(derive(config.root_seed, &[tag::EXPERIMENT, DATA_PUBLIC]))?;
            let splits = Context::splits_for(config, &cal_spec)?;
            let reference = ctx.fit(release, l, &public, &splits)?;
            let [k, v] = release.path();
            ctx.recorded
                .lock()
                .expect("cutoff record")
                .insert(((k, v, kind.id(), l), effect.to_bits()), reference.cutoffs.clone());
            let tpr = tpr_correct(ctx, &key, release, &reference)?;
            cells.push(MetricCell::new(&key, Some(StatKind::P), "tpr", tpr[0].clone()));
            let loss = *config.loss.losses.last().unwrap_or(&0.4);
            let loss_key = CellKey {
                value: Some(loss),
                parameter: "loss",
                ..key.clone()
            };
            let cols = loss_cell(ctx, &loss_key, release, &reference, |_, b| Ok(b))?;
            let mut cell = MetricCell::new(&key, Some(StatKind::P), "tnr_at_max_loss", cols[0].clone());
            cell.parameter = "effect".into();
            cells.push(cell);
            let top = GroundTruth::from_dataset(&public);
            let mean_p = top.ranking[..l.min(top.ranking.len())]
                .iter()
                .map(|s| s.p_value)
                .sum::<f64>()
                / l as f64;
            cells.push(MetricCell::new(&key, None, "public_mean_top_p", vec![mean_p]));
            Ok(())
        })();
        record(report, &key, r);
    }
}

/// Research data, outsiders and reference panel for the attack curves.
pub struct AttackSetup {
    pub dataset: CaseControlDataset,
    pub outsiders: Cohort,
    pub reference: Cohort,
}

/// Synthesizes the attacked study together with outsider and reference
/// controls from the same population.
pub fn attack_setup(spec: &AttackSpec, seed: u64) -> Result<AttackSetup> {
    let base = &spec.dataset;
    let full = DatasetSpec {
        n_control: base.n_control + spec.outsiders + spec.reference,
        ..base.clone()
    }
    .generate(seed)?;
    let (rest, outsiders) = hold_out(&full, Label::Control, spec.outsiders, derive(seed, &[1]))?;
    let (dataset, reference) = hold_out(&rest, Label::Control, spec.reference, derive(seed, &[2]))?;
    Ok(AttackSetup {
        dataset,
        outsiders,
        reference,
    })
}

fn attack_replicate(spec: &AttackSpec, seed: u64) -> Result<Vec<PowerResult>> {
    let setup = attack_setup(spec, seed)?;
    let ranking = rank_all(&setup.dataset, true);
    let pops = setup.reference.allele_frequencies();
    let opts = AuditOptions {
        fpr: spec.fpr,
        size_a: spec.size_a,
        size_b: spec.size_b,
        repetitions: spec.repetitions,
        variant: spec.variant,
        seed: derive(seed, &[tag::AUDIT]),
    };
    let args = (&setup.dataset, &setup.outsiders, &ranking[..], &pops);
    let mut curves = power_curve(args.0, args.1, args.2, args.3, Attack::Lrt, &spec.axis, &[], &opts)?;
    curves.extend(power_curve(
        args.0,
        args.1,
        args.2,
        args.3,
        Attack::EditDistance,
        &spec.axis,
        &spec.epsilons,
        &opts,
    )?);
    Ok(curves)
}

/// Averages aligned power curves from independent datasets. The standard
/// error is the larger of the spread of replicate means and the combined
/// within-replicate error.
pub fn pool_power_curves(replicates: &[Vec<PowerResult>]) -> Result<Vec<PowerResult>> {
    let Some(first) = replicates.first() else {
        return Err(Error::Config("attack replicates must be at least 1".into()));
    };
    let r = replicates.len() as f64;
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, head)| {
            let cells: Vec<&PowerResult> = replicates.iter().map(|c| &c[i]).collect();
            let power = cells.iter().map(|c| c.power).sum::<f64>() / r;
            let within = cells.iter().map(|c| c.power_se.powi(2)).sum::<f64>().sqrt() / r;
            let between = if cells.len() > 1 {
                (cells.iter().map(|c| (c.power - power).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
            } else {
                0.0
            };
            PowerResult {
                gamma: cells.iter().map(|c| c.gamma).sum::<f64>() / r,
                power,
                power_se: within.max(between),
                repetitions: cells.iter().map(|c| c.repetitions).sum(),
                ..*head
            }
        })
        .collect())
}

fn run_attack(config: &ExperimentConfig, report: &mut ExperimentReport) {
    let spec = &config.attack;
    let key = CellKey::new(ExperimentKind::Attack, None, *spec.axis.last().unwrap_or(&0));
    let r = (|| {
        let seed = derive(config.root_seed, &[tag::EXPERIMENT, DATA_ATTACK]);
        let replicates = (0..spec.replicates as u64)
            .into_par_iter()
            .map(|i| attack_replicate(spec, derive(seed, &[i])))
            .collect::<Result<Vec<_>>>()?;
        report.power.extend(pool_power_curves(&replicates)?);
        Ok(())
    })();
    record(report, &key, r);
}

/// Outcome of one named trend assertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> TrendCheck {
    TrendCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn fmt(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
}

/// Monte-Carlo slack allowed by the attack-curve monotonicity checks, in
/// standard errors of the difference.
pub const POWER_SIGMAS: f64 = 3.0;

/// Named trend assertions over whatever the report contains. Checks whose
/// inputs are missing are skipped.
pub fn trend_checks(report: &ExperimentReport) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    let Some(config) = &report.config else {
        return out;
    };
    let p = Some(StatKind::P);
    let has = |k: ExperimentKind| config.experiments.contains(&k);

    if has(ExperimentKind::Epsilon) {
        let tpr: Vec<f64> = config
            .epsilons
            .iter()
            .map(|&e| report.mean(ExperimentKind::Epsilon, p, Some(e), None, "tpr"))
            .collect();
        let monotone = tpr.windows(2).all(|w| w[1] >= w[0]);
        let gain = tpr.last().copied().unwrap_or(f64::NAN) - tpr.first().copied().unwrap_or(f64::NAN);
        out.push(check(
            "tpr-epsilon-trend",
            monotone && gain >= 0.2,
            format!(
                "p-value TPR over epsilon {:?}: [{}], gain {gain:.3}",
                config.epsilons,
                fmt(&tpr)
            ),
        ));
    }
    if has(ExperimentKind::Loss) && config.loss.epsilons.contains(&3.0) {
        let losses = &config.loss.losses;
        let tnr: Vec<f64> = losses
            .iter()
            .map(|&x| report.mean(ExperimentKind::Loss, p, Some(3.0), Some(x), "tnr"))
            .collect();
        let monotone = tnr.windows(2).all(|w| w[1] >= w[0]);
        let high = losses
            .iter()
            .zip(&tnr)
            .filter(|(x, _)| **x >= 0.4)
            .all(|(_, t)| *t >= 0.85);
        let low = losses
            .iter()
            .zip(&tnr)
            .filter(|(x, _)| **x <= 0.1)
            .all(|(_, t)| *t <= 0.5);
        out.push(check(
            "tnr-loss-trend",
            monotone && high && low && !tnr.is_empty(),
            format!("p-value TNR at epsilon 3 over loss {losses:?}: [{}]", fmt(&tnr)),
        ));
    }
    if has(ExperimentKind::Strong) {
        let e = Some(config.strong.epsilon);
        let accept = report.mean(ExperimentKind::Strong, p, e, None, "strong_tpr");
        let flag = report.mean(ExperimentKind::Strong, p, e, None, "weak_tnr");
        out.push(check(
            "strong-association-detection",
            accept >= 0.9 && flag >= 0.9,
            format!("strong correct accepted {accept:.3}, oversold weak flagged {flag:.3}"),
        ));
    }
    if has(ExperimentKind::Mixed) {
        let e = Some(config.mixed.epsilon);
        let mut ok = true;
        let mut any = false;
        let mut parts = Vec::new();
        for &o in &config.mixed.offsets {
            let v = Some(o as f64);
            let d = report.mean(ExperimentKind::Mixed, p, e, v, "p_distance");
            let a3 = report.mean(ExperimentKind::Mixed, p, e, v, "accuracy_3way");
            let a2 = report.mean(ExperimentKind::Mixed, p, e, v, "accuracy_2way");
            parts.push(format!("offset {o}: distance {d:.3}, 3-way {a3:.3}, 2-way {a2:.3}"));
            ok &= a2 >= a3;
            if d >= 0.03 {
                any = true;
                ok &= a3 >= 0.6 && a2 > a3;
            }
        }
        out.push(check("mixed-scenario-accuracy", ok && any, parts.join("; ")));
    }
    if has(ExperimentKind::Metadata) {
        let m = &config.metadata;
        let tpr = |a: f64| report.mean(ExperimentKind::Metadata, p, Some(m.declared), Some(a), "tpr");
        let (low, same, high) = (tpr(1.0), tpr(m.declared), tpr(5.0));
        out.push(check(
            "metadata-epsilon-error",
            same - low >= 0.15 && high >= same,
            format!(
                "TPR with actual epsilon 1 / {} / 5: {low:.3} / {same:.3} / {high:.3}",
                m.declared
            ),
        ));
    }
    if has(ExperimentKind::Dp) {
        let d = &config.dp;
        let e = Some(d.epsilon);
        let get = |v: Option<f64>, metric: &str| report.mean(ExperimentKind::Dp, p, e, v, metric);
        let (t1, t3, t0) = (
            get(Some(1.0), "strong_tpr"),
            get(Some(3.0), "strong_tpr"),
            get(None, "strong_tpr"),
        );
        let (n1, n3, n0) = (
            get(Some(1.0), "weak_tnr"),
            get(Some(3.0), "weak_tnr"),
            get(None, "weak_tnr"),
        );
        out.push(check(
            "dp-statistics",
            t1 < t3 && t3 < t0 && n1 < n3 && n3 < n0,
            format!(
                "TPR epsilon_dp 1 / 3 / none: {t1:.3} / {t3:.3} / {t0:.3}; TNR: {n1:.3} / {n3:.3} / {n0:.3} \
                 (p sensitivity {})",
                d.p_value_sensitivity
            ),
        ));
    }
    if has(ExperimentKind::Attack) && !report.power.is_empty() {
        out.push(attack_check(&report.power));
    }
    out
}

fn attack_check(power: &[PowerResult]) -> TrendCheck {
    let curve = |attack: Attack, eps: Option<f64>| -> Vec<&PowerResult> {
        let mut c: Vec<&PowerResult> = power
            .iter()
            .filter(|r| r.attack == attack && r.epsilon == eps)
            .collect();
        c.sort_by_key(|r| r.value);
        c
    };
    let slack = |a: &PowerResult, b: &PowerResult| POWER_SIGMAS * (a.power_se.powi(2) + b.power_se.powi(2)).sqrt();
    let non_decreasing = |c: &[&PowerResult]| c.windows(2).all(|w| w[1].power + slack(w[0], w[1]) >= w[0].power);
    let mut failures = Vec::new();
    let lrt = curve(Attack::Lrt, None);
    if !non_decreasing(&lrt) {
        failures.push("LRT not non-decreasing in l".to_string());
    }
    let mut eps: Vec<f64> = power.iter().filter_map(|r| r.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let eds: Vec<(f64, Vec<&PowerResult>)> = eps.iter().map(|&e| (e, curve(Attack::EditDistance, Some(e)))).collect();
    for (e, c) in &eds {
        if !non_decreasing(c) {
            failures.push(format!("ED at epsilon {e} not non-decreasing in k"));
        }
        for r in c {
            let Some(l) = lrt.iter().find(|x| x.value == r.value) else {
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
    let summary = |c: &[&PowerResult]| fmt(&c.iter().map(|r| r.power).collect::<Vec<_>>());
    let mut detail = format!("LRT [{}]", summary(&lrt));
    for (e, c) in &eds {
        detail += &format!("; ED epsilon {e} [{}]", summary(c));
    }
    if !failures.is_empty() {
        detail += &format!("; failures: {}", failures.join(", "));
    }
    check("attack-ordering", failures.is_empty(), detail)
}
