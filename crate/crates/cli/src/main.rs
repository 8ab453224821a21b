//! `gwasv`: synthesize data, run GWAS, build metadata bundles, calibrate
//! cut-offs, verify bundles, audit membership risk and run experiment grids.
//!
//! Exit codes: 0 on success, 1 when `verify` flags a statistic or
//! `experiment --check` finds a failing trend, 2 on any operational error.
//! Errors are printed to standard error as `error[CODE]: message`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gwas_verify::audit::{
    hold_out, population_frequencies, power_curve, write_power_csv_file, Attack, AuditOptions, Cohort, LrtVariant,
};
use gwas_verify::experiment::{run_experiment, trend_checks, ExperimentConfig};
use gwas_verify::genotype::{
    load_dataset, partition_dataset, synthesize_with_truth, Axis, Label, MatrixFormat, SynthesisConfig,
};
use gwas_verify::gwas::{rank_all, run_gwas, write_statistics_csv};
use gwas_verify::ldp::DpRelease;
use gwas_verify::metadata::{
    build_metadata_with, inject_errors, read_labels, write_labels, ErrorScenario, GroundTruth, MetadataBundle,
    MetadataOptions, PartialMode, DEFAULT_R2_THRESHOLD,
};
use gwas_verify::rng::derive;
use gwas_verify::verifier::{
    calibrate_cutoffs, summarize, verify_bundle, write_report_csv, CalibrationOptions, CutoffSet, Pairing,
    ThresholdRule,
};
use gwas_verify::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "gwasv",
    version,
    about = "Verify released GWAS statistics against a locally private partial dataset"
)]
struct Cli {
    /// Maximum number of worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic case/control genotype matrix.
    Synth(SynthArgs),
    /// Compute and rank association statistics.
    Gwas(GwasArgs),
    /// Build a metadata bundle, optionally with injected reporting errors.
    Metadata(MetadataArgs),
    /// Fit per-statistic cut-offs on a labelled calibration dataset.
    Calibrate(CalibrateArgs),
    /// Verify a metadata bundle.
    Verify(VerifyArgs),
    /// Estimate membership-inference power curves.
    Audit(AuditArgs),
    /// Run an experiment grid from a TOML configuration.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Root seed for every random choice of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthesis parameters as a key = value file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct GwasArgs {
    /// Genotype matrix (TSV).
    #[arg(long)]
    data: PathBuf,
    /// Number of statistics to keep.
    #[arg(long = "l", default_value_t = 100)]
    l: usize,
    /// Disable the 0.5 continuity correction for tables with a zero cell.
    #[arg(long)]
    no_continuity: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    Correct,
    Oversell,
    Undersell,
    Mixed,
    MetadataEpsilon,
}

#[derive(Debug, Args)]
struct MetadataArgs {
    /// Genotype matrix (TSV).
    #[arg(long)]
    data: PathBuf,
    /// Number of reported statistics.
    #[arg(long = "l", default_value_t = 100)]
    l: usize,
    /// Number of SNPs in the partial dataset.
    #[arg(long = "k", default_value_t = 100)]
    k: usize,
    /// Randomized-response privacy parameter.
    #[arg(long, conflicts_with = "b")]
    epsilon: Option<f64>,
    /// Build the partial dataset by sampling one of `b` sample-disjoint parts.
    #[arg(long = "b")]
    b: Option<usize>,
    /// Rank at which the reported window starts.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// r² above which two SNPs count as linked.
    #[arg(long, default_value_t = DEFAULT_R2_THRESHOLD)]
    r2: f64,
    #[arg(long, value_enum, default_value_t = ScenarioArg::Correct)]
    scenario: ScenarioArg,
    /// Rank shift for oversell, undersell and mixed scenarios.
    #[arg(long)]
    offset: Option<usize>,
    /// Oversell only: choose the window and shift so the p-value utility loss
    /// reaches this value, borrowing statistics from rank `--start` onwards.
    #[arg(long, conflicts_with = "offset")]
    loss: Option<f64>,
    /// Oversell, undersell and correct fractions for the mixed scenario.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    fractions: Option<Vec<f64>>,
    /// Privacy parameter actually used for the metadata-epsilon scenario.
    #[arg(long)]
    epsilon_actual: Option<f64>,
    /// Laplace noise on the reported statistics with this privacy parameter.
    #[arg(long)]
    epsilon_dp: Option<f64>,
    /// Sensitivity of p-values and odds ratios under `--epsilon-dp`.
    #[arg(long, default_value_t = 1.0)]
    sensitivity: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairingArg {
    RankWise,
    Mean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    SumOfRates,
    Balanced,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Public dataset used for expected deviations (TSV).
    #[arg(long)]
    public: PathBuf,
    /// Labelled dataset split into SNP-disjoint parts (TSV).
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, default_value_t = 5)]
    splits: usize,
    #[arg(long = "l", default_value_t = 100)]
    l: usize,
    #[arg(long, conflicts_with = "b")]
    epsilon: Option<f64>,
    #[arg(long = "b")]
    b: Option<usize>,
    /// Mechanism repetitions per calibration run and expected deviation.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Oversell shifts simulated on every split.
    #[arg(long, value_delimiter = ',', default_values_t = [250usize, 500, 1000, 1500, 2000])]
    offsets: Vec<usize>,
    /// Rank of the strongest statistic an oversold window borrows.
    #[arg(long, default_value_t = 0)]
    anchor: usize,
    #[arg(long, value_enum, default_value_t = PairingArg::Mean)]
    pairing: PairingArg,
    #[arg(long, value_enum, default_value_t = RuleArg::SumOfRates)]
    rule: RuleArg,
    /// Number of candidate thresholds.
    #[arg(long, default_value_t = 512)]
    grid: usize,
    /// Calibrate for statistics released with Laplace noise.
    #[arg(long)]
    epsilon_dp: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    sensitivity: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// `bundle.json` written by `metadata`.
    #[arg(long)]
    bundle: PathBuf,
    /// Public dataset used for expected deviations (TSV).
    #[arg(long)]
    public: PathBuf,
    /// `cutoffs.json` written by `calibrate`.
    #[arg(long)]
    cutoffs: PathBuf,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Ground-truth labels; adds TPR, TNR and accuracy to the summary.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackArg {
    Lrt,
    EditDistance,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Literal,
    PerAllele,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Attacked study (TSV); its cases are the members.
    #[arg(long)]
    data: PathBuf,
    /// Non-members from the same population (TSV).
    #[arg(long, requires = "reference")]
    outsiders: Option<PathBuf>,
    /// Reference panel for population allele frequencies (TSV, control rows).
    #[arg(long, requires = "outsiders")]
    reference: Option<PathBuf>,
    /// Without `--outsiders`: controls of `--data` held out as non-members and
    /// as the reference panel.
    #[arg(long, value_delimiter = ',', default_values_t = [25usize, 25])]
    hold_out: Vec<usize>,
    #[arg(long, value_enum, default_value_t = AttackArg::Both)]
    attack: AttackArg,
    /// Number of attacked statistics (LRT) and partial-dataset SNPs (edit distance).
    #[arg(long = "l", value_delimiter = ',', default_values_t = [10usize, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
    l: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 2.0, 3.0, 5.0])]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    fpr: f64,
    #[arg(long, default_value_t = 25)]
    size_a: usize,
    #[arg(long, default_value_t = 25)]
    size_b: usize,
    #[arg(long, default_value_t = 50)]
    repetitions: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Literal)]
    variant: VariantArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of research datasets.
    #[arg(long)]
    seeds: Option<usize>,
    /// Override the number of mechanism repetitions.
    #[arg(long)]
    trials: Option<usize>,
    /// Exit with 1 when a trend check fails.
    #[arg(long)]
    check: bool,
    /// Root seed; overrides the configuration's `root_seed` when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Success,
    Negative,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("error[E_USAGE]: {}", text.trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error[E_THREADS]: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Negative) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Gwas(a) => gwas(a),
        Command::Metadata(a) => metadata(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Verify(a) => verify(a),
        Command::Audit(a) => audit(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load(path: &Path) -> Result<gwas_verify::genotype::CaseControlDataset> {
    load_dataset(path, MatrixFormat::Tsv)
}

fn synth(a: SynthArgs) -> Result<Outcome> {
    let mut config = match &a.config {
        Some(path) => SynthesisConfig::from_kv(&read_text(path)?)?,
        None => SynthesisConfig::default(),
    };
    config.seed = a.common.seed;
    let out = &a.common.out;
    create_dir(out)?;
    let synthetic = synthesize_with_truth(&config)?;
    synthetic.dataset.write_tsv(&out.join("dataset.tsv"))?;
    let mut associated = synthetic.associated.join("\n");
    associated.push('\n');
    write_text(&out.join("associated.txt"), &associated)?;
    write_text(&out.join("synth.kv"), &config.to_kv())?;
    Ok(Outcome::Success)
}

fn gwas(a: GwasArgs) -> Result<Outcome> {
    let dataset = load(&a.data)?;
    let stats = run_gwas(&dataset, a.l, !a.no_continuity)?;
    create_dir(&a.common.out)?;
    write_statistics_csv(&a.common.out.join("statistics.csv"), &stats)?;
    Ok(Outcome::Success)
}

fn partial_mode(epsilon: Option<f64>, b: Option<usize>) -> Result<PartialMode> {
    match (epsilon, b) {
        (Some(epsilon), None) => Ok(PartialMode::Rr { epsilon }),
        (None, Some(b)) => Ok(PartialMode::Sampling { b }),
        _ => Err(Error::Config("exactly one of --epsilon and --b is required".into())),
    }
}

fn metadata(a: MetadataArgs) -> Result<Outcome> {
    let dataset = load(&a.data)?;
    let truth = GroundTruth::from_dataset(&dataset);
    let seed = a.common.seed;
    let mut opts = MetadataOptions::new(a.l, a.k, 1.0, seed);
    opts.mode = partial_mode(a.epsilon, a.b)?;
    opts.r2_threshold = a.r2;
    opts.start = a.start;
    let need_offset = || {
        a.offset
            .ok_or_else(|| Error::Config("--offset is required for this scenario".into()))
    };
    let scenario = match a.scenario {
        ScenarioArg::Correct => ErrorScenario::Correct,
        ScenarioArg::Oversell => match a.loss {
            Some(target) => {
                let (start, offset) = truth
                    .oversell_window(a.start, a.l, target)
                    .ok_or_else(|| Error::Config(format!("utility loss {target} is unreachable")))?;
                opts.start = start;
                ErrorScenario::Oversell { offset }
            }
            None => ErrorScenario::Oversell { offset: need_offset()? },
        },
        ScenarioArg::Undersell => ErrorScenario::Undersell { offset: need_offset()? },
        ScenarioArg::Mixed => {
            let f = a.fractions.clone().unwrap_or_else(|| vec![1.0 / 3.0; 3]);
            ErrorScenario::Mixed {
                offset: need_offset()?,
                fractions: [f[0], f[1], f[2]],
            }
        }
        ScenarioArg::MetadataEpsilon => ErrorScenario::MetadataEpsilon {
            epsilon_actual: a
                .epsilon_actual
                .ok_or_else(|| Error::Config("--epsilon-actual is required for this scenario".into()))?,
        },
    };
    if a.loss.is_some() && !matches!(a.scenario, ScenarioArg::Oversell) {
        return Err(Error::Config("--loss applies to the oversell scenario only".into()));
    }
    let bundle = build_metadata_with(&dataset, &truth, &opts)?;
    let mut injected = inject_errors(&bundle, &dataset, &truth, &scenario, seed)?;
    if let Some(epsilon_dp) = a.epsilon_dp {
        let noise = DpRelease {
            epsilon_dp,
            p_value_sensitivity: a.sensitivity,
            odds_ratio_sensitivity: a.sensitivity,
        };
        injected.bundle.reported = noise.apply(&injected.bundle.reported, dataset.n_case(), derive(seed, &[1]))?;
    }
    let out = &a.common.out;
    injected.bundle.write(out)?;
    write_labels(&out.join("labels.csv"), &injected)?;
    let utility = serde_json::to_string_pretty(&injected.utility)? + "\n";
    write_text(&out.join("utility.json"), &utility)?;
    Ok(Outcome::Success)
}

fn calibrate(a: CalibrateArgs) -> Result<Outcome> {
    let public = load(&a.public)?;
    let full = load(&a.calibration)?;
    let seed = a.common.seed;
    let splits = partition_dataset(&full, a.splits, Axis::Snps, derive(seed, &[0]))?;
    let mode = partial_mode(a.epsilon, a.b)?;
    let opts = CalibrationOptions {
        trials: a.trials,
        seed: derive(seed, &[1]),
        pairing: match a.pairing {
            PairingArg::RankWise => Pairing::RankWise,
            PairingArg::Mean => Pairing::Mean,
        },
        grid_size: a.grid,
        rule: match a.rule {
            RuleArg::SumOfRates => ThresholdRule::SumOfRates,
            RuleArg::Balanced => ThresholdRule::Balanced,
        },
        anchor: a.anchor,
        sampling_b: a.b.unwrap_or(CalibrationOptions::default().sampling_b),
        release_noise: a.epsilon_dp.map(|epsilon_dp| DpRelease {
            epsilon_dp,
            p_value_sensitivity: a.sensitivity,
            odds_ratio_sensitivity: a.sensitivity,
        }),
    };
    let epsilon = match mode {
        PartialMode::Rr { epsilon } => Some(epsilon),
        PartialMode::Sampling { .. } => None,
    };
    let scenarios: Vec<ErrorScenario> = a
        .offsets
        .iter()
        .map(|&offset| ErrorScenario::Oversell { offset })
        .collect();
    let cutoffs = calibrate_cutoffs(&splits, &public, a.l, epsilon, &scenarios, &opts)?;
    create_dir(&a.common.out)?;
    cutoffs.write(&a.common.out.join("cutoffs.json"))?;
    Ok(Outcome::Success)
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    let bundle = MetadataBundle::read(&a.bundle)?;
    let public = load(&a.public)?;
    let cutoffs = CutoffSet::read(&a.cutoffs)?;
    let labels: Option<BTreeMap<_, _>> = a.labels.as_deref().map(read_labels).transpose()?;
    let report = verify_bundle(&bundle, &public, &cutoffs, a.trials, a.common.seed)?;
    let summary = summarize(&report, labels.as_ref())?;
    let out = &a.common.out;
    create_dir(out)?;
    write_report_csv(&report, &out.join("report.csv"))?;
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    Ok(if summary.all_correct {
        Outcome::Success
    } else {
        Outcome::Negative
    })
}

fn audit(a: AuditArgs) -> Result<Outcome> {
    let data = load(&a.data)?;
    let seed = a.common.seed;
    let (dataset, outsiders, pops) = match (&a.outsiders, &a.reference) {
        (Some(o), Some(r)) => {
            let outsiders = Cohort::all_rows(&load(o)?)?;
            (data, outsiders, population_frequencies(&load(r)?))
        }
        _ => {
            if a.hold_out.len() != 2 {
                return Err(Error::Config("--hold-out takes two counts: outsiders,reference".into()));
            }
            let (rest, outsiders) = hold_out(&data, Label::Control, a.hold_out[0], derive(seed, &[1]))?;
            let (dataset, reference) = hold_out(&rest, Label::Control, a.hold_out[1], derive(seed, &[2]))?;
            (dataset, outsiders, reference.allele_frequencies())
        }
    };
    let ranking = rank_all(&dataset, true);
    let opts = AuditOptions {
        fpr: a.fpr,
        size_a: a.size_a,
        size_b: a.size_b,
        repetitions: a.repetitions,
        variant: match a.variant {
            VariantArg::Literal => LrtVariant::Literal,
            VariantArg::PerAllele => LrtVariant::PerAllele,
        },
        seed: derive(seed, &[3]),
    };
    let attacks: &[Attack] = match a.attack {
        AttackArg::Lrt => &[Attack::Lrt],
        AttackArg::EditDistance => &[Attack::EditDistance],
        AttackArg::Both => &[Attack::Lrt, Attack::EditDistance],
    };
    let mut results = Vec::new();
    for &attack in attacks {
        let eps: &[f64] = if attack == Attack::Lrt { &[] } else { &a.epsilon };
        results.extend(power_curve(
            &dataset, &outsiders, &ranking, &pops, attack, &a.l, eps, &opts,
        )?);
    }
    create_dir(&a.common.out)?;
    write_power_csv_file(&a.common.out.join("power_curves.csv"), &results)?;
    Ok(Outcome::Success)
}

fn experiment(a: ExperimentArgs) -> Result<Outcome> {
    let mut config = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.root_seed = seed;
    }
    if let Some(seeds) = a.seeds {
        config.seeds = seeds;
    }
    if let Some(trials) = a.trials {
        config.trials = trials;
    }
    let report = run_experiment(&config)?;
    report.write(&a.out)?;
    let mut failed = false;
    for check in trend_checks(&report) {
        let mark = if check.passed { "PASS" } else { "FAIL" };
        eprintln!("{mark} {}: {}", check.name, check.detail);
        failed |= !check.passed;
    }
    for status in report.status.iter().filter(|s| s.status != "ok") {
        eprintln!(
            "cell {} {}={:?}: {}",
            status.experiment, status.parameter, status.value, status.status
        );
    }
    Ok(if a.check && failed {
        Outcome::Negative
    } else {
        Outcome::Success
    })
}
