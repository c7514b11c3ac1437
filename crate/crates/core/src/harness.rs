//! Config-driven experiment runner.
//!
//! Reproduces the diversity grid (uniform training sets of growing size),
//! the bias grid (a small over-represented subset next to a large uniform
//! one) and the early-stopping sweep on the simulator, with `R` seeded
//! replicates per grid cell. Ingestion mode scores a real prediction log
//! against a membership manifest instead.
//!
//! Output tree:
//!
//! ```text
//! <out>/<mode>/<cell>/<replicate>/report.json
//! <out>/<mode>/summary.csv
//! <out>/<mode>/summary.json
//! <out>/<mode>/table.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{decide, simulate_counts, AttackConfig, FrequencyTable, OutOfRangePolicy};
use crate::error::{io_err, Error, Result};
use crate::eval::{f1, histogram, pr_sweep, EvalReport, HistogramExport, PrCurve};
use crate::identity::{
    make_setting1_spec, make_setting2_spec, random_baseline_precision, DatasetSpec, EvalMode,
};
use crate::ingest::{
    load_membership_manifest, load_prediction_log, write_report, Report, ReportFormat,
};
use crate::stats::mean_stderr;
use crate::synthcls::{preset, ClassifierModel, NovelSpread};
use crate::synthgen::{GeneratorModel, MemorizationSchedule};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "GANLEAK_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Setting1,
    Setting2,
    EarlyStopping,
    Ingest,
}

impl ExperimentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentMode::Setting1 => "setting1",
            ExperimentMode::Setting2 => "setting2",
            ExperimentMode::EarlyStopping => "early_stopping",
            ExperimentMode::Ingest => "ingest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    #[serde(default = "default_rate")]
    pub memorization_rate: f64,
    #[serde(default = "default_gamma")]
    pub bias_exponent: f64,
    /// Defaults to `|Y_F| - |members|` per cell.
    #[serde(default)]
    pub novel_space_size: Option<usize>,
}

fn default_rate() -> f64 {
    0.3
}

fn default_gamma() -> f64 {
    1.0
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            memorization_rate: default_rate(),
            bias_exponent: default_gamma(),
            novel_space_size: None,
        }
    }
}

/// Either a named preset, explicit parameters, or a preset with overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub yf_size: Option<usize>,
    #[serde(default)]
    pub top1_accuracy: Option<f64>,
    #[serde(default)]
    pub novel_spread: NovelSpread,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        ClassifierParams {
            preset: Some("vggface2".into()),
            yf_size: None,
            top1_accuracy: None,
            novel_spread: NovelSpread::Uniform,
        }
    }
}

impl ClassifierParams {
    /// Identity space size and accuracy after applying the preset and
    /// overrides.
    pub fn resolve(&self) -> Result<(usize, f64)> {
        let base = self.preset.as_deref().map(preset).transpose()?;
        let yf = self
            .yf_size
            .or(base.as_ref().map(|b| b.yf_size()))
            .ok_or_else(|| Error::InvalidConfig("classifier needs a preset or yf_size".into()))?;
        let acc = self
            .top1_accuracy
            .or(base.as_ref().map(|b| b.top1_accuracy()))
            .ok_or_else(|| {
                Error::InvalidConfig("classifier needs a preset or top1_accuracy".into())
            })?;
        Ok((yf, acc))
    }

    pub fn build(&self, novel_capacity: usize) -> Result<ClassifierModel> {
        let (yf, acc) = self.resolve()?;
        ClassifierModel::with_spread(yf, acc, self.novel_spread, novel_capacity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting1Grid {
    #[serde(default = "default_setting1_counts")]
    pub identity_counts: Vec<usize>,
    #[serde(default = "default_setting1_per_id")]
    pub samples_per_identity: u64,
}

fn default_setting1_counts() -> Vec<usize> {
    vec![30, 58, 111, 220, 440, 880]
}

fn default_setting1_per_id() -> u64 {
    364
}

impl Default for Setting1Grid {
    fn default() -> Self {
        Setting1Grid {
            identity_counts: default_setting1_counts(),
            samples_per_identity: default_setting1_per_id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting2Grid {
    #[serde(default = "default_setting2_counts")]
    pub biased_counts: Vec<usize>,
    #[serde(default = "default_n1")]
    pub biased_samples_per_identity: u64,
    #[serde(default = "default_unbiased_count")]
    pub unbiased_count: usize,
    #[serde(default = "default_n2")]
    pub unbiased_samples_per_identity: u64,
}

fn default_setting2_counts() -> Vec<usize> {
    vec![20, 40, 80, 160]
}

fn default_n1() -> u64 {
    300
}

fn default_unbiased_count() -> usize {
    2000
}

fn default_n2() -> u64 {
    20
}

impl Default for Setting2Grid {
    fn default() -> Self {
        Setting2Grid {
            biased_counts: default_setting2_counts(),
            biased_samples_per_identity: default_n1(),
            unbiased_count: default_unbiased_count(),
            unbiased_samples_per_identity: default_n2(),
        }
    }
}

/// Training set the early-stopping sweep runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EarlyStoppingBase {
    Setting1 {
        identities: usize,
        samples_per_identity: u64,
    },
    Setting2 {
        biased_count: usize,
        biased_samples_per_identity: u64,
        unbiased_count: usize,
        unbiased_samples_per_identity: u64,
    },
}

impl Default for EarlyStoppingBase {
    fn default() -> Self {
        EarlyStoppingBase::Setting1 {
            identities: 220,
            samples_per_identity: 364,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStoppingParams {
    #[serde(default)]
    pub base: EarlyStoppingBase,
    #[serde(default = "default_steps")]
    pub steps: Vec<u64>,
    #[serde(default = "default_schedule")]
    pub schedule: MemorizationSchedule,
}

fn default_steps() -> Vec<u64> {
    (0..10).map(|i| i * 2000).collect()
}

fn default_schedule() -> MemorizationSchedule {
    MemorizationSchedule::Saturating { tau: 10_000.0 }
}

impl Default for EarlyStoppingParams {
    fn default() -> Self {
        EarlyStoppingParams {
            base: EarlyStoppingBase::default(),
            steps: default_steps(),
            schedule: default_schedule(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestParams {
    pub log: PathBuf,
    pub manifest: PathBuf,
    #[serde(default)]
    pub eval_mode: EvalMode,
    /// Reject predicted ids outside the manifest instead of discarding them.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: ExperimentMode,
    #[serde(default = "default_lambda")]
    pub lambda: u32,
    /// Defaults to `[lambda, 10 * lambda]`.
    #[serde(default)]
    pub thresholds: Option<Vec<u64>>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub generator: GeneratorParams,
    #[serde(default)]
    pub classifier: ClassifierParams,
    #[serde(default)]
    pub setting1: Setting1Grid,
    #[serde(default)]
    pub setting2: Setting2Grid,
    #[serde(default)]
    pub early_stopping: EarlyStoppingParams,
    #[serde(default)]
    pub ingest: Option<IngestParams>,
}

fn default_lambda() -> u32 {
    2
}

fn default_replicates() -> usize {
    10
}

impl ExperimentConfig {
    /// Config with every section at its default.
    pub fn new(mode: ExperimentMode) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            mode,
            lambda: default_lambda(),
            thresholds: None,
            replicates: default_replicates(),
            master_seed: None,
            output_dir: None,
            generator: GeneratorParams::default(),
            classifier: ClassifierParams::default(),
            setting1: Setting1Grid::default(),
            setting2: Setting2Grid::default(),
            early_stopping: EarlyStoppingParams::default(),
            ingest: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn thresholds(&self) -> Vec<u64> {
        self.thresholds
            .clone()
            .unwrap_or_else(|| vec![AttackConfig::t0(self.lambda), AttackConfig::t1(self.lambda)])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.lambda == 0 {
            return bad("lambda must be at least 1");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if matches!(&self.thresholds, Some(t) if t.is_empty()) {
            return bad("thresholds must not be empty");
        }
        match self.mode {
            ExperimentMode::Setting1 => {
                if self.setting1.identity_counts.is_empty() {
                    return bad("setting1.identity_counts is empty");
                }
                if self.setting1.identity_counts.contains(&0)
                    || self.setting1.samples_per_identity == 0
                {
                    return bad("setting1 grid values must be positive");
                }
            }
            ExperimentMode::Setting2 => {
                let g = &self.setting2;
                if g.biased_counts.is_empty() {
                    return bad("setting2.biased_counts is empty");
                }
                if g.biased_counts.contains(&0) || g.unbiased_samples_per_identity == 0 {
                    return bad("setting2 grid values must be positive");
                }
            }
            ExperimentMode::EarlyStopping => {
                if self.early_stopping.steps.is_empty() {
                    return bad("early_stopping.steps is empty");
                }
                self.early_stopping.schedule.validate()?;
            }
            ExperimentMode::Ingest => {
                if self.ingest.is_none() {
                    return bad("ingest mode needs an `ingest` section with log and manifest");
                }
            }
        }
        Ok(())
    }
}

/// Master seed from, in order: an explicit value, the config, the
/// `GANLEAK_SEED` environment variable, else 0.
pub fn resolve_seed(explicit: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{v}` is not a u64"))),
        Err(_) => Ok(0),
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one replicate. For a fixed master seed the map from
/// `(cell, replicate)` (each below 2^32) is injective: it is a composition
/// of bijections on `u64`.
pub fn replicate_seed(master_seed: u64, cell: usize, replicate: usize) -> u64 {
    let slot = ((cell as u64) << 32) | (replicate as u64 & 0xFFFF_FFFF);
    splitmix64(master_seed.wrapping_add(splitmix64(slot)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Training identities overlapping the known identity space.
    pub yg_size: usize,
    pub yg1_size: Option<usize>,
    pub step: Option<u64>,
    pub memorization_rate: f64,
    pub total_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: u64,
    /// Replicates that flagged nothing contribute 0.
    pub precision_mean: f64,
    pub precision_stderr: f64,
    pub precision_undefined: usize,
    /// Mean over replicates with a defined precision.
    pub precision_defined_mean: Option<f64>,
    pub recall_mean: f64,
    pub recall_stderr: f64,
    pub f1_mean: f64,
    pub f1_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub label: String,
    pub params: CellParams,
    pub baseline: f64,
    /// Random-baseline F1 with recall taken as 1.
    pub baseline_f1: f64,
    pub thresholds: Vec<ThresholdSummary>,
    pub replicates: Vec<ReplicateResult>,
}

impl CellResult {
    pub fn at(&self, threshold: u64) -> Option<&ThresholdSummary> {
        self.thresholds.iter().find(|t| t.threshold == threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub mode: ExperimentMode,
    pub eval_mode: EvalMode,
    pub lambda: u32,
    pub k: u64,
    pub yf_size: usize,
    pub top1_accuracy: f64,
    pub master_seed: u64,
    pub replicates: usize,
    pub notes: Vec<String>,
    pub cells: Vec<CellResult>,
}

const NOTE_BASELINE_F1: &str = "baseline_f1 is computed with the random baseline's recall set to 1";
const NOTE_UNDEFINED: &str = "precision_mean counts replicates that flag no identity as precision 0; precision_undefined counts them and precision_defined_mean excludes them";
const NOTE_UNIFORM: &str = "per-identity training sample counts are exactly uniform within each group; reference datasets are only approximately uniform";

struct CellSetup {
    label: String,
    params: CellParams,
    generator: GeneratorModel,
}

fn summarize(threshold: u64, reports: &[&EvalReport]) -> ThresholdSummary {
    let precisions: Vec<f64> = reports.iter().map(|r| r.precision.unwrap_or(0.0)).collect();
    let defined: Vec<f64> = reports.iter().filter_map(|r| r.precision).collect();
    let recalls: Vec<f64> = reports.iter().map(|r| r.recall).collect();
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let (precision_mean, precision_stderr) = mean_stderr(&precisions);
    let (recall_mean, recall_stderr) = mean_stderr(&recalls);
    let (f1_mean, f1_stderr) = mean_stderr(&f1s);
    ThresholdSummary {
        threshold,
        precision_mean,
        precision_stderr,
        precision_undefined: reports.len() - defined.len(),
        precision_defined_mean: (!defined.is_empty()).then(|| mean_stderr(&defined).0),
        recall_mean,
        recall_stderr,
        f1_mean,
        f1_stderr,
    }
}

fn run_grid(
    config: &ExperimentConfig,
    master_seed: u64,
    eval_mode: EvalMode,
    cells: Vec<CellSetup>,
    thresholds: &[u64],
) -> Result<AggregateResult> {
    let capacity = cells
        .iter()
        .map(|c| c.generator.novel_space_size())
        .max()
        .unwrap_or(0);
    let classifier = config.classifier.build(capacity)?;
    let attack = AttackConfig::new(config.lambda, classifier.yf_size(), 0)?;

    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.replicates).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<ReplicateResult> = tasks
        .par_iter()
        .map(|&(c, r)| {
            let cell = &cells[c];
            let seed = replicate_seed(master_seed, c, r);
            let table = simulate_counts(&cell.generator, &classifier, attack.k, seed)?;
            let reports = thresholds
                .iter()
                .map(|&t| {
                    EvalReport::evaluate(
                        &decide(&table, t),
                        cell.generator.spec(),
                        eval_mode,
                        config.lambda,
                        Some(seed),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ReplicateResult {
                replicate: r,
                seed,
                reports,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcomes = outcomes.into_iter();
    let mut results = Vec::with_capacity(cells.len());
    for (index, cell) in cells.into_iter().enumerate() {
        let replicates: Vec<ReplicateResult> = outcomes.by_ref().take(config.replicates).collect();
        let summaries = thresholds
            .iter()
            .enumerate()
            .map(|(ti, &t)| {
                let reports: Vec<&EvalReport> = replicates.iter().map(|r| &r.reports[ti]).collect();
                summarize(t, &reports)
            })
            .collect();
        let baseline = random_baseline_precision(cell.generator.spec(), eval_mode)?;
        results.push(CellResult {
            index,
            label: cell.label,
            params: cell.params,
            baseline,
            baseline_f1: f1(baseline, 1.0),
            thresholds: summaries,
            replicates,
        });
    }

    Ok(AggregateResult {
        mode: config.mode,
        eval_mode,
        lambda: config.lambda,
        k: attack.k,
        yf_size: classifier.yf_size(),
        top1_accuracy: classifier.top1_accuracy(),
        master_seed,
        replicates: config.replicates,
        notes: vec![
            NOTE_BASELINE_F1.to_string(),
            NOTE_UNDEFINED.to_string(),
            NOTE_UNIFORM.to_string(),
        ],
        cells: results,
    })
}

fn generator_for(
    config: &ExperimentConfig,
    spec: DatasetSpec,
    rate: f64,
) -> Result<GeneratorModel> {
    GeneratorModel::new(
        Arc::new(spec),
        rate,
        config.generator.bias_exponent,
        config.generator.novel_space_size,
    )
}

fn check_mode(config: &ExperimentConfig, expected: ExperimentMode) -> Result<()> {
    config.validate()?;
    if config.mode != expected {
        return Err(Error::InvalidConfig(format!(
            "config mode is {}, expected {}",
            config.mode.as_str(),
            expected.as_str()
        )));
    }
    Ok(())
}

/// Diversity grid: uniform training sets of `|Y_G|` identities.
pub fn run_setting1(config: &ExperimentConfig, master_seed: u64) -> Result<AggregateResult> {
    check_mode(config, ExperimentMode::Setting1)?;
    let (yf, _) = config.classifier.resolve()?;
    let grid = &config.setting1;
    let cells = grid
        .identity_counts
        .iter()
        .map(|&g| {
            let spec = make_setting1_spec(yf, g, grid.samples_per_identity)?;
            let total = spec.total_samples();
            Ok(CellSetup {
                label: format!("yg_{g}"),
                params: CellParams {
                    yg_size: g,
                    yg1_size: None,
                    step: None,
                    memorization_rate: config.generator.memorization_rate,
                    total_samples: total,
                },
                generator: generator_for(config, spec, config.generator.memorization_rate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_grid(
        config,
        master_seed,
        EvalMode::Full,
        cells,
        &config.thresholds(),
    )
}

/// Bias grid, scored on the biased subset only.
pub fn run_setting2(config: &ExperimentConfig, master_seed: u64) -> Result<AggregateResult> {
    check_mode(config, ExperimentMode::Setting2)?;
    let (yf, _) = config.classifier.resolve()?;
    let grid = &config.setting2;
    let cells = grid
        .biased_counts
        .iter()
        .map(|&g1| {
            let spec = make_setting2_spec(
                yf,
                g1,
                grid.biased_samples_per_identity,
                grid.unbiased_count,
                grid.unbiased_samples_per_identity,
            )?;
            let total = spec.total_samples();
            Ok(CellSetup {
                label: format!("yg1_{g1}"),
                params: CellParams {
                    yg_size: g1 + grid.unbiased_count,
                    yg1_size: Some(g1),
                    step: None,
                    memorization_rate: config.generator.memorization_rate,
                    total_samples: total,
                },
                generator: generator_for(config, spec, config.generator.memorization_rate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_grid(
        config,
        master_seed,
        EvalMode::Biased,
        cells,
        &config.thresholds(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStoppingPoint {
    pub step: u64,
    pub memorization_rate: f64,
    pub precision_t0: f64,
    pub precision_t0_stderr: f64,
    pub precision_t1: f64,
    pub precision_t1_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStoppingResult {
    pub series: Vec<EarlyStoppingPoint>,
    pub aggregate: AggregateResult,
}

/// One attack per training step, with the memorization rate following the
/// configured schedule.
pub fn run_early_stopping(
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<EarlyStoppingResult> {
    check_mode(config, ExperimentMode::EarlyStopping)?;
    let (yf, _) = config.classifier.resolve()?;
    let params = &config.early_stopping;
    let (spec, eval_mode, yg1) = match params.base {
        EarlyStoppingBase::Setting1 {
            identities,
            samples_per_identity,
        } => (
            make_setting1_spec(yf, identities, samples_per_identity)?,
            EvalMode::Full,
            None,
        ),
        EarlyStoppingBase::Setting2 {
            biased_count,
            biased_samples_per_identity,
            unbiased_count,
            unbiased_samples_per_identity,
        } => (
            make_setting2_spec(
                yf,
                biased_count,
                biased_samples_per_identity,
                unbiased_count,
                unbiased_samples_per_identity,
            )?,
            EvalMode::Biased,
            Some(biased_count),
        ),
    };
    let spec = Arc::new(spec);
    let cells = params
        .steps
        .iter()
        .map(|&step| {
            let rate = params.schedule.rate_at(step);
            Ok(CellSetup {
                label: format!("step_{step}"),
                params: CellParams {
                    yg_size: spec.members().len(),
                    yg1_size: yg1,
                    step: Some(step),
                    memorization_rate: rate,
                    total_samples: spec.total_samples(),
                },
                generator: GeneratorModel::new(
                    Arc::clone(&spec),
                    rate,
                    config.generator.bias_exponent,
                    config.generator.novel_space_size,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let t0 = AttackConfig::t0(config.lambda);
    let t1 = AttackConfig::t1(config.lambda);
    let mut thresholds = config.thresholds();
    for t in [t0, t1] {
        if !thresholds.contains(&t) {
            thresholds.push(t);
        }
    }
    let aggregate = run_grid(config, master_seed, eval_mode, cells, &thresholds)?;
    let series = aggregate
        .cells
        .iter()
        .map(|c| {
            let a = c.at(t0).expect("T0 evaluated");
            let b = c.at(t1).expect("T1 evaluated");
            EarlyStoppingPoint {
                step: c.params.step.unwrap_or(0),
                memorization_rate: c.params.memorization_rate,
                precision_t0: a.precision_mean,
                precision_t0_stderr: a.precision_stderr,
                precision_t1: b.precision_mean,
                precision_t1_stderr: b.precision_stderr,
            }
        })
        .collect();
    Ok(EarlyStoppingResult { series, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResult {
    pub reports: Vec<EvalReport>,
    pub pr_curve: PrCurve,
    pub histogram: HistogramExport,
    pub table: FrequencyTable,
}

/// Scores a prediction log against a membership manifest. `K` is the log
/// length.
pub fn run_ingest(params: &IngestParams, lambda: u32, thresholds: &[u64]) -> Result<IngestResult> {
    let truth = load_membership_manifest(&params.manifest)?;
    let log = load_prediction_log(&params.log)?;
    let policy = if params.strict {
        OutOfRangePolicy::Strict
    } else {
        OutOfRangePolicy::Discard
    };
    let table = log.to_table(truth.yf_size(), policy)?;
    let reports = thresholds
        .iter()
        .map(|&t| EvalReport::evaluate(&decide(&table, t), &truth, params.eval_mode, lambda, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(IngestResult {
        reports,
        pr_curve: pr_sweep(&table, &truth, params.eval_mode)?,
        histogram: histogram(&table, &truth)?,
        table,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutput {
    Grid(AggregateResult),
    EarlyStopping(EarlyStoppingResult),
    Ingest(IngestResult),
}

/// Runs the configured experiment and writes its output tree under `out`.
pub fn run_experiment(
    config: &ExperimentConfig,
    master_seed: u64,
    out: &Path,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let dir = out.join(config.mode.as_str());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let output = match config.mode {
        ExperimentMode::Setting1 => ExperimentOutput::Grid(run_setting1(config, master_seed)?),
        ExperimentMode::Setting2 => ExperimentOutput::Grid(run_setting2(config, master_seed)?),
        ExperimentMode::EarlyStopping => {
            ExperimentOutput::EarlyStopping(run_early_stopping(config, master_seed)?)
        }
        ExperimentMode::Ingest => {
            let params = config.ingest.as_ref().expect("validated");
            ExperimentOutput::Ingest(run_ingest(params, config.lambda, &config.thresholds())?)
        }
    };
    match &output {
        ExperimentOutput::Grid(agg) => write_aggregate(agg, &dir)?,
        ExperimentOutput::EarlyStopping(es) => {
            write_aggregate(&es.aggregate, &dir)?;
            write_csv_rows(&dir.join("series.csv"), &es.series)?;
        }
        ExperimentOutput::Ingest(res) => {
            write_report(&res.reports, dir.join("report.json"), ReportFormat::Json)?;
            write_report(&res.pr_curve, dir.join("pr_curve.json"), ReportFormat::Json)?;
            write_report(&res.pr_curve, dir.join("pr_curve.csv"), ReportFormat::Csv)?;
            write_report(&res.histogram, dir.join("histogram.csv"), ReportFormat::Csv)?;
        }
    }
    Ok(output)
}

/// One row per (cell, threshold) of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: usize,
    pub label: String,
    pub yg_size: usize,
    pub yg1_size: Option<usize>,
    pub step: Option<u64>,
    pub memorization_rate: f64,
    pub total_samples: u64,
    pub baseline: f64,
    pub baseline_f1: f64,
    pub threshold: u64,
    pub precision_mean: f64,
    pub precision_stderr: f64,
    pub precision_undefined: usize,
    pub precision_defined_mean: Option<f64>,
    pub recall_mean: f64,
    pub recall_stderr: f64,
    pub f1_mean: f64,
    pub f1_stderr: f64,
}

pub fn summary_rows(agg: &AggregateResult) -> Vec<SummaryRow> {
    agg.cells
        .iter()
        .flat_map(|c| {
            c.thresholds.iter().map(move |t| SummaryRow {
                cell: c.index,
                label: c.label.clone(),
                yg_size: c.params.yg_size,
                yg1_size: c.params.yg1_size,
                step: c.params.step,
                memorization_rate: c.params.memorization_rate,
                total_samples: c.params.total_samples,
                baseline: c.baseline,
                baseline_f1: c.baseline_f1,
                threshold: t.threshold,
                precision_mean: t.precision_mean,
                precision_stderr: t.precision_stderr,
                precision_undefined: t.precision_undefined,
                precision_defined_mean: t.precision_defined_mean,
                recall_mean: t.recall_mean,
                recall_stderr: t.recall_stderr,
                f1_mean: t.f1_mean,
                f1_stderr: t.f1_stderr,
            })
        })
        .collect()
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the per-replicate reports, `summary.csv`, `summary.json` and
/// `table.txt` under `dir`.
pub fn write_aggregate(agg: &AggregateResult, dir: &Path) -> Result<()> {
    for cell in &agg.cells {
        for rep in &cell.replicates {
            let d = dir.join(&cell.label).join(format!("r{:03}", rep.replicate));
            fs::create_dir_all(&d).map_err(io_err(&d))?;
            write_json(&d.join("report.json"), rep)?;
        }
    }
    write_csv_rows(&dir.join("summary.csv"), &summary_rows(agg))?;
    write_json(&dir.join("summary.json"), agg)?;
    let table = format_table(agg);
    fs::write(dir.join("table.txt"), table).map_err(io_err(dir))
}

/// Plain-text grid of mean precision / recall (in %), one column per cell,
/// with the random baseline on top.
pub fn format_table(agg: &AggregateResult) -> String {
    let mut out = String::new();
    let header = match agg.mode {
        ExperimentMode::Setting2 => "|Y_G1| (N)",
        ExperimentMode::EarlyStopping => "step (rho)",
        _ => "|Y_G| (N)",
    };
    let cols: Vec<String> = agg
        .cells
        .iter()
        .map(|c| match (agg.mode, c.params.step, c.params.yg1_size) {
            (ExperimentMode::EarlyStopping, Some(s), _) => {
                format!("{s} ({:.3})", c.params.memorization_rate)
            }
            (_, _, Some(g1)) => format!("{g1} ({})", c.params.total_samples),
            _ => format!("{} ({})", c.params.yg_size, c.params.total_samples),
        })
        .collect();
    let width = cols.iter().map(String::len).max().unwrap_or(0).max(16);
    let _ = write!(out, "{header:<14}");
    for c in &cols {
        let _ = write!(out, " | {c:>width$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", "Random");
    for c in &agg.cells {
        let cell = format!("{:.2} / 100", 100.0 * c.baseline);
        let _ = write!(out, " | {cell:>width$}");
    }
    out.push('\n');
    let thresholds: Vec<u64> = agg
        .cells
        .first()
        .map(|c| c.thresholds.iter().map(|t| t.threshold).collect())
        .unwrap_or_default();
    for t in thresholds {
        let _ = write!(out, "{:<14}", format!("T = {t}"));
        for c in &agg.cells {
            let s = c.at(t).expect("same thresholds in every cell");
            let cell = format!(
                "{:.2} / {:.2}",
                100.0 * s.precision_mean,
                100.0 * s.recall_mean
            );
            let _ = write!(out, " | {cell:>width$}");
        }
        out.push('\n');
    }
    out
}

impl Report for AggregateResult {
    fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in summary_rows(self) {
            w.serialize(r)?;
        }
        w.flush().map_err(io_err("<summary>"))
    }

    /// The CSV form only carries the summary rows; use JSON for a lossless
    /// round trip.
    fn read_csv<R: std::io::Read>(_input: R) -> Result<Self> {
        Err(Error::InvalidConfig(
            "aggregate results can only be re-read from summary.json".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicate_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..20 {
            for r in 0..100 {
                assert!(seen.insert(replicate_seed(7, c, r)));
            }
        }
        assert_eq!(replicate_seed(7, 3, 4), replicate_seed(7, 3, 4));
        assert_ne!(replicate_seed(7, 3, 4), replicate_seed(8, 3, 4));
    }

    #[test]
    fn config_defaults_and_strictness() {
        let c =
            ExperimentConfig::from_json(r#"{"schema_version": 1, "mode": "setting1"}"#).unwrap();
        assert_eq!(c.lambda, 2);
        assert_eq!(c.thresholds(), vec![2, 20]);
        assert_eq!(c.setting1.identity_counts, vec![30, 58, 111, 220, 440, 880]);
        assert_eq!(c.classifier.resolve().unwrap(), (8631, 0.861));

        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "mode": "setting1", "lambdaa": 2}"#
        )
        .is_err());
        assert!(
            ExperimentConfig::from_json(r#"{"schema_version": 2, "mode": "setting1"}"#).is_err()
        );
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "mode": "setting1", "replicates": 0}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "mode": "setting1", "thresholds": []}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "mode": "setting1", "setting1": {"identity_counts": []}}"#
        )
        .is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "mode": "ingest"}"#).is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"schema_version": 1, "mode": "early_stopping",
                "early_stopping": {"schedule": {"kind": "linear", "start": 0.5, "slope": -0.1}}}"#
        )
        .is_err());
    }

    #[test]
    fn explicit_classifier() {
        let p = ClassifierParams {
            preset: None,
            yf_size: Some(100),
            top1_accuracy: Some(1.0),
            novel_spread: NovelSpread::Uniform,
        };
        assert_eq!(p.resolve().unwrap(), (100, 1.0));
        let p = ClassifierParams {
            preset: None,
            yf_size: Some(100),
            top1_accuracy: None,
            novel_spread: NovelSpread::Uniform,
        };
        assert!(p.resolve().is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap(), 4);
    }
}
