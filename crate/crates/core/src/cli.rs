//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on a runtime error (diagnostic on stderr),
//! 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::attack::{decide, run_attack, AttackConfig, FrequencyTable, OutOfRangePolicy};
use crate::eval::{histogram, pr_sweep, EvalReport};
use crate::harness::{
    format_table, resolve_seed, run_experiment, ExperimentConfig, ExperimentOutput,
};
use crate::identity::{make_setting1_spec, make_setting2_spec, DatasetSpec, EvalMode};
use crate::ingest::{
    load_embeddings, load_membership_manifest, load_prediction_log, write_contact_sheet_csv,
    Report, ReportFormat,
};
use crate::nn::contact_sheet_manifest;
use crate::synthcls::{preset, ClassifierModel, NovelSpread};
use crate::synthgen::GeneratorModel;

#[derive(Debug, Parser)]
#[command(
    name = "ganleak",
    version,
    about = "Identity membership inference against face generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the attack on simulated generator and classifier models.
    Simulate(SimulateArgs),
    /// Score a prediction log against a membership manifest.
    Attack(AttackArgs),
    /// Precision/recall over every threshold for a prediction log.
    PrCurve(LogArgs),
    /// Per-identity prediction counts with membership flags.
    Histogram(LogArgs),
    /// Nearest training instances of the predicted identity for each query.
    Nn(NnArgs),
    /// Run a config-driven experiment grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Classifier preset (vggface2 or casia).
    #[arg(long, default_value = "vggface2", conflicts_with = "yf_size")]
    dataset: String,
    /// Identity space size, with --accuracy, instead of a preset.
    #[arg(long, requires = "accuracy")]
    yf_size: Option<usize>,
    #[arg(long)]
    accuracy: Option<f64>,
    /// Training identities (uniform training set).
    #[arg(long, default_value_t = 220, conflicts_with = "biased")]
    identities: usize,
    #[arg(long, default_value_t = 364)]
    per_identity: u64,
    /// Size of the over-represented subset (biased training set).
    #[arg(long)]
    biased: Option<usize>,
    #[arg(long, default_value_t = 300)]
    biased_per_identity: u64,
    #[arg(long, default_value_t = 2000)]
    unbiased: usize,
    #[arg(long, default_value_t = 20)]
    unbiased_per_identity: u64,
    /// Memorization rate.
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    /// Bias exponent.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Novel identity space size; defaults to |Y_F| minus the members.
    #[arg(long)]
    novel: Option<usize>,
    /// Concentration of per-novel-identity preferences; uniform when omitted.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, default_value_t = 2)]
    lambda: u32,
    /// Comma-separated; defaults to lambda and 10 * lambda.
    #[arg(long, alias = "threshold", value_delimiter = ',')]
    thresholds: Vec<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
    /// Also write the count histogram (CSV) here.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LogArgs {
    /// Prediction log CSV (sample_id,predicted_identity[,confidence]).
    #[arg(long)]
    log: PathBuf,
    /// Membership manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    /// Fail on predicted ids outside the manifest instead of discarding them.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    log: LogArgs,
    #[arg(long, default_value_t = 2)]
    lambda: u32,
    /// Comma-separated; defaults to lambda and 10 * lambda.
    #[arg(long, alias = "threshold", value_delimiter = ',')]
    thresholds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Full,
    Biased,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => EvalMode::Full,
            ModeArg::Biased => EvalMode::Biased,
        }
    }
}

#[derive(Debug, Args)]
struct NnArgs {
    /// Training embeddings (CSV or binary).
    #[arg(long)]
    embeddings: PathBuf,
    /// Queries in prediction-log format.
    #[arg(long)]
    queries: PathBuf,
    /// Embeddings of the queries; defaults to --embeddings.
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long, short, default_value_t = 3)]
    k: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config and the GANLEAK_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config, default `results`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Attack(a) => attack(a),
        Command::PrCurve(a) => {
            let (table, truth) = load_log(&a)?;
            let curve = pr_sweep(&table, &truth, a.mode.into())?;
            emit(&curve, &a.output)
        }
        Command::Histogram(a) => {
            let (table, truth) = load_log(&a)?;
            emit(&histogram(&table, &truth)?, &a.output)
        }
        Command::Nn(a) => nn(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn emit<T: Report>(report: &T, output: &OutputArgs) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    match output.format {
        ReportFormat::Json => report.write_json(&mut buf)?,
        ReportFormat::Csv => report.write_csv(&mut buf)?,
    }
    write_bytes(output.out.as_deref(), &buf)
}

fn write_bytes(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn thresholds_or_default(given: &[u64], lambda: u32) -> Vec<u64> {
    if given.is_empty() {
        vec![AttackConfig::t0(lambda), AttackConfig::t1(lambda)]
    } else {
        given.to_vec()
    }
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let base = match a.yf_size {
        Some(yf) => ClassifierModel::new(yf, a.accuracy.unwrap_or(1.0))?,
        None => {
            let p = preset(&a.dataset)?;
            match a.accuracy {
                Some(acc) => ClassifierModel::new(p.yf_size(), acc)?,
                None => p,
            }
        }
    };
    let yf = base.yf_size();
    let (spec, mode) = match a.biased {
        Some(g1) => (
            make_setting2_spec(
                yf,
                g1,
                a.biased_per_identity,
                a.unbiased,
                a.unbiased_per_identity,
            )?,
            EvalMode::Biased,
        ),
        None => (
            make_setting1_spec(yf, a.identities, a.per_identity)?,
            EvalMode::Full,
        ),
    };
    let spec = Arc::new(spec);
    let generator = GeneratorModel::new(Arc::clone(&spec), a.rho, a.gamma, a.novel)?;
    let classifier = match a.kappa {
        Some(kappa) => ClassifierModel::with_spread(
            yf,
            base.top1_accuracy(),
            NovelSpread::Concentrated {
                kappa,
                seed: a.seed.unwrap_or(0),
            },
            generator.novel_space_size(),
        )?,
        None => base,
    };
    let seed = resolve_seed(a.seed, None)?;
    let config = AttackConfig::new(a.lambda, yf, 0)?;
    let outcome = run_attack(&generator, &classifier, &config, seed)?;
    let reports = thresholds_or_default(&a.thresholds, a.lambda)
        .into_iter()
        .map(|t| {
            EvalReport::evaluate(
                &decide(&outcome.table, t),
                &spec,
                mode,
                a.lambda,
                Some(seed),
            )
        })
        .collect::<crate::Result<Vec<_>>>()?;
    if let Some(path) = &a.histogram {
        crate::ingest::write_report(&histogram(&outcome.table, &spec)?, path, ReportFormat::Csv)?;
    }
    emit(&reports, &a.output)
}

fn load_log(a: &LogArgs) -> anyhow::Result<(FrequencyTable, DatasetSpec)> {
    let truth = load_membership_manifest(&a.manifest)?;
    let log = load_prediction_log(&a.log)?;
    let policy = if a.strict {
        OutOfRangePolicy::Strict
    } else {
        OutOfRangePolicy::Discard
    };
    let table = log.to_table(truth.yf_size(), policy)?;
    if table.discarded() > 0 {
        eprintln!(
            "warning: discarded {} predictions outside the {} manifest identities",
            table.discarded(),
            truth.yf_size()
        );
    }
    Ok((table, truth))
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    if a.lambda == 0 {
        bail!("lambda must be at least 1");
    }
    let (table, truth) = load_log(&a.log)?;
    let reports = thresholds_or_default(&a.thresholds, a.lambda)
        .into_iter()
        .map(|t| {
            EvalReport::evaluate(
                &decide(&table, t),
                &truth,
                a.log.mode.into(),
                a.lambda,
                None,
            )
        })
        .collect::<crate::Result<Vec<_>>>()?;
    emit(&reports, &a.log.output)
}

fn nn(a: NnArgs) -> anyhow::Result<()> {
    let set = load_embeddings(&a.embeddings)?;
    let query_set = match &a.query_embeddings {
        Some(p) => Some(load_embeddings(p)?),
        None => None,
    };
    let queries = load_prediction_log(&a.queries)?.queries()?;
    let sheet = contact_sheet_manifest(&queries, &set, query_set.as_ref().unwrap_or(&set), a.k)?;
    for q in &sheet.truncated {
        eprintln!("warning: fewer than {} candidates for query `{q}`", a.k);
    }
    let mut buf = Vec::new();
    write_contact_sheet_csv(&sheet, &mut buf)?;
    write_bytes(a.out.as_deref(), &buf)
}

fn experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let seed = resolve_seed(a.seed, config.master_seed)?;
    let out = a
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let output = run_experiment(&config, seed, &out)?;
    let dir = out.join(config.mode.as_str());
    match output {
        ExperimentOutput::Grid(agg) => print!("{}", format_table(&agg)),
        ExperimentOutput::EarlyStopping(es) => print!("{}", format_table(&es.aggregate)),
        ExperimentOutput::Ingest(res) => {
            for r in &res.reports {
                println!(
                    "T = {}: precision {} recall {:.4} f1 {:.4}",
                    r.threshold,
                    r.precision
                        .map_or("undefined".to_string(), |p| format!("{p:.4}")),
                    r.recall,
                    r.f1
                );
            }
        }
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}
