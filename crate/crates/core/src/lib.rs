//! Identity membership inference against face generators.
//!
//! Generate `K = lambda * |Y_F|` faces, label each with a face classifier
//! trained on the known identity space `Y_F`, and flag every identity
//! predicted at least `T` times as a probable member of the generator's
//! training set. Generator and classifier can be real (through prediction
//! logs) or simulated, which lets the attack be studied over controlled
//! grids of dataset diversity, identity bias and training length.
//!
//! ```
//! use std::sync::Arc;
//! use ganleak::synthcls::preset;
//! use ganleak::{make_setting1_spec, run_attack, AttackConfig, EvalMode, EvalReport, GeneratorModel};
//!
//! # fn main() -> ganleak::Result<()> {
//! let spec = Arc::new(make_setting1_spec(8631, 220, 364)?);
//! let generator = GeneratorModel::new(Arc::clone(&spec), 0.3, 1.0, None)?;
//! let classifier = preset("vggface2")?;
//! let config = AttackConfig::new(2, 8631, AttackConfig::t1(2))?;
//! let outcome = run_attack(&generator, &classifier, &config, 7)?;
//! let report = EvalReport::evaluate(&outcome.decisions, &spec, EvalMode::Full, 2, Some(7))?;
//! assert_eq!(report.precision, Some(1.0));
//! # Ok(())
//! # }
//! ```

pub mod attack;
pub mod cli;
pub mod error;
pub mod eval;
pub mod harness;
pub mod identity;
pub mod ingest;
pub mod nn;
pub mod stats;
pub mod synthcls;
pub mod synthgen;

pub use attack::{
    accumulate, decide, run_attack, simulate_counts, AttackConfig, AttackOutcome, DecisionSet,
    FrequencyTable, OutOfRangePolicy,
};
pub use error::{Error, Result};
pub use eval::{f1, histogram, pr_sweep, precision_recall, EvalReport, PrCurve};
pub use identity::{
    make_setting1_spec, make_setting2_spec, random_baseline_precision, DatasetSpec, EvalMode,
    IdentityId,
};
pub use nn::{contact_sheet_manifest, nearest_intra_identity, EmbeddingSet};
pub use synthcls::{classify, ClassifierModel, NovelSpread};
pub use synthgen::{
    memorization_schedule, sample_batch, sample_identity, GeneratorModel, MemorizationSchedule,
    SourceIdentity,
};
