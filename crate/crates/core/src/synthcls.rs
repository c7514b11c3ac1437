//! Parametric stand-in for the attacker's face identification network.
//!
//! A training identity is recognised with probability `top1_accuracy`;
//! errors land uniformly on the other known identities. A novel face is
//! absorbed into the known identity space either uniformly or through a
//! fixed per-novel-identity preference row drawn from a symmetric
//! Dirichlet, so the same fake person keeps resembling the same known
//! people across batches.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::IdentityId;
use crate::synthgen::SourceIdentity;

/// How novel faces spread over known identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NovelSpread {
    #[default]
    Uniform,
    /// Per-novel-identity rows drawn from `Dirichlet(kappa)` with a
    /// dedicated seed.
    Concentrated { kappa: f64, seed: u64 },
}

#[derive(Debug)]
struct PreferenceTable {
    kappa: f64,
    seed: u64,
    yf_size: usize,
    /// Cumulative rows, materialized on first use.
    rows: Vec<OnceLock<Box<[f64]>>>,
}

impl PreferenceTable {
    fn new(kappa: f64, seed: u64, yf_size: usize, novel_count: usize) -> Self {
        PreferenceTable {
            kappa,
            seed,
            yf_size,
            rows: (0..novel_count).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Row `j` is a pure function of `(seed, j, yf_size, kappa)`.
    fn probabilities(&self, j: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(j));
        // Gamma(k) = Gamma(k + 1) * U^(1/k); log-space keeps tiny kappa from
        // underflowing every component to zero.
        let boosted = Gamma::new(self.kappa + 1.0, 1.0).expect("kappa validated");
        let logs: Vec<f64> = (0..self.yf_size)
            .map(|_| {
                let g: f64 = boosted.sample(&mut rng);
                let u: f64 = rng.random::<f64>();
                g.ln() + (1.0 - u).ln() / self.kappa
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        p
    }

    fn cumulative(&self, j: u32) -> &[f64] {
        self.rows[j as usize].get_or_init(|| {
            let mut acc = 0.0;
            self.probabilities(j)
                .into_iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
    }
}

impl Clone for PreferenceTable {
    fn clone(&self) -> Self {
        PreferenceTable::new(self.kappa, self.seed, self.yf_size, self.rows.len())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    yf_size: usize,
    top1_accuracy: f64,
    novel_spread: NovelSpread,
    table: Option<PreferenceTable>,
}

impl ClassifierModel {
    /// Classifier with a uniform novel spread.
    pub fn new(yf_size: usize, top1_accuracy: f64) -> Result<Self> {
        Self::with_spread(yf_size, top1_accuracy, NovelSpread::Uniform, 0)
    }

    /// `novel_count` bounds the novel identities this classifier can absorb;
    /// it only matters for the concentrated spread.
    pub fn with_spread(
        yf_size: usize,
        top1_accuracy: f64,
        novel_spread: NovelSpread,
        novel_count: usize,
    ) -> Result<Self> {
        if yf_size == 0 || yf_size > u32::MAX as usize {
            return Err(Error::InvalidClassifier(format!(
                "identity space size {yf_size} is out of range"
            )));
        }
        if !(top1_accuracy > 0.0 && top1_accuracy <= 1.0) {
            return Err(Error::InvalidClassifier(format!(
                "top-1 accuracy {top1_accuracy} is outside (0, 1]"
            )));
        }
        if yf_size == 1 && top1_accuracy < 1.0 {
            return Err(Error::InvalidClassifier(
                "a single-identity classifier cannot misclassify".into(),
            ));
        }
        let table = match novel_spread {
            NovelSpread::Uniform => None,
            NovelSpread::Concentrated { kappa, seed } => {
                if !(kappa > 0.0 && kappa.is_finite()) {
                    return Err(Error::InvalidClassifier(format!(
                        "concentration {kappa} must be positive and finite"
                    )));
                }
                Some(PreferenceTable::new(kappa, seed, yf_size, novel_count))
            }
        };
        Ok(ClassifierModel {
            yf_size,
            top1_accuracy,
            novel_spread,
            table,
        })
    }

    pub fn yf_size(&self) -> usize {
        self.yf_size
    }

    pub fn top1_accuracy(&self) -> f64 {
        self.top1_accuracy
    }

    pub fn novel_spread(&self) -> NovelSpread {
        self.novel_spread
    }

    /// Largest novel space this classifier can handle, `None` if unbounded.
    pub fn novel_capacity(&self) -> Option<usize> {
        self.table.as_ref().map(|t| t.rows.len())
    }

    /// Prediction distribution of novel identity `j` over `[0, yf_size)`.
    pub fn novel_preferences(&self, j: u32) -> Result<Vec<f64>> {
        match &self.table {
            None => Ok(vec![1.0 / self.yf_size as f64; self.yf_size]),
            Some(t) if (j as usize) < t.rows.len() => Ok(t.probabilities(j)),
            Some(t) => Err(Error::DimensionMismatch(format!(
                "novel identity {j} exceeds the preference table size {}",
                t.rows.len()
            ))),
        }
    }
}

/// Predicted identity for a generated sample.
///
/// Panics if a concentrated-spread classifier receives a novel index beyond
/// its table; [`crate::attack::run_attack`] checks this up front.
pub fn classify<R: Rng + ?Sized>(
    model: &ClassifierModel,
    source: SourceIdentity,
    rng: &mut R,
) -> IdentityId {
    match source {
        SourceIdentity::Member(y) => {
            if rng.random::<f64>() < model.top1_accuracy {
                y
            } else {
                let r = rng.random_range(0..model.yf_size as u32 - 1);
                IdentityId(if r >= y.0 { r + 1 } else { r })
            }
        }
        SourceIdentity::Novel(j) => match &model.table {
            None => IdentityId(rng.random_range(0..model.yf_size as u32)),
            Some(table) => {
                let cdf = table.cumulative(j);
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                IdentityId(i as u32)
            }
        },
    }
}

/// Accuracy and identity-space size of the reference classifiers:
/// `vggface2` (86.1%, 8631 identities) and `casia` (94.7%, 1292 identities).
pub fn preset(dataset_name: &str) -> Result<ClassifierModel> {
    match dataset_name.to_ascii_lowercase().as_str() {
        "vggface2" => ClassifierModel::new(8631, 0.861),
        "casia" => ClassifierModel::new(1292, 0.947),
        _ => Err(Error::UnknownPreset(dataset_name.to_string())),
    }
}
