//! The identity membership attack: generate `K = lambda * |Y_F|` samples,
//! identify each one, count predictions per known identity and flag the
//! identities whose count reaches a frequency threshold.
//!
//! One frequency table answers the query for every known identity at once;
//! the single-identity form of the attack is a lookup into it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::IdentityId;
use crate::synthcls::{classify, ClassifierModel};
use crate::synthgen::{sample_identity, GeneratorModel};

/// Draws per independently seeded partition of a simulated attack.
pub const PARTITION_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Samples generated per known identity.
    pub lambda: u32,
    /// Total generations.
    pub k: u64,
    pub threshold: u64,
}

impl AttackConfig {
    /// `K = lambda * yf_size`.
    pub fn new(lambda: u32, yf_size: usize, threshold: u64) -> Result<Self> {
        if lambda == 0 {
            return Err(Error::InvalidAttack("lambda must be at least 1".into()));
        }
        if yf_size == 0 {
            return Err(Error::InvalidAttack("identity space is empty".into()));
        }
        Ok(AttackConfig {
            lambda,
            k: u64::from(lambda) * yf_size as u64,
            threshold,
        })
    }

    /// Conservative-towards-recall threshold `T0 = lambda`.
    pub fn t0(lambda: u32) -> u64 {
        u64::from(lambda)
    }

    /// Conservative-towards-precision threshold `T1 = 10 lambda`.
    pub fn t1(lambda: u32) -> u64 {
        10 * u64::from(lambda)
    }

    pub fn with_threshold(self, threshold: u64) -> Self {
        AttackConfig { threshold, ..self }
    }
}

/// What to do with predicted identities outside `[0, yf_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfRangePolicy {
    /// Count them as discarded.
    #[default]
    Discard,
    Strict,
}

/// Per-identity prediction counts `k_y` over one batch of generations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<u64>,
    /// Number of generations, including discarded ones.
    total: u64,
    discarded: u64,
}

impl FrequencyTable {
    pub fn zeros(yf_size: usize) -> Self {
        FrequencyTable {
            counts: vec![0; yf_size],
            total: 0,
            discarded: 0,
        }
    }

    /// Builds a table from raw counts; `total` is their sum.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        FrequencyTable {
            counts,
            total,
            discarded: 0,
        }
    }

    pub fn yf_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, id: IdentityId) -> u64 {
        self.counts.get(id.index()).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Adds one prediction. Out-of-range ids are discarded or rejected per
    /// `policy`.
    pub fn record(&mut self, id: IdentityId, policy: OutOfRangePolicy) -> Result<()> {
        match self.counts.get_mut(id.index()) {
            Some(c) => *c += 1,
            None => match policy {
                OutOfRangePolicy::Discard => self.discarded += 1,
                OutOfRangePolicy::Strict => {
                    return Err(Error::IdentityOutOfRange {
                        id,
                        yf_size: self.counts.len(),
                    })
                }
            },
        }
        self.total += 1;
        Ok(())
    }

    /// Adds another table over the same identity space.
    pub fn merge(&mut self, other: &FrequencyTable) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::DimensionMismatch(format!(
                "cannot merge tables over {} and {} identities",
                self.counts.len(),
                other.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.discarded += other.discarded;
        Ok(())
    }
}

/// Identities flagged as training members at one threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSet {
    /// Sorted ascending.
    pub positives: Vec<IdentityId>,
    pub threshold: u64,
    pub yf_size: usize,
}

impl DecisionSet {
    pub fn contains(&self, id: IdentityId) -> bool {
        self.positives.binary_search(&id).is_ok()
    }
}

/// Counts predictions, rejecting out-of-range ids.
pub fn accumulate<I>(predictions: I, yf_size: usize) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = IdentityId>,
{
    accumulate_with_policy(predictions, yf_size, OutOfRangePolicy::Strict)
}

pub fn accumulate_with_policy<I>(
    predictions: I,
    yf_size: usize,
    policy: OutOfRangePolicy,
) -> Result<FrequencyTable>
where
    I: IntoIterator<Item = IdentityId>,
{
    let mut table = FrequencyTable::zeros(yf_size);
    for id in predictions {
        table.record(id, policy)?;
    }
    Ok(table)
}

/// Flags every identity with `k_y >= threshold`.
pub fn decide(table: &FrequencyTable, threshold: u64) -> DecisionSet {
    let positives = table
        .counts
        .iter()
        .enumerate()
        .filter(|&(_, &k)| k >= threshold)
        .map(|(i, _)| IdentityId(i as u32))
        .collect();
    DecisionSet {
        positives,
        threshold,
        yf_size: table.yf_size(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackOutcome {
    pub table: FrequencyTable,
    pub decisions: DecisionSet,
}

/// Checks that a generator and classifier can be chained.
pub fn check_compatible(generator: &GeneratorModel, classifier: &ClassifierModel) -> Result<()> {
    let yf = generator.spec().yf_size();
    if yf != classifier.yf_size() {
        return Err(Error::DimensionMismatch(format!(
            "generator spec covers {yf} known identities, classifier covers {}",
            classifier.yf_size()
        )));
    }
    if let Some(cap) = classifier.novel_capacity() {
        if generator.novel_space_size() > cap {
            return Err(Error::DimensionMismatch(format!(
                "generator emits {} novel identities, classifier preferences cover {cap}",
                generator.novel_space_size()
            )));
        }
    }
    Ok(())
}

/// Simulated frequency table over `k` generations.
///
/// Draws are split into partitions of [`PARTITION_SIZE`], each with its own
/// ChaCha stream of `master_seed`, so the result does not depend on how many
/// worker threads run.
pub fn simulate_counts(
    generator: &GeneratorModel,
    classifier: &ClassifierModel,
    k: u64,
    master_seed: u64,
) -> Result<FrequencyTable> {
    check_compatible(generator, classifier)?;
    let yf = classifier.yf_size();
    let partitions = k.div_ceil(PARTITION_SIZE);
    let counts = (0..partitions)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(p);
            let n = PARTITION_SIZE.min(k - p * PARTITION_SIZE);
            let mut local = vec![0u64; yf];
            for _ in 0..n {
                let source = sample_identity(generator, &mut rng);
                local[classify(classifier, source, &mut rng).index()] += 1;
            }
            local
        })
        .reduce(
            || vec![0u64; yf],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    Ok(FrequencyTable {
        counts,
        total: k,
        discarded: 0,
    })
}

/// Runs the attack end to end on simulated models.
pub fn run_attack(
    generator: &GeneratorModel,
    classifier: &ClassifierModel,
    config: &AttackConfig,
    master_seed: u64,
) -> Result<AttackOutcome> {
    if config.k == 0 {
        return Err(Error::InvalidAttack("K must be at least 1".into()));
    }
    let table = simulate_counts(generator, classifier, config.k, master_seed)?;
    let decisions = decide(&table, config.threshold);
    Ok(AttackOutcome { table, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::make_setting1_spec;

    fn ids(v: &[u32]) -> Vec<IdentityId> {
        v.iter().copied().map(IdentityId).collect()
    }

    #[test]
    fn accumulate_examples() {
        let t = accumulate(ids(&[1, 1, 2]), 3).unwrap();
        assert_eq!(t.counts(), &[0, 2, 1]);
        assert_eq!(t.total(), 3);

        let t = accumulate(Vec::new(), 3).unwrap();
        assert_eq!(t.counts(), &[0, 0, 0]);
        assert_eq!(t.total(), 0);

        assert!(matches!(
            accumulate(ids(&[0, 3]), 3),
            Err(Error::IdentityOutOfRange { .. })
        ));
        let t = accumulate_with_policy(ids(&[0, 3, 9]), 3, OutOfRangePolicy::Discard).unwrap();
        assert_eq!((t.total(), t.discarded()), (3, 2));
        assert_eq!(t.counts().iter().sum::<u64>() + t.discarded(), t.total());
    }

    #[test]
    fn decide_examples() {
        let t = FrequencyTable::from_counts(vec![0, 2, 1]);
        assert_eq!(decide(&t, 2).positives, ids(&[1]));
        assert_eq!(decide(&t, 0).positives, ids(&[0, 1, 2]));
        assert!(decide(&t, 3).positives.is_empty());
    }

    #[test]
    fn config_derives_k() {
        let c = AttackConfig::new(2, 8631, AttackConfig::t0(2)).unwrap();
        assert_eq!(c.k, 17_262);
        assert_eq!(c.threshold, 2);
        assert_eq!(AttackConfig::t1(2), 20);
        assert!(AttackConfig::new(0, 10, 1).is_err());
    }

    #[test]
    fn simulated_run_is_deterministic_and_conserving() {
        let spec = make_setting1_spec(500, 20, 10).unwrap();
        let g = GeneratorModel::new(spec, 0.4, 1.0, None).unwrap();
        let c = ClassifierModel::new(500, 0.8).unwrap();
        let cfg = AttackConfig::new(3, 500, 3).unwrap();
        let a = run_attack(&g, &c, &cfg, 9).unwrap();
        let b = run_attack(&g, &c, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.table.counts().iter().sum::<u64>(), 1500);
        let other = run_attack(&g, &c, &cfg, 10).unwrap();
        assert_ne!(a.table, other.table);
    }

    #[test]
    fn mismatched_dimensions() {
        let spec = make_setting1_spec(100, 10, 1).unwrap();
        let g = GeneratorModel::new(spec, 0.4, 1.0, None).unwrap();
        let c = ClassifierModel::new(99, 0.8).unwrap();
        let cfg = AttackConfig::new(2, 100, 2).unwrap();
        assert!(matches!(
            run_attack(&g, &c, &cfg, 1),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
