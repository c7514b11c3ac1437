//! Identity spaces, dataset splits and ground-truth membership.
//!
//! Identities known to the attacker's face classifier are dense indices in
//! `[0, yf_size)`. The generator's training identities are a subset of that
//! range (the worst case where every training identity is also known to the
//! attacker), optionally split into a heavily represented "biased" subset and
//! the remainder.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense identity index, stable within one experiment.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct IdentityId(pub u32);

impl IdentityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for IdentityId {
    fn from(v: u32) -> Self {
        IdentityId(v)
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which identities count as ground-truth positives during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Positives are all training identities.
    #[default]
    Full,
    /// Positives are the biased subset only; the other training identities
    /// are treated as negatives.
    Biased,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Full => "full",
            EvalMode::Biased => "biased",
        })
    }
}

/// Identity content of the generator's training set, as seen from the
/// attacker's identity space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    yf_size: usize,
    /// Sorted, unique.
    members: Vec<IdentityId>,
    /// Sorted, unique, subset of `members`. `None` when the dataset has no
    /// designated biased subset.
    biased_members: Option<Vec<IdentityId>>,
    /// Training samples per member, aligned with `members`.
    samples: Vec<u64>,
    total_samples: u64,
    member_mask: Vec<bool>,
    biased_mask: Vec<bool>,
}

impl DatasetSpec {
    /// Builds a validated spec from `(member, sample_count)` pairs.
    ///
    /// Members may be given in any order but must be unique, in range and
    /// have at least one sample each. `biased` must be a subset of the
    /// members.
    pub fn new(
        yf_size: usize,
        members: impl IntoIterator<Item = (IdentityId, u64)>,
        biased: Option<Vec<IdentityId>>,
    ) -> Result<Self> {
        if yf_size == 0 {
            return Err(Error::InvalidSpec("identity space is empty".into()));
        }
        let mut pairs: Vec<(IdentityId, u64)> = members.into_iter().collect();
        if pairs.is_empty() {
            return Err(Error::InvalidSpec(
                "no training identity overlaps the known identity space".into(),
            ));
        }
        pairs.sort_unstable_by_key(|&(id, _)| id);

        let mut member_mask = vec![false; yf_size];
        for &(id, n) in &pairs {
            if id.index() >= yf_size {
                return Err(Error::IdentityOutOfRange { id, yf_size });
            }
            if member_mask[id.index()] {
                return Err(Error::InvalidSpec(format!(
                    "duplicate member identity {id}"
                )));
            }
            if n == 0 {
                return Err(Error::InvalidSpec(format!(
                    "member identity {id} has no training samples"
                )));
            }
            member_mask[id.index()] = true;
        }

        let mut biased_mask = vec![false; yf_size];
        let biased_members = match biased {
            None => None,
            Some(mut ids) => {
                ids.sort_unstable();
                for (i, &id) in ids.iter().enumerate() {
                    if id.index() >= yf_size || !member_mask[id.index()] {
                        return Err(Error::InvalidSpec(format!(
                            "biased identity {id} is not a training identity"
                        )));
                    }
                    if i > 0 && ids[i - 1] == id {
                        return Err(Error::InvalidSpec(format!(
                            "duplicate biased identity {id}"
                        )));
                    }
                    biased_mask[id.index()] = true;
                }
                Some(ids)
            }
        };

        let total_samples = pairs.iter().map(|&(_, n)| n).sum();
        let (members, samples) = pairs.into_iter().unzip();
        Ok(DatasetSpec {
            yf_size,
            members,
            biased_members,
            samples,
            total_samples,
            member_mask,
            biased_mask,
        })
    }

    pub fn yf_size(&self) -> usize {
        self.yf_size
    }

    pub fn members(&self) -> &[IdentityId] {
        &self.members
    }

    pub fn biased_members(&self) -> Option<&[IdentityId]> {
        self.biased_members.as_deref()
    }

    /// Training sample counts aligned with [`members`](Self::members).
    pub fn member_samples(&self) -> &[u64] {
        &self.samples
    }

    pub fn samples_of(&self, id: IdentityId) -> Option<u64> {
        self.members
            .binary_search(&id)
            .ok()
            .map(|i| self.samples[i])
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples
    }

    pub fn is_member(&self, id: IdentityId) -> bool {
        self.member_mask.get(id.index()).copied().unwrap_or(false)
    }

    pub fn is_biased(&self, id: IdentityId) -> bool {
        self.biased_mask.get(id.index()).copied().unwrap_or(false)
    }

    /// Ground-truth positives for the given evaluation mode.
    pub fn positives(&self, mode: EvalMode) -> Result<&[IdentityId]> {
        match mode {
            EvalMode::Full => Ok(&self.members),
            EvalMode::Biased => self.biased_members().ok_or(Error::NoBiasedSubset),
        }
    }

    /// Membership mask over `[0, yf_size)` for the given evaluation mode.
    pub fn positive_mask(&self, mode: EvalMode) -> Result<&[bool]> {
        match mode {
            EvalMode::Full => Ok(&self.member_mask),
            EvalMode::Biased => {
                if self.biased_members.is_some() {
                    Ok(&self.biased_mask)
                } else {
                    Err(Error::NoBiasedSubset)
                }
            }
        }
    }
}

/// Uniform, unbiased training set made of the first `yg_size` identities.
pub fn make_setting1_spec(yf_size: usize, yg_size: usize, per_id: u64) -> Result<DatasetSpec> {
    if yg_size == 0 {
        return Err(Error::InvalidSpec(
            "at least one training identity is required".into(),
        ));
    }
    if yg_size > yf_size {
        return Err(Error::InvalidSpec(format!(
            "{yg_size} training identities exceed the {yf_size} known identities"
        )));
    }
    if per_id == 0 {
        return Err(Error::InvalidSpec(
            "samples per identity must be at least 1".into(),
        ));
    }
    DatasetSpec::new(
        yf_size,
        (0..yg_size as u32).map(|i| (IdentityId(i), per_id)),
        None,
    )
}

/// Biased training set: the first `yg1_size` identities carry `n1_per_id`
/// samples each and form the biased subset, the next `yg2_size` carry
/// `n2_per_id` each.
pub fn make_setting2_spec(
    yf_size: usize,
    yg1_size: usize,
    n1_per_id: u64,
    yg2_size: usize,
    n2_per_id: u64,
) -> Result<DatasetSpec> {
    if n1_per_id <= n2_per_id {
        return Err(Error::NoBias {
            n1: n1_per_id,
            n2: n2_per_id,
        });
    }
    if n2_per_id == 0 {
        return Err(Error::InvalidSpec(
            "samples per identity must be at least 1".into(),
        ));
    }
    if yg1_size == 0 {
        return Err(Error::InvalidSpec(
            "the biased subset must not be empty".into(),
        ));
    }
    if yg1_size + yg2_size > yf_size {
        return Err(Error::InvalidSpec(format!(
            "{} training identities exceed the {yf_size} known identities",
            yg1_size + yg2_size
        )));
    }
    let g1 = yg1_size as u32;
    let g2 = yg2_size as u32;
    let members = (0..g1)
        .map(|i| (IdentityId(i), n1_per_id))
        .chain((g1..g1 + g2).map(|i| (IdentityId(i), n2_per_id)));
    DatasetSpec::new(yf_size, members, Some((0..g1).map(IdentityId).collect()))
}

/// Precision of an attacker that flags identities at random: the fraction of
/// known identities that are positives, whatever the recall.
pub fn random_baseline_precision(spec: &DatasetSpec, mode: EvalMode) -> Result<f64> {
    let positives = spec.positives(mode)?.len();
    Ok(baseline_ratio(positives, spec.yf_size()))
}

/// Shared by the baseline and the `T = 0` end of a precision-recall sweep so
/// both produce bit-identical values.
#[inline]
pub(crate) fn baseline_ratio(positives: usize, yf_size: usize) -> f64 {
    positives as f64 / yf_size as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn setting1_sizes() {
        let spec = make_setting1_spec(8631, 30, 333).unwrap();
        assert_eq!(spec.members().len(), 30);
        assert_eq!(spec.total_samples(), 9990);
        assert!(spec.biased_members().is_none());

        let spec = make_setting1_spec(8631, 880, 364).unwrap();
        assert_eq!(spec.total_samples(), 320_320);

        let spec = make_setting1_spec(10, 10, 1).unwrap();
        assert_eq!(spec.members().len(), 10);
        assert_eq!(spec.total_samples(), 10);
        assert_eq!(
            random_baseline_precision(&spec, EvalMode::Full).unwrap(),
            1.0
        );
    }

    #[test]
    fn setting1_rejects_bad_sizes() {
        assert!(make_setting1_spec(10, 0, 1).is_err());
        assert!(make_setting1_spec(10, 11, 1).is_err());
        assert!(make_setting1_spec(10, 5, 0).is_err());
    }

    #[test]
    fn setting2_sizes() {
        let spec = make_setting2_spec(8631, 20, 300, 2000, 20).unwrap();
        let n1: u64 = spec
            .biased_members()
            .unwrap()
            .iter()
            .map(|&id| spec.samples_of(id).unwrap())
            .sum();
        assert_eq!(n1, 6000);
        assert_eq!(spec.total_samples() - n1, 40_000);

        let spec = make_setting2_spec(8631, 160, 300, 2000, 20).unwrap();
        assert_eq!(spec.total_samples(), 88_000);

        let spec = make_setting2_spec(5, 1, 2, 1, 1).unwrap();
        assert_eq!(spec.members(), &[IdentityId(0), IdentityId(1)]);
        assert_eq!(spec.biased_members().unwrap(), &[IdentityId(0)]);
    }

    #[test]
    fn setting2_requires_bias() {
        assert!(matches!(
            make_setting2_spec(100, 2, 5, 3, 5),
            Err(Error::NoBias { n1: 5, n2: 5 })
        ));
        assert!(matches!(
            make_setting2_spec(100, 2, 4, 3, 5),
            Err(Error::NoBias { .. })
        ));
        assert!(matches!(
            make_setting2_spec(4, 2, 5, 3, 1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn baselines() {
        let spec = make_setting1_spec(8631, 30, 333).unwrap();
        let b = random_baseline_precision(&spec, EvalMode::Full).unwrap();
        assert!((b - 0.003476).abs() < 5e-7);
        assert!(random_baseline_precision(&spec, EvalMode::Biased).is_err());

        let spec = make_setting2_spec(8631, 20, 300, 2000, 20).unwrap();
        let b = random_baseline_precision(&spec, EvalMode::Biased).unwrap();
        assert!((b - 0.002317).abs() < 5e-7);
        let full = random_baseline_precision(&spec, EvalMode::Full).unwrap();
        assert_eq!(full, 2020.0 / 8631.0);
    }

    #[test]
    fn spec_validation() {
        let id = IdentityId;
        assert!(DatasetSpec::new(5, vec![], None).is_err());
        assert!(DatasetSpec::new(5, vec![(id(5), 1)], None).is_err());
        assert!(DatasetSpec::new(5, vec![(id(1), 1), (id(1), 2)], None).is_err());
        assert!(DatasetSpec::new(5, vec![(id(1), 0)], None).is_err());
        assert!(DatasetSpec::new(5, vec![(id(1), 1)], Some(vec![id(2)])).is_err());
        let spec = DatasetSpec::new(5, vec![(id(3), 2), (id(1), 4)], Some(vec![id(3)])).unwrap();
        assert_eq!(spec.members(), &[id(1), id(3)]);
        assert_eq!(spec.member_samples(), &[4, 2]);
        assert!(spec.is_biased(id(3)) && !spec.is_biased(id(1)));
        assert!(!spec.is_member(id(40)));
    }
}
