//! Experimenter-side scoring of attack decisions against ground truth.

use serde::{Deserialize, Serialize};

use crate::attack::{DecisionSet, FrequencyTable};
use crate::error::{Error, Result};
use crate::identity::{baseline_ratio, DatasetSpec, EvalMode, IdentityId};

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// F1 with an undefined precision mapped to 0. The flag is set when that
/// happened.
pub fn f1_or_flag(precision: Option<f64>, recall: f64) -> (f64, bool) {
    match precision {
        Some(p) => (f1(p, recall), false),
        None => (0.0, true),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    /// `None` when nothing was flagged.
    pub precision: Option<f64>,
    pub recall: f64,
    pub true_positives: usize,
    pub positives: usize,
    pub truth_size: usize,
}

pub fn precision_recall(
    decisions: &DecisionSet,
    truth: &DatasetSpec,
    mode: EvalMode,
) -> Result<PrecisionRecall> {
    if decisions.yf_size != truth.yf_size() {
        return Err(Error::DimensionMismatch(format!(
            "decisions cover {} identities, ground truth covers {}",
            decisions.yf_size,
            truth.yf_size()
        )));
    }
    let mask = truth.positive_mask(mode)?;
    let truth_size = truth.positives(mode)?.len();
    let mut true_positives = 0;
    for &id in &decisions.positives {
        match mask.get(id.index()) {
            Some(true) => true_positives += 1,
            Some(false) => {}
            None => {
                return Err(Error::IdentityOutOfRange {
                    id,
                    yf_size: truth.yf_size(),
                })
            }
        }
    }
    Ok(ratios(
        true_positives,
        decisions.positives.len(),
        truth_size,
    ))
}

fn ratios(true_positives: usize, positives: usize, truth_size: usize) -> PrecisionRecall {
    PrecisionRecall {
        precision: (positives > 0).then(|| baseline_ratio(true_positives, positives)),
        recall: true_positives as f64 / truth_size as f64,
        true_positives,
        positives,
        truth_size,
    }
}

/// Scores of one attack at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lambda: u32,
    pub threshold: u64,
    /// `null` when nothing was flagged.
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: f64,
    pub baseline: f64,
    pub mode: EvalMode,
    pub seed: Option<u64>,
    pub positives_count: usize,
    pub true_positives: usize,
    pub truth_size: usize,
    /// Set when precision is undefined and F1 was reported as 0.
    pub precision_undefined: bool,
}

impl EvalReport {
    pub fn evaluate(
        decisions: &DecisionSet,
        truth: &DatasetSpec,
        mode: EvalMode,
        lambda: u32,
        seed: Option<u64>,
    ) -> Result<Self> {
        let pr = precision_recall(decisions, truth, mode)?;
        let (f1, precision_undefined) = f1_or_flag(pr.precision, pr.recall);
        Ok(EvalReport {
            lambda,
            threshold: decisions.threshold,
            precision: pr.precision,
            recall: pr.recall,
            f1,
            baseline: baseline_ratio(pr.truth_size, truth.yf_size()),
            mode,
            seed,
            positives_count: pr.positives,
            true_positives: pr.true_positives,
            truth_size: pr.truth_size,
            precision_undefined,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: u64,
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: f64,
    pub positives_count: usize,
    pub true_positives: usize,
}

/// Precision and recall at every integer threshold from 0 to
/// `max k_y + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub mode: EvalMode,
    pub baseline: f64,
    pub truth_size: usize,
    pub yf_size: usize,
    pub points: Vec<PrPoint>,
}

pub fn pr_sweep(table: &FrequencyTable, truth: &DatasetSpec, mode: EvalMode) -> Result<PrCurve> {
    if table.yf_size() != truth.yf_size() {
        return Err(Error::DimensionMismatch(format!(
            "table covers {} identities, ground truth covers {}",
            table.yf_size(),
            truth.yf_size()
        )));
    }
    let mask = truth.positive_mask(mode)?;
    let truth_size = truth.positives(mode)?.len();
    let max = table.max_count() as usize;

    // Identities (all / positive) per exact count, then suffix sums give the
    // flagged sets at every threshold in one pass.
    let mut all_at = vec![0usize; max + 2];
    let mut pos_at = vec![0usize; max + 2];
    for (i, &k) in table.counts().iter().enumerate() {
        all_at[k as usize] += 1;
        if mask[i] {
            pos_at[k as usize] += 1;
        }
    }
    let mut points = Vec::with_capacity(max + 2);
    let (mut flagged, mut hits) = (0usize, 0usize);
    for t in (0..=max + 1).rev() {
        flagged += all_at[t];
        hits += pos_at[t];
        let pr = ratios(hits, flagged, truth_size);
        let (f1, _) = f1_or_flag(pr.precision, pr.recall);
        points.push(PrPoint {
            threshold: t as u64,
            precision: pr.precision,
            recall: pr.recall,
            f1,
            positives_count: flagged,
            true_positives: hits,
        });
    }
    points.reverse();
    Ok(PrCurve {
        mode,
        baseline: baseline_ratio(truth_size, truth.yf_size()),
        truth_size,
        yf_size: truth.yf_size(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub identity_id: IdentityId,
    pub count: u64,
    #[serde(with = "flag01")]
    pub is_member: bool,
    #[serde(with = "flag01")]
    pub is_biased: bool,
}

/// Per-identity prediction counts, heaviest first, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramExport {
    pub rows: Vec<HistogramRow>,
}

pub fn histogram(table: &FrequencyTable, truth: &DatasetSpec) -> Result<HistogramExport> {
    if table.yf_size() != truth.yf_size() {
        return Err(Error::DimensionMismatch(format!(
            "table covers {} identities, ground truth covers {}",
            table.yf_size(),
            truth.yf_size()
        )));
    }
    let mut rows: Vec<HistogramRow> = table
        .counts()
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let id = IdentityId(i as u32);
            HistogramRow {
                identity_id: id,
                count,
                is_member: truth.is_member(id),
                is_biased: truth.is_biased(id),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.identity_id.cmp(&b.identity_id))
    });
    Ok(HistogramExport { rows })
}

/// Booleans as `0` / `1`.
pub(crate) mod flag01 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(de::Error::custom(format!(
                "flag must be 0 or 1, got {other}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::decide;

    fn ids(v: &[u32]) -> Vec<IdentityId> {
        v.iter().copied().map(IdentityId).collect()
    }

    fn truth(yf: usize, members: &[u32]) -> DatasetSpec {
        DatasetSpec::new(yf, members.iter().map(|&m| (IdentityId(m), 1)), None).unwrap()
    }

    fn decisions(yf: usize, positives: &[u32]) -> DecisionSet {
        DecisionSet {
            positives: ids(positives),
            threshold: 1,
            yf_size: yf,
        }
    }

    #[test]
    fn precision_recall_examples() {
        let t = truth(5, &[1, 2]);
        let pr = precision_recall(&decisions(5, &[1, 3]), &t, EvalMode::Full).unwrap();
        assert_eq!((pr.precision, pr.recall), (Some(0.5), 0.5));

        let pr = precision_recall(&decisions(5, &[]), &t, EvalMode::Full).unwrap();
        assert_eq!((pr.precision, pr.recall), (None, 0.0));

        let pr = precision_recall(&decisions(5, &[0, 1, 2, 3, 4]), &t, EvalMode::Full).unwrap();
        assert_eq!((pr.precision, pr.recall), (Some(0.4), 1.0));

        assert!(matches!(
            precision_recall(&decisions(5, &[1]), &t, EvalMode::Biased),
            Err(Error::NoBiasedSubset)
        ));
    }

    #[test]
    fn biased_mode_treats_unbiased_members_as_negatives() {
        let t = DatasetSpec::new(
            6,
            vec![(IdentityId(0), 9), (IdentityId(1), 1), (IdentityId(2), 1)],
            Some(ids(&[0])),
        )
        .unwrap();
        let pr = precision_recall(&decisions(6, &[0, 1]), &t, EvalMode::Biased).unwrap();
        assert_eq!((pr.precision, pr.recall), (Some(0.5), 1.0));
        let pr = precision_recall(&decisions(6, &[0, 1]), &t, EvalMode::Full).unwrap();
        assert_eq!(pr.precision, Some(1.0));
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.246, 0.567) - 0.3431).abs() < 5e-5);
        assert_eq!(f1(0.3, 0.3), 0.3);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(f1_or_flag(None, 0.0), (0.0, true));
    }

    #[test]
    fn sweep_of_empty_table() {
        let t = truth(4, &[0]);
        let c = pr_sweep(&FrequencyTable::zeros(4), &t, EvalMode::Full).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!(c.points[0].precision, Some(0.25));
        assert_eq!(c.points[0].recall, 1.0);
        assert_eq!(c.points[1].precision, None);
        assert_eq!(c.points[1].positives_count, 0);
    }

    #[test]
    fn sweep_matches_pointwise_evaluation() {
        let t = truth(6, &[0, 2, 5]);
        let table = FrequencyTable::from_counts(vec![4, 0, 2, 3, 7, 1]);
        let c = pr_sweep(&table, &t, EvalMode::Full).unwrap();
        assert_eq!(c.points.len(), 9);
        for p in &c.points {
            let pr = precision_recall(&decide(&table, p.threshold), &t, EvalMode::Full).unwrap();
            assert_eq!(p.precision, pr.precision);
            assert_eq!(p.recall, pr.recall);
        }
    }

    #[test]
    fn histogram_order() {
        let t = truth(2, &[0]);
        let h = histogram(&FrequencyTable::from_counts(vec![5, 1]), &t).unwrap();
        assert_eq!(
            h.rows,
            vec![
                HistogramRow {
                    identity_id: IdentityId(0),
                    count: 5,
                    is_member: true,
                    is_biased: false
                },
                HistogramRow {
                    identity_id: IdentityId(1),
                    count: 1,
                    is_member: false,
                    is_biased: false
                },
            ]
        );
        let t = truth(4, &[3]);
        let h = histogram(&FrequencyTable::from_counts(vec![2, 5, 2, 2]), &t).unwrap();
        let order: Vec<u32> = h.rows.iter().map(|r| r.identity_id.0).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
    }
}
