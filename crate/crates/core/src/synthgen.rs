//! Parametric stand-in for a trained generator.
//!
//! Each generation carries a source identity. With probability
//! `memorization_rate` it reproduces a training identity `y`, picked with
//! weight proportional to `N_y^bias_exponent`; otherwise it is one of
//! `novel_space_size` pseudo-identities that never appear in training.
//! Latent vectors are not materialized: the seeded draw is the latent.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::{DatasetSpec, IdentityId};

/// Identity behind one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceIdentity {
    Member(IdentityId),
    Novel(u32),
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    spec: Arc<DatasetSpec>,
    memorization_rate: f64,
    bias_exponent: f64,
    novel_space_size: usize,
    weights: Vec<f64>,
    member_index: WeightedIndex<f64>,
}

impl GeneratorModel {
    /// `novel_space_size = None` uses `|Y_F| - |members|`.
    pub fn new(
        spec: impl Into<Arc<DatasetSpec>>,
        memorization_rate: f64,
        bias_exponent: f64,
        novel_space_size: Option<usize>,
    ) -> Result<Self> {
        let spec = spec.into();
        if !(0.0..=1.0).contains(&memorization_rate) {
            return Err(Error::InvalidGenerator(format!(
                "memorization rate {memorization_rate} is outside [0, 1]"
            )));
        }
        if !(bias_exponent >= 0.0 && bias_exponent.is_finite()) {
            return Err(Error::InvalidGenerator(format!(
                "bias exponent {bias_exponent} must be finite and non-negative"
            )));
        }
        let novel_space_size = novel_space_size.unwrap_or(spec.yf_size() - spec.members().len());
        if novel_space_size == 0 && memorization_rate < 1.0 {
            return Err(Error::InvalidGenerator(
                "an empty novel identity space requires a memorization rate of 1".into(),
            ));
        }
        if novel_space_size > u32::MAX as usize {
            return Err(Error::InvalidGenerator(
                "novel identity space too large".into(),
            ));
        }

        let raw: Vec<f64> = spec
            .member_samples()
            .iter()
            .map(|&n| (n as f64).powf(bias_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidGenerator(
                "training identity weights overflow; lower the bias exponent".into(),
            ));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let member_index = WeightedIndex::new(&raw)
            .map_err(|e| Error::InvalidGenerator(format!("member weights: {e}")))?;

        Ok(GeneratorModel {
            spec,
            memorization_rate,
            bias_exponent,
            novel_space_size,
            weights,
            member_index,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> &Arc<DatasetSpec> {
        &self.spec
    }

    pub fn memorization_rate(&self) -> f64 {
        self.memorization_rate
    }

    pub fn bias_exponent(&self) -> f64 {
        self.bias_exponent
    }

    pub fn novel_space_size(&self) -> usize {
        self.novel_space_size
    }

    /// Emission probabilities of the training identities, conditional on a
    /// memorized draw. Aligned with `spec().members()`.
    pub fn member_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Copy of this model with a different memorization rate.
    pub fn with_memorization_rate(&self, rate: f64) -> Result<Self> {
        GeneratorModel::new(
            Arc::clone(&self.spec),
            rate,
            self.bias_exponent,
            Some(self.novel_space_size),
        )
    }
}

/// Draws the source identity of one generated sample.
pub fn sample_identity<R: Rng + ?Sized>(model: &GeneratorModel, rng: &mut R) -> SourceIdentity {
    if rng.random::<f64>() < model.memorization_rate {
        let i = model.member_index.sample(rng);
        SourceIdentity::Member(model.spec.members()[i])
    } else {
        SourceIdentity::Novel(rng.random_range(0..model.novel_space_size as u32))
    }
}

/// `count` independent draws.
pub fn sample_batch<R: Rng + ?Sized>(
    model: &GeneratorModel,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SourceIdentity>> {
    if count == 0 {
        return Err(Error::InvalidAttack("batch size must be at least 1".into()));
    }
    Ok((0..count).map(|_| sample_identity(model, rng)).collect())
}

/// Memorization rate as a non-decreasing function of the training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MemorizationSchedule {
    /// `rate` at every step.
    Constant { rate: f64 },
    /// `1 - exp(-step / tau)`.
    Saturating { tau: f64 },
    /// `clamp(start + slope * step, 0, 1)`.
    Linear { start: f64, slope: f64 },
    /// Piecewise-linear through `(step, rate)` knots, constant outside them.
    Piecewise { knots: Vec<(u64, f64)> },
}

impl MemorizationSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        match self {
            MemorizationSchedule::Constant { rate } => {
                if !(0.0..=1.0).contains(rate) {
                    return bad(format!("rate {rate} is outside [0, 1]"));
                }
            }
            MemorizationSchedule::Saturating { tau } => {
                if !(*tau > 0.0 && tau.is_finite()) {
                    return bad(format!("tau {tau} must be positive and finite"));
                }
            }
            MemorizationSchedule::Linear { start, slope } => {
                if !(0.0..=1.0).contains(start) {
                    return bad(format!("start rate {start} is outside [0, 1]"));
                }
                if !(*slope >= 0.0 && slope.is_finite()) {
                    return bad(format!("slope {slope} would make the schedule decreasing"));
                }
            }
            MemorizationSchedule::Piecewise { knots } => {
                if knots.is_empty() {
                    return bad("piecewise schedule has no knots".into());
                }
                for &(_, r) in knots {
                    if !(0.0..=1.0).contains(&r) {
                        return bad(format!("rate {r} is outside [0, 1]"));
                    }
                }
                for w in knots.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return bad("knot steps must be strictly increasing".into());
                    }
                    if w[1].1 < w[0].1 {
                        return bad(format!(
                            "rate decreases from {} to {} between steps {} and {}",
                            w[0].1, w[1].1, w[0].0, w[1].0
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Memorization rate at `step`. Assumes a validated schedule.
    pub fn rate_at(&self, step: u64) -> f64 {
        let t = step as f64;
        match self {
            MemorizationSchedule::Constant { rate } => *rate,
            MemorizationSchedule::Saturating { tau } => -(-t / tau).exp_m1(),
            MemorizationSchedule::Linear { start, slope } => (start + slope * t).clamp(0.0, 1.0),
            MemorizationSchedule::Piecewise { knots } => {
                let i = knots.partition_point(|&(s, _)| s <= step);
                if i == 0 {
                    knots[0].1
                } else if i == knots.len() {
                    knots[i - 1].1
                } else {
                    let (s0, r0) = knots[i - 1];
                    let (s1, r1) = knots[i];
                    r0 + (r1 - r0) * (step - s0) as f64 / (s1 - s0) as f64
                }
            }
        }
    }
}

/// `base_model` with its memorization rate replaced by the schedule's value
/// at `step`.
pub fn memorization_schedule(
    base_model: &GeneratorModel,
    step: u64,
    schedule: &MemorizationSchedule,
) -> Result<GeneratorModel> {
    schedule.validate()?;
    base_model.with_memorization_rate(schedule.rate_at(step))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::identity::make_setting1_spec;

    fn two_member_spec(a: u64, b: u64) -> DatasetSpec {
        DatasetSpec::new(10, vec![(IdentityId(0), a), (IdentityId(1), b)], None).unwrap()
    }

    #[test]
    fn forced_support() {
        let model = GeneratorModel::new(two_member_spec(5, 5), 1.0, 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut zero = 0usize;
        for _ in 0..n {
            match sample_identity(&model, &mut rng) {
                SourceIdentity::Member(IdentityId(0)) => zero += 1,
                SourceIdentity::Member(IdentityId(1)) => {}
                other => panic!("unexpected draw {other:?}"),
            }
        }
        let f = zero as f64 / n as f64;
        // 4 sigma at p = 0.5.
        assert!((f - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{f}");

        let model = GeneratorModel::new(two_member_spec(5, 5), 0.0, 1.0, None).unwrap();
        for _ in 0..10_000 {
            assert!(matches!(
                sample_identity(&model, &mut rng),
                SourceIdentity::Novel(j) if j < 8
            ));
        }
    }

    #[test]
    fn zero_exponent_is_uniform() {
        let spec = DatasetSpec::new(
            10,
            vec![
                (IdentityId(0), 1),
                (IdentityId(1), 1000),
                (IdentityId(2), 7),
            ],
            None,
        )
        .unwrap();
        let model = GeneratorModel::new(spec, 0.5, 0.0, None).unwrap();
        for &w in model.member_weights() {
            assert_eq!(w, 1.0 / 3.0);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let model = GeneratorModel::new(two_member_spec(300, 100), 0.5, 1.0, None).unwrap();
        let s: f64 = model.member_weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(model.member_weights(), &[0.75, 0.25]);
    }

    #[test]
    fn batch_contract() {
        let spec = make_setting1_spec(8631, 30, 333).unwrap();
        let model = GeneratorModel::new(spec, 0.3, 1.0, None).unwrap();
        assert!(sample_batch(&model, 0, &mut ChaCha8Rng::seed_from_u64(42)).is_err());
        assert_eq!(
            sample_batch(&model, 1, &mut ChaCha8Rng::seed_from_u64(42))
                .unwrap()
                .len(),
            1
        );
        let a = sample_batch(&model, 2 * 8631, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_batch(&model, 2 * 8631, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.len(), 17_262);
        assert_eq!(a, b);
    }

    #[test]
    fn model_validation() {
        assert!(GeneratorModel::new(two_member_spec(1, 1), 1.5, 1.0, None).is_err());
        assert!(GeneratorModel::new(two_member_spec(1, 1), 0.5, -1.0, None).is_err());
        let full = make_setting1_spec(4, 4, 1).unwrap();
        assert!(GeneratorModel::new(full.clone(), 0.9, 1.0, None).is_err());
        assert!(GeneratorModel::new(full, 1.0, 1.0, None).is_ok());
    }

    #[test]
    fn schedules() {
        let sat = MemorizationSchedule::Saturating { tau: 10_000.0 };
        assert_eq!(sat.rate_at(0), 0.0);
        assert!((sat.rate_at(17_000) - 0.817_316).abs() < 1e-6);
        assert!((sat.rate_at(u64::MAX) - 1.0).abs() < 1e-12);

        let pw = MemorizationSchedule::Piecewise {
            knots: vec![(0, 0.1), (10, 0.5), (20, 0.5)],
        };
        pw.validate().unwrap();
        assert!((pw.rate_at(5) - 0.3).abs() < 1e-12);
        assert_eq!(pw.rate_at(100), 0.5);

        let decreasing = MemorizationSchedule::Piecewise {
            knots: vec![(0, 0.5), (10, 0.4)],
        };
        assert!(decreasing.validate().is_err());
        assert!(MemorizationSchedule::Linear {
            start: 0.0,
            slope: -1.0
        }
        .validate()
        .is_err());
        assert!(MemorizationSchedule::Saturating { tau: 0.0 }
            .validate()
            .is_err());

        let base = GeneratorModel::new(two_member_spec(3, 1), 0.9, 1.0, None).unwrap();
        let m = memorization_schedule(&base, 0, &sat).unwrap();
        assert_eq!(m.memorization_rate(), 0.0);
        assert_eq!(m.member_weights(), base.member_weights());
        assert_eq!(m.novel_space_size(), base.novel_space_size());
        assert!(memorization_schedule(&base, 0, &decreasing).is_err());
    }
}
