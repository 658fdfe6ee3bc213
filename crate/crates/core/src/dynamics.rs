//! Learning-rate schedule, stochastic depth, anchor finetuning and AdaBN.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{normalize, AnchorSet, Embedding, NumericError, SeededRng};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("iteration {iter} outside [0, {total}]")]
    OutOfRange { iter: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("keep rate {0} outside (0, 1]")]
    InvalidRate(f64),
    #[error("no activation batches supplied")]
    EmptyStream,
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T, E = DynamicsError> = std::result::Result<T, E>;

/// Linear warmup from `base_lr` to `peak_lr`, then cosine decay to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    #[serde(default)]
    pub floor_lr: f64,
}

impl Default for Schedule {
    /// 0.001 → 0.4 over 10k iterations, 100k iterations in total.
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            peak_lr: 0.4,
            warmup_iters: 10_000,
            total_iters: 100_000,
            floor_lr: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DynamicsError::InvalidSchedule(m.into()));
        if !(self.base_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.base_lr > self.peak_lr {
            return bad("base_lr must not exceed peak_lr");
        }
        if self.warmup_iters == 0 || self.warmup_iters >= self.total_iters {
            return bad("need 0 < warmup_iters < total_iters");
        }
        if !(0.0..=self.peak_lr).contains(&self.floor_lr) {
            return bad("floor_lr must lie in [0, peak_lr]");
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        lr_at(iter, self)
    }
}

pub fn lr_at(iter: u64, sched: &Schedule) -> Result<f64> {
    sched.validate()?;
    if iter > sched.total_iters {
        return Err(DynamicsError::OutOfRange {
            iter,
            total: sched.total_iters,
        });
    }
    if iter <= sched.warmup_iters {
        // convex combination keeps both endpoints exact
        let f = iter as f64 / sched.warmup_iters as f64;
        return Ok(sched.base_lr * (1.0 - f) + sched.peak_lr * f);
    }
    let progress =
        (iter - sched.warmup_iters) as f64 / (sched.total_iters - sched.warmup_iters) as f64;
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    Ok(sched.floor_lr + (sched.peak_lr - sched.floor_lr) * cosine)
}

/// Which residual blocks run, and how their branch output is scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMask {
    pub keep: Vec<bool>,
    pub keep_rate: f64,
    pub training: bool,
}

impl DepthMask {
    /// Deterministic inference mask: every block runs at scale `keep_rate`.
    pub fn inference(num_blocks: usize, keep_rate: f64) -> Result<Self> {
        check_rate(keep_rate)?;
        Ok(Self {
            keep: vec![true; num_blocks],
            keep_rate,
            training: false,
        })
    }

    /// Multiplier applied to block `i`'s residual branch.
    pub fn branch_scale(&self, i: usize) -> f64 {
        match (self.training, self.keep[i]) {
            (false, _) => self.keep_rate,
            (true, true) => 1.0,
            (true, false) => 0.0,
        }
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

fn check_rate(keep_rate: f64) -> Result<()> {
    if keep_rate > 0.0 && keep_rate <= 1.0 {
        Ok(())
    } else {
        Err(DynamicsError::InvalidRate(keep_rate))
    }
}

/// Training-time mask with an independent Bernoulli(keep_rate) draw per block.
pub fn sample_depth_mask(
    num_blocks: usize,
    keep_rate: f64,
    rng: &mut SeededRng,
) -> Result<DepthMask> {
    check_rate(keep_rate)?;
    let keep = (0..num_blocks).map(|_| rng.bernoulli(keep_rate)).collect();
    Ok(DepthMask {
        keep,
        keep_rate,
        training: true,
    })
}

/// Re-initializes every anchor that has samples as the normalized mean of
/// its features. Classes without samples, or whose mean vanishes, keep their
/// previous anchor.
pub fn anchor_finetune(
    features: &[Embedding],
    labels: &[usize],
    anchors: &AnchorSet,
) -> Result<AnchorSet> {
    let dim = anchors.dim();
    let classes = anchors.num_classes();
    if labels.len() != features.len() {
        return Err(NumericError::DimensionMismatch {
            expected: features.len(),
            found: labels.len(),
        }
        .into());
    }
    let mut sums = Array2::<f64>::zeros((classes, dim));
    let mut counts = vec![0usize; classes];
    for (f, &c) in features.iter().zip(labels) {
        if f.dim() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: f.dim(),
            }
            .into());
        }
        if c >= classes {
            return Err(NumericError::DimensionMismatch {
                expected: classes,
                found: c + 1,
            }
            .into());
        }
        sums.row_mut(c).scaled_add(1.0, &f.view());
        counts[c] += 1;
    }
    let mut out = anchors.clone();
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let mean = sums.row(c).mapv(|x| x / n as f64);
        match normalize(mean.view()) {
            Ok(unit) => out.set_anchor(c, &unit),
            Err(NumericError::ZeroVector) => {
                log::warn!(
                    "class {} has a vanishing mean feature; keeping its anchor",
                    anchors.class_ids()[c]
                );
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Per-channel batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub eps: f64,
}

impl BnStats {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x − mean) / sqrt(var + eps)` applied row-wise.
    pub fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let inv_std = self.var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (&x - &self.mean) * &inv_std
    }
}

/// Running moments that can be merged across partial reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub count: usize,
    pub mean: Array1<f64>,
    /// Sum of squared deviations from `mean`.
    pub m2: Array1<f64>,
}

impl ChannelMoments {
    /// Exact two-pass moments of one batch.
    pub fn from_batch(batch: ArrayView2<'_, f64>) -> Self {
        let count = batch.nrows();
        if count == 0 {
            return Self {
                count,
                mean: Array1::zeros(batch.ncols()),
                m2: Array1::zeros(batch.ncols()),
            };
        }
        let mean = batch.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = &batch - &mean;
        let m2 = (&centered * &centered).sum_axis(Axis(0));
        Self { count, mean, m2 }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        let n = (self.count + other.count) as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &(&delta * (nb / n));
        let m2 = &self.m2 + &other.m2 + &(&delta * &delta * (na * nb / n));
        Self {
            count: self.count + other.count,
            mean,
            m2,
        }
    }

    pub fn population_var(&self) -> Array1<f64> {
        self.m2.mapv(|v| v / self.count.max(1) as f64)
    }
}

/// Replaces running statistics with exact full-pass target-domain statistics.
///
/// The mean is computed in a first pass over all batches and the population
/// variance in a second pass around that mean. `eps` is carried over.
pub fn adabn_recalibrate(batches: &[Array2<f64>], old: &BnStats) -> Result<BnStats> {
    let channels = old.channels();
    let mut count = 0usize;
    let mut sum = Array1::<f64>::zeros(channels);
    for b in batches {
        if b.ncols() != channels {
            return Err(NumericError::DimensionMismatch {
                expected: channels,
                found: b.ncols(),
            }
            .into());
        }
        count += b.nrows();
        sum += &b.sum_axis(Axis(0));
    }
    if count == 0 {
        return Err(DynamicsError::EmptyStream);
    }
    let mean = sum / count as f64;
    let mut ss = Array1::<f64>::zeros(channels);
    for b in batches {
        let centered = b - &mean;
        ss += &(&centered * &centered).sum_axis(Axis(0));
    }
    Ok(BnStats {
        mean,
        var: ss / count as f64,
        eps: old.eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normalize_slice;
    use ndarray::array;

    fn reference_schedule() -> Schedule {
        Schedule::default()
    }

    #[test]
    fn schedule_examples() {
        let s = reference_schedule();
        assert_eq!(lr_at(0, &s).unwrap(), 0.001);
        assert_eq!(lr_at(10_000, &s).unwrap(), 0.4);
        assert!((lr_at(55_000, &s).unwrap() - 0.2).abs() < 1e-15);
        assert!(lr_at(100_000, &s).unwrap().abs() <= 1e-15);
        assert!(matches!(
            lr_at(100_001, &s),
            Err(DynamicsError::OutOfRange { .. })
        ));
    }

    #[test]
    fn schedule_warmup_is_linear() {
        let s = reference_schedule();
        let a = lr_at(2_500, &s).unwrap();
        assert!((a - (0.001 + 0.25 * 0.399)).abs() < 1e-15);
    }

    #[test]
    fn schedule_with_floor() {
        let s = Schedule {
            floor_lr: 0.01,
            ..reference_schedule()
        };
        assert!((lr_at(100_000, &s).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        let bad = Schedule {
            warmup_iters: 100_000,
            ..reference_schedule()
        };
        assert!(matches!(
            lr_at(0, &bad),
            Err(DynamicsError::InvalidSchedule(_))
        ));
        let bad = Schedule {
            base_lr: 0.5,
            ..reference_schedule()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn depth_mask_keep_all() {
        for seed in 0..20 {
            let m = sample_depth_mask(7, 1.0, &mut SeededRng::new(seed)).unwrap();
            assert!(m.keep.iter().all(|&k| k));
        }
    }

    #[test]
    fn depth_mask_is_deterministic() {
        let a = sample_depth_mask(32, 0.8, &mut SeededRng::new(3)).unwrap();
        let b = sample_depth_mask(32, 0.8, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_mask_scales() {
        let m = DepthMask::inference(3, 0.8).unwrap();
        assert_eq!(m.branch_scale(1), 0.8);
        let t = DepthMask {
            keep: vec![true, false],
            keep_rate: 0.8,
            training: true,
        };
        assert_eq!((t.branch_scale(0), t.branch_scale(1)), (1.0, 0.0));
        assert!(matches!(
            sample_depth_mask(3, 0.0, &mut SeededRng::new(1)),
            Err(DynamicsError::InvalidRate(_))
        ));
        assert!(matches!(
            DepthMask::inference(3, 1.5),
            Err(DynamicsError::InvalidRate(_))
        ));
    }

    #[test]
    fn anchor_finetune_examples() {
        let anchors =
            AnchorSet::new(vec![10, 11, 12], array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let u = normalize_slice(&[0.3, -0.7]).unwrap();
        let feats = vec![
            u.clone(),
            u.clone(),
            normalize_slice(&[1.0, 0.0]).unwrap(),
            normalize_slice(&[0.0, 1.0]).unwrap(),
        ];
        let out = anchor_finetune(&feats, &[0, 0, 1, 1], &anchors).unwrap();
        for (a, b) in out.anchor(0).iter().zip(u.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.anchor(1)[0] - h).abs() < 1e-15 && (out.anchor(1)[1] - h).abs() < 1e-15);
        // untouched class is bitwise unchanged
        assert_eq!(out.anchor(2), anchors.anchor(2));
    }

    #[test]
    fn anchor_finetune_antipodal_keeps_anchor() {
        let anchors = AnchorSet::new(vec![0], array![[0.6, 0.8]]).unwrap();
        let feats = vec![
            normalize_slice(&[1.0, 0.0]).unwrap(),
            normalize_slice(&[-1.0, 0.0]).unwrap(),
        ];
        let out = anchor_finetune(&feats, &[0, 0], &anchors).unwrap();
        assert_eq!(out, anchors);
    }

    #[test]
    fn adabn_standardizes_its_own_data() {
        let mut rng = SeededRng::new(11);
        let batches: Vec<Array2<f64>> = (0..5)
            .map(|_| {
                Array2::from_shape_fn((40, 3), |(_, c)| 3.0 * rng.normal() + c as f64 * 10.0 - 4.0)
            })
            .collect();
        let old = BnStats::identity(3, 1e-12);
        let new = adabn_recalibrate(&batches, &old).unwrap();
        let all = ndarray::concatenate(
            Axis(0),
            &batches.iter().map(|b| b.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let z = new.standardize(all.view());
        let m = ChannelMoments::from_batch(z.view());
        for c in 0..3 {
            assert!(m.mean[c].abs() < 1e-10);
            assert!((m.population_var()[c] - 1.0).abs() < 1e-8);
        }
        let again = adabn_recalibrate(&batches, &new).unwrap();
        assert_eq!(again, new);
    }

    #[test]
    fn adabn_constant_batch_and_empty_stream() {
        let old = BnStats::identity(2, 1e-5);
        let new = adabn_recalibrate(&[Array2::from_elem((4, 2), 2.5)], &old).unwrap();
        assert_eq!(new.var, array![0.0, 0.0]);
        let z = new.standardize(Array2::from_elem((1, 2), 2.5).view());
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(matches!(
            adabn_recalibrate(&[], &old),
            Err(DynamicsError::EmptyStream)
        ));
    }

    #[test]
    fn moments_merge_matches_two_pass() {
        let mut rng = SeededRng::new(5);
        let a = Array2::from_shape_fn((17, 4), |_| rng.normal() * 2.0 + 1.0);
        let b = Array2::from_shape_fn((9, 4), |_| rng.normal() - 3.0);
        let merged =
            ChannelMoments::from_batch(a.view()).merge(&ChannelMoments::from_batch(b.view()));
        let stats = adabn_recalibrate(&[a, b], &BnStats::identity(4, 0.0)).unwrap();
        for c in 0..4 {
            assert!((merged.mean[c] - stats.mean[c]).abs() < 1e-12);
            assert!((merged.population_var()[c] - stats.var[c]).abs() < 1e-12);
        }
    }
}
