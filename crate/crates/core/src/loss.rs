//! Additive angular margin losses over cosine logits.
//!
//! Both losses share the target logit `s·cos(θ_y + m)`. ArcFace uses the
//! plain scaled cosine `s·cos θ_j` for every negative; ArcNegFace rescales
//! each negative as `s·(t·cos θ_j + t − 1)` where `t` is a Gaussian of the gap
//! between the negative cosine and the margined target cosine, so negatives
//! sitting near the target are amplified and far-away ones (often label
//! noise) are damped.
//!
//! Forward passes keep the per-entry `∂logit/∂cos` so that
//! [`loss_backward`] can produce `∂loss/∂cos` without recomputation. The
//! modulator `t` is treated as a constant in the backward pass.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{labels} labels supplied for a batch of {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("non-finite cosine at ({0}, {1})")]
    NonFiniteInput(usize, usize),
    #[error("cosine {value} at ({row}, {col}) lies outside [-1, 1]")]
    CosineOutOfRange { row: usize, col: usize, value: f64 },
    #[error("labels differ from the ones used in the forward pass")]
    StaleIntermediates,
    #[error("invalid margin config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Arcface,
    Arcnegface,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Arcface => "arcface",
            LossKind::Arcnegface => "arcnegface",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arcface" => Ok(LossKind::Arcface),
            "arcnegface" => Ok(LossKind::Arcnegface),
            other => Err(LossError::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

/// Loss hyper-parameters. Field names match the `[loss]` config section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub loss: LossKind,
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive angular margin `m`, radians.
    pub margin: f64,
    pub neg_alpha: f64,
    pub neg_mu: f64,
    /// Width of the Gaussian modulator. Enters as `2σ` in the exponent.
    pub neg_sigma: f64,
    pub label_smooth_eps: f64,
}

/// Smoothing used when label smoothing is switched on without a value.
pub const DEFAULT_LABEL_SMOOTH_EPS: f64 = 0.1;

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Arcnegface,
            scale: 64.0,
            margin: 0.5,
            neg_alpha: 1.2,
            neg_mu: 0.0,
            neg_sigma: 1.0,
            label_smooth_eps: 0.0,
        }
    }
}

impl MarginConfig {
    pub fn arcface(scale: f64, margin: f64) -> Self {
        Self {
            loss: LossKind::Arcface,
            scale,
            margin,
            ..Self::default()
        }
    }

    pub fn arcnegface(scale: f64, margin: f64) -> Self {
        Self {
            loss: LossKind::Arcnegface,
            scale,
            margin,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LossError::InvalidConfig(msg.to_string()));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if !(0.0..PI / 2.0).contains(&self.margin) {
            return bad("margin must lie in [0, pi/2)");
        }
        if !(self.neg_alpha > 0.0 && self.neg_alpha.is_finite()) {
            return bad("neg_alpha must be positive");
        }
        if !self.neg_mu.is_finite() {
            return bad("neg_mu must be finite");
        }
        if !(self.neg_sigma > 0.0 && self.neg_sigma.is_finite()) {
            return bad("neg_sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smooth_eps) {
            return bad("label_smooth_eps must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Gaussian modulator `α·exp(−(x − y − μ)² / (2σ))`.
///
/// `x` is a negative cosine, `y` the margined target cosine.
pub fn arcneg_modulator(cos_neg: f64, cos_target_margined: f64, cfg: &MarginConfig) -> f64 {
    let d = cos_neg - cos_target_margined - cfg.neg_mu;
    cfg.neg_alpha * (-(d * d) / (2.0 * cfg.neg_sigma)).exp()
}

/// `cos(θ + m)` from `cos θ` and its derivative with respect to `cos θ`.
///
/// Past `θ = π − m` the angle would wrap, so the linear continuation
/// `cos θ − m·sin m` is used there instead.
pub fn margined_cosine(cos: f64, margin: f64) -> (f64, f64) {
    let (sin_m, cos_m) = margin.sin_cos();
    if cos <= (PI - margin).cos() {
        return (cos - margin * sin_m, 1.0);
    }
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let value = cos * cos_m - sin * sin_m;
    // d/dc [c·cos m − sqrt(1−c²)·sin m] = cos m + c·sin m / sqrt(1−c²)
    let deriv = if sin_m == 0.0 {
        cos_m
    } else {
        cos_m + cos * sin_m / sin.max(f64::MIN_POSITIVE.sqrt())
    };
    (value, deriv)
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Per-row cross-entropy.
    pub row_losses: Vec<f64>,
    /// Post-margin, post-scale logits.
    pub logits: Array2<f64>,
    /// Negative modulators `t` (1 on the target entry); ArcNegFace only.
    pub modulators: Option<Array2<f64>>,
    probs: Array2<f64>,
    dlogit_dcos: Array2<f64>,
    labels: Vec<usize>,
    smoothing: f64,
}

impl LossOutput {
    pub fn probabilities(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }
}

fn validate_inputs(cos: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    let (rows, classes) = cos.dim();
    if labels.len() != rows {
        return Err(LossError::LabelCount {
            rows,
            labels: labels.len(),
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::InvalidLabel {
                row,
                label,
                classes,
            });
        }
    }
    for ((row, col), &value) in cos.indexed_iter() {
        if !value.is_finite() {
            return Err(LossError::NonFiniteInput(row, col));
        }
        if value.abs() > 1.0 + 1e-9 {
            return Err(LossError::CosineOutOfRange { row, col, value });
        }
    }
    Ok(())
}

/// ArcFace forward pass.
pub fn arcface_forward(
    cos: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    validate_inputs(cos, labels)?;
    Ok(forward_impl(cos, labels, cfg, None::<fn(f64, f64) -> f64>))
}

/// ArcNegFace forward pass with the Gaussian modulator from `cfg`.
pub fn arcnegface_forward(
    cos: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    arcnegface_forward_with_modulator(cos, labels, cfg, |x, y| arcneg_modulator(x, y, cfg))
}

/// ArcNegFace forward pass with a caller-supplied modulator `t(cos_neg, cos_target_margined)`.
pub fn arcnegface_forward_with_modulator<F>(
    cos: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &MarginConfig,
    modulator: F,
) -> Result<LossOutput>
where
    F: Fn(f64, f64) -> f64,
{
    cfg.validate()?;
    validate_inputs(cos, labels)?;
    Ok(forward_impl(cos, labels, cfg, Some(modulator)))
}

/// Dispatches on `cfg.loss`.
pub fn forward(
    cos: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &MarginConfig,
) -> Result<LossOutput> {
    match cfg.loss {
        LossKind::Arcface => arcface_forward(cos, labels, cfg),
        LossKind::Arcnegface => arcnegface_forward(cos, labels, cfg),
    }
}

fn forward_impl<F>(
    cos: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &MarginConfig,
    modulator: Option<F>,
) -> LossOutput
where
    F: Fn(f64, f64) -> f64,
{
    let (rows, classes) = cos.dim();
    let s = cfg.scale;
    let eps = cfg.label_smooth_eps;
    let mut logits = Array2::zeros((rows, classes));
    let mut dlogit = Array2::zeros((rows, classes));
    let mut probs = Array2::zeros((rows, classes));
    let mut mods = modulator.as_ref().map(|_| Array2::ones((rows, classes)));
    let mut row_losses = Vec::with_capacity(rows);

    for (i, &y) in labels.iter().enumerate() {
        let (phi, dphi) = margined_cosine(cos[[i, y]].clamp(-1.0, 1.0), cfg.margin);
        for j in 0..classes {
            let c = cos[[i, j]].clamp(-1.0, 1.0);
            let (z, dz) = if j == y {
                (s * phi, s * dphi)
            } else if let Some(g) = &modulator {
                let t = g(c, phi);
                if let Some(m) = mods.as_mut() {
                    m[[i, j]] = t;
                }
                (s * (t * c + t - 1.0), s * t)
            } else {
                (s * c, s)
            };
            logits[[i, j]] = z;
            dlogit[[i, j]] = dz;
        }

        // log-sum-exp around the row max; ln_1p keeps tiny tails exact
        let row = logits.row(i);
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (j, &z)| if z > acc.1 { (j, z) } else { acc },
            );
        let tail: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &z)| (z - max).exp())
            .sum();
        let offset = tail.ln_1p();
        // −log p_j = (max − z_j) + offset, kept apart so tiny offsets survive
        let nll = |j: usize| (max - logits[[i, j]]) + offset;
        for j in 0..classes {
            probs[[i, j]] = (-nll(j)).exp();
        }

        // −Σ q_j log p_j with q = (1−eps)·onehot(y) + eps/C
        let loss = if eps == 0.0 {
            nll(y)
        } else {
            let uniform = eps / classes as f64;
            let mut l = 0.0;
            for j in 0..classes {
                let q = if j == y { 1.0 - eps + uniform } else { uniform };
                l += q * nll(j);
            }
            l
        };
        row_losses.push(loss);
    }

    let loss = if rows == 0 {
        0.0
    } else {
        row_losses.iter().sum::<f64>() / rows as f64
    };
    LossOutput {
        loss,
        row_losses,
        logits,
        modulators: mods,
        probs,
        dlogit_dcos: dlogit,
        labels: labels.to_vec(),
        smoothing: eps,
    }
}

/// `∂loss/∂cos` for every entry of the forward input.
pub fn loss_backward(out: &LossOutput, labels: &[usize]) -> Result<Array2<f64>> {
    if labels != out.labels.as_slice() {
        return Err(LossError::StaleIntermediates);
    }
    let (rows, classes) = out.probs.dim();
    let mut grad = Array2::zeros((rows, classes));
    if rows == 0 {
        return Ok(grad);
    }
    let inv_n = 1.0 / rows as f64;
    let uniform = out.smoothing / classes as f64;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..classes {
            let q = if j == y {
                1.0 - out.smoothing + uniform
            } else {
                uniform
            };
            grad[[i, j]] = (out.probs[[i, j]] - q) * out.dlogit_dcos[[i, j]] * inv_n;
        }
    }
    Ok(grad)
}

/// Chains `∂loss/∂cos` through `cos = F·Wᵀ` to unit features and anchors.
///
/// Returns `(∂loss/∂F, ∂loss/∂W)`. The `[-1, 1]` clamp is ignored; it only
/// bites on rounding noise.
pub fn cosine_backward(
    grad_cos: ArrayView2<'_, f64>,
    feats: ArrayView2<'_, f64>,
    anchors: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    (grad_cos.dot(&anchors), grad_cos.t().dot(&feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_class_has_zero_loss() {
        let cfg = MarginConfig::arcface(64.0, 0.5);
        let out = arcface_forward(array![[0.3], [-0.7]].view(), &[0, 0], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn saturated_target_loss_matches_hand_value() {
        let cfg = MarginConfig::arcface(64.0, 0.5);
        let out = arcface_forward(array![[1.0, 0.0]].view(), &[0], &cfg).unwrap();
        let target = 64.0 * 0.5f64.cos();
        assert!((out.logits[[0, 0]] - target).abs() < 1e-12);
        assert!((out.logits[[0, 0]] - 56.165_283_96).abs() < 1e-7);
        // −log(e^a/(e^a + 1)) = ln(1 + e^{−a})
        let expected = (-target).exp().ln_1p();
        assert!(
            (out.loss - expected).abs() / expected < 1e-9,
            "{}",
            out.loss
        );
        assert!(out.loss > 4.0e-25 && out.loss < 4.1e-25);
    }

    #[test]
    fn modulator_values() {
        let cfg = MarginConfig::default();
        assert_eq!(arcneg_modulator(0.3, 0.3, &cfg), 1.2);
        assert!((arcneg_modulator(1.0, 0.0, &cfg) - 0.727_836_791_655_160_1).abs() < 1e-12);
        assert!((arcneg_modulator(-1.0, 1.0, &cfg) - 0.162_402_339_883_935_24).abs() < 1e-12);
    }

    #[test]
    fn modulator_peaks_at_offset_and_decays() {
        let cfg = MarginConfig {
            neg_mu: 0.1,
            ..MarginConfig::default()
        };
        let y = 0.2;
        let peak = arcneg_modulator(y + cfg.neg_mu, y, &cfg);
        assert_eq!(peak, cfg.neg_alpha);
        let mut prev = peak;
        for k in 1..200 {
            let x = y + cfg.neg_mu + k as f64 * 0.01;
            let t = arcneg_modulator(x, y, &cfg);
            assert!(t < prev);
            let mirrored = arcneg_modulator(y + cfg.neg_mu - k as f64 * 0.01, y, &cfg);
            assert!((t - mirrored).abs() < 1e-12);
            prev = t;
        }
    }

    #[test]
    fn hardest_negative_is_amplified() {
        let cfg = MarginConfig::arcnegface(64.0, 0.5);
        let cy = 0.8;
        let (phi, _) = margined_cosine(cy, cfg.margin);
        let out = arcnegface_forward(array![[cy, phi]].view(), &[0], &cfg).unwrap();
        let expected = 64.0 * (1.2 * phi + 0.2);
        assert!((out.logits[[0, 1]] - expected).abs() < 1e-12);
        assert!(out.logits[[0, 1]] > 64.0 * phi);
    }

    #[test]
    fn margin_fallback_branch_is_continuous() {
        let m = 0.5;
        let edge = (PI - m).cos();
        let (inside, _) = margined_cosine(edge + 1e-12, m);
        let (outside, d) = margined_cosine(edge, m);
        assert_eq!(d, 1.0);
        // jump = 1 − cos m − m·sin m at the switch point; the fallback side is lower
        let jump = 1.0 - m.cos() - m * m.sin();
        assert!(outside < inside);
        assert!(
            (outside - inside - jump).abs() < 1e-9,
            "{}",
            outside - inside
        );
    }

    #[test]
    fn margined_cosine_is_monotone() {
        let m = 0.5;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=2000 {
            let c = -1.0 + k as f64 * 1e-3;
            let (v, _) = margined_cosine(c, m);
            assert!(v >= prev, "not monotone at {c}");
            prev = v;
        }
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let cfg = MarginConfig::arcface(64.0, 0.3);
        let cos = array![[0.99, -0.5, -0.2, 0.0]];
        let out = arcface_forward(cos.view(), &[0], &cfg).unwrap();
        let g = loss_backward(&out, &[0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn zero_margin_gradient_is_scaled_softmax_gradient() {
        let cfg = MarginConfig::arcface(10.0, 0.0);
        let cos = array![[0.1, 0.4, -0.3], [0.2, 0.2, 0.9]];
        let labels = [1, 0];
        let out = arcface_forward(cos.view(), &labels, &cfg).unwrap();
        let g = loss_backward(&out, &labels).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = cos.row(i).iter().map(|c| 10.0 * c).collect();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = z[j].exp() / norm;
                let onehot = if j == y { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - 10.0 * (p - onehot) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero_wrt_logits() {
        let cfg = MarginConfig::arcnegface(32.0, 0.3);
        let cos = array![[0.1, 0.4, -0.3, 0.7], [0.2, -0.2, 0.9, 0.0]];
        let labels = [3, 1];
        let out = arcnegface_forward(cos.view(), &labels, &cfg).unwrap();
        let p = out.probabilities();
        for (i, &y) in labels.iter().enumerate() {
            let s: f64 = (0..4)
                .map(|j| p[[i, j]] - if j == y { 1.0 } else { 0.0 })
                .sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let cfg = MarginConfig::default();
        let cos = array![[0.1, 0.2]];
        assert!(matches!(
            arcface_forward(cos.view(), &[2], &cfg),
            Err(LossError::InvalidLabel { label: 2, .. })
        ));
        assert!(matches!(
            arcface_forward(array![[f64::NAN, 0.2]].view(), &[0], &cfg),
            Err(LossError::NonFiniteInput(0, 0))
        ));
        assert!(matches!(
            arcface_forward(array![[1.5, 0.2]].view(), &[0], &cfg),
            Err(LossError::CosineOutOfRange { .. })
        ));
        let out = arcface_forward(cos.view(), &[0], &cfg).unwrap();
        assert_eq!(
            loss_backward(&out, &[1]).unwrap_err(),
            LossError::StaleIntermediates
        );
        let bad = MarginConfig { margin: 2.0, ..cfg };
        assert!(matches!(bad.validate(), Err(LossError::InvalidConfig(_))));
    }

    #[test]
    fn label_smoothing_gradient_matches_target_mix() {
        let cfg = MarginConfig {
            label_smooth_eps: 0.1,
            ..MarginConfig::arcface(8.0, 0.0)
        };
        let cos = array![[0.3, -0.1, 0.5, 0.2]];
        let out = arcface_forward(cos.view(), &[2], &cfg).unwrap();
        let g = loss_backward(&out, &[2]).unwrap();
        // gradient wrt logits sums to zero even with smoothing
        assert!((g.sum() / 8.0).abs() < 1e-12);
        let p = out.probabilities();
        assert!((g[[0, 0]] - 8.0 * (p[[0, 0]] - 0.025)).abs() < 1e-12);
        assert!((g[[0, 2]] - 8.0 * (p[[0, 2]] - 0.925)).abs() < 1e-12);
    }
}
