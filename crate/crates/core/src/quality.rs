//! Quality-aware set aggregation.
//!
//! A frame's quality is how much more it resembles its own class anchor than
//! the closest impostor anchor. Raw ratios are z-scored against training-set
//! statistics and squashed through a sigmoid; at inference the predicted
//! qualities of one set are affinely stretched to `[0, 1]` and used as
//! weights for a weighted average of the frame embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{format_real, normalize, parse_real, AnchorSet, Embedding, NumericError};

/// Lower bound applied to the best-impostor cosine before dividing.
pub const IMPOSTOR_FLOOR: f64 = 1e-3;
/// Raw quality ratios are clipped to `[-RAW_CLIP, RAW_CLIP]`.
pub const RAW_CLIP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("quality needs at least two classes")]
    SingleClass,
    #[error("class index {class} out of range for {classes} anchors")]
    InvalidClass { class: usize, classes: usize },
    #[error("quality distribution is degenerate (constant or fewer than two values)")]
    DegenerateDistribution,
    #[error("all qualities in the set are equal")]
    AllEqual,
    #[error("rescaling needs at least 3 qualities, got {0}")]
    TooFewForRescale(usize),
    #[error("frame set is empty")]
    EmptySet,
    #[error("policy {0} needs per-frame qualities")]
    MissingQualities(AggregationPolicy),
    #[error("quality {0} is negative or non-finite")]
    InvalidQuality(f64),
    #[error("weights sum to zero")]
    ZeroWeights,
    #[error("{found} values supplied for {expected} items")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed frame-set CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = QualityError> = std::result::Result<T, E>;

/// Raw quality: `cos(F, W_c) / max_{j≠c} cos(F, W_j)`.
///
/// The impostor cosine is floored at [`IMPOSTOR_FLOOR`] and the ratio
/// clipped to `±RAW_CLIP`, since negative or vanishing impostor cosines
/// would otherwise flip sign or explode.
pub fn quality_raw(feat: &Embedding, anchors: &AnchorSet, true_class: usize) -> Result<f64> {
    let classes = anchors.num_classes();
    if classes < 2 {
        return Err(QualityError::SingleClass);
    }
    if true_class >= classes {
        return Err(QualityError::InvalidClass {
            class: true_class,
            classes,
        });
    }
    if feat.dim() != anchors.dim() {
        return Err(NumericError::DimensionMismatch {
            expected: anchors.dim(),
            found: feat.dim(),
        }
        .into());
    }
    let f = feat.view();
    let own = f.dot(&anchors.anchor(true_class)).clamp(-1.0, 1.0);
    let best_impostor = (0..classes)
        .filter(|&j| j != true_class)
        .map(|j| f.dot(&anchors.anchor(j)).clamp(-1.0, 1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((own / best_impostor.max(IMPOSTOR_FLOOR)).clamp(-RAW_CLIP, RAW_CLIP))
}

/// Dataset-level statistics of raw qualities (population moments).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    pub mean: f64,
    pub std: f64,
}

impl QualityStats {
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 || raw.iter().any(|q| !q.is_finite()) {
            return Err(QualityError::DegenerateDistribution);
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(QualityError::DegenerateDistribution);
        }
        Ok(Self { mean, std })
    }

    /// `sigmoid((q − mean) / std)`.
    pub fn normalize(&self, raw: f64) -> f64 {
        sigmoid((raw - self.mean) / self.std)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Z-scores every raw quality against the whole list and squashes it.
pub fn quality_normalize(raw_all: &[f64]) -> Result<(Vec<f64>, QualityStats)> {
    let stats = QualityStats::from_raw(raw_all)?;
    Ok((raw_all.iter().map(|&q| stats.normalize(q)).collect(), stats))
}

/// Per-set affine stretch `w = K·q + B` with `K = 1/(max − min)` and
/// `B = 1 − K·max`, so the best frame gets weight 1 and the worst 0.
///
/// Evaluated as `(q − min)/(max − min)`, the same map, which keeps both
/// endpoints exact in floating point.
pub fn quality_rescale(q: &[f64]) -> Result<Vec<f64>> {
    if q.len() < 3 {
        return Err(QualityError::TooFewForRescale(q.len()));
    }
    let (min, max) = min_max(q);
    if !(max > min) {
        return Err(QualityError::AllEqual);
    }
    let range = max - min;
    Ok(q.iter().map(|&v| (v - min) / range).collect())
}

fn min_max(q: &[f64]) -> (f64, f64) {
    q.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Weights used by the `qan_pp` policy: rescaled qualities for sets of three
/// or more frames, uniform weights if they are all equal, raw normalized
/// qualities for smaller sets.
pub fn qan_pp_weights(q: &[f64]) -> Result<Vec<f64>> {
    match quality_rescale(q) {
        Ok(w) => Ok(w),
        Err(QualityError::TooFewForRescale(_)) => Ok(q.to_vec()),
        Err(QualityError::AllEqual) => Ok(vec![1.0; q.len()]),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    Avg,
    WeightedSum,
    Top1,
    QanPp,
}

impl AggregationPolicy {
    pub const ALL: [AggregationPolicy; 4] = [
        AggregationPolicy::Avg,
        AggregationPolicy::WeightedSum,
        AggregationPolicy::Top1,
        AggregationPolicy::QanPp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationPolicy::Avg => "avg",
            AggregationPolicy::WeightedSum => "weighted_sum",
            AggregationPolicy::Top1 => "top1",
            AggregationPolicy::QanPp => "qan_pp",
        }
    }

    pub fn needs_quality(self) -> bool {
        !matches!(self, AggregationPolicy::Avg)
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        AggregationPolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown aggregation policy {s:?}"))
    }
}

/// One video: ordered frame embeddings plus optional per-frame quality.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub set_id: String,
    frames: Vec<Embedding>,
    qualities: Option<Vec<f64>>,
}

impl FrameSet {
    pub fn new(
        set_id: impl Into<String>,
        frames: Vec<Embedding>,
        qualities: Option<Vec<f64>>,
    ) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(QualityError::EmptySet);
        };
        let dim = first.dim();
        if let Some(f) = frames.iter().find(|f| f.dim() != dim) {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: f.dim(),
            }
            .into());
        }
        if let Some(q) = &qualities {
            if q.len() != frames.len() {
                return Err(QualityError::LengthMismatch {
                    expected: frames.len(),
                    found: q.len(),
                });
            }
        }
        Ok(Self {
            set_id: set_id.into(),
            frames,
            qualities,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    pub fn frames(&self) -> &[Embedding] {
        &self.frames
    }

    pub fn qualities(&self) -> Option<&[f64]> {
        self.qualities.as_deref()
    }

    pub fn set_qualities(&mut self, q: Vec<f64>) -> Result<()> {
        if q.len() != self.frames.len() {
            return Err(QualityError::LengthMismatch {
                expected: self.frames.len(),
                found: q.len(),
            });
        }
        self.qualities = Some(q);
        Ok(())
    }
}

/// `normalize(Σ w_i F_i / Σ w_i)`; summation runs in frame order.
pub fn weighted_mean(frames: &[Embedding], weights: &[f64]) -> Result<Embedding> {
    if frames.is_empty() {
        return Err(QualityError::EmptySet);
    }
    if weights.len() != frames.len() {
        return Err(QualityError::LengthMismatch {
            expected: frames.len(),
            found: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(QualityError::InvalidQuality(w));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(QualityError::ZeroWeights);
    }
    // equal weights reduce to the plain mean bit for bit
    let unit = vec![1.0; weights.len()];
    let weights = if weights.iter().all(|&w| w == weights[0]) {
        &unit[..]
    } else {
        weights
    };
    let total: f64 = weights.iter().sum();
    let mut acc = Array1::<f64>::zeros(frames[0].dim());
    for (f, &w) in frames.iter().zip(weights) {
        acc.scaled_add(w, &f.view());
    }
    acc /= total;
    Ok(normalize(acc.view())?)
}

/// Collapses a frame set into a single unit embedding.
pub fn aggregate(set: &FrameSet, policy: AggregationPolicy) -> Result<Embedding> {
    if set.is_empty() {
        return Err(QualityError::EmptySet);
    }
    let quality = || {
        set.qualities()
            .ok_or(QualityError::MissingQualities(policy))
    };
    match policy {
        AggregationPolicy::Avg => weighted_mean(set.frames(), &vec![1.0; set.len()]),
        AggregationPolicy::WeightedSum => weighted_mean(set.frames(), quality()?),
        AggregationPolicy::Top1 => {
            let q = quality()?;
            if let Some(&bad) = q.iter().find(|v| !v.is_finite()) {
                return Err(QualityError::InvalidQuality(bad));
            }
            // first maximum wins on ties
            let best = q
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > q[best] { i } else { best });
            Ok(set.frames()[best].clone())
        }
        AggregationPolicy::QanPp => weighted_mean(set.frames(), &qan_pp_weights(quality()?)?),
    }
}

/// Regression targets for the quality branch: raw quality of every training
/// feature against its own anchor, normalized over the whole set.
pub fn quality_regression_target(
    features: &[Embedding],
    anchors: &AnchorSet,
    labels: &[usize],
) -> Result<(Vec<f64>, QualityStats)> {
    if anchors.num_classes() < 2 {
        return Err(QualityError::SingleClass);
    }
    if labels.len() != features.len() {
        return Err(QualityError::LengthMismatch {
            expected: features.len(),
            found: labels.len(),
        });
    }
    let raw = features
        .iter()
        .zip(labels)
        .map(|(f, &c)| quality_raw(f, anchors, c))
        .collect::<Result<Vec<_>>>()?;
    quality_normalize(&raw)
}

/// Mean squared error and its gradient with respect to the predictions.
pub fn l2_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// Writes frame sets as `set_id,frame_idx,quality,dim0..dim{d-1}`.
pub fn write_framesets_csv<W: Write>(writer: W, sets: &[FrameSet]) -> Result<()> {
    let dim = sets.first().map(FrameSet::dim).unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["set_id".to_string(), "frame_idx".into(), "quality".into()];
    header.extend((0..dim).map(|k| format!("dim{k}")));
    w.write_record(&header)?;
    for set in sets {
        if set.dim() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: set.dim(),
            }
            .into());
        }
        for (idx, frame) in set.frames().iter().enumerate() {
            let mut record = Vec::with_capacity(dim + 3);
            record.push(set.set_id.clone());
            record.push(idx.to_string());
            record.push(
                set.qualities()
                    .map(|q| format_real(q[idx]))
                    .unwrap_or_default(),
            );
            record.extend(frame.as_slice().iter().map(|x| format_real(*x)));
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(NumericError::from)?;
    Ok(())
}

/// Reads frame sets; rows are grouped by `set_id` and ordered by
/// `frame_idx`. Sets come back in order of first appearance. A set's
/// qualities are present only if every one of its rows has one.
pub fn read_framesets_csv<R: Read>(reader: R) -> Result<Vec<FrameSet>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let fixed = ["set_id", "frame_idx", "quality"];
    if header.len() < 4 || header.iter().take(3).ne(fixed) {
        return Err(QualityError::Format(
            "expected header set_id,frame_idx,quality,dim0,...".into(),
        ));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, Option<f64>, Embedding)>> = BTreeMap::new();
    for record in r.records() {
        let record = record?;
        let set_id = record[0].to_string();
        let idx: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| QualityError::Format(format!("bad frame_idx {:?}", &record[1])))?;
        let quality = match record[2].trim() {
            "" => None,
            s => Some(parse_real(s)?),
        };
        let values = record
            .iter()
            .skip(3)
            .map(parse_real)
            .collect::<Result<Vec<_>, _>>()?;
        let frame = Embedding::from_unit(Array1::from(values))?;
        if !rows.contains_key(&set_id) {
            order.push(set_id.clone());
        }
        rows.entry(set_id).or_default().push((idx, quality, frame));
    }
    order
        .into_iter()
        .map(|id| {
            let mut frames = rows.remove(&id).unwrap_or_default();
            frames.sort_by_key(|(idx, _, _)| *idx);
            let qualities: Option<Vec<f64>> = frames.iter().map(|(_, q, _)| *q).collect();
            let frames = frames.into_iter().map(|(_, _, f)| f).collect();
            FrameSet::new(id, frames, qualities)
        })
        .collect()
}
