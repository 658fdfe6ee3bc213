//! Verification pairs, ROC curves and TPR at a fixed FPR.
//!
//! Thresholds follow a step rule without interpolation: scores at or above
//! the threshold are accepted, and the threshold for a target FPR is the
//! smallest impostor score (or a sentinel just above the largest one) whose
//! false-accept rate does not exceed the target.

use ndarray::Array2;
use rand::seq::index;
use thiserror::Error;

use crate::numeric::{stack, Embedding, NumericError, SeededRng};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least two identities to form impostor pairs")]
    InsufficientData,
    #[error("{0} scores are empty")]
    EmptyScores(&'static str),
    #[error("score list contains a non-finite value")]
    NonFinite,
    #[error("fpr target {0} outside [0, 1]")]
    InvalidTarget(f64),
    #[error("{labels} labels for {embeddings} embeddings")]
    LabelCount { embeddings: usize, labels: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    All,
    /// Up to `pairs` genuine pairs without replacement and `pairs` impostor
    /// pairs drawn with replacement.
    Sampled {
        pairs: usize,
        seed: u64,
    },
}

/// Identity label of an embedding id: the part before the first `#`.
pub fn label_of(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

/// Cosine scores of same-label (genuine) and cross-label (impostor) pairs.
pub fn verification_pairs<L: Eq>(
    embeddings: &[Embedding],
    labels: &[L],
    pairing: Pairing,
) -> Result<ScoreSet> {
    if labels.len() != embeddings.len() {
        return Err(MetricsError::LabelCount {
            embeddings: embeddings.len(),
            labels: labels.len(),
        });
    }
    let Some(first) = labels.first() else {
        return Err(MetricsError::InsufficientData);
    };
    if labels.iter().all(|l| l == first) {
        return Err(MetricsError::InsufficientData);
    }
    let dim = embeddings[0].dim();
    let feats = stack(embeddings, dim)?;
    let n = embeddings.len();
    let score = |i: usize, j: usize| feats.row(i).dot(&feats.row(j)).clamp(-1.0, 1.0);

    match pairing {
        Pairing::All => {
            let gram: Array2<f64> = feats.dot(&feats.t());
            let mut out = ScoreSet::default();
            for i in 0..n {
                for j in i + 1..n {
                    let s = gram[[i, j]].clamp(-1.0, 1.0);
                    if labels[i] == labels[j] {
                        out.genuine.push(s);
                    } else {
                        out.impostor.push(s);
                    }
                }
            }
            Ok(out)
        }
        Pairing::Sampled { pairs, seed } => {
            let root = SeededRng::new(seed);
            let genuine_idx: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| labels[i] == labels[j])
                .collect();
            let genuine = if pairs >= genuine_idx.len() {
                genuine_idx.iter().map(|&(i, j)| score(i, j)).collect()
            } else {
                let mut rng = root.split(1);
                let mut picked = index::sample(&mut rng, genuine_idx.len(), pairs).into_vec();
                picked.sort_unstable();
                picked
                    .into_iter()
                    .map(|k| {
                        let (i, j) = genuine_idx[k];
                        score(i, j)
                    })
                    .collect()
            };
            let mut rng = root.split(2);
            let mut impostor = Vec::with_capacity(pairs);
            while impostor.len() < pairs {
                let i = rng.index(n);
                let j = rng.index(n);
                if labels[i] != labels[j] {
                    impostor.push(score(i, j));
                }
            }
            Ok(ScoreSet { genuine, impostor })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TprAtFpr {
    pub tpr: f64,
    pub threshold: f64,
    /// False-accept rate actually realized at `threshold`.
    pub fpr: f64,
}

fn sorted_finite(v: &[f64], which: &'static str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(MetricsError::EmptyScores(which));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Number of entries of an ascending slice that are `>= t`.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x < t)
}

/// TPR at the smallest threshold whose FPR is at most `fpr_target`.
pub fn tpr_at_fpr(scores: &ScoreSet, fpr_target: f64) -> Result<TprAtFpr> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(MetricsError::InvalidTarget(fpr_target));
    }
    let genuine = sorted_finite(&scores.genuine, "genuine")?;
    let impostor = sorted_finite(&scores.impostor, "impostor")?;
    let n_imp = impostor.len() as f64;

    // count(i >= v) shrinks as v grows, so the first qualifying value is the smallest
    let mut threshold = impostor[impostor.len() - 1].next_up();
    let mut start = 0;
    while start < impostor.len() {
        let v = impostor[start];
        let count = impostor.len() - start;
        if count as f64 / n_imp <= fpr_target {
            threshold = v;
            break;
        }
        start += impostor[start..].partition_point(|&x| x <= v);
    }
    let accepted = count_at_least(&impostor, threshold);
    Ok(TprAtFpr {
        tpr: count_at_least(&genuine, threshold) as f64 / genuine.len() as f64,
        threshold,
        fpr: accepted as f64 / n_imp,
    })
}

/// Smallest FPR distinguishable with this many impostor pairs.
pub fn fpr_resolution(num_impostor: usize) -> f64 {
    1.0 / num_impostor.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// One point per distinct score, thresholds descending, starting from the
/// `(0, 0)` point at an infinite threshold.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    let genuine = sorted_finite(&scores.genuine, "genuine")?;
    let impostor = sorted_finite(&scores.impostor, "impostor")?;
    let mut distinct: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup_by(|a, b| a == b);
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    });
    for t in distinct {
        out.push(RocPoint {
            threshold: t,
            tpr: count_at_least(&genuine, t) as f64 / ng,
            fpr: count_at_least(&impostor, t) as f64 / ni,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normalize_slice;

    fn set(g: &[f64], i: &[f64]) -> ScoreSet {
        ScoreSet {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    #[test]
    fn pair_counts() {
        let e: Vec<Embedding> = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]
            .iter()
            .map(|v| normalize_slice(v).unwrap())
            .collect();
        let s = verification_pairs(&e, &[0, 0, 1, 1], Pairing::All).unwrap();
        assert_eq!((s.genuine.len(), s.impostor.len()), (2, 4));
    }

    #[test]
    fn identical_embeddings_score_one() {
        let e = vec![normalize_slice(&[0.3, 0.4]).unwrap(); 4];
        let s = verification_pairs(&e, &["a", "a", "b", "b"], Pairing::All).unwrap();
        assert!(s
            .genuine
            .iter()
            .chain(&s.impostor)
            .all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = SeededRng::new(1);
        let e: Vec<Embedding> = (0..30).map(|_| rng.unit_vector(5)).collect();
        let labels: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let p = Pairing::Sampled { pairs: 12, seed: 9 };
        let a = verification_pairs(&e, &labels, p).unwrap();
        let b = verification_pairs(&e, &labels, p).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.genuine.len(), a.impostor.len()), (12, 12));
    }

    #[test]
    fn single_identity_is_insufficient() {
        let e = vec![normalize_slice(&[1.0, 0.0]).unwrap(); 3];
        assert!(matches!(
            verification_pairs(&e, &[1, 1, 1], Pairing::All),
            Err(MetricsError::InsufficientData)
        ));
    }

    #[test]
    fn zero_fpr_uses_sentinel_above_max() {
        let s = set(&[0.9, 0.8, 0.7], &[0.4, 0.3, 0.2]);
        let r = tpr_at_fpr(&s, 0.0).unwrap();
        assert_eq!(r.tpr, 1.0);
        assert!(r.threshold > 0.4 && r.threshold == 0.4f64.next_up());
        assert_eq!(r.fpr, 0.0);
    }

    #[test]
    fn full_fpr_accepts_everything() {
        let s = set(&[0.9, 0.1, 0.05], &[0.4, 0.3, 0.2]);
        let r = tpr_at_fpr(&s, 1.0).unwrap();
        assert_eq!(r.threshold, 0.2);
        assert!((r.tpr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_count_as_accepts() {
        let s = set(&[0.5, 0.5], &[0.5, 0.1, 0.1, 0.1]);
        let r = tpr_at_fpr(&s, 0.25).unwrap();
        assert_eq!(r.threshold, 0.5);
        assert_eq!(r.tpr, 1.0);
        assert_eq!(r.fpr, 0.25);
    }

    #[test]
    fn score_errors() {
        assert!(matches!(
            tpr_at_fpr(&set(&[], &[0.1]), 0.1),
            Err(MetricsError::EmptyScores("genuine"))
        ));
        assert!(matches!(
            tpr_at_fpr(&set(&[0.1], &[0.1]), 1.5),
            Err(MetricsError::InvalidTarget(_))
        ));
        assert!(matches!(
            tpr_at_fpr(&set(&[f64::NAN], &[0.1]), 0.1),
            Err(MetricsError::NonFinite)
        ));
        assert!(roc_curve(&set(&[0.1], &[])).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let r = roc_curve(&set(&[1.0], &[0.0])).unwrap();
        assert_eq!(
            r[0],
            RocPoint {
                threshold: f64::INFINITY,
                tpr: 0.0,
                fpr: 0.0
            }
        );
        assert!(r.iter().any(|p| p.tpr == 1.0 && p.fpr == 0.0));
        let last = r.last().unwrap();
        assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
    }

    #[test]
    fn roc_diagonal_for_identical_distributions() {
        let v = [-0.5, 0.1, 0.1, 0.3, 0.9];
        let r = roc_curve(&set(&v, &v)).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.iter().all(|p| p.tpr == p.fpr));
        assert!(r.windows(2).all(|w| w[0].threshold > w[1].threshold));
    }

    #[test]
    fn label_prefix() {
        assert_eq!(label_of("17#3"), "17");
        assert_eq!(label_of("17"), "17");
    }
}
