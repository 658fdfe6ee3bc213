//! Vector primitives shared by every other module: unit-norm embeddings,
//! class-anchor sets, cosine similarity, a reproducible RNG and the
//! embedding CSV format.

use std::collections::HashSet;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Norms below this are treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance used when checking that stored vectors are unit length.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("cannot normalize a vector with L2 norm below {ZERO_NORM}")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector is empty")]
    Empty,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("row {row} is not unit length (norm {norm})")]
    NotUnit { row: usize, norm: f64 },
    #[error("duplicate class id {0}")]
    DuplicateClassId(u32),
    #[error("malformed embedding CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NumericError> = std::result::Result<T, E>;

/// A unit-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    /// Wraps a vector that is already unit length (checked to [`UNIT_TOL`]).
    pub fn from_unit(values: Array1<f64>) -> Result<Self> {
        check_finite(values.view())?;
        if values.is_empty() {
            return Err(NumericError::Empty);
        }
        let norm = l2_norm(values.view());
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(NumericError::NotUnit { row: 0, norm });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("embedding storage is contiguous")
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.dot(&other.0)
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other).clamp(-1.0, 1.0)
    }
}

pub fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn check_finite(v: ArrayView1<'_, f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericError::NonFinite)
    }
}

/// Returns `v / ||v||₂`.
pub fn normalize(v: ArrayView1<'_, f64>) -> Result<Embedding> {
    if v.is_empty() {
        return Err(NumericError::Empty);
    }
    check_finite(v)?;
    let norm = l2_norm(v);
    if norm < ZERO_NORM {
        return Err(NumericError::ZeroVector);
    }
    Ok(Embedding(v.mapv(|x| x / norm)))
}

pub fn normalize_slice(v: &[f64]) -> Result<Embedding> {
    normalize(ArrayView1::from(v))
}

/// Class anchors: one unit-norm row per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Array2<f64>,
    class_ids: Vec<u32>,
}

impl AnchorSet {
    /// Builds an anchor set, normalizing every row of `raw`.
    pub fn new(class_ids: Vec<u32>, raw: Array2<f64>) -> Result<Self> {
        let mut anchors = raw;
        for mut row in anchors.rows_mut() {
            let unit = normalize(row.view())?;
            row.assign(&unit.0);
        }
        Self::from_unit_rows(class_ids, anchors)
    }

    /// Builds an anchor set from rows that must already be unit length.
    pub fn from_unit_rows(class_ids: Vec<u32>, anchors: Array2<f64>) -> Result<Self> {
        if class_ids.len() != anchors.nrows() {
            return Err(NumericError::DimensionMismatch {
                expected: anchors.nrows(),
                found: class_ids.len(),
            });
        }
        if anchors.ncols() == 0 {
            return Err(NumericError::Empty);
        }
        let mut seen = HashSet::with_capacity(class_ids.len());
        for &id in &class_ids {
            if !seen.insert(id) {
                return Err(NumericError::DuplicateClassId(id));
            }
        }
        for (row, v) in anchors.rows().into_iter().enumerate() {
            check_finite(v)?;
            let norm = l2_norm(v);
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(NumericError::NotUnit { row, norm });
            }
        }
        Ok(Self { anchors, class_ids })
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.anchors.view()
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn anchor(&self, class: usize) -> ArrayView1<'_, f64> {
        self.anchors.row(class)
    }

    /// Row index of a class id.
    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Replaces one anchor with an already-normalized vector.
    pub(crate) fn set_anchor(&mut self, class: usize, unit: &Embedding) {
        self.anchors.row_mut(class).assign(&unit.0);
    }
}

/// `(i, j) = clamp(f_i · W_j, -1, 1)` for rows of `feats` against anchor rows.
pub fn cosine_rows(
    feats: ArrayView2<'_, f64>,
    anchors: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if feats.ncols() != anchors.ncols() {
        return Err(NumericError::DimensionMismatch {
            expected: anchors.ncols(),
            found: feats.ncols(),
        });
    }
    let mut cos = feats.dot(&anchors.t());
    cos.mapv_inplace(|c| c.clamp(-1.0, 1.0));
    Ok(cos)
}

/// N×C cosine matrix between embeddings and class anchors.
pub fn cosine_matrix(feats: &[Embedding], anchors: &AnchorSet) -> Result<Array2<f64>> {
    let stacked = stack(feats, anchors.dim())?;
    cosine_rows(stacked.view(), anchors.matrix())
}

/// Stacks embeddings into an N×d matrix, checking every dimension equals `dim`.
pub fn stack(feats: &[Embedding], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((feats.len(), dim));
    for (mut row, f) in out.axis_iter_mut(Axis(0)).zip(feats) {
        if f.dim() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: f.dim(),
            });
        }
        row.assign(&f.0);
    }
    Ok(out)
}

/// Deterministic generator: the ChaCha20 keystream (a counter-based cipher)
/// keyed from a 64-bit seed. Child generators for independent components are
/// derived with [`SeededRng::split`], which mixes the parent seed with a
/// stream label through SplitMix64 so that sibling streams never overlap in
/// practice and the derivation is platform independent.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for `stream`. Depends only on the seed,
    /// never on how many values the parent has drawn.
    pub fn split(&self, stream: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, written out so the draw sequence is pinned here.
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Vector of i.i.d. standard normals.
    pub fn normal_vec(&mut self, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| self.normal())
    }

    /// Uniform point on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Embedding {
        loop {
            let v = self.normal_vec(dim);
            if let Ok(e) = normalize(v.view()) {
                return e;
            }
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Writes `id,dim0,...,dim{d-1}` rows with 17 significant digits.
pub fn write_embeddings_csv<'a, W, I>(writer: W, dim: usize, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (String, &'a [f64])>,
{
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::with_capacity(dim + 1);
    header.push("id".to_string());
    header.extend((0..dim).map(|k| format!("dim{k}")));
    w.write_record(&header)?;
    for (id, values) in rows {
        if values.len() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        let mut record = Vec::with_capacity(dim + 1);
        record.push(id);
        record.extend(values.iter().map(|x| format_real(*x)));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_embeddings_csv`].
pub fn read_embeddings_csv<R: Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.get(0) != Some("id") || header.len() < 2 {
        return Err(NumericError::Format("expected header id,dim0,...".into()));
    }
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("dim{k}") {
            return Err(NumericError::Format(format!("unexpected column {name}")));
        }
    }
    let dim = header.len() - 1;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        let values = record
            .iter()
            .skip(1)
            .map(parse_real)
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(NumericError::DimensionMismatch {
                expected: dim,
                found: values.len(),
            });
        }
        out.push((id, values));
    }
    Ok(out)
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_real(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| NumericError::Format(format!("not a number: {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn normalize_three_four_five() {
        let e = normalize(array![3.0, 4.0].view()).unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let e = normalize(array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(e.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert!(matches!(
            normalize(array![0.0, 0.0].view()),
            Err(NumericError::ZeroVector)
        ));
        assert!(matches!(
            normalize(array![1e-13, 0.0].view()),
            Err(NumericError::ZeroVector)
        ));
    }

    #[test]
    fn normalize_rejects_nan() {
        assert!(matches!(
            normalize(array![f64::NAN, 1.0].view()),
            Err(NumericError::NonFinite)
        ));
    }

    #[test]
    fn cosine_examples() {
        let anchors = AnchorSet::new(vec![0, 1], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let f0 = normalize(array![1.0, 0.0].view()).unwrap();
        let f1 = normalize(array![0.6, 0.8].view()).unwrap();
        let cos = cosine_matrix(&[f0, f1], &anchors).unwrap();
        assert_eq!(cos[[0, 0]], 1.0);
        assert_eq!(cos[[0, 1]], 0.0);
        assert_eq!(cos[[1, 0]], 0.6);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let anchors = AnchorSet::new(vec![0], array![[1.0, 0.0, 0.0]]).unwrap();
        let f = normalize(array![1.0, 0.0].view()).unwrap();
        assert!(matches!(
            cosine_matrix(&[f], &anchors),
            Err(NumericError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn anchor_set_rejects_duplicate_ids() {
        let err = AnchorSet::new(vec![3, 3], Array2::eye(2)).unwrap_err();
        assert!(matches!(err, NumericError::DuplicateClassId(3)));
    }

    #[test]
    fn anchor_set_checks_unit_rows() {
        let err = AnchorSet::from_unit_rows(vec![0], array![[2.0, 0.0]]).unwrap_err();
        assert!(matches!(err, NumericError::NotUnit { .. }));
    }

    #[test]
    fn rng_is_reproducible_and_split_is_order_free() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        // a has advanced, b has too; splitting must not depend on that
        let mut c1 = a.split(7);
        let mut c2 = SeededRng::new(42).split(7);
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut d = SeededRng::new(42).split(8);
        assert_ne!(SeededRng::new(42).split(7).next_u64(), d.next_u64());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            ("a".to_string(), vec![0.1, -1.0 / 3.0]),
            ("b".to_string(), vec![f64::MIN_POSITIVE, 1e300]),
        ];
        let mut buf = Vec::new();
        write_embeddings_csv(
            &mut buf,
            2,
            rows.iter().map(|(id, v)| (id.clone(), v.as_slice())),
        )
        .unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,dim0,dim1\n"));
        let back = read_embeddings_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let err = read_embeddings_csv("name,x\nfoo,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, NumericError::Format(_)));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let v = Array1::from(v);
            prop_assume!(l2_norm(v.view()) > 1e-6);
            let once = normalize(v.view()).unwrap();
            let twice = normalize(once.view()).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            prop_assert!((l2_norm(once.view()) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant_and_bounded(
            f in proptest::collection::vec(-10f64..10.0, 4),
            w in proptest::collection::vec(-10f64..10.0, 4),
            k1 in 0.01f64..100.0,
            k2 in 0.01f64..100.0,
        ) {
            let f = Array1::from(f);
            let w = Array1::from(w);
            prop_assume!(l2_norm(f.view()) > 1e-3 && l2_norm(w.view()) > 1e-3);
            let base = {
                let a = AnchorSet::new(vec![0], w.clone().insert_axis(Axis(0))).unwrap();
                cosine_matrix(&[normalize(f.view()).unwrap()], &a).unwrap()[[0, 0]]
            };
            let scaled = {
                let a = AnchorSet::new(vec![0], (&w * k2).insert_axis(Axis(0))).unwrap();
                cosine_matrix(&[normalize((&f * k1).view()).unwrap()], &a).unwrap()[[0, 0]]
            };
            prop_assert!((-1.0..=1.0).contains(&base));
            prop_assert!((base - scaled).abs() < 1e-12);
        }
    }
}
