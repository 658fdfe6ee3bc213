//! Synthetic identities on the unit sphere and corrupted "video" frame sets.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::numeric::{normalize, Embedding, SeededRng};

/// RNG stream labels; every component draws from its own split of the root seed.
pub mod streams {
    pub const PROTOTYPES: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const TEST_SAMPLES: u64 = 3;
    pub const TEST_FRAMES: u64 = 4;
    pub const TRAIN_FRAMES: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const TRAIN_LOOP: u64 = 7;
}

/// The `[data]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Training identities.
    pub num_identities: usize,
    /// Held-out identities, disjoint from training ones.
    pub test_identities: usize,
    pub samples_per_id: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Per-coordinate standard deviation of the sample noise.
    pub noise_sigma: f64,
    /// Fraction of video frames that are corrupted.
    pub corrupt_fraction: f64,
    /// Frame sets generated per identity.
    pub sets_per_identity: usize,
    /// Frames per set are drawn uniformly from `1..=max_frames`.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 200,
            test_identities: 50,
            samples_per_id: 20,
            input_dim: 64,
            hidden_dim: 128,
            embed_dim: 16,
            noise_sigma: 0.1,
            corrupt_fraction: 0.3,
            sets_per_identity: 8,
            max_frames: 16,
            seed: 20190915,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.num_identities < 2 || self.test_identities < 2 {
            return bad("need at least two training and two test identities");
        }
        if self.samples_per_id == 0
            || self.input_dim == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
        {
            return bad("sizes must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return bad("corrupt_fraction must lie in [0, 1]");
        }
        if self.max_frames == 0 || self.sets_per_identity == 0 {
            return bad("max_frames and sets_per_identity must be positive");
        }
        if self.embed_dim > self.input_dim {
            log::warn!(
                "embed_dim {} exceeds input_dim {}",
                self.embed_dim,
                self.input_dim
            );
        }
        Ok(())
    }
}

/// Labeled input vectors of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// One unit-norm input per row.
    pub inputs: Array2<f64>,
    /// Dense label in `0..identities.len()`.
    pub labels: Vec<usize>,
    /// Global identity id of each dense label.
    pub identities: Vec<u32>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn identity_of(&self, row: usize) -> u32 {
        self.identities[self.labels[row]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub train_prototypes: Vec<Embedding>,
    pub test_prototypes: Vec<Embedding>,
}

fn noisy(proto: &Embedding, sigma: f64, rng: &mut SeededRng) -> Embedding {
    loop {
        let v = &proto.view() + &(rng.normal_vec(proto.dim()) * sigma);
        if let Ok(e) = normalize(v.view()) {
            return e;
        }
    }
}

fn sample_split(
    protos: &[Embedding],
    ids: Vec<u32>,
    per_id: usize,
    sigma: f64,
    rng: &mut SeededRng,
) -> LabeledSet {
    let dim = protos[0].dim();
    let mut inputs = Array2::zeros((protos.len() * per_id, dim));
    let mut labels = Vec::with_capacity(protos.len() * per_id);
    for (label, p) in protos.iter().enumerate() {
        for k in 0..per_id {
            let row = label * per_id + k;
            inputs.row_mut(row).assign(&noisy(p, sigma, rng).view());
            labels.push(label);
        }
    }
    LabeledSet {
        inputs,
        labels,
        identities: ids,
    }
}

/// Draws identity prototypes uniformly on the sphere and noisy samples of
/// each. Training identities get ids `0..num_identities`, test identities
/// the ids after them.
pub fn gen_identities(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut proto_rng = root.split(streams::PROTOTYPES);
    let total = spec.num_identities + spec.test_identities;
    let protos: Vec<Embedding> = (0..total)
        .map(|_| proto_rng.unit_vector(spec.input_dim))
        .collect();
    let (train_protos, test_protos) = protos.split_at(spec.num_identities);

    let train_ids: Vec<u32> = (0..spec.num_identities as u32).collect();
    let test_ids: Vec<u32> = (spec.num_identities as u32..total as u32).collect();
    let train = sample_split(
        train_protos,
        train_ids,
        spec.samples_per_id,
        spec.noise_sigma,
        &mut root.split(streams::TRAIN_SAMPLES),
    );
    let test = sample_split(
        test_protos,
        test_ids,
        spec.samples_per_id,
        spec.noise_sigma,
        &mut root.split(streams::TEST_SAMPLES),
    );
    if test
        .identities
        .iter()
        .any(|id| train.identities.contains(id))
    {
        return Err(HarnessError::InvalidSpec(
            "test identity leaked into training".into(),
        ));
    }
    Ok(SyntheticData {
        train,
        test,
        train_prototypes: train_protos.to_vec(),
        test_prototypes: test_protos.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Clean,
    /// Noise standard deviation multiplied by five.
    Noisy,
    /// Prototype blended 50/50 with another identity's prototype.
    Blended,
}

/// A synthetic video of one identity, still in input space.
///
/// Frames are raw `center + noise` captures without renormalization, so
/// corruption also shifts generic input statistics such as the norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrameSet {
    /// `"{identity}#{k}"`.
    pub set_id: String,
    pub identity: u32,
    pub inputs: Array2<f64>,
    pub corruption: Vec<Corruption>,
}

/// Noise multiplier applied to corrupted frames.
pub const CORRUPT_NOISE_FACTOR: f64 = 5.0;

/// Frame sets for the given prototypes, `sets_per_identity` per identity,
/// each with `1..=max_frames` frames of which roughly `corrupt_fraction`
/// are corrupted (half by heavy noise, half by blending).
pub fn gen_framesets(
    spec: &SyntheticSpec,
    prototypes: &[Embedding],
    identities: &[u32],
    rng: &mut SeededRng,
) -> Result<Vec<SyntheticFrameSet>> {
    spec.validate()?;
    if prototypes.len() != identities.len() || prototypes.len() < 2 {
        return Err(HarnessError::InvalidSpec(
            "need at least two prototypes with ids".into(),
        ));
    }
    let dim = prototypes[0].dim();
    let mut out = Vec::with_capacity(prototypes.len() * spec.sets_per_identity);
    for (p_idx, (proto, &identity)) in prototypes.iter().zip(identities).enumerate() {
        for k in 0..spec.sets_per_identity {
            let n = 1 + rng.index(spec.max_frames);
            let mut inputs = Array2::zeros((n, dim));
            let mut corruption = Vec::with_capacity(n);
            for f in 0..n {
                let kind = if rng.bernoulli(spec.corrupt_fraction) {
                    if rng.bernoulli(0.5) {
                        Corruption::Noisy
                    } else {
                        Corruption::Blended
                    }
                } else {
                    Corruption::Clean
                };
                let (center, sigma) = match kind {
                    Corruption::Clean => (proto.view().to_owned(), spec.noise_sigma),
                    Corruption::Noisy => (
                        proto.view().to_owned(),
                        spec.noise_sigma * CORRUPT_NOISE_FACTOR,
                    ),
                    Corruption::Blended => {
                        let other =
                            (p_idx + 1 + rng.index(prototypes.len() - 1)) % prototypes.len();
                        (
                            (&proto.view() + &prototypes[other].view()) * 0.5,
                            spec.noise_sigma,
                        )
                    }
                };
                let frame = center + rng.normal_vec(dim) * sigma;
                inputs.row_mut(f).assign(&frame);
                corruption.push(kind);
            }
            out.push(SyntheticFrameSet {
                set_id: format!("{identity}#{k}"),
                identity,
                inputs,
                corruption,
            });
        }
    }
    Ok(out)
}
