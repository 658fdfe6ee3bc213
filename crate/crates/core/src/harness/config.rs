//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [data]
//! seed = 7
//! [loss]
//! loss = ["arcface", "arcnegface"]   # or a single name
//! margin = 0.5
//! [schedule]
//! total_iters = 3000
//! anchor_finetune = true
//! [aggregation]
//! policies = ["avg", "qan_pp"]
//! [eval]
//! fpr_targets = [0.01]
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::SyntheticSpec;
use super::{HarnessError, Result};
use crate::dynamics::Schedule;
use crate::loss::{LossKind, MarginConfig, DEFAULT_LABEL_SMOOTH_EPS};
use crate::metrics::Pairing;
use crate::quality::AggregationPolicy;

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<LossKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(LossKind),
        Many(Vec<LossKind>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(k) => vec![k],
        OneOrMany::Many(v) => v,
    })
}

/// The `[loss]` section. Every listed loss is trained and reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    #[serde(deserialize_with = "one_or_many")]
    pub loss: Vec<LossKind>,
    pub scale: f64,
    pub margin: f64,
    pub neg_alpha: f64,
    pub neg_mu: f64,
    pub neg_sigma: f64,
    pub label_smooth: bool,
    /// Used when `label_smooth` is set; 0 selects the default of 0.1.
    pub label_smooth_eps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let m = MarginConfig::default();
        Self {
            loss: vec![m.loss],
            scale: m.scale,
            margin: m.margin,
            neg_alpha: m.neg_alpha,
            neg_mu: m.neg_mu,
            neg_sigma: m.neg_sigma,
            label_smooth: false,
            label_smooth_eps: 0.0,
        }
    }
}

impl LossSection {
    pub fn margin_config(&self, kind: LossKind) -> MarginConfig {
        let eps = match (self.label_smooth, self.label_smooth_eps) {
            (false, _) => 0.0,
            (true, 0.0) => DEFAULT_LABEL_SMOOTH_EPS,
            (true, e) => e,
        };
        MarginConfig {
            loss: kind,
            scale: self.scale,
            margin: self.margin,
            neg_alpha: self.neg_alpha,
            neg_mu: self.neg_mu,
            neg_sigma: self.neg_sigma,
            label_smooth_eps: eps,
        }
    }
}

/// The `[schedule]` section: learning rate, optimizer and training tricks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub floor_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Dropout rate on the hidden representation; 0 disables it.
    pub dropout: f64,
    pub stochastic_depth: bool,
    pub keep_rate: f64,
    pub bn_momentum: f64,
    pub anchor_finetune: bool,
    pub finetune_iters: u64,
    pub finetune_lr: f64,
    pub freeze_anchors: bool,
    pub adabn: bool,
    pub quality_iters: u64,
    pub quality_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            peak_lr: 0.1,
            warmup_iters: 300,
            total_iters: 3000,
            floor_lr: 0.0,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 1e-5,
            dropout: 0.4,
            stochastic_depth: true,
            keep_rate: 0.8,
            bn_momentum: 0.1,
            anchor_finetune: false,
            finetune_iters: 300,
            finetune_lr: 0.01,
            freeze_anchors: false,
            adabn: false,
            quality_iters: 500,
            quality_lr: 0.02,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_iters: self.warmup_iters,
            total_iters: self.total_iters,
            floor_lr: self.floor_lr,
        }
    }

    /// Residual branch scale used at inference.
    pub fn inference_keep_rate(&self) -> f64 {
        if self.stochastic_depth {
            self.keep_rate
        } else {
            1.0
        }
    }
}

/// The `[aggregation]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationSection {
    pub policies: Vec<AggregationPolicy>,
}

impl Default for AggregationSection {
    fn default() -> Self {
        Self {
            policies: AggregationPolicy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    All,
    Sampled,
}

/// The `[eval]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub fpr_targets: Vec<f64>,
    pub pairing: PairingMode,
    /// Pairs per kind when `pairing = "sampled"`.
    pub pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fpr_targets: vec![1e-2],
            pairing: PairingMode::All,
            pairs: 100_000,
        }
    }
}

impl EvalSection {
    pub fn pairing(&self, seed: u64) -> Pairing {
        match self.pairing {
            PairingMode::All => Pairing::All,
            PairingMode::Sampled => Pairing::Sampled {
                pairs: self.pairs,
                seed,
            },
        }
    }
}

/// The `[output]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub loss: LossSection,
    pub schedule: TrainSection,
    pub aggregation: AggregationSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output
    /// directory does not affect results and is left out.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output: OutputSection::default(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.data.validate()?;
        if self.loss.loss.is_empty() {
            return bad("[loss] lists no loss".into());
        }
        for &k in &self.loss.loss {
            self.loss.margin_config(k).validate()?;
        }
        let t = &self.schedule;
        // zero iterations is a valid "initialize only" run
        if t.total_iters > 0 {
            t.schedule().validate()?;
        }
        if t.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(t.keep_rate > 0.0 && t.keep_rate <= 1.0) {
            return bad("keep_rate must lie in (0, 1]".into());
        }
        if !(t.bn_momentum > 0.0 && t.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]".into());
        }
        if !(t.finetune_lr >= 0.0 && t.quality_lr > 0.0) {
            return bad("finetune_lr and quality_lr must be non-negative and positive".into());
        }
        if self.aggregation.policies.is_empty() {
            return bad("[aggregation] lists no policy".into());
        }
        if self.eval.fpr_targets.is_empty()
            || self
                .eval
                .fpr_targets
                .iter()
                .any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("fpr_targets must be non-empty and inside [0, 1]".into());
        }
        if self.eval.pairing == PairingMode::Sampled && self.eval.pairs == 0 {
            return bad("sampled pairing needs pairs > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(
            (
                d.data.num_identities,
                d.data.test_identities,
                d.data.samples_per_id
            ),
            (200, 50, 20)
        );
        assert_eq!((d.data.input_dim, d.data.embed_dim), (64, 16));
        assert_eq!((d.schedule.total_iters, d.schedule.batch_size), (3000, 128));
        assert_eq!(d.eval.fpr_targets, vec![1e-2]);
    }

    #[test]
    fn parses_sections() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [data]
            seed = 7
            noise_sigma = 0.2
            [loss]
            loss = ["arcface", "arcnegface"]
            label_smooth = true
            [schedule]
            total_iters = 50
            warmup_iters = 5
            adabn = true
            [aggregation]
            policies = ["avg", "qan_pp"]
            [eval]
            fpr_targets = [0.01, 0.1]
            [output]
            dir = "results"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.loss.loss, vec![LossKind::Arcface, LossKind::Arcnegface]);
        assert_eq!(
            cfg.loss.margin_config(LossKind::Arcface).label_smooth_eps,
            0.1
        );
        assert!(cfg.schedule.adabn);
        assert_eq!(
            cfg.aggregation.policies,
            vec![AggregationPolicy::Avg, AggregationPolicy::QanPp]
        );
        assert_eq!(cfg.output.dir, PathBuf::from("results"));
    }

    #[test]
    fn single_loss_name() {
        let cfg = ExperimentConfig::from_toml_str("[loss]\nloss = \"arcface\"\n").unwrap();
        assert_eq!(cfg.loss.loss, vec![LossKind::Arcface]);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "[loss]\nmargin = 2.0\n",
            "[schedule]\nwarmup_iters = 10\ntotal_iters = 5\n",
            "[eval]\nfpr_targets = [1.5]\n",
            "[data]\ncorrupt_fraction = -0.1\n",
            "[data]\nbogus = 1\n",
            "[aggregation]\npolicies = [\"median\"]\n",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.data.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
        let mut moved = cfg.clone();
        moved.output.dir = "elsewhere".into();
        assert_eq!(moved.hash(), cfg.hash());
    }
}
