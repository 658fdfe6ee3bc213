//! End-to-end runs: train every configured loss, then score held-out
//! identities per image and per aggregated frame set.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::model::EmbeddingNet;
use super::synthetic::{gen_framesets, gen_identities, streams, SyntheticData, SyntheticFrameSet};
use super::train::{embeddings_of, train_model, TrainOutcome};
use super::Result;
use crate::loss::LossKind;
use crate::metrics::{fpr_resolution, tpr_at_fpr, verification_pairs, ScoreSet};
use crate::numeric::{format_real, SeededRng};
use crate::quality::{aggregate, AggregationPolicy, FrameSet};

/// Policy column value for the per-image protocol.
pub const IMAGE_PROTOCOL: &str = "image";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub loss: LossKind,
    /// `image` or an aggregation policy name.
    pub policy: String,
    pub fpr_target: f64,
    pub threshold: f64,
    pub tpr: f64,
}

pub const REPORT_HEADER: &str = "loss,policy,fpr_target,threshold,tpr";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.loss.name(),
            r.policy,
            r.fpr_target,
            format_real(r.threshold),
            format_real(r.tpr)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct LossRun {
    pub loss: LossKind,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<LossRun>,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        report_csv(&self.rows)
    }

    pub fn tpr(&self, loss: LossKind, policy: &str, fpr_target: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.loss == loss && r.policy == policy && r.fpr_target == fpr_target)
            .map(|r| r.tpr)
    }
}

/// Frame sets of the held-out identities, in input space.
pub fn test_framesets(
    cfg: &ExperimentConfig,
    data: &SyntheticData,
) -> Result<Vec<SyntheticFrameSet>> {
    let root = SeededRng::new(cfg.data.seed);
    gen_framesets(
        &cfg.data,
        &data.test_prototypes,
        &data.test.identities,
        &mut root.split(streams::TEST_FRAMES),
    )
}

/// Embeds every frame and attaches predicted qualities.
pub fn embed_framesets(net: &EmbeddingNet, sets: &[SyntheticFrameSet]) -> Result<Vec<FrameSet>> {
    sets.iter()
        .map(|s| {
            let frames = embeddings_of(net, s.inputs.view())?;
            let q = net.predict_quality(s.inputs.view());
            Ok(FrameSet::new(s.set_id.clone(), frames, Some(q))?)
        })
        .collect()
}

fn rows_for(
    cfg: &ExperimentConfig,
    loss: LossKind,
    policy: &str,
    scores: &ScoreSet,
) -> Result<Vec<ReportRow>> {
    cfg.eval
        .fpr_targets
        .iter()
        .map(|&target| {
            if target > 0.0 && target < fpr_resolution(scores.impostor.len()) {
                log::warn!(
                    "fpr target {target} is below the resolution 1/{} of the impostor pairs",
                    scores.impostor.len()
                );
            }
            let r = tpr_at_fpr(scores, target)?;
            Ok(ReportRow {
                loss,
                policy: policy.to_string(),
                fpr_target: target,
                threshold: r.threshold,
                tpr: r.tpr,
            })
        })
        .collect()
}

/// Report rows for one trained network: the image protocol first, then one
/// block per aggregation policy.
pub fn evaluate(
    cfg: &ExperimentConfig,
    loss: LossKind,
    net: &EmbeddingNet,
    data: &SyntheticData,
    sets: &[SyntheticFrameSet],
) -> Result<Vec<ReportRow>> {
    let pairing = cfg.eval.pairing(cfg.data.seed);
    let image_emb = embeddings_of(net, data.test.inputs.view())?;
    let image_labels: Vec<u32> = (0..data.test.len())
        .map(|i| data.test.identity_of(i))
        .collect();
    let scores = verification_pairs(&image_emb, &image_labels, pairing)?;
    let mut rows = rows_for(cfg, loss, IMAGE_PROTOCOL, &scores)?;

    let embedded = embed_framesets(net, sets)?;
    let set_labels: Vec<u32> = sets.iter().map(|s| s.identity).collect();
    for &policy in &cfg.aggregation.policies {
        let agg = embedded
            .iter()
            .map(|s| aggregate(s, policy))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let scores = verification_pairs(&agg, &set_labels, pairing)?;
        rows.extend(rows_for(cfg, loss, policy.name(), &scores)?);
    }
    Ok(rows)
}

/// Generates the data, trains one model per configured loss and evaluates
/// each on the held-out identities.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = gen_identities(&cfg.data)?;
    let sets = test_framesets(cfg, &data)?;
    let mut adabn_inputs: Vec<ArrayView2<'_, f64>> = vec![data.test.inputs.view()];
    adabn_inputs.extend(sets.iter().map(|s| s.inputs.view()));

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let hash = cfg.hash();
    for &kind in &cfg.loss.loss {
        let margin = cfg.loss.margin_config(kind);
        let outcome = train_model(cfg, &margin, &data, &adabn_inputs)?;
        rows.extend(evaluate(cfg, kind, &outcome.net, &data, &sets)?);
        let checkpoint = Checkpoint {
            config_hash: hash.clone(),
            loss: kind,
            iteration: outcome.iterations,
            net: outcome.net.clone(),
        };
        runs.push(LossRun {
            loss: kind,
            outcome,
            checkpoint,
        });
    }
    Ok(ExperimentResult { rows, runs })
}

/// Policies and the image protocol, in report order.
pub fn report_policies(cfg: &ExperimentConfig) -> Vec<String> {
    std::iter::once(IMAGE_PROTOCOL.to_string())
        .chain(
            cfg.aggregation
                .policies
                .iter()
                .map(|p: &AggregationPolicy| p.name().to_string()),
        )
        .collect()
}
