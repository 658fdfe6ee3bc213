//! SGD training loop, optional anchor finetuning, AdaBN and quality head fit.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::config::ExperimentConfig;
use super::model::{dropout_mask, EmbeddingNet, Params, QualityHead, TrainMasks};
use super::synthetic::{gen_framesets, streams, LabeledSet, SyntheticData};
use super::{HarnessError, Result};
use crate::dynamics::{adabn_recalibrate, anchor_finetune, sample_depth_mask};
use crate::loss::{self, LossError, MarginConfig};
use crate::numeric::{format_real, AnchorSet, Embedding, SeededRng};
use crate::quality::{l2_loss, quality_regression_target, sigmoid};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(mut w: W, log: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "iter,lr,loss")?;
    for r in log {
        writeln!(
            w,
            "{},{},{}",
            r.iter,
            format_real(r.lr),
            format_real(r.loss)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: EmbeddingNet,
    /// Every optimizer step, finetuning included.
    pub log: Vec<LogRow>,
    /// Mean training loss of each complete pass over the training set
    /// during the main phase.
    pub epoch_losses: Vec<f64>,
    /// Optimizer steps taken.
    pub iterations: u64,
    /// Final L2 loss of the quality head, if it was fitted.
    pub quality_loss: Option<f64>,
}

fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    margin: MarginConfig,
    train: &'a LabeledSet,
    net: EmbeddingNet,
    velocity: Params,
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    epoch_sum: f64,
    epoch_count: usize,
    epoch_losses: Vec<f64>,
    log: Vec<LogRow>,
    iter: u64,
}

impl Trainer<'_> {
    /// Next mini-batch; a trailing remainder smaller than two is folded in
    /// so batch statistics stay defined.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.cursor >= n {
            if self.epoch_count == n {
                self.finish_epoch();
            }
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
            self.epoch_sum = 0.0;
            self.epoch_count = 0;
        }
        let mut end = (self.cursor + self.cfg.schedule.batch_size).min(n);
        if n - end < 2 {
            end = n;
        }
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    fn step(&mut self, lr: f64, freeze_anchors: bool) -> Result<f64> {
        let t = &self.cfg.schedule;
        let idx = self.next_batch();
        let x = select_rows(&self.train.inputs, &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();

        // one residual block per sample, so each row draws its own mask
        let branch = if t.stochastic_depth {
            let mask = sample_depth_mask(idx.len(), t.keep_rate, &mut self.rng)?;
            Some(
                mask.keep
                    .iter()
                    .map(|&k| if k { 1.0 } else { 0.0 })
                    .collect(),
            )
        } else {
            None
        };
        let dropout = (t.dropout > 0.0)
            .then(|| dropout_mask(idx.len(), self.net.hidden_dim(), t.dropout, &mut self.rng));
        let cache = self
            .net
            .forward_train(x.view(), TrainMasks { branch, dropout });

        let diverged = |loss: f64| HarnessError::DivergedLoss {
            iter: self.iter,
            loss,
        };
        let out = match loss::forward(cache.cos.view(), &labels, &self.margin) {
            Ok(out) => out,
            Err(LossError::NonFiniteInput(..)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e.into()),
        };
        if !out.loss.is_finite() {
            return Err(diverged(out.loss));
        }
        let grad_cos = loss::loss_backward(&out, &labels)?;
        let grads = self.net.backward(&cache, grad_cos.view());
        self.net.update_running_stats(&cache, t.bn_momentum);
        self.net.params.sgd_step(
            &grads,
            &mut self.velocity,
            lr,
            t.momentum,
            t.weight_decay,
            freeze_anchors,
        );
        if !self.net.params.max_abs().is_finite() {
            return Err(diverged(out.loss));
        }

        self.epoch_sum += out.loss * idx.len() as f64;
        self.epoch_count += idx.len();
        self.log.push(LogRow {
            iter: self.iter,
            lr,
            loss: out.loss,
        });
        self.iter += 1;
        Ok(out.loss)
    }

    fn finish_epoch(&mut self) {
        let n = self.order.len();
        self.epoch_losses.push(self.epoch_sum / n as f64);
        self.epoch_count = 0;
    }

    fn close_epoch(&mut self) {
        if self.cursor >= self.order.len() && self.epoch_count == self.order.len() {
            self.finish_epoch();
        }
    }
}

/// Unit embeddings of `inputs` as [`Embedding`]s.
pub fn embeddings_of(net: &EmbeddingNet, inputs: ArrayView2<'_, f64>) -> Result<Vec<Embedding>> {
    net.embed(inputs)
        .rows()
        .into_iter()
        .map(|r| Ok(Embedding::from_unit(r.to_owned())?))
        .collect()
}

/// Current anchors as a unit-row [`AnchorSet`].
pub fn anchor_set(net: &EmbeddingNet) -> Result<AnchorSet> {
    Ok(AnchorSet::new(
        net.class_ids.clone(),
        net.params.anchors.clone(),
    )?)
}

/// Trains the embedding model on `data.train` with one margin loss.
///
/// `adabn_inputs` are target-domain inputs used to recalibrate the
/// normalization statistics when `adabn` is enabled.
pub fn train_model(
    cfg: &ExperimentConfig,
    margin: &MarginConfig,
    data: &SyntheticData,
    adabn_inputs: &[ArrayView2<'_, f64>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    margin.validate()?;
    let t = &cfg.schedule;
    let root = SeededRng::new(cfg.data.seed);
    let net = EmbeddingNet::init(
        cfg.data.input_dim,
        cfg.data.hidden_dim,
        cfg.data.embed_dim,
        data.train.identities.clone(),
        t.inference_keep_rate(),
        &mut root.split(streams::MODEL_INIT),
    );
    let n = data.train.len();
    let mut tr = Trainer {
        cfg,
        margin: *margin,
        train: &data.train,
        velocity: net.params.zeros_like(),
        net,
        rng: root.split(streams::TRAIN_LOOP),
        order: (0..n).collect(),
        cursor: n,
        epoch_sum: 0.0,
        epoch_count: 0,
        epoch_losses: Vec::new(),
        log: Vec::new(),
        iter: 0,
    };

    let schedule = t.schedule();
    for it in 0..t.total_iters {
        let lr = schedule.lr_at(it)?;
        tr.step(lr, t.freeze_anchors)?;
    }
    tr.close_epoch();
    let epoch_losses = std::mem::take(&mut tr.epoch_losses);

    if t.anchor_finetune {
        let feats = embeddings_of(&tr.net, data.train.inputs.view())?;
        let anchors = anchor_finetune(&feats, &data.train.labels, &anchor_set(&tr.net)?)?;
        tr.net.params.anchors = anchors.matrix().to_owned();
        tr.velocity.anchors.fill(0.0);
        for _ in 0..t.finetune_iters {
            tr.step(t.finetune_lr, t.freeze_anchors)?;
        }
    }

    if t.adabn && !adabn_inputs.is_empty() {
        let batches: Vec<Array2<f64>> = adabn_inputs
            .iter()
            .flat_map(|x| {
                x.axis_chunks_iter(Axis(0), t.batch_size)
                    .map(|c| tr.net.pre_bn(c))
                    .collect::<Vec<_>>()
            })
            .collect();
        tr.net.bn = adabn_recalibrate(&batches, &tr.net.bn)?;
    }

    let quality_loss = if t.quality_iters > 0 {
        Some(fit_quality_head(&mut tr.net, cfg, data)?)
    } else {
        None
    };

    Ok(TrainOutcome {
        iterations: tr.iter,
        net: tr.net,
        log: tr.log,
        epoch_losses,
        quality_loss,
    })
}

/// Fits the linear quality head on frame sets of the training identities,
/// regressing normalized raw-quality targets computed with the trained
/// anchors. Returns the final L2 loss.
pub fn fit_quality_head(
    net: &mut EmbeddingNet,
    cfg: &ExperimentConfig,
    data: &SyntheticData,
) -> Result<f64> {
    let root = SeededRng::new(cfg.data.seed);
    let sets = gen_framesets(
        &cfg.data,
        &data.train_prototypes,
        &data.train.identities,
        &mut root.split(streams::TRAIN_FRAMES),
    )?;
    let views: Vec<ArrayView2<'_, f64>> = sets.iter().map(|s| s.inputs.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("frames share the input dimension");
    let labels: Vec<usize> = sets
        .iter()
        .flat_map(|s| {
            let label = data
                .train
                .identities
                .iter()
                .position(|&id| id == s.identity)
                .expect("training identity");
            std::iter::repeat_n(label, s.inputs.nrows())
        })
        .collect();

    let (emb, hidden) = net.embed_with_hidden(x.view());
    let feats: Vec<Embedding> = emb
        .rows()
        .into_iter()
        .map(|r| Embedding::from_unit(r.to_owned()))
        .collect::<std::result::Result<_, _>>()?;
    let (targets, _) = quality_regression_target(&feats, &anchor_set(net)?, &labels)?;

    let rows = hidden.nrows() as f64;
    let mean = hidden.sum_axis(Axis(0)) / rows;
    let var = (&hidden - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / rows;
    let inv_std = var.mapv(|v| if v > 1e-16 { 1.0 / v.sqrt() } else { 0.0 });
    let mut head = QualityHead {
        feat_mean: mean,
        feat_inv_std: inv_std,
        w: Array1::zeros(hidden.ncols()),
        b: 0.0,
    };
    let z = head.standardize(hidden.view());

    // full-batch Adam on the L2 loss
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const ADAM_EPS: f64 = 1e-8;
    let t = &cfg.schedule;
    let dim = z.ncols();
    let (mut mw, mut vw) = (Array1::<f64>::zeros(dim), Array1::<f64>::zeros(dim));
    let (mut mb, mut vb) = (0.0, 0.0);
    let mut last = f64::NAN;
    for k in 1..=t.quality_iters {
        let pred: Vec<f64> = z
            .dot(&head.w)
            .iter()
            .map(|&s| sigmoid(s + head.b))
            .collect();
        let (l, g) = l2_loss(&pred, &targets);
        last = l;
        let gz = Array1::from_iter(g.iter().zip(&pred).map(|(g, p)| g * p * (1.0 - p)));
        let gw = z.t().dot(&gz);
        let gb = gz.sum();
        mw = &mw * BETA1 + &(&gw * (1.0 - BETA1));
        vw = &vw * BETA2 + &(&gw * &gw * (1.0 - BETA2));
        mb = mb * BETA1 + gb * (1.0 - BETA1);
        vb = vb * BETA2 + gb * gb * (1.0 - BETA2);
        let c1 = 1.0 - BETA1.powi(k as i32);
        let c2 = 1.0 - BETA2.powi(k as i32);
        Zip::from(&mut head.w)
            .and(&mw)
            .and(&vw)
            .for_each(|w, &m, &v| {
                *w -= t.quality_lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            });
        head.b -= t.quality_lr * (mb / c1) / ((vb / c2).sqrt() + ADAM_EPS);
    }
    if !last.is_finite() {
        return Err(HarnessError::DivergedLoss {
            iter: t.quality_iters,
            loss: last,
        });
    }
    net.quality = head;
    Ok(last)
}
