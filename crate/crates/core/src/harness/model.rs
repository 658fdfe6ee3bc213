//! Small feed-forward embedding network with hand-written backward pass.
//!
//! ```text
//! h1 = relu(W1·x + b1)
//! h2 = h1 + δ·relu(Wr·h1 + br)        δ ∈ {0, 1} per sample in training, keep rate at inference
//! d  = dropout(h2)
//! e  = W2·d
//! y  = γ ⊙ (e − μ)/sqrt(σ² + eps) + β  batch statistics in training, BnStats at inference
//! f  = y / ‖y‖
//! cos = f · normalize(A)ᵀ
//! ```

use ndarray::{Array, Array1, Array2, ArrayView2, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::dynamics::BnStats;
use crate::numeric::{SeededRng, ZERO_NORM};
use crate::quality::sigmoid;

pub const BN_EPS: f64 = 1e-5;

/// Trainable tensors. Gradients and momentum buffers use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub wr: Array2<f64>,
    pub br: Array1<f64>,
    pub w2: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Raw class anchors, one row per class; normalized on use.
    pub anchors: Array2<f64>,
}

fn sgd<D: Dimension>(
    p: &mut Array<f64, D>,
    g: &Array<f64, D>,
    v: &mut Array<f64, D>,
    lr: f64,
    momentum: f64,
    wd: f64,
) {
    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    });
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            wr: Array2::zeros(self.wr.raw_dim()),
            br: Array1::zeros(self.br.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            anchors: Array2::zeros(self.anchors.raw_dim()),
        }
    }

    /// SGD with momentum. Weight decay applies to weight matrices and anchors.
    pub fn sgd_step(
        &mut self,
        grads: &Params,
        velocity: &mut Params,
        lr: f64,
        momentum: f64,
        wd: f64,
        freeze_anchors: bool,
    ) {
        sgd(&mut self.w1, &grads.w1, &mut velocity.w1, lr, momentum, wd);
        sgd(&mut self.b1, &grads.b1, &mut velocity.b1, lr, momentum, 0.0);
        sgd(&mut self.wr, &grads.wr, &mut velocity.wr, lr, momentum, wd);
        sgd(&mut self.br, &grads.br, &mut velocity.br, lr, momentum, 0.0);
        sgd(&mut self.w2, &grads.w2, &mut velocity.w2, lr, momentum, wd);
        sgd(
            &mut self.gamma,
            &grads.gamma,
            &mut velocity.gamma,
            lr,
            momentum,
            0.0,
        );
        sgd(
            &mut self.beta,
            &grads.beta,
            &mut velocity.beta,
            lr,
            momentum,
            0.0,
        );
        if !freeze_anchors {
            sgd(
                &mut self.anchors,
                &grads.anchors,
                &mut velocity.anchors,
                lr,
                momentum,
                wd,
            );
        }
    }

    /// Largest absolute entry across all tensors.
    pub fn max_abs(&self) -> f64 {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.wr.view().into_dyn(),
            self.br.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.gamma.view().into_dyn(),
            self.beta.view().into_dyn(),
            self.anchors.view().into_dyn(),
        ]
        .iter()
        .flat_map(|a| a.iter().copied())
        .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Linear quality regressor on standardized hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityHead {
    pub feat_mean: Array1<f64>,
    pub feat_inv_std: Array1<f64>,
    pub w: Array1<f64>,
    pub b: f64,
}

impl QualityHead {
    /// Predicts 0.5 for every input.
    pub fn neutral(hidden: usize) -> Self {
        Self {
            feat_mean: Array1::zeros(hidden),
            feat_inv_std: Array1::ones(hidden),
            w: Array1::zeros(hidden),
            b: 0.0,
        }
    }

    pub fn standardize(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        (&h - &self.feat_mean) * &self.feat_inv_std
    }

    pub fn predict(&self, h: ArrayView2<'_, f64>) -> Vec<f64> {
        self.standardize(h)
            .dot(&self.w)
            .iter()
            .map(|&z| sigmoid(z + self.b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub params: Params,
    pub bn: BnStats,
    pub quality: QualityHead,
    /// Identity id of each anchor row.
    pub class_ids: Vec<u32>,
    /// Residual branch scale at inference.
    pub keep_rate: f64,
}

/// Training-mode randomness for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct TrainMasks {
    /// Residual branch multiplier per row, 0 or 1; `None` keeps every branch.
    pub branch: Option<Array1<f64>>,
    /// Inverted-dropout multipliers (`0` or `1/(1−p)`), batch × hidden.
    pub dropout: Option<Array2<f64>>,
}

/// Intermediates of a training forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    ar: Array2<f64>,
    d: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    y_norm: Array1<f64>,
    /// Unit embeddings, batch × embed.
    pub f: Array2<f64>,
    anchors_unit: Array2<f64>,
    anchor_norms: Array1<f64>,
    /// Cosine of every embedding to every anchor.
    pub cos: Array2<f64>,
    /// Batch mean and population variance of the pre-normalization output.
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    masks: TrainMasks,
}

enum Branch<'a> {
    Scale(f64),
    Rows(&'a Array1<f64>),
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn relu_grad(g: Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mut g = g;
    Zip::from(&mut g).and(a).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(ZERO_NORM))
}

fn he_init(rows: usize, cols: usize, gain: f64, rng: &mut SeededRng) -> Array2<f64> {
    let std = gain * (2.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.normal() * std)
}

impl EmbeddingNet {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        class_ids: Vec<u32>,
        keep_rate: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let classes = class_ids.len();
        let w1 = he_init(hidden_dim, input_dim, 1.0, rng);
        let wr = he_init(hidden_dim, hidden_dim, 0.5, rng);
        let w2 = he_init(embed_dim, hidden_dim, 0.5, rng);
        let mut anchors = Array2::zeros((classes, embed_dim));
        for mut row in anchors.rows_mut() {
            row.assign(&rng.unit_vector(embed_dim).view());
        }
        Self {
            params: Params {
                w1,
                b1: Array1::zeros(hidden_dim),
                wr,
                br: Array1::zeros(hidden_dim),
                w2,
                gamma: Array1::ones(embed_dim),
                beta: Array1::zeros(embed_dim),
                anchors,
            },
            bn: BnStats::identity(embed_dim, BN_EPS),
            quality: QualityHead::neutral(hidden_dim),
            class_ids,
            keep_rate,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.w2.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.params.anchors.nrows()
    }

    /// Row-normalized anchors.
    pub fn unit_anchors(&self) -> Array2<f64> {
        let norms = row_norms(&self.params.anchors);
        &self.params.anchors / &norms.insert_axis(Axis(1))
    }

    fn trunk(
        &self,
        x: ArrayView2<'_, f64>,
        branch: Branch<'_>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let a1 = x.dot(&p.w1.t()) + &p.b1;
        let h1 = relu(&a1);
        let ar = h1.dot(&p.wr.t()) + &p.br;
        let r = relu(&ar);
        let h2 = match branch {
            Branch::Scale(s) => &h1 + &(r * s),
            Branch::Rows(m) => &h1 + &(r * m.view().insert_axis(Axis(1))),
        };
        (a1, h1, ar, h2)
    }

    /// Hidden representation `h2` at inference.
    pub fn hidden(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.trunk(x, Branch::Scale(self.keep_rate)).3
    }

    /// Pre-normalization output `e` at inference, the AdaBN input.
    pub fn pre_bn(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.hidden(x).dot(&self.params.w2.t())
    }

    fn finish(&self, e: Array2<f64>) -> Array2<f64> {
        let y = self.bn.standardize(e.view()) * &self.params.gamma + &self.params.beta;
        let norms = row_norms(&y);
        y / &norms.insert_axis(Axis(1))
    }

    /// Unit embeddings at inference.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.finish(self.pre_bn(x))
    }

    /// Unit embeddings and hidden activations at inference.
    pub fn embed_with_hidden(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.hidden(x);
        let e = h.dot(&self.params.w2.t());
        (self.finish(e), h)
    }

    pub fn predict_quality(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        self.quality.predict(self.hidden(x).view())
    }

    /// Training-mode forward with batch statistics.
    pub fn forward_train(&self, x: ArrayView2<'_, f64>, masks: TrainMasks) -> Cache {
        let p = &self.params;
        let branch = match &masks.branch {
            Some(m) => Branch::Rows(m),
            None => Branch::Scale(1.0),
        };
        let (a1, h1, ar, h2) = self.trunk(x, branch);
        let d = match &masks.dropout {
            Some(m) => &h2 * m,
            None => h2.clone(),
        };
        let e = d.dot(&p.w2.t());
        let n = e.nrows() as f64;
        let batch_mean = e.sum_axis(Axis(0)) / n;
        let centered = &e - &batch_mean;
        let batch_var = (&centered * &centered).sum_axis(Axis(0)) / n;
        let inv_std = batch_var.mapv(|v| 1.0 / (v + self.bn.eps).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &p.gamma + &p.beta;
        let y_norm = row_norms(&y);
        let f = &y / &y_norm.view().insert_axis(Axis(1));
        let anchor_norms = row_norms(&p.anchors);
        let anchors_unit = &p.anchors / &anchor_norms.view().insert_axis(Axis(1));
        let cos = f.dot(&anchors_unit.t()).mapv(|c| c.clamp(-1.0, 1.0));
        Cache {
            x: x.to_owned(),
            a1,
            h1,
            ar,
            d,
            xhat,
            inv_std,
            y_norm,
            f,
            anchors_unit,
            anchor_norms,
            cos,
            batch_mean,
            batch_var,
            masks,
        }
    }

    /// Gradients of all parameters given `∂loss/∂cos`.
    pub fn backward(&self, cache: &Cache, grad_cos: ArrayView2<'_, f64>) -> Params {
        let p = &self.params;
        let n = cache.x.nrows() as f64;

        // cos = f·Âᵀ
        let g_f = grad_cos.dot(&cache.anchors_unit);
        let g_ahat = grad_cos.t().dot(&cache.f);
        // Â = A/‖A‖ row-wise: ∂/∂A = (g − â(â·g))/‖A‖
        let proj = (&g_ahat * &cache.anchors_unit).sum_axis(Axis(1));
        let g_anchors = (&g_ahat - &(&cache.anchors_unit * &proj.view().insert_axis(Axis(1))))
            / cache.anchor_norms.view().insert_axis(Axis(1));

        // f = y/‖y‖
        let proj = (&g_f * &cache.f).sum_axis(Axis(1));
        let g_y = (&g_f - &(&cache.f * &proj.view().insert_axis(Axis(1))))
            / cache.y_norm.view().insert_axis(Axis(1));

        // batch norm
        let g_gamma = (&g_y * &cache.xhat).sum_axis(Axis(0));
        let g_beta = g_y.sum_axis(Axis(0));
        let g_xhat = &g_y * &p.gamma;
        let sum_g = g_xhat.sum_axis(Axis(0));
        let sum_gx = (&g_xhat * &cache.xhat).sum_axis(Axis(0));
        let g_e = ((&g_xhat * n) - &sum_g - &(&cache.xhat * &sum_gx)) * &(&cache.inv_std / n);

        let g_w2 = g_e.t().dot(&cache.d);
        let g_d = g_e.dot(&p.w2);
        let g_h2 = match &cache.masks.dropout {
            Some(m) => g_d * m,
            None => g_d,
        };

        let g_r = match &cache.masks.branch {
            Some(m) => &g_h2 * &m.view().insert_axis(Axis(1)),
            None => g_h2.clone(),
        };
        let g_ar = relu_grad(g_r, &cache.ar);
        let g_wr = g_ar.t().dot(&cache.h1);
        let g_br = g_ar.sum_axis(Axis(0));
        let g_h1 = &g_h2 + &g_ar.dot(&p.wr);
        let g_a1 = relu_grad(g_h1, &cache.a1);
        let g_w1 = g_a1.t().dot(&cache.x);
        let g_b1 = g_a1.sum_axis(Axis(0));

        Params {
            w1: g_w1,
            b1: g_b1,
            wr: g_wr,
            br: g_br,
            w2: g_w2,
            gamma: g_gamma,
            beta: g_beta,
            anchors: g_anchors,
        }
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running_stats(&mut self, cache: &Cache, momentum: f64) {
        self.bn.mean = &self.bn.mean * (1.0 - momentum) + &(&cache.batch_mean * momentum);
        self.bn.var = &self.bn.var * (1.0 - momentum) + &(&cache.batch_var * momentum);
    }
}

/// Inverted-dropout multipliers.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut SeededRng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn(
        (rows, cols),
        |_| if rng.bernoulli(rate) { 0.0 } else { keep },
    )
}
