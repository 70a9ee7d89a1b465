//! The learned explainer: an attention bottleneck over frozen point
//! features, two information-bottleneck training objectives, and score-map
//! extraction.
//!
//! The bottleneck reads tap-layer features z (D x N') and emits a soft mask
//! m in (0,1)^(D x N'):
//!
//! ```text
//! q = Wq z                    (Dr x N')
//! v = elu(Wv z)               (D  x N')
//! A = softmax(q z^T / sqrt(D))   rows normalized over the D channels
//! att = A v                  (Dr x N')
//! m = sigmoid(mlp(att))      (D  x N')
//! ```
//!
//! Every step is per-point or contracts the point axis symmetrically, so
//! permuting input points permutes the mask columns identically.
//!
//! Two objectives train the bottleneck against a frozen model, both of the
//! form `ce + beta * info` where ce is the cross-entropy of the masked
//! features pushed through the frozen remainder of the model:
//!
//! * selective: `zhat = m ⊙ z`, info = Monte Carlo divergence of the
//!   relaxed mask from a uniform prior (see `stoch::concrete_uniform_kl`).
//! * noise-injection: `zhat = m ⊙ z + sg(1 - m) ⊙ eps` with
//!   `eps ~ N(mu_z, sigma_z^2)` drawn per point per channel; info is the
//!   closed-form Gaussian divergence of the induced per-entry distribution
//!   `N(m z + (1-m) mu_z, (1-m)^2 sigma_z^2)` from the prior, averaged over
//!   points and channels. Entries whose mask saturates to exactly 1 carry
//!   no noise channel and contribute zero information cost.
//!
//! Both infos average (never sum) over points and channels, so beta values
//! are comparable across feature widths.

use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::graph::{Axis, Graph, GraphError, Value};
use crate::model::{
    head_logits, pool_from_tap, AffineParams, ModelError, ModelHandle, ModelParams, Optimizer,
    OptimizerKind, PriorStats,
};
use crate::rng::Rng;
use crate::shapes::PointCloud;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("explainer expects {expected}-dim features, model taps {found}")]
    DimMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Which information term trains the bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Noise-injection objective with a Gaussian feature prior.
    InfoCons,
    /// Mask-only objective with a uniform prior.
    SelectiveCp,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::InfoCons => "infocons",
            ObjectiveKind::SelectiveCp => "selective_cp",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infocons" => Ok(ObjectiveKind::InfoCons),
            "selective_cp" | "selective-cp" => Ok(ObjectiveKind::SelectiveCp),
            other => Err(ExplainError::InvalidConfig(format!(
                "unknown objective `{other}` (expected infocons or selective_cp)"
            ))),
        }
    }
}

/// Attention-bottleneck weights plus the hyperparameters they were trained
/// with. `w_query` is reduced x feature, `w_value` feature x feature; the
/// expansion MLP maps reduced -> reduced -> feature with a sigmoid output,
/// so every mask entry lies strictly inside (0, 1) until f64 saturation.
#[derive(Clone, Debug)]
pub struct BottleneckParams {
    pub w_query: Tensor,
    pub w_value: Tensor,
    pub mlp: Vec<AffineParams>,
    pub beta: f64,
    pub tau: f64,
    /// Gumbel/logistic draws per entry for the selective info estimator.
    pub noise_samples: usize,
    pub objective: ObjectiveKind,
    pub tap_layer: usize,
    /// Frozen feature statistics for inference-time noise and priors.
    pub prior: Option<PriorStats>,
    pub seed: u64,
}

impl BottleneckParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        feature_dim: usize,
        reduced_dim: usize,
        objective: ObjectiveKind,
        beta: f64,
        tau: f64,
        noise_samples: usize,
        tap_layer: usize,
        seed: u64,
    ) -> Result<Self> {
        if beta < 0.0 {
            return Err(ExplainError::InvalidConfig(format!(
                "beta must be non-negative, got {beta}"
            )));
        }
        if tau <= 0.0 || noise_samples == 0 {
            return Err(ExplainError::InvalidConfig(
                "tau must be positive and noise sample count at least 1".into(),
            ));
        }
        if reduced_dim == 0 || reduced_dim > feature_dim {
            return Err(ExplainError::InvalidConfig(format!(
                "reduced dim {reduced_dim} out of range 1..={feature_dim}"
            )));
        }
        let mut rng = Rng::new(seed);
        let std_q = (1.0 / feature_dim as f64).sqrt();
        Ok(BottleneckParams {
            w_query: Tensor::random_normal(reduced_dim, feature_dim, std_q, &mut rng),
            w_value: Tensor::random_normal(feature_dim, feature_dim, std_q, &mut rng),
            mlp: vec![
                AffineParams {
                    weight: Tensor::random_normal(
                        reduced_dim,
                        reduced_dim,
                        (1.0 / reduced_dim as f64).sqrt(),
                        &mut rng,
                    ),
                    bias: Tensor::zeros(reduced_dim, 1),
                },
                AffineParams {
                    weight: Tensor::random_normal(
                        feature_dim,
                        reduced_dim,
                        (1.0 / reduced_dim as f64).sqrt(),
                        &mut rng,
                    ),
                    bias: Tensor::zeros(feature_dim, 1),
                },
            ],
            beta,
            tau,
            noise_samples,
            objective,
            tap_layer,
            prior: None,
            seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_value.rows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.w_query.rows()
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.w_query.len() + self.w_value.len();
        for l in &self.mlp {
            n += l.weight.len() + l.bias.len();
        }
        n
    }
}

/// Graph handles for the bottleneck weights.
pub struct ThetaVals {
    wq: Value,
    wv: Value,
    mlp: Vec<(Value, Value)>,
}

/// Insert the weights into a graph, tracked (training) or frozen.
pub fn theta_values(g: &Graph, theta: &BottleneckParams, trainable: bool) -> ThetaVals {
    let put = |t: &Tensor| {
        if trainable {
            g.leaf(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    ThetaVals {
        wq: put(&theta.w_query),
        wv: put(&theta.w_value),
        mlp: theta
            .mlp
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias)))
            .collect(),
    }
}

/// Build the mask `m` for features `z` already in the graph.
pub fn attention_bottleneck_graph(g: &Graph, t: &ThetaVals, z: Value) -> Result<Value> {
    let d = g.shape(z).0;
    if g.shape(t.wv).1 != d {
        return Err(ExplainError::DimMismatch {
            expected: g.shape(t.wv).1,
            found: d,
        });
    }
    let q = g.matmul(t.wq, z)?;
    let v = g.elu(g.matmul(t.wv, z)?);
    let scores = g.scale_shift(g.matmul_nt(q, z)?, 1.0 / (d as f64).sqrt(), 0.0);
    let attn = g.softmax(scores, Axis::Cols);
    let mut h = g.matmul(attn, v)?;
    for (i, &(w, b)) in t.mlp.iter().enumerate() {
        h = g.add_bias(g.matmul(w, h)?, b)?;
        if i + 1 < t.mlp.len() {
            h = g.elu(h);
        }
    }
    Ok(g.sigmoid(h))
}

/// Mask for a feature matrix, frozen weights. Dimension mismatches between
/// the explainer and the model tap are rejected.
pub fn attention_bottleneck(theta: &BottleneckParams, z: &Tensor) -> Result<Tensor> {
    if z.rows() != theta.feature_dim() {
        return Err(ExplainError::DimMismatch {
            expected: theta.feature_dim(),
            found: z.rows(),
        });
    }
    let g = Graph::new();
    let t = theta_values(&g, theta, false);
    let zc = g.constant(z.clone());
    let m = attention_bottleneck_graph(&g, &t, zc)?;
    Ok(g.data_clone(m))
}

/// Loss pieces shared by both objectives.
pub struct LossParts {
    pub total: Value,
    pub ce: Value,
    pub info: Value,
    pub mask: Value,
}

/// Selective objective for one cloud: `ce(head(pool(m ⊙ z))) + beta * info`
/// with the mask's relaxed divergence from the uniform prior as info.
#[allow(clippy::too_many_arguments)]
pub fn selective_cp_loss_graph(
    g: &Graph,
    model: &ModelParams,
    t: &ThetaVals,
    z: Value,
    label: usize,
    beta: f64,
    tau: f64,
    noise_samples: usize,
    rng: &mut Rng,
) -> Result<LossParts> {
    if beta < 0.0 {
        return Err(ExplainError::InvalidConfig(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    let mask = attention_bottleneck_graph(g, t, z)?;
    let zhat = g.mul(mask, z)?;
    let pooled = pool_from_tap(g, model, zhat)?;
    let logits = head_logits(g, model, pooled)?;
    let ce = g.cross_entropy(logits, &[label])?;
    let info = g.concrete_uniform_kl(mask, tau, noise_samples, rng)?;
    let total = g.add(ce, g.scale_shift(info, beta, 0.0))?;
    Ok(LossParts {
        total,
        ce,
        info,
        mask,
    })
}

/// Noise-injection objective for one cloud. `eps` is drawn here, one draw
/// per point per channel; the `(1 - m)` noise gate carries a stop-gradient.
#[allow(clippy::too_many_arguments)]
pub fn infocons_loss_graph(
    g: &Graph,
    model: &ModelParams,
    t: &ThetaVals,
    z: Value,
    label: usize,
    beta: f64,
    prior: &PriorStats,
    rng: &mut Rng,
) -> Result<LossParts> {
    if beta < 0.0 {
        return Err(ExplainError::InvalidConfig(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    if prior.sigma.iter().any(|&s| s <= 0.0) {
        return Err(ExplainError::InvalidConfig(
            "prior standard deviations must be strictly positive".into(),
        ));
    }
    let (d, n) = g.shape(z);
    if prior.mu.len() != d {
        return Err(ExplainError::DimMismatch {
            expected: prior.mu.len(),
            found: d,
        });
    }
    let mask = attention_bottleneck_graph(g, t, z)?;

    // eps ~ N(mu_z, sigma_z^2), per point per channel.
    let mut eps = Tensor::zeros(d, n);
    for r in 0..d {
        for c in 0..n {
            eps.set(r, c, prior.mu[r] + prior.sigma[r] * rng.normal());
        }
    }
    let eps = g.constant(eps);
    let ones = g.constant(Tensor::full(d, n, 1.0));
    let gate = g.sub(ones, mask)?;
    let gate_sg = g.stop_grad(gate);
    let zhat = g.add(g.mul(mask, z)?, g.mul(gate_sg, eps)?)?;
    let pooled = pool_from_tap(g, model, zhat)?;
    let logits = head_logits(g, model, pooled)?;
    let ce = g.cross_entropy(logits, &[label])?;

    // Closed-form divergence of N(m z + (1-m) mu, (1-m)^2 sigma^2) from
    // N(mu, sigma^2), per entry:
    //   -ln(1-m) + (1-m)^2 / 2 + m^2 u^2 / 2 - 1/2,   u = (z - mu) / sigma.
    // Saturated entries (1-m == 0 exactly) pass the feature through with no
    // noise; they are masked to zero contribution, matching the identity
    // that an all-ones mask recovers the frozen model's loss exactly.
    let mut mu_mat = Tensor::zeros(d, n);
    let mut inv_sigma = Tensor::zeros(d, n);
    for r in 0..d {
        for c in 0..n {
            mu_mat.set(r, c, prior.mu[r]);
            inv_sigma.set(r, c, 1.0 / prior.sigma[r]);
        }
    }
    let mut live = Tensor::zeros(d, n);
    {
        let m = g.data(mask);
        for (i, &v) in m.iter().enumerate() {
            live.data_mut()[i] = if 1.0 - v == 0.0 { 0.0 } else { 1.0 };
        }
    }
    let mu_mat = g.constant(mu_mat);
    let inv_sigma = g.constant(inv_sigma);
    let live = g.constant(live);

    let gate_safe = g.clamp_min(gate, f64::MIN_POSITIVE);
    let neg_log_gate = g.scale_shift(g.ln(gate_safe)?, -1.0, 0.0);
    let gate2 = g.mul(gate, gate)?;
    let u = g.mul(g.sub(z, mu_mat)?, inv_sigma)?;
    let mu2 = g.mul(mask, u)?;
    let mu2 = g.mul(mu2, mu2)?;
    let per_entry = g.scale_shift(
        g.add(neg_log_gate, g.scale_shift(g.add(gate2, mu2)?, 0.5, 0.0))?,
        1.0,
        -0.5,
    );
    let info = g.mean_all(g.mul(per_entry, live)?);
    let total = g.add(ce, g.scale_shift(info, beta, 0.0))?;
    Ok(LossParts {
        total,
        ce,
        info,
        mask,
    })
}

/// Evaluate one objective on a single cloud's features (frozen weights).
/// Returns (total, ce, info).
pub fn loss_values(
    model: &ModelParams,
    theta: &BottleneckParams,
    z: &Tensor,
    label: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let g = Graph::new();
    let t = theta_values(&g, theta, false);
    let zc = g.constant(z.clone());
    let parts = match theta.objective {
        ObjectiveKind::SelectiveCp => selective_cp_loss_graph(
            &g,
            model,
            &t,
            zc,
            label,
            theta.beta,
            theta.tau,
            theta.noise_samples,
            rng,
        )?,
        ObjectiveKind::InfoCons => {
            let prior = theta
                .prior
                .clone()
                .ok_or_else(|| ExplainError::InvalidConfig("missing prior statistics".into()))?;
            infocons_loss_graph(&g, model, &t, zc, label, theta.beta, &prior, rng)?
        }
    };
    Ok((g.item(parts.total), g.item(parts.ce), g.item(parts.info)))
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ExplainerConfig {
    pub objective: ObjectiveKind,
    pub beta: f64,
    pub reduced_dim: usize,
    pub tau: f64,
    pub noise_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Cap on training clouds (0 = use all). Explainer training is a
    /// desk-scale fit; a few hundred clouds suffice.
    pub max_train_clouds: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            objective: ObjectiveKind::InfoCons,
            beta: 0.5,
            reduced_dim: 64,
            tau: 0.7,
            noise_samples: 32,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            max_train_clouds: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExplainEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub info: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct ExplainerOutcome {
    pub params: BottleneckParams,
    pub curves: Vec<ExplainEpoch>,
    /// True when a non-finite loss aborted training; `params` then holds
    /// the last epoch that finished cleanly.
    pub diverged: bool,
}

/// Train the bottleneck against a frozen model. Only the bottleneck weights
/// receive updates; the prior for the noise objective is re-estimated per
/// mini-batch from that batch's features, and dataset-level statistics over
/// the training subset are frozen into the returned parameters.
pub fn train_explainer(
    model: &ModelParams,
    clouds: &[PointCloud],
    cfg: &ExplainerConfig,
) -> Result<ExplainerOutcome> {
    if clouds.is_empty() {
        return Err(ExplainError::InvalidConfig("no training clouds".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(ExplainError::InvalidConfig(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    let take = if cfg.max_train_clouds == 0 {
        clouds.len()
    } else {
        cfg.max_train_clouds.min(clouds.len())
    };
    let feature_dim = model.tap_dim();
    let mut theta = BottleneckParams::init(
        feature_dim,
        cfg.reduced_dim,
        cfg.objective,
        cfg.beta,
        cfg.tau,
        cfg.noise_samples,
        model.tap_layer,
        cfg.seed,
    )?;

    // The encoder is frozen, so tap features are computed once.
    let mut taps: Vec<(Tensor, usize)> = Vec::with_capacity(take);
    for pc in &clouds[..take] {
        let fwd = crate::model::forward_cloud(model, pc, false)?;
        let z = fwd.graph.data_clone(fwd.tap);
        taps.push((z, pc.label.expect("training clouds carry labels")));
    }

    let shapes: Vec<(usize, usize)> = theta_tensors(&theta).iter().map(|t| t.shape()).collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, &shapes);
    let mut rng = Rng::new(cfg.seed).fork(0xEB);
    let mut order: Vec<usize> = (0..taps.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut last_good = theta.clone();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(Tensor, usize)> = chunk.iter().map(|&i| &taps[i]).collect();
            let (total, ce, info) = explainer_step(model, &mut theta, &batch, cfg, &mut opt, &mut rng)?;
            if !total.is_finite() {
                return Ok(ExplainerOutcome {
                    params: finish_params(model, last_good, &taps)?,
                    curves,
                    diverged: true,
                });
            }
            sums.0 += total * batch.len() as f64;
            sums.1 += ce * batch.len() as f64;
            sums.2 += info * batch.len() as f64;
            seen += batch.len();
        }
        curves.push(ExplainEpoch {
            epoch,
            total: sums.0 / seen as f64,
            ce: sums.1 / seen as f64,
            info: sums.2 / seen as f64,
        });
        last_good = theta.clone();
    }
    Ok(ExplainerOutcome {
        params: finish_params(model, theta, &taps)?,
        curves,
        diverged: false,
    })
}

/// Per-dimension statistics over a set of tap features, sigma floored at
/// 1e-4 to keep dead channels usable as priors.
fn stats_over(taps: &[&Tensor]) -> PriorStats {
    let d = taps[0].rows();
    let mut sum = vec![0.0; d];
    let mut sum2 = vec![0.0; d];
    let mut count = 0usize;
    for z in taps {
        for r in 0..d {
            for c in 0..z.cols() {
                let v = z.at(r, c);
                sum[r] += v;
                sum2[r] += v * v;
            }
        }
        count += z.cols();
    }
    let n = count.max(1) as f64;
    let mu: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let sigma: Vec<f64> = sum2
        .iter()
        .zip(&mu)
        .map(|(s2, m)| ((s2 / n - m * m).max(0.0)).sqrt().max(1e-4))
        .collect();
    PriorStats { mu, sigma }
}

fn finish_params(
    _model: &ModelParams,
    mut theta: BottleneckParams,
    taps: &[(Tensor, usize)],
) -> Result<BottleneckParams> {
    let refs: Vec<&Tensor> = taps.iter().map(|(z, _)| z).collect();
    theta.prior = Some(stats_over(&refs));
    Ok(theta)
}

fn theta_tensors(theta: &BottleneckParams) -> Vec<&Tensor> {
    let mut out = vec![&theta.w_query, &theta.w_value];
    for l in &theta.mlp {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    out
}

fn explainer_step(
    model: &ModelParams,
    theta: &mut BottleneckParams,
    batch: &[&(Tensor, usize)],
    cfg: &ExplainerConfig,
    opt: &mut Optimizer,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let g = Graph::new();
    let t = theta_values(&g, theta, true);
    let batch_prior = match cfg.objective {
        ObjectiveKind::InfoCons => {
            let refs: Vec<&Tensor> = batch.iter().map(|(z, _)| z).collect();
            Some(stats_over(&refs))
        }
        ObjectiveKind::SelectiveCp => None,
    };

    let mut totals = Vec::with_capacity(batch.len());
    let mut ces = Vec::with_capacity(batch.len());
    let mut infos = Vec::with_capacity(batch.len());
    for (z, label) in batch {
        let zc = g.constant(z.clone());
        let parts = match cfg.objective {
            ObjectiveKind::SelectiveCp => selective_cp_loss_graph(
                &g,
                model,
                &t,
                zc,
                *label,
                cfg.beta,
                cfg.tau,
                cfg.noise_samples,
                rng,
            )?,
            ObjectiveKind::InfoCons => infocons_loss_graph(
                &g,
                model,
                &t,
                zc,
                *label,
                cfg.beta,
                batch_prior.as_ref().unwrap(),
                rng,
            )?,
        };
        totals.push(parts.total);
        ces.push(parts.ce);
        infos.push(parts.info);
    }
    let loss = mean_of(&g, &totals)?;
    let ce = mean_of(&g, &ces)?;
    let info = mean_of(&g, &infos)?;
    let (loss_v, ce_v, info_v) = (g.item(loss), g.item(ce), g.item(info));
    if !loss_v.is_finite() {
        return Ok((loss_v, ce_v, info_v));
    }
    g.backward(loss)?;

    let grads: Vec<Tensor> = [t.wq, t.wv]
        .iter()
        .copied()
        .chain(t.mlp.iter().flat_map(|&(w, b)| [w, b]))
        .map(|v| g.grad(v))
        .collect();
    let mut targets: Vec<&mut Tensor> = vec![&mut theta.w_query, &mut theta.w_value];
    for l in theta.mlp.iter_mut() {
        targets.push(&mut l.weight);
        targets.push(&mut l.bias);
    }
    opt.apply(&mut targets, &grads);
    Ok((loss_v, ce_v, info_v))
}

fn mean_of(g: &Graph, vals: &[Value]) -> Result<Value> {
    let mut acc = vals[0];
    for &v in &vals[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale_shift(acc, 1.0 / vals.len() as f64, 0.0))
}

// ── score maps ──────────────────────────────────────────────────────

/// Per-point criticality in [0, 1], index-aligned with the explained cloud.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub scores: Vec<f64>,
    pub method: String,
    pub iterations: usize,
}

impl ScoreMap {
    pub fn new(scores: Vec<f64>, method: impl Into<String>, iterations: usize) -> Self {
        ScoreMap {
            scores,
            method: method.into(),
            iterations,
        }
    }

    /// Point indices sorted most-critical first (ties to the lower index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    }
}

/// One-pass score map: channel mean of the mask, interpolated back to all
/// points when the tap is subsampled, clamped into [0, 1]. Costs exactly
/// one model forward and one bottleneck forward.
pub fn score_map(theta: &BottleneckParams, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
    let tap = handle.tap_features(pc)?;
    let mask = attention_bottleneck(theta, &tap.z)?;
    handle.note_explainer_forward();
    let anchor_scores: Vec<f64> = (0..mask.cols())
        .map(|c| {
            let mut s = 0.0;
            for r in 0..mask.rows() {
                s += mask.at(r, c);
            }
            s / mask.rows() as f64
        })
        .collect();
    let scores = if tap.anchor_points.len() == pc.len() {
        anchor_scores
    } else {
        interpolate_scores(&tap.anchor_points, &anchor_scores, &pc.points)
    };
    let scores = scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect();
    Ok(ScoreMap::new(scores, "infocons", 1))
}

/// Inverse-distance interpolation from scored anchors to target points
/// using the 3 nearest anchors (fewer, with a warning, when fewer exist).
/// A target coincident with an anchor takes that anchor's score exactly.
pub fn interpolate_scores(
    anchors: &[[f64; 3]],
    anchor_scores: &[f64],
    targets: &[[f64; 3]],
) -> Vec<f64> {
    assert_eq!(anchors.len(), anchor_scores.len());
    let mut k = 3;
    if anchors.len() < k {
        eprintln!(
            "warning: interpolation wants 3 anchors, only {} available",
            anchors.len()
        );
        k = anchors.len();
    }
    targets
        .iter()
        .map(|tp| {
            let mut near: Vec<(f64, usize)> = anchors
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let dx = a[0] - tp[0];
                    let dy = a[1] - tp[1];
                    let dz = a[2] - tp[2];
                    ((dx * dx + dy * dy + dz * dz).sqrt(), i)
                })
                .collect();
            near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if near[0].0 == 0.0 {
                return anchor_scores[near[0].1];
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for &(d, i) in near.iter().take(k) {
                let w = 1.0 / d;
                num += w * anchor_scores[i];
                den += w;
            }
            num / den
        })
        .collect()
}

/// Iterated explain-then-drop protocol. Each iteration scores the surviving
/// cloud with the same trained bottleneck (no retraining) and marks the top
/// `drop_per_iter` survivors as dropped. The final map gives dropped points
/// rank scores linearly spaced in (0.5, 1] (earlier-dropped higher) and
/// rescales survivors' last scores into [0, 0.5].
pub fn dynamic_score_map(
    theta: &BottleneckParams,
    handle: &ModelHandle,
    pc: &PointCloud,
    iters: usize,
    drop_per_iter: usize,
) -> Result<(ScoreMap, Vec<Vec<usize>>)> {
    let n = pc.len();
    if iters == 0 || drop_per_iter == 0 {
        return Err(ExplainError::InvalidConfig(
            "iterations and drop count must be positive".into(),
        ));
    }
    if iters * drop_per_iter >= n {
        return Err(ExplainError::InvalidConfig(format!(
            "{iters} x {drop_per_iter} dropped points must stay below the cloud size {n}"
        )));
    }
    let mut surviving: Vec<usize> = (0..n).collect();
    let mut dropped_order: Vec<usize> = Vec::with_capacity(iters * drop_per_iter);
    let mut per_iteration: Vec<Vec<usize>> = Vec::with_capacity(iters);
    let mut last_scores: Vec<f64> = vec![0.0; n];

    for _ in 0..iters {
        let sub = PointCloud {
            points: surviving.iter().map(|&i| pc.points[i]).collect(),
            label: pc.label,
            part_ids: None,
        };
        let sm = score_map(theta, handle, &sub)?;
        for (local, &orig) in surviving.iter().enumerate() {
            last_scores[orig] = sm.scores[local];
        }
        // Rank survivors by score, ties to the lower original index.
        let mut order: Vec<usize> = (0..surviving.len()).collect();
        order.sort_by(|&a, &b| {
            sm.scores[b]
                .partial_cmp(&sm.scores[a])
                .unwrap()
                .then(surviving[a].cmp(&surviving[b]))
        });
        let marked: Vec<usize> = order[..drop_per_iter]
            .iter()
            .map(|&local| surviving[local])
            .collect();
        dropped_order.extend_from_slice(&marked);
        per_iteration.push(marked.clone());
        surviving.retain(|i| !marked.contains(i));
    }

    let total_dropped = dropped_order.len() as f64;
    let mut scores = vec![0.0; n];
    for (rank, &orig) in dropped_order.iter().enumerate() {
        scores[orig] = 1.0 - rank as f64 * 0.5 / total_dropped;
    }
    let lo = surviving
        .iter()
        .map(|&i| last_scores[i])
        .fold(f64::INFINITY, f64::min);
    let hi = surviving
        .iter()
        .map(|&i| last_scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    for &i in &surviving {
        scores[i] = if hi > lo {
            0.5 * (last_scores[i] - lo) / (hi - lo)
        } else {
            0.25
        };
    }
    Ok((
        ScoreMap::new(scores, "infocons-dyn", iters),
        per_iteration,
    ))
}

// ── checkpoint IO ───────────────────────────────────────────────────

pub fn save_explainer(path: &Path, theta: &BottleneckParams) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = vec![
        ("w_query".into(), &theta.w_query),
        ("w_value".into(), &theta.w_value),
    ];
    for (i, l) in theta.mlp.iter().enumerate() {
        entries.push((format!("mlp{i}.w"), &l.weight));
        entries.push((format!("mlp{i}.b"), &l.bias));
    }
    let prior_mu;
    let prior_sigma;
    if let Some(p) = &theta.prior {
        prior_mu = Tensor::from_vec(p.mu.len(), 1, p.mu.clone());
        prior_sigma = Tensor::from_vec(p.sigma.len(), 1, p.sigma.clone());
        entries.push(("prior.mu".into(), &prior_mu));
        entries.push(("prior.sigma".into(), &prior_sigma));
    }
    let mut meta = vec![
        ("kind".into(), "explainer".into()),
        ("objective".into(), theta.objective.name().into()),
        ("beta".into(), format!("{}", theta.beta)),
        ("dr".into(), theta.reduced_dim().to_string()),
        ("tau".into(), format!("{}", theta.tau)),
        ("k".into(), theta.noise_samples.to_string()),
        ("tap_layer".into(), theta.tap_layer.to_string()),
        ("feature_dim".into(), theta.feature_dim().to_string()),
        ("mlp_layers".into(), theta.mlp.len().to_string()),
        ("seed".into(), theta.seed.to_string()),
    ];
    if let Some(p) = &theta.prior {
        let head = |xs: &[f64]| {
            xs.iter()
                .take(4)
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        meta.push(("prior_mu_head".into(), head(&p.mu)));
        meta.push(("prior_sigma_head".into(), head(&p.sigma)));
    }
    checkpoint::save(path, &entries, &meta)?;
    Ok(())
}

pub fn load_explainer(path: &Path) -> Result<BottleneckParams> {
    let (entries, meta) = checkpoint::load(path)?;
    let get = |k: &str| checkpoint::meta_value(&meta, k);
    let objective: ObjectiveKind = get("objective")?.parse()?;
    let n_mlp: usize = get("mlp_layers")?.parse().unwrap_or(2);
    let mlp = (0..n_mlp)
        .map(|i| -> Result<AffineParams> {
            Ok(AffineParams {
                weight: checkpoint::find(&entries, &format!("mlp{i}.w"))?.clone(),
                bias: checkpoint::find(&entries, &format!("mlp{i}.b"))?.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = match (
        checkpoint::find(&entries, "prior.mu"),
        checkpoint::find(&entries, "prior.sigma"),
    ) {
        (Ok(mu), Ok(sigma)) => Some(PriorStats {
            mu: mu.data().to_vec(),
            sigma: sigma.data().to_vec(),
        }),
        _ => None,
    };
    Ok(BottleneckParams {
        w_query: checkpoint::find(&entries, "w_query")?.clone(),
        w_value: checkpoint::find(&entries, "w_value")?.clone(),
        mlp,
        beta: get("beta")?.parse().unwrap_or(1.0),
        tau: get("tau")?.parse().unwrap_or(0.7),
        noise_samples: get("k")?.parse().unwrap_or(32),
        objective,
        tap_layer: get("tap_layer")?.parse().unwrap_or(3),
        prior,
        seed: get("seed")?.parse().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_cloud, pointnet_lite, ModelHandle};
    use crate::shapes::{generate_shape, ShapeKind};

    fn test_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = Rng::new(seed);
        let mut pc = generate_shape(ShapeKind::ChairLike, n, &mut rng, 0.01).unwrap();
        pc.label = Some(1);
        pc
    }

    fn test_theta(seed: u64) -> BottleneckParams {
        BottleneckParams::init(256, 64, ObjectiveKind::InfoCons, 1.0, 0.7, 32, 3, seed).unwrap()
    }

    /// Force every mask entry to saturate at the given sign by biasing the
    /// final MLP layer far into the sigmoid tail.
    fn saturated_theta(seed: u64, high: bool) -> BottleneckParams {
        let mut theta = test_theta(seed);
        let d = theta.feature_dim();
        let bias = if high { 1e3 } else { -1e3 };
        theta.mlp[1].weight = Tensor::zeros(d, theta.reduced_dim());
        theta.mlp[1].bias = Tensor::full(d, 1, bias);
        theta
    }

    #[test]
    fn mask_entries_strictly_inside_unit_interval() {
        let theta = test_theta(3);
        let mut rng = Rng::new(4);
        let z = Tensor::random_uniform(256, 40, -1.0, 1.0, &mut rng);
        let m = attention_bottleneck(&theta, &z).unwrap();
        assert_eq!(m.shape(), (256, 40));
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_initialized_expansion_yields_half() {
        let mut theta = test_theta(5);
        for l in theta.mlp.iter_mut() {
            l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
            l.bias = Tensor::zeros(l.bias.rows(), 1);
        }
        let mut rng = Rng::new(6);
        let z = Tensor::random_uniform(256, 10, -1.0, 1.0, &mut rng);
        let m = attention_bottleneck(&theta, &z).unwrap();
        assert!(m.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mask_is_permutation_equivariant() {
        let theta = test_theta(7);
        let mut rng = Rng::new(8);
        let z = Tensor::random_uniform(256, 12, -1.0, 1.0, &mut rng);
        let m = attention_bottleneck(&theta, &z).unwrap();
        let perm: Vec<usize> = vec![5, 2, 9, 0, 11, 3, 1, 10, 4, 7, 6, 8];
        let mut zp = Tensor::zeros(256, 12);
        for (new_c, &old_c) in perm.iter().enumerate() {
            for r in 0..256 {
                zp.set(r, new_c, z.at(r, old_c));
            }
        }
        let mp = attention_bottleneck(&theta, &zp).unwrap();
        // The attention scores contract over the point axis, so a permuted
        // summation order shifts the last bits; equivariance holds to
        // rounding.
        for (new_c, &old_c) in perm.iter().enumerate() {
            for r in 0..256 {
                assert!((m.at(r, old_c) - mp.at(r, new_c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let theta = test_theta(9);
        let z = Tensor::zeros(128, 10);
        assert!(matches!(
            attention_bottleneck(&theta, &z),
            Err(ExplainError::DimMismatch { .. })
        ));
    }

    #[test]
    fn selective_beta_zero_total_equals_ce() {
        let model = pointnet_lite(4, 3, 11).unwrap();
        let pc = test_cloud(12, 48);
        let fwd = forward_cloud(&model, &pc, false).unwrap();
        let z = fwd.graph.data_clone(fwd.tap);
        let mut theta = test_theta(13);
        theta.objective = ObjectiveKind::SelectiveCp;
        theta.beta = 0.0;
        let mut rng = Rng::new(14);
        let (total, ce, _info) = loss_values(&model, &theta, &z, 1, &mut rng).unwrap();
        assert_eq!(total.to_bits(), ce.to_bits());
    }

    #[test]
    fn selective_rejects_negative_beta() {
        assert!(BottleneckParams::init(
            256,
            64,
            ObjectiveKind::SelectiveCp,
            -1.0,
            0.7,
            32,
            3,
            0
        )
        .is_err());
    }

    #[test]
    fn all_ones_mask_recovers_frozen_loss_selective() {
        // Identity mask: ce equals the frozen model's own cross-entropy.
        let model = pointnet_lite(4, 3, 15).unwrap();
        let pc = test_cloud(16, 48);
        let fwd = forward_cloud(&model, &pc, false).unwrap();
        let z = fwd.graph.data_clone(fwd.tap);
        let frozen_ce = {
            let ce = fwd.graph.cross_entropy(fwd.logits, &[1]).unwrap();
            fwd.graph.item(ce)
        };
        let mut theta = saturated_theta(17, true);
        theta.objective = ObjectiveKind::SelectiveCp;
        let mut rng = Rng::new(18);
        let (_, ce, _) = loss_values(&model, &theta, &z, 1, &mut rng).unwrap();
        assert_eq!(ce.to_bits(), frozen_ce.to_bits());
    }

    #[test]
    fn infocons_identity_mask_zero_info_exact_ce() {
        let model = pointnet_lite(4, 3, 19).unwrap();
        let pc = test_cloud(20, 48);
        let fwd = forward_cloud(&model, &pc, false).unwrap();
        let z = fwd.graph.data_clone(fwd.tap);
        let frozen_ce = {
            let ce = fwd.graph.cross_entropy(fwd.logits, &[1]).unwrap();
            fwd.graph.item(ce)
        };
        let mut theta = saturated_theta(21, true);
        theta.prior = Some(PriorStats {
            mu: vec![0.2; 256],
            sigma: vec![0.9; 256],
        });
        let mut rng = Rng::new(22);
        let (total, ce, info) = loss_values(&model, &theta, &z, 1, &mut rng).unwrap();
        assert_eq!(info, 0.0);
        assert_eq!(ce.to_bits(), frozen_ce.to_bits());
        assert!((total - ce).abs() < 1e-15);
    }

    #[test]
    fn infocons_zero_mask_recovers_prior() {
        let model = pointnet_lite(4, 3, 23).unwrap();
        let pc = test_cloud(24, 48);
        let fwd = forward_cloud(&model, &pc, false).unwrap();
        let z = fwd.graph.data_clone(fwd.tap);
        let mut theta = saturated_theta(25, false);
        theta.prior = Some(PriorStats {
            mu: vec![0.0; 256],
            sigma: vec![1.0; 256],
        });
        let mut rng = Rng::new(26);
        let (_, _, info) = loss_values(&model, &theta, &z, 1, &mut rng).unwrap();
        // mask == 0 exactly: -ln(1) + 1/2 + 0 - 1/2 = 0 per entry.
        assert!(info.abs() < 1e-12, "info {info}");
    }

    #[test]
    fn infocons_closed_form_matches_monte_carlo() {
        // Random mask and features on a small grid; the induced-Gaussian
        // divergence against sampling E_p[ln p - ln q], 1e5 draws.
        let mut rng = Rng::new(27);
        let d = 6;
        let n = 8;
        let mask = Tensor::random_uniform(d, n, 0.15, 0.85, &mut rng);
        let z = Tensor::random_uniform(d, n, -1.5, 1.5, &mut rng);
        let mu: Vec<f64> = (0..d).map(|_| rng.range(-0.5, 0.5)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.range(0.6, 1.4)).collect();

        let mut closed = 0.0;
        for r in 0..d {
            for c in 0..n {
                let m = mask.at(r, c);
                let u = (z.at(r, c) - mu[r]) / sigma[r];
                closed += -(1.0 - m).ln() + (1.0 - m) * (1.0 - m) / 2.0 + m * m * u * u / 2.0 - 0.5;
            }
        }
        closed /= (d * n) as f64;

        let samples = 100_000;
        let mut mc = 0.0;
        for r in 0..d {
            for c in 0..n {
                let m = mask.at(r, c);
                let mu_p = m * z.at(r, c) + (1.0 - m) * mu[r];
                let s_p = (1.0 - m) * sigma[r];
                for _ in 0..samples / (d * n) {
                    let x = mu_p + s_p * rng.normal();
                    mc += ln_pdf(x, mu_p, s_p) - ln_pdf(x, mu[r], sigma[r]);
                }
            }
        }
        mc /= ((samples / (d * n)) * d * n) as f64;
        let rel = (closed - mc).abs() / closed.abs().max(1e-12);
        assert!(rel < 0.01, "closed {closed} vs mc {mc} rel {rel}");
    }

    fn ln_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn interpolation_exact_on_anchors_and_convex() {
        let mut rng = Rng::new(28);
        let anchors: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)])
            .collect();
        let scores: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
        let back = interpolate_scores(&anchors, &scores, &anchors);
        for (a, b) in scores.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let targets: Vec<[f64; 3]> = (0..50)
            .map(|_| [rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)])
            .collect();
        let out = interpolate_scores(&anchors, &scores, &targets);
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in out {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn interpolation_constant_scores_stay_constant() {
        let anchors = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let out = interpolate_scores(&anchors, &[0.7; 3], &[[0.3, 0.3, 0.1], [2.0, 2.0, 2.0]]);
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_equidistant_mixes_evenly() {
        // Target halfway between anchors scored 0 and 1; third anchor far.
        let anchors = vec![[-0.1, 0.0, 0.0], [0.1, 0.0, 0.0], [100.0, 0.0, 0.0]];
        let out = interpolate_scores(&anchors, &[0.0, 1.0, 0.5], &[[0.0, 0.0, 0.0]]);
        assert!((out[0] - 0.5).abs() < 0.05, "got {}", out[0]);
    }

    #[test]
    fn score_map_flat_covers_all_points() {
        let model = pointnet_lite(4, 3, 29).unwrap();
        let handle = ModelHandle::new(model);
        let theta = test_theta(30);
        let pc = test_cloud(31, 64);
        handle.reset_counts();
        let sm = score_map(&theta, &handle, &pc).unwrap();
        assert_eq!(sm.scores.len(), 64);
        assert!(sm.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        let (f, b, e) = handle.counts();
        assert_eq!((f, b, e), (1, 0, 1));
    }

    #[test]
    fn score_map_hier_interpolates_to_all_points() {
        // 64 anchors < 200 points: scores must propagate to every input
        // point through the nearest-anchor interpolation.
        let model = crate::model::hier_lite(4, 3, 61).unwrap();
        let handle = ModelHandle::new(model);
        let theta = test_theta(62);
        let mut rng = Rng::new(63);
        let mut pc = generate_shape(ShapeKind::Cylinder, 200, &mut rng, 0.01).unwrap();
        pc.label = Some(2);
        let sm = score_map(&theta, &handle, &pc).unwrap();
        assert_eq!(sm.scores.len(), 200);
        assert!(sm.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        // interpolated scores genuinely vary across points
        let lo = sm.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = sm.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi > lo);
    }

    #[test]
    fn dynamic_map_marks_distinct_points_and_orders_ranks() {
        let model = pointnet_lite(4, 3, 32).unwrap();
        let handle = ModelHandle::new(model);
        let theta = test_theta(33);
        let pc = test_cloud(34, 96);
        handle.reset_counts();
        let (sm, iters) = dynamic_score_map(&theta, &handle, &pc, 4, 8).unwrap();
        let marked: Vec<usize> = iters.iter().flatten().copied().collect();
        assert_eq!(marked.len(), 32);
        let mut dedup = marked.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 32, "marked points must be distinct");
        // Earlier-dropped points score strictly higher.
        for w in marked.windows(2) {
            assert!(sm.scores[w[0]] > sm.scores[w[1]]);
        }
        for &i in &marked {
            assert!(sm.scores[i] > 0.5);
        }
        for (i, &s) in sm.scores.iter().enumerate() {
            if !marked.contains(&i) {
                assert!(s <= 0.5);
            }
        }
        let (f, _, e) = handle.counts();
        assert_eq!((f, e), (4, 4), "one model+bottleneck forward per iteration");
    }

    #[test]
    fn dynamic_map_single_iteration_matches_one_pass_ranking() {
        let model = pointnet_lite(4, 3, 35).unwrap();
        let handle = ModelHandle::new(model);
        let theta = test_theta(36);
        let pc = test_cloud(37, 64);
        let one = score_map(&theta, &handle, &pc).unwrap();
        let top: Vec<usize> = one.ranking()[..10].to_vec();
        let (_, iters) = dynamic_score_map(&theta, &handle, &pc, 1, 10).unwrap();
        assert_eq!(iters[0], top);
    }

    #[test]
    fn dynamic_map_rejects_overdrop() {
        let model = pointnet_lite(4, 3, 38).unwrap();
        let handle = ModelHandle::new(model);
        let theta = test_theta(39);
        let pc = test_cloud(40, 64);
        assert!(dynamic_score_map(&theta, &handle, &pc, 8, 8).is_err());
    }

    #[test]
    fn explainer_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.ckpt");
        let mut theta = test_theta(41);
        theta.prior = Some(PriorStats {
            mu: vec![0.1; 256],
            sigma: vec![0.8; 256],
        });
        save_explainer(&path, &theta).unwrap();
        let loaded = load_explainer(&path).unwrap();
        assert_eq!(loaded.objective, ObjectiveKind::InfoCons);
        assert_eq!(loaded.reduced_dim(), 64);
        assert_eq!(loaded.feature_dim(), 256);
        assert_eq!(loaded.noise_samples, 32);
        assert!((loaded.tau - 0.7).abs() < 1e-12);
        assert!(loaded.prior.is_some());
    }
}
