//! Toy point-cloud classifiers in an encoder/head factorization.
//!
//! Two architectures share the contract that per-point layers apply
//! identically to every point and the global feature is a max over points:
//!
//! * `pointnet-lite` (flat): per-point affine+ELU stack 3 -> 64 -> 128 ->
//!   256, tap at layer 3, max-pool, head 256 -> 64 -> classes. Point
//!   features keep the full size dimension (N' = N).
//! * `hier-lite`: two per-point layers 3 -> 64 -> 128, farthest-point
//!   sampling to 64 anchors with max-pooled 8-NN grouping, anchor MLP to
//!   256, then the same pooled head. Tap at the post-sampling layer gives
//!   N' = 64 < N, which exercises score interpolation downstream.
//!
//! The tap layer is the encoder depth whose point features the explainer
//! reads; it is configurable and swept by the parameter-study tooling.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::graph::{Graph, GraphError, Value};
use crate::rng::Rng;
use crate::shapes::{LabeledDataset, PointCloud};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cloud has {have} points but the model stage needs {need}")]
    NotEnoughPoints { have: usize, need: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Flat,
    Hier,
}

impl ArchKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Flat => "flat",
            ArchKind::Hier => "hier",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AffineParams {
    /// out_dim x in_dim.
    pub weight: Tensor,
    /// out_dim x 1.
    pub bias: Tensor,
}

impl AffineParams {
    fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        AffineParams {
            weight: Tensor::random_normal(out_dim, in_dim, std, rng),
            bias: Tensor::zeros(out_dim, 1),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Per-dimension feature statistics at the tap layer, used as the Gaussian
/// prior by the noise-injection objective.
#[derive(Clone, Debug)]
pub struct PriorStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct HierConfig {
    pub n_anchors: usize,
    pub k_neighbors: usize,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub arch: ArchKind,
    /// Per-point layers; for `Hier` the last entry runs after the
    /// sampling/grouping stage (on anchors).
    pub encoder: Vec<AffineParams>,
    pub head: Vec<AffineParams>,
    /// 1-based encoder depth whose output feeds the explainer.
    pub tap_layer: usize,
    pub hier: Option<HierConfig>,
    pub classes: usize,
    /// Frozen dataset-level tap statistics (populated after training).
    pub prior: Option<PriorStats>,
    pub seed: u64,
}

/// Flat variant: 3 -> 64 -> 128 -> 256, head 256 -> 64 -> classes.
pub fn pointnet_lite(classes: usize, tap_layer: usize, seed: u64) -> Result<ModelParams> {
    build_params(ArchKind::Flat, &[3, 64, 128, 256], classes, tap_layer, None, seed)
}

/// Hierarchical variant: 3 -> 64 -> 128 per point, FPS to 64 anchors with
/// 8-NN max grouping, anchor layer 128 -> 256.
pub fn hier_lite(classes: usize, tap_layer: usize, seed: u64) -> Result<ModelParams> {
    build_params(
        ArchKind::Hier,
        &[3, 64, 128, 256],
        classes,
        tap_layer,
        Some(HierConfig {
            n_anchors: 64,
            k_neighbors: 8,
        }),
        seed,
    )
}

fn build_params(
    arch: ArchKind,
    dims: &[usize],
    classes: usize,
    tap_layer: usize,
    hier: Option<HierConfig>,
    seed: u64,
) -> Result<ModelParams> {
    if classes < 1 {
        return Err(ModelError::InvalidConfig("classes must be >= 1".into()));
    }
    let layers = dims.len() - 1;
    if tap_layer < 1 || tap_layer > layers {
        return Err(ModelError::InvalidConfig(format!(
            "tap layer {tap_layer} out of range 1..={layers}"
        )));
    }
    let mut rng = Rng::new(seed);
    let encoder = dims
        .windows(2)
        .map(|w| AffineParams::init(w[1], w[0], &mut rng))
        .collect::<Vec<_>>();
    let feat = *dims.last().unwrap();
    let head = vec![
        AffineParams::init(64, feat, &mut rng),
        AffineParams::init(classes, 64, &mut rng),
    ];
    Ok(ModelParams {
        arch,
        encoder,
        head,
        tap_layer,
        hier,
        classes,
        prior: None,
        seed,
    })
}

impl ModelParams {
    /// Feature width at the tap layer.
    pub fn tap_dim(&self) -> usize {
        self.encoder[self.tap_layer - 1].out_dim()
    }

    /// Feature width at the pooled global embedding.
    pub fn global_dim(&self) -> usize {
        self.encoder.last().unwrap().out_dim()
    }

    /// Smallest cloud the encoder accepts.
    pub fn min_points(&self) -> usize {
        match (&self.arch, &self.hier) {
            (ArchKind::Hier, Some(h)) => h.n_anchors.max(h.k_neighbors),
            _ => 1,
        }
    }
}

/// Greedy farthest-point sampling: the first pick comes from the generator,
/// each next pick maximizes the minimum distance to the chosen set, ties to
/// the lowest index.
pub fn fps(points: &[[f64; 3]], m: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(ModelError::NotEnoughPoints { have: n, need: m });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let first = rng.below(n);
    chosen.push(first);
    let mut min_d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&points[i], &points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to `center` (the center itself counts
/// when it is among `points`). Distance ties break to the lower index.
pub fn knn_indices(points: &[[f64; 3]], center: &[f64; 3], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, center), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn points_to_tensor(points: &[[f64; 3]]) -> Tensor {
    let n = points.len();
    let mut t = Tensor::zeros(3, n);
    for (j, p) in points.iter().enumerate() {
        for d in 0..3 {
            t.set(d, j, p[d]);
        }
    }
    t
}

/// One full single-cloud forward with handles into the graph.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: Value,
    /// Tap-layer features, D x N'.
    pub tap: Value,
    /// Anchor coordinates for the tap features (the input points when
    /// N' = N).
    pub anchor_points: Vec<[f64; 3]>,
    /// Original point index behind each tap column.
    pub anchor_indices: Vec<usize>,
    /// Pooled global feature, D x 1.
    pub pooled: Value,
    /// Per-channel argmax column of the final pooling, in tap-column space.
    pub pool_argmax: Vec<usize>,
    pub logits: Value,
}

/// Build the forward graph for one cloud. `track_input` makes the input a
/// differentiable leaf (for input-gradient scorers).
pub fn forward_cloud(params: &ModelParams, pc: &PointCloud, track_input: bool) -> Result<ForwardPass> {
    let n = pc.len();
    if n < params.min_points() {
        return Err(ModelError::NotEnoughPoints {
            have: n,
            need: params.min_points(),
        });
    }
    let g = Graph::new();
    let xt = points_to_tensor(&pc.points);
    let input = if track_input { g.leaf(xt) } else { g.constant(xt) };

    let (pointwise_layers, anchor_layers) = match params.arch {
        ArchKind::Flat => (params.encoder.len(), 0),
        ArchKind::Hier => (params.encoder.len() - 1, 1),
    };

    let mut h = input;
    let mut tap: Option<Value> = None;
    let mut anchor_points: Vec<[f64; 3]> = pc.points.clone();
    let mut anchor_indices: Vec<usize> = (0..n).collect();
    let mut depth = 0;
    for layer in &params.encoder[..pointwise_layers] {
        let w = g.constant(layer.weight.clone());
        let b = g.constant(layer.bias.clone());
        h = g.elu(g.add_bias(g.matmul(w, h)?, b)?);
        depth += 1;
        if depth == params.tap_layer {
            tap = Some(h);
        }
    }

    if anchor_layers > 0 {
        let hier = params.hier.expect("hier arch carries a hier config");
        // Deterministic sampling: the generator is re-derived from the model
        // seed on every forward so classification is a pure function.
        let mut fps_rng = Rng::new(params.seed).fork(0xF95);
        let idx = fps(&pc.points, hier.n_anchors, &mut fps_rng)?;
        let groups: Vec<Vec<usize>> = idx
            .iter()
            .map(|&a| knn_indices(&pc.points, &pc.points[a], hier.k_neighbors))
            .collect();
        h = g.group_max_cols(h, &groups)?;
        anchor_points = idx.iter().map(|&i| pc.points[i]).collect();
        anchor_indices = idx;
        for layer in &params.encoder[pointwise_layers..] {
            let w = g.constant(layer.weight.clone());
            let b = g.constant(layer.bias.clone());
            h = g.elu(g.add_bias(g.matmul(w, h)?, b)?);
            depth += 1;
            if depth == params.tap_layer {
                tap = Some(h);
            }
        }
    }
    let tap = tap.expect("tap layer within encoder depth");
    if params.tap_layer < pointwise_layers + 1 {
        // Tap precedes the sampling stage: features cover all input points.
        anchor_points = pc.points.clone();
        anchor_indices = (0..n).collect();
    }

    let pooled = g.max_cols(h);
    let pool_argmax = g.argmax_of(pooled).expect("pooled is a max node");
    let logits = head_logits(&g, params, pooled)?;
    Ok(ForwardPass {
        graph: g,
        input,
        tap,
        anchor_points,
        anchor_indices,
        pooled,
        pool_argmax,
        logits,
    })
}

/// Apply the frozen head to a pooled feature already in `g`.
pub fn head_logits(g: &Graph, params: &ModelParams, pooled: Value) -> Result<Value> {
    let mut h = pooled;
    for (i, layer) in params.head.iter().enumerate() {
        let w = g.constant(layer.weight.clone());
        let b = g.constant(layer.bias.clone());
        h = g.add_bias(g.matmul(w, h)?, b)?;
        if i + 1 < params.head.len() {
            h = g.elu(h);
        }
    }
    Ok(h)
}

/// Apply the frozen encoder layers above the tap, then pool. Used by the
/// explainer to push masked tap features through the rest of the model.
pub fn pool_from_tap(g: &Graph, params: &ModelParams, zhat: Value) -> Result<Value> {
    let pointwise = match params.arch {
        ArchKind::Flat => params.encoder.len(),
        ArchKind::Hier => params.encoder.len() - 1,
    };
    let mut h = zhat;
    for depth in params.tap_layer..params.encoder.len() {
        if params.arch == ArchKind::Hier && depth == pointwise {
            // A tap below the sampling stage would need the grouping
            // replayed inside the explainer graph; the toy models tap at or
            // after it.
            return Err(ModelError::InvalidConfig(
                "hier tap below the sampling stage is not supported for masked replay".into(),
            ));
        }
        let layer = &params.encoder[depth];
        let w = g.constant(layer.weight.clone());
        let b = g.constant(layer.bias.clone());
        h = g.elu(g.add_bias(g.matmul(w, h)?, b)?);
    }
    Ok(g.max_cols(h))
}

/// Class probabilities for one cloud.
pub fn classify(params: &ModelParams, pc: &PointCloud) -> Result<Vec<f64>> {
    let fwd = forward_cloud(params, pc, false)?;
    let probs = fwd.graph.softmax(fwd.logits, crate::graph::Axis::Rows);
    Ok(fwd.graph.data_clone(probs).into_vec())
}

// ── instrumented handle ─────────────────────────────────────────────

/// Immutable trained model plus invocation counters. All scorers route
/// model evaluations through a handle so explaining cost is observable;
/// counters are atomic and safe to bump from parallel per-cloud workers.
pub struct ModelHandle {
    params: ModelParams,
    forwards: AtomicU64,
    backwards: AtomicU64,
    explainer_forwards: AtomicU64,
}

/// Tap-layer features extracted for one cloud.
pub struct TapFeatures {
    /// D x N' feature matrix.
    pub z: Tensor,
    pub anchor_points: Vec<[f64; 3]>,
    pub anchor_indices: Vec<usize>,
}

impl ModelHandle {
    pub fn new(params: ModelParams) -> Self {
        ModelHandle {
            params,
            forwards: AtomicU64::new(0),
            backwards: AtomicU64::new(0),
            explainer_forwards: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Class probabilities; one model forward.
    pub fn classify(&self, pc: &PointCloud) -> Result<Vec<f64>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        classify(&self.params, pc)
    }

    /// Predicted class; one model forward.
    pub fn predict(&self, pc: &PointCloud) -> Result<usize> {
        let probs = self.classify(pc)?;
        Ok(argmax_slice(&probs))
    }

    /// Tap features; one model forward.
    pub fn tap_features(&self, pc: &PointCloud) -> Result<TapFeatures> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let fwd = forward_cloud(&self.params, pc, false)?;
        Ok(TapFeatures {
            z: fwd.graph.data_clone(fwd.tap),
            anchor_points: fwd.anchor_points,
            anchor_indices: fwd.anchor_indices,
        })
    }

    /// Distinct argmax point indices of the final pooling, mapped back to
    /// original point ids and sorted; one model forward.
    pub fn critical_indices(&self, pc: &PointCloud) -> Result<Vec<usize>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let fwd = forward_cloud(&self.params, pc, false)?;
        let mut idx: Vec<usize> = fwd
            .pool_argmax
            .iter()
            .map(|&col| fwd.anchor_indices[col])
            .collect();
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    /// Gradient of the cross-entropy at `label` w.r.t. each input point;
    /// one forward plus one backward.
    pub fn input_gradient(&self, pc: &PointCloud, label: usize) -> Result<Vec<[f64; 3]>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        self.backwards.fetch_add(1, Ordering::Relaxed);
        let fwd = forward_cloud(&self.params, pc, true)?;
        let ce = fwd.graph.cross_entropy(fwd.logits, &[label])?;
        fwd.graph.backward(ce)?;
        let g = fwd.graph.grad(fwd.input);
        let mut out = vec![[0.0; 3]; pc.len()];
        for (j, p) in out.iter_mut().enumerate() {
            for d in 0..3 {
                p[d] = g.at(d, j);
            }
        }
        Ok(out)
    }

    /// Bump the explainer-forward counter (the attention bottleneck calls
    /// this once per evaluation).
    pub fn note_explainer_forward(&self) {
        self.explainer_forwards.fetch_add(1, Ordering::Relaxed);
    }

    /// (model forwards, model backwards, explainer forwards).
    pub fn counts(&self) -> (u64, u64, u64) {
        (
            self.forwards.load(Ordering::Relaxed),
            self.backwards.load(Ordering::Relaxed),
            self.explainer_forwards.load(Ordering::Relaxed),
        )
    }

    pub fn reset_counts(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.backwards.store(0, Ordering::Relaxed);
        self.explainer_forwards.store(0, Ordering::Relaxed);
    }
}

pub fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

// ── training ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moments (beta1 0.9, beta2 0.999).
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Adam / SGD state over a flat list of parameter tensors.
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, lr: f64, shapes: &[(usize, usize)]) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub(crate) fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, dg) in p.data_mut().iter_mut().zip(g.iter()) {
                        *x -= self.lr * dg;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = self.step as f64;
                let c1 = 1.0 - B1.powf(t);
                let c2 = 1.0 - B2.powf(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((x, dg), mi), vi) in
                        p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v)
                    {
                        *mi = B1 * *mi + (1.0 - B1) * dg;
                        *vi = B2 * *vi + (1.0 - B2) * dg * dg;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *x -= self.lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Train a classifier on the dataset. Deterministic given the seed; records
/// per-epoch train/test metrics; aborts on a non-finite loss. After the
/// final epoch the tap-layer prior statistics over the training split are
/// frozen into the returned parameters.
pub fn train_classifier(
    ds: &LabeledDataset,
    arch: ArchKind,
    tap_layer: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    if ds.train.is_empty() {
        return Err(ModelError::InvalidConfig("empty training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(ModelError::InvalidConfig(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    let classes = ds.classes();
    let mut params = match arch {
        ArchKind::Flat => pointnet_lite(classes, tap_layer, cfg.seed)?,
        ArchKind::Hier => hier_lite(classes, tap_layer, cfg.seed)?,
    };
    let shapes: Vec<(usize, usize)> = param_tensors(&params)
        .iter()
        .map(|t| t.shape())
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &shapes);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut rng = Rng::new(cfg.seed).fork(0x7141);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let clouds: Vec<&PointCloud> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let labels: Vec<usize> = clouds.iter().map(|pc| pc.label.unwrap()).collect();
            let (loss, batch_correct) = train_step(&mut params, &clouds, &labels, &mut opt)?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            correct += batch_correct;
        }
        let train_acc = correct as f64 / ds.train.len() as f64;
        let test_acc = evaluate_accuracy(&params, &ds.test)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches as f64,
            train_acc,
            test_acc,
        });
    }
    params.prior = Some(tap_prior_stats(&params, ds.train.iter())?);
    Ok((params, metrics))
}

/// Mean accuracy of `params` over labeled clouds.
pub fn evaluate_accuracy(params: &ModelParams, clouds: &[PointCloud]) -> Result<f64> {
    if clouds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for pc in clouds {
        let probs = classify(params, pc)?;
        if argmax_slice(&probs) == pc.label.unwrap() {
            correct += 1;
        }
    }
    Ok(correct as f64 / clouds.len() as f64)
}

/// Dataset-level mean and standard deviation of tap features, per channel,
/// with the standard deviation floored at 1e-4.
pub fn tap_prior_stats<'a>(
    params: &ModelParams,
    clouds: impl Iterator<Item = &'a PointCloud>,
) -> Result<PriorStats> {
    let d = params.tap_dim();
    let mut sum = vec![0.0; d];
    let mut sum2 = vec![0.0; d];
    let mut count = 0usize;
    for pc in clouds {
        let fwd = forward_cloud(params, pc, false)?;
        let z = fwd.graph.data(fwd.tap);
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
    Ok(PriorStats { mu, sigma })
}

fn param_tensors(params: &ModelParams) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for l in params.encoder.iter().chain(&params.head) {
        out.push(&l.weight);
        out.push(&l.bias);
    }
    out
}

fn train_step(
    params: &mut ModelParams,
    clouds: &[&PointCloud],
    labels: &[usize],
    opt: &mut Optimizer,
) -> Result<(f64, usize)> {
    let g = Graph::new();
    // Parameters enter as tracked leaves.
    let enc_vals: Vec<(Value, Value)> = params
        .encoder
        .iter()
        .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
        .collect();
    let head_vals: Vec<(Value, Value)> = params
        .head
        .iter()
        .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
        .collect();

    let pointwise = match params.arch {
        ArchKind::Flat => params.encoder.len(),
        ArchKind::Hier => params.encoder.len() - 1,
    };

    // Shared per-point stack over the column-concatenated batch.
    let widths: Vec<usize> = clouds.iter().map(|pc| pc.len()).collect();
    let inputs: Vec<Value> = clouds
        .iter()
        .map(|pc| g.constant(points_to_tensor(&pc.points)))
        .collect();
    let mut h = g.concat_cols(&inputs)?;
    for &(w, b) in &enc_vals[..pointwise] {
        h = g.elu(g.add_bias(g.matmul(w, h)?, b)?);
    }

    let pooled_width;
    if params.arch == ArchKind::Hier {
        let hier = params.hier.expect("hier config");
        let mut blocks = Vec::with_capacity(clouds.len());
        let mut off = 0;
        for (pc, &w) in clouds.iter().zip(&widths) {
            let block = g.slice_cols(h, off, w)?;
            let mut fps_rng = Rng::new(params.seed).fork(0xF95);
            let idx = fps(&pc.points, hier.n_anchors, &mut fps_rng)?;
            let groups: Vec<Vec<usize>> = idx
                .iter()
                .map(|&a| knn_indices(&pc.points, &pc.points[a], hier.k_neighbors))
                .collect();
            blocks.push(g.group_max_cols(block, &groups)?);
            off += w;
        }
        h = g.concat_cols(&blocks)?;
        for &(w, b) in &enc_vals[pointwise..] {
            h = g.elu(g.add_bias(g.matmul(w, h)?, b)?);
        }
        pooled_width = vec![hier.n_anchors; clouds.len()];
    } else {
        pooled_width = widths;
    }

    // Per-cloud max pool, then the head over the pooled batch.
    let mut pooled = Vec::with_capacity(clouds.len());
    let mut off = 0;
    for &w in &pooled_width {
        pooled.push(g.max_cols(g.slice_cols(h, off, w)?));
        off += w;
    }
    let mut hb = g.concat_cols(&pooled)?;
    for (i, &(w, b)) in head_vals.iter().enumerate() {
        hb = g.add_bias(g.matmul(w, hb)?, b)?;
        if i + 1 < head_vals.len() {
            hb = g.elu(hb);
        }
    }
    let loss = g.cross_entropy(hb, labels)?;
    let loss_val = g.item(loss);
    g.backward(loss)?;

    // Batch accuracy from the logits already in hand.
    let logits = g.data(hb);
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let mut best = 0;
        for r in 0..logits.rows() {
            if logits.at(r, b) > logits.at(best, b) {
                best = r;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    drop(logits);

    let grads: Vec<Tensor> = enc_vals
        .iter()
        .chain(&head_vals)
        .flat_map(|&(w, b)| [g.grad(w), g.grad(b)])
        .collect();
    let mut targets: Vec<&mut Tensor> = Vec::new();
    for l in params.encoder.iter_mut().chain(params.head.iter_mut()) {
        targets.push(&mut l.weight);
        targets.push(&mut l.bias);
    }
    opt.apply(&mut targets, &grads);
    Ok((loss_val, correct))
}

// ── checkpoint IO ───────────────────────────────────────────────────

/// Save trained parameters plus a human-readable sidecar.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (i, l) in params.encoder.iter().enumerate() {
        entries.push((format!("enc{i}.w"), &l.weight));
        entries.push((format!("enc{i}.b"), &l.bias));
    }
    for (i, l) in params.head.iter().enumerate() {
        entries.push((format!("head{i}.w"), &l.weight));
        entries.push((format!("head{i}.b"), &l.bias));
    }
    let prior_mu;
    let prior_sigma;
    if let Some(p) = &params.prior {
        prior_mu = Tensor::from_vec(p.mu.len(), 1, p.mu.clone());
        prior_sigma = Tensor::from_vec(p.sigma.len(), 1, p.sigma.clone());
        entries.push(("prior.mu".into(), &prior_mu));
        entries.push(("prior.sigma".into(), &prior_sigma));
    }
    let mut meta: Vec<(String, String)> = vec![
        ("kind".into(), "model".into()),
        ("arch".into(), params.arch.name().into()),
        ("classes".into(), params.classes.to_string()),
        ("tap_layer".into(), params.tap_layer.to_string()),
        ("encoder_layers".into(), params.encoder.len().to_string()),
        ("head_layers".into(), params.head.len().to_string()),
        ("seed".into(), params.seed.to_string()),
        (
            "dims".into(),
            params
                .encoder
                .iter()
                .map(|l| l.out_dim().to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
    ];
    if let Some(h) = &params.hier {
        meta.push(("n_anchors".into(), h.n_anchors.to_string()));
        meta.push(("k_neighbors".into(), h.k_neighbors.to_string()));
    }
    if let Some(p) = &params.prior {
        meta.push(("prior_mu_head".into(), preview(&p.mu)));
        meta.push(("prior_sigma_head".into(), preview(&p.sigma)));
    }
    checkpoint::save(path, &entries, &meta)?;
    Ok(())
}

fn preview(xs: &[f64]) -> String {
    xs.iter()
        .take(4)
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let (entries, meta) = checkpoint::load(path)?;
    let get = |k: &str| checkpoint::meta_value(&meta, k);
    let arch = match get("arch")? {
        "hier" => ArchKind::Hier,
        _ => ArchKind::Flat,
    };
    let classes: usize = get("classes")?.parse().unwrap_or(0);
    let tap_layer: usize = get("tap_layer")?.parse().unwrap_or(1);
    let n_enc: usize = get("encoder_layers")?.parse().unwrap_or(0);
    let n_head: usize = get("head_layers")?.parse().unwrap_or(0);
    let seed: u64 = get("seed")?.parse().unwrap_or(0);
    let layer = |prefix: &str, i: usize| -> Result<AffineParams> {
        Ok(AffineParams {
            weight: checkpoint::find(&entries, &format!("{prefix}{i}.w"))?.clone(),
            bias: checkpoint::find(&entries, &format!("{prefix}{i}.b"))?.clone(),
        })
    };
    let encoder: Vec<AffineParams> = (0..n_enc)
        .map(|i| layer("enc", i))
        .collect::<Result<_>>()?;
    let head: Vec<AffineParams> = (0..n_head)
        .map(|i| layer("head", i))
        .collect::<Result<_>>()?;
    let hier = match arch {
        ArchKind::Hier => Some(HierConfig {
            n_anchors: get("n_anchors")?.parse().unwrap_or(64),
            k_neighbors: get("k_neighbors")?.parse().unwrap_or(8),
        }),
        ArchKind::Flat => None,
    };
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
    Ok(ModelParams {
        arch,
        encoder,
        head,
        tap_layer,
        hier,
        classes,
        prior,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_dataset, generate_shape, DatasetSpec, ShapeKind};

    fn small_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = Rng::new(seed);
        generate_shape(ShapeKind::Cone, n, &mut rng, 0.01).unwrap()
    }

    #[test]
    fn classify_sums_to_one_and_uniform_when_untrained_head_is_zero() {
        let mut params = pointnet_lite(5, 3, 3).unwrap();
        let pc = small_cloud(1, 64);
        let probs = classify(&params, &pc).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        for l in &mut params.head {
            l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
            l.bias = Tensor::zeros(l.bias.rows(), 1);
        }
        let probs = classify(&params, &pc).unwrap();
        for p in &probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_classify_is_permutation_invariant() {
        let params = pointnet_lite(4, 3, 7).unwrap();
        let pc = small_cloud(2, 96);
        let probs = classify(&params, &pc).unwrap();
        let mut rng = Rng::new(9);
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        rng.shuffle(&mut perm);
        let permuted = PointCloud::new(perm.iter().map(|&i| pc.points[i]).collect());
        let probs2 = classify(&params, &permuted).unwrap();
        for (a, b) in probs.iter().zip(&probs2) {
            assert_eq!(a.to_bits(), b.to_bits(), "permutation changed probabilities");
        }
    }

    #[test]
    fn flat_tap_is_permutation_equivariant() {
        let params = pointnet_lite(4, 3, 7).unwrap();
        let pc = small_cloud(12, 40);
        let fwd = forward_cloud(&params, &pc, false).unwrap();
        let z = fwd.graph.data_clone(fwd.tap);
        let mut rng = Rng::new(10);
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        rng.shuffle(&mut perm);
        let permuted = PointCloud::new(perm.iter().map(|&i| pc.points[i]).collect());
        let fwd2 = forward_cloud(&params, &permuted, false).unwrap();
        let z2 = fwd2.graph.data_clone(fwd2.tap);
        for (new_col, &old_col) in perm.iter().enumerate() {
            for r in 0..z.rows() {
                assert_eq!(z.at(r, old_col).to_bits(), z2.at(r, new_col).to_bits());
            }
        }
    }

    #[test]
    fn duplicating_points_keeps_global_feature() {
        let params = pointnet_lite(4, 3, 5).unwrap();
        let pc = small_cloud(3, 50);
        let fwd = forward_cloud(&params, &pc, false).unwrap();
        let g1 = fwd.graph.data_clone(fwd.pooled);
        let mut doubled = pc.points.clone();
        doubled.extend_from_slice(&pc.points);
        let fwd2 = forward_cloud(&params, &PointCloud::new(doubled), false).unwrap();
        let g2 = fwd2.graph.data_clone(fwd2.pooled);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn max_pool_bottleneck_bounds_critical_set() {
        let params = pointnet_lite(4, 3, 11).unwrap();
        let handle = ModelHandle::new(params);
        let pc = small_cloud(4, 128);
        let cp = handle.critical_indices(&pc).unwrap();
        assert!(cp.len() <= handle.params().global_dim());
        assert!(cp.iter().all(|&i| i < pc.len()));
    }

    #[test]
    fn fps_exhausts_and_picks_diagonal() {
        let mut rng = Rng::new(1);
        let square = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let all = fps(&square, 4, &mut rng).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);

        // Force the start at corner 0: the farthest point is the diagonal 2.
        let mut rng = Rng::new(0);
        let start = rng.below(4);
        let mut rng2 = Rng::new(0);
        let picks = fps(&square, 2, &mut rng2).unwrap();
        assert_eq!(picks[0], start);
        let diagonal = [2, 3, 0, 1][start];
        assert_eq!(picks[1], diagonal);
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let mut rng = Rng::new(6);
        let pc = small_cloud(5, 100);
        let m = 12;
        let chosen = fps(&pc.points, m, &mut rng).unwrap();
        let spread = |idx: &[usize]| -> f64 {
            let mut best = f64::INFINITY;
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    best = best.min(dist2(&pc.points[idx[i]], &pc.points[idx[j]]));
                }
            }
            best
        };
        let fps_spread = spread(&chosen);
        for _ in 0..100 {
            let mut pool: Vec<usize> = (0..pc.len()).collect();
            rng.shuffle(&mut pool);
            assert!(spread(&pool[..m]) <= fps_spread + 1e-12);
        }
    }

    #[test]
    fn fps_rejects_oversampling() {
        let mut rng = Rng::new(2);
        assert!(matches!(
            fps(&[[0.0; 3]; 3], 4, &mut rng),
            Err(ModelError::NotEnoughPoints { .. })
        ));
    }

    #[test]
    fn hier_forward_taps_anchors() {
        let params = hier_lite(4, 3, 13).unwrap();
        let pc = small_cloud(7, 200);
        let fwd = forward_cloud(&params, &pc, false).unwrap();
        assert_eq!(fwd.graph.shape(fwd.tap), (256, 64));
        assert_eq!(fwd.anchor_points.len(), 64);
        assert_eq!(fwd.anchor_indices.len(), 64);
        // anchors are a subset of the input points
        for (&i, p) in fwd.anchor_indices.iter().zip(&fwd.anchor_points) {
            assert_eq!(pc.points[i], *p);
        }
    }

    #[test]
    fn hier_rejects_small_clouds() {
        let params = hier_lite(4, 3, 13).unwrap();
        let pc = small_cloud(8, 32);
        assert!(matches!(
            forward_cloud(&params, &pc, false),
            Err(ModelError::NotEnoughPoints { .. })
        ));
    }

    #[test]
    fn one_class_dataset_hits_full_accuracy_after_one_epoch() {
        let spec = DatasetSpec {
            kinds: vec![ShapeKind::Sphere],
            per_class_train: 24,
            per_class_test: 8,
            n_points: 64,
            jitter: 0.01,
            seed: 5,
        };
        let ds = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (params, metrics) = train_classifier(&ds, ArchKind::Flat, 3, &cfg).unwrap();
        assert_eq!(metrics.len(), 1);
        assert!((metrics[0].test_acc - 1.0).abs() < 1e-12);
        assert!(params.prior.is_some());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let spec = DatasetSpec {
            kinds: vec![ShapeKind::Sphere, ShapeKind::Cube],
            per_class_train: 10,
            per_class_test: 4,
            n_points: 48,
            jitter: 0.01,
            seed: 8,
        };
        let ds = generate_dataset(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_classifier(&ds, ArchKind::Flat, 3, &cfg).unwrap();
        let (b, _) = train_classifier(&ds, ArchKind::Flat, 3, &cfg).unwrap();
        for (la, lb) in a.encoder.iter().zip(&b.encoder) {
            for (x, y) in la.weight.iter().zip(lb.weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut params = hier_lite(6, 3, 21).unwrap();
        params.prior = Some(PriorStats {
            mu: vec![0.5; 256],
            sigma: vec![1.25; 256],
        });
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.arch, ArchKind::Hier);
        assert_eq!(loaded.classes, 6);
        assert_eq!(loaded.tap_layer, 3);
        assert_eq!(loaded.encoder.len(), params.encoder.len());
        assert!(loaded.prior.is_some());
        let p = loaded.prior.unwrap();
        assert!((p.sigma[0] - 1.25).abs() < 1e-6);
        // f32 storage round-trip
        for (a, b) in params.encoder[0]
            .weight
            .iter()
            .zip(loaded.encoder[0].weight.iter())
        {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
