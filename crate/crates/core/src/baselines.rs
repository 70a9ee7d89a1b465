//! Baseline attribution methods sharing the score-map contract.
//!
//! * critical subset via final max-pool argmax indices,
//! * continuous scores from mean absolute tap activation,
//! * gradient saliency over spherical coordinates with iterative dropping,
//! * black-box occlusion queries fit with a ridge surrogate,
//! * and a seeded random control.

use thiserror::Error;

use crate::explain::{interpolate_scores, ScoreMap};
use crate::model::{ModelError, ModelHandle};
use crate::rng::Rng;
use crate::shapes::PointCloud;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("surrogate fit failed: normal equations singular even after raising ridge strength")]
    SingularFit,
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Distinct argmax point indices of the final max pooling, sorted. The
/// subset size is bounded by the channel count (each channel contributes
/// one argmax).
pub fn cp_maxpool(handle: &ModelHandle, pc: &PointCloud) -> Result<Vec<usize>> {
    Ok(handle.critical_indices(pc)?)
}

/// Mean absolute tap activation per point, min-max normalized into [0, 1].
/// A constant activation map yields all 0.5 by convention. Subsampled taps
/// are interpolated back to every input point.
pub fn cppp_meanpool(handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
    let tap = handle.tap_features(pc)?;
    let raw: Vec<f64> = (0..tap.z.cols())
        .map(|c| {
            let mut s = 0.0;
            for r in 0..tap.z.rows() {
                s += tap.z.at(r, c).abs();
            }
            s / tap.z.rows() as f64
        })
        .collect();
    let scores = if tap.anchor_points.len() == pc.len() {
        min_max_normalize(&raw)
    } else {
        let anchor_scores = min_max_normalize(&raw);
        interpolate_scores(&tap.anchor_points, &anchor_scores, &pc.points)
    };
    Ok(ScoreMap::new(scores, "cp++", 1))
}

fn min_max_normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; xs.len()]
    }
}

// ── gradient saliency over spherical coordinates ────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PcsamConfig {
    /// Scale exponent on the radial coordinate.
    pub alpha: f64,
    pub iters: usize,
    pub drop_per_iter: usize,
}

impl Default for PcsamConfig {
    fn default() -> Self {
        PcsamConfig {
            alpha: 1.0,
            iters: 20,
            drop_per_iter: 10,
        }
    }
}

/// Saliency of each point from its loss gradient: the radial projection of
/// the Cartesian gradient about `center`, scaled by `-r^(1+alpha)`. Points
/// at the center itself (r = 0) have no radial direction and score zero.
pub fn pcsam_scores_from_gradient(
    points: &[[f64; 3]],
    grads: &[[f64; 3]],
    center: [f64; 3],
    alpha: f64,
) -> Vec<f64> {
    points
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r == 0.0 {
                return 0.0;
            }
            // dL/dr is the radial projection of the Cartesian gradient.
            let dl_dr = (g[0] * d[0] + g[1] * d[1] + g[2] * d[2]) / r;
            -dl_dr * r.powf(1.0 + alpha)
        })
        .collect()
}

/// Coordinate-wise median, the spherical center the saliency is taken
/// about. Even counts average the two middle values.
pub fn median_center(points: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let n = points.len();
    for (d, o) in out.iter_mut().enumerate() {
        let mut vals: Vec<f64> = points.iter().map(|p| p[d]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *o = if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        };
    }
    out
}

/// Iterative gradient saliency: each iteration recomputes loss gradients on
/// the surviving cloud (one forward plus one backward), drops the
/// `drop_per_iter` highest-saliency points, and repeats. The final map uses
/// the same rank convention as the dynamic explainer map: dropped points
/// linearly spaced in (0.5, 1] by drop order, survivors rescaled into
/// [0, 0.5].
pub fn pcsam(
    handle: &ModelHandle,
    pc: &PointCloud,
    label: usize,
    cfg: &PcsamConfig,
) -> Result<ScoreMap> {
    let n = pc.len();
    if cfg.iters == 0 || cfg.drop_per_iter == 0 {
        return Err(BaselineError::InvalidConfig(
            "iterations and drop count must be positive".into(),
        ));
    }
    if cfg.iters * cfg.drop_per_iter >= n {
        return Err(BaselineError::InvalidConfig(format!(
            "{} x {} dropped points must stay below the cloud size {n}",
            cfg.iters, cfg.drop_per_iter
        )));
    }
    let mut surviving: Vec<usize> = (0..n).collect();
    let mut dropped_order: Vec<usize> = Vec::new();
    let mut last_scores = vec![0.0; n];
    for _ in 0..cfg.iters {
        let sub = PointCloud {
            points: surviving.iter().map(|&i| pc.points[i]).collect(),
            label: pc.label,
            part_ids: None,
        };
        let grads = handle.input_gradient(&sub, label)?;
        let center = median_center(&sub.points);
        let scores = pcsam_scores_from_gradient(&sub.points, &grads, center, cfg.alpha);
        for (local, &orig) in surviving.iter().enumerate() {
            last_scores[orig] = scores[local];
        }
        let mut order: Vec<usize> = (0..surviving.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(surviving[a].cmp(&surviving[b]))
        });
        let marked: Vec<usize> = order[..cfg.drop_per_iter]
            .iter()
            .map(|&l| surviving[l])
            .collect();
        dropped_order.extend_from_slice(&marked);
        surviving.retain(|i| !marked.contains(i));
    }
    let total = dropped_order.len() as f64;
    let mut scores = vec![0.0; n];
    for (rank, &orig) in dropped_order.iter().enumerate() {
        scores[orig] = 1.0 - rank as f64 * 0.5 / total;
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
    Ok(ScoreMap::new(scores, "pcsam", cfg.iters))
}

// ── black-box occlusion surrogate ───────────────────────────────────

#[derive(Clone, Debug)]
pub struct Lime3dConfig {
    pub n_queries: usize,
    /// Probability of dropping each point in a query mask.
    pub drop_prob: f64,
    /// Ridge regularization strength.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for Lime3dConfig {
    fn default() -> Self {
        Lime3dConfig {
            n_queries: 100,
            drop_prob: 0.3,
            lambda: 1e-3,
            seed: 0,
        }
    }
}

/// Occlusion surrogate: draw binary keep/drop masks, evaluate the model
/// probability of the explained class on each point-dropped cloud, and fit
/// a ridge regression from mask vectors to probabilities. Scores are the
/// min-max-normalized coefficients.
///
/// The first query keeps every point; it pins the explained class (the
/// model's prediction on the intact cloud) without spending an extra
/// forward, so the model is evaluated exactly `n_queries` times.
pub fn lime3d(handle: &ModelHandle, pc: &PointCloud, cfg: &Lime3dConfig) -> Result<ScoreMap> {
    let n = pc.len();
    if cfg.n_queries < 10 {
        return Err(BaselineError::InvalidConfig(format!(
            "need at least 10 queries, got {}",
            cfg.n_queries
        )));
    }
    if !(0.0..1.0).contains(&cfg.drop_prob) {
        return Err(BaselineError::InvalidConfig(format!(
            "drop probability must lie in [0, 1), got {}",
            cfg.drop_prob
        )));
    }
    if cfg.lambda < 0.0 {
        return Err(BaselineError::InvalidConfig(
            "ridge strength must be non-negative".into(),
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut masks: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_queries);
    let mut responses: Vec<f64> = Vec::with_capacity(cfg.n_queries);

    let full_probs = handle.classify(pc)?;
    let target = crate::model::argmax_slice(&full_probs);
    masks.push(vec![1.0; n]);
    responses.push(full_probs[target]);

    let min_keep = handle.params().min_points();
    for _ in 1..cfg.n_queries {
        let mask: Vec<f64> = loop {
            let m: Vec<f64> = (0..n)
                .map(|_| if rng.uniform() < cfg.drop_prob { 0.0 } else { 1.0 })
                .collect();
            // resample masks that keep too few points for the model
            let kept = m.iter().filter(|&&v| v > 0.0).count();
            if kept >= min_keep.max(1) {
                break m;
            }
        };
        let dropped: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        let masked = pc.without_points(&dropped);
        let probs = handle.classify(&masked)?;
        masks.push(mask);
        responses.push(probs[target]);
    }

    let coeffs = ridge_fit(&masks, &responses, cfg.lambda)?;
    Ok(ScoreMap::new(min_max_normalize(&coeffs), "lime3d", 1))
}

/// Centered ridge regression solved by Cholesky on the normal equations.
/// A singular system retries once with lambda raised tenfold (from 1e-8
/// when it started at zero).
pub fn ridge_fit(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let q = rows.len();
    let n = rows[0].len();
    let mut col_mean = vec![0.0; n];
    for row in rows {
        for (m, v) in col_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in col_mean.iter_mut() {
        *m /= q as f64;
    }
    let y_mean: f64 = y.iter().sum::<f64>() / q as f64;

    // Normal equations on centered data: (Xc^T Xc + lambda I) w = Xc^T yc.
    let mut gram = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (row, &yv) in rows.iter().zip(y) {
        let centered: Vec<f64> = row.iter().zip(&col_mean).map(|(v, m)| v - m).collect();
        let yc = yv - y_mean;
        for i in 0..n {
            rhs[i] += centered[i] * yc;
            for j in i..n {
                gram[i][j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i][j] = gram[j][i];
        }
    }
    for (attempt, lam) in [lambda, (lambda.max(1e-8)) * 10.0].into_iter().enumerate() {
        let mut a = gram.clone();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lam;
        }
        if let Some(w) = cholesky_solve(&a, &rhs) {
            return Ok(w);
        }
        if attempt == 1 {
            break;
        }
    }
    Err(BaselineError::SingularFit)
}

/// Dense SPD solve; None when a pivot collapses.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    // forward then back substitution
    let mut yv = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * yv[k];
        }
        yv[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = yv[i];
        for k in i + 1..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Independent uniform scores; the null control for drop attacks.
pub fn random_scores(pc: &PointCloud, rng: &mut Rng) -> ScoreMap {
    let scores = (0..pc.len()).map(|_| rng.uniform()).collect();
    ScoreMap::new(scores, "random", 1)
}
