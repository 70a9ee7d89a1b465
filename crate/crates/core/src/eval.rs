//! Quantitative evaluation: point-drop attacks, critical-subset hierarchy,
//! score-map statistics, and efficiency accounting.
//!
//! Dropping removes points from the set (the models accept variable point
//! counts); nothing is moved toward the centroid. Attacks depend only on
//! the score ranking, with ties broken by point index.

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{
    cppp_meanpool, lime3d, pcsam, random_scores, BaselineError, Lime3dConfig, PcsamConfig,
};
use crate::explain::{dynamic_score_map, score_map, BottleneckParams, ExplainError, ScoreMap};
use crate::model::{ModelError, ModelHandle};
use crate::rng::Rng;
use crate::shapes::PointCloud;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Drop mode: most- or least-critical points first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Mcd,
    Lcd,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Mcd => "mcd",
            Mode::Lcd => "lcd",
        }
    }
}

/// Anything that produces a score map for a cloud. Scorers are stateless
/// given the immutable model handle, so per-cloud evaluation parallelizes.
pub trait Scorer: Sync {
    fn name(&self) -> String;
    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap>;
    /// Learned parameter count, for the efficiency report.
    fn parameter_count(&self) -> usize {
        0
    }
}

pub struct InfoConsScorer<'a> {
    pub theta: &'a BottleneckParams,
}

impl Scorer for InfoConsScorer<'_> {
    fn name(&self) -> String {
        "infocons".into()
    }

    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        Ok(score_map(self.theta, handle, pc)?)
    }

    fn parameter_count(&self) -> usize {
        self.theta.parameter_count()
    }
}

pub struct InfoConsDynScorer<'a> {
    pub theta: &'a BottleneckParams,
    pub iters: usize,
    pub drop_per_iter: usize,
}

impl Scorer for InfoConsDynScorer<'_> {
    fn name(&self) -> String {
        format!("infocons-dyn{}", self.iters)
    }

    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        let (sm, _) = dynamic_score_map(self.theta, handle, pc, self.iters, self.drop_per_iter)?;
        Ok(sm)
    }

    fn parameter_count(&self) -> usize {
        self.theta.parameter_count()
    }
}

pub struct CpppScorer;

impl Scorer for CpppScorer {
    fn name(&self) -> String {
        "cp++".into()
    }

    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        Ok(cppp_meanpool(handle, pc)?)
    }
}

pub struct PcsamScorer {
    pub cfg: PcsamConfig,
}

impl Scorer for PcsamScorer {
    fn name(&self) -> String {
        format!("pcsam{}", self.cfg.iters)
    }

    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        let label = pc
            .label
            .ok_or_else(|| EvalError::InvalidArg("gradient saliency needs a label".into()))?;
        Ok(pcsam(handle, pc, label, &self.cfg)?)
    }
}

pub struct Lime3dScorer {
    pub cfg: Lime3dConfig,
}

impl Scorer for Lime3dScorer {
    fn name(&self) -> String {
        format!("lime3d{}", self.cfg.n_queries)
    }

    fn score(&self, handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        Ok(lime3d(handle, pc, &self.cfg)?)
    }
}

/// Null control. Each cloud gets its own stream derived from the cloud
/// contents, so scoring stays deterministic under any evaluation order.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }

    fn score(&self, _handle: &ModelHandle, pc: &PointCloud) -> Result<ScoreMap> {
        let mut tag = 0xcbf29ce484222325u64; // FNV-1a over the first point
        for v in pc.points[0] {
            for b in v.to_bits().to_le_bytes() {
                tag ^= b as u64;
                tag = tag.wrapping_mul(0x100000001b3);
            }
        }
        tag ^= pc.len() as u64;
        let mut rng = Rng::new(self.seed).fork(tag);
        Ok(random_scores(pc, &mut rng))
    }
}

#[derive(Clone, Debug)]
pub struct DropAttackReport {
    pub scorer: String,
    pub mode: Mode,
    pub budgets: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub clouds: usize,
}

/// Accuracy after removing the top (`Mcd`) or bottom (`Lcd`) `b` points of
/// each cloud's ranking, per budget. Budgets must increase strictly and
/// stay below every cloud's size.
pub fn drop_attack(
    handle: &ModelHandle,
    clouds: &[PointCloud],
    scorer: &dyn Scorer,
    mode: Mode,
    budgets: &[usize],
) -> Result<DropAttackReport> {
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidArg(
            "budgets must be strictly increasing".into(),
        ));
    }
    if let Some(pc) = clouds.iter().find(|pc| {
        budgets
            .last()
            .is_some_and(|&b| b >= pc.len())
    }) {
        return Err(EvalError::InvalidArg(format!(
            "budget {} would empty a {}-point cloud",
            budgets.last().unwrap(),
            pc.len()
        )));
    }
    let per_cloud: Vec<Result<Vec<bool>>> = clouds
        .par_iter()
        .map(|pc| {
            let label = pc
                .label
                .ok_or_else(|| EvalError::InvalidArg("drop attack needs labeled clouds".into()))?;
            let sm = scorer.score(handle, pc)?;
            let ranking = sm.ranking();
            let mut correct = Vec::with_capacity(budgets.len());
            for &b in budgets {
                let drop: Vec<usize> = match mode {
                    Mode::Mcd => ranking[..b].to_vec(),
                    Mode::Lcd => ranking[ranking.len() - b..].to_vec(),
                };
                let reduced = pc.without_points(&drop);
                let probs = handle.classify(&reduced)?;
                correct.push(crate::model::argmax_slice(&probs) == label);
            }
            Ok(correct)
        })
        .collect();

    let mut hits = vec![0usize; budgets.len()];
    for row in per_cloud {
        for (h, ok) in hits.iter_mut().zip(row?) {
            if ok {
                *h += 1;
            }
        }
    }
    let accuracy = hits
        .iter()
        .map(|&h| h as f64 / clouds.len() as f64)
        .collect();
    Ok(DropAttackReport {
        scorer: scorer.name(),
        mode,
        budgets: budgets.to_vec(),
        accuracy,
        clouds: clouds.len(),
    })
}

/// Baseline accuracy with no points dropped.
pub fn baseline_accuracy(handle: &ModelHandle, clouds: &[PointCloud]) -> Result<f64> {
    let hits: Vec<Result<bool>> = clouds
        .par_iter()
        .map(|pc| {
            let probs = handle.classify(pc)?;
            Ok(crate::model::argmax_slice(&probs) == pc.label.unwrap())
        })
        .collect();
    let mut n = 0usize;
    for h in hits {
        if h? {
            n += 1;
        }
    }
    Ok(n as f64 / clouds.len() as f64)
}

// ── critical-subset hierarchy ───────────────────────────────────────

/// Deterministic 1-D Lloyd clustering of scores into `k` groups ordered by
/// mean score descending. Centroids start at evenly spaced quantile
/// midpoints; iteration stops when no centroid moves more than 1e-9 or
/// after 100 rounds. Fewer distinct scores than `k` reduce `k` with a
/// warning. The groups partition the index set exactly.
pub fn subset_hierarchy(scores: &[f64], k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(EvalError::InvalidArg("need at least 2 groups".into()));
    }
    if scores.is_empty() {
        return Err(EvalError::InvalidArg("no scores to cluster".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k = if distinct.len() < k {
        eprintln!(
            "warning: only {} distinct scores, reducing clusters from {k}",
            distinct.len()
        );
        distinct.len().max(1)
    } else {
        k
    };

    let n = sorted.len();
    let mut centroids: Vec<f64> = (0..k)
        .map(|j| {
            let q = (2 * j + 1) as f64 / (2 * k) as f64;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        })
        .collect();

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        for (i, &s) in scores.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &c) in centroids.iter().enumerate() {
                let d = (s - c).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assign[i] = best;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (i, &s) in scores.iter().enumerate() {
            sums[assign[i]] += s;
            counts[assign[i]] += 1;
        }
        let mut moved: f64 = 0.0;
        for j in 0..k {
            if counts[j] > 0 {
                let next = sums[j] / counts[j] as f64;
                moved = moved.max((next - centroids[j]).abs());
                centroids[j] = next;
            }
        }
        if moved <= 1e-9 {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[b].partial_cmp(&centroids[a]).unwrap());
    let rank_of: Vec<usize> = {
        let mut r = vec![0; k];
        for (rank, &j) in order.iter().enumerate() {
            r[j] = rank;
        }
        r
    };
    let mut groups = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        groups[rank_of[a]].push(i);
    }
    Ok(groups)
}

/// Mean per-cloud population variance of scores; the scalar quality axis
/// for hyperparameter sweeps.
pub fn score_variance(maps: &[ScoreMap]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    let per_cloud: f64 = maps
        .iter()
        .map(|m| {
            let n = m.scores.len() as f64;
            let mean = m.scores.iter().sum::<f64>() / n;
            m.scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n
        })
        .sum();
    per_cloud / maps.len() as f64
}

// ── efficiency accounting ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    pub scorer: String,
    pub forwards: u64,
    pub backwards: u64,
    pub explainer_params: usize,
    pub ms_per_cloud: f64,
    pub clouds: usize,
}

/// Exact per-cloud invocation counts plus median wall time. Counts come
/// from the handle's counters and must be identical for every sample cloud;
/// wall-clock noise never touches them.
pub fn efficiency_report(
    handle: &ModelHandle,
    scorer: &dyn Scorer,
    clouds: &[PointCloud],
) -> Result<EfficiencyReport> {
    if clouds.is_empty() {
        return Err(EvalError::InvalidArg("need sample clouds".into()));
    }
    let mut times = Vec::with_capacity(clouds.len());
    let mut counts: Option<(u64, u64)> = None;
    for pc in clouds {
        let (f0, b0, _) = handle.counts();
        let t = std::time::Instant::now();
        scorer.score(handle, pc)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        let (f1, b1, _) = handle.counts();
        let delta = (f1 - f0, b1 - b0);
        match counts {
            None => counts = Some(delta),
            Some(prev) if prev == delta => {}
            Some(prev) => {
                return Err(EvalError::InvalidArg(format!(
                    "scorer cost varies across clouds: {prev:?} vs {delta:?}"
                )))
            }
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let (forwards, backwards) = counts.unwrap();
    Ok(EfficiencyReport {
        scorer: scorer.name(),
        forwards,
        backwards,
        explainer_params: scorer.parameter_count(),
        ms_per_cloud: median,
        clouds: clouds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pointnet_lite;
    use crate::shapes::{generate_dataset, DatasetSpec, ShapeKind};

    fn tiny_dataset() -> crate::shapes::LabeledDataset {
        generate_dataset(&DatasetSpec {
            kinds: vec![ShapeKind::Sphere, ShapeKind::ChairLike],
            per_class_train: 6,
            per_class_test: 5,
            n_points: 48,
            jitter: 0.01,
            seed: 31,
        })
        .unwrap()
    }

    #[test]
    fn budget_zero_behavior_and_validation() {
        let handle = ModelHandle::new(pointnet_lite(2, 3, 1).unwrap());
        let ds = tiny_dataset();
        let scorer = RandomScorer { seed: 4 };
        assert!(drop_attack(&handle, &ds.test, &scorer, Mode::Mcd, &[4, 4]).is_err());
        assert!(drop_attack(&handle, &ds.test, &scorer, Mode::Mcd, &[64]).is_err());
        let rep = drop_attack(&handle, &ds.test, &scorer, Mode::Mcd, &[2, 6]).unwrap();
        assert_eq!(rep.budgets, vec![2, 6]);
        assert_eq!(rep.accuracy.len(), 2);
        assert!(rep.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn budget_zero_is_the_baseline_for_both_modes() {
        let handle = ModelHandle::new(pointnet_lite(2, 3, 17).unwrap());
        let ds = tiny_dataset();
        let base = baseline_accuracy(&handle, &ds.test).unwrap();
        let scorer = RandomScorer { seed: 9 };
        for mode in [Mode::Mcd, Mode::Lcd] {
            let rep = drop_attack(&handle, &ds.test, &scorer, mode, &[0, 3]).unwrap();
            assert_eq!(rep.accuracy[0], base);
        }
    }

    #[test]
    fn ranking_invariance_under_monotone_transform() {
        // Any strictly increasing transform of the scores leaves the report
        // identical.
        struct Fixed(Vec<f64>);
        impl Scorer for Fixed {
            fn name(&self) -> String {
                "fixed".into()
            }
            fn score(&self, _h: &ModelHandle, _pc: &PointCloud) -> Result<ScoreMap> {
                Ok(ScoreMap::new(self.0.clone(), "fixed", 1))
            }
        }
        let handle = ModelHandle::new(pointnet_lite(2, 3, 2).unwrap());
        let ds = tiny_dataset();
        let mut rng = Rng::new(7);
        let base: Vec<f64> = (0..48).map(|_| rng.uniform()).collect();
        let squashed: Vec<f64> = base.iter().map(|s| (3.0 * s).tanh() * 0.5 + 0.5).collect();
        let a = drop_attack(&handle, &ds.test, &Fixed(base), Mode::Mcd, &[4, 8]).unwrap();
        let b = drop_attack(&handle, &ds.test, &Fixed(squashed), Mode::Mcd, &[4, 8]).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn random_scorer_is_order_independent() {
        let handle = ModelHandle::new(pointnet_lite(2, 3, 3).unwrap());
        let ds = tiny_dataset();
        let scorer = RandomScorer { seed: 11 };
        let a = scorer.score(&handle, &ds.test[0]).unwrap();
        let _ = scorer.score(&handle, &ds.test[1]).unwrap();
        let again = scorer.score(&handle, &ds.test[0]).unwrap();
        for (x, y) in a.scores.iter().zip(&again.scores) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn hierarchy_partitions_and_separates() {
        let scores = vec![0.1, 0.9, 0.12, 0.88, 0.11, 0.91];
        let groups = subset_hierarchy(&scores, 2).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0], vec![1, 3, 5], "high group first");
        assert_eq!(groups[1], vec![0, 2, 4]);
        let union: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(union, scores.len());
    }

    #[test]
    fn hierarchy_reduces_k_on_constant_scores() {
        let groups = subset_hierarchy(&[0.5; 10], 4).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 10);
    }

    #[test]
    fn hierarchy_beats_random_partitions() {
        let mut rng = Rng::new(13);
        let scores: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        let k = 4;
        let groups = subset_hierarchy(&scores, k).unwrap();
        let within = |gs: &[Vec<usize>]| -> f64 {
            gs.iter()
                .map(|g| {
                    let m = g.iter().map(|&i| scores[i]).sum::<f64>() / g.len() as f64;
                    g.iter().map(|&i| (scores[i] - m).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let ours = within(&groups);
        let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            rng.shuffle(&mut perm);
            let mut parts = Vec::new();
            let mut off = 0;
            for &s in &sizes {
                parts.push(perm[off..off + s].to_vec());
                off += s;
            }
            assert!(within(&parts) >= ours - 1e-9);
        }
    }

    #[test]
    fn variance_of_known_maps() {
        let constant = ScoreMap::new(vec![0.3; 10], "t", 1);
        assert!(score_variance(&[constant]) < 1e-30);
        let mut half = vec![0.0; 5];
        half.extend(vec![1.0; 5]);
        let bimodal = ScoreMap::new(half, "t", 1);
        assert!((score_variance(&[bimodal]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn efficiency_counts_are_exact() {
        let handle = ModelHandle::new(pointnet_lite(2, 3, 5).unwrap());
        let ds = tiny_dataset();
        handle.reset_counts();
        let rep = efficiency_report(&handle, &CpppScorer, &ds.test).unwrap();
        assert_eq!(rep.forwards, 1);
        assert_eq!(rep.backwards, 0);
        assert_eq!(rep.explainer_params, 0);
    }
}
