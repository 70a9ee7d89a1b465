//! Command drivers behind the `infocons` binary.
//!
//! Configuration flows flags > config file > defaults; the environment
//! variable `INFOCONS_SEED` overrides any seed once set. Every command
//! writes `run_manifest.txt` into its output directory echoing the fully
//! resolved configuration; feeding that file back (`rerun`, or `--config`)
//! reproduces the outputs byte for byte. No command mutates an input file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::baselines::{BaselineError, Lime3dConfig, PcsamConfig};
use crate::checkpoint::CheckpointError;
use crate::eval::{
    baseline_accuracy, drop_attack, efficiency_report, subset_hierarchy, score_variance,
    CpppScorer, DropAttackReport, EvalError, InfoConsDynScorer, InfoConsScorer, Lime3dScorer,
    Mode, PcsamScorer, RandomScorer, Scorer,
};
use crate::explain::{
    dynamic_score_map, load_explainer, save_explainer, score_map, train_explainer, ExplainError,
    ExplainerConfig, ObjectiveKind,
};
use crate::graph::GraphError;
use crate::model::{
    load_model, save_model, train_classifier, ArchKind, ModelError, ModelHandle, OptimizerKind,
    TrainConfig,
};
use crate::report;
use crate::rng::Rng;
use crate::shapes::{
    generate_dataset, load_dataset, load_xyz, parse_kv, save_dataset, save_xyz, DatasetSpec,
    PointCloud, ShapeError, ShapeKind,
};

/// Errors carry the process exit code: 2 usage, 3 data/model, 4 numeric.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<ShapeError> for CliError {
    fn from(e: ShapeError) -> Self {
        match e {
            ShapeError::UnknownKind(_) | ShapeError::TooFewPoints { .. } | ShapeError::NegativeJitter(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CliError::Numeric(e.to_string()),
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            ExplainError::Graph(g) => g.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidArg(_) => CliError::Usage(e.to_string()),
            EvalError::Baseline(BaselineError::SingularFit) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            BaselineError::SingularFit => CliError::Numeric(e.to_string()),
            BaselineError::Model(m) => m.into(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Merged key=value settings with flag-over-file precedence already
/// applied. `INFOCONS_SEED` lands here as the `seed` key during merge.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_layers(config_file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = config_file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            for (k, v) in parse_kv(&text) {
                map.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        if let Ok(seed) = std::env::var("INFOCONS_SEED") {
            if !seed.is_empty() {
                map.insert("seed".into(), seed);
            }
        }
        Ok(Settings { map })
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Self {
        Settings {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn take<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value for {key}: `{raw}`"))),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required option --{key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }
}

fn write_manifest(out: &Path, command: &str, fields: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command={command}\n");
    for (k, v) in fields {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(out.join("run_manifest.txt"), text)?;
    Ok(())
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return Err(CliError::Data(format!(
                "output directory {} exists and is not empty (use --force)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(s: &Settings) -> Result<()> {
    let out = s.path("out")?;
    let classes: usize = s.take("classes", 6)?;
    let per_class: usize = s.take("per-class", 500)?;
    let per_class_test: usize = s.take("per-class-test", 100)?;
    let points: usize = s.take("points", 256)?;
    let jitter: f64 = s.take("jitter", 0.06)?;
    let seed: u64 = s.take("seed", 0)?;
    let force: bool = s.take("force", false)?;
    if classes == 0 || classes > ShapeKind::ALL.len() {
        return Err(CliError::Usage(format!(
            "classes must lie in 1..={}",
            ShapeKind::ALL.len()
        )));
    }
    prepare_out_dir(&out, force)?;
    let spec = DatasetSpec {
        kinds: ShapeKind::ALL[..classes].to_vec(),
        per_class_train: per_class,
        per_class_test,
        n_points: points,
        jitter,
        seed,
    };
    let ds = generate_dataset(&spec)?;
    save_dataset(&out, &ds)?;
    write_manifest(
        &out,
        "gen-data",
        &[
            ("classes", classes.to_string()),
            ("per-class", per_class.to_string()),
            ("per-class-test", per_class_test.to_string()),
            ("points", points.to_string()),
            ("jitter", jitter.to_string()),
            ("seed", seed.to_string()),
            ("force", force.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    println!(
        "wrote {} train / {} test clouds to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

pub fn cmd_train(s: &Settings) -> Result<()> {
    let data = s.path("data")?;
    let out = s.path("out")?;
    let arch = match s.take("arch", "flat".to_string())?.as_str() {
        "flat" => ArchKind::Flat,
        "hier" => ArchKind::Hier,
        other => return Err(CliError::Usage(format!("unknown arch `{other}`"))),
    };
    let tap_layer: usize = s.take("tap-layer", 3)?;
    let epochs: usize = s.take("epochs", 6)?;
    let batch: usize = s.take("batch", 16)?;
    let lr: f64 = s.take("lr", 1e-3)?;
    let optimizer = match s.take("optimizer", "adam".to_string())?.as_str() {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => return Err(CliError::Usage(format!("unknown optimizer `{other}`"))),
    };
    let seed: u64 = s.take("seed", 0)?;
    fs::create_dir_all(&out)?;

    let ds = load_dataset(&data)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: batch,
        lr,
        optimizer,
        seed,
    };
    let (params, metrics) = train_classifier(&ds, arch, tap_layer, &cfg)?;
    save_model(&out.join("model.ckpt"), &params)?;
    fs::write(out.join("train_curves.csv"), report::train_curves_csv(&metrics))?;
    write_manifest(
        &out,
        "train",
        &[
            ("data", data.display().to_string()),
            ("arch", arch.name().to_string()),
            ("tap-layer", tap_layer.to_string()),
            ("epochs", epochs.to_string()),
            ("batch", batch.to_string()),
            ("lr", lr.to_string()),
            (
                "optimizer",
                match optimizer {
                    OptimizerKind::Adam => "adam".into(),
                    OptimizerKind::Sgd => "sgd".into(),
                },
            ),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    let last = metrics.last().unwrap();
    println!(
        "trained {} model: train_acc {:.4} test_acc {:.4} -> {}",
        arch.name(),
        last.train_acc,
        last.test_acc,
        out.join("model.ckpt").display()
    );
    Ok(())
}

// ── train-explainer ─────────────────────────────────────────────────

pub fn cmd_train_explainer(s: &Settings) -> Result<()> {
    let model_path = s.path("model")?;
    let data = s.path("data")?;
    let out = s.path("out")?;
    let objective: ObjectiveKind = s
        .take("objective", "infocons".to_string())?
        .parse()
        .map_err(|e: ExplainError| CliError::Usage(e.to_string()))?;
    let betas: Vec<f64> = parse_list(&s.take("beta", "0.5".to_string())?)?;
    let dr: usize = s.take("dr", 64)?;
    let tau: f64 = s.take("tau", 0.7)?;
    let k: usize = s.take("k", 32)?;
    let epochs: usize = s.take("epochs", 50)?;
    let batch: usize = s.take("batch", 8)?;
    let lr: f64 = s.take("lr", 1e-3)?;
    let limit_train: usize = s.take("limit-train", 240)?;
    let seed: u64 = s.take("seed", 0)?;
    fs::create_dir_all(&out)?;

    if !model_path.exists() {
        return Err(CliError::Data(format!(
            "model checkpoint {} not found (train a classifier first)",
            model_path.display()
        )));
    }
    let model = load_model(&model_path)?;
    let ds = load_dataset(&data)?;
    let subset = class_balanced_subset(&ds.train, ds.classes(), limit_train);

    let mut diverged_any = false;
    for &beta in &betas {
        let cfg = ExplainerConfig {
            objective,
            beta,
            reduced_dim: dr,
            tau,
            noise_samples: k,
            epochs,
            batch_size: batch,
            lr,
            seed,
            max_train_clouds: 0,
        };
        let outcome = train_explainer(&model, &subset, &cfg)?;
        let suffix = if betas.len() == 1 {
            String::new()
        } else {
            format!("_b{beta}")
        };
        save_explainer(&out.join(format!("explainer{suffix}.ckpt")), &outcome.params)?;
        fs::write(
            out.join(format!("loss_curves{suffix}.csv")),
            report::loss_curves_csv(&outcome.curves),
        )?;
        let last = outcome.curves.last();
        println!(
            "beta {beta}: {} epochs, final ce {:.4} info {:.4}{}",
            outcome.curves.len(),
            last.map_or(f64::NAN, |e| e.ce),
            last.map_or(f64::NAN, |e| e.info),
            if outcome.diverged {
                " [diverged; kept last good epoch]"
            } else {
                ""
            }
        );
        diverged_any |= outcome.diverged;
    }
    write_manifest(
        &out,
        "train-explainer",
        &[
            ("model", model_path.display().to_string()),
            ("data", data.display().to_string()),
            ("objective", objective.name().to_string()),
            ("beta", join_list(&betas)),
            ("dr", dr.to_string()),
            ("tau", tau.to_string()),
            ("k", k.to_string()),
            ("epochs", epochs.to_string()),
            ("batch", batch.to_string()),
            ("lr", lr.to_string()),
            ("limit-train", limit_train.to_string()),
            ("seed", seed.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    if diverged_any {
        return Err(CliError::Numeric(
            "explainer training diverged; last good checkpoint kept".into(),
        ));
    }
    Ok(())
}

/// First `limit` clouds spread evenly over classes (0 = all).
pub fn class_balanced_subset(clouds: &[PointCloud], classes: usize, limit: usize) -> Vec<PointCloud> {
    if limit == 0 || limit >= clouds.len() {
        return clouds.to_vec();
    }
    let per_class = (limit / classes.max(1)).max(1);
    let mut counts = vec![0usize; classes];
    let mut out = Vec::with_capacity(limit);
    for pc in clouds {
        let l = pc.label.unwrap_or(0);
        if counts[l] < per_class {
            counts[l] += 1;
            out.push(pc.clone());
            if out.len() == per_class * classes {
                break;
            }
        }
    }
    out
}

// ── explain ─────────────────────────────────────────────────────────

pub fn cmd_explain(s: &Settings) -> Result<()> {
    let model_path = s.path("model")?;
    let input = s.path("input")?;
    let out = s.path("out")?;
    let method = s.take("method", "infocons".to_string())?;
    let iters: usize = s.take("iters", 20)?;
    let drop_per_iter: usize = s.take("drop-per-iter", 10)?;
    let top: usize = s.take("top", 64)?;
    let seed: u64 = s.take("seed", 0)?;
    fs::create_dir_all(&out)?;

    let model = load_model(&model_path)?;
    let handle = ModelHandle::new(model);
    let (mut pc, _) = load_xyz(&input)?;
    if let Some(label) = s.get("label") {
        pc.label = Some(
            label
                .parse()
                .map_err(|_| CliError::Usage(format!("bad label `{label}`")))?,
        );
    }

    let load_theta = || -> Result<crate::explain::BottleneckParams> {
        let path = s.path("explainer")?;
        Ok(load_explainer(&path)?)
    };

    let sm = match method.as_str() {
        "infocons" => {
            let theta = load_theta()?;
            score_map(&theta, &handle, &pc)?
        }
        "infocons-dyn" => {
            let theta = load_theta()?;
            let (sm, _) = dynamic_score_map(&theta, &handle, &pc, iters, drop_per_iter)?;
            sm
        }
        "cp" => {
            let subset = crate::baselines::cp_maxpool(&handle, &pc)?;
            let mut text = String::new();
            for i in &subset {
                text.push_str(&format!("{i}\n"));
            }
            fs::write(out.join("critical_indices.txt"), text)?;
            let scores: Vec<f64> = (0..pc.len())
                .map(|i| if subset.contains(&i) { 1.0 } else { 0.0 })
                .collect();
            let svg = report::scatter_svg(&pc, &scores, &subset, "critical points");
            fs::write(out.join("scores.svg"), svg)?;
            write_explain_manifest(s, &out, &method, iters, drop_per_iter, top, seed)?;
            println!(
                "critical subset of {} points -> {}",
                subset.len(),
                out.join("critical_indices.txt").display()
            );
            return Ok(());
        }
        "cp++" => crate::baselines::cppp_meanpool(&handle, &pc)?,
        "pcsam" => {
            let label = pc.label.ok_or_else(|| {
                CliError::Usage("gradient saliency needs --label for the explained cloud".into())
            })?;
            let cfg = PcsamConfig {
                alpha: s.take("alpha", 1.0)?,
                iters,
                drop_per_iter,
            };
            crate::baselines::pcsam(&handle, &pc, label, &cfg)?
        }
        "lime3d" => {
            let cfg = Lime3dConfig {
                n_queries: s.take("queries", 100)?,
                drop_prob: s.take("drop-prob", 0.3)?,
                lambda: s.take("lambda", 1e-3)?,
                seed,
            };
            crate::baselines::lime3d(&handle, &pc, &cfg)?
        }
        "random" => {
            let mut rng = Rng::new(seed);
            crate::baselines::random_scores(&pc, &mut rng)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown method `{other}` (expected infocons, infocons-dyn, cp, cp++, pcsam, lime3d, random)"
            )))
        }
    };

    save_xyz(&out.join("scores.xyz"), &pc, Some(&sm.scores))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let circled: Vec<usize> = sm.ranking()[..top.min(pc.len())].to_vec();
    let svg = report::scatter_svg(&pc, &sm.scores, &circled, &format!("{} score map", sm.method));
    fs::write(out.join("scores.svg"), svg)?;
    write_explain_manifest(s, &out, &method, iters, drop_per_iter, top, seed)?;
    println!(
        "score map ({}) -> {}",
        sm.method,
        out.join("scores.xyz").display()
    );
    Ok(())
}

fn write_explain_manifest(
    s: &Settings,
    out: &Path,
    method: &str,
    iters: usize,
    drop_per_iter: usize,
    top: usize,
    seed: u64,
) -> Result<()> {
    let mut fields = vec![
        ("model", s.require("model")?.to_string()),
        ("input", s.require("input")?.to_string()),
        ("method", method.to_string()),
        ("iters", iters.to_string()),
        ("drop-per-iter", drop_per_iter.to_string()),
        ("top", top.to_string()),
        ("seed", seed.to_string()),
        ("out", out.display().to_string()),
    ];
    for key in ["explainer", "label", "alpha", "queries", "drop-prob", "lambda"] {
        if let Some(v) = s.get(key) {
            fields.push((key, v.to_string()));
        }
    }
    write_manifest(out, "explain", &fields)
}

// ── eval ────────────────────────────────────────────────────────────

pub fn cmd_eval(s: &Settings) -> Result<()> {
    let model_path = s.path("model")?;
    let data = s.path("data")?;
    let out = s.path("out")?;
    let scorers: Vec<String> = s
        .take("scorers", "infocons,random".to_string())?
        .split(',')
        .map(str::to_string)
        .collect();
    let modes: Vec<Mode> = s
        .take("modes", "mcd,lcd".to_string())?
        .split(',')
        .map(|m| match m {
            "mcd" => Ok(Mode::Mcd),
            "lcd" => Ok(Mode::Lcd),
            other => Err(CliError::Usage(format!("unknown mode `{other}`"))),
        })
        .collect::<Result<_>>()?;
    let budgets: Vec<usize> = parse_list(&s.take("budgets", "4,8,16,32,64".to_string())?)?;
    let k: usize = s.take("k", 4)?;
    let jobs: usize = s.take("jobs", 1)?;
    let limit_test: usize = s.take("limit-test", 0)?;
    let efficiency_clouds: usize = s.take("efficiency-clouds", 20)?;
    let iters: usize = s.take("iters", 20)?;
    let drop_per_iter: usize = s.take("drop-per-iter", 10)?;
    let queries: usize = s.take("queries", 100)?;
    let seed: u64 = s.take("seed", 0)?;
    fs::create_dir_all(&out)?;

    if !model_path.exists() {
        return Err(CliError::Data(format!(
            "model checkpoint {} not found",
            model_path.display()
        )));
    }
    let model = load_model(&model_path)?;
    let handle = ModelHandle::new(model);
    let ds = load_dataset(&data)?;
    let test: Vec<PointCloud> = if limit_test == 0 {
        ds.test.clone()
    } else {
        ds.test.iter().take(limit_test).cloned().collect()
    };

    let needs_theta = scorers.iter().any(|s| s.starts_with("infocons"));
    let theta = if needs_theta {
        let path = s.path("explainer")?;
        if !path.exists() {
            return Err(CliError::Data(format!(
                "explainer checkpoint {} not found",
                path.display()
            )));
        }
        Some(load_explainer(&path)?)
    } else {
        None
    };

    let make_scorer = |name: &str| -> Result<Box<dyn Scorer + '_>> {
        match name {
            "infocons" => Ok(Box::new(InfoConsScorer {
                theta: theta.as_ref().unwrap(),
            })),
            "infocons-dyn" => Ok(Box::new(InfoConsDynScorer {
                theta: theta.as_ref().unwrap(),
                iters,
                drop_per_iter,
            })),
            "cp++" => Ok(Box::new(CpppScorer)),
            "pcsam" => Ok(Box::new(PcsamScorer {
                cfg: PcsamConfig {
                    alpha: s.take("alpha", 1.0)?,
                    iters,
                    drop_per_iter,
                },
            })),
            "lime3d" => Ok(Box::new(Lime3dScorer {
                cfg: Lime3dConfig {
                    n_queries: queries,
                    drop_prob: s.take("drop-prob", 0.3)?,
                    lambda: s.take("lambda", 1e-3)?,
                    seed,
                },
            })),
            "random" => Ok(Box::new(RandomScorer { seed })),
            other => Err(CliError::Usage(format!(
                "unknown scorer `{other}` (expected infocons, infocons-dyn, cp++, pcsam, lime3d, random)"
            ))),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Data(e.to_string()))?;

    let body = || -> Result<()> {
        let baseline = baseline_accuracy(&handle, &test)?;
        let mut reports: Vec<DropAttackReport> = Vec::new();
        let mut variance_rows: Vec<(String, f64)> = Vec::new();
        let mut eff_rows = Vec::new();
        for name in &scorers {
            let scorer = make_scorer(name)?;
            for &mode in &modes {
                reports.push(drop_attack(&handle, &test, scorer.as_ref(), mode, &budgets)?);
            }
            let sample = &test[..test.len().min(50)];
            let maps: Vec<crate::explain::ScoreMap> = sample
                .iter()
                .map(|pc| scorer.score(&handle, pc))
                .collect::<crate::eval::Result<_>>()?;
            variance_rows.push((name.clone(), score_variance(&maps)));
            let eff_sample = &test[..test.len().min(efficiency_clouds.max(1))];
            eff_rows.push(efficiency_report(&handle, scorer.as_ref(), eff_sample)?);
        }

        // Critical-subset hierarchy of the first test cloud under the first
        // scorer that yields a map.
        if let Some(name) = scorers.first() {
            let scorer = make_scorer(name)?;
            let sm = scorer.score(&handle, &test[0])?;
            let groups = subset_hierarchy(&sm.scores, k)?;
            let mut text = String::new();
            for (level, g) in groups.iter().enumerate() {
                let mean =
                    g.iter().map(|&i| sm.scores[i]).sum::<f64>() / g.len().max(1) as f64;
                text.push_str(&format!(
                    "level {level} (mean score {mean:.4}, {} points): ",
                    g.len()
                ));
                text.push_str(
                    &g.iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(" "),
                );
                text.push('\n');
            }
            fs::write(out.join("hierarchy.txt"), text)?;
        }

        fs::write(out.join("drop_curves.csv"), report::drop_curves_csv(&reports))?;
        fs::write(
            out.join("curves.svg"),
            report::curves_svg(&reports, "accuracy under point-drop attack"),
        )?;
        fs::write(out.join("efficiency.csv"), report::efficiency_csv(&eff_rows))?;
        let mut var_csv = String::from("scorer,variance\n");
        for (n, v) in &variance_rows {
            var_csv.push_str(&format!("{n},{v:.9}\n"));
        }
        fs::write(out.join("variance.csv"), var_csv)?;
        fs::write(
            out.join("report.txt"),
            report::text_report(baseline, &reports, &eff_rows, &variance_rows),
        )?;

        // Optional hyperparameter sweep: variance and max-budget accuracy
        // per explainer checkpoint.
        if let Some(paths) = s.get("sweep-explainers") {
            let mut csv = String::from("beta,variance,acc_mcd_at_max_budget\n");
            for p in paths.split(',') {
                let th = load_explainer(Path::new(p))?;
                let sample = &test[..test.len().min(50)];
                let scorer = InfoConsScorer { theta: &th };
                let maps: Vec<crate::explain::ScoreMap> = sample
                    .iter()
                    .map(|pc| scorer.score(&handle, pc))
                    .collect::<crate::eval::Result<_>>()?;
                let var = score_variance(&maps);
                let rep = drop_attack(
                    &handle,
                    &test,
                    &scorer,
                    Mode::Mcd,
                    &budgets[budgets.len() - 1..],
                )?;
                csv.push_str(&format!("{},{var:.9},{:.9}\n", th.beta, rep.accuracy[0]));
            }
            fs::write(out.join("sweep.csv"), csv)?;
        }
        Ok(())
    };
    pool.install(body)?;

    let mut fields = vec![
        ("model", model_path.display().to_string()),
        ("data", data.display().to_string()),
        ("scorers", scorers.join(",")),
        (
            "modes",
            modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        ),
        (
            "budgets",
            budgets
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("k", k.to_string()),
        ("jobs", jobs.to_string()),
        ("limit-test", limit_test.to_string()),
        ("efficiency-clouds", efficiency_clouds.to_string()),
        ("iters", iters.to_string()),
        ("drop-per-iter", drop_per_iter.to_string()),
        ("queries", queries.to_string()),
        ("seed", seed.to_string()),
        ("out", out.display().to_string()),
    ];
    for key in ["explainer", "alpha", "drop-prob", "lambda", "sweep-explainers"] {
        if let Some(v) = s.get(key) {
            fields.push((key, v.to_string()));
        }
    }
    write_manifest(&out, "eval", &fields)?;
    println!("evaluation reports -> {}", out.display());
    Ok(())
}

// ── rerun ───────────────────────────────────────────────────────────

/// Re-dispatch a command from its run manifest. `--out` may point the rerun
/// at a fresh directory; everything else comes from the manifest.
pub fn cmd_rerun(manifest_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let mut pairs = parse_kv(&text);
    let command = pairs
        .iter()
        .find(|(k, _)| k == "command")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| CliError::Data("manifest missing command=".into()))?;
    pairs.retain(|(k, _)| k != "command");
    if let Some(out) = out_override {
        pairs.retain(|(k, _)| k != "out");
        pairs.push(("out".into(), out.display().to_string()));
    }
    let settings = Settings::from_pairs(pairs);
    dispatch(&command, &settings)
}

pub fn dispatch(command: &str, settings: &Settings) -> Result<()> {
    match command {
        "gen-data" => cmd_gen_data(settings),
        "train" => cmd_train(settings),
        "train-explainer" => cmd_train_explainer(settings),
        "explain" => cmd_explain(settings),
        "eval" => cmd_eval(settings),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad list entry `{v}`")))
        })
        .collect()
}

fn join_list(vals: &[f64]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
