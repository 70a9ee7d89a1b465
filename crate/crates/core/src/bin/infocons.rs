//! Command-line entry point: dataset generation, classifier and explainer
//! training, score-map extraction, and point-drop evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infocons::cli::{self, Settings};

#[derive(Parser)]
#[command(
    name = "infocons",
    version,
    about = "Point-cloud attribution toolkit: critical-score maps and drop-attack evaluation",
    after_help = "Options may also come from a key=value config file (--config); \
explicit flags win. INFOCONS_SEED overrides any seed. Every command writes \
run_manifest.txt into its output directory; `infocons rerun <manifest>` \
reproduces the run byte for byte."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled shape dataset
    GenData(GenDataArgs),
    /// Train a point-cloud classifier
    Train(TrainArgs),
    /// Train the attention-bottleneck explainer against a frozen model
    TrainExplainer(TrainExplainerArgs),
    /// Produce a score map (or critical subset) for one cloud
    Explain(ExplainArgs),
    /// Run drop attacks, hierarchy, variance, and efficiency reports
    Eval(EvalArgs),
    /// Re-run a command from its run manifest
    Rerun(RerunArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// key=value config file supplying defaults for any option
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (INFOCONS_SEED overrides when set)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of shape classes (1..=6)
    #[arg(long)]
    classes: Option<usize>,
    /// Training clouds per class
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    /// Test clouds per class
    #[arg(long = "per-class-test")]
    per_class_test: Option<usize>,
    /// Points per cloud
    #[arg(long)]
    points: Option<usize>,
    /// Gaussian jitter scale applied before normalization
    #[arg(long)]
    jitter: Option<f64>,
    /// Overwrite an existing non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory from gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// Architecture: flat | hier
    #[arg(long)]
    arch: Option<String>,
    /// Encoder layer whose features feed explanation
    #[arg(long = "tap-layer")]
    tap_layer: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer: adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args)]
struct TrainExplainerArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Objective: infocons | selective_cp
    #[arg(long)]
    objective: Option<String>,
    /// Information-loss weight; accepts a comma list for sweeps
    #[arg(long)]
    beta: Option<String>,
    /// Attention reduction dimension
    #[arg(long)]
    dr: Option<usize>,
    /// Relaxation temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Noise draws per entry for the selective estimator
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Cap on training clouds, class-balanced (0 = all)
    #[arg(long = "limit-train")]
    limit_train: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Explainer checkpoint (required by infocons methods)
    #[arg(long)]
    explainer: Option<PathBuf>,
    /// Input .xyz cloud
    #[arg(long)]
    input: Option<PathBuf>,
    /// infocons | infocons-dyn | cp | cp++ | pcsam | lime3d | random
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "drop-per-iter")]
    drop_per_iter: Option<usize>,
    /// How many top points to circle in the plot
    #[arg(long)]
    top: Option<usize>,
    /// Class label of the input (needed by pcsam)
    #[arg(long)]
    label: Option<usize>,
    /// pcsam radial scale exponent
    #[arg(long)]
    alpha: Option<f64>,
    /// lime3d query count
    #[arg(long)]
    queries: Option<usize>,
    /// lime3d per-point drop probability
    #[arg(long = "drop-prob")]
    drop_prob: Option<f64>,
    /// lime3d ridge strength
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    explainer: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma list: infocons, infocons-dyn, cp++, pcsam, lime3d, random
    #[arg(long)]
    scorers: Option<String>,
    /// Comma list: mcd, lcd
    #[arg(long)]
    modes: Option<String>,
    /// Comma list of drop budgets
    #[arg(long)]
    budgets: Option<String>,
    /// Hierarchy cluster count
    #[arg(long)]
    k: Option<usize>,
    /// Parallel evaluation workers
    #[arg(long)]
    jobs: Option<usize>,
    /// Cap on test clouds (0 = all)
    #[arg(long = "limit-test")]
    limit_test: Option<usize>,
    /// Clouds for the efficiency report
    #[arg(long = "efficiency-clouds")]
    efficiency_clouds: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "drop-per-iter")]
    drop_per_iter: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long = "drop-prob")]
    drop_prob: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma list of explainer checkpoints for the variance sweep
    #[arg(long = "sweep-explainers")]
    sweep_explainers: Option<String>,
}

#[derive(Args)]
struct RerunArgs {
    /// run_manifest.txt from a previous invocation
    manifest: PathBuf,
    /// Redirect outputs to a fresh directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn opt_path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> cli::Result<()> {
        match &cli.cmd {
            Cmd::GenData(a) => {
                let s = Settings::from_layers(
                    a.common.config.as_deref(),
                    &[
                        ("classes", opt(&a.classes)),
                        ("per-class", opt(&a.per_class)),
                        ("per-class-test", opt(&a.per_class_test)),
                        ("points", opt(&a.points)),
                        ("jitter", opt(&a.jitter)),
                        ("force", a.force.then(|| "true".to_string())),
                        ("seed", opt(&a.common.seed)),
                        ("out", opt_path(&a.common.out)),
                    ],
                )?;
                cli::cmd_gen_data(&s)
            }
            Cmd::Train(a) => {
                let s = Settings::from_layers(
                    a.common.config.as_deref(),
                    &[
                        ("data", opt_path(&a.data)),
                        ("arch", opt(&a.arch)),
                        ("tap-layer", opt(&a.tap_layer)),
                        ("epochs", opt(&a.epochs)),
                        ("batch", opt(&a.batch)),
                        ("lr", opt(&a.lr)),
                        ("optimizer", opt(&a.optimizer)),
                        ("seed", opt(&a.common.seed)),
                        ("out", opt_path(&a.common.out)),
                    ],
                )?;
                cli::cmd_train(&s)
            }
            Cmd::TrainExplainer(a) => {
                let s = Settings::from_layers(
                    a.common.config.as_deref(),
                    &[
                        ("model", opt_path(&a.model)),
                        ("data", opt_path(&a.data)),
                        ("objective", opt(&a.objective)),
                        ("beta", opt(&a.beta)),
                        ("dr", opt(&a.dr)),
                        ("tau", opt(&a.tau)),
                        ("k", opt(&a.k)),
                        ("epochs", opt(&a.epochs)),
                        ("batch", opt(&a.batch)),
                        ("lr", opt(&a.lr)),
                        ("limit-train", opt(&a.limit_train)),
                        ("seed", opt(&a.common.seed)),
                        ("out", opt_path(&a.common.out)),
                    ],
                )?;
                cli::cmd_train_explainer(&s)
            }
            Cmd::Explain(a) => {
                let s = Settings::from_layers(
                    a.common.config.as_deref(),
                    &[
                        ("model", opt_path(&a.model)),
                        ("explainer", opt_path(&a.explainer)),
                        ("input", opt_path(&a.input)),
                        ("method", opt(&a.method)),
                        ("iters", opt(&a.iters)),
                        ("drop-per-iter", opt(&a.drop_per_iter)),
                        ("top", opt(&a.top)),
                        ("label", opt(&a.label)),
                        ("alpha", opt(&a.alpha)),
                        ("queries", opt(&a.queries)),
                        ("drop-prob", opt(&a.drop_prob)),
                        ("lambda", opt(&a.lambda)),
                        ("seed", opt(&a.common.seed)),
                        ("out", opt_path(&a.common.out)),
                    ],
                )?;
                cli::cmd_explain(&s)
            }
            Cmd::Eval(a) => {
                let s = Settings::from_layers(
                    a.common.config.as_deref(),
                    &[
                        ("model", opt_path(&a.model)),
                        ("explainer", opt_path(&a.explainer)),
                        ("data", opt_path(&a.data)),
                        ("scorers", opt(&a.scorers)),
                        ("modes", opt(&a.modes)),
                        ("budgets", opt(&a.budgets)),
                        ("k", opt(&a.k)),
                        ("jobs", opt(&a.jobs)),
                        ("limit-test", opt(&a.limit_test)),
                        ("efficiency-clouds", opt(&a.efficiency_clouds)),
                        ("iters", opt(&a.iters)),
                        ("drop-per-iter", opt(&a.drop_per_iter)),
                        ("queries", opt(&a.queries)),
                        ("drop-prob", opt(&a.drop_prob)),
                        ("lambda", opt(&a.lambda)),
                        ("alpha", opt(&a.alpha)),
                        ("sweep-explainers", opt(&a.sweep_explainers)),
                        ("seed", opt(&a.common.seed)),
                        ("out", opt_path(&a.common.out)),
                    ],
                )?;
                cli::cmd_eval(&s)
            }
            Cmd::Rerun(a) => cli::cmd_rerun(&a.manifest, a.out.as_deref()),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
