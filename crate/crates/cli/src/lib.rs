//! `parkour` command line: train, distill, eval, ablate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use parkour_learn::checkpoint;
use parkour_learn::config::RunConfig;
use parkour_learn::env::Variant;
use parkour_learn::pipeline;
use parkour_learn::report::{self, MetricsRow};
use parkour_learn::LearnError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "parkour", version, about = "Desk-scale quadruped parkour: train, distill, evaluate")]
pub struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phase 1: train a scandot teacher with curriculum.
    Train(TrainArgs),
    /// Phase 2: distil a teacher checkpoint into a depth student.
    Distill(DistillArgs),
    /// Evaluate a teacher or student checkpoint and append a metrics row.
    Eval(EvalArgs),
    /// Train and evaluate several variants per terrain.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured iteration count.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Continue from this teacher checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory for checkpoint, train.csv and summary.json.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub teacher: PathBuf,
    /// Heading variant: ours, both, mask or oracle.
    #[arg(long, default_value = "ours")]
    pub variant: String,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the variant stored in the checkpoint.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub robots: Option<usize>,
    /// Seconds per robot.
    #[arg(long)]
    pub duration: Option<f64>,
    /// JSON-lines trace, one record per robot per step.
    #[arg(long)]
    pub dump_traj: Option<PathBuf>,
    /// PKDP file with the depth frames robot 0 received.
    #[arg(long)]
    pub dump_depth: Option<PathBuf>,
    /// Metrics CSV the row is appended to.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, default_value = "ours,noinner,noclear,noisy")]
    pub variants: String,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn exit_code(e: &LearnError) -> i32 {
    match e {
        LearnError::Checkpoint(_) => EXIT_CHECKPOINT,
        e if e.is_config() => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let root = cli.workdir.clone();
    let res = match cli.command {
        Command::Train(a) => train(&root, a),
        Command::Distill(a) => distill(&root, a),
        Command::Eval(a) => eval(&root, a),
        Command::Ablate(a) => ablate(&root, a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

type Result<T> = std::result::Result<T, LearnError>;

fn train(root: &Path, a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&resolve(root, &a.config))?;
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    let init = match &a.init {
        Some(p) => Some(checkpoint::load_teacher(&resolve(root, p))?.0),
        None => None,
    };
    let out = resolve(root, &a.out);
    let summary = pipeline::run_train(&cfg, init, &out, &mut |l| {
        if l.iteration % 10 == 0 {
            eprintln!("iter {:5}  reward {:8.4}  level {:5.2}  kl {:.4}", l.iteration, l.reward, l.mean_level, l.stats.approx_kl);
        }
    })?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn distill(root: &Path, a: DistillArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&resolve(root, &a.config))?;
    if let Some(n) = a.iters {
        cfg.distill.iterations = n;
    }
    let variant: Variant = a.variant.parse()?;
    let (teacher, header) = checkpoint::load_teacher(&resolve(root, &a.teacher))?;
    warn_hash(&cfg, &header.config_hash);
    let out = resolve(root, &a.out);
    let d = pipeline::run_distill(&cfg, &teacher, variant, &out, &mut |l| {
        if l.iteration % 5 == 0 {
            eprintln!("iter {:5}  action_mse {:.5}  yaw {:.4}", l.iteration, l.action_mse, l.yaw_loss);
        }
    })?;
    if let (Some(first), Some(last)) = (d.logs.first(), d.logs.last()) {
        println!("action_mse {} -> {}", report::sig6(first.action_mse), report::sig6(last.action_mse));
    }
    Ok(())
}

fn warn_hash(cfg: &RunConfig, stored: &str) {
    let h = cfg.hash();
    if h != stored {
        eprintln!("warning: checkpoint was produced with config hash {stored}, current config hashes to {h}");
    }
}

fn eval(root: &Path, a: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&resolve(root, &a.config))?;
    if let Some(r) = a.robots {
        cfg.eval.robots = r;
    }
    if let Some(d) = a.duration {
        cfg.eval.duration = d;
    }
    cfg.validate()?;
    let path = resolve(root, &a.checkpoint);
    let (header, _) = checkpoint::read(&path)?;
    warn_hash(&cfg, &header.config_hash);
    let variant: Variant = a.variant.as_deref().unwrap_or(&header.variant).parse()?;
    let dumps = a.dump_traj.is_some() || a.dump_depth.is_some();
    let settings = pipeline::eval_settings(&cfg, dumps);
    let res = match header.phase {
        1 => pipeline::eval_teacher(&cfg, &checkpoint::load_teacher(&path)?.0, variant, &settings)?,
        2 => pipeline::eval_student(&cfg, &checkpoint::load_student(&path)?.0, variant, &settings)?,
        p => return Err(LearnError::Checkpoint(format!("unknown phase tag {p}"))),
    };
    if let Some(p) = &a.dump_traj {
        pipeline::write_trajectory(&resolve(root, p), &res)?;
    }
    if let Some(p) = &a.dump_depth {
        pipeline::write_depth(&resolve(root, p), &res)?;
    }
    let row = MetricsRow { terrain: cfg.terrain_label(), variant: variant.name().into(), metrics: res.metrics };
    report::append_metrics(&resolve(root, &a.out), std::slice::from_ref(&row))?;
    println!("{}", row.csv());
    Ok(())
}

fn ablate(root: &Path, a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&resolve(root, &a.config))?;
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    let variants = a.variants.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<Vec<Variant>>>()?;
    let rows = pipeline::run_ablation(&cfg, &variants, &mut |m| eprintln!("{m}"))?;
    let csv = report::metrics_csv(&rows);
    std::fs::write(resolve(root, &a.out), &csv)?;
    print!("{csv}");
    Ok(())
}
