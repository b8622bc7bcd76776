//! `seqvar` — experiment runner for recursive variational smoothing.
//!
//! Subcommands share one JSON config (`"schema": 1`); flags override the
//! seed and output knobs. Failures print a machine-readable record to
//! stderr (`{"class": ..., "message": ...}`) and exit with a class-specific
//! code: 2 for config errors, 3 for I/O, 4 for numerical failures.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use seqvar::elbo::{finalize, init_cloud, propagate_backward_sampled, propagate_full, WhichLambda};
use seqvar::harness::{
    self, BuiltModel, ChaoticRnnDto, ExperimentConfig, LgssmDto, ModelSpec, RunOverrides,
};
use seqvar::models::{simulate, Trajectory};
use seqvar::varfamily::{GradMode, VarFamily, VariationalParams};
use seqvar::{Error, Result};

#[derive(Parser)]
#[command(name = "seqvar", version, about = "Recursive variational smoothing for state-space models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a trajectory; writes trajectory.csv and model.json.
    Generate(CommonArgs),
    /// Train a variational scheme (offline, recursive-epoch, or online mode).
    Train(CommonArgs),
    /// Exact references on the closed-form family (oracle or backward-mc mode).
    Oracle(CommonArgs),
    /// Time full vs backward-sampled propagation across particle counts.
    Bench(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON, "schema": 1).
    #[arg(long, value_name = "JSON")]
    config: PathBuf,

    /// Overrides seeds.particles (seeds.data for `generate`).
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Checkpoint cadence in steps (online mode).
    #[arg(long, value_name = "K")]
    ckpt_every: Option<u64>,

    /// Resume an online run from the output directory's checkpoint, or from
    /// an explicit checkpoint file when a path is given.
    #[arg(long, value_name = "CKPT")]
    resume: Option<Option<PathBuf>>,

    /// Number of independent repetitions (seeds shifted per replicate).
    #[arg(long, value_name = "R")]
    replicates: Option<u64>,

    /// Validate the config and referenced files, then exit.
    #[arg(long)]
    dry_run: bool,
}

impl CommonArgs {
    fn overrides(&self) -> RunOverrides {
        RunOverrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            ckpt_every: self.ckpt_every,
            resume: self.resume.is_some(),
            resume_from: self.resume.clone().flatten(),
            replicates: self.replicates,
            dry_run: self.dry_run,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; let clap format those.
            if err.use_stderr() {
                let record = serde_json::json!({
                    "class": "config",
                    "message": err.to_string(),
                });
                eprintln!("{record}");
                std::process::exit(2);
            }
            err.exit();
        }
    };
    if let Err(err) = dispatch(cli) {
        let record = serde_json::json!({
            "class": err.class(),
            "message": err.to_string(),
        });
        eprintln!("{record}");
        std::process::exit(match err.class() {
            "config" => 2,
            "io" => 3,
            _ => 4,
        });
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate(args) => generate(&args),
        Cmd::Train(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            if !cfg.mode.is_training() {
                return Err(Error::Config(format!(
                    "`train` runs training modes; mode \"{}\" belongs to `oracle`",
                    cfg.mode.as_str()
                )));
            }
            report(harness::run(&cfg, &args.overrides())?)
        }
        Cmd::Oracle(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            if cfg.mode.is_training() {
                return Err(Error::Config(format!(
                    "`oracle` runs reference modes; mode \"{}\" belongs to `train`",
                    cfg.mode.as_str()
                )));
            }
            report(harness::run(&cfg, &args.overrides())?)
        }
        Cmd::Bench(args) => bench(&args),
    }
}

fn report(report: harness::RunReport) -> Result<()> {
    if report.dry_run {
        println!("config ok (dry run)");
        return Ok(());
    }
    for row in &report.summary {
        let mut line = format!(
            "replicate {}: mode={} steps={} elbo={:.6} grad_norm={:.4}",
            row.replicate, row.mode, row.steps, row.final_elbo, row.grad_norm
        );
        if let Some(r) = row.rmse_smooth {
            line.push_str(&format!(" rmse_smooth={r:.4}"));
        }
        if let Some(r) = row.eval_rmse {
            line.push_str(&format!(" eval_rmse={r:.4}"));
        }
        if !row.note.is_empty() {
            line.push_str(&format!(" [{}]", row.note));
        }
        println!("{line}");
    }
    println!("wrote {}", report.out_dir.join("summary.csv").display());
    Ok(())
}

/// Simulates from the config's model section and writes the data artifacts.
/// Only the model, horizon, seeds, and output directory are read; the
/// training-specific fields are not validated here.
fn generate(args: &CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::parse_file(&args.config)?;
    let data_seed = args.seed.unwrap_or(cfg.seeds.data);
    let model = cfg.model.build(data_seed)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    if args.dry_run {
        cfg.model.dims()?;
        println!("config ok (dry run)");
        return Ok(());
    }
    std::fs::create_dir_all(&out_dir)?;

    let traj = simulate(model.as_ssm(), cfg.t_len, data_seed);
    let traj_path = out_dir.join("trajectory.csv");
    harness::io::write_trajectory_csv(&traj_path, &traj)?;

    let spec = match &model {
        BuiltModel::Lgssm(p) => ModelSpec::Lgssm {
            params: Some(LgssmDto::from_params(p)),
            d_x: None,
            d_y: None,
            seed: None,
        },
        BuiltModel::ChaoticRnn(p) => ModelSpec::ChaoticRnn {
            params: Some(ChaoticRnnDto::from_params(p)),
            d_x: None,
            seed: None,
        },
    };
    let model_path = out_dir.join("model.json");
    std::fs::write(&model_path, serde_json::to_string_pretty(&spec)?)?;

    println!(
        "wrote {} ({} steps) and {}",
        traj_path.display(),
        traj.horizon(),
        model_path.display()
    );
    Ok(())
}

/// Per-step wall time of the two propagation routes over a particle-count
/// grid; writes bench.csv and echoes the table.
fn bench(args: &CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::parse_file(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seeds.particles);
    let model = cfg.model.build(cfg.seeds.data)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    if args.dry_run {
        println!("config ok (dry run)");
        return Ok(());
    }
    std::fs::create_dir_all(&out_dir)?;

    // A short horizon is enough: per-step cost is flat in t.
    let steps = cfg.t_len.min(6).max(2);
    let traj = simulate(model.as_ssm(), steps, cfg.seeds.data);

    let grid = [50usize, 100, 200, 400, 800];
    let mut lines = vec!["n,full_ms_per_step,sampled_ms_per_step".to_string()];
    println!("{:>6} {:>18} {:>21}", "n", "full ms/step", "sampled ms/step");
    for &n in &grid {
        let full = time_route(&cfg, &model, &traj, n, seed, false)?;
        let sampled = time_route(&cfg, &model, &traj, n, seed, true)?;
        lines.push(format!("{n},{full},{sampled}"));
        println!("{n:>6} {full:>18.3} {sampled:>21.3}");
    }
    let path = out_dir.join("bench.csv");
    std::fs::write(&path, lines.join("\n") + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Median per-step milliseconds for one propagation route, gradients on.
fn time_route(
    cfg: &ExperimentConfig,
    model: &BuiltModel,
    traj: &Trajectory,
    n: usize,
    seed: u64,
    sampled: bool,
) -> Result<f64> {
    let ys = &traj.observations;
    let params = VariationalParams::init(cfg.scheme.clone(), cfg.delta, cfg.seeds.init)?;
    let mut vf = VarFamily::new(params, GradMode::Online)?;
    vf.advance(&ys[0])?;
    let mut cloud = init_cloud(&vf, model.as_ssm(), &ys[0], n, seed)?;
    let mut times = Vec::with_capacity(ys.len() - 1);
    for (t, y) in ys.iter().enumerate().skip(1) {
        vf.advance(y)?;
        let started = Instant::now();
        cloud = if sampled {
            propagate_backward_sampled(&cloud, &vf, model.as_ssm(), y, t, n, cfg.m, seed)?
        } else {
            propagate_full(&cloud, &vf, model.as_ssm(), y, t, n, seed)?
        };
        let _ = finalize(&cloud, &vf, WhichLambda::Current)?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    Ok(times[times.len() / 2])
}
