use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dynsplat::dyn_sim::simulate;
use dynsplat::error::{Error, Result};
use dynsplat::io_eval::{
    ate, evaluate_run, export_bundle, load_dataset, read_trajectory, run_trajectory, write_color_png,
    write_trajectory, Config, TrajectoryEntry, TrajectoryWriter,
};
use dynsplat::mapper::{read_map, write_map};
use dynsplat::pipeline::{run_pipeline, PipelineConfig};
use dynsplat::scene_model::CameraIntrinsics;
use dynsplat::splat_renderer::render;

/// Monocular dynamic-scene Gaussian splatting SLAM.
///
/// Every subcommand accepts `--config FILE` and trailing `--key=value`
/// overrides of the flat config. Exit codes: 0 success, 1 input error,
/// 2 tracking lost.
#[derive(Parser)]
#[command(name = "dynsplat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence as a dataset directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Track and map a dataset directory.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Absolute trajectory error of one TUM trajectory against another.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Render a saved map from the poses of a TUM trajectory.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default config.
    Config,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(out: &Path, cfg: &Config) -> Result<()> {
    let bundle = simulate(&cfg.sim_config()?)?;
    export_bundle(&bundle, out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    eprintln!("wrote {} frames to {}", bundle.len(), out.display());
    Ok(())
}

fn cmd_run(data: &Path, out: &Path, cfg: &Config) -> Result<()> {
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out.join("renders"))?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let mut live = TrajectoryWriter::create(out.join("trajectory.txt"))?;
    let result = run_pipeline(&ds, &PipelineConfig::from_config(cfg)?, None, |_, t, pose| {
        live.append(&TrajectoryEntry::from_world_to_camera(t, pose))
    })?;
    write_trajectory(out.join("trajectory_final.txt"), &run_trajectory(&result)?)?;
    write_map(&out.join("map.txt"), &result.map)?;
    for &i in &result.keyframes {
        let img = render(&result.map, &result.trajectory[i].2, &ds.intrinsics).color;
        write_color_png(out.join("renders").join(format!("{i:06}.png")), &img)?;
    }
    let report = evaluate_run(&ds, &result, cfg)?;
    std::fs::write(out.join("eval_report.json"), report.to_json())?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_eval(est: &Path, gt: &Path, cfg: &Config) -> Result<()> {
    let r = ate(&read_trajectory(est)?, &read_trajectory(gt)?, cfg.ate_alignment)?;
    let json = serde_json::json!({
        "ate_rmse": r.rmse,
        "pairs": r.pairs,
        "alignment": cfg.ate_alignment,
        "scale": r.transform.scale,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

fn cmd_render(map: &Path, poses: &Path, intrinsics: &Path, out: &Path) -> Result<()> {
    let map = read_map(map)?;
    let k: CameraIntrinsics = serde_json::from_str(&std::fs::read_to_string(intrinsics)?)?;
    k.validate()?;
    std::fs::create_dir_all(out)?;
    for (i, e) in read_trajectory(poses)?.entries().iter().enumerate() {
        let img = render(&map, &e.world_to_camera(), &k).color;
        write_color_png(out.join(format!("{i:06}.png")), &img)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { out, config, overrides } => cmd_simulate(&out, &load_config(config.as_deref(), &overrides)?),
        Command::Run { data, out, config, overrides } => {
            cmd_run(&data, &out, &load_config(config.as_deref(), &overrides)?)
        }
        Command::Eval { est, gt, config, overrides } => cmd_eval(&est, &gt, &load_config(config.as_deref(), &overrides)?),
        Command::Render { map, poses, intrinsics, out } => cmd_render(&map, &poses, &intrinsics, &out),
        Command::Config => {
            println!("{}", Config::default().to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::TrackingLost(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
