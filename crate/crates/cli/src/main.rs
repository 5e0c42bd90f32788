use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxtrack::pipeline::{self, RunConfig, RunFlags};
use voxtrack::synthdata::{generate_dataset, load_dataset};
use voxtrack::Error;

/// Stereo obstacle detection as voxel occupancy, with voxel tracking.
///
/// Every setting can be given in a `key=value` config file and overridden
/// by trailing `key=value` arguments, e.g. `train.epochs=10`.
#[derive(Parser, Debug)]
#[command(name = "voxtrack", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic stereo dataset with ground truth into `synth.out`.
    GenData(Common),
    /// Train the detection network.
    TrainDetect(Common),
    /// Train detection and tracking jointly from a detection checkpoint.
    TrainJoint(Common),
    /// Compute metrics for `eval.split`.
    Eval(Common),
    /// Predict occupancy (and flow, for frame pairs) for one sample directory.
    Infer(Common),
    /// Convert occupancy and flow dumps into plain-text point lists.
    ExportViz(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key=value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Let joint training start from random weights.
    #[arg(long)]
    allow_cold_start: bool,
    /// Load checkpoints whose config fingerprint differs from the current one.
    #[arg(long)]
    ignore_fingerprint: bool,
    /// Setting overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> voxtrack::Result<(RunConfig, RunFlags)> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        let flags = RunFlags { allow_cold_start: self.allow_cold_start, ignore_fingerprint: self.ignore_fingerprint };
        Ok((cfg, flags))
    }
}

fn run(cmd: Command) -> voxtrack::Result<()> {
    match cmd {
        Command::GenData(c) => {
            let (cfg, _) = c.load()?;
            let rig = cfg.camera.rig()?;
            let bound = cfg.tracker.bound(cfg.grid.finest_size())?;
            let stats = generate_dataset(&cfg.synth, &cfg.grid, &rig, 1.0 / cfg.tracker.fps, bound, &cfg.synth_out)?;
            println!(
                "wrote {} samples to {} (mean finest occupancy {:.2}%)",
                stats.samples,
                cfg.synth_out.display(),
                100.0 * stats.mean_occupancy
            );
        }
        Command::TrainDetect(c) => train(&c, false)?,
        Command::TrainJoint(c) => train(&c, true)?,
        Command::Eval(c) => {
            let (cfg, flags) = c.load()?;
            let report = pipeline::run_eval(&cfg, flags)?;
            print!("{}", report.to_text());
        }
        Command::Infer(c) => {
            let (cfg, flags) = c.load()?;
            let out = pipeline::infer(&cfg, flags)?;
            println!("{} occupied finest voxels, {} tracked", out.occupied, out.tracked);
            for f in out.files {
                println!("{}", f.display());
            }
        }
        Command::ExportViz(c) => {
            let (cfg, _) = c.load()?;
            for f in pipeline::export_viz(&cfg)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn train(c: &Common, joint: bool) -> voxtrack::Result<()> {
    let (cfg, flags) = c.load()?;
    let train = load_dataset(&cfg.data.train, &cfg.grid)?;
    let val = match &cfg.data.val {
        Some(p) => load_dataset(p, &cfg.grid)?,
        None => Vec::new(),
    };
    let out = if joint {
        pipeline::train_joint(&cfg, &train, &val, flags)?
    } else {
        pipeline::train_detection(&cfg, &train, &val, flags)?
    };
    if let Some(last) = out.log.last() {
        println!(
            "epoch {}: L_D={:.5} IoU4={:.2}%{}",
            last.epoch + 1,
            last.train_detection_loss,
            last.train_iou4,
            last.train_tracking_loss.map_or(String::new(), |v| format!(" L_T={v:.5}"))
        );
    }
    println!("checkpoint: {}", cfg.train.checkpoint.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        1
    }
}
