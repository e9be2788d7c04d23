use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ground_slam::config::PipelineConfig;
use ground_slam::graph::save_graph;
use ground_slam::pipeline::{
    evaluate_ate, relative_priors, run_odometry, run_slam, simulate_run, write_stats_csv, MaintenanceMode, SlamToggles,
};
use ground_slam::se3::{load_tum, save_tum};
use ground_slam::sim::{read_scan_container, write_ply_points, write_scan_container, ContainerFrame};
use ground_slam::{Error, Result};

#[derive(Parser)]
#[command(name = "ground-slam", version, about = "Ground-constrained LiDAR odometry and mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct Inputs {
    /// Binary scan container.
    #[arg(long)]
    scans: PathBuf,
    /// Dead-reckoned prior trajectory (TUM).
    #[arg(long)]
    priors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario into a scan container, ground truth and priors.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Limit the number of frames.
        #[arg(long)]
        frames: Option<usize>,
        /// Also write each scan as ASCII PLY.
        #[arg(long)]
        ply: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Scan-to-map odometry.
    Odometry {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "observation")]
        mode: MaintenanceMode,
        #[command(flatten)]
        common: Common,
    },
    /// Odometry plus ground constraints and loop closures.
    Slam {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        no_ground: bool,
        #[arg(long)]
        no_loop: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Absolute trajectory error between two TUM files.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        align: bool,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_inputs(inputs: &Inputs, cfg: &PipelineConfig) -> Result<(Vec<ground_slam::registration::Scan>, Vec<ground_slam::se3::Pose>)> {
    let frames = read_scan_container(File::open(&inputs.scans)?)?;
    let scans: Vec<_> = frames.iter().map(|f| f.to_scan(cfg.range_noise_sigma)).collect();
    let prior_traj = load_tum(&inputs.priors)?;
    if prior_traj.len() != scans.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} prior poses",
            scans.len(),
            prior_traj.len()
        )));
    }
    let priors = relative_priors(&prior_traj.iter().map(|s| s.pose).collect::<Vec<_>>());
    std::fs::create_dir_all(&inputs.out)?;
    Ok((scans, priors))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            out,
            frames,
            ply,
            common,
        } => {
            let cfg = common.load()?;
            let sim = simulate_run(&scenario, &cfg, frames)?;
            std::fs::create_dir_all(&out)?;
            let container: Vec<ContainerFrame> = sim
                .scans
                .iter()
                .enumerate()
                .map(|(k, s)| ContainerFrame::from_scan(k as u32, s))
                .collect();
            let mut w = create(&out.join("scans.bin"))?;
            write_scan_container(&mut w, &container)?;
            w.flush()?;
            save_tum(&out.join("gt.tum"), &sim.ground_truth)?;
            save_tum(&out.join("priors.tum"), &sim.prior_trajectory)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            if ply {
                let dir = out.join("ply");
                std::fs::create_dir_all(&dir)?;
                for (k, s) in sim.scans.iter().enumerate() {
                    let mut w = create(&dir.join(format!("{k:05}.ply")))?;
                    write_ply_points(&mut w, &s.points)?;
                    w.flush()?;
                }
            }
            println!("{} frames written to {}", sim.scans.len(), out.display());
        }
        Command::Odometry { inputs, mode, common } => {
            let cfg = common.load()?;
            let (scans, priors) = load_inputs(&inputs, &cfg)?;
            let odo = run_odometry(&scans, &priors, &cfg, mode)?;
            save_tum(&inputs.out.join("trajectory.tum"), &odo.trajectory)?;
            let mut w = create(&inputs.out.join("stats.csv"))?;
            write_stats_csv(&mut w, &odo.stats)?;
            w.flush()?;
            println!("frames = {}\nmean_map_points = {:.1}", odo.trajectory.len(), odo.mean_map_points());
        }
        Command::Slam {
            inputs,
            no_ground,
            no_loop,
            common,
        } => {
            let cfg = common.load()?;
            let (scans, priors) = load_inputs(&inputs, &cfg)?;
            let toggles = SlamToggles {
                ground_constraints: !no_ground,
                loop_closure: !no_loop,
            };
            let out = run_slam(&scans, &priors, &cfg, toggles)?;
            save_tum(&inputs.out.join("trajectory.tum"), &out.trajectory)?;
            save_graph(&inputs.out.join("graph.txt"), &out.graph)?;
            let mut w = create(&inputs.out.join("map.ply"))?;
            write_ply_points(&mut w, &out.world_map(0.2))?;
            w.flush()?;
            let mut w = create(&inputs.out.join("optimization.csv"))?;
            writeln!(w, "stage,step,cost")?;
            for (stage, report) in &out.reports {
                for (k, c) in report.cost_history.iter().enumerate() {
                    writeln!(w, "{stage},{k},{c:.12e}")?;
                }
            }
            w.flush()?;
            println!(
                "keyframes = {}\nlandmarks = {}\nloop_factors = {}",
                out.graph.poses.len(),
                out.graph.planes.len(),
                out.graph.count(ground_slam::graph::FactorKind::LoopClosure)
            );
        }
        Command::Evaluate {
            estimate,
            reference,
            align,
            out,
        } => {
            let report = evaluate_ate(&load_tum(&estimate)?, &load_tum(&reference)?, align)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(path, text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
