use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use limap::io;
use limap::metrics::{compute_ate, compute_rte};
use limap::pipeline::{run_pipeline, Execution, PipelineConfig, RunOptions};
use limap::synth::{generate, SceneSpec};
use limap::Error;

/// LiDAR-IMU mapping pipeline.
#[derive(Parser)]
#[command(name = "map", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry, local and global mapping over a recorded dataset.
    Run {
        /// Pipeline configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of scan files.
        #[arg(long)]
        scans: PathBuf,
        /// IMU log with a `t,ax,ay,az,wx,wy,wz` header.
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run every stage on one thread, one scan at a time.
        #[arg(long)]
        single_thread: bool,
        /// Also write the final global factor graph to `graph.txt`.
        #[arg(long)]
        dump_graph: bool,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Segment length for the relative error (m).
        #[arg(long, default_value_t = 100.0)]
        rte_length: f64,
    },
    /// Generate a synthetic dataset from a scene description.
    Synth {
        /// Scene description (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of the scene description.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Exit status when the dataset holds no scans.
const EXIT_NO_DATA: u8 = 2;
/// Exit status when a stage failed and only partial outputs were written.
const EXIT_PARTIAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            scans,
            imu,
            out,
            single_thread,
            dump_graph,
        } => run(config.as_deref(), &scans, &imu, &out, single_thread, dump_graph),
        Command::Eval { est, gt, rte_length } => eval(&est, &gt, rte_length),
        Command::Synth { spec, out, seed } => synth(&spec, &out, seed),
    };
    match result {
        Ok(code) => code,
        Err(Error::NoData) => {
            eprintln!("map: {}", Error::NoData);
            ExitCode::from(EXIT_NO_DATA)
        }
        Err(e) => {
            eprintln!("map: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(
    config: Option<&Path>,
    scans: &Path,
    imu: &Path,
    out: &Path,
    single_thread: bool,
    dump_graph: bool,
) -> limap::Result<ExitCode> {
    let config = match config {
        Some(path) => io::read_config(path)?,
        None => PipelineConfig::default(),
    };
    let imu = io::read_imu_csv(imu)?;
    let scans = io::ScanSequence::open(scans)?;
    let options = RunOptions {
        execution: if single_thread {
            Execution::Sequential
        } else {
            Execution::Threaded
        },
        dump_graph,
    };

    let output = if single_thread {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| run_pipeline(&config, scans, imu, &options))?
    } else {
        run_pipeline(&config, scans, imu, &options)?
    };

    fs::create_dir_all(out)?;
    io::write_trajectory(&output.trajectory, &out.join("trajectory.txt"))?;
    io::write_trajectory(&output.odometry, &out.join("odometry.txt"))?;
    io::write_trajectory(&output.submap_poses, &out.join("submaps.txt"))?;
    io::write_map(&output.map, &out.join("map.bin"))?;
    fs::write(out.join("report.txt"), output.report.to_string())?;
    if let Some(graph) = &output.graph_dump {
        fs::write(out.join("graph.txt"), graph)?;
    }
    print!("{}", output.report);
    Ok(match output.error {
        Some(e) => {
            eprintln!("map: run stopped early: {e}");
            ExitCode::from(EXIT_PARTIAL)
        }
        None => ExitCode::SUCCESS,
    })
}

fn eval(est: &Path, gt: &Path, rte_length: f64) -> limap::Result<ExitCode> {
    let est = io::read_trajectory(est)?;
    let gt = io::read_trajectory(gt)?;
    let ate = compute_ate(&est, &gt, true)?;
    println!("ate_rmse_m = {:.6}", ate.rmse);
    println!("ate_pairs = {}", ate.errors.len());
    match compute_rte(&est, &gt, rte_length) {
        Ok(rte) => {
            println!("rte_segment_m = {rte_length}");
            println!("rte_mean_m = {:.6}", rte.mean);
            println!("rte_std_m = {:.6}", rte.std);
            println!("rte_segments = {}", rte.errors.len());
        }
        Err(e @ Error::InsufficientLength { .. }) => eprintln!("map: relative error skipped: {e}"),
        Err(e) => return Err(e),
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(spec: &Path, out: &Path, seed: Option<u64>) -> limap::Result<ExitCode> {
    let mut spec = SceneSpec::from_toml(&fs::read_to_string(spec)?)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    io::write_dataset(&data, out)?;
    println!(
        "wrote {} scans, {} IMU samples to {}",
        data.scans.len(),
        data.imu.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
