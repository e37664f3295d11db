//! Command-line front end: simulate sequences, run the pipeline, evaluate
//! trajectories and render map dumps.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynsplat::pipeline::{
    evaluate_ate, format_map, load_tum_sequence, read_map, read_trajectory, run, write_report, write_trajectory,
    Config, ConfigError, MetricError, PipelineError, RunOutput, SequenceError,
};
use dynsplat::raster::RasterError;
use dynsplat::sim::{simulate, write_sequence, SceneSpec, SimError};
use dynsplat::splat::{composite, write_trace_csv, Splat};
use dynsplat::gaussian_map::Label;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Dynamic-scene Gaussian splatting SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence from a scene spec file ("default" for the built-in scene).
    Simulate { spec: String, out: PathBuf },
    /// Run the pipeline on a sequence directory.
    Run {
        sequence: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE RMSE and STD of an estimated trajectory against ground truth.
    Eval { est: PathBuf, gt: PathBuf },
    /// Render a map dump at one pose of a trajectory file.
    Render {
        map: PathBuf,
        pose: PathBuf,
        out: PathBuf,
        /// Row of the trajectory file to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Skip Gaussians labeled dynamic.
        #[arg(long)]
        static_only: bool,
    },
    /// Run the full pipeline and a copy with the named stages disabled.
    Ablate {
        sequence: PathBuf,
        #[arg(long, required = true, value_parser = ["crf", "flow", "penalty", "mapping"])]
        disable: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scene spec: {0}")]
    Spec(SimError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Spec(_) => 1,
            Self::Pipeline(PipelineError::TooFewFrames { .. } | PipelineError::TrackCount { .. }) => 2,
            Self::Pipeline(_) => 3,
            _ => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(e) => Self::Io(e),
            SimError::Raster(e) => Self::Raster(e),
            e => Self::Spec(e),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn write_outputs(out: &RunOutput, seq_camera: &dynsplat::camera::Camera, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_trajectory(&out.trajectory, &dir.join("trajectory.txt"))?;
    write_report(&out.report, dir)?;
    fs::write(dir.join("timing.csv"), out.timing.to_csv())?;
    fs::write(dir.join("map.txt"), format_map(&out.map, seq_camera))?;
    let mut w = BufWriter::new(fs::File::create(dir.join("loss_trace.csv"))?);
    write_trace_csv(&mut w, &out.trace)?;
    Ok(())
}

fn summary(out: &RunOutput) -> String {
    let r = &out.report;
    let mut s = format!("frames {} keyframes {}", r.frames, r.keyframes);
    if let Some(a) = r.ate {
        s += &format!(" ate_rmse {:.6} ate_std {:.6}", a.rmse, a.std);
    }
    if let (Some(p), Some(q)) = (r.precision(), r.recall()) {
        s += &format!(" precision {p:.3} recall {q:.3}");
    }
    s
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { spec, out } => {
            let spec = if spec == "default" {
                SceneSpec::default()
            } else {
                let text = fs::read_to_string(&spec).map_err(|e| CliError::Data(format!("{spec}: {e}")))?;
                SceneSpec::parse(&text)?
            };
            spec.validate()?;
            let sim = simulate(&spec);
            write_sequence(&sim, &out)?;
            println!("wrote {} frames to {}", sim.frames.len(), out.display());
        }
        Command::Run { sequence, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let seq = load_tum_sequence(&sequence)?;
            let result = run(&seq, &cfg)?;
            write_outputs(&result, &seq.camera, &out)?;
            println!("{}", summary(&result));
        }
        Command::Eval { est, gt } => {
            let a = evaluate_ate(&read_trajectory(&est)?, &read_trajectory(&gt)?)?;
            println!("ate_rmse {:.6}\nate_std {:.6}\npairs {}", a.rmse, a.std, a.pairs);
        }
        Command::Render {
            map,
            pose,
            out,
            index,
            static_only,
        } => {
            let dump = read_map(&map)?;
            let traj = read_trajectory(&pose)?;
            let p = traj
                .poses
                .get(index)
                .ok_or_else(|| CliError::Data(format!("{}: no pose at row {index}", pose.display())))?;
            let splats: Vec<Splat> = dump
                .gaussians
                .into_iter()
                .filter(|(_, l, _)| !static_only || *l == Label::Static)
                .map(|(_, _, s)| s)
                .collect();
            let img = composite(&splats, p, &dump.camera, &Config::default().render_options());
            img.rgb.save(&out)?;
            println!("rendered {} Gaussians to {}", splats.len(), out.display());
        }
        Command::Ablate {
            sequence,
            disable,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut ablated = cfg.clone();
            for d in &disable {
                ablated.disable(d)?;
            }
            let seq = load_tum_sequence(&sequence)?;
            let full = run(&seq, &cfg)?;
            let abl = run(&seq, &ablated)?;
            println!("full    {}", summary(&full));
            println!("ablated {}", summary(&abl));
            if let Some(dir) = out {
                write_outputs(&full, &seq.camera, &dir.join("full"))?;
                write_outputs(&abl, &seq.camera, &dir.join("ablated"))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
