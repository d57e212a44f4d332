use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use photon_unroll::bayes::SolverConfig;
use photon_unroll::io::{load_sph, save_pfm, save_sph, DepthField, SceneSidecar};
use photon_unroll::metrics::metrics_csv;
use photon_unroll::model::Dims;
use photon_unroll::pipeline::{self, SimulateSpec, SweepSpec, TrainSpec, DEFAULT_PITCH_M};
use photon_unroll::training::TrainConfig;
use photon_unroll::unroll::NetConfig;
use photon_unroll::Result;

#[derive(Parser)]
#[command(name = "photon-unroll", version, about = "Dual-surface depth from single-photon Lidar histograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SceneSize {
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    cols: usize,
    #[arg(long, default_value_t = 1024)]
    bins: usize,
}

impl SceneSize {
    fn dims(&self) -> Dims {
        Dims::new(self.rows, self.cols, self.bins)
    }
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            alpha_d: self.alpha,
            beta_d: self.beta,
            n_iters: self.iters,
            ..SolverConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scene and write an SPH1 cube plus a JSON scene sidecar.
    Simulate {
        #[arg(long, default_value = "ramp")]
        scene: String,
        /// Depth map for `--scene import`.
        #[arg(long)]
        depth_pfm: Option<PathBuf>,
        #[command(flatten)]
        size: SceneSize,
        #[arg(long)]
        ppp: f64,
        #[arg(long)]
        sbr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        irf_sigma: f64,
        /// Output cube; the sidecar goes to `<output>.json`.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Multiscale dual-peak features as CSV.
    InitPeaks {
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        scales: usize,
        #[arg(long, default_value_t = 2.0)]
        irf_sigma: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Classical coordinate-descent solver.
    SolveBayes {
        input: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value_t = 2.0)]
        irf_sigma: f64,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write one PFM per surface next to the output.
        #[arg(long)]
        pfm: bool,
    },
    /// Train the unrolled network on procedural scenes.
    Train {
        /// Model directory (model.cfg, model.puw, loss.csv).
        #[arg(short, long)]
        output: PathBuf,
        /// key = value network configuration; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 96)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 1024)]
        bins: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 5e-5)]
        lr: f64,
        #[arg(long, default_value_t = 24)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a trained network.
    Infer {
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 2.0)]
        irf_sigma: f64,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        pfm: bool,
    },
    /// DAE and Chamfer distance of an estimate against a simulated scene.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        /// Scene sidecar written by `simulate`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PITCH_M)]
        pitch: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the methods over a PPP x SBR grid.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        ppp: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        sbr: Vec<f64>,
        #[arg(long, default_value = "sphere-on-plane")]
        scene: String,
        #[command(flatten)]
        size: SceneSize,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        irf_sigma: f64,
        #[arg(long, default_value_t = DEFAULT_PITCH_M)]
        pitch: f64,
        /// Include a trained network.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Depth CSV to an ASCII point cloud.
    ExportPly {
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PITCH_M)]
        pitch: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_field(field: &DepthField, output: &Path, pfm: bool) -> Result<()> {
    fs::write(output, field.to_csv())?;
    if pfm {
        for k in 0..2 {
            save_pfm(&with_suffix(output, &format!(".d{}.pfm", k + 1)), &field.surface(k))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scene,
            depth_pfm,
            size,
            ppp,
            sbr,
            seed,
            irf_sigma,
            output,
        } => {
            let spec = SimulateSpec {
                kind: scene,
                import: depth_pfm,
                dims: size.dims(),
                ppp,
                sbr,
                seed,
                irf_sigma,
            };
            let (hist, side) = pipeline::simulate(&spec)?;
            save_sph(&output, &hist)?;
            side.save(&with_suffix(&output, ".json"))
        }
        Command::InitPeaks {
            input,
            scales,
            irf_sigma,
            output,
        } => {
            let f = pipeline::init_peaks(&load_sph(&input)?, irf_sigma, scales)?;
            emit(output.as_deref(), &f.to_csv())
        }
        Command::SolveBayes {
            input,
            solver,
            irf_sigma,
            output,
            pfm,
        } => {
            let field = pipeline::solve_bayes(&load_sph(&input)?, irf_sigma, &solver.config())?;
            write_field(&field, &output, pfm)
        }
        Command::Train {
            output,
            config,
            scenes,
            side,
            bins,
            epochs,
            steps,
            lr,
            batch,
            seed,
        } => {
            let net = match config {
                Some(p) => NetConfig::from_text(&fs::read_to_string(p)?)?,
                None => NetConfig::default(),
            };
            let spec = TrainSpec {
                scenes,
                side,
                bins,
                data_seed: seed,
                init_seed: seed.wrapping_add(1),
                net,
                train: TrainConfig {
                    lr,
                    batch,
                    epochs,
                    max_steps: steps,
                    seed: seed.wrapping_add(2),
                    checkpoint_dir: Some(output.clone()),
                },
            };
            let (params, report) = pipeline::train_model(&spec)?;
            pipeline::save_model(&output, &params)?;
            fs::write(output.join("loss.csv"), report.loss_csv())?;
            Ok(())
        }
        Command::Infer {
            input,
            model,
            alpha,
            beta,
            irf_sigma,
            output,
            pfm,
        } => {
            let params = pipeline::load_model(&model)?;
            let field = pipeline::infer(&load_sph(&input)?, &params, irf_sigma, alpha, beta)?;
            write_field(&field, &output, pfm)
        }
        Command::Eval {
            estimate,
            scene,
            pitch,
            output,
        } => {
            let est = DepthField::from_csv(&fs::read_to_string(estimate)?)?;
            let row = pipeline::eval(&est, &SceneSidecar::load(&scene)?, pitch)?;
            emit(output.as_deref(), &metrics_csv(&[row]))
        }
        Command::Sweep {
            ppp,
            sbr,
            scene,
            size,
            solver,
            seed,
            irf_sigma,
            pitch,
            model,
            output,
        } => {
            let params = model.as_deref().map(pipeline::load_model).transpose()?;
            let spec = SweepSpec {
                kind: scene.clone(),
                dims: size.dims(),
                ppp,
                sbr,
                seed,
                irf_sigma,
                pitch_m: pitch,
                solver: solver.config(),
            };
            let records = pipeline::sweep(&spec, params.as_ref())?;
            emit(output.as_deref(), &pipeline::sweep_csv(&scene, &records))
        }
        Command::ExportPly { input, pitch, output } => {
            let field = DepthField::from_csv(&fs::read_to_string(input)?)?;
            fs::write(output, field.to_ply(pitch))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PHOTON_UNROLL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("photon-unroll: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
