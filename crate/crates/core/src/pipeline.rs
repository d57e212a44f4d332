//! End-to-end operations behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bayes::{run_coordinate_descent, SolverConfig};
use crate::error::{Error, Result};
use crate::io::{load_pfm, DepthField, SceneSidecar};
use crate::metrics::{chamfer_l1, depth_points, dual_dae, evaluate, DepthUnit, MetricsRow};
use crate::model::{Dims, HistogramCube, Irf, TARGETS};
use crate::multiscale::{assemble_features, multiscale_depths, MultiscaleConfig, PixelFeatures};
use crate::simulate::{calibrate_ppp_sbr, make_scene, sample_histogram, sorted_depths, SceneKind, SceneParams};
use crate::training::{make_training_set, train, DatasetConfig, TrainConfig, TrainReport};
use crate::unroll::{forward, network_uncertainty, Mode, NetConfig, NetInput, NetworkParams};

/// Default lateral pixel pitch used for point clouds, in meters.
pub const DEFAULT_PITCH_M: f64 = 0.01;

pub fn scene_kind(name: &str, import: Option<&Path>) -> Result<SceneKind> {
    match (name, import) {
        ("ramp", None) => Ok(SceneKind::Ramp),
        ("step", None) => Ok(SceneKind::Step),
        ("sphere-on-plane", None) => Ok(SceneKind::SphereOnPlane),
        ("import", Some(path)) => Ok(SceneKind::Import {
            depth: load_pfm(path)?,
            reflectance: None,
        }),
        ("import", None) => Err(Error::Config("scene 'import' needs a PFM depth map".into())),
        (_, Some(_)) => Err(Error::Config("a depth map can only be given with scene 'import'".into())),
        (other, None) => Err(Error::Config(format!(
            "unknown scene {other:?}; expected ramp, step, sphere-on-plane or import"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSpec {
    pub kind: String,
    pub import: Option<PathBuf>,
    pub dims: Dims,
    pub ppp: f64,
    pub sbr: f64,
    pub seed: u64,
    pub irf_sigma: f64,
}

impl SimulateSpec {
    pub fn new(kind: &str, dims: Dims, ppp: f64, sbr: f64, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            import: None,
            dims,
            ppp,
            sbr,
            seed,
            irf_sigma: 2.0,
        }
    }
}

pub fn simulate(spec: &SimulateSpec) -> Result<(HistogramCube, SceneSidecar)> {
    let kind = scene_kind(&spec.kind, spec.import.as_deref())?;
    let irf = Irf::gaussian(spec.irf_sigma)?;
    let scene = make_scene(&kind, spec.dims, &SceneParams::default())?;
    let scene = calibrate_ppp_sbr(&scene, spec.ppp, spec.sbr)?;
    let hist = sample_histogram(&scene, &irf, spec.seed)?;
    let side = SceneSidecar {
        format: SceneSidecar::FORMAT.to_string(),
        kind: spec.kind.clone(),
        ppp: spec.ppp,
        sbr: spec.sbr,
        seed: spec.seed,
        irf_sigma: spec.irf_sigma,
        scene,
    };
    Ok((hist, side))
}

pub fn init_peaks(hist: &HistogramCube, irf_sigma: f64, scales: usize) -> Result<PixelFeatures> {
    let irf = Irf::gaussian(irf_sigma)?;
    let (_, md) = multiscale_depths(hist, &irf, &MultiscaleConfig::with_scales(scales))?;
    assemble_features(&md, hist.dims.with_scales(scales))
}

pub fn solve_bayes(hist: &HistogramCube, irf_sigma: f64, config: &SolverConfig) -> Result<DepthField> {
    let irf = Irf::gaussian(irf_sigma)?;
    let sol = run_coordinate_descent(hist, &irf, config)?;
    Ok(DepthField {
        dims: hist.dims,
        depth: sol.x.x,
        eps: sol.eps.eps,
    })
}

/// Network configuration and weights stored in a model directory.
pub fn load_model(dir: &Path) -> Result<NetworkParams> {
    let config = NetConfig::from_text(&fs::read_to_string(dir.join("model.cfg"))?)?;
    NetworkParams::load(&config, &dir.join("model.puw"))
}

pub fn save_model(dir: &Path, params: &NetworkParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("model.cfg"), params.config.to_text())?;
    params.save(&dir.join("model.puw"))
}

/// Noise-free forward pass with the network uncertainty.
pub fn infer(hist: &HistogramCube, params: &NetworkParams, irf_sigma: f64, alpha_d: f64, beta_d: f64) -> Result<DepthField> {
    let features = init_peaks(hist, irf_sigma, params.config.scales)?;
    let input = NetInput::from_features(&features, &params.config)?;
    let trace = forward(params, &input, Mode::Infer)?;
    let eps = network_uncertainty(&trace, alpha_d, beta_d)?;
    Ok(DepthField {
        dims: hist.dims,
        depth: trace.x,
        eps: eps.eps,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub scenes: usize,
    pub side: usize,
    pub bins: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
}

pub fn train_model(spec: &TrainSpec) -> Result<(NetworkParams, TrainReport)> {
    let data = DatasetConfig::new(Dims::new(spec.side, spec.side, spec.bins).with_scales(spec.net.scales));
    let set = make_training_set(spec.scenes, &data, &spec.net, spec.data_seed)?;
    let mut params = NetworkParams::init(&spec.net, spec.init_seed)?;
    let report = train(&mut params, &set, &spec.train)?;
    Ok((params, report))
}

pub fn eval(estimate: &DepthField, truth: &SceneSidecar, pitch_m: f64) -> Result<MetricsRow> {
    if estimate.dims.pixels() != truth.scene.dims.pixels() || estimate.dims.n_cols != truth.scene.dims.n_cols {
        return Err(Error::Shape("estimate and scene sizes differ".into()));
    }
    let truth_depths = sorted_depths(&truth.scene.depth);
    evaluate(&truth.kind, truth.ppp, truth.sbr, &estimate.depth, &truth_depths, truth.scene.dims, pitch_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Finest-scale maximum-likelihood depths, valid entries only.
    Ml1,
    Bayes,
    Net,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ml1 => "ml1",
            Method::Bayes => "bayes",
            Method::Net => "net",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub kind: String,
    pub dims: Dims,
    pub ppp: Vec<f64>,
    pub sbr: Vec<f64>,
    pub seed: u64,
    pub irf_sigma: f64,
    pub pitch_m: f64,
    pub solver: SolverConfig,
}

/// One long-form sweep record.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub method: &'static str,
    pub ppp: f64,
    pub sbr: f64,
    pub metric: &'static str,
    pub value: f64,
}

pub const SWEEP_HEADER: &str = "method,scene,ppp,sbr,metric,value";

fn ml1_metrics(hist: &HistogramCube, side: &SceneSidecar, pitch_m: f64) -> Result<(f64, f64)> {
    let irf = Irf::gaussian(side.irf_sigma)?;
    let (_, md) = multiscale_depths(hist, &irf, &MultiscaleConfig::default())?;
    let depth = md.scale_map(0);
    let mask: Vec<bool> = (0..md.dims.pixels())
        .flat_map(|n| (0..TARGETS).map(move |k| (n, k)))
        .map(|(n, k)| md.is_valid(n, 0, k))
        .collect();
    let truth = sorted_depths(&side.scene.depth);
    let dims = side.scene.dims;
    let dae = dual_dae(&depth, &truth, Some(&mask), DepthUnit::Meters(dims.bin_width_m))?;
    let chamfer = chamfer_l1(&depth_points(&depth, dims, pitch_m, Some(&mask)), &depth_points(&truth, dims, pitch_m, None))?;
    Ok((dae, chamfer.total))
}

/// Runs every method over the `(PPP, SBR)` grid. Grid points run in
/// parallel; records come back in grid order (PPP outer, SBR inner), then
/// method, then metric. The scene is shared, the photon seed differs per
/// grid point.
pub fn sweep(spec: &SweepSpec, model: Option<&NetworkParams>) -> Result<Vec<SweepRecord>> {
    if spec.ppp.is_empty() || spec.sbr.is_empty() {
        return Err(Error::Config("sweep needs at least one PPP and one SBR value".into()));
    }
    let grid: Vec<(usize, f64, f64)> = spec
        .ppp
        .iter()
        .flat_map(|&p| spec.sbr.iter().map(move |&s| (p, s)))
        .enumerate()
        .map(|(i, (p, s))| (i, p, s))
        .collect();
    let per_point: Vec<Vec<SweepRecord>> = grid
        .par_iter()
        .map(|&(i, ppp, sbr)| {
            let mut sim = SimulateSpec::new(&spec.kind, spec.dims, ppp, sbr, spec.seed.wrapping_add(i as u64));
            sim.irf_sigma = spec.irf_sigma;
            let (hist, side) = simulate(&sim)?;
            let mut out = Vec::new();
            let mut push = |method: Method, dae: f64, chamfer: f64| {
                for (metric, value) in [("dae", dae), ("chamfer", chamfer)] {
                    out.push(SweepRecord {
                        method: method.name(),
                        ppp,
                        sbr,
                        metric,
                        value,
                    });
                }
            };
            let (d, c) = ml1_metrics(&hist, &side, spec.pitch_m)?;
            push(Method::Ml1, d, c);
            let bayes = eval(&solve_bayes(&hist, spec.irf_sigma, &spec.solver)?, &side, spec.pitch_m)?;
            push(Method::Bayes, bayes.dae, bayes.chamfer.total);
            if let Some(params) = model {
                let net = eval(&infer(&hist, params, spec.irf_sigma, spec.solver.alpha_d, spec.solver.beta_d)?, &side, spec.pitch_m)?;
                push(Method::Net, net.dae, net.chamfer.total);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

pub fn sweep_csv(kind: &str, records: &[SweepRecord]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{kind},{},{},{},{:.9e}\n", r.method, r.ppp, r.sbr, r.metric, r.value));
    }
    s
}
