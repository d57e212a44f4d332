//! Synthetic training scenes and mini-batch Adam training of the unrolled
//! network on the L1 depth loss.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Adam, Array, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Dims, Irf, SceneSpec, TARGETS};
use crate::multiscale::{assemble_features, multiscale_depths, MultiscaleConfig, PixelFeatures};
use crate::simulate::{calibrate_ppp_sbr, make_scene, sample_histogram, sorted_depths, DepthMap, SceneKind, SceneParams};
use crate::unroll::{forward_on_tape, Mode, NetConfig, NetInput, NetworkParams};

/// Photon budgets cycled through by the training set.
pub const TRAINING_PAIRS: [(f64, f64); 4] = [(64.0, 64.0), (64.0, 4.0), (4.0, 64.0), (4.0, 4.0)];

/// First-surface band and the allowed second-surface band, in bins.
pub const FIRST_BAND: (f64, f64) = (1.0, 300.0);
pub const SECOND_BAND: (f64, f64) = (400.0, 700.0);

#[derive(Debug, Clone)]
pub struct Sample {
    pub ppp: f64,
    pub sbr: f64,
    pub scene: SceneSpec,
    pub features: PixelFeatures,
    pub input: NetInput,
    /// Ground truth in bins, ascending per pixel.
    pub truth: Vec<[f64; TARGETS]>,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub dims: Dims,
    pub irf_sigma: f64,
    pub multiscale: MultiscaleConfig,
}

impl DatasetConfig {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            irf_sigma: 2.0,
            multiscale: MultiscaleConfig::with_scales(dims.scales),
        }
    }
}

/// Smooth random surface: a tilted plane, optionally with a spherical bump
/// and a step edge, rescaled into a random part of the first band.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, dims: Dims) -> Result<SceneSpec> {
    let (rows, cols) = (dims.n_rows as f64, dims.n_cols as f64);
    let (gx, gy): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let bump = rng.gen_bool(0.5).then(|| {
        (
            rng.gen_range(0.0..rows),
            rng.gen_range(0.0..cols),
            rng.gen_range(0.2..0.5) * rows.min(cols),
            rng.gen_range(-1.0..1.0),
        )
    });
    let step = rng.gen_bool(0.3).then(|| (rng.gen_range(0.2..0.8) * cols, rng.gen_range(-0.8..0.8)));
    let values = (0..dims.pixels())
        .map(|n| {
            let (r, c) = ((n / dims.n_cols) as f64, (n % dims.n_cols) as f64);
            let mut v = gx * c / cols + gy * r / rows;
            if let Some((br, bc, rad, h)) = bump {
                let rho2 = ((r - br).powi(2) + (c - bc).powi(2)) / (rad * rad);
                if rho2 < 1.0 {
                    v += h * (1.0 - rho2).sqrt();
                }
            }
            if let Some((edge, h)) = step {
                if c >= edge {
                    v += h;
                }
            }
            v
        })
        .collect();
    let span = rng.gen_range(20.0..FIRST_BAND.1 - FIRST_BAND.0);
    let lo = rng.gen_range(FIRST_BAND.0..=FIRST_BAND.1 - span);
    let hi = lo + span;
    // second surface stays inside its band
    let offset = rng.gen_range(SECOND_BAND.0 - lo..=SECOND_BAND.1 - hi);
    let params = SceneParams {
        near_band: (lo, hi),
        offset,
        ..SceneParams::default()
    };
    let kind = SceneKind::Import {
        depth: DepthMap {
            n_rows: dims.n_rows,
            n_cols: dims.n_cols,
            values,
        },
        reflectance: None,
    };
    make_scene(&kind, dims, &params)
}

/// Calibrates, samples and preprocesses one scene.
pub fn prepare_sample(
    scene: &SceneSpec,
    ppp: f64,
    sbr: f64,
    seed: u64,
    config: &DatasetConfig,
    net: &NetConfig,
) -> Result<Sample> {
    let irf = Irf::gaussian(config.irf_sigma)?;
    let scene = calibrate_ppp_sbr(scene, ppp, sbr)?;
    let hist = sample_histogram(&scene, &irf, seed)?;
    let (_, md) = multiscale_depths(&hist, &irf, &config.multiscale)?;
    let features = assemble_features(&md, scene.dims)?;
    let input = NetInput::from_features(&features, net)?;
    let truth = sorted_depths(&scene.depth);
    Ok(Sample {
        ppp,
        sbr,
        scene,
        features,
        input,
        truth,
    })
}

/// `n_scenes` random scenes cycling through [`TRAINING_PAIRS`].
pub fn make_training_set(n_scenes: usize, config: &DatasetConfig, net: &NetConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(SceneSpec, u64, (f64, f64))> = (0..n_scenes)
        .map(|i| {
            let scene = random_scene(&mut rng, config.dims)?;
            Ok((scene, rng.gen(), TRAINING_PAIRS[i % TRAINING_PAIRS.len()]))
        })
        .collect::<Result<_>>()?;
    jobs.par_iter()
        .map(|(scene, s, (ppp, sbr))| prepare_sample(scene, *ppp, *sbr, *s, config, net))
        .collect()
}

/// Mean absolute error over the valid `(n, k)` entries, in bins.
pub fn l1_error(pred: &[[f64; TARGETS]], truth: &[[f64; TARGETS]], valid: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || valid.len() != pred.len() * TARGETS {
        return Err(Error::Shape("prediction, truth and mask disagree".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, (p, t)) in pred.iter().zip(truth).enumerate() {
        for k in 0..TARGETS {
            if valid[n * TARGETS + k] {
                total += (p[k] - t[k]).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no valid entries for the loss".into()));
    }
    Ok(total / count as f64)
}

/// Tape version of [`l1_error`] for normalized `(N * K) x 1` predictions.
pub fn l1_loss(tape: &mut Tape, x: Tensor, truth: &[[f64; TARGETS]], valid: &[bool], bins: usize) -> Result<Tensor> {
    let rows: Arc<[usize]> = valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| i)
        .collect::<Vec<_>>()
        .into();
    if rows.is_empty() {
        return Err(Error::Empty("no valid entries for the loss".into()));
    }
    if tape.value(x).len() != truth.len() * TARGETS {
        return Err(Error::Shape("prediction and truth disagree".into()));
    }
    let target = Array::matrix(rows.len(), 1, rows.iter().map(|&i| truth[i / TARGETS][i % TARGETS]).collect())?;
    let picked = tape.gather_rows(x, rows)?;
    let scaled = tape.scale(picked, bins as f64);
    let t = tape.constant(target);
    let diff = tape.sub(scaled, t)?;
    let abs = tape.abs(diff);
    tape.mean(abs)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(params: &NetworkParams, sample: &Sample, seed: u64) -> Result<(f64, Vec<Array>)> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, &sample.input, Mode::Train { seed })?;
    let loss = l1_loss(&mut tape, out.x, &sample.truth, &sample.input.valid, sample.input.dims.bins)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, out.params.iter().map(|&p| grads.get(p, &tape)).collect()))
}

/// Mean loss and mean gradient over a batch. Samples run in parallel; the
/// reduction follows batch order so results do not depend on scheduling.
pub fn batch_gradient(params: &NetworkParams, batch: &[&Sample], seeds: &[u64]) -> Result<(f64, Vec<Array>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<Array>)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| sample_gradient(params, s, seed))
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<Array> = parts[0].1.iter().map(|a| Array::zeros(&a.shape)).collect();
    for (l, g) in &parts {
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for (a, v) in acc.data.iter_mut().zip(&gi.data) {
                *a += v;
            }
        }
    }
    for acc in grad.iter_mut() {
        acc.data.iter_mut().for_each(|v| *v /= b);
    }
    Ok((loss / b, grad))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Directory receiving `model.puw`, `model.cfg` and `loss.csv` after
    /// every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch: 24,
            epochs: 100,
            max_steps: None,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(epoch, mean batch loss)`.
    pub epochs: Vec<(usize, f64)>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (e, l) in &self.epochs {
            s.push_str(&format!("{e},{l:.9e}\n"));
        }
        s
    }
}

fn step_seed(seed: u64, step: usize, item: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (item as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Mini-batch Adam on the L1 loss. Shuffling, Gumbel noise and batch order
/// all derive from `config.seed`.
pub fn train(params: &mut NetworkParams, dataset: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("bad learning rate {}", config.lr)));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut arrays = params.arrays();
    let mut adam = Adam::new(config.lr, &arrays);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'outer: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch) {
            if config.max_steps.is_some_and(|m| report.steps >= m) {
                break 'outer;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len()).map(|i| step_seed(config.seed, report.steps, i)).collect();
            let (loss, grad) = batch_gradient(params, &batch, &seeds).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at epoch {epoch}, step {}, scenes {chunk:?}",
                    report.steps
                )),
                other => other,
            })?;
            adam.update(&mut arrays, &grad)?;
            params.set_arrays(arrays.clone())?;
            report.step_losses.push(loss);
            losses.push(loss);
            report.steps += 1;
        }
        if losses.is_empty() {
            break;
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        report.epochs.push((epoch, mean));
        if let Some(dir) = &config.checkpoint_dir {
            params.save(&dir.join("model.puw"))?;
            fs::write(dir.join("model.cfg"), params.config.to_text())?;
            fs::write(dir.join("loss.csv"), report.loss_csv())?;
        }
    }
    Ok(report)
}

/// Noise-free, hard-selection depths of one sample, in bins.
pub fn predict(params: &NetworkParams, input: &NetInput) -> Result<Vec<[f64; TARGETS]>> {
    Ok(crate::unroll::forward(params, input, Mode::Infer)?.x)
}
