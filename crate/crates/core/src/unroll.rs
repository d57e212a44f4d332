//! The unrolled network: `S` stages of attention-based squeeze and expansion
//! blocks over the multiscale point cloud, plus its uncertainty read-out.
//!
//! Inside the network depths are divided by the histogram length. They are
//! held as an `(N * K) x L` array: one row per (pixel, surface), one column
//! per scale.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_checkpoint, save_checkpoint, Array, Tape, Tensor};
use crate::bayes::UncertaintyMap;
use crate::error::{Error, Result};
use crate::graph::{gat_layer, gumbel_noise, gumbel_softmax, knn_graph, GatLayerParams, GatTensors, Graph};
use crate::model::{Dims, TARGETS};
use crate::multiscale::PixelFeatures;
use crate::simulate::pixel_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub stages: usize,
    pub hidden: usize,
    pub scales: usize,
    pub knn_k: usize,
    pub tau: f64,
    pub layers_per_stack: usize,
    /// Build the kNN graph from pixel coordinates only.
    pub knn_coords_only: bool,
    /// Smoothing width of the residual magnitude, in normalized depth units.
    pub residual_delta: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            hidden: 8,
            scales: 4,
            knn_k: 6,
            tau: 1.0,
            layers_per_stack: 3,
            knn_coords_only: false,
            residual_delta: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.hidden == 0 || self.scales == 0 || self.layers_per_stack == 0 {
            return Err(Error::Config("stages, hidden, scales and layers_per_stack must be positive".into()));
        }
        if !(self.tau > 0.0) || !(self.residual_delta > 0.0) {
            return Err(Error::Config("tau and residual_delta must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        2 + TARGETS * self.scales
    }

    /// Attention layers in the whole network.
    pub fn layer_count(&self) -> usize {
        let per_block = 2 * self.layers_per_stack;
        per_block * (2 * self.stages - 1)
    }

    pub fn to_text(&self) -> String {
        format!(
            "stages = {}\nhidden = {}\nscales = {}\ntargets = {}\nknn_k = {}\ntau = {}\nlayers_per_stack = {}\nknn_coords_only = {}\nresidual_delta = {}\n",
            self.stages,
            self.hidden,
            self.scales,
            TARGETS,
            self.knn_k,
            self.tau,
            self.layers_per_stack,
            self.knn_coords_only,
            self.residual_delta
        )
    }

    /// Parses `key = value` lines; `#` starts a comment, unknown keys fail.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = NetConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!("line {}: expected key = value", no + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Format(format!("line {}: bad value {value:?} for {key}", no + 1));
            let int = || value.parse::<usize>().map_err(|_| bad());
            let float = || value.parse::<f64>().map_err(|_| bad());
            match key {
                "stages" => c.stages = int()?,
                "hidden" => c.hidden = int()?,
                "scales" => c.scales = int()?,
                "knn_k" => c.knn_k = int()?,
                "layers_per_stack" => c.layers_per_stack = int()?,
                "tau" => c.tau = float()?,
                "residual_delta" => c.residual_delta = float()?,
                "knn_coords_only" => c.knn_coords_only = value.parse().map_err(|_| bad())?,
                "targets" => {
                    if int()? != TARGETS {
                        return Err(Error::Format(format!("only {TARGETS} targets are supported")));
                    }
                }
                _ => return Err(Error::Format(format!("line {}: unknown key {key}", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Squeeze,
    Expansion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Features,
    Attention,
}

/// Position of one attention layer in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlot {
    pub stage: usize,
    pub block: Block,
    pub stack: Stack,
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSlot {
    pub fn name(&self) -> String {
        let block = match self.block {
            Block::Squeeze => "squeeze",
            Block::Expansion => "expand",
        };
        let stack = match self.stack {
            Stack::Features => "feat",
            Stack::Attention => "attn",
        };
        format!("stage{}.{block}.{stack}.{}", self.stage, self.index)
    }
}

/// Every layer in forward order.
pub fn layer_layout(config: &NetConfig) -> Vec<LayerSlot> {
    let mut out = Vec::new();
    let width = config.input_width();
    let logits = TARGETS * config.scales;
    let h = config.hidden;
    let n = config.layers_per_stack;
    for stage in 0..config.stages {
        let mut blocks = vec![Block::Squeeze];
        if stage + 1 < config.stages {
            blocks.push(Block::Expansion);
        }
        for block in blocks {
            for index in 0..n {
                out.push(LayerSlot {
                    stage,
                    block,
                    stack: Stack::Features,
                    index,
                    in_dim: if index == 0 { width } else { h },
                    out_dim: h,
                });
            }
            for index in 0..n {
                out.push(LayerSlot {
                    stage,
                    block,
                    stack: Stack::Attention,
                    index,
                    in_dim: h,
                    out_dim: if index + 1 == n { logits } else { h },
                });
            }
        }
    }
    out
}

const FIELDS: [&str; 4] = ["w", "a_dst", "a_src", "bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub layers: Vec<GatLayerParams>,
}

impl NetworkParams {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_layout(config)
            .iter()
            .map(|s| GatLayerParams::init(&mut rng, s.in_dim, s.out_dim))
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Flat list of arrays, four per layer.
    pub fn arrays(&self) -> Vec<Array> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.a_dst.clone(), l.a_src.clone(), l.bias.clone()])
            .collect()
    }

    pub fn set_arrays(&mut self, arrays: Vec<Array>) -> Result<()> {
        if arrays.len() != 4 * self.layers.len() {
            return Err(Error::Shape(format!("{} arrays for {} layers", arrays.len(), self.layers.len())));
        }
        let mut it = arrays.into_iter();
        for layer in self.layers.iter_mut() {
            for target in [&mut layer.w, &mut layer.a_dst, &mut layer.a_src, &mut layer.bias] {
                let a = it.next().unwrap();
                if a.shape != target.shape {
                    return Err(Error::Shape(format!("array {:?} replaces {:?}", a.shape, target.shape)));
                }
                *target = a;
            }
        }
        Ok(())
    }

    pub fn named_arrays(&self) -> Vec<(String, Array)> {
        let names = layer_layout(&self.config);
        names
            .iter()
            .zip(&self.layers)
            .flat_map(|(slot, l)| {
                let base = slot.name();
                [&l.w, &l.a_dst, &l.a_src, &l.bias]
                    .into_iter()
                    .zip(FIELDS)
                    .map(move |(a, f)| (format!("{base}.{f}"), a.clone()))
            })
            .collect()
    }

    pub fn from_named_arrays(config: &NetConfig, named: Vec<(String, Array)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let mut by_name: BTreeMap<String, Array> = named.into_iter().collect();
        let mut arrays = Vec::new();
        for (name, template) in params.named_arrays() {
            let a = by_name
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if a.shape != template.shape {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", a.shape, template.shape)));
            }
            arrays.push(a);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unexpected array {extra}")));
        }
        params.set_arrays(arrays)?;
        Ok(params)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        save_checkpoint(checkpoint, &self.named_arrays())
    }

    pub fn load(config: &NetConfig, checkpoint: &Path) -> Result<Self> {
        Self::from_named_arrays(config, load_checkpoint(checkpoint)?)
    }
}

/// Everything the network reads from one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub dims: Dims,
    pub scales: usize,
    /// `N x 2`.
    pub coords: Array,
    /// `(N * K) x L`, normalized, invalid entries already filled.
    pub depth: Array,
    /// `(n, k)` rows with at least one valid scale.
    pub valid: Vec<bool>,
    pub graph: Graph,
}

impl NetInput {
    pub fn from_features(features: &PixelFeatures, config: &NetConfig) -> Result<Self> {
        if features.scales != config.scales {
            return Err(Error::Shape(format!(
                "features carry {} scales, the network expects {}",
                features.scales, config.scales
            )));
        }
        let n = features.dims.pixels();
        let l_count = features.scales;
        let width = features.width();
        let mut coords = Vec::with_capacity(2 * n);
        let mut depth = Vec::with_capacity(n * TARGETS * l_count);
        let mut valid = Vec::with_capacity(n * TARGETS);
        for p in 0..n {
            let row = features.row(p);
            coords.extend_from_slice(&row[..2]);
            for k in 0..TARGETS {
                for l in 0..l_count {
                    depth.push(row[2 + l * TARGETS + k]);
                }
                valid.push((0..l_count).any(|l| features.valid[(p * l_count + l) * TARGETS + k]));
            }
        }
        let graph = if config.knn_coords_only {
            knn_graph(&coords, 2, config.knn_k)?
        } else {
            knn_graph(&features.values, width, config.knn_k)?
        };
        Ok(Self {
            dims: features.dims,
            scales: l_count,
            coords: Array::matrix(n, 2, coords)?,
            depth: Array::matrix(n * TARGETS, l_count, depth)?,
            valid,
            graph,
        })
    }

    pub fn pixels(&self) -> usize {
        self.dims.pixels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise, hard one-hot selection with straight-through gradients.
    Train { seed: u64 },
    /// No noise, hard selection.
    Infer,
    /// Gumbel noise, soft selection; smooth in every parameter.
    Relaxed { seed: u64 },
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTensors {
    pub params: Vec<Tensor>,
    /// Final squeezed depths, `(N * K) x 1`, normalized.
    pub x: Tensor,
    /// Soft scale weights per stage, `(N * K) x L`.
    pub soft_weights: Vec<Tensor>,
    /// Refined depths after each expansion, `(N * K) x L`.
    pub refined: Vec<Tensor>,
    /// Squeezed depths of every stage, `(N * K) x 1`.
    pub squeezed: Vec<Tensor>,
}

fn run_stack(tape: &mut Tape, mut h: Tensor, graph: &Graph, layers: &[GatTensors], final_linear: bool) -> Result<Tensor> {
    for (i, p) in layers.iter().enumerate() {
        h = gat_layer(tape, h, graph, p)?;
        if !(final_linear && i + 1 == layers.len()) {
            h = tape.elu(h);
        }
    }
    Ok(h)
}

/// Records a forward pass on `tape`, loading `params` as leaves.
pub fn forward_on_tape(tape: &mut Tape, params: &NetworkParams, input: &NetInput, mode: Mode) -> Result<ForwardTensors> {
    let config = &params.config;
    let n = input.pixels();
    let l_count = config.scales;
    if input.scales != l_count {
        return Err(Error::Shape("input scales differ from the network".into()));
    }
    let rows = n * TARGETS;
    let leaves: Vec<Tensor> = params.arrays().into_iter().map(|a| tape.leaf(a)).collect();
    let layer_tensors: Vec<GatTensors> = leaves
        .chunks(4)
        .map(|c| GatTensors {
            w: c[0],
            a_dst: c[1],
            a_src: c[2],
            bias: c[3],
        })
        .collect();
    let layout = layer_layout(config);
    let stack_of = |stage: usize, block: Block, stack: Stack| -> Vec<GatTensors> {
        layout
            .iter()
            .zip(&layer_tensors)
            .filter(|(s, _)| s.stage == stage && s.block == block && s.stack == stack)
            .map(|(_, t)| *t)
            .collect()
    };

    let coords = tape.constant(input.coords.clone());
    let ones = tape.constant(Array::filled(&[rows, l_count], 1.0));
    let graph = &input.graph;
    let mut d = tape.constant(input.depth.clone());
    let mut soft_weights = Vec::new();
    let mut refined = Vec::new();
    let mut squeezed = Vec::new();
    let mut x = d;
    for stage in 0..config.stages {
        // squeeze
        let flat = tape.reshape(d, &[n, TARGETS * l_count])?;
        let feat_in = tape.concat_cols(&[coords, flat])?;
        let h = run_stack(tape, feat_in, graph, &stack_of(stage, Block::Squeeze, Stack::Features), false)?;
        let logits = run_stack(tape, h, graph, &stack_of(stage, Block::Squeeze, Stack::Attention), true)?;
        let logits = tape.reshape(logits, &[rows, l_count])?;
        let (soft, select) = match mode {
            Mode::Infer => gumbel_softmax(tape, logits, config.tau, true, None)?,
            Mode::Train { seed } | Mode::Relaxed { seed } => {
                let noise = gumbel_noise(&mut pixel_rng(seed, stage as u64), rows * l_count);
                let hard = matches!(mode, Mode::Train { .. });
                gumbel_softmax(tape, logits, config.tau, hard, Some(&noise))?
            }
        };
        soft_weights.push(soft);
        let picked = tape.mul(select, d)?;
        x = tape.sum_cols(picked);
        squeezed.push(x);
        if stage + 1 == config.stages {
            break;
        }

        // expansion
        let xb = tape.mul_col(ones, x)?;
        let diff = tape.sub(d, xb)?;
        let residual = tape.abs_smooth(diff, config.residual_delta);
        let flat = tape.reshape(residual, &[n, TARGETS * l_count])?;
        let feat_in = tape.concat_cols(&[coords, flat])?;
        let h = run_stack(tape, feat_in, graph, &stack_of(stage, Block::Expansion, Stack::Features), false)?;
        let gate = run_stack(tape, h, graph, &stack_of(stage, Block::Expansion, Stack::Attention), true)?;
        let gate = tape.reshape(gate, &[rows, l_count])?;
        let gamma = tape.sigmoid(gate);
        let step = tape.mul(gamma, diff)?;
        d = tape.add(xb, step)?;
        refined.push(d);
    }
    tape.check_finite()?;
    Ok(ForwardTensors {
        params: leaves,
        x,
        soft_weights,
        refined,
        squeezed,
    })
}

/// Per-stage quantities kept for the uncertainty read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub dims: Dims,
    pub scales: usize,
    /// Per stage, `[(n * K + k) * L + l]`; rows sum to one.
    pub soft_weights: Vec<Vec<f64>>,
    /// Per expansion, refined depths in bins, same layout.
    pub refined: Vec<Vec<f64>>,
    /// Final squeezed depths in bins.
    pub x: Vec<[f64; TARGETS]>,
}

impl StageTrace {
    pub fn stages(&self) -> usize {
        self.soft_weights.len()
    }
}

/// Runs the network and returns the final depths (bins) with the trace.
pub fn forward(params: &NetworkParams, input: &NetInput, mode: Mode) -> Result<StageTrace> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, input, mode)?;
    let t = input.dims.bins as f64;
    let x = tape
        .value(out.x)
        .data
        .chunks(TARGETS)
        .map(|c| [c[0] * t, c[1] * t])
        .collect();
    Ok(StageTrace {
        dims: input.dims,
        scales: params.config.scales,
        soft_weights: out.soft_weights.iter().map(|&w| tape.value(w).data.clone()).collect(),
        refined: out
            .refined
            .iter()
            .map(|&d| tape.value(d).data.iter().map(|v| v * t).collect())
            .collect(),
        x,
    })
}

/// `eps = mean_s (C^s + beta) / (L + 2 + alpha)` over the stages that have an
/// expansion, with `C^s = sum_l softmax_l(1 - wbar^s) |d^s_l - x|`.
pub fn network_uncertainty(trace: &StageTrace, alpha_d: f64, beta_d: f64) -> Result<UncertaintyMap> {
    if trace.stages() < 2 {
        return Err(Error::UncertaintyUndefined(
            "the network uncertainty needs at least two stages".into(),
        ));
    }
    let l_count = trace.scales;
    let pairs = trace.stages() - 1;
    let denom = l_count as f64 + 2.0 + alpha_d;
    let mut eps = vec![[0.0; TARGETS]; trace.dims.pixels()];
    for (n, e) in eps.iter_mut().enumerate() {
        for (k, slot) in e.iter_mut().enumerate() {
            let row = (n * TARGETS + k) * l_count;
            let mut total = 0.0;
            for s in 0..pairs {
                let wbar = &trace.soft_weights[s][row..row + l_count];
                let m = wbar.iter().map(|w| 1.0 - w).fold(f64::NEG_INFINITY, f64::max);
                let z: Vec<f64> = wbar.iter().map(|w| (1.0 - w - m).exp()).collect();
                let zs: f64 = z.iter().sum();
                let c: f64 = (0..l_count)
                    .map(|l| z[l] / zs * (trace.refined[s][row + l] - trace.x[n][k]).abs())
                    .sum();
                total += (c + beta_d) / denom;
            }
            *slot = total / pairs as f64;
        }
    }
    Ok(UncertaintyMap { dims: trace.dims, eps })
}

/// Renders the config as the sidecar text written next to checkpoints.
pub fn describe(params: &NetworkParams) -> String {
    let mut s = params.config.to_text();
    let _ = writeln!(s, "# layers = {}", params.config.layer_count());
    let _ = writeln!(s, "# parameters = {}", params.parameter_count());
    s
}

/// Shared index vector for the row-major `(n, k)` layout.
pub fn valid_rows(input: &NetInput) -> Arc<[usize]> {
    input
        .valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .map(|(i, _)| i)
        .collect::<Vec<_>>()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::ridders_piecewise;
    use rand::Rng;

    fn features(rows: usize, cols: usize, seed: u64, f: impl Fn(&mut ChaCha8Rng, usize, usize, usize) -> f64) -> PixelFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims::new(rows, cols, 1024);
        let mut values = Vec::new();
        for n in 0..dims.pixels() {
            let (r, c) = dims.row_col(n);
            values.push(c as f64 / (cols - 1) as f64);
            values.push(r as f64 / (rows - 1) as f64);
            for l in 0..4 {
                for k in 0..2 {
                    values.push(f(&mut rng, n, l, k) / 1024.0);
                }
            }
        }
        PixelFeatures {
            dims,
            scales: 4,
            values,
            valid: vec![true; dims.pixels() * 8],
        }
    }

    fn random_features(seed: u64) -> PixelFeatures {
        features(4, 4, seed, |rng, _, _, k| {
            if k == 0 {
                rng.gen_range(1.0..300.0)
            } else {
                rng.gen_range(400.0..700.0)
            }
        })
    }

    fn net(stages: usize, seed: u64) -> NetworkParams {
        NetworkParams::init(
            &NetConfig {
                stages,
                ..NetConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn layout_and_counts() {
        let c = NetConfig::default();
        let layout = layer_layout(&c);
        assert_eq!(layout.len(), c.layer_count());
        assert_eq!(layout.len(), 30);
        assert_eq!(layout[0].in_dim, 10);
        assert_eq!(layout[5].out_dim, 8);
        assert!(layout.iter().all(|s| s.stage < 2 || s.block == Block::Squeeze));
        let p = NetworkParams::init(&c, 1).unwrap();
        assert_eq!(p.arrays().len(), 4 * 30);
        assert!(p.parameter_count() > 2000);
        assert_eq!(NetworkParams::init(&c, 1).unwrap(), p);
    }

    #[test]
    fn config_text_round_trip() {
        let c = NetConfig {
            stages: 2,
            knn_coords_only: true,
            tau: 0.5,
            ..NetConfig::default()
        };
        assert_eq!(NetConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(matches!(NetConfig::from_text("depth = 3"), Err(Error::Format(_))));
        assert!(matches!(NetConfig::from_text("stages = x"), Err(Error::Format(_))));
        assert!(matches!(NetConfig::from_text("stages = 0"), Err(Error::Config(_))));
        assert_eq!(NetConfig::from_text("# all defaults\n\n").unwrap(), NetConfig::default());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = net(2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.puw");
        p.save(&path).unwrap();
        assert_eq!(NetworkParams::load(&p.config, &path).unwrap(), p);
        let other = NetConfig {
            hidden: 4,
            ..p.config.clone()
        };
        assert!(matches!(NetworkParams::load(&other, &path), Err(Error::Format(_))));
    }

    #[test]
    fn identical_scales_give_common_depth() {
        let f = features(3, 4, 1, |_, n, _, k| 10.0 + n as f64 + 500.0 * k as f64);
        let p = net(3, 2);
        let input = NetInput::from_features(&f, &p.config).unwrap();
        for mode in [Mode::Infer, Mode::Train { seed: 4 }, Mode::Relaxed { seed: 4 }] {
            let trace = forward(&p, &input, mode).unwrap();
            for n in 0..12 {
                for k in 0..2 {
                    let want = 10.0 + n as f64 + 500.0 * k as f64;
                    assert!((trace.x[n][k] - want).abs() < 1e-9);
                    for r in &trace.refined {
                        for l in 0..4 {
                            assert!((r[(n * 2 + k) * 4 + l] - want).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn inference_follows_biased_logits() {
        let mut p = net(1, 5);
        let last = p.layers.len() - 1;
        let layer = &mut p.layers[last];
        layer.w.data.iter_mut().for_each(|v| *v = 0.0);
        // favour scale 3 for both surfaces
        layer.bias.data = vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0, 0.0];
        let f = random_features(6);
        let input = NetInput::from_features(&f, &p.config).unwrap();
        let trace = forward(&p, &input, Mode::Infer).unwrap();
        for n in 0..16 {
            for k in 0..2 {
                assert_eq!(trace.x[n][k], f.row(n)[2 + 2 * 2 + k] * 1024.0);
            }
        }
        assert!(trace.refined.is_empty());
        assert!(matches!(network_uncertainty(&trace, 0.0, 0.0), Err(Error::UncertaintyUndefined(_))));
    }

    #[test]
    fn closed_gate_broadcasts_squeezed_depth() {
        let mut p = net(2, 7);
        let layout = layer_layout(&p.config);
        let gate = layout
            .iter()
            .rposition(|s| s.block == Block::Expansion && s.stack == Stack::Attention)
            .unwrap();
        p.layers[gate].w.data.iter_mut().for_each(|v| *v = 0.0);
        p.layers[gate].bias.data.iter_mut().for_each(|v| *v = -800.0);
        let input = NetInput::from_features(&random_features(8), &p.config).unwrap();
        let trace = forward(&p, &input, Mode::Infer).unwrap();
        for n in 0..16 {
            for k in 0..2 {
                let row = &trace.refined[0][(n * 2 + k) * 4..(n * 2 + k) * 4 + 4];
                assert!(row.iter().all(|v| (v - trace.x[n][k]).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn outputs_stay_in_the_input_hull() {
        for seed in 0..5 {
            let p = net(3, 10 + seed);
            let f = random_features(20 + seed);
            let input = NetInput::from_features(&f, &p.config).unwrap();
            let mut tape = Tape::new();
            let out = forward_on_tape(&mut tape, &p, &input, Mode::Train { seed }).unwrap();
            let d0 = &input.depth;
            for row in 0..32 {
                let r = d0.row(row);
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let x = tape.value(out.x).data[row];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
            // each refined entry lies between its input and the squeezed depth
            let mut before = input.depth.clone();
            for (s, &refined) in out.refined.iter().enumerate() {
                let xs = tape.value(out.squeezed[s]);
                let after = tape.value(refined);
                for row in 0..32 {
                    for l in 0..4 {
                        let (a, b) = (before.at(row, l), xs.data[row]);
                        let v = after.at(row, l);
                        assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
                    }
                }
                before = after.clone();
            }
            for &w in &out.soft_weights {
                for row in tape.value(w).data.chunks(4) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let p = net(3, 11);
        let input = NetInput::from_features(&random_features(12), &p.config).unwrap();
        assert_eq!(forward(&p, &input, Mode::Infer).unwrap(), forward(&p, &input, Mode::Infer).unwrap());
        assert_eq!(
            forward(&p, &input, Mode::Train { seed: 3 }).unwrap(),
            forward(&p, &input, Mode::Train { seed: 3 }).unwrap()
        );
    }

    fn trace_with(residual: f64, wbar: f64) -> StageTrace {
        let dims = Dims::new(1, 1, 1024);
        StageTrace {
            dims,
            scales: 4,
            soft_weights: vec![vec![wbar; 8], vec![0.25; 8]],
            refined: vec![vec![100.0 + residual; 8]],
            x: vec![[100.0, 100.0]],
        }
    }

    #[test]
    fn uncertainty_examples() {
        let zero = network_uncertainty(&trace_with(0.0, 0.25), 0.0, 0.0).unwrap();
        assert_eq!(zero.eps[0], [0.0, 0.0]);
        let prior = network_uncertainty(&trace_with(0.0, 0.25), 1.0, 2.0).unwrap();
        assert!((prior.eps[0][0] - 2.0 / 7.0).abs() < 1e-15);
        // uniform weights: C = mean residual over scales = 3
        let e = network_uncertainty(&trace_with(3.0, 0.25), 0.0, 0.0).unwrap();
        assert!((e.eps[0][0] - 0.5).abs() < 1e-15);
        assert!((e.eps[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_weights_favour_unselected_scales() {
        let mut t = trace_with(0.0, 0.0);
        t.soft_weights[0] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        t.refined[0] = vec![110.0, 100.0, 100.0, 100.0, 100.0, 110.0, 100.0, 100.0];
        let e = network_uncertainty(&t, 0.0, 0.0).unwrap();
        // softmax of (0, 1, 1, 1)
        let z = 1.0 + 3.0 * 1f64.exp();
        assert!((e.eps[0][0] - 10.0 / z / 6.0).abs() < 1e-12);
        assert!((e.eps[0][1] - 10.0 * 1f64.exp() / z / 6.0).abs() < 1e-12);
    }

    #[test]
    fn relaxed_forward_matches_finite_differences() {
        let p = net(2, 13);
        let input = NetInput::from_features(&random_features(14), &p.config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let weights = Array::matrix(32, 1, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let loss = |tape: &mut Tape, params: &NetworkParams| {
            let out = forward_on_tape(tape, params, &input, Mode::Relaxed { seed: 9 }).unwrap();
            let w = tape.constant(weights.clone());
            let m = tape.mul(out.x, w).unwrap();
            let s = tape.sum(m);
            (tape.scale(s, 1024.0), out.params)
        };
        let mut tape = Tape::new();
        let (l, leaves) = loss(&mut tape, &p);
        let grads = tape.backward(l).unwrap();
        let base = p.arrays();
        // a spread of entries from every array
        for (ai, &leaf) in leaves.iter().enumerate() {
            let g = grads.get(leaf, &tape);
            for j in (0..g.len()).step_by(7) {
                let eval = |delta: f64| {
                    let mut arrays = base.clone();
                    arrays[ai].data[j] += delta;
                    let mut q = p.clone();
                    q.set_arrays(arrays).unwrap();
                    let mut t = Tape::new();
                    let (l, _) = loss(&mut t, &q);
                    (t.scalar_value(l), t.branch_signature())
                };
                // the loss is O(1e3) while some components are O(1e-4), so a fixed tiny step
                // drowns in roundoff; Ridders' extrapolation picks the step adaptively, inside
                // the smooth piece around the point (leaky_relu kinks are dense)
                let (fd, _) = ridders_piecewise(eval, 1e-3, 1e-8).expect("no smooth piece");
                // components under 1e-3 are held to 1e-8 absolute, near the roundoff floor
                let rel = (fd - g.data[j]).abs() / fd.abs().max(g.data[j].abs()).max(1e-3);
                assert!(rel < 1e-5, "array {ai}[{j}]: fd {fd} vs ad {}", g.data[j]);
            }
        }
    }
}
