//! Trains the unrolled network on procedural scenes and compares it with the
//! finest-scale ML depths on a held-out scene at PPP = SBR = 4.
//!
//! cargo run --release --example train_unrolled -- [steps] [train_side]

use std::time::Instant;

use photon_unroll::model::{Dims, TARGETS};
use photon_unroll::training::{make_training_set, predict, prepare_sample, random_scene, train, DatasetConfig, TrainConfig};
use photon_unroll::unroll::{NetConfig, NetworkParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn surface_dae(pred: &[[f64; TARGETS]], truth: &[[f64; TARGETS]], mask: impl Fn(usize, usize) -> bool, k: usize) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..truth.len() {
        if mask(n, k) {
            sum += (pred[n][k] - truth[n][k]).abs();
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

fn main() -> photon_unroll::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let side: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5e-5);

    let net = NetConfig::default();
    let train_cfg = DatasetConfig::new(Dims::new(side, side, 1024));
    let t0 = Instant::now();
    let set = make_training_set(96, &train_cfg, &net, 1)?;
    println!("dataset: {} scenes in {:.1?}", set.len(), t0.elapsed());

    let mut params = NetworkParams::init(&net, 2)?;
    let config = TrainConfig {
        lr,
        batch: 24,
        epochs: usize::MAX,
        max_steps: Some(steps),
        seed: 3,
        checkpoint_dir: None,
    };
    let t0 = Instant::now();
    let report = train(&mut params, &set, &config)?;
    println!("trained {} steps in {:.1?}", report.steps, t0.elapsed());
    for (e, l) in report.epochs.iter().step_by((report.epochs.len() / 10).max(1)) {
        println!("  epoch {e:4}  loss {l:.3}");
    }

    let test_cfg = DatasetConfig::new(Dims::new(32, 32, 1024));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scene = random_scene(&mut rng, test_cfg.dims)?;
    let held_out = prepare_sample(&scene, 4.0, 4.0, 100, &test_cfg, &net)?;
    let pred = predict(&params, &held_out.input)?;
    let ml = held_out.features.depths_bins();
    let scales = held_out.features.scales;
    let ml1: Vec<[f64; TARGETS]> = (0..pred.len()).map(|n| [ml[n * scales * TARGETS], ml[n * scales * TARGETS + 1]]).collect();
    for k in 0..TARGETS {
        let net_dae = surface_dae(&pred, &held_out.truth, |n, k| held_out.input.valid[n * TARGETS + k], k);
        let base = surface_dae(&ml1, &held_out.truth, |n, k| held_out.features.valid[n * scales * TARGETS + k], k);
        println!("surface {k}: net {net_dae:.3} bins, ML(1) {base:.3} bins, ratio {:.3}", net_dae / base);
    }
    Ok(())
}
