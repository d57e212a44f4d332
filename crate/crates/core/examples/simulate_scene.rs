//! Simulates a two-plane scene at a chosen photon level and writes it as an
//! SPH1 cube.
//!
//! cargo run --release --example simulate_scene -- [ppp] [sbr] [out.sph]

use std::path::PathBuf;

use photon_unroll::io::save_sph;
use photon_unroll::model::{Dims, Irf};
use photon_unroll::simulate::{calibrate_ppp_sbr, make_scene, sample_histogram, scene_ppp_sbr, SceneKind, SceneParams};

fn main() -> photon_unroll::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ppp: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16.0);
    let sbr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let out = args.get(3).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("step.sph"));

    let dims = Dims::new(32, 32, 1024);
    let irf = Irf::gaussian(2.0)?;
    let scene = make_scene(&SceneKind::Step, dims, &SceneParams::default())?;
    let scene = calibrate_ppp_sbr(&scene, ppp, sbr)?;
    let (p, s) = scene_ppp_sbr(&scene);
    println!("expected PPP {p:.2}, SBR {s:.2}");

    let hist = sample_histogram(&scene, &irf, 7)?;
    println!("empirical PPP {:.2}", hist.empirical_ppp());

    // one pixel on each side of the step
    for n in [0, dims.pixels() - 1] {
        let counts = hist.pixel(n);
        let busiest = (0..dims.bins).max_by_key(|&t| counts[t]).unwrap_or(0);
        println!(
            "pixel {n}: true depths {:?}, {} photons, busiest bin {busiest}",
            scene.depth[n],
            hist.total(n)
        );
    }
    save_sph(&out, &hist)?;
    println!("wrote {}", out.display());
    Ok(())
}
