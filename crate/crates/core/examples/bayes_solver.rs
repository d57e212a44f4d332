//! Classical coordinate-descent solver: fuses the multiscale depths with
//! spatial guidance weights and estimates a per-depth uncertainty.
//!
//! cargo run --release --example bayes_solver -- [ppp] [sbr]

use photon_unroll::bayes::{run_coordinate_descent, SolverConfig};
use photon_unroll::metrics::{dual_dae, DepthUnit};
use photon_unroll::model::{Dims, Irf, TARGETS};
use photon_unroll::simulate::{calibrate_ppp_sbr, make_scene, sample_histogram, sorted_depths, SceneKind, SceneParams};

fn main() -> photon_unroll::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ppp: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let sbr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);

    let dims = Dims::new(32, 32, 1024);
    let irf = Irf::gaussian(2.0)?;
    let scene = make_scene(&SceneKind::SphereOnPlane, dims, &SceneParams::default())?;
    let scene = calibrate_ppp_sbr(&scene, ppp, sbr)?;
    let hist = sample_histogram(&scene, &irf, 3)?;
    let truth = sorted_depths(&scene.depth);

    let config = SolverConfig::default();
    let sol = run_coordinate_descent(&hist, &irf, &config)?;
    println!("{} iterations", sol.iterations);
    for rec in sol.trace.iter().step_by((sol.trace.len() / 8).max(1)) {
        println!("  {:<10} {:.6e}", rec.step.name(), rec.value);
    }

    let ml1 = sol.d_ml.scale_map(0);
    let ml1_valid: Vec<bool> = (0..dims.pixels())
        .flat_map(|n| (0..TARGETS).map(move |k| (n, k)))
        .map(|(n, k)| sol.d_ml.is_valid(n, 0, k))
        .collect();
    println!(
        "DAE bins: finest-scale ML {:.2} (valid entries only), solver {:.2}",
        dual_dae(&ml1, &truth, Some(&ml1_valid), DepthUnit::Bins)?,
        dual_dae(&sol.x.x, &truth, None, DepthUnit::Bins)?
    );
    let mean_eps: f64 = sol.eps.eps.iter().flatten().sum::<f64>() / (TARGETS * dims.pixels()) as f64;
    println!("mean uncertainty {mean_eps:.3} bins^2, {} pixels flagged", sol.flagged.iter().filter(|&&f| f).count());
    Ok(())
}
