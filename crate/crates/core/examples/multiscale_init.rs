//! Multiscale dual-peak initialization: coarser windows gather more photons
//! and trade resolution for robustness at low photon counts.
//!
//! cargo run --release --example multiscale_init -- [ppp] [sbr]

use photon_unroll::metrics::{surface_dae, DepthUnit};
use photon_unroll::model::{Dims, Irf, TARGETS};
use photon_unroll::multiscale::{multiscale_depths, MultiscaleConfig};
use photon_unroll::simulate::{calibrate_ppp_sbr, make_scene, sample_histogram, sorted_depths, SceneKind, SceneParams};

fn main() -> photon_unroll::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ppp: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let sbr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);

    let dims = Dims::new(32, 32, 1024);
    let irf = Irf::gaussian(2.0)?;
    let scene = make_scene(&SceneKind::Step, dims, &SceneParams::default())?;
    let scene = calibrate_ppp_sbr(&scene, ppp, sbr)?;
    let hist = sample_histogram(&scene, &irf, 1)?;
    let truth = sorted_depths(&scene.depth);

    let config = MultiscaleConfig::default();
    let (pyramid, md) = multiscale_depths(&hist, &irf, &config)?;
    println!("PPP {ppp}, SBR {sbr}");
    println!("{:>6} {:>12} {:>10} {:>10}", "window", "mean photons", "dae near", "dae far");
    for (l, window) in pyramid.kernel_sizes().iter().enumerate() {
        let depths = md.scale_map(l);
        let photons = (0..dims.pixels()).map(|n| md.total(n, l) as f64).sum::<f64>() / dims.pixels() as f64;
        let mut row = format!("{window:>6} {photons:>12.1}");
        let valid: Vec<bool> = (0..dims.pixels())
            .flat_map(|n| (0..TARGETS).map(move |k| (n, k)))
            .map(|(n, k)| md.is_valid(n, l, k))
            .collect();
        for k in 0..TARGETS {
            let err = surface_dae(&depths, &truth, Some(&valid), k, DepthUnit::Bins)?;
            row += &format!(" {err:>10.2}");
        }
        println!("{row}");
    }
    Ok(())
}
