//! Depth absolute error and the L1 Chamfer distance between an estimate and
//! the truth, both as depth maps and as point clouds.
//!
//! cargo run --release --example point_cloud_metrics

use photon_unroll::metrics::{chamfer_l1, chamfer_l1_with, depth_points, dual_dae, DepthUnit, Search};
use photon_unroll::model::{Dims, DEFAULT_BIN_WIDTH_M};
use photon_unroll::pipeline::DEFAULT_PITCH_M;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> photon_unroll::Result<()> {
    let dims = Dims::new(32, 32, 1024);
    let truth: Vec<[f64; 2]> = (0..dims.pixels()).map(|n| [100.0 + (n % 32) as f64, 500.0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let estimate: Vec<[f64; 2]> = truth
        .iter()
        .map(|d| [d[0] + rng.gen_range(-2.0..2.0), d[1] + rng.gen_range(-1.0..1.0)])
        .collect();

    println!("DAE {:.3} bins", dual_dae(&estimate, &truth, None, DepthUnit::Bins)?);
    println!("DAE {:.5} m", dual_dae(&estimate, &truth, None, DepthUnit::Meters(DEFAULT_BIN_WIDTH_M))?);

    let est_pts = depth_points(&estimate, dims, DEFAULT_PITCH_M, None);
    let true_pts = depth_points(&truth, dims, DEFAULT_PITCH_M, None);
    let c = chamfer_l1(&est_pts, &true_pts)?;
    println!(
        "Chamfer {:.5} m (estimate to truth {:.5}, truth to estimate {:.5})",
        c.total, c.o_to_g, c.g_to_o
    );
    let brute = chamfer_l1_with(&est_pts, &true_pts, Search::Exhaustive)?;
    println!("exhaustive search agrees: {}", (brute.total - c.total).abs() < 1e-12);
    Ok(())
}
