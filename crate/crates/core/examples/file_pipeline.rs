//! The file-based workflow behind the command-line tool: simulate to disk,
//! solve, score against the scene sidecar and export a point cloud.
//!
//! cargo run --release --example file_pipeline -- [work_dir]

use std::fs;
use std::path::PathBuf;

use photon_unroll::bayes::SolverConfig;
use photon_unroll::io::{load_sph, save_sph, DepthField, SceneSidecar};
use photon_unroll::metrics::metrics_csv;
use photon_unroll::model::Dims;
use photon_unroll::pipeline::{self, SimulateSpec, DEFAULT_PITCH_M};

fn main() -> photon_unroll::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("photon-unroll-demo"));
    fs::create_dir_all(&dir)?;

    let spec = SimulateSpec::new("sphere-on-plane", Dims::new(24, 24, 1024), 8.0, 2.0, 4);
    let (hist, sidecar) = pipeline::simulate(&spec)?;
    save_sph(&dir.join("scene.sph"), &hist)?;
    sidecar.save(&dir.join("scene.sph.json"))?;

    let field = pipeline::solve_bayes(&load_sph(&dir.join("scene.sph"))?, 2.0, &SolverConfig::default())?;
    fs::write(dir.join("depth.csv"), field.to_csv())?;

    let reloaded = DepthField::from_csv(&fs::read_to_string(dir.join("depth.csv"))?)?;
    let row = pipeline::eval(&reloaded, &SceneSidecar::load(&dir.join("scene.sph.json"))?, DEFAULT_PITCH_M)?;
    print!("{}", metrics_csv(&[row]));

    fs::write(dir.join("depth.ply"), reloaded.to_ply(DEFAULT_PITCH_M))?;
    println!("outputs in {}", dir.display());
    Ok(())
}
