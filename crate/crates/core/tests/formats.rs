//! Round trips of every on-disk format.

use photon_unroll::io::{read_pfm, read_sph, write_pfm, write_sph, DepthField, SceneSidecar};
use photon_unroll::model::{Dims, HistogramCube};
use photon_unroll::pipeline::{self, SimulateSpec};
use photon_unroll::simulate::DepthMap;
use proptest::prelude::*;

proptest! {
    #[test]
    fn sph_is_lossless(rows in 1usize..5, cols in 1usize..5, bins in 1usize..40, seed in any::<u64>()) {
        let dims = Dims::new(rows, cols, bins);
        let mut state = seed;
        let counts: Vec<u32> = (0..rows * cols * bins)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 40) as u32
            })
            .collect();
        let hist = HistogramCube::from_counts(dims, counts).unwrap();
        let mut buf = Vec::new();
        write_sph(&mut buf, &hist).unwrap();
        prop_assert_eq!(buf.len(), 4 + 12 + 4 * rows * cols * bins);
        let back = read_sph(buf.as_slice()).unwrap();
        prop_assert_eq!(back, hist);
    }

    #[test]
    fn pfm_is_lossless_in_f32(rows in 1usize..6, cols in 1usize..6, values in prop::collection::vec(-1e4f32..1e4, 36)) {
        let map = DepthMap { n_rows: rows, n_cols: cols, values: values[..rows * cols].iter().map(|&v| v as f64).collect() };
        let mut buf = Vec::new();
        write_pfm(&mut buf, &map).unwrap();
        prop_assert_eq!(read_pfm(buf.as_slice()).unwrap(), map);
    }
}

#[test]
fn truncated_sph_is_rejected() {
    let hist = HistogramCube::zeros(Dims::new(2, 2, 8));
    let mut buf = Vec::new();
    write_sph(&mut buf, &hist).unwrap();
    for cut in [0, 3, 10, buf.len() - 1] {
        assert!(read_sph(&buf[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn depth_csv_and_sidecar_round_trip() {
    let spec = SimulateSpec::new("ramp", Dims::new(6, 5, 1024), 8.0, 2.0, 9);
    let (hist, sidecar) = pipeline::simulate(&spec).unwrap();
    let field = pipeline::solve_bayes(&hist, spec.irf_sigma, &Default::default()).unwrap();
    let back = DepthField::from_csv(&field.to_csv()).unwrap();
    assert_eq!(back, field);

    let json = sidecar.to_json().unwrap();
    assert_eq!(SceneSidecar::from_json(&json).unwrap(), sidecar);
    let wrong = json.replace("photon-unroll-scene-1", "photon-unroll-scene-9");
    assert!(SceneSidecar::from_json(&wrong).is_err());
}
