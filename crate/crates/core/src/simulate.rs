//! Procedural dual-surface scenes, PPP/SBR calibration and seeded Poisson
//! sampling of histogram cubes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_intensity, ln_factorial, Dims, HistogramCube, IntensityCube, Irf, SceneSpec, TARGETS};

/// A depth map supplied from outside (e.g. read from a PFM file), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    /// First surface increases linearly along the columns.
    Ramp,
    /// Two plateaus split at the middle column.
    Step,
    /// A spherical cap in front of a flat plane.
    SphereOnPlane,
    /// Depths rescaled from an external map; optional reflectance map.
    Import {
        depth: DepthMap,
        reflectance: Option<DepthMap>,
    },
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Ramp => "ramp",
            SceneKind::Step => "step",
            SceneKind::SphereOnPlane => "sphere-on-plane",
            SceneKind::Import { .. } => "import",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    /// Band (in bins) occupied by the first surface.
    pub near_band: (f64, f64),
    /// Distance from the first to the second surface.
    pub offset: f64,
    /// Expected signal photons per pixel, summed over both surfaces.
    pub signal_per_pixel: f64,
    /// Fraction of the signal returned by the first surface.
    pub first_fraction: f64,
    /// Background photons per bin.
    pub background: f64,
    /// Round depths to whole bins.
    pub integer_depths: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            near_band: (1.0, 300.0),
            offset: 399.0,
            signal_per_pixel: 1.0,
            first_fraction: 0.5,
            background: 0.0,
            integer_depths: false,
        }
    }
}

impl SceneParams {
    fn check_layout(&self, bins: usize) -> Result<()> {
        let (lo, hi) = self.near_band;
        if !(lo >= 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidLayout(format!("bad first-surface band [{lo}, {hi}]")));
        }
        if lo + self.offset <= hi {
            return Err(Error::InvalidLayout(format!(
                "offset {} makes the second band [{}, {}] overlap the first [{lo}, {hi}]",
                self.offset,
                lo + self.offset,
                hi + self.offset
            )));
        }
        if hi + self.offset > bins as f64 - 1.0 {
            return Err(Error::InvalidLayout(format!(
                "second surface reaches bin {} but the histogram has {bins} bins",
                hi + self.offset
            )));
        }
        if !(0.0..=1.0).contains(&self.first_fraction) {
            return Err(Error::Config(format!("first_fraction {} not in [0, 1]", self.first_fraction)));
        }
        if !(self.signal_per_pixel >= 0.0 && self.background >= 0.0) {
            return Err(Error::Config("photon rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Builds a dual-surface scene: the first surface in `params.near_band`, the
/// second a copy shifted by `params.offset`.
pub fn make_scene(kind: &SceneKind, dims: Dims, params: &SceneParams) -> Result<SceneSpec> {
    dims.validate()?;
    params.check_layout(dims.bins)?;
    let (lo, hi) = params.near_band;
    let span = hi - lo;
    let (rows, cols) = (dims.n_rows, dims.n_cols);
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };

    let mut reflectance: Option<&DepthMap> = None;
    let first: Vec<f64> = match kind {
        SceneKind::Ramp => (0..dims.pixels()).map(|n| lo + span * frac(n % cols, cols)).collect(),
        SceneKind::Step => (0..dims.pixels())
            .map(|n| if 2 * (n % cols) < cols { lo + 0.25 * span } else { lo + 0.75 * span })
            .collect(),
        SceneKind::SphereOnPlane => {
            let plane = lo + 0.8 * span;
            let cap = 0.6 * span;
            let radius = 0.35 * rows.min(cols) as f64;
            let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
            (0..dims.pixels())
                .map(|n| {
                    let (r, c) = (n / cols, n % cols);
                    let rho2 = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)) / (radius * radius);
                    if rho2 < 1.0 {
                        plane - cap * (1.0 - rho2).sqrt()
                    } else {
                        plane
                    }
                })
                .collect()
        }
        SceneKind::Import { depth, reflectance: refl_map } => {
            check_map(depth, dims)?;
            if let Some(map) = refl_map {
                check_map(map, dims)?;
                if map.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::Format("reflectance map contains negative or non-finite values".into()));
                }
                reflectance = Some(map);
            }
            rescale_into_band(&depth.values, lo, hi)?
        }
    };

    let refl_scale = match reflectance {
        Some(map) => {
            let mean = map.values.iter().sum::<f64>() / map.values.len() as f64;
            if mean > 0.0 {
                map.values.iter().map(|v| v / mean).collect()
            } else {
                vec![0.0; dims.pixels()]
            }
        }
        None => vec![1.0; dims.pixels()],
    };

    let depth = first
        .iter()
        .map(|&d| {
            let d = if params.integer_depths { d.round() } else { d };
            [d, d + params.offset]
        })
        .collect();
    let refl = refl_scale
        .iter()
        .map(|&s| {
            let r = params.signal_per_pixel * s;
            [r * params.first_fraction, r * (1.0 - params.first_fraction)]
        })
        .collect();
    let scene = SceneSpec {
        dims,
        depth,
        refl,
        background: vec![params.background; dims.pixels()],
    };
    scene.validate()?;
    Ok(scene)
}

fn check_map(map: &DepthMap, dims: Dims) -> Result<()> {
    if map.n_rows != dims.n_rows || map.n_cols != dims.n_cols || map.values.len() != dims.pixels() {
        return Err(Error::Shape(format!(
            "imported map is {}x{}, scene is {}x{}",
            map.n_rows, map.n_cols, dims.n_rows, dims.n_cols
        )));
    }
    Ok(())
}

fn rescale_into_band(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("imported depth map contains non-finite values".into()));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= f64::EPSILON * max.abs().max(1.0) {
        let v = min.clamp(lo, hi);
        return Ok(vec![v; values.len()]);
    }
    Ok(values.iter().map(|v| lo + (hi - lo) * (v - min) / (max - min)).collect())
}

/// Rescales reflectivities and background so that
/// `PPP = mean_n (r_n + b_n T)` and `SBR = sum r_n / sum b_n T` hit the targets.
///
/// Reflectivities are multiplied by one factor and background by another. A
/// scene without any background receives a uniform one.
pub fn calibrate_ppp_sbr(scene: &SceneSpec, target_ppp: f64, target_sbr: f64) -> Result<SceneSpec> {
    scene.validate()?;
    if !(target_ppp > 0.0 && target_ppp.is_finite()) {
        return Err(Error::InvalidTarget(format!("PPP must be positive and finite, got {target_ppp}")));
    }
    if !(target_sbr > 0.0 && target_sbr.is_finite()) {
        return Err(Error::InvalidTarget(format!("SBR must be positive and finite, got {target_sbr}")));
    }
    let n = scene.dims.pixels() as f64;
    let t = scene.dims.bins as f64;
    let signal: f64 = (0..scene.dims.pixels()).map(|i| scene.signal(i)).sum();
    if signal <= 0.0 {
        return Err(Error::InvalidTarget("scene has no signal to calibrate".into()));
    }
    let background: f64 = scene.background.iter().sum::<f64>() * t;

    let total = target_ppp * n;
    let signal_target = total * target_sbr / (1.0 + target_sbr);
    let background_target = total / (1.0 + target_sbr);

    let a = signal_target / signal;
    let mut out = scene.clone();
    out.refl.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= a));
    if background > 0.0 {
        let c = background_target / background;
        out.background.iter_mut().for_each(|b| *b *= c);
    } else {
        out.background.fill(background_target / (n * t));
    }
    Ok(out)
}

/// Measured `(PPP, SBR)` of a scene's expected photon budget.
pub fn scene_ppp_sbr(scene: &SceneSpec) -> (f64, f64) {
    let n = scene.dims.pixels() as f64;
    let t = scene.dims.bins as f64;
    let signal: f64 = (0..scene.dims.pixels()).map(|i| scene.signal(i)).sum();
    let background: f64 = scene.background.iter().sum::<f64>() * t;
    ((signal + background) / n, signal / background)
}

/// Draws `y_{n,t} ~ Poisson(s_{n,t})`. Each pixel uses its own ChaCha stream
/// keyed by `(seed, n)`, so the result does not depend on thread scheduling.
pub fn sample_histogram(scene: &SceneSpec, irf: &Irf, seed: u64) -> Result<HistogramCube> {
    let intensity = forward_intensity(scene, irf)?;
    Ok(sample_intensity(&intensity, seed))
}

pub fn sample_intensity(intensity: &IntensityCube, seed: u64) -> HistogramCube {
    let dims = intensity.dims;
    let t_len = dims.bins;
    let mut counts = vec![0u32; intensity.values.len()];
    counts
        .par_chunks_mut(t_len)
        .zip(intensity.values.par_chunks(t_len))
        .enumerate()
        .for_each(|(n, (out, rates))| {
            let mut rng = pixel_rng(seed, n as u64);
            for (y, &lambda) in out.iter_mut().zip(rates) {
                *y = poisson(&mut rng, lambda) as u32;
            }
        });
    HistogramCube { dims, counts }
}

/// Expected counts rounded to the nearest integer.
pub fn noise_free_histogram(scene: &SceneSpec, irf: &Irf) -> Result<HistogramCube> {
    let intensity = forward_intensity(scene, irf)?;
    let counts = intensity.values.iter().map(|v| v.round() as u32).collect();
    Ok(HistogramCube {
        dims: scene.dims,
        counts,
    })
}

pub fn pixel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Poisson variate: sequential inversion below `lambda = 10`, Hörmann's
/// transformed rejection with squeeze (PTRS) above.
pub fn poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda < 10.0 {
        poisson_inversion(rng, lambda)
    } else {
        poisson_ptrs(rng, lambda)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let u: f64 = rng.gen();
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    while u > cdf {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
        // cdf has saturated below u through rounding; u is within 1e-16 of 1
        if p < 1e-300 && k as f64 > lambda {
            break;
        }
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -lambda + k * loglam - ln_factorial(k as u64);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Sorted copy of the per-pixel depths, used where the ascending convention
/// must be enforced on external data.
pub fn sorted_depths(depth: &[[f64; TARGETS]]) -> Vec<[f64; TARGETS]> {
    depth
        .iter()
        .map(|d| if d[0] <= d[1] { *d } else { [d[1], d[0]] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_dims(rows: usize, cols: usize) -> Dims {
        Dims::new(rows, cols, 1024)
    }

    #[test]
    fn ramp_layout() {
        let scene = make_scene(&SceneKind::Ramp, default_dims(8, 8), &SceneParams::default()).unwrap();
        for r in 0..8 {
            let row: Vec<f64> = (0..8).map(|c| scene.depth[r * 8 + c][0]).collect();
            assert_eq!(row[0], 1.0);
            assert_eq!(row[7], 300.0);
            assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
        for d in &scene.depth {
            assert_eq!(d[1], d[0] + 399.0);
            assert!((400.0..=700.0).contains(&d[1]));
        }
    }

    #[test]
    fn sphere_second_surface_is_offset_copy() {
        let scene = make_scene(&SceneKind::SphereOnPlane, default_dims(32, 32), &SceneParams::default()).unwrap();
        assert!(scene.depth.iter().all(|d| (d[1] - d[0] - 399.0).abs() < 1e-12));
        let min = scene.depth.iter().map(|d| d[0]).fold(f64::INFINITY, f64::min);
        let max = scene.depth.iter().map(|d| d[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= 1.0 && max <= 300.0 && min < max);
    }

    #[test]
    fn constant_import_gives_constant_scene() {
        let map = DepthMap {
            n_rows: 4,
            n_cols: 5,
            values: vec![42.0; 20],
        };
        let kind = SceneKind::Import {
            depth: map,
            reflectance: None,
        };
        let scene = make_scene(&kind, default_dims(4, 5), &SceneParams::default()).unwrap();
        assert!(scene.depth.iter().all(|d| *d == [42.0, 441.0]));
    }

    #[test]
    fn overlapping_bands_rejected() {
        let params = SceneParams {
            offset: 200.0,
            ..SceneParams::default()
        };
        assert!(matches!(
            make_scene(&SceneKind::Ramp, default_dims(4, 4), &params),
            Err(Error::InvalidLayout(_))
        ));
        // canonical layout needs T >= 701
        assert!(matches!(
            make_scene(&SceneKind::Ramp, Dims::new(4, 4, 600), &SceneParams::default()),
            Err(Error::InvalidLayout(_))
        ));
    }

    #[test]
    fn calibration_hits_both_targets() {
        let mut scene = make_scene(&SceneKind::SphereOnPlane, default_dims(16, 16), &SceneParams::default()).unwrap();
        scene.background.iter_mut().enumerate().for_each(|(i, b)| *b = 0.001 * (1 + i % 3) as f64);
        for (ppp, sbr) in [(64.0, 64.0), (64.0, 4.0), (4.0, 64.0), (4.0, 4.0), (1.0, 0.25)] {
            let cal = calibrate_ppp_sbr(&scene, ppp, sbr).unwrap();
            let (p, s) = scene_ppp_sbr(&cal);
            assert!((p - ppp).abs() < 1e-9 * ppp.max(1.0));
            assert!((s - sbr).abs() < 1e-9 * sbr.max(1.0));
            // idempotent
            let again = calibrate_ppp_sbr(&cal, ppp, sbr).unwrap();
            for (a, b) in again.refl.iter().zip(&cal.refl) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            for (a, b) in again.background.iter().zip(&cal.background) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibration_one_pixel_closed_form() {
        // r = 4, b = 0: solve r' = PPP*SBR/(1+SBR), b' T = PPP/(1+SBR)
        let scene = SceneSpec {
            dims: Dims::new(1, 1, 100),
            depth: vec![[10.0, 60.0]],
            refl: vec![[1.0, 3.0]],
            background: vec![0.0],
        };
        let cal = calibrate_ppp_sbr(&scene, 10.0, 4.0).unwrap();
        assert!((cal.refl[0][0] + cal.refl[0][1] - 8.0).abs() < 1e-12);
        assert!((cal.refl[0][0] - 2.0).abs() < 1e-12);
        assert!((cal.background[0] * 100.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_rejects_degenerate_targets() {
        let scene = SceneSpec {
            dims: Dims::new(1, 1, 100),
            depth: vec![[10.0, 60.0]],
            refl: vec![[2.0, 2.0]],
            background: vec![0.0],
        };
        for (p, s) in [(4.0, f64::INFINITY), (4.0, 0.0), (0.0, 4.0), (-1.0, 4.0)] {
            assert!(matches!(calibrate_ppp_sbr(&scene, p, s), Err(Error::InvalidTarget(_))));
        }
        let dark = SceneSpec {
            refl: vec![[0.0, 0.0]],
            ..scene
        };
        assert!(calibrate_ppp_sbr(&dark, 4.0, 4.0).is_err());
    }

    #[test]
    fn zero_intensity_samples_zero() {
        let dims = Dims::new(3, 3, 32);
        let s = IntensityCube {
            dims,
            values: vec![0.0; 9 * 32],
        };
        assert!(sample_intensity(&s, 1).counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        // 1e5 cells at lambda = 5: sd of the mean is sqrt(5/1e5) = 0.00707,
        // 4 sigma = 0.028, inside the 0.07 tolerance.
        let dims = Dims::new(100, 100, 10);
        let s = IntensityCube {
            dims,
            values: vec![5.0; 100_000],
        };
        let h = sample_intensity(&s, 2024);
        let mean = h.counts.iter().map(|&c| c as f64).sum::<f64>() / 1e5;
        assert!((mean - 5.0).abs() < 0.07, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let scene = make_scene(&SceneKind::Ramp, default_dims(6, 6), &SceneParams::default()).unwrap();
        let scene = calibrate_ppp_sbr(&scene, 8.0, 2.0).unwrap();
        let irf = Irf::gaussian(2.0).unwrap();
        let a = sample_histogram(&scene, &irf, 7).unwrap();
        let b = sample_histogram(&scene, &irf, 7).unwrap();
        let c = sample_histogram(&scene, &irf, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_ppp_converges() {
        let scene = make_scene(&SceneKind::Step, default_dims(32, 32), &SceneParams::default()).unwrap();
        let irf = Irf::gaussian(2.0).unwrap();
        for (ppp, sbr) in [(4.0, 4.0), (64.0, 1.0)] {
            let cal = calibrate_ppp_sbr(&scene, ppp, sbr).unwrap();
            let h = sample_histogram(&cal, &irf, 99).unwrap();
            let bound = 4.0 * (ppp / 1024.0f64).sqrt();
            assert!((h.empirical_ppp() - ppp).abs() <= bound);
        }
    }

    #[test]
    fn poisson_chi_square_goodness_of_fit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};
        for (i, lambda) in [0.1f64, 1.0, 10.0, 100.0].into_iter().enumerate() {
            let mut rng = pixel_rng(1234, i as u64);
            let draws = 200_000usize;
            let dist = Poisson::new(lambda).unwrap();
            // bins with expected count >= 20, tails pooled
            let lo = (lambda - 6.0 * lambda.sqrt() - 2.0).max(0.0) as u64;
            let hi = (lambda + 6.0 * lambda.sqrt() + 4.0) as u64;
            let mut edges: Vec<u64> = Vec::new();
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += dist.pmf(k) * draws as f64;
                if acc >= 20.0 {
                    edges.push(k);
                    acc = 0.0;
                }
            }
            let mut observed = vec![0f64; edges.len()];
            for _ in 0..draws {
                let k = poisson(&mut rng, lambda);
                let idx = edges.partition_point(|&e| e < k).min(edges.len() - 1);
                observed[idx] += 1.0;
            }
            let mut expected = vec![0f64; edges.len()];
            let mut prev_cdf = 0.0;
            for (j, &e) in edges.iter().enumerate() {
                let cdf = if j + 1 == edges.len() { 1.0 } else { (0..=e).map(|k| dist.pmf(k)).sum() };
                expected[j] = (cdf - prev_cdf) * draws as f64;
                prev_cdf = cdf;
            }
            let chi2: f64 = observed
                .iter()
                .zip(&expected)
                .map(|(o, e)| (o - e) * (o - e) / e)
                .sum();
            let dof = (edges.len() - 1) as f64;
            let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
            assert!(p > 0.001, "lambda {lambda}: chi2 {chi2} dof {dof} p {p}");
        }
    }
}
