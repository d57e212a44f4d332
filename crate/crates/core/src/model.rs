//! Shared domain types, the Gaussian instrument response and the Poisson
//! observation model.
//!
//! Depths are real-valued time-bin positions everywhere in the crate; meters
//! only appear at export time through [`Dims::bin_width_m`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of surfaces reconstructed per pixel.
pub const TARGETS: usize = 2;

/// Default number of spatial scales in the histogram pyramid.
pub const DEFAULT_SCALES: usize = 4;

/// 1024 bins cover 3.072 m, i.e. 3 mm per bin.
pub const DEFAULT_BIN_WIDTH_M: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Number of time bins per histogram.
    pub bins: usize,
    /// Number of spatial scales.
    pub scales: usize,
    pub bin_width_m: f64,
}

impl Dims {
    pub fn new(n_rows: usize, n_cols: usize, bins: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            bins,
            scales: DEFAULT_SCALES,
            bin_width_m: DEFAULT_BIN_WIDTH_M,
        }
    }

    pub fn with_scales(mut self, scales: usize) -> Self {
        self.scales = scales;
        self
    }

    pub fn pixels(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn targets(&self) -> usize {
        TARGETS
    }

    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn row_col(&self, pixel: usize) -> (usize, usize) {
        (pixel / self.n_cols, pixel % self.n_cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Config("image must have at least one pixel".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("at least one time bin is required".into()));
        }
        if self.scales < 2 {
            return Err(Error::Config(format!("need at least 2 scales, got {}", self.scales)));
        }
        if !(self.bin_width_m > 0.0 && self.bin_width_m.is_finite()) {
            return Err(Error::Config(format!("bin width must be positive, got {}", self.bin_width_m)));
        }
        Ok(())
    }
}

/// Gaussian impulse response truncated at four standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Irf {
    sigma_bins: f64,
    half_width_bins: usize,
    /// Normalized values at integer offsets `-half_width..=half_width`.
    table: Vec<f64>,
}

impl Irf {
    pub fn gaussian(sigma_bins: f64) -> Result<Self> {
        if !(sigma_bins > 0.0 && sigma_bins.is_finite()) {
            return Err(Error::Config(format!("IRF sigma must be positive, got {sigma_bins}")));
        }
        let half_width_bins = (4.0 * sigma_bins).ceil() as usize;
        let mut table: Vec<f64> = (0..=2 * half_width_bins)
            .map(|i| {
                let offset = i as f64 - half_width_bins as f64;
                gauss_kernel(offset, sigma_bins)
            })
            .collect();
        let total: f64 = table.iter().sum();
        table.iter_mut().for_each(|v| *v /= total);
        Ok(Self {
            sigma_bins,
            half_width_bins,
            table,
        })
    }

    pub fn sigma_bins(&self) -> f64 {
        self.sigma_bins
    }

    pub fn half_width_bins(&self) -> usize {
        self.half_width_bins
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// `g(offset)` for an integer offset from an integer center, zero outside
    /// the truncated support.
    pub fn at_offset(&self, offset: i64) -> f64 {
        let hw = self.half_width_bins as i64;
        if offset.abs() > hw {
            0.0
        } else {
            self.table[(offset + hw) as usize]
        }
    }

    /// The pulse centered at a real-valued depth, restricted to `[0, bins)`
    /// and renormalized to unit sum over the retained bins.
    ///
    /// Returns the first bin index and the weights. The weights are empty if
    /// the support lies entirely outside the histogram.
    pub fn pulse(&self, center: f64, bins: usize) -> (usize, Vec<f64>) {
        let hw = self.half_width_bins as f64;
        let lo = (center - hw).ceil().max(0.0);
        let hi = (center + hw).floor().min(bins as f64 - 1.0);
        if hi < lo {
            return (0, Vec::new());
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let mut weights: Vec<f64> = (lo..=hi)
            .map(|t| gauss_kernel(t as f64 - center, self.sigma_bins))
            .collect();
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        (lo, weights)
    }
}

fn gauss_kernel(offset: f64, sigma: f64) -> f64 {
    (-(offset * offset) / (2.0 * sigma * sigma)).exp()
}

/// Ground truth for one acquisition: two depths, two reflectivities and a
/// background level per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: Dims,
    /// Depth in bins, `depth[n][0] <= depth[n][1]`.
    pub depth: Vec<[f64; TARGETS]>,
    /// Expected signal photons per surface.
    pub refl: Vec<[f64; TARGETS]>,
    /// Background photons per bin.
    pub background: Vec<f64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let n = self.dims.pixels();
        if self.depth.len() != n || self.refl.len() != n || self.background.len() != n {
            return Err(Error::Shape(format!(
                "scene arrays ({}, {}, {}) do not match {} pixels",
                self.depth.len(),
                self.refl.len(),
                self.background.len(),
                n
            )));
        }
        let t_max = self.dims.bins as f64;
        for (i, ((d, r), b)) in self.depth.iter().zip(&self.refl).zip(&self.background).enumerate() {
            if d[0] > d[1] {
                return Err(Error::InvalidLayout(format!("pixel {i}: depths not sorted ({}, {})", d[0], d[1])));
            }
            if d.iter().any(|&v| !(0.0..t_max).contains(&v)) {
                return Err(Error::InvalidLayout(format!("pixel {i}: depth outside [0, {t_max})")));
            }
            if r.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || !(*b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidLayout(format!("pixel {i}: negative or non-finite photon rate")));
            }
        }
        Ok(())
    }

    /// Total signal photons `r_n = sum_k r_{n,k}` of a pixel.
    pub fn signal(&self, pixel: usize) -> f64 {
        self.refl[pixel].iter().sum()
    }
}

/// Expected photon counts `s_{n,t}`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCube {
    pub dims: Dims,
    pub values: Vec<f64>,
}

impl IntensityCube {
    pub fn pixel(&self, n: usize) -> &[f64] {
        let t = self.dims.bins;
        &self.values[n * t..(n + 1) * t]
    }
}

/// Photon counts `y_{n,t}`, pixel-major (`n * bins + t`), pixels row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramCube {
    pub dims: Dims,
    pub counts: Vec<u32>,
}

impl HistogramCube {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            counts: vec![0; dims.pixels() * dims.bins],
        }
    }

    pub fn from_counts(dims: Dims, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != dims.pixels() * dims.bins {
            return Err(Error::Shape(format!(
                "{} counts for a {}x{}x{} cube",
                counts.len(),
                dims.n_rows,
                dims.n_cols,
                dims.bins
            )));
        }
        Ok(Self { dims, counts })
    }

    pub fn pixel(&self, n: usize) -> &[u32] {
        let t = self.dims.bins;
        &self.counts[n * t..(n + 1) * t]
    }

    pub fn pixel_mut(&mut self, n: usize) -> &mut [u32] {
        let t = self.dims.bins;
        &mut self.counts[n * t..(n + 1) * t]
    }

    pub fn total(&self, n: usize) -> u64 {
        self.pixel(n).iter().map(|&c| c as u64).sum()
    }

    /// Mean photons per pixel of the observed cube.
    pub fn empirical_ppp(&self) -> f64 {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        total as f64 / self.dims.pixels() as f64
    }
}

/// `s_{n,t} = sum_k r_{n,k} g(t - d_{n,k}) + b_n`.
pub fn forward_intensity(scene: &SceneSpec, irf: &Irf) -> Result<IntensityCube> {
    scene.validate()?;
    let dims = scene.dims;
    let t_len = dims.bins;
    if irf.table().len() > t_len {
        return Err(Error::Shape(format!(
            "IRF support of {} bins exceeds the {} bin histogram",
            irf.table().len(),
            t_len
        )));
    }
    let mut values = vec![0.0; dims.pixels() * t_len];
    for (n, pixel) in values.chunks_mut(t_len).enumerate() {
        pixel.fill(scene.background[n]);
        for k in 0..TARGETS {
            let r = scene.refl[n][k];
            if r == 0.0 {
                continue;
            }
            let (start, weights) = irf.pulse(scene.depth[n][k], t_len);
            for (slot, w) in pixel[start..].iter_mut().zip(&weights) {
                *slot += r * w;
            }
        }
    }
    Ok(IntensityCube { dims, values })
}

/// Poisson log-likelihood `sum_{n,t} y ln s - s - ln y!`.
pub fn log_likelihood(hist: &HistogramCube, scene: &SceneSpec, irf: &Irf) -> Result<f64> {
    if hist.dims.pixels() != scene.dims.pixels() || hist.dims.bins != scene.dims.bins {
        return Err(Error::Shape("histogram and scene dimensions differ".into()));
    }
    let intensity = forward_intensity(scene, irf)?;
    log_likelihood_of_intensity(hist, &intensity)
}

pub fn log_likelihood_of_intensity(hist: &HistogramCube, intensity: &IntensityCube) -> Result<f64> {
    if hist.counts.len() != intensity.values.len() {
        return Err(Error::Shape("histogram and intensity sizes differ".into()));
    }
    let t_len = hist.dims.bins;
    let mut total = 0.0;
    for (i, (&y, &s)) in hist.counts.iter().zip(&intensity.values).enumerate() {
        if y == 0 {
            total -= s;
            continue;
        }
        if s <= 0.0 {
            return Err(Error::ImpossibleObservation {
                pixel: i / t_len,
                bin: i % t_len,
                count: y,
            });
        }
        total += y as f64 * s.ln() - s - ln_factorial(y as u64);
    }
    Ok(total)
}

/// `ln(k!)`, exact summation for small `k` and a Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        return 0.0;
    }
    if k < 64 {
        return (2..=k).map(|i| (i as f64).ln()).sum();
    }
    let x = k as f64 + 1.0;
    // ln Gamma(x), Stirling with three correction terms
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}
