//! Multiscale dual-peak initialization.
//!
//! The input cube is box-summed spatially at several window sizes. Each scale
//! is matched-filtered with the log-IRF, the strongest peak is taken, the
//! counts around it are cancelled and the residual gives the second peak.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dims, HistogramCube, Irf, TARGETS};

/// Floor applied to IRF values before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Depth value stored for entries without a usable estimate.
pub const INVALID_DEPTH: f64 = -1.0;

pub const DEFAULT_KERNELS: [usize; 4] = [1, 3, 7, 13];

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleConfig {
    /// Odd, strictly increasing window sizes; the first must be 1.
    pub kernel_sizes: Vec<usize>,
    /// Bins zeroed on either side of the first peak. `None` means `ceil(3 sigma)`.
    pub cancel_radius: Option<usize>,
    /// Parabolic sub-bin refinement of each argmax.
    pub subbin: bool,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: DEFAULT_KERNELS.to_vec(),
            cancel_radius: None,
            subbin: false,
        }
    }
}

impl MultiscaleConfig {
    pub fn with_scales(scales: usize) -> Self {
        // 1, 3, 7, 13, 21, ... (gaps grow by 2)
        let mut sizes = vec![1];
        let mut step = 2;
        while sizes.len() < scales {
            let next = sizes.last().unwrap() + step;
            sizes.push(next);
            step += 2;
        }
        Self {
            kernel_sizes: sizes,
            ..Self::default()
        }
    }

    pub fn radius(&self, irf: &Irf) -> usize {
        self.cancel_radius
            .unwrap_or_else(|| (3.0 * irf.sigma_bins()).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::Config("no kernel sizes".into()));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| **k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} is even")));
        }
        if self.kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("kernel sizes must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleHistogram {
    pub kernel_size: usize,
    pub cube: HistogramCube,
    /// `rbar_n = sum_t y_{n,t}` at this scale.
    pub totals: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleHistograms {
    pub scales: Vec<ScaleHistogram>,
}

impl MultiscaleHistograms {
    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.kernel_size).collect()
    }

    /// Per-scale photon totals, `totals[l][n]`.
    pub fn totals(&self) -> Vec<Vec<u64>> {
        self.scales.iter().map(|s| s.totals.clone()).collect()
    }
}

/// Symmetric ("reflect") boundary: `... c b a | a b c ... x y z | z y x ...`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Box-sums every time bin over `k x k` spatial windows with reflect padding.
pub fn box_sum(hist: &HistogramCube, kernel: usize) -> Result<HistogramCube> {
    if kernel.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size {kernel} is even")));
    }
    if kernel == 1 {
        return Ok(hist.clone());
    }
    let dims = hist.dims;
    let (rows, cols, t_len) = (dims.n_rows, dims.n_cols, dims.bins);
    let half = (kernel / 2) as i64;

    // horizontal pass
    let mut horizontal = vec![0u32; hist.counts.len()];
    horizontal
        .par_chunks_mut(cols * t_len)
        .enumerate()
        .for_each(|(r, row_out)| {
            for c in 0..cols {
                let out = &mut row_out[c * t_len..(c + 1) * t_len];
                for dc in -half..=half {
                    let src = dims.pixel_index(r, reflect_index(c as i64 + dc, cols));
                    for (o, &y) in out.iter_mut().zip(hist.pixel(src)) {
                        *o += y;
                    }
                }
            }
        });

    // vertical pass
    let mut counts = vec![0u32; hist.counts.len()];
    counts
        .par_chunks_mut(cols * t_len)
        .enumerate()
        .for_each(|(r, row_out)| {
            for dr in -half..=half {
                let src_row = reflect_index(r as i64 + dr, rows);
                let src = &horizontal[src_row * cols * t_len..(src_row + 1) * cols * t_len];
                for (o, &y) in row_out.iter_mut().zip(src) {
                    *o += y;
                }
            }
        });
    Ok(HistogramCube { dims, counts })
}

pub fn lowpass_pyramid(hist: &HistogramCube, kernel_sizes: &[usize]) -> Result<MultiscaleHistograms> {
    if let Some(k) = kernel_sizes.iter().find(|k| **k % 2 == 0) {
        return Err(Error::Config(format!("kernel size {k} is even")));
    }
    let scales = kernel_sizes
        .iter()
        .map(|&k| {
            let cube = box_sum(hist, k)?;
            let totals = (0..cube.dims.pixels()).map(|n| cube.total(n)).collect();
            Ok(ScaleHistogram {
                kernel_size: k,
                cube,
                totals,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiscaleHistograms { scales })
}

/// Log-IRF matched filter of a single histogram:
/// `c[d] = sum_t y_t ln max(g(t - d), floor)` for every shift `d in [0, T)`.
///
/// Shifts whose pulse is clipped by either end of the histogram also get
/// `-Y(d) ln m(d)`, with `m(d)` the fraction of the pulse inside the range and
/// `Y(d)` the photons under the pulse window, so that they remain
/// free-amplitude maximum-likelihood scores.
pub fn correlate_pixel(counts: &[u32], irf: &Irf, out: &mut [f64]) {
    let t_len = counts.len();
    debug_assert_eq!(out.len(), t_len);
    let floor_log = LOG_FLOOR.ln();
    let hw = irf.half_width_bins() as i64;
    let gain: Vec<f64> = irf
        .table()
        .iter()
        .map(|&g| g.max(LOG_FLOOR).ln() - floor_log)
        .collect();
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    out.fill(floor_log * total as f64);
    for (t, &y) in counts.iter().enumerate() {
        if y == 0 {
            continue;
        }
        let y = y as f64;
        let t = t as i64;
        let lo = (t - hw).max(0);
        let hi = (t + hw).min(t_len as i64 - 1);
        for d in lo..=hi {
            // offset t - d in [-hw, hw]
            out[d as usize] += y * gain[(t - d + hw) as usize];
        }
    }
    let mass: f64 = irf.table().iter().sum();
    let edge = (hw as usize).min(t_len);
    for d in (0..edge).chain(t_len.saturating_sub(edge).max(edge)..t_len) {
        let inside: f64 = (-hw..=hw)
            .filter(|o| (0..t_len as i64).contains(&(d as i64 + o)))
            .map(|o| irf.table()[(o + hw) as usize])
            .sum();
        if inside < mass {
            let lo = (d as i64 - hw).max(0) as usize;
            let hi = (d as i64 + hw).min(t_len as i64 - 1) as usize;
            let local: u64 = counts[lo..=hi].iter().map(|&c| c as u64).sum();
            out[d] -= local as f64 * (inside / mass).ln();
        }
    }
}

/// Matched filter applied to every pixel of a cube, pixel-major.
pub fn cross_correlate(hist: &HistogramCube, irf: &Irf) -> Vec<f64> {
    let t_len = hist.dims.bins;
    let mut out = vec![0.0; hist.counts.len()];
    out.par_chunks_mut(t_len)
        .enumerate()
        .for_each(|(n, row)| correlate_pixel(hist.pixel(n), irf, row));
    out
}

/// Argmax with ties resolved to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn refine(values: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= values.len() {
        return i as f64;
    }
    let (a, b, c) = (values[i - 1], values[i], values[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom < 0.0 {
        let delta = 0.5 * (a - c) / denom;
        i as f64 + delta.clamp(-0.5, 0.5)
    } else {
        i as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPeak {
    /// Ascending depths; `INVALID_DEPTH` when the pixel is empty.
    pub depth: [f64; TARGETS],
    /// Photons within the cancellation radius of each peak.
    pub strength: [f64; TARGETS],
    pub valid: [bool; TARGETS],
}

impl DualPeak {
    fn empty() -> Self {
        Self {
            depth: [INVALID_DEPTH; TARGETS],
            strength: [0.0; TARGETS],
            valid: [false; TARGETS],
        }
    }
}

/// Sequential two-peak search on one histogram.
///
/// An empty histogram yields two invalid depths. If nothing is left after
/// cancelling the first peak, the second depth copies the first and is
/// flagged invalid.
pub fn extract_dual_peaks(counts: &[u32], irf: &Irf, radius: usize, subbin: bool) -> DualPeak {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return DualPeak::empty();
    }
    let t_len = counts.len();
    let mut xcorr = vec![0.0; t_len];
    correlate_pixel(counts, irf, &mut xcorr);
    let first_bin = argmax(&xcorr);
    let first = if subbin { refine(&xcorr, first_bin) } else { first_bin as f64 };

    let lo = first_bin.saturating_sub(radius);
    let hi = (first_bin + radius).min(t_len - 1);
    let first_strength: u64 = counts[lo..=hi].iter().map(|&c| c as u64).sum();
    let mut residual = counts.to_vec();
    residual[lo..=hi].fill(0);
    let remaining = total - first_strength;
    if remaining == 0 {
        return DualPeak {
            depth: [first, first],
            strength: [first_strength as f64, 0.0],
            valid: [true, false],
        };
    }
    correlate_pixel(&residual, irf, &mut xcorr);
    let second_bin = argmax(&xcorr);
    let second = if subbin { refine(&xcorr, second_bin) } else { second_bin as f64 };
    let lo2 = second_bin.saturating_sub(radius);
    let hi2 = (second_bin + radius).min(t_len - 1);
    let second_strength: u64 = residual[lo2..=hi2].iter().map(|&c| c as u64).sum();

    if first <= second {
        DualPeak {
            depth: [first, second],
            strength: [first_strength as f64, second_strength as f64],
            valid: [true, true],
        }
    } else {
        DualPeak {
            depth: [second, first],
            strength: [second_strength as f64, first_strength as f64],
            valid: [true, true],
        }
    }
}

/// ML depths of every pixel at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleDepths {
    pub dims: Dims,
    pub kernel_sizes: Vec<usize>,
    /// `depth[(n * L + l) * K + k]`, ascending in `k`.
    pub depth: Vec<f64>,
    /// `sigma^2 / rbar^(l)_n`; infinite for empty pixels.
    pub sigma_bar2: Vec<f64>,
    /// Per `(n, l, k)`.
    pub valid: Vec<bool>,
    /// Per `(n, l)` photon totals.
    pub totals: Vec<u64>,
}

impl MultiscaleDepths {
    pub fn scales(&self) -> usize {
        self.kernel_sizes.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, l: usize, k: usize) -> usize {
        (n * self.scales() + l) * TARGETS + k
    }

    pub fn get(&self, n: usize, l: usize, k: usize) -> f64 {
        self.depth[self.idx(n, l, k)]
    }

    pub fn is_valid(&self, n: usize, l: usize, k: usize) -> bool {
        self.valid[self.idx(n, l, k)]
    }

    pub fn sigma_bar2(&self, n: usize, l: usize) -> f64 {
        self.sigma_bar2[n * self.scales() + l]
    }

    pub fn total(&self, n: usize, l: usize) -> u64 {
        self.totals[n * self.scales() + l]
    }

    /// Depth map of one scale (`[n][k]`), invalid entries kept as sentinels.
    pub fn scale_map(&self, l: usize) -> Vec<[f64; TARGETS]> {
        (0..self.dims.pixels())
            .map(|n| [self.get(n, l, 0), self.get(n, l, 1)])
            .collect()
    }

    /// Adds `c` to every valid depth.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        for (d, v) in out.depth.iter_mut().zip(&self.valid) {
            if *v {
                *d += c;
            }
        }
        out
    }

    /// `n, l, k, depth_bins` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,l,k,depth_bins,valid\n");
        for n in 0..self.dims.pixels() {
            for l in 0..self.scales() {
                for k in 0..TARGETS {
                    s.push_str(&format!(
                        "{n},{},{},{},{}\n",
                        l + 1,
                        k + 1,
                        self.get(n, l, k),
                        self.is_valid(n, l, k) as u8
                    ));
                }
            }
        }
        s
    }
}

/// Dual peaks of every pixel of an already built pyramid.
pub fn depths_from_pyramid(pyramid: &MultiscaleHistograms, irf: &Irf, config: &MultiscaleConfig) -> MultiscaleDepths {
    let dims = pyramid.scales[0].cube.dims;
    let n_scales = pyramid.scales.len();
    let radius = config.radius(irf);
    let sigma2 = irf.sigma_bins() * irf.sigma_bins();
    let per_pixel: Vec<Vec<(DualPeak, u64)>> = (0..dims.pixels())
        .into_par_iter()
        .map(|n| {
            pyramid
                .scales
                .iter()
                .map(|s| (extract_dual_peaks(s.cube.pixel(n), irf, radius, config.subbin), s.totals[n]))
                .collect()
        })
        .collect();

    let mut depth = Vec::with_capacity(dims.pixels() * n_scales * TARGETS);
    let mut valid = Vec::with_capacity(depth.capacity());
    let mut sigma_bar2 = Vec::with_capacity(dims.pixels() * n_scales);
    let mut totals = Vec::with_capacity(dims.pixels() * n_scales);
    for pixel in per_pixel {
        for (peak, total) in pixel {
            depth.extend_from_slice(&peak.depth);
            valid.extend_from_slice(&peak.valid);
            totals.push(total);
            sigma_bar2.push(if total > 0 { sigma2 / total as f64 } else { f64::INFINITY });
        }
    }
    MultiscaleDepths {
        dims: Dims {
            scales: n_scales,
            ..dims
        },
        kernel_sizes: pyramid.kernel_sizes(),
        depth,
        sigma_bar2,
        valid,
        totals,
    }
}

/// Pyramid plus dual-peak extraction in one call.
pub fn multiscale_depths(
    hist: &HistogramCube,
    irf: &Irf,
    config: &MultiscaleConfig,
) -> Result<(MultiscaleHistograms, MultiscaleDepths)> {
    config.validate()?;
    let pyramid = lowpass_pyramid(hist, &config.kernel_sizes)?;
    let depths = depths_from_pyramid(&pyramid, irf, config);
    Ok((pyramid, depths))
}

/// Network input: `(x, y, d^(1)_1, d^(1)_2, ..., d^(L)_2)` per pixel with
/// coordinates and depths scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub dims: Dims,
    pub scales: usize,
    /// Row-major `pixels x width`.
    pub values: Vec<f64>,
    /// Per `(n, l, k)`.
    pub valid: Vec<bool>,
}

impl PixelFeatures {
    pub fn width(&self) -> usize {
        2 + self.scales * TARGETS
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.width();
        &self.values[n * w..(n + 1) * w]
    }

    /// Depth part of the features in bins, `[(n * L + l) * K + k]`.
    pub fn depths_bins(&self) -> Vec<f64> {
        let w = self.width();
        let t = self.dims.bins as f64;
        self.values
            .chunks(w)
            .flat_map(|row| row[2..].iter().map(move |v| v * t))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y");
        for l in 1..=self.scales {
            for k in 1..=TARGETS {
                s.push_str(&format!(",d{l}_{k}"));
            }
        }
        s.push('\n');
        for row in self.values.chunks(self.width()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Builds the per-pixel feature vectors.
///
/// Entries without an estimate are filled with the same surface's depth from
/// the nearest valid coarser scale (else finer scale, else 0); their mask
/// bit stays false.
pub fn assemble_features(md: &MultiscaleDepths, dims: Dims) -> Result<PixelFeatures> {
    if md.dims.pixels() != dims.pixels() {
        return Err(Error::Shape("multiscale depths and dims disagree".into()));
    }
    let scales = md.scales();
    let width = 2 + scales * TARGETS;
    let t = dims.bins as f64;
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut values = Vec::with_capacity(dims.pixels() * width);
    for n in 0..dims.pixels() {
        let (r, c) = dims.row_col(n);
        values.push(coord(c, dims.n_cols));
        values.push(coord(r, dims.n_rows));
        for l in 0..scales {
            for k in 0..TARGETS {
                let d = if md.is_valid(n, l, k) {
                    md.get(n, l, k)
                } else {
                    fill_value(md, n, l, k)
                };
                values.push(d / t);
            }
        }
    }
    Ok(PixelFeatures {
        dims,
        scales,
        values,
        valid: md.valid.clone(),
    })
}

fn fill_value(md: &MultiscaleDepths, n: usize, l: usize, k: usize) -> f64 {
    let scales = md.scales();
    let coarser = (l + 1..scales).find(|&j| md.is_valid(n, j, k));
    let finer = (0..l).rev().find(|&j| md.is_valid(n, j, k));
    match coarser.or(finer) {
        Some(j) => md.get(n, j, k),
        None => {
            // degenerate second peak: fall back to the first surface
            if k == 1 && md.is_valid(n, l, 0) {
                md.get(n, l, 0)
            } else {
                0.0
            }
        }
    }
}
