//! Coordinate-descent MAP solver over the multiscale dual-peak depths.
//!
//! The latent depth `x` is coupled to the multiscale depths `D` of the
//! neighbouring pixels through Laplace terms with scale `eps / w`. One sweep
//! alternates a weighted-median squeeze (exact minimization in `x`) with a
//! generalized soft-thresholding expansion (exact minimization in `D`); the
//! uncertainty `eps` is the inverse-gamma mode computed at the end.
//!
//! Both updates read only the previous iterate, so each sweep is Jacobi-style
//! and runs in parallel over pixels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dims, HistogramCube, Irf, TARGETS};
use crate::multiscale::{multiscale_depths, MultiscaleConfig, MultiscaleDepths};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Inverse-gamma shape hyperparameter.
    pub alpha_d: f64,
    /// Inverse-gamma scale hyperparameter.
    pub beta_d: f64,
    pub n_iters: usize,
    /// Stencil radius; `1` gives the 3x3 neighbourhood.
    pub radius: usize,
    /// Spatial bandwidth of the guidance weights, in pixels.
    pub rho: f64,
    pub eps_floor: f64,
    /// Uncertainty used during the iterations.
    pub eps_init: f64,
    /// Relative objective change that stops the iterations.
    pub rel_tol: f64,
    pub multiscale: MultiscaleConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha_d: 0.0,
            beta_d: 0.0,
            n_iters: 50,
            radius: 1,
            rho: 1.0,
            eps_floor: 1e-3,
            eps_init: 1.0,
            rel_tol: 1e-6,
            multiscale: MultiscaleConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("n_iters must be at least 1".into()));
        }
        if !(self.alpha_d >= 0.0 && self.beta_d >= 0.0) {
            return Err(Error::Config("alpha_d and beta_d must be non-negative".into()));
        }
        if !(self.eps_floor > 0.0 && self.eps_init > 0.0 && self.rho > 0.0) {
            return Err(Error::Config("eps_floor, eps_init and rho must be positive".into()));
        }
        self.multiscale.validate()
    }

    /// Stencil size `|nu_n|` for interior pixels.
    pub fn neighbourhood(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }
}

/// Square stencil of pixel offsets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub radius: usize,
    offsets: Vec<(i64, i64)>,
}

impl Stencil {
    pub fn new(radius: usize) -> Self {
        let r = radius as i64;
        let offsets = (-r..=r).flat_map(|dr| (-r..=r).map(move |dc| (dr, dc))).collect();
        Self { radius, offsets }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, slot: usize) -> (i64, i64) {
        self.offsets[slot]
    }

    /// Slot holding the negated offset.
    pub fn mirror(&self, slot: usize) -> usize {
        self.len() - 1 - slot
    }

    pub fn neighbour(&self, dims: &Dims, pixel: usize, slot: usize) -> Option<usize> {
        let (r, c) = dims.row_col(pixel);
        let (dr, dc) = self.offsets[slot];
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if nr < 0 || nc < 0 || nr >= dims.n_rows as i64 || nc >= dims.n_cols as i64 {
            None
        } else {
            Some(dims.pixel_index(nr as usize, nc as usize))
        }
    }

    /// Number of in-image stencil positions around `pixel`.
    pub fn count(&self, dims: &Dims, pixel: usize) -> usize {
        (0..self.len()).filter(|&s| self.neighbour(dims, pixel, s).is_some()).count()
    }
}

/// `w^(l)_{n', n, k}` stored at the center pixel `n` for every stencil slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceWeights {
    pub dims: Dims,
    pub scales: usize,
    pub stencil: Stencil,
    values: Vec<f64>,
}

impl GuidanceWeights {
    #[inline]
    fn idx(&self, center: usize, slot: usize, l: usize, k: usize) -> usize {
        ((center * self.stencil.len() + slot) * self.scales + l) * TARGETS + k
    }

    /// Weight of the neighbour at `slot` for the latent depth of `center`.
    pub fn get(&self, center: usize, slot: usize, l: usize, k: usize) -> f64 {
        self.values[self.idx(center, slot, l, k)]
    }

    pub fn set(&mut self, center: usize, slot: usize, l: usize, k: usize, w: f64) {
        let i = self.idx(center, slot, l, k);
        self.values[i] = w;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Latent depths `x[n][k]`, ascending per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDepthField {
    pub dims: Dims,
    pub x: Vec<[f64; TARGETS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub dims: Dims,
    pub eps: Vec<[f64; TARGETS]>,
}

impl UncertaintyMap {
    pub fn constant(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            eps: vec![[value; TARGETS]; dims.pixels()],
        }
    }
}

/// Median of the scale-1 photon totals, at least one photon.
pub fn reference_count(md: &MultiscaleDepths) -> f64 {
    let mut counts: Vec<u64> = (0..md.dims.pixels()).map(|n| md.total(n, 0)).collect();
    counts.sort_unstable();
    let m = counts.len();
    let median = if m % 2 == 1 {
        counts[m / 2] as f64
    } else {
        0.5 * (counts[m / 2 - 1] + counts[m / 2]) as f64
    };
    median.max(1.0)
}

/// Spatial Gaussian times photon confidence, zero on invalid neighbours:
/// `w = exp(-|n - n'|^2 / (2 rho^2)) * min(1, rbar^(l)_{n'} / rbar_ref)`.
pub fn compute_guidance_weights(md: &MultiscaleDepths, config: &SolverConfig) -> GuidanceWeights {
    let dims = md.dims;
    let scales = md.scales();
    let stencil = Stencil::new(config.radius);
    let r_ref = reference_count(md);
    let mut weights = GuidanceWeights {
        dims,
        scales,
        values: vec![0.0; dims.pixels() * stencil.len() * scales * TARGETS],
        stencil,
    };
    for n in 0..dims.pixels() {
        for slot in 0..weights.stencil.len() {
            let Some(src) = weights.stencil.neighbour(&dims, n, slot) else {
                continue;
            };
            let (dr, dc) = weights.stencil.offset(slot);
            let spatial = (-((dr * dr + dc * dc) as f64) / (2.0 * config.rho * config.rho)).exp();
            for l in 0..scales {
                let confidence = (md.total(src, l) as f64 / r_ref).min(1.0);
                for k in 0..TARGETS {
                    if md.is_valid(src, l, k) {
                        weights.set(n, slot, l, k, (spatial * confidence).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    weights
}

/// Lower weighted median: the smallest candidate where the cumulative weight
/// reaches half of the total. Non-positive weights are ignored.
pub fn weighted_median(candidates: &[(f64, f64)]) -> Option<f64> {
    let mut c: Vec<(f64, f64)> = candidates.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    if c.is_empty() {
        return None;
    }
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = c.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for &(v, w) in &c {
        acc += w;
        if 2.0 * acc >= total {
            return Some(v);
        }
    }
    c.last().map(|p| p.0)
}

/// Exact minimizer of `(d - center)^2 / (2 variance) + sum_j c_j |d - x_j|`.
///
/// With an infinite variance the data term vanishes and the result is the
/// lower weighted median of the breakpoints (or `center` when there are no
/// positive weights).
pub fn prox_weighted_l1(center: f64, variance: f64, terms: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = terms.iter().copied().filter(|&(_, c)| c > 0.0).collect();
    if pts.is_empty() {
        return center;
    }
    if !variance.is_finite() {
        return weighted_median(&pts).unwrap_or(center);
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // merge equal breakpoints
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (x, c) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += c,
            _ => merged.push((x, c)),
        }
    }
    let total: f64 = merged.iter().map(|p| p.1).sum();
    let mut left = 0.0;
    for (i, &(x, c)) in merged.iter().enumerate() {
        // open interval below x: slope of the L1 part is left - (total - left)
        let d = center - variance * (2.0 * left - total);
        let lower = if i == 0 { f64::NEG_INFINITY } else { merged[i - 1].0 };
        if d > lower && d < x {
            return d;
        }
        // subgradient at the breakpoint x contains zero
        let g_lo = (x - center) / variance + 2.0 * left - total;
        let g_hi = (x - center) / variance + 2.0 * (left + c) - total;
        if g_lo <= 0.0 && g_hi >= 0.0 {
            return x;
        }
        left += c;
    }
    let d = center - variance * (2.0 * left - total);
    if d > merged.last().unwrap().0 {
        return d;
    }
    // only reachable through rounding at an interval boundary
    let objective = |d: f64| {
        (d - center).powi(2) / (2.0 * variance) + merged.iter().map(|(x, c)| c * (d - x).abs()).sum::<f64>()
    };
    merged
        .iter()
        .map(|p| p.0)
        .chain(std::iter::once(d))
        .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
        .unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeOutcome {
    pub field: LatentDepthField,
    /// Pixels where at least one surface had no positive weight and kept its
    /// previous value.
    pub flagged: Vec<bool>,
}

/// Squeeze step: `x_{n,k} = argmin_x sum_{l, n'} w |x - d^(l)_{n',k}|`.
///
/// When the two unconstrained minimizers come out in the wrong order, both
/// surfaces take the minimizer of their `eps`-weighted sum, which is the
/// exact solution under the ordering constraint `x_{n,0} <= x_{n,1}`.
pub fn weighted_median_update(
    d: &MultiscaleDepths,
    w: &GuidanceWeights,
    eps: &UncertaintyMap,
    previous: &LatentDepthField,
) -> SqueezeOutcome {
    let dims = d.dims;
    let scales = d.scales();
    let stencil = &w.stencil;
    let results: Vec<([f64; TARGETS], bool)> = (0..dims.pixels())
        .into_par_iter()
        .map(|n| {
            let mut cands: [Vec<(f64, f64)>; TARGETS] = Default::default();
            for slot in 0..stencil.len() {
                let Some(src) = stencil.neighbour(&dims, n, slot) else {
                    continue;
                };
                for l in 0..scales {
                    for (k, list) in cands.iter_mut().enumerate() {
                        let wt = w.get(n, slot, l, k);
                        if wt > 0.0 {
                            list.push((d.get(src, l, k), wt));
                        }
                    }
                }
            }
            let solved = [weighted_median(&cands[0]), weighted_median(&cands[1])];
            let prev = previous.x[n];
            let flagged = solved.iter().any(Option::is_none);
            let x = match solved {
                [Some(a), Some(b)] if a > b => {
                    let merged: Vec<(f64, f64)> = cands[0]
                        .iter()
                        .map(|&(v, wt)| (v, wt / eps.eps[n][0]))
                        .chain(cands[1].iter().map(|&(v, wt)| (v, wt / eps.eps[n][1])))
                        .collect();
                    let m = weighted_median(&merged).unwrap();
                    [m, m]
                }
                [Some(a), Some(b)] => [a, b],
                [Some(a), None] => [a, prev[1].max(a)],
                [None, Some(b)] => [prev[0].min(b), b],
                [None, None] => prev,
            };
            (x, flagged)
        })
        .collect();
    let (x, flagged) = results.into_iter().unzip();
    SqueezeOutcome {
        field: LatentDepthField { dims, x },
        flagged,
    }
}

/// Expansion step: per valid `(n, l, k)` the generalized soft-threshold
/// `argmin_d (d - dML)^2 / (2 sigma_bar^2) + sum_{n'} (w_{n -> n'} / eps_{n',k}) |d - x_{n',k}|`.
///
/// `d_ml` supplies the data term; invalid entries are returned unchanged.
pub fn soft_threshold_update(
    d_ml: &MultiscaleDepths,
    x: &LatentDepthField,
    eps: &UncertaintyMap,
    w: &GuidanceWeights,
) -> MultiscaleDepths {
    let dims = d_ml.dims;
    let scales = d_ml.scales();
    let stencil = &w.stencil;
    let per_pixel: Vec<Vec<f64>> = (0..dims.pixels())
        .into_par_iter()
        .map(|m| {
            let mut out = Vec::with_capacity(scales * TARGETS);
            let mut terms = Vec::with_capacity(stencil.len());
            for l in 0..scales {
                for k in 0..TARGETS {
                    let current = d_ml.get(m, l, k);
                    if !d_ml.is_valid(m, l, k) {
                        out.push(current);
                        continue;
                    }
                    terms.clear();
                    for slot in 0..stencil.len() {
                        // m is the neighbour at `mirror(slot)` of the centre n'
                        let Some(center) = stencil.neighbour(&dims, m, slot) else {
                            continue;
                        };
                        let wt = w.get(center, stencil.mirror(slot), l, k);
                        if wt > 0.0 {
                            terms.push((x.x[center][k], wt / eps.eps[center][k]));
                        }
                    }
                    out.push(prox_weighted_l1(current, d_ml.sigma_bar2(m, l), &terms));
                }
            }
            out
        })
        .collect();
    let mut updated = d_ml.clone();
    updated.depth = per_pixel.into_iter().flatten().collect();
    updated
}

/// `C(x_{n,k}) = sum_{l, n'} w |x_{n,k} - d^(l)_{n',k}|`.
pub fn coupling_cost(x: &LatentDepthField, d: &MultiscaleDepths, w: &GuidanceWeights, n: usize, k: usize) -> f64 {
    let stencil = &w.stencil;
    let mut cost = 0.0;
    for slot in 0..stencil.len() {
        let Some(src) = stencil.neighbour(&d.dims, n, slot) else {
            continue;
        };
        for l in 0..d.scales() {
            let wt = w.get(n, slot, l, k);
            if wt > 0.0 {
                cost += wt * (x.x[n][k] - d.get(src, l, k)).abs();
            }
        }
    }
    cost
}

/// Mode of the inverse-gamma conditional:
/// `eps = (C(x) + beta_d) / (L * N + alpha_d + 1)`, floored.
pub fn epsilon_update(x: &LatentDepthField, d: &MultiscaleDepths, w: &GuidanceWeights, config: &SolverConfig) -> UncertaintyMap {
    let dims = d.dims;
    let scales = d.scales() as f64;
    let eps = (0..dims.pixels())
        .into_par_iter()
        .map(|n| {
            let count = w.stencil.count(&dims, n) as f64;
            let mut e = [0.0; TARGETS];
            for (k, slot) in e.iter_mut().enumerate() {
                let c = coupling_cost(x, d, w, n, k);
                *slot = ((c + config.beta_d) / (scales * count + config.alpha_d + 1.0)).max(config.eps_floor);
            }
            e
        })
        .collect();
    UncertaintyMap { dims, eps }
}

/// Negative log-posterior up to an additive constant: quadratic data terms,
/// weighted-L1 couplings, Laplace normalizers and the inverse-gamma prior.
pub fn neg_log_posterior(
    x: &LatentDepthField,
    d: &MultiscaleDepths,
    eps: &UncertaintyMap,
    w: &GuidanceWeights,
    d_ml: &MultiscaleDepths,
    config: &SolverConfig,
) -> f64 {
    let dims = d.dims;
    let scales = d.scales();
    (0..dims.pixels())
        .into_par_iter()
        .map(|n| {
            let mut total = 0.0;
            for l in 0..scales {
                let var = d_ml.sigma_bar2(n, l);
                for k in 0..TARGETS {
                    if d_ml.is_valid(n, l, k) && var.is_finite() {
                        let r = d.get(n, l, k) - d_ml.get(n, l, k);
                        total += r * r / (2.0 * var);
                    }
                }
            }
            let terms = (scales * w.stencil.count(&dims, n)) as f64;
            for k in 0..TARGETS {
                let e = eps.eps[n][k];
                total += coupling_cost(x, d, w, n, k) / e;
                total += terms * (2.0 * e).ln();
                total += (config.alpha_d + 1.0) * e.ln() + config.beta_d / e;
            }
            for slot in 0..w.stencil.len() {
                for l in 0..scales {
                    for k in 0..TARGETS {
                        let wt = w.get(n, slot, l, k);
                        if wt > 0.0 {
                            total -= wt.ln();
                        }
                    }
                }
            }
            total
        })
        // summed in pixel order so the value does not depend on scheduling
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Init,
    Squeeze,
    Expansion,
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Init => "init",
            Step::Squeeze => "squeeze",
            Step::Expansion => "expansion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveRecord {
    pub iteration: usize,
    pub step: Step,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesSolution {
    pub x: LatentDepthField,
    pub eps: UncertaintyMap,
    /// Refined multiscale depths after the last expansion.
    pub d: MultiscaleDepths,
    pub d_ml: MultiscaleDepths,
    pub weights: GuidanceWeights,
    pub trace: Vec<ObjectiveRecord>,
    pub iterations: usize,
    pub flagged: Vec<bool>,
}

impl BayesSolution {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,step,objective\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{:.12e}\n", r.iteration, r.step.name(), r.value));
        }
        s
    }
}

/// Starting latent depths: per surface, the coarsest valid scale.
pub fn initial_latent(md: &MultiscaleDepths) -> LatentDepthField {
    let x = (0..md.dims.pixels())
        .map(|n| {
            let mut v = [0.0; TARGETS];
            for (k, slot) in v.iter_mut().enumerate() {
                if let Some(l) = (0..md.scales()).rev().find(|&l| md.is_valid(n, l, k)) {
                    *slot = md.get(n, l, k);
                }
            }
            if v[0] > v[1] {
                v = [v[1], v[0]];
            }
            v
        })
        .collect();
    LatentDepthField { dims: md.dims, x }
}

/// Iterates squeeze and expansion at fixed `eps` from already extracted
/// multiscale depths, then estimates the uncertainty.
pub fn solve_multiscale(d_ml: &MultiscaleDepths, config: &SolverConfig) -> Result<BayesSolution> {
    config.validate()?;
    let weights = compute_guidance_weights(d_ml, config);
    let eps = UncertaintyMap::constant(d_ml.dims, config.eps_init);
    let mut x = initial_latent(d_ml);
    let mut d = d_ml.clone();
    let mut trace = Vec::with_capacity(2 * config.n_iters + 1);
    let objective = |x: &LatentDepthField, d: &MultiscaleDepths| neg_log_posterior(x, d, &eps, &weights, d_ml, config);

    let mut last = objective(&x, &d);
    check_finite(last)?;
    trace.push(ObjectiveRecord {
        iteration: 0,
        step: Step::Init,
        value: last,
    });
    let mut flagged = vec![false; d_ml.dims.pixels()];
    let mut iterations = 0;
    for it in 1..=config.n_iters {
        iterations = it;
        let squeeze = weighted_median_update(&d, &weights, &eps, &x);
        x = squeeze.field;
        flagged = squeeze.flagged;
        let after_squeeze = objective(&x, &d);
        trace.push(ObjectiveRecord {
            iteration: it,
            step: Step::Squeeze,
            value: after_squeeze,
        });

        // the expansion minimizer depends on D only through d_ml
        d = soft_threshold_update(d_ml, &x, &eps, &weights);
        let after_expansion = objective(&x, &d);
        check_finite(after_expansion)?;
        trace.push(ObjectiveRecord {
            iteration: it,
            step: Step::Expansion,
            value: after_expansion,
        });
        let change = (last - after_expansion).abs() / after_expansion.abs().max(1.0);
        last = after_expansion;
        if change < config.rel_tol {
            break;
        }
    }
    let eps = epsilon_update(&x, &d, &weights, config);
    Ok(BayesSolution {
        x,
        eps,
        d,
        d_ml: d_ml.clone(),
        weights,
        trace,
        iterations,
        flagged,
    })
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("negative log-posterior".into()))
    }
}

/// Full classical pipeline: pyramid, dual-peak ML depths, guidance weights,
/// squeeze/expansion iterations and the final uncertainty.
pub fn run_coordinate_descent(hist: &HistogramCube, irf: &Irf, config: &SolverConfig) -> Result<BayesSolution> {
    config.validate()?;
    let (_, d_ml) = multiscale_depths(hist, irf, &config.multiscale)?;
    solve_multiscale(&d_ml, config)
}
