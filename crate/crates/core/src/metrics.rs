//! Depth absolute error and the L1 Chamfer distance between point clouds.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dims, TARGETS};

/// Unit in which depth errors are reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthUnit {
    Bins,
    /// Meters at the given bin width.
    Meters(f64),
}

impl DepthUnit {
    fn factor(self) -> f64 {
        match self {
            DepthUnit::Bins => 1.0,
            DepthUnit::Meters(w) => w,
        }
    }
}

/// Mean absolute difference over the entries where `mask` is true (all
/// entries when `mask` is `None`).
pub fn dae(pred: &[f64], truth: &[f64], mask: Option<&[bool]>, unit: DepthUnit) -> Result<f64> {
    if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Shape(format!(
            "dae over {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask.is_none_or(|m| m[i]) {
            sum += (pred[i] - truth[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("dae over an empty mask".into()));
    }
    Ok(sum / count as f64 * unit.factor())
}

/// DAE of one surface of dual-depth maps. `mask` is per `(n, k)`.
pub fn surface_dae(
    pred: &[[f64; TARGETS]],
    truth: &[[f64; TARGETS]],
    mask: Option<&[bool]>,
    surface: usize,
    unit: DepthUnit,
) -> Result<f64> {
    let p: Vec<f64> = pred.iter().map(|d| d[surface]).collect();
    let t: Vec<f64> = truth.iter().map(|d| d[surface]).collect();
    let m: Option<Vec<bool>> = mask.map(|m| m.iter().skip(surface).step_by(TARGETS).copied().collect());
    if let (Some(full), Some(m)) = (mask, &m) {
        if full.len() != pred.len() * TARGETS || m.len() != p.len() {
            return Err(Error::Shape("mask is not per (pixel, surface)".into()));
        }
    }
    dae(&p, &t, m.as_deref(), unit)
}

/// DAE over both surfaces.
pub fn dual_dae(pred: &[[f64; TARGETS]], truth: &[[f64; TARGETS]], mask: Option<&[bool]>, unit: DepthUnit) -> Result<f64> {
    dae(pred.as_flattened(), truth.as_flattened(), mask, unit)
}

pub type Point = [f64; 3];

fn l1(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Chamfer result; each directed term is normalized by the size of its
/// source set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chamfer {
    pub total: f64,
    /// Estimate to ground truth.
    pub o_to_g: f64,
    /// Ground truth to estimate.
    pub g_to_o: f64,
}

/// Nearest-neighbour search strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Search {
    Exhaustive,
    /// Buckets points on an `(x, y)` grid with the given cell size.
    Grid(f64),
}

struct Buckets<'a> {
    points: &'a [Point],
    cell: f64,
    origin: [f64; 2],
    shape: [usize; 2],
    start: Vec<usize>,
    members: Vec<usize>,
}

impl<'a> Buckets<'a> {
    fn new(points: &'a [Point], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let shape = [0, 1].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut b = Buckets {
            points,
            cell,
            origin: lo,
            shape,
            start: vec![0; shape[0] * shape[1] + 1],
            members: vec![0; points.len()],
        };
        let cells: Vec<usize> = points.iter().map(|p| b.cell_of(p)).collect();
        for &c in &cells {
            b.start[c + 1] += 1;
        }
        for i in 0..shape[0] * shape[1] {
            b.start[i + 1] += b.start[i];
        }
        let mut fill = b.start.clone();
        for (i, &c) in cells.iter().enumerate() {
            b.members[fill[c]] = i;
            fill[c] += 1;
        }
        b
    }

    fn coord(&self, v: f64, a: usize) -> i64 {
        ((v - self.origin[a]) / self.cell).floor() as i64
    }

    fn cell_of(&self, p: &Point) -> usize {
        let i = self.coord(p[0], 0).clamp(0, self.shape[0] as i64 - 1) as usize;
        let j = self.coord(p[1], 1).clamp(0, self.shape[1] as i64 - 1) as usize;
        i * self.shape[1] + j
    }

    fn nearest(&self, q: &Point) -> f64 {
        let (ci, cj) = (self.coord(q[0], 0), self.coord(q[1], 1));
        let mut best = f64::INFINITY;
        let max_ring = self.shape[0].max(self.shape[1]) as i64 + ci.abs().max(cj.abs());
        for ring in 0..=max_ring {
            // every cell on this ring is at least (ring - 1) cells away along one axis
            if ring > 0 && best <= (ring - 1) as f64 * self.cell {
                break;
            }
            for i in ci - ring..=ci + ring {
                for j in cj - ring..=cj + ring {
                    if (i - ci).abs().max((j - cj).abs()) != ring {
                        continue;
                    }
                    if i < 0 || j < 0 || i >= self.shape[0] as i64 || j >= self.shape[1] as i64 {
                        continue;
                    }
                    let c = i as usize * self.shape[1] + j as usize;
                    for &m in &self.members[self.start[c]..self.start[c + 1]] {
                        best = best.min(l1(q, &self.points[m]));
                    }
                }
            }
        }
        best
    }
}

fn directed(from: &[Point], to: &[Point], search: Search) -> f64 {
    let sum: f64 = match search {
        Search::Exhaustive => from
            .par_iter()
            .map(|a| to.iter().map(|b| l1(a, b)).fold(f64::INFINITY, f64::min))
            .collect::<Vec<_>>()
            .iter()
            .sum(),
        Search::Grid(cell) => {
            let buckets = Buckets::new(to, cell);
            from.par_iter().map(|a| buckets.nearest(a)).collect::<Vec<_>>().iter().sum()
        }
    };
    sum / from.len() as f64
}

/// L1 Chamfer distance between an estimate and a reference cloud.
pub fn chamfer_l1(estimate: &[Point], truth: &[Point]) -> Result<Chamfer> {
    chamfer_l1_with(estimate, truth, Search::Exhaustive)
}

pub fn chamfer_l1_with(estimate: &[Point], truth: &[Point], search: Search) -> Result<Chamfer> {
    if estimate.is_empty() || truth.is_empty() {
        return Err(Error::Empty("chamfer distance of an empty point set".into()));
    }
    if let Search::Grid(cell) = search {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Config(format!("grid cell size {cell}")));
        }
    }
    let o_to_g = directed(estimate, truth, search);
    let g_to_o = directed(truth, estimate, search);
    Ok(Chamfer {
        total: o_to_g + g_to_o,
        o_to_g,
        g_to_o,
    })
}

/// Point cloud of dual-depth maps in meters: `x` along columns and `y` along
/// rows at `pitch_m`, depth at the bin width of `dims`. Entries with a false
/// mask bit are skipped.
pub fn depth_points(depths: &[[f64; TARGETS]], dims: Dims, pitch_m: f64, mask: Option<&[bool]>) -> Vec<Point> {
    let mut pts = Vec::with_capacity(depths.len() * TARGETS);
    for (n, d) in depths.iter().enumerate() {
        let (r, c) = dims.row_col(n);
        for k in 0..TARGETS {
            if mask.is_none_or(|m| m[n * TARGETS + k]) {
                pts.push([c as f64 * pitch_m, r as f64 * pitch_m, d[k] * dims.bin_width_m]);
            }
        }
    }
    pts
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub ppp: f64,
    pub sbr: f64,
    pub dae: f64,
    pub chamfer: Chamfer,
}

impl MetricsRow {
    pub const HEADER: &'static str = "scene,ppp,sbr,dae,chamfer,o_to_g,g_to_o";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.scene, self.ppp, self.sbr, self.dae, self.chamfer.total, self.chamfer.o_to_g, self.chamfer.g_to_o
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{}\n", MetricsRow::HEADER);
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// DAE in meters and Chamfer distance of an estimate against the truth.
pub fn evaluate(
    scene: &str,
    ppp: f64,
    sbr: f64,
    pred: &[[f64; TARGETS]],
    truth: &[[f64; TARGETS]],
    dims: Dims,
    pitch_m: f64,
) -> Result<MetricsRow> {
    let dae = dual_dae(pred, truth, None, DepthUnit::Meters(dims.bin_width_m))?;
    let chamfer = chamfer_l1(&depth_points(pred, dims, pitch_m, None), &depth_points(truth, dims, pitch_m, None))?;
    Ok(MetricsRow {
        scene: scene.to_string(),
        ppp,
        sbr,
        dae,
        chamfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(a: &[Point], b: &[Point]) -> (f64, f64) {
        let mut ab = 0.0;
        for p in a {
            let mut best = f64::INFINITY;
            for q in b {
                let d = (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs();
                if d < best {
                    best = d;
                }
            }
            ab += best;
        }
        let mut ba = 0.0;
        for q in b {
            let mut best = f64::INFINITY;
            for p in a {
                let d = (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs();
                if d < best {
                    best = d;
                }
            }
            ba += best;
        }
        (ab / a.len() as f64, ba / b.len() as f64)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0)]).collect()
    }

    #[test]
    fn dae_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(dae(&a, &a, None, DepthUnit::Bins).unwrap(), 0.0);
        let b = [3.0, 4.0, 5.0];
        assert_eq!(dae(&b, &a, None, DepthUnit::Bins).unwrap(), 2.0);
        assert!((dae(&b, &a, None, DepthUnit::Meters(0.003)).unwrap() - 0.006).abs() < 1e-15);
        assert!(matches!(dae(&a, &b, Some(&[false; 3]), DepthUnit::Bins), Err(Error::Empty(_))));
        assert!(matches!(dae(&a, &b[..2], None, DepthUnit::Bins), Err(Error::Shape(_))));
    }

    #[test]
    fn dae_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1024.0)).collect();
        let truth: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1024.0)).collect();
        let mask: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.7)).collect();
        let mut s = 0.0;
        let mut c = 0.0;
        for i in 0..200 {
            if mask[i] {
                s += (pred[i] - truth[i]).abs();
                c += 1.0;
            }
        }
        assert!((dae(&pred, &truth, Some(&mask), DepthUnit::Bins).unwrap() - s / c).abs() < 1e-12);
    }

    #[test]
    fn surface_dae_picks_one_surface() {
        let pred = [[1.0, 10.0], [2.0, 30.0]];
        let truth = [[1.0, 0.0], [2.0, 0.0]];
        assert_eq!(surface_dae(&pred, &truth, None, 0, DepthUnit::Bins).unwrap(), 0.0);
        assert_eq!(surface_dae(&pred, &truth, None, 1, DepthUnit::Bins).unwrap(), 20.0);
        let mask = [true, true, true, false];
        assert_eq!(surface_dae(&pred, &truth, Some(&mask), 1, DepthUnit::Bins).unwrap(), 10.0);
        assert_eq!(dual_dae(&pred, &truth, None, DepthUnit::Bins).unwrap(), 10.0);
    }

    #[test]
    fn chamfer_examples() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 1.0, 1.0]];
        assert_eq!(chamfer_l1(&a, &b).unwrap(), Chamfer { total: 6.0, o_to_g: 3.0, g_to_o: 3.0 });
        assert_eq!(chamfer_l1(&a, &a).unwrap().total, 0.0);
        assert!(matches!(chamfer_l1(&a, &[]), Err(Error::Empty(_))));
        assert!(matches!(chamfer_l1_with(&a, &b, Search::Grid(0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = cloud(&mut rng, 50);
            let b = cloud(&mut rng, 50);
            let (ab, ba) = brute(&a, &b);
            let c = chamfer_l1(&a, &b).unwrap();
            assert!((c.o_to_g - ab).abs() < 1e-12 && (c.g_to_o - ba).abs() < 1e-12);
            for cell in [0.3, 1.0, 20.0] {
                let g = chamfer_l1_with(&a, &b, Search::Grid(cell)).unwrap();
                assert!((g.o_to_g - ab).abs() < 1e-12 && (g.g_to_o - ba).abs() < 1e-12, "cell {cell}");
            }
        }
    }

    #[test]
    fn unequal_sizes_normalize_per_direction() {
        let a = [[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let b = [[0.0, 0.0, 0.0]];
        let c = chamfer_l1(&a, &b).unwrap();
        assert_eq!((c.o_to_g, c.g_to_o), (1.0, 0.0));
    }

    #[test]
    fn depth_points_layout() {
        let dims = Dims::new(2, 3, 1024);
        let depths = vec![[10.0, 500.0]; 6];
        let pts = depth_points(&depths, dims, 0.5, None);
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[2 * 5], [1.0, 0.5, 10.0 * dims.bin_width_m]);
        let mut mask = vec![true; 12];
        mask[1] = false;
        assert_eq!(depth_points(&depths, dims, 0.5, Some(&mask)).len(), 11);
    }

    #[test]
    fn csv_rows() {
        let dims = Dims::new(2, 2, 1024);
        let t = vec![[10.0, 500.0]; 4];
        let row = evaluate("ramp", 4.0, 16.0, &t, &t, dims, 0.01).unwrap();
        let csv = metrics_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(MetricsRow::HEADER));
        assert!(lines.next().unwrap().starts_with("ramp,4,16,0.000000000e0,"));
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_for_equal_sizes(seed in any::<u64>(), n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n);
            let b = cloud(&mut rng, n);
            let ab = chamfer_l1(&a, &b).unwrap();
            let ba = chamfer_l1(&b, &a).unwrap();
            prop_assert!((ab.total - ba.total).abs() < 1e-12);
        }

        #[test]
        fn chamfer_translation_invariant(seed in any::<u64>(), s in prop::array::uniform3(-10.0f64..10.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, 15);
            let b = cloud(&mut rng, 9);
            let shift = |p: &Point| [p[0] + s[0], p[1] + s[1], p[2] + s[2]];
            let c0 = chamfer_l1(&a, &b).unwrap();
            let c1 = chamfer_l1(&a.iter().map(shift).collect::<Vec<_>>(), &b.iter().map(shift).collect::<Vec<_>>()).unwrap();
            prop_assert!((c0.o_to_g - c1.o_to_g).abs() < 1e-12);
            prop_assert!((c0.g_to_o - c1.g_to_o).abs() < 1e-12);
            prop_assert!((c0.total - c1.total).abs() < 1e-12);
        }

        #[test]
        fn dae_shift_invariant(v in prop::collection::vec((0.0f64..1000.0, 0.0f64..1000.0), 1..30), c in -100.0f64..100.0) {
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let ps: Vec<f64> = p.iter().map(|x| x + c).collect();
            let ts: Vec<f64> = t.iter().map(|x| x + c).collect();
            let d0 = dae(&p, &t, None, DepthUnit::Bins).unwrap();
            let d1 = dae(&ps, &ts, None, DepthUnit::Bins).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }
    }
}
