//! kNN graphs over pixel features, single-head graph-attention layers and the
//! Gumbel-softmax scale selector.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Array, Tape, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Directed edges `src -> dst`, grouped by target: every node receives a
/// self-loop followed by its `k` nearest neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: usize,
    pub k: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl Graph {
    pub fn edges(&self) -> usize {
        self.src.len()
    }

    /// Sources feeding `node`, self-loop first.
    pub fn in_neighbours(&self, node: usize) -> &[usize] {
        let d = self.k + 1;
        &self.src[node * d..(node + 1) * d]
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Graph {
        let d = self.k + 1;
        let mut src = vec![0; self.edges()];
        let mut dst = vec![0; self.edges()];
        for node in 0..self.nodes {
            let new = perm[node];
            for (j, &s) in self.in_neighbours(node).iter().enumerate() {
                src[new * d + j] = perm[s];
                dst[new * d + j] = new;
            }
        }
        Graph {
            nodes: self.nodes,
            k: self.k,
            src: src.into(),
            dst: dst.into(),
        }
    }
}

/// Builds the kNN graph of the rows of `points` (`n x width`, row-major)
/// under Euclidean distance. Distance ties go to the lower node index.
pub fn knn_graph(points: &[f64], width: usize, k: usize) -> Result<Graph> {
    if width == 0 || !points.len().is_multiple_of(width) {
        return Err(Error::Shape(format!("{} values do not form rows of {width}", points.len())));
    }
    let n = points.len() / width;
    if n <= k {
        return Err(Error::Config(format!("kNN with k = {k} needs more than {k} nodes, got {n}")));
    }
    let row = |i: usize| &points[i * width..(i + 1) * width];
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (pi.iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut best = cand[..k].to_vec();
            best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i).chain(best.into_iter().map(|p| p.1)).collect()
        })
        .collect();
    let src: Vec<usize> = lists.into_iter().flatten().collect();
    let dst: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k + 1)).collect();
    Ok(Graph {
        nodes: n,
        k,
        src: src.into(),
        dst: dst.into(),
    })
}

/// Parameters of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    /// `in_dim x out_dim`.
    pub w: Array,
    /// Scores the receiving node (`out_dim x 1`).
    pub a_dst: Array,
    /// Scores the sending node (`out_dim x 1`).
    pub a_src: Array,
    /// `1 x out_dim`, zero at initialization.
    pub bias: Array,
}

/// Uniform `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-s, s);
    Array {
        shape: vec![rows, cols],
        data: (0..rows * cols).map(|_| u.sample(rng)).collect(),
    }
}

impl GatLayerParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: glorot(rng, in_dim, out_dim, in_dim, out_dim),
            a_dst: glorot(rng, out_dim, 1, 2 * out_dim, 1),
            a_src: glorot(rng, out_dim, 1, 2 * out_dim, 1),
            bias: Array::zeros(&[1, out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[1]
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GatTensors {
    pub w: Tensor,
    pub a_dst: Tensor,
    pub a_src: Tensor,
    pub bias: Tensor,
}

/// `out_i = sum_j alpha_ij W h_j + b` with
/// `alpha_ij = softmax_j leaky_relu(a_dst . W h_i + a_src . W h_j)` over the
/// in-edges of `i`.
pub fn gat_layer(tape: &mut Tape, h: Tensor, graph: &Graph, p: &GatTensors) -> Result<Tensor> {
    let in_dim = tape.value(p.w).shape[0];
    if tape.value(h).cols() != in_dim || tape.value(h).rows() != graph.nodes {
        return Err(Error::Shape(format!(
            "gat input {:?} for {} nodes and in_dim {in_dim}",
            tape.value(h).shape,
            graph.nodes
        )));
    }
    let wh = tape.matmul(h, p.w)?;
    let score_dst = tape.matmul(wh, p.a_dst)?;
    let score_src = tape.matmul(wh, p.a_src)?;
    let e_dst = tape.gather_rows(score_dst, graph.dst.clone())?;
    let e_src = tape.gather_rows(score_src, graph.src.clone())?;
    let e = tape.add(e_dst, e_src)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    let alpha = tape.softmax_segments(e, graph.dst.clone(), graph.nodes)?;
    let messages = tape.gather_rows(wh, graph.src.clone())?;
    let weighted = tape.mul_col(messages, alpha)?;
    let pooled = tape.segment_sum(weighted, graph.dst.clone(), graph.nodes)?;
    tape.add_row(pooled, p.bias)
}

/// Attention coefficients of one layer, per edge, without a tape.
pub fn attention_weights(h: &Array, graph: &Graph, p: &GatLayerParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let ht = tape.leaf(h.clone());
    let w = tape.leaf(p.w.clone());
    let a_dst = tape.leaf(p.a_dst.clone());
    let a_src = tape.leaf(p.a_src.clone());
    let wh = tape.matmul(ht, w)?;
    let sd = tape.matmul(wh, a_dst)?;
    let ss = tape.matmul(wh, a_src)?;
    let ed = tape.gather_rows(sd, graph.dst.clone())?;
    let es = tape.gather_rows(ss, graph.src.clone())?;
    let e = tape.add(ed, es)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    let alpha = tape.softmax_segments(e, graph.dst.clone(), graph.nodes)?;
    Ok(tape.value(alpha).data.clone())
}

/// Standard Gumbel noise `-ln(-ln U)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// One-hot of the row maxima, lowest index on ties.
pub fn one_hot_rows(a: &Array) -> Array {
    let c = a.cols();
    let mut out = Array::zeros(&a.shape);
    for r in 0..a.rows() {
        let row = a.row(r);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.data[r * c + best] = 1.0;
    }
    out
}

/// Gumbel-softmax over each row of `logits`.
///
/// Returns `(soft, out)`: the relaxed sample `softmax((logits + G) / tau)` and
/// the output, which equals `soft` or, when `hard`, its one-hot argmax with
/// gradients routed through `soft`. `noise = None` disables the Gumbel term.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Tensor,
    tau: f64,
    hard: bool,
    noise: Option<&[f64]>,
) -> Result<(Tensor, Tensor)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if tape.value(logits).data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention logits".into()));
    }
    let perturbed = match noise {
        Some(g) => {
            let shape = tape.value(logits).shape.clone();
            if g.len() != tape.value(logits).len() {
                return Err(Error::Shape(format!("{} noise values for logits {shape:?}", g.len())));
            }
            let gt = tape.constant(Array::new(&shape, g.to_vec())?);
            tape.add(logits, gt)?
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let soft = tape.softmax_rows(scaled);
    if !hard {
        return Ok((soft, soft));
    }
    // argmax of the perturbed logits, which is the argmax of the soft sample
    let hot = one_hot_rows(tape.value(scaled));
    let out = tape.straight_through(soft, hot)?;
    Ok((soft, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf_params(tape: &mut Tape, p: &GatLayerParams) -> GatTensors {
        GatTensors {
            w: tape.leaf(p.w.clone()),
            a_dst: tape.leaf(p.a_dst.clone()),
            a_src: tape.leaf(p.a_src.clone()),
            bias: tape.leaf(p.bias.clone()),
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, i: usize, o: usize) -> GatLayerParams {
        let mut p = GatLayerParams::init(rng, i, o);
        p.bias = glorot(rng, 1, o, 1, o);
        p
    }

    /// Straight loops over nodes and in-edges.
    fn reference_layer(h: &Array, g: &Graph, p: &GatLayerParams) -> Vec<f64> {
        let (i_dim, o_dim) = (p.in_dim(), p.out_dim());
        let n = g.nodes;
        let mut wh = vec![vec![0.0; o_dim]; n];
        for v in 0..n {
            for o in 0..o_dim {
                for i in 0..i_dim {
                    wh[v][o] += h.at(v, i) * p.w.at(i, o);
                }
            }
        }
        let dot = |a: &Array, v: &[f64]| (0..o_dim).map(|o| a.data[o] * v[o]).sum::<f64>();
        let mut out = Vec::new();
        for v in 0..n {
            let srcs = g.in_neighbours(v);
            let scores: Vec<f64> = srcs
                .iter()
                .map(|&s| {
                    let e = dot(&p.a_dst, &wh[v]) + dot(&p.a_src, &wh[s]);
                    if e > 0.0 {
                        e
                    } else {
                        0.2 * e
                    }
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|e| (e - m).exp()).sum();
            for o in 0..o_dim {
                let mut acc = p.bias.data[o];
                for (j, &s) in srcs.iter().enumerate() {
                    acc += (scores[j] - m).exp() / z * wh[s][o];
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn collinear_tie_goes_to_lower_index() {
        let g = knn_graph(&[0.0, 1.0, 2.0], 1, 1).unwrap();
        assert_eq!(g.in_neighbours(1), &[1, 0]);
        assert_eq!(g.in_neighbours(0), &[0, 1]);
        assert_eq!(g.in_neighbours(2), &[2, 1]);
    }

    #[test]
    fn grid_coordinates_give_four_connected_stencil() {
        let (rows, cols) = (6, 7);
        let pts: Vec<f64> = (0..rows * cols).flat_map(|i| [(i / cols) as f64, (i % cols) as f64]).collect();
        let g = knn_graph(&pts, 2, 4).unwrap();
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let i = r * cols + c;
                let mut got = g.in_neighbours(i)[1..].to_vec();
                got.sort_unstable();
                // brute force: every other node at squared distance 1
                let want: Vec<usize> = (0..rows * cols)
                    .filter(|&j| {
                        let (dr, dc) = ((j / cols) as f64 - r as f64, (j % cols) as f64 - c as f64);
                        dr * dr + dc * dc == 1.0
                    })
                    .collect();
                assert_eq!(got, want);
            }
        }
        for i in 0..rows * cols {
            assert_eq!(g.dst.iter().filter(|&&d| d == i).count(), 5);
            let mut ns = g.in_neighbours(i).to_vec();
            ns.sort_unstable();
            ns.dedup();
            assert_eq!(ns.len(), 5);
        }
    }

    #[test]
    fn too_few_nodes() {
        assert!(matches!(knn_graph(&[0.0, 1.0], 1, 2), Err(Error::Config(_))));
        assert!(matches!(knn_graph(&[0.0, 1.0, 2.0], 2, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn self_loop_only_returns_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GatLayerParams::init(&mut rng, 3, 4);
        let g = Graph {
            nodes: 2,
            k: 0,
            src: Arc::from(vec![0, 1]),
            dst: Arc::from(vec![0, 1]),
        };
        let h = Array::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let ht = tape.leaf(h.clone());
        let pt = leaf_params(&mut tape, &p);
        let out = gat_layer(&mut tape, ht, &g, &pt).unwrap();
        let proj = tape.matmul(ht, pt.w).unwrap();
        assert_eq!(tape.value(out), tape.value(proj));
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let g = knn_graph(&pts, 1, 3).unwrap();
        let p = GatLayerParams::init(&mut rng, 2, 5);
        let h = Array::matrix(10, 2, [0.7, -0.2].repeat(10)).unwrap();
        let alpha = attention_weights(&h, &g, &p).unwrap();
        assert!(alpha.iter().all(|a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layer_matches_reference_loops_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = knn_graph(&pts, 2, 2).unwrap();
        let p = random_layer(&mut rng, 3, 4);
        let h = glorot(&mut rng, 6, 3, 1, 1);
        let mut tape = Tape::new();
        let ht = tape.leaf(h.clone());
        let pt = leaf_params(&mut tape, &p);
        let out = gat_layer(&mut tape, ht, &g, &pt).unwrap();
        let reference = reference_layer(&h, &g, &p);
        for (a, b) in tape.value(out).data.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        let alpha = attention_weights(&h, &g, &p).unwrap();
        for node in 0..6 {
            let s: f64 = alpha[node * 3..node * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // finite differences of a weighted sum of outputs w.r.t. every parameter
        let weights: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_of = |p: &GatLayerParams, h: &Array| -> f64 {
            reference_layer(h, &g, p).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let wc = tape.constant(Array::matrix(6, 4, weights.clone()).unwrap());
        let m = tape.mul(out, wc).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        let eps = 1e-6;
        let fields: [(Tensor, usize); 5] = [(pt.w, 0), (pt.a_dst, 1), (pt.a_src, 2), (pt.bias, 3), (ht, 4)];
        for (t, which) in fields {
            let ad = grads.get(t, &tape);
            for j in 0..ad.len() {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let mut hh = h.clone();
                    match which {
                        0 => q.w.data[j] += delta,
                        1 => q.a_dst.data[j] += delta,
                        2 => q.a_src.data[j] += delta,
                        3 => q.bias.data[j] += delta,
                        _ => hh.data[j] += delta,
                    }
                    loss_of(&q, &hh)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let rel = (fd - ad.data[j]).abs() / fd.abs().max(ad.data[j].abs()).max(1e-3);
                assert!(rel < 1e-5, "param {which}[{j}]: {fd} vs {}", ad.data[j]);
            }
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 9;
        let pts: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = knn_graph(&pts, 2, 3).unwrap();
        let p = random_layer(&mut rng, 2, 3);
        let h = Array::matrix(n, 2, pts.clone()).unwrap();
        let perm: Vec<usize> = vec![4, 7, 0, 8, 2, 1, 6, 3, 5];
        let mut hp = Array::zeros(&[n, 2]);
        for i in 0..n {
            hp.data[perm[i] * 2..perm[i] * 2 + 2].copy_from_slice(h.row(i));
        }
        let a = reference_layer(&h, &g, &p);
        let b = reference_layer(&hp, &g.relabel(&perm), &p);
        let mut tape = Tape::new();
        let ht = tape.leaf(hp.clone());
        let pt = leaf_params(&mut tape, &p);
        let out = gat_layer(&mut tape, ht, &g.relabel(&perm), &pt).unwrap();
        for i in 0..n {
            for o in 0..3 {
                assert!((a[i * 3 + o] - b[perm[i] * 3 + o]).abs() < 1e-12);
                assert!((a[i * 3 + o] - tape.value(out).at(perm[i], o)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = knn_graph(&[0.0, 1.0, 2.0], 1, 1).unwrap();
        let p = GatLayerParams::init(&mut rng, 2, 2);
        let mut tape = Tape::new();
        let h = tape.leaf(Array::zeros(&[3, 3]));
        let pt = leaf_params(&mut tape, &p);
        assert!(matches!(gat_layer(&mut tape, h, &g, &pt), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_free_hard_is_argmax() {
        let mut tape = Tape::new();
        let l = tape.leaf(Array::matrix(1, 3, vec![0.1, 2.0, -1.0]).unwrap());
        let (soft, out) = gumbel_softmax(&mut tape, l, 1.0, true, None).unwrap();
        assert_eq!(tape.value(out).data, vec![0.0, 1.0, 0.0]);
        assert!((tape.value(soft).data.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(gumbel_softmax(&mut tape, l, 0.0, true, None), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_rate_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws = 10_000;
        let mut picks = 0;
        for _ in 0..draws {
            let mut tape = Tape::new();
            let l = tape.leaf(Array::matrix(1, 2, vec![1f64.ln(), 2f64.ln()]).unwrap());
            let g = gumbel_noise(&mut rng, 2);
            let (soft, out) = gumbel_softmax(&mut tape, l, 1.0, true, Some(&g)).unwrap();
            assert!((tape.value(soft).data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            picks += tape.value(out).data[1] as usize;
        }
        let rate = picks as f64 / draws as f64;
        assert!((rate - 2.0 / 3.0).abs() < 0.02, "{rate}");
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let noise = [0.3, -0.4, 1.1];
        let grad = |hard: bool| {
            let mut tape = Tape::new();
            let l = tape.leaf(Array::matrix(1, 3, vec![0.5, 0.2, -0.3]).unwrap());
            let (_, out) = gumbel_softmax(&mut tape, l, 1.0, hard, Some(&noise)).unwrap();
            let w = tape.constant(Array::matrix(1, 3, vec![2.0, -1.0, 0.5]).unwrap());
            let m = tape.mul(out, w).unwrap();
            let s = tape.sum(m);
            tape.backward(s).unwrap().get(l, &tape).data
        };
        assert_eq!(grad(true), grad(false));
    }
}
