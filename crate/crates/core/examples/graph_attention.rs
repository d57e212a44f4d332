//! k-nearest-neighbour graph over pixel features, one attention layer on the
//! tape, and the hard Gumbel-softmax used to pick a scale per pixel.
//!
//! cargo run --release --example graph_attention

use photon_unroll::autodiff::{Array, Tape};
use photon_unroll::graph::{attention_weights, gat_layer, gumbel_noise, gumbel_softmax, knn_graph, GatLayerParams, GatTensors};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> photon_unroll::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (nodes, width, k) = (12, 3, 4);
    let points: Vec<f64> = (0..nodes * width).map(|_| rng.gen_range(0.0..1.0)).collect();
    let graph = knn_graph(&points, width, k)?;
    println!("{} nodes, {} edges", graph.nodes, graph.edges());
    println!("in-neighbours of node 0 (self first): {:?}", graph.in_neighbours(0));

    let params = GatLayerParams::init(&mut rng, width, 8);
    let h = Array::matrix(nodes, width, points.clone())?;
    let alpha = attention_weights(&h, &graph, &params)?;
    let node0: Vec<String> = alpha[..k + 1].iter().map(|a| format!("{a:.3}")).collect();
    println!("attention into node 0: [{}], sum {:.6}", node0.join(", "), alpha[..k + 1].iter().sum::<f64>());

    let mut tape = Tape::new();
    let ht = tape.constant(h);
    let p = GatTensors {
        w: tape.leaf(params.w.clone()),
        a_dst: tape.leaf(params.a_dst.clone()),
        a_src: tape.leaf(params.a_src.clone()),
        bias: tape.leaf(params.bias.clone()),
    };
    let out = gat_layer(&mut tape, ht, &graph, &p)?;
    println!("layer output shape {:?}", tape.value(out).shape);

    // choose one of four scales per node; gradients follow the soft sample
    let logits = tape.leaf(Array::matrix(nodes, 4, (0..nodes * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let noise = gumbel_noise(&mut rng, nodes * 4);
    let (soft, hard) = gumbel_softmax(&mut tape, logits, 1.0, true, Some(&noise))?;
    println!("soft row 0 {:?}", tape.value(soft).row(0).iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    println!("hard row 0 {:?}", tape.value(hard).row(0));
    Ok(())
}
