//! Reverse-mode gradients from the tape against Ridders' finite differences
//! on a small composite function.
//!
//! cargo run --release --example gradient_check

use photon_unroll::autodiff::gradcheck::ridders;
use photon_unroll::autodiff::{Array, Tape, Tensor};

fn loss(tape: &mut Tape, x: Tensor, w: Tensor) -> photon_unroll::Result<Tensor> {
    let h = tape.matmul(x, w)?;
    let h = tape.elu(h);
    let p = tape.softmax_rows(h);
    let l = tape.log(p);
    let l = tape.sum(l);
    Ok(tape.scale(l, -1.0))
}

fn main() -> photon_unroll::Result<()> {
    let x0 = Array::matrix(3, 2, vec![0.3, -1.2, 0.8, 0.1, -0.5, 2.0])?;
    let w0 = Array::matrix(2, 4, vec![0.2, -0.7, 1.1, 0.05, -0.3, 0.9, 0.4, -1.5])?;

    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let w = tape.leaf(w0.clone());
    let out = loss(&mut tape, x, w)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(w, &tape);
    println!("loss {:.6}, {} tape nodes", tape.scalar_value(out), tape.len());

    let mut worst: f64 = 0.0;
    for j in 0..w0.len() {
        let (numeric, _) = ridders(
            |h| {
                let mut t = Tape::new();
                let mut v = w0.clone();
                v.data[j] += h;
                let x = t.constant(x0.clone());
                let w = t.leaf(v);
                let o = loss(&mut t, x, w).expect("shapes are fixed");
                t.scalar_value(o)
            },
            0.1,
        );
        let rel = (analytic.data[j] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(rel);
        println!("w[{j}]  tape {:+.10}  ridders {numeric:+.10}", analytic.data[j]);
    }
    println!("max relative error {worst:.1e}");
    Ok(())
}
