//! The dense-tensor tape: forward ops, reverse-mode gradients, and the
//! finite-difference checker that keeps every backward rule honest.
//!
//! Run with: cargo run --release --example autodiff

use cir::numkernel::{finite_diff_check, ParamBinding, ParamSet, Tape, Tensor};
use cir::rng::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Forward + backward through a tiny composite: loss = mean(sigmoid(Wx)).
    let tape = Tape::new();
    let w = tape.leaf(Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.75])?)?;
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, -1.0]))?;
    let y = tape.sigmoid(tape.matmul(w, x)?)?;
    let loss = tape.mean(y)?;
    println!("forward:  mean(sigmoid(Wx)) = {:.6}", tape.value(loss).item());

    let grads = tape.backward(loss)?;
    println!("backward: dloss/dW = {:?}", grads.get(w).unwrap().data());

    // The same composite under the central-difference oracle.
    let mut rng = Rng::new(42);
    let mut params = ParamSet::new();
    params.insert(
        "w",
        Tensor::matrix(4, 5, (0..20).map(|_| rng.normal() * 0.3).collect())?,
    );
    let input = Tensor::vector((0..5).map(|_| rng.normal()).collect());
    let report = finite_diff_check(&mut params, 1e-6, 64, 7, move |tape, bind| {
        let x = tape.constant(input.clone())?;
        let h = tape.tanh(tape.matmul(bind.var("w")?, x)?)?;
        tape.mean(tape.hadamard(h, h)?)
    })?;
    println!(
        "gradcheck: {} coords, max relative error {:.3e}",
        report.coords_checked, report.max_rel_err
    );

    // A fresh tape per use; bindings expose named parameters as leaves.
    let tape = Tape::new();
    let bind = ParamBinding::bind(&tape, &params)?;
    let norm = tape.l2_normalize(bind.var("w")?, 1)?;
    println!("l2-normalized first row: {:?}", &tape.value(norm).data()[..5]);
    Ok(())
}
