//! Builds a two-layer GELU network on the tape, backpropagates a mean
//! absolute error and checks one weight gradient against central differences.
//!
//! `cargo run --release --example autodiff`

use eqdistill::tensor::{finite_difference_grad, Graph, Tensor};

fn net(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> eqdistill::Result<f64> {
    let mut g = Graph::new();
    let (x, w1, w2) = (
        g.constant(x.clone()),
        g.param(w1.clone()),
        g.param(w2.clone()),
    );
    let h = g.matmul(x, w1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    let y = g.abs(y)?;
    let loss = g.mean(y)?;
    Ok(g.value(loss).item())
}

fn main() -> eqdistill::Result<()> {
    let ramp = |n: usize, s: f64| {
        (0..n)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) * s)
            .collect::<Vec<_>>()
    };
    let x = Tensor::from_f64(&[4, 3], &ramp(12, 0.3))?;
    let w1 = Tensor::from_f64(&[3, 5], &ramp(15, 0.2))?;
    let w2 = Tensor::from_f64(&[5, 2], &ramp(10, 0.25))?;

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w1v = g.param(w1.clone());
    let w2v = g.param(w2.clone());
    let h = g.matmul(xv, w1v)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2v)?;
    let y = g.abs(y)?;
    let loss = g.mean(y)?;
    g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item());

    let tape = g.grad(w1v).expect("w1 is a parameter").clone();
    let fd = finite_difference_grad(|w| net(&x, w, &w2), &w1, 1e-5)?;
    let err = tape.sub(&fd)?.norm() / fd.norm();
    println!("dL/dW1 tape : {:?}", &tape.data()[..5]);
    println!("dL/dW1 fd   : {:?}", &fd.data()[..5]);
    println!("relative error {err:.2e}");
    println!("retained elements {}", g.retained_elements());
    Ok(())
}
