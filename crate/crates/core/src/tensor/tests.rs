use std::rc::Rc;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_reference() {
    let a = t(&[2, 2], &[1., 2., 3., 4.]);
    assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    let b = t(&[2, 1], &[5., 6.]);
    let oracle = triple_loop(&a, &b);
    assert_eq!(oracle, vec![17., 39.]);
    assert_eq!(a.matmul(&b).unwrap().data(), &oracle[..]);
    let z = a.matmul(&Tensor::zeros(&[2, 3])).unwrap();
    assert!(z.data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.param(Tensor::<f64>::zeros(&[2, 3]));
    let b = g.param(Tensor::zeros(&[2, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

fn layer_norm(
    x: Tensor<f64>,
    gamma: Tensor<f64>,
    beta: Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (x, gm, bt) = (g.constant(x), g.constant(gamma), g.constant(beta));
    let y = g.layer_norm(x, gm, bt, eps)?;
    Ok(g.value(y).clone())
}

#[test]
fn layer_norm_examples() {
    let y = layer_norm(
        t(&[1, 3], &[5., 5., 5.]),
        Tensor::ones(&[3]),
        Tensor::zeros(&[3]),
        1e-6,
    )
    .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let y = layer_norm(
        t(&[1, 2], &[1., 3.]),
        Tensor::ones(&[2]),
        Tensor::zeros(&[2]),
        0.0,
    )
    .unwrap();
    assert_eq!(y.data(), &[-1.0, 1.0]);

    let beta = t(&[3], &[0.5, -1.0, 2.0]);
    let y = layer_norm(
        t(&[2, 3], &[1., 7., -2., 0.3, 0.1, 9.]),
        Tensor::zeros(&[3]),
        beta,
        1e-6,
    )
    .unwrap();
    assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn layer_norm_rejects_mismatched_affine() {
    let err = layer_norm(
        t(&[1, 3], &[1., 2., 3.]),
        Tensor::ones(&[2]),
        Tensor::zeros(&[2]),
        1e-6,
    );
    assert!(matches!(err, Err(crate::Error::Dimension(_))));
}

fn softmax(x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.softmax(v).unwrap();
    g.value(y).clone()
}

#[test]
fn softmax_examples() {
    let y = softmax(t(&[3], &[0., 0., 0.]));
    for &p in y.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = softmax(t(&[2], &[0., 3f64.ln()]));
    assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);

    let x = t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]);
    let shifted = softmax(x.map(|v| v + 700.0));
    for (a, b) in softmax(x).data().iter().zip(shifted.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn gelu(x: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(Tensor::scalar(x));
    let y = g.gelu(v).unwrap();
    g.value(y).item()
}

#[test]
fn gelu_examples() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(12.0) - 12.0).abs() < 1e-12);
    // Phi(1) to 16 digits.
    assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((gelu(1.0f32 as f64) - 0.8413).abs() < 1e-4);
}

#[test]
fn backward_sum_of_squares() {
    let mut g = Graph::new();
    let x0 = t(&[4], &[1.0, -2.0, 0.5, 3.0]);
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &x0.scale(2.0));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::ones(&[2]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::ones(&[2]));
    let c = g.constant(Tensor::ones(&[2]));
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn finite_difference_examples() {
    let fd =
        finite_difference_grad(|x| Ok(x.item() * x.item()), &Tensor::scalar(3.0f64), 1e-5).unwrap();
    assert!((fd.item() - 6.0).abs() < 1e-8);
    let x = t(&[2, 2], &[0.3, -1.0, 8.0, 2.5]);
    let fd = finite_difference_grad(|x| Ok(x.sum()), &x, 1e-5).unwrap();
    for &v in fd.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    assert!(finite_difference_grad(|x| Ok(x.sum()), &x, 0.0).is_err());
}

#[test]
fn broadcast_add_reduces_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2, 3, 4]));
    let b = g.param(Tensor::zeros(&[2, 1, 4]));
    let y = g.add(x, b).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 3.0));
    let bad = g.param(Tensor::zeros(&[3, 3]));
    assert!(g.add(x, bad).is_err());
}

#[test]
fn checkpointed_segment_matches_plain() {
    let x0 = t(&[2, 3], &[0.1, 0.2, -0.3, 1.0, -1.5, 0.7]);
    let w0 = t(&[3, 3], &[0.5, -0.2, 0.1, 0.3, 0.8, -0.6, 0.0, 0.4, 0.9]);
    let body = |g: &mut Graph<f64>, x: Var, w: Var| -> Result<Var> {
        let h = g.matmul(x, w)?;
        let h = g.gelu(h)?;
        let h = g.softmax(h)?;
        g.mul(h, x)
    };

    let mut plain = Graph::new();
    let (x, w) = (plain.param(x0.clone()), plain.param(w0.clone()));
    let y = body(&mut plain, x, w).unwrap();
    let loss = plain.sum(y).unwrap();
    plain.backward(loss).unwrap();

    let mut ck = Graph::new();
    let (cx, cw) = (ck.param(x0), ck.param(w0));
    let seg: Segment<f64> = Rc::new(move |g, ins| body(g, ins[0], ins[1]));
    let cy = ck.checkpoint(&[cx, cw], seg).unwrap();
    let closs = ck.sum(cy).unwrap();
    ck.backward(closs).unwrap();

    assert_eq!(plain.value(y), ck.value(cy));
    assert_eq!(plain.grad(x), ck.grad(cx));
    assert_eq!(plain.grad(w), ck.grad(cw));
    assert!(ck.retained_elements() < plain.retained_elements());
}

#[test]
fn check_finite_flags_overflow() {
    let mut g = Graph::new();
    g.set_check_finite(true);
    let x = g.constant(Tensor::scalar(f64::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
}
