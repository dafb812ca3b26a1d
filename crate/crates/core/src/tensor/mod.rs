//! Dense tensors and reverse-mode differentiation.

mod dense;
mod graph;
mod scalar;

pub use dense::Tensor;
pub use graph::{Graph, Segment, Var};
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Used as the test oracle for [`Graph::backward`].
pub fn finite_difference_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if h <= T::zero() {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_h = h + h;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / two_h);
    }
    Tensor::new(x.shape(), grad)
}

#[cfg(test)]
mod tests;
