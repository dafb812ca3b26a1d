use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Mean absolute error over every element; the subgradient at ties is 0.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.value(pred).shape(), g.value(target).shape());
    if ps != ts {
        return Err(Error::Dimension(format!(
            "l1_loss between {ps:?} and {ts:?}"
        )));
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d)?;
    g.mean(a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One decoupled-weight-decay Adam update of a single tensor at step `t`
/// (1-based). Moments are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::Dimension(format!(
            "optimizer state for {name} does not match {:?}",
            param.shape()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Training(format!(
            "non-finite gradient for parameter {name}"
        )));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let it = param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (mi, vi)) in it {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
    }
    Ok(())
}

/// `shadow <- momentum * shadow + (1 - momentum) * param`.
pub fn ema_update<T: Scalar>(
    shadow: &mut Tensor<T>,
    param: &Tensor<T>,
    momentum: f64,
) -> Result<()> {
    if shadow.shape() != param.shape() {
        return Err(Error::Dimension(format!(
            "EMA shadow {:?} vs param {:?}",
            shadow.shape(),
            param.shape()
        )));
    }
    let (mu, rest) = (T::of(momentum), T::of(1.0 - momentum));
    for (s, &p) in shadow.data_mut().iter_mut().zip(param.data()) {
        *s = mu * *s + rest * p;
    }
    Ok(())
}
