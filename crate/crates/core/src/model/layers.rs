//! Patch layout, positional encoding and the transformer block.

use std::rc::Rc;

use super::config::ImageDims;
use super::params::BlockVars;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// For each position of the patch matrix, the flat pixel index it reads.
///
/// Patches are visited row-major; inside a patch pixels are row-major with
/// channels innermost.
pub fn patch_index(img: ImageDims, p: usize) -> Result<Vec<usize>> {
    img.check_patch(p)?;
    let (w, c) = (img.width, img.channels);
    let (gh, gw) = (img.height / p, img.width / p);
    let mut idx = Vec::with_capacity(img.numel());
    for pi in 0..gh {
        for pj in 0..gw {
            for di in 0..p {
                for dj in 0..p {
                    let pix = ((pi * p + di) * w + pj * p + dj) * c;
                    idx.extend(pix..pix + c);
                }
            }
        }
    }
    Ok(idx)
}

fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (j, &i) in idx.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

/// Repeats a per-item index for `batch` items of `stride` elements each.
fn batched(idx: &[usize], batch: usize, stride: usize) -> Rc<[usize]> {
    (0..batch)
        .flat_map(|b| idx.iter().map(move |&i| b * stride + i))
        .collect()
}

fn image_dims_of(shape: &[usize]) -> Result<(usize, ImageDims)> {
    match *shape {
        [h, w, c] => Ok((1, ImageDims::new(h, w, c))),
        [b, h, w, c] => Ok((b, ImageDims::new(h, w, c))),
        _ => Err(Error::Dimension(format!(
            "expected [H, W, C] or [B, H, W, C], got {shape:?}"
        ))),
    }
}

/// `[H, W, C] -> [N, P*P*C]`, or `[B, H, W, C] -> [B, N, P*P*C]`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, img) = image_dims_of(image.shape())?;
    let idx = batched(&patch_index(img, p)?, b, img.numel());
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    let (n, pd) = (img.tokens(p), img.patch_dim(p));
    let shape = if image.rank() == 3 {
        vec![n, pd]
    } else {
        vec![b, n, pd]
    };
    Tensor::new(&shape, data)
}

fn check_patches(shape: &[usize], img: ImageDims, p: usize) -> Result<usize> {
    img.check_patch(p)?;
    let (n, pd) = (img.tokens(p), img.patch_dim(p));
    let (b, rest) = match shape {
        [_, _] => (1, shape),
        [b, rest @ ..] if rest.len() == 2 => (*b, rest),
        _ => {
            return Err(Error::Dimension(format!(
                "patches must be rank 2 or 3, got {shape:?}"
            )))
        }
    };
    if rest != [n, pd] {
        return Err(Error::Dimension(format!(
            "patches {shape:?} do not tile a {}x{}x{} image with P={p} (need [{n}, {pd}])",
            img.height, img.width, img.channels
        )));
    }
    Ok(b)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, img: ImageDims, p: usize) -> Result<Tensor<T>> {
    let b = check_patches(patches.shape(), img, p)?;
    let inv = batched(&invert(&patch_index(img, p)?), b, img.numel());
    let data = inv.iter().map(|&i| patches.data()[i]).collect();
    let shape = if patches.rank() == 2 {
        img.shape().to_vec()
    } else {
        vec![b, img.height, img.width, img.channels]
    };
    Tensor::new(&shape, data)
}

/// Differentiable [`unpatchify`] of `[B, N, P*P*C]` patches.
pub fn unpatchify_var<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    img: ImageDims,
    p: usize,
) -> Result<Var> {
    let b = check_patches(g.value(patches).shape(), img, p)?;
    let inv = batched(&invert(&patch_index(img, p)?), b, img.numel());
    g.gather(patches, inv, &[b, img.height, img.width, img.channels])
}

/// Fixed 1-D sinusoidal table over token positions.
pub fn sinusoidal_pos_encoding<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs an even width, got {d}"
        )));
    }
    let mut data = vec![0.0f64; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_f64(&[n, d], &data)
}

/// `(q, k, v) = z W_i + b_i + u`, multi-head attention, then `W_o`.
///
/// `z` is `[N, D]` or `[B, N, D]`; `u` must broadcast against the packed
/// `[.., N, 3D]` projections, so `[N, 3D]`, `[1, 3D]` and `[B, 1, 3D]` all work.
pub fn attention_with_injection<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    u: Option<Var>,
    p: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    let z3 = match shape.len() {
        2 => g.reshape(z, &[1, shape[0], shape[1]])?,
        3 => z,
        _ => {
            return Err(Error::Dimension(format!(
                "attention input must be rank 2 or 3, got {shape:?}"
            )))
        }
    };
    let mut qkv = g.linear(z3, p.qkv_weight, p.qkv_bias)?;
    if let Some(u) = u {
        qkv = g.add(qkv, u).map_err(|e| match e {
            Error::Dimension(m) => Error::Dimension(format!("injection does not broadcast: {m}")),
            other => other,
        })?;
    }
    let a = g.attention(qkv, heads)?;
    let out = g.linear(a, p.proj_weight, p.proj_bias)?;
    if shape.len() == 2 {
        g.reshape(out, &shape)
    } else {
        Ok(out)
    }
}

/// Pre-LN block: `z + Attn(LN(z), u)`, then `z + FFN(LN(z))` with GELU.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    u: Option<Var>,
    p: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let h = g.layer_norm(z, p.norm1_gamma, p.norm1_beta, LN_EPS)?;
    let a = attention_with_injection(g, h, u, p, heads)?;
    let z = g.add(z, a)?;
    let h = g.layer_norm(z, p.norm2_gamma, p.norm2_beta, LN_EPS)?;
    let h = g.linear(h, p.fc1_weight, p.fc1_bias)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.fc2_weight, p.fc2_bias)?;
    g.add(z, h)
}
