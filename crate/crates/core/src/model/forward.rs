use std::rc::Rc;

use super::config::{GetConfig, ImageDims, ModelConfig, VitConfig};
use super::layers::{patchify, transformer_block, unpatchify_var, LN_EPS};
use super::params::{BlockVars, ModelParams, ParamVars, BLOCK_TENSORS, POS_EMBED};
use crate::error::{Error, Result};
use crate::fixed_point::{unrolled_forward, StepFn, UnrollMode};
use crate::tensor::{Graph, Scalar, Tensor, Var};

fn check_noise(shape: &[usize], img: ImageDims) -> Result<usize> {
    match *shape {
        [b, h, w, c] if [h, w, c] == img.shape() => Ok(b),
        _ => Err(Error::Dimension(format!(
            "noise {shape:?} does not match [B, {}, {}, {}]",
            img.height, img.width, img.channels
        ))),
    }
}

/// Validates labels against the class count and returns the class token
/// `[B, 1, 3D]`, if any.
pub fn class_token<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    n_classes: usize,
    width: usize,
    batch: usize,
    labels: Option<&[usize]>,
) -> Result<Option<Var>> {
    match (n_classes, labels) {
        (0, None) => Ok(None),
        (0, Some(_)) => Err(Error::Contract(
            "unconditional model given a class label".into(),
        )),
        (_, None) => Err(Error::Contract(
            "conditional model needs a class label".into(),
        )),
        (k, Some(y)) => {
            if y.len() != batch {
                return Err(Error::Contract(format!(
                    "{} labels for a batch of {batch}",
                    y.len()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= k) {
                return Err(Error::Contract(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            let d3 = 3 * width;
            let idx: Rc<[usize]> = y.iter().flat_map(|&l| (l * d3)..(l * d3 + d3)).collect();
            let table = vars.get("class_embed")?;
            g.gather(table, idx, &[batch, 1, d3]).map(Some)
        }
    }
}

/// Patch embedding plus the positional table: `[B, H, W, C] -> [B, N, D]`.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    noise: &Tensor<T>,
    img: ImageDims,
    patch: usize,
) -> Result<Var> {
    check_noise(noise.shape(), img)?;
    let patches = g.constant(patchify(noise, patch)?);
    let h = g.linear(patches, vars.get("embed.weight")?, vars.get("embed.bias")?)?;
    g.add(h, vars.get(POS_EMBED)?)
}

fn decode<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    z: Var,
    img: ImageDims,
    patch: usize,
) -> Result<Var> {
    let h = g.layer_norm(
        z,
        vars.get("final_norm.gamma")?,
        vars.get("final_norm.beta")?,
        LN_EPS,
    )?;
    let out = g.linear(h, vars.get("decoder.weight")?, vars.get("decoder.bias")?)?;
    unpatchify_var(g, out, img, patch)
}

/// Runs the injection blocks on `h` and returns one `[B, N, 3D]` noise
/// injection per equilibrium block.
pub fn injection_transform<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &GetConfig,
    h: Var,
    c: Option<Var>,
) -> Result<Vec<Var>> {
    match (cfg.n_classes, c) {
        (0, Some(_)) => {
            return Err(Error::Contract(
                "class token given to an unconditional model".into(),
            ))
        }
        (k, None) if k > 0 => {
            return Err(Error::Contract(
                "conditional model needs a class token".into(),
            ))
        }
        _ => {}
    }
    let mut z = h;
    for i in 0..cfg.injection_depth {
        let p = vars.block(&format!("inj.{i}"))?;
        z = transformer_block(g, z, c, &p, cfg.heads)?;
    }
    (0..cfg.equilibrium_depth)
        .map(|l| {
            g.linear(
                z,
                vars.get(&format!("inj_out.{l}.weight"))?,
                vars.get(&format!("inj_out.{l}.bias"))?,
            )
        })
        .collect()
}

/// The weight-tied equilibrium map. Its inputs are, per block, the twelve
/// block tensors followed by that block's injection `u_l`.
pub fn equilibrium_step<T: Scalar>(depth: usize, heads: usize) -> StepFn<T> {
    Rc::new(move |g, z, inputs| {
        let stride = BLOCK_TENSORS + 1;
        if inputs.len() != depth * stride {
            return Err(Error::Contract(format!(
                "equilibrium map expects {} inputs, got {}",
                depth * stride,
                inputs.len()
            )));
        }
        let mut z = z;
        for l in 0..depth {
            let args = &inputs[l * stride..(l + 1) * stride];
            let p = BlockVars::from_slice(&args[..BLOCK_TENSORS])?;
            z = transformer_block(g, z, Some(args[BLOCK_TENSORS]), &p, heads)?;
        }
        Ok(z)
    })
}

/// Everything the equilibrium map needs besides the state: block tensors and
/// injections `u_l = n_l (+ c)`, laid out for [`equilibrium_step`].
pub fn equilibrium_inputs<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &GetConfig,
    injections: &[Var],
    c: Option<Var>,
) -> Result<Vec<Var>> {
    let mut inputs = Vec::with_capacity(cfg.equilibrium_depth * (BLOCK_TENSORS + 1));
    for (l, &n) in injections.iter().enumerate() {
        inputs.extend(vars.block(&format!("eq.{l}"))?.to_vec());
        inputs.push(match c {
            Some(c) => g.add(n, c)?,
            None => n,
        });
    }
    Ok(inputs)
}

/// Noise `[B, H, W, C]` to images of the same shape in one pass, running
/// `k` weight-tied equilibrium iterations from `z0 = 0`.
#[allow(clippy::too_many_arguments)]
pub fn get_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &GetConfig,
    noise: &Tensor<T>,
    labels: Option<&[usize]>,
    k: usize,
    mode: UnrollMode,
) -> Result<Var> {
    let b = check_noise(noise.shape(), cfg.image)?;
    let c = class_token(g, vars, cfg.n_classes, cfg.width, b, labels)?;
    let h = embed(g, vars, noise, cfg.image, cfg.patch)?;
    let injections = injection_transform(g, vars, cfg, h, c)?;
    let inputs = equilibrium_inputs(g, vars, cfg, &injections, c)?;
    let z0 = g.constant(Tensor::zeros(&[b, cfg.tokens(), cfg.width]));
    let step = equilibrium_step(cfg.equilibrium_depth, cfg.heads);
    let z = unrolled_forward(g, step, z0, &inputs, k, mode)?;
    decode(g, vars, z, cfg.image, cfg.patch)
}

/// The ViT baseline: `depth` independent blocks, `u = c` or nothing.
pub fn vit_forward<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    cfg: &VitConfig,
    noise: &Tensor<T>,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let b = check_noise(noise.shape(), cfg.image)?;
    let c = class_token(g, vars, cfg.n_classes, cfg.width, b, labels)?;
    let mut z = embed(g, vars, noise, cfg.image, cfg.patch)?;
    for i in 0..cfg.depth {
        let p = vars.block(&format!("blocks.{i}"))?;
        z = transformer_block(g, z, c, &p, cfg.heads)?;
    }
    decode(g, vars, z, cfg.image, cfg.patch)
}

/// Config plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Records a forward pass on `g` using already registered `vars`. `k`
    /// only matters for GET.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        noise: &Tensor<T>,
        labels: Option<&[usize]>,
        k: usize,
        mode: UnrollMode,
    ) -> Result<Var> {
        match &self.config {
            ModelConfig::Get(c) => get_forward(g, vars, c, noise, labels, k, mode),
            ModelConfig::Vit(c) => vit_forward(g, vars, c, noise, labels),
        }
    }

    /// Inference: images for a batch of noises, no gradient bookkeeping kept.
    pub fn generate(
        &self,
        noise: &Tensor<T>,
        labels: Option<&[usize]>,
        k: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.register_frozen(&mut g);
        let out = self.forward(&mut g, &vars, noise, labels, k, UnrollMode::Plain)?;
        Ok(g.value(out).clone())
    }
}
