use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, DEFAULT_EXPANSION};
use super::layers::sinusoidal_pos_encoding;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Name of the fixed sinusoidal table; registered but never trained.
pub const POS_EMBED: &str = "pos_embed";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Fixed,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Parameter names and shapes of one transformer block.
fn block_layout(prefix: &str, d: usize, e: usize, out: &mut Vec<(String, Vec<usize>, Init)>) {
    let mut push = |name: &str, shape: Vec<usize>, init| {
        out.push((format!("{prefix}.{name}"), shape, init));
    };
    push("norm1.gamma", vec![d], Init::Ones);
    push("norm1.beta", vec![d], Init::Zeros);
    push("attn.qkv.weight", vec![d, 3 * d], Init::TruncNormal);
    push("attn.qkv.bias", vec![3 * d], Init::Zeros);
    push("attn.proj.weight", vec![d, d], Init::TruncNormal);
    push("attn.proj.bias", vec![d], Init::Zeros);
    push("norm2.gamma", vec![d], Init::Ones);
    push("norm2.beta", vec![d], Init::Zeros);
    push("mlp.fc1.weight", vec![d, e * d], Init::TruncNormal);
    push("mlp.fc1.bias", vec![e * d], Init::Zeros);
    push("mlp.fc2.weight", vec![e * d, d], Init::TruncNormal);
    push("mlp.fc2.bias", vec![d], Init::Zeros);
}

/// Number of tensors [`block_layout`] registers.
pub(crate) const BLOCK_TENSORS: usize = 12;

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let img = cfg.image();
    let (d, p) = (cfg.width(), cfg.patch());
    let (n, pd) = (img.tokens(p), img.patch_dim(p));
    let mut out = vec![
        ("embed.weight".to_string(), vec![pd, d], Init::TruncNormal),
        ("embed.bias".to_string(), vec![d], Init::Zeros),
        (POS_EMBED.to_string(), vec![n, d], Init::Fixed),
    ];
    if cfg.n_classes() > 0 {
        out.push((
            "class_embed".to_string(),
            vec![cfg.n_classes(), 3 * d],
            Init::TruncNormal,
        ));
    }
    match cfg {
        ModelConfig::Get(c) => {
            for i in 0..c.injection_depth {
                block_layout(&format!("inj.{i}"), d, DEFAULT_EXPANSION, &mut out);
            }
            for l in 0..c.equilibrium_depth {
                out.push((
                    format!("inj_out.{l}.weight"),
                    vec![d, 3 * d],
                    Init::TruncNormal,
                ));
                out.push((format!("inj_out.{l}.bias"), vec![3 * d], Init::Zeros));
            }
            for l in 0..c.equilibrium_depth {
                block_layout(&format!("eq.{l}"), d, c.expansion, &mut out);
            }
        }
        ModelConfig::Vit(c) => {
            for i in 0..c.depth {
                block_layout(&format!("blocks.{i}"), d, DEFAULT_EXPANSION, &mut out);
            }
        }
    }
    out.push(("final_norm.gamma".to_string(), vec![d], Init::Ones));
    out.push(("final_norm.beta".to_string(), vec![d], Init::Zeros));
    out.push(("decoder.weight".to_string(), vec![d, pd], Init::Zeros));
    out.push(("decoder.bias".to_string(), vec![pd], Init::Zeros));
    out
}

/// Standard normal truncated to two standard deviations, by rejection.
fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: truncated normal (std 0.02) weights, zero biases,
    /// unit norm gains and a zero decoder. Values are drawn in `f64` so both
    /// precisions start from the same point.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image().tokens(cfg.patch());
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg) {
            let numel: usize = shape.iter().product();
            let t = match init {
                Init::TruncNormal => {
                    let data: Vec<f64> = (0..numel)
                        .map(|_| INIT_STD * trunc_normal(&mut rng))
                        .collect();
                    Tensor::from_f64(&shape, &data)?
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Fixed => sinusoidal_pos_encoding(n, cfg.width())?,
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(names, tensors))
    }

    /// Zero-filled parameters with the layout of `cfg`; used when loading.
    pub fn zeros_like_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, tensors) = layout(cfg)
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(&s)))
            .unzip();
        Ok(Self::from_parts(names, tensors))
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        ModelParams {
            names,
            tensors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Whether the optimizer updates this entry.
    pub fn is_learned(&self, i: usize) -> bool {
        self.names[i] != POS_EMBED
    }

    /// Elements in all registered tensors, learned or not.
    pub fn registered_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Elements the optimizer updates.
    pub fn learned_elements(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.is_learned(i))
            .map(|i| self.tensors[i].numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams::from_parts(
            self.names.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
        )
    }

    /// Puts every tensor on `g`: learned entries as trainable leaves, the
    /// positional table as a constant.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if self.is_learned(i) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Puts every tensor on `g` as a constant, for inference.
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|t| g.constant(t.clone())).collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph handles of a registered [`ModelParams`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    /// The twelve tensors of block `prefix`, in layout order.
    pub(crate) fn block(&self, prefix: &str) -> Result<BlockVars> {
        let i = self
            .index
            .get(&format!("{prefix}.norm1.gamma"))
            .copied()
            .ok_or_else(|| Error::Contract(format!("no block named {prefix}")))?;
        BlockVars::from_slice(&self.vars[i..i + BLOCK_TENSORS])
    }
}

/// One transformer block's parameter handles.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

impl BlockVars {
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != BLOCK_TENSORS {
            return Err(Error::Contract(format!(
                "a block has {BLOCK_TENSORS} tensors, got {}",
                v.len()
            )));
        }
        Ok(BlockVars {
            norm1_gamma: v[0],
            norm1_beta: v[1],
            qkv_weight: v[2],
            qkv_bias: v[3],
            proj_weight: v[4],
            proj_bias: v[5],
            norm2_gamma: v[6],
            norm2_beta: v[7],
            fc1_weight: v[8],
            fc1_bias: v[9],
            fc2_weight: v[10],
            fc2_bias: v[11],
        })
    }

    pub fn to_vec(self) -> Vec<Var> {
        vec![
            self.norm1_gamma,
            self.norm1_beta,
            self.qkv_weight,
            self.qkv_bias,
            self.proj_weight,
            self.proj_bias,
            self.norm2_gamma,
            self.norm2_beta,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]
    }
}
