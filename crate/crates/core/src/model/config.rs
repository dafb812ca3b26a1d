use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// FFN expansion used by injection blocks and by every ViT block.
pub const DEFAULT_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageDims {
            height,
            width,
            channels,
        }
    }

    pub const fn cifar() -> Self {
        ImageDims::new(32, 32, 3)
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Token count `HW / P^2`.
    pub fn tokens(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch)
    }

    pub fn patch_dim(&self, patch: usize) -> usize {
        patch * patch * self.channels
    }

    pub(crate) fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Heads used when a config does not name them: one per 64 channels.
pub fn default_heads(width: usize) -> usize {
    (width / 64).max(1)
}

/// Generative Equilibrium Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GetConfig {
    pub image: ImageDims,
    pub patch: usize,
    /// Token width `D`.
    pub width: usize,
    /// Injection transformer depth `L_i`.
    pub injection_depth: usize,
    /// Equilibrium transformer depth `L_e`.
    pub equilibrium_depth: usize,
    /// FFN expansion `E` of the equilibrium blocks.
    pub expansion: usize,
    pub heads: usize,
    /// 0 means unconditional.
    pub n_classes: usize,
    /// Fixed-point iterations `K`.
    pub iterations: usize,
}

/// Vision transformer baseline hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image: ImageDims,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub n_classes: usize,
}

impl GetConfig {
    fn preset(li: usize, le: usize, d: usize, e: usize) -> Self {
        GetConfig {
            image: ImageDims::cifar(),
            patch: 2,
            width: d,
            injection_depth: li,
            equilibrium_depth: le,
            expansion: e,
            heads: default_heads(d),
            n_classes: 0,
            iterations: 6,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(6, 3, 256, 6)
    }
    pub fn mini() -> Self {
        Self::preset(6, 3, 384, 6)
    }
    pub fn small() -> Self {
        Self::preset(6, 3, 512, 6)
    }
    pub fn base() -> Self {
        Self::preset(1, 3, 768, 12)
    }
    pub fn base_plus() -> Self {
        Self::preset(6, 3, 768, 8)
    }

    /// Desk-scale model used for the toy distillation runs: 8x8x1 images,
    /// D = 64, two injection and two equilibrium blocks, one head.
    pub fn micro() -> Self {
        GetConfig {
            image: ImageDims::new(8, 8, 1),
            patch: 2,
            width: 64,
            injection_depth: 2,
            equilibrium_depth: 2,
            expansion: 4,
            heads: 1,
            n_classes: 0,
            iterations: 6,
        }
    }

    pub fn tokens(&self) -> usize {
        self.image.tokens(self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.image.check_patch(self.patch)?;
        validate_width(self.width, self.heads)?;
        if self.injection_depth == 0 || self.equilibrium_depth == 0 {
            return Err(Error::Config(
                "GET depths L_i and L_e must be at least 1".into(),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::Config("FFN expansion must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config(
                "fixed-point iterations K must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl VitConfig {
    fn preset(depth: usize, d: usize) -> Self {
        VitConfig {
            image: ImageDims::cifar(),
            patch: 2,
            width: d,
            depth,
            heads: default_heads(d),
            n_classes: 0,
        }
    }

    pub fn base() -> Self {
        Self::preset(12, 768)
    }
    pub fn large() -> Self {
        Self::preset(24, 1024)
    }

    pub fn tokens(&self) -> usize {
        self.image.tokens(self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.image.check_patch(self.patch)?;
        validate_width(self.width, self.heads)?;
        if self.depth == 0 {
            return Err(Error::Config("ViT depth must be at least 1".into()));
        }
        Ok(())
    }
}

fn validate_width(width: usize, heads: usize) -> Result<()> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    if width % 2 != 0 {
        return Err(Error::Config(format!(
            "width {width} must be even for sinusoidal encoding"
        )));
    }
    Ok(())
}

/// Either architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelConfig {
    Get(GetConfig),
    Vit(VitConfig),
}

impl ModelConfig {
    pub fn image(&self) -> ImageDims {
        match self {
            ModelConfig::Get(c) => c.image,
            ModelConfig::Vit(c) => c.image,
        }
    }

    pub fn patch(&self) -> usize {
        match self {
            ModelConfig::Get(c) => c.patch,
            ModelConfig::Vit(c) => c.patch,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ModelConfig::Get(c) => c.width,
            ModelConfig::Vit(c) => c.width,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::Get(c) => c.n_classes,
            ModelConfig::Vit(c) => c.n_classes,
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.n_classes() > 0
    }

    /// Default fixed-point iterations; ViT has none and reports 1.
    pub fn iterations(&self) -> usize {
        match self {
            ModelConfig::Get(c) => c.iterations,
            ModelConfig::Vit(_) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Get(c) => c.validate(),
            ModelConfig::Vit(c) => c.validate(),
        }
    }

    /// Canonical `key = value` description; stable across runs and used for
    /// the checkpoint config hash.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let img = self.image();
        match self {
            ModelConfig::Get(c) => {
                let _ = writeln!(s, "kind = get");
                let _ = writeln!(s, "image = {}x{}x{}", img.height, img.width, img.channels);
                let _ = writeln!(s, "patch = {}", c.patch);
                let _ = writeln!(s, "width = {}", c.width);
                let _ = writeln!(s, "injection_depth = {}", c.injection_depth);
                let _ = writeln!(s, "equilibrium_depth = {}", c.equilibrium_depth);
                let _ = writeln!(s, "expansion = {}", c.expansion);
                let _ = writeln!(s, "heads = {}", c.heads);
                let _ = writeln!(s, "classes = {}", c.n_classes);
            }
            ModelConfig::Vit(c) => {
                let _ = writeln!(s, "kind = vit");
                let _ = writeln!(s, "image = {}x{}x{}", img.height, img.width, img.channels);
                let _ = writeln!(s, "patch = {}", c.patch);
                let _ = writeln!(s, "width = {}", c.width);
                let _ = writeln!(s, "depth = {}", c.depth);
                let _ = writeln!(s, "heads = {}", c.heads);
                let _ = writeln!(s, "classes = {}", c.n_classes);
            }
        }
        s
    }

    /// First eight bytes of SHA-256 over [`ModelConfig::describe`].
    ///
    /// The iteration count is excluded: it is an inference-time knob and does
    /// not change the parameter set.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.describe().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
