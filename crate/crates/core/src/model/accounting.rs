//! Closed-form parameter and multiply-accumulate counts.

use super::config::{GetConfig, ModelConfig, VitConfig, DEFAULT_EXPANSION};

fn block_params(d: u64, e: u64) -> u64 {
    let norms = 4 * d;
    let qkv = 3 * d * d + 3 * d;
    let proj = d * d + d;
    let ffn = e * d * d + e * d + e * d * d + d;
    norms + qkv + proj + ffn
}

fn block_macs(n: u64, d: u64, e: u64) -> u64 {
    let projections = n * d * 3 * d + n * d * d;
    let attention = 2 * n * n * d;
    let ffn = 2 * n * d * e * d;
    projections + attention + ffn
}

struct Shared {
    n: u64,
    d: u64,
    pd: u64,
    classes: u64,
}

fn shared(cfg: &ModelConfig) -> Shared {
    let img = cfg.image();
    Shared {
        n: img.tokens(cfg.patch()) as u64,
        d: cfg.width() as u64,
        pd: img.patch_dim(cfg.patch()) as u64,
        classes: cfg.n_classes() as u64,
    }
}

/// Learned parameters, biases and class table included. The fixed
/// positional table is not learned and is not counted.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let s = shared(cfg);
    let d = s.d;
    let io = (s.pd * d + d) + 2 * d + (d * s.pd + s.pd) + s.classes * 3 * d;
    let four = DEFAULT_EXPANSION as u64;
    io + match cfg {
        ModelConfig::Get(c) => get_body_params(c, d, four),
        ModelConfig::Vit(c) => c.depth as u64 * block_params(d, four),
    }
}

fn get_body_params(c: &GetConfig, d: u64, four: u64) -> u64 {
    let (li, le) = (c.injection_depth as u64, c.equilibrium_depth as u64);
    li * block_params(d, four) + le * (3 * d * d + 3 * d) + le * block_params(d, c.expansion as u64)
}

/// Multiply-accumulates of one forward sample, counting one MAC as one FLOP.
/// For GET the equilibrium blocks are counted `k` times; ViT ignores `k`.
pub fn count_flops(cfg: &ModelConfig, k: usize) -> u64 {
    let s = shared(cfg);
    let (n, d) = (s.n, s.d);
    let io = n * s.pd * d + n * d * s.pd;
    let four = DEFAULT_EXPANSION as u64;
    io + match cfg {
        ModelConfig::Get(c) => {
            let (li, le) = (c.injection_depth as u64, c.equilibrium_depth as u64);
            li * block_macs(n, d, four) + le * n * d * 3 * d + k as u64 * equilibrium_macs(c)
        }
        ModelConfig::Vit(VitConfig { depth, .. }) => *depth as u64 * block_macs(n, d, four),
    }
}

/// MACs of one application of the equilibrium map.
pub fn equilibrium_macs(c: &GetConfig) -> u64 {
    let (n, d) = (c.tokens() as u64, c.width as u64);
    c.equilibrium_depth as u64 * block_macs(n, d, c.expansion as u64)
}
