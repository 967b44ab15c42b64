//! Fully convolutional 3D U-Net.
//!
//! Each encoder level holds two 3x3x3 conv + instance norm + ReLU layers;
//! levels are joined by 2x max pooling and channel width doubles per level.
//! Decoder levels reduce width with a 1x1 conv, upsample, concatenate the skip
//! and apply two more such layers.

use super::network::{Binder, Builder, NetworkConfig};
use crate::nn::{Tape, Var};

fn register_block(b: &mut Builder, prefix: &str, cin: usize, c: usize) {
    b.conv(&format!("{prefix}.conv1"), cin, c, 3);
    b.norm(&format!("{prefix}.norm1"), c);
    b.conv(&format!("{prefix}.conv2"), c, c, 3);
    b.norm(&format!("{prefix}.norm2"), c);
}

fn width(cfg: &NetworkConfig, level: usize) -> usize {
    cfg.base_channels << level
}

pub(super) fn register(b: &mut Builder, cfg: &NetworkConfig) {
    let mut cin = 1;
    for s in 0..=cfg.depth {
        let c = width(cfg, s);
        register_block(b, &format!("enc{s}"), cin, c);
        cin = c;
    }
    for s in (0..cfg.depth).rev() {
        let c = width(cfg, s);
        b.conv(&format!("dec{s}.reduce"), width(cfg, s + 1), c, 1);
        register_block(b, &format!("dec{s}"), 2 * c, c);
    }
    b.conv("head", width(cfg, 0), 2, 1);
}

pub(super) fn forward(p: &Binder<'_>, tape: &mut Tape, x: Var, cfg: &NetworkConfig) -> Var {
    let block = |tape: &mut Tape, prefix: &str, x: Var| {
        let mut h = x;
        for i in 1..=2 {
            h = p.conv(tape, &format!("{prefix}.conv{i}"), h);
            h = p.instance_norm(tape, &format!("{prefix}.norm{i}"), h);
            h = tape.relu(h);
        }
        h
    };
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for s in 0..=cfg.depth {
        if s > 0 {
            h = tape.max_pool2(h);
        }
        h = block(tape, &format!("enc{s}"), h);
        if s < cfg.depth {
            skips.push(h);
        }
    }
    for s in (0..cfg.depth).rev() {
        h = p.conv(tape, &format!("dec{s}.reduce"), h);
        h = tape.upsample2(h);
        h = tape.concat(skips[s], h);
        h = block(tape, &format!("dec{s}"), h);
    }
    p.conv(tape, "head", h)
}
