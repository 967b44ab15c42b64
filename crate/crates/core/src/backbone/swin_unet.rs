//! U-shaped network of windowed self-attention blocks.
//!
//! Stage `s` runs two transformer blocks at width `C * 2^s`, the second with
//! cyclically shifted windows. Downsampling is patch merging (2x2x2
//! space-to-depth, norm, linear); upsampling is the inverse expansion
//! followed by skip concatenation and a linear fuse.

use super::network::{Binder, Builder, NetworkConfig};
use crate::nn::{Tape, Var};

fn width(cfg: &NetworkConfig, s: usize) -> usize {
    cfg.base_channels << s
}

fn heads(cfg: &NetworkConfig, s: usize) -> usize {
    cfg.heads << s
}

fn register_block(b: &mut Builder, name: &str, c: usize) {
    b.norm(&format!("{name}.norm1"), c);
    b.linear(&format!("{name}.qkv"), c, 3 * c);
    b.linear(&format!("{name}.proj"), c, c);
    b.norm(&format!("{name}.norm2"), c);
    b.linear(&format!("{name}.fc1"), c, 2 * c);
    b.linear(&format!("{name}.fc2"), 2 * c, c);
}

fn register_stage(b: &mut Builder, name: &str, c: usize) {
    register_block(b, &format!("{name}.block0"), c);
    register_block(b, &format!("{name}.block1"), c);
}

pub(super) fn register(b: &mut Builder, cfg: &NetworkConfig) {
    let c0 = width(cfg, 0);
    b.conv("stem", 1, c0, 3);
    for s in 0..=cfg.depth {
        let c = width(cfg, s);
        if s > 0 {
            let prev = width(cfg, s - 1);
            b.norm(&format!("merge{s}.norm"), 8 * prev);
            b.linear(&format!("merge{s}.linear"), 8 * prev, c);
        }
        register_stage(b, &format!("enc{s}"), c);
    }
    for s in (0..cfg.depth).rev() {
        let c = width(cfg, s);
        b.linear(&format!("expand{s}.linear"), width(cfg, s + 1), 8 * c);
        b.linear(&format!("expand{s}.fuse"), 2 * c, c);
        register_stage(b, &format!("dec{s}"), c);
    }
    b.norm("final_norm", c0);
    b.linear("head", c0, 2);
}

fn block(p: &Binder<'_>, tape: &mut Tape, name: &str, x: Var, heads: usize, window: usize, shift: usize) -> Var {
    let h = p.norm(tape, &format!("{name}.norm1"), x);
    let qkv = p.conv(tape, &format!("{name}.qkv"), h);
    let a = tape.window_attention(qkv, heads, window, shift);
    let a = p.conv(tape, &format!("{name}.proj"), a);
    let x = tape.add(x, a);
    let h = p.norm(tape, &format!("{name}.norm2"), x);
    let h = p.conv(tape, &format!("{name}.fc1"), h);
    let h = tape.gelu(h);
    let h = p.conv(tape, &format!("{name}.fc2"), h);
    tape.add(x, h)
}

fn stage(p: &Binder<'_>, tape: &mut Tape, name: &str, x: Var, heads: usize, window: usize) -> Var {
    let edge = tape.value(x).spatial().into_iter().min().unwrap_or(0);
    // A single window covering the whole grid gains nothing from shifting.
    let shift = if edge > window { window / 2 } else { 0 };
    let x = block(p, tape, &format!("{name}.block0"), x, heads, window, 0);
    block(p, tape, &format!("{name}.block1"), x, heads, window, shift)
}

pub(super) fn forward(p: &Binder<'_>, tape: &mut Tape, x: Var, cfg: &NetworkConfig) -> Var {
    let mut h = p.conv(tape, "stem", x);
    let mut skips = Vec::with_capacity(cfg.depth);
    for s in 0..=cfg.depth {
        if s > 0 {
            h = tape.space_to_depth(h);
            h = p.norm(tape, &format!("merge{s}.norm"), h);
            h = p.conv(tape, &format!("merge{s}.linear"), h);
        }
        h = stage(p, tape, &format!("enc{s}"), h, heads(cfg, s), cfg.window);
        if s < cfg.depth {
            skips.push(h);
        }
    }
    for s in (0..cfg.depth).rev() {
        h = p.conv(tape, &format!("expand{s}.linear"), h);
        h = tape.depth_to_space(h);
        h = tape.concat(skips[s], h);
        h = p.conv(tape, &format!("expand{s}.fuse"), h);
        h = stage(p, tape, &format!("dec{s}"), h, heads(cfg, s), cfg.window);
    }
    let h = p.norm(tape, "final_norm", h);
    p.conv(tape, "head", h)
}
