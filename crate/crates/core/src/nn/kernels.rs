//! Raw numeric kernels behind the tape operations. Layout is always
//! channel-first with contiguous `[D, H, W]` planes.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)`
/// of shape `[k, n]`; all buffers row-major.
#[allow(clippy::too_many_arguments)]
pub(super) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the buffers whose lengths
    // were checked, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `x: [C, D, H, W]` into `[C * k^3, D*H*W]` with zero "same" padding.
pub(super) fn im2col(x: &[f32], c: usize, dims: [usize; 3], k: usize) -> Vec<f32> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let r = (k / 2) as isize;
    let mut cols = vec![0f32; c * k * k * k * n];
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * n..(ci + 1) * n];
        for a in -r..=r {
            for b in -r..=r {
                for e in -r..=r {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    row += 1;
                    let (w_lo, w_hi) = (0.max(-e) as usize, (w as isize).min(w as isize - e) as usize);
                    for zd in 0..d {
                        let sd = zd as isize + a;
                        if sd < 0 || sd >= d as isize {
                            continue;
                        }
                        for zh in 0..h {
                            let sh = zh as isize + b;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let base_dst = (zd * h + zh) * w;
                            let base_src = (sd as usize * h + sh as usize) * w;
                            for zw in w_lo..w_hi {
                                dst[base_dst + zw] = plane[base_src + (zw as isize + e) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulate columns back into `[C, D, H, W]`.
pub(super) fn col2im(cols: &[f32], c: usize, dims: [usize; 3], k: usize) -> Vec<f32> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let r = (k / 2) as isize;
    let mut x = vec![0f32; c * n];
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * n..(ci + 1) * n];
        for a in -r..=r {
            for b in -r..=r {
                for e in -r..=r {
                    let src = &cols[row * n..(row + 1) * n];
                    row += 1;
                    let (w_lo, w_hi) = (0.max(-e) as usize, (w as isize).min(w as isize - e) as usize);
                    for zd in 0..d {
                        let sd = zd as isize + a;
                        if sd < 0 || sd >= d as isize {
                            continue;
                        }
                        for zh in 0..h {
                            let sh = zh as isize + b;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let base_src = (zd * h + zh) * w;
                            let base_dst = (sd as usize * h + sh as usize) * w;
                            for zw in w_lo..w_hi {
                                plane[base_dst + (zw as isize + e) as usize] += src[base_src + zw];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2x2 max pooling; returns values and the flat source index of each max.
pub(super) fn max_pool2(x: &[f32], c: usize, dims: [usize; 3]) -> (Vec<f32>, Vec<u32>) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ci in 0..c {
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = ((ci * d + 2 * zd + a) * h + 2 * zh + b) * w + 2 * zw + e;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2x upsampling.
pub(super) fn upsample2(x: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0f32; c * od * oh * ow];
    for ci in 0..c {
        for zd in 0..od {
            for zh in 0..oh {
                let src = ((ci * d + zd / 2) * h + zh / 2) * w;
                let dst = ((ci * od + zd) * oh + zh) * ow;
                for zw in 0..ow {
                    out[dst + zw] = x[src + zw / 2];
                }
            }
        }
    }
    out
}

pub(super) fn upsample2_backward(g: &[f32], c: usize, dims: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0f32; c * d * h * w];
    for ci in 0..c {
        for zd in 0..od {
            for zh in 0..oh {
                let dst = ((ci * d + zd / 2) * h + zh / 2) * w;
                let src = ((ci * od + zd) * oh + zh) * ow;
                for zw in 0..ow {
                    out[dst + zw / 2] += g[src + zw];
                }
            }
        }
    }
    out
}

/// `[C, D, H, W] -> [8C, D/2, H/2, W/2]`; channel `8c + (a*4 + b*2 + e)` holds
/// offset `(a, b, e)` of channel `c`.
pub(super) fn space_to_depth(x: &[f32], c: usize, dims: [usize; 3], inverse: bool) -> Vec<f32> {
    let [d, h, w] = dims; // full-resolution dims
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0f32; x.len()];
    for ci in 0..c {
        for a in 0..2 {
            for b in 0..2 {
                for e in 0..2 {
                    let co = 8 * ci + a * 4 + b * 2 + e;
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                let full = ((ci * d + 2 * zd + a) * h + 2 * zh + b) * w + 2 * zw + e;
                                let half = ((co * od + zd) * oh + zh) * ow + zw;
                                if inverse {
                                    out[full] = x[half];
                                } else {
                                    out[half] = x[full];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) struct LayerNormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(super) const LN_EPS: f32 = 1e-5;

/// Normalize over channels at each voxel.
pub(super) fn layer_norm(x: &[f32], c: usize, n: usize, gamma: &[f32], beta: &[f32]) -> (Vec<f32>, LayerNormCache) {
    let mut mean = vec![0f32; n];
    for ci in 0..c {
        for (m, v) in mean.iter_mut().zip(&x[ci * n..(ci + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f32);
    let mut var = vec![0f32; n];
    for ci in 0..c {
        for ((s, v), m) in var.iter_mut().zip(&x[ci * n..(ci + 1) * n]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let rstd: Vec<f32> = var.iter().map(|s| 1.0 / (s / c as f32 + LN_EPS).sqrt()).collect();
    let mut xhat = vec![0f32; c * n];
    let mut out = vec![0f32; c * n];
    for ci in 0..c {
        for i in 0..n {
            let xh = (x[ci * n + i] - mean[i]) * rstd[i];
            xhat[ci * n + i] = xh;
            out[ci * n + i] = xh * gamma[ci] + beta[ci];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns (dx, dgamma, dbeta).
pub(super) fn layer_norm_backward(
    g: &[f32],
    cache: &LayerNormCache,
    c: usize,
    n: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    let mut sum_dxh = vec![0f32; n];
    let mut sum_dxh_xh = vec![0f32; n];
    for ci in 0..c {
        for i in 0..n {
            let gi = g[ci * n + i];
            let xh = cache.xhat[ci * n + i];
            dgamma[ci] += gi * xh;
            dbeta[ci] += gi;
            let dxh = gi * gamma[ci];
            sum_dxh[i] += dxh;
            sum_dxh_xh[i] += dxh * xh;
        }
    }
    let inv_c = 1.0 / c as f32;
    let mut dx = vec![0f32; c * n];
    for ci in 0..c {
        for i in 0..n {
            let dxh = g[ci * n + i] * gamma[ci];
            let xh = cache.xhat[ci * n + i];
            dx[ci * n + i] = cache.rstd[i] * (dxh - inv_c * sum_dxh[i] - xh * inv_c * sum_dxh_xh[i]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalize each channel over its voxels. The cache holds one `rstd` per channel.
pub(super) fn instance_norm(x: &[f32], c: usize, n: usize, gamma: &[f32], beta: &[f32]) -> (Vec<f32>, LayerNormCache) {
    let mut xhat = vec![0f32; c * n];
    let mut out = vec![0f32; c * n];
    let mut rstd = vec![0f32; c];
    for ci in 0..c {
        let xs = &x[ci * n..(ci + 1) * n];
        let mean = xs.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + f64::from(LN_EPS)).sqrt();
        rstd[ci] = r as f32;
        for (i, &v) in xs.iter().enumerate() {
            let xh = ((f64::from(v) - mean) * r) as f32;
            xhat[ci * n + i] = xh;
            out[ci * n + i] = xh * gamma[ci] + beta[ci];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

/// Returns (dx, dgamma, dbeta).
pub(super) fn instance_norm_backward(
    g: &[f32],
    cache: &LayerNormCache,
    c: usize,
    n: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0f32; c * n];
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    for ci in 0..c {
        let gs = &g[ci * n..(ci + 1) * n];
        let xh = &cache.xhat[ci * n..(ci + 1) * n];
        let (mut sg, mut sgx) = (0f64, 0f64);
        for (&gi, &x) in gs.iter().zip(xh) {
            sg += f64::from(gi);
            sgx += f64::from(gi) * f64::from(x);
        }
        dgamma[ci] = sgx as f32;
        dbeta[ci] = sg as f32;
        let k = f64::from(gamma[ci]) * f64::from(cache.rstd[ci]);
        let (mg, mgx) = (sg / n as f64, sgx / n as f64);
        for (i, (&gi, &x)) in gs.iter().zip(xh).enumerate() {
            dx[ci * n + i] = (k * (f64::from(gi) - mg - f64::from(x) * mgx)) as f32;
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

pub(super) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Geometry of (shifted) non-overlapping cubic windows.
#[derive(Clone, Copy, Debug)]
pub(super) struct Windows {
    pub dims: [usize; 3],
    pub window: usize,
    pub shift: usize,
}

impl Windows {
    pub fn count(&self) -> usize {
        self.dims.iter().map(|d| d / self.window).product()
    }

    pub fn tokens(&self) -> usize {
        self.window.pow(3)
    }

    /// Flat voxel index of token `t` in window `win`; windows tile the grid
    /// cyclically shifted by `shift` voxels along every axis.
    pub fn voxel(&self, win: usize, t: usize) -> usize {
        let [d, h, w] = self.dims;
        let ws = self.window;
        let (nh, nw) = (h / ws, w / ws);
        let (wd, wh, ww) = (win / (nh * nw), (win / nw) % nh, win % nw);
        let (td, th, tw) = (t / (ws * ws), (t / ws) % ws, t % ws);
        let zd = (wd * ws + td + self.shift) % d;
        let zh = (wh * ws + th + self.shift) % h;
        let zw = (ww * ws + tw + self.shift) % w;
        (zd * h + zh) * w + zw
    }
}

/// Multi-head self-attention inside windows. `qkv` is `[3C, N]` (q, k, v
/// stacked on channels); output `[C, N]`. Returns the attention weights,
/// laid out `[window][head][query][key]`, for the backward pass.
pub(super) fn window_attention(qkv: &[f32], c: usize, heads: usize, win: Windows) -> (Vec<f32>, Vec<f32>) {
    let n: usize = win.dims.iter().product();
    let t = win.tokens();
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0f32; c * n];
    let mut attn = vec![0f32; win.count() * heads * t * t];
    let mut q = vec![0f32; t * dh];
    let mut k = vec![0f32; t * dh];
    let mut v = vec![0f32; t * dh];
    let mut o = vec![0f32; t * dh];
    let vox: Vec<usize> = (0..t).collect();
    for wi in 0..win.count() {
        let idx: Vec<usize> = vox.iter().map(|&ti| win.voxel(wi, ti)).collect();
        for hd in 0..heads {
            gather(qkv, n, hd * dh, dh, &idx, &mut q);
            gather(qkv, n, c + hd * dh, dh, &idx, &mut k);
            gather(qkv, n, 2 * c + hd * dh, dh, &idx, &mut v);
            let a = &mut attn[((wi * heads) + hd) * t * t..((wi * heads) + hd + 1) * t * t];
            gemm(t, dh, t, &q, false, &k, true, a, 0.0);
            for row in a.chunks_mut(t) {
                let mut mx = f32::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            gemm(t, t, dh, a, false, &v, false, &mut o, 0.0);
            scatter_set(&mut out, n, hd * dh, dh, &idx, &o);
        }
    }
    (out, attn)
}

pub(super) fn window_attention_backward(
    g: &[f32],
    qkv: &[f32],
    attn: &[f32],
    c: usize,
    heads: usize,
    win: Windows,
) -> Vec<f32> {
    let n: usize = win.dims.iter().product();
    let t = win.tokens();
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dqkv = vec![0f32; 3 * c * n];
    let mut q = vec![0f32; t * dh];
    let mut k = vec![0f32; t * dh];
    let mut v = vec![0f32; t * dh];
    let mut go = vec![0f32; t * dh];
    let mut da = vec![0f32; t * t];
    let mut dq = vec![0f32; t * dh];
    let mut dk = vec![0f32; t * dh];
    let mut dv = vec![0f32; t * dh];
    for wi in 0..win.count() {
        let idx: Vec<usize> = (0..t).map(|ti| win.voxel(wi, ti)).collect();
        for hd in 0..heads {
            gather(qkv, n, hd * dh, dh, &idx, &mut q);
            gather(qkv, n, c + hd * dh, dh, &idx, &mut k);
            gather(qkv, n, 2 * c + hd * dh, dh, &idx, &mut v);
            gather(g, n, hd * dh, dh, &idx, &mut go);
            let a = &attn[((wi * heads) + hd) * t * t..((wi * heads) + hd + 1) * t * t];
            // dV = A^T dO ; dA = dO V^T
            gemm(t, t, dh, a, true, &go, false, &mut dv, 0.0);
            gemm(t, dh, t, &go, false, &v, true, &mut da, 0.0);
            // Softmax backward, then the 1/sqrt(dh) scale.
            for (arow, drow) in a.chunks(t).zip(da.chunks_mut(t)) {
                let dot: f32 = arow.iter().zip(drow.iter()).map(|(x, y)| x * y).sum();
                for (x, y) in arow.iter().zip(drow.iter_mut()) {
                    *y = x * (*y - dot) * scale;
                }
            }
            gemm(t, t, dh, &da, false, &k, false, &mut dq, 0.0);
            gemm(t, t, dh, &da, true, &q, false, &mut dk, 0.0);
            scatter_add(&mut dqkv, n, hd * dh, dh, &idx, &dq);
            scatter_add(&mut dqkv, n, c + hd * dh, dh, &idx, &dk);
            scatter_add(&mut dqkv, n, 2 * c + hd * dh, dh, &idx, &dv);
        }
    }
    dqkv
}

/// Copy channels `ch0..ch0+len` at voxels `idx` into token-major `dst[t][len]`.
fn gather(src: &[f32], n: usize, ch0: usize, len: usize, idx: &[usize], dst: &mut [f32]) {
    for (ti, &vx) in idx.iter().enumerate() {
        for j in 0..len {
            dst[ti * len + j] = src[(ch0 + j) * n + vx];
        }
    }
}

fn scatter_set(dst: &mut [f32], n: usize, ch0: usize, len: usize, idx: &[usize], src: &[f32]) {
    for (ti, &vx) in idx.iter().enumerate() {
        for j in 0..len {
            dst[(ch0 + j) * n + vx] = src[ti * len + j];
        }
    }
}

fn scatter_add(dst: &mut [f32], n: usize, ch0: usize, len: usize, idx: &[usize], src: &[f32]) {
    for (ti, &vx) in idx.iter().enumerate() {
        for j in 0..len {
            dst[(ch0 + j) * n + vx] += src[ti * len + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = [3, 4, 5];
        let c = 2;
        let n = 60;
        let x: Vec<f32> = (0..c * n).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
        let cols = im2col(&x, c, dims, 3);
        let y: Vec<f32> = (0..cols.len()).map(|i| ((i * 13 % 7) as f32) - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, c, dims, 3);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn space_to_depth_round_trip() {
        let dims = [4, 2, 6];
        let x: Vec<f32> = (0..3 * 48).map(|i| i as f32).collect();
        let y = space_to_depth(&x, 3, dims, false);
        assert_eq!(space_to_depth(&y, 3, dims, true), x);
    }

    #[test]
    fn windows_tile_every_voxel_once() {
        for shift in [0, 2] {
            let w = Windows { dims: [8, 4, 8], window: 4, shift };
            let mut seen = vec![0; 256];
            for wi in 0..w.count() {
                for t in 0..w.tokens() {
                    seen[w.voxel(wi, t)] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3);
        }
    }
}
