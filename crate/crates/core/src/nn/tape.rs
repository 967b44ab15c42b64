use super::kernels::{self, LayerNormCache, Windows};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    /// Same-padded, stride-1 convolution; kernel size from the weight shape.
    Conv3d { x: Var, w: Var, b: Var },
    Relu(Var),
    Gelu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    InstanceNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache },
    WindowAttention { qkv: Var, heads: usize, win: Windows, attn: Vec<f32> },
    SpaceToDepth(Var),
    DepthToSpace(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for parameter number `index`; gradients of all leaves sharing an
    /// index are summed by [`Tape::param_grads`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(index))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [cout, cin, k] = [wv.shape()[0], wv.shape()[1], wv.shape()[2]];
        assert_eq!(xv.channels(), cin, "conv input channels");
        let dims = xv.spatial();
        let n: usize = dims.iter().product();
        let mut out = vec![0f32; cout * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(bv.data()[co]);
        }
        if k == 1 {
            kernels::gemm(cout, cin, n, wv.data(), false, xv.data(), false, &mut out, 1.0);
        } else {
            let cols = kernels::im2col(xv.data(), cin, dims, k);
            kernels::gemm(cout, cin * k * k * k, n, wv.data(), false, &cols, false, &mut out, 1.0);
        }
        let t = Tensor::from_vec(&[cout, dims[0], dims[1], dims[2]], out).expect("conv shape");
        self.push(t, Op::Conv3d { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(t, Op::Gelu(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [d, h, w] = xv.spatial();
        let (out, argmax) = kernels::max_pool2(xv.data(), xv.channels(), [d, h, w]);
        let t = Tensor::from_vec(&[xv.channels(), d / 2, h / 2, w / 2], out).expect("pool shape");
        self.push(t, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [d, h, w] = xv.spatial();
        let out = kernels::upsample2(xv.data(), xv.channels(), [d, h, w]);
        let t = Tensor::from_vec(&[xv.channels(), 2 * d, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(t, Op::Upsample2(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.spatial(), bv.spatial(), "concat spatial dims");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let [d, h, w] = av.spatial();
        let t = Tensor::from_vec(&[av.channels() + bv.channels(), d, h, w], data).expect("concat shape");
        self.push(t, Op::Concat(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        self.push(t, Op::Add(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.len() / c;
        let (out, cache) = kernels::layer_norm(xv.data(), c, n, self.value(gamma).data(), self.value(beta).data());
        let t = Tensor::from_vec(xv.shape(), out).expect("ln shape");
        self.push(t, Op::LayerNorm { x, gamma, beta, cache })
    }

    /// Per-channel normalization over the spatial extent, then affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let (out, cache) =
            kernels::instance_norm(xv.data(), c, xv.len() / c, self.value(gamma).data(), self.value(beta).data());
        let t = Tensor::from_vec(xv.shape(), out).expect("in shape");
        self.push(t, Op::InstanceNorm { x, gamma, beta, cache })
    }

    /// Windowed multi-head self-attention over `qkv: [3C, D, H, W]`.
    pub fn window_attention(&mut self, qkv: Var, heads: usize, window: usize, shift: usize) -> Var {
        let v = self.value(qkv);
        let c = v.channels() / 3;
        let dims = v.spatial();
        assert!(c.is_multiple_of(heads) && dims.iter().all(|d| d % window == 0), "attention geometry");
        let win = Windows { dims, window, shift };
        let (out, attn) = kernels::window_attention(v.data(), c, heads, win);
        let t = Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], out).expect("attn shape");
        self.push(t, Op::WindowAttention { qkv, heads, win, attn })
    }

    /// `[C, D, H, W] -> [8C, D/2, H/2, W/2]`.
    pub fn space_to_depth(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [d, h, w] = xv.spatial();
        let out = kernels::space_to_depth(xv.data(), xv.channels(), [d, h, w], false);
        let t = Tensor::from_vec(&[8 * xv.channels(), d / 2, h / 2, w / 2], out).expect("s2d shape");
        self.push(t, Op::SpaceToDepth(x))
    }

    /// `[8C, D, H, W] -> [C, 2D, 2H, 2W]`.
    pub fn depth_to_space(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [d, h, w] = xv.spatial();
        let c = xv.channels() / 8;
        let out = kernels::space_to_depth(xv.data(), c, [2 * d, 2 * h, 2 * w], true);
        let t = Tensor::from_vec(&[c, 2 * d, 2 * h, 2 * w], out).expect("d2s shape");
        self.push(t, Op::DepthToSpace(x))
    }

    /// Reverse sweep from the given `(output, d loss / d output)` seeds.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                // Leaves keep their gradient for collection.
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv3d { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let [cout, cin, k] = [wv.shape()[0], wv.shape()[1], wv.shape()[2]];
                    let dims = xv.spatial();
                    let n: usize = dims.iter().product();
                    let kk = cin * k * k * k;
                    let db: Vec<f32> = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                    let mut dw = vec![0f32; cout * kk];
                    let dx = if k == 1 {
                        kernels::gemm(cout, n, cin, g.data(), false, xv.data(), true, &mut dw, 0.0);
                        let mut dx = vec![0f32; cin * n];
                        kernels::gemm(cin, cout, n, wv.data(), true, g.data(), false, &mut dx, 0.0);
                        dx
                    } else {
                        let cols = kernels::im2col(xv.data(), cin, dims, k);
                        kernels::gemm(cout, n, kk, g.data(), false, &cols, true, &mut dw, 0.0);
                        drop(cols);
                        let mut dcols = vec![0f32; kk * n];
                        kernels::gemm(kk, cout, n, wv.data(), true, g.data(), false, &mut dcols, 0.0);
                        kernels::col2im(&dcols, cin, dims, k)
                    };
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("dx"));
                    accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw).expect("dw"));
                    accumulate(&mut grads, *b, Tensor::from_vec(&[cout], db).expect("db"));
                }
                Op::Relu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &y)| if y > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data).expect("relu"));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), data).expect("gelu"));
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gi) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src as usize] += gi;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let dx = kernels::upsample2_backward(g.data(), xv.channels(), xv.spatial());
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("up"));
                }
                Op::Concat(a, b) => {
                    let av = self.value(*a);
                    let split = av.len();
                    let (ga, gb) = g.data().split_at(split);
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), ga.to_vec()).expect("cat a"));
                    accumulate(&mut grads, *b, Tensor::from_vec(self.value(*b).shape(), gb.to_vec()).expect("cat b"));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(g.data(), cache, c, xv.len() / c, self.value(*gamma).data());
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("ln x"));
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dg).expect("ln g"));
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], db).expect("ln b"));
                }
                Op::InstanceNorm { x, gamma, beta, cache } => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let (dx, dg, db) =
                        kernels::instance_norm_backward(g.data(), cache, c, xv.len() / c, self.value(*gamma).data());
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("in x"));
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dg).expect("in g"));
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], db).expect("in b"));
                }
                Op::WindowAttention { qkv, heads, win, attn } => {
                    let qv = self.value(*qkv);
                    let c = qv.channels() / 3;
                    let d = kernels::window_attention_backward(g.data(), qv.data(), attn, c, *heads, *win);
                    accumulate(&mut grads, *qkv, Tensor::from_vec(qv.shape(), d).expect("attn"));
                }
                Op::SpaceToDepth(x) => {
                    let xv = self.value(*x);
                    let dx = kernels::space_to_depth(g.data(), xv.channels(), xv.spatial(), true);
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("s2d"));
                }
                Op::DepthToSpace(x) => {
                    let xv = self.value(*x);
                    let [d, h, w] = xv.spatial();
                    let dx = kernels::space_to_depth(g.data(), xv.channels() / 8, [2 * d, 2 * h, 2 * w], false);
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx).expect("d2s"));
                }
            }
        }
        Gradients { grads }
    }

    /// Sum gradients per parameter index over every leaf recorded for it.
    pub fn param_grads(&self, grads: &Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads.grads[i]) {
                match &mut out[*p] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
