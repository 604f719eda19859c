use std::cell::{Cell, Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::labels::LabelMap;

/// Define-by-run recording of primitive operations. Nodes are appended in
/// evaluation order, so parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    consumed: Cell<bool>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MatMul(usize, usize),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Relu(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: [usize; 4],
        batch_stats: bool,
    },
    Upsample {
        x: usize,
        factor: usize,
        dims: [usize; 4],
    },
    Downsample {
        x: usize,
        stride: usize,
        dims: [usize; 4],
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    LogSumExp(usize),
    SoftmaxCe {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<Option<u32>>,
        count: usize,
    },
    Gather {
        x: usize,
        offsets: Vec<usize>,
        plane: usize,
    },
    Pairwise {
        a: usize,
        b: usize,
        dlds: Vec<f64>,
        tau: f64,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a trainable copy of `value`.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` leaf that the loss depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !root.requires_grad {
            *self.grads.borrow_mut() = leaf_grads;
            return Ok(());
        }
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |pid: usize, contrib: Vec<f64>| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => {
                        for (a, b) in existing.iter_mut().zip(&contrib) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |pid: usize| nodes[pid].value.data();
            match &node.op {
                Op::Leaf => {
                    leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Sum(a) => acc(*a, vec![g[0]; nodes[*a].value.numel()]),
                Op::MatMul(a, b) => {
                    let (n, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let m = nodes[*b].value.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; n * k];
                        kernels::gemm(n, m, k, 1.0, &g, false, val(*b), true, 0.0, &mut ga);
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * m];
                        kernels::gemm(k, n, m, 1.0, val(*a), true, &g, false, 0.0, &mut gb);
                        acc(*b, gb);
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let grads = kernels::conv2d_backward(geom, val(*x), val(*w), &g, nodes[*x].requires_grad);
                    if let Some(dx) = grads.dx {
                        acc(*x, dx);
                    }
                    acc(*w, grads.dw);
                    acc(*b, grads.db);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(*a))
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(*a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    dims,
                    batch_stats,
                } => {
                    let [bsz, c, h, w] = *dims;
                    let hw = h * w;
                    let n = (bsz * hw) as f64;
                    let gam = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for i in off..off + hw {
                                dgamma[ch] += g[i] * xhat[i];
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                    if nodes[*x].requires_grad {
                        let mut dx = vec![0.0; g.len()];
                        for bi in 0..bsz {
                            for ch in 0..c {
                                let off = (bi * c + ch) * hw;
                                let scale = gam[ch] * inv_std[ch];
                                for i in off..off + hw {
                                    dx[i] = if *batch_stats {
                                        scale / n * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                        acc(*x, dx);
                    }
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Upsample { x, factor, dims } => {
                    let [b, c, h, w] = *dims;
                    let (oh, ow) = (h * factor, w * factor);
                    let ty = kernels::bilinear_taps(oh, *factor, h);
                    let tx = kernels::bilinear_taps(ow, *factor, w);
                    let mut gx = vec![0.0; b * c * h * w];
                    for plane in 0..b * c {
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] += gv * wy0 * wx0;
                                dst[y0 * w + x1] += gv * wy0 * wx1;
                                dst[y1 * w + x0] += gv * wy1 * wx0;
                                dst[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Downsample { x, stride, dims } => {
                    let [b, c, h, w] = *dims;
                    let (oh, ow) = (h.div_ceil(*stride), w.div_ceil(*stride));
                    let mut gx = vec![0.0; b * c * h * w];
                    for plane in 0..b * c {
                        for oy in 0..oh {
                            let sy = kernels::nearest_source(oy, *stride, h);
                            for ox in 0..ow {
                                let sx = kernels::nearest_source(ox, *stride, w);
                                gx[plane * h * w + sy * w + sx] += g[plane * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let d = node.value.shape()[1];
                    let mut gx = vec![0.0; g.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        if norm > L2_FLOOR {
                            let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                            for i in row {
                                gx[i] = (g[i] - y[i] * dot) / norm;
                            }
                        } else {
                            for i in row {
                                gx[i] = g[i] / L2_FLOOR;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSumExp(a) => {
                    let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let xs = val(*a);
                    let out = node.value.data();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[i] * (xs[i * c + j] - out[i]).exp();
                        }
                    }
                    acc(*a, gx);
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                    count,
                } => {
                    let shape = nodes[*logits].value.shape();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let scale = g[0] / *count as f64;
                    let mut gx = vec![0.0; probs.len()];
                    for bi in 0..b {
                        for p in 0..hw {
                            let Some(t) = targets[bi * hw + p] else { continue };
                            for ch in 0..c {
                                let i = (bi * c + ch) * hw + p;
                                let onehot = if ch as u32 == t { 1.0 } else { 0.0 };
                                gx[i] = scale * (probs[i] - onehot);
                            }
                        }
                    }
                    acc(*logits, gx);
                }
                Op::Gather { x, offsets, plane } => {
                    let d = node.value.shape()[1];
                    let mut gx = vec![0.0; nodes[*x].value.numel()];
                    for (r, &off) in offsets.iter().enumerate() {
                        for k in 0..d {
                            gx[off + k * plane] += g[r * d + k];
                        }
                    }
                    acc(*x, gx);
                }
                Op::Pairwise { a, b, dlds, tau } => {
                    let (na, d) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let nb = nodes[*b].value.shape()[0];
                    let alpha = g[0] / tau;
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; na * d];
                        kernels::gemm(na, nb, d, alpha, dlds, false, val(*b), false, 0.0, &mut ga);
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; nb * d];
                        kernels::gemm(nb, na, d, alpha, dlds, true, val(*a), false, 0.0, &mut gb);
                        acc(*b, gb);
                    }
                }
            }
        }
        *self.grads.borrow_mut() = leaf_grads;
        Ok(())
    }

    pub(crate) fn record_pairwise<'t>(
        &'t self,
        a: Var<'t>,
        b: Var<'t>,
        value: f64,
        dlds: Vec<f64>,
        tau: f64,
    ) -> Var<'t> {
        let rg = self.requires(&[a.id, b.id]);
        self.push(
            Tensor::scalar(value),
            rg,
            Op::Pairwise {
                a: a.id,
                b: b.id,
                dlds,
                tau,
            },
        )
    }
}

pub const L2_FLOOR: f64 = 1e-12;

/// Result of a training-mode batch norm: the output plus the batch statistics
/// the caller folds into its running estimates.
pub struct BatchNormOutput<'t> {
    pub output: Var<'t>,
    pub mean: Vec<f64>,
    /// Unbiased variance, the usual convention for running estimates.
    pub var_unbiased: Vec<f64>,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, rg, op)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return shape_err(op, &a, &b);
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let out = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let out = {
            let (a, b) = (self.value(), other.value());
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
        };
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        let (n, k, m) = match (&a_shape[..], &b_shape[..]) {
            ([n, k], [k2, m]) if k == k2 => (*n, *k, *m),
            _ => return shape_err("matmul", &a_shape, &b_shape),
        };
        let out = {
            let (a, b) = (self.value(), other.value());
            let mut c = vec![0.0; n * m];
            kernels::gemm(n, k, m, 1.0, a.data(), false, b.data(), false, 0.0, &mut c);
            Tensor::from_parts(vec![n, m], c)
        };
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// 2-D convolution with square kernel. `weight`: `O x C x k x k`, `bias`: `O`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        let bs = bias.shape();
        let (b, c, h, w) = match xs[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return shape_err("conv2d", &xs, &ws),
        };
        let (o, k) = match ws[..] {
            [o, wc, k, k2] if wc == c && k == k2 => (o, k),
            [o, wc] if wc == c => (o, 1),
            _ => return shape_err("conv2d", &xs, &ws),
        };
        if bs != [o] {
            return shape_err("conv2d bias", &ws, &bs);
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return shape_err("conv2d", &xs, &ws);
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            height: h,
            width: w,
            out_ch: o,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = {
            let (x, wt, bt) = (self.value(), weight.value(), bias.value());
            kernels::conv2d_forward(&geom, x.data(), wt.data(), bt.data())
        };
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![b, o, oh, ow], out),
            rg,
            Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
        ))
    }

    /// Pointwise convolution; `weight` may be `O x C` or `O x C x 1 x 1`.
    pub fn conv1x1(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let ws = weight.shape();
        if ws.len() == 4 && (ws[2] != 1 || ws[3] != 1) {
            return shape_err("conv1x1", &self.shape(), &ws);
        }
        self.conv2d(weight, bias, 1, 0)
    }

    pub fn relu(&self) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.max(0.0)).collect())
        };
        self.unary(out, Op::Relu(self.id))
    }

    fn bn_check(&self, gamma: &Var<'t>, beta: &Var<'t>) -> Result<[usize; 4]> {
        let xs = self.shape();
        let [b, c, h, w] = match xs[..] {
            [b, c, h, w] => [b, c, h, w],
            _ => return shape_err("batchnorm2d", &xs, &gamma.shape()),
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("batchnorm2d", &xs, &gamma.shape());
        }
        Ok([b, c, h, w])
    }

    /// Training-mode batch norm using batch statistics over `B x H x W`.
    pub fn batchnorm2d_train(&self, gamma: &Var<'t>, beta: &Var<'t>) -> Result<BatchNormOutput<'t>> {
        let dims = self.bn_check(gamma, beta)?;
        let [b, c, h, w] = dims;
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm2d in training mode needs batch size >= 2, got {b}"
            )));
        }
        let hw = h * w;
        let (out, xhat, inv_std, stats) = {
            let x = self.value();
            let (g, bt) = (gamma.value(), beta.value());
            let stats = kernels::channel_stats(x.data(), b, c, hw);
            let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        xhat[i] = (x.data()[i] - stats.mean[ch]) * inv_std[ch];
                        out[i] = g.data()[ch] * xhat[i] + bt.data()[ch];
                    }
                }
            }
            (out, xhat, inv_std, stats)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        let output = self.tape.push(
            Tensor::from_parts(dims.to_vec(), out),
            rg,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                dims,
                batch_stats: true,
            },
        );
        let n = stats.count as f64;
        let var_unbiased = stats.var.iter().map(|v| v * n / (n - 1.0)).collect();
        Ok(BatchNormOutput {
            output,
            mean: stats.mean,
            var_unbiased,
        })
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm2d_eval(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var<'t>> {
        let dims = self.bn_check(gamma, beta)?;
        let [b, c, h, w] = dims;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batchnorm2d", &[c], &[running_mean.len()]);
        }
        let hw = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
        let (out, xhat) = {
            let x = self.value();
            let (g, bt) = (gamma.value(), beta.value());
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        xhat[i] = (x.data()[i] - running_mean[ch]) * inv_std[ch];
                        out[i] = g.data()[ch] * xhat[i] + bt.data()[ch];
                    }
                }
            }
            (out, xhat)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            Tensor::from_parts(dims.to_vec(), out),
            rg,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                dims,
                batch_stats: false,
            },
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4("bilinear_upsample")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.scale(1.0));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(oh, factor, h);
        let tx = kernels::bilinear_taps(ow, factor, w);
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![0.0; b * c * oh * ow];
            for plane in 0..b * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                    }
                }
            }
            out
        };
        Ok(self.unary(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::Upsample {
                x: self.id,
                factor,
                dims: [b, c, h, w],
            },
        ))
    }

    /// Cell-center nearest-neighbour subsampling to `ceil(H/s) x ceil(W/s)`.
    pub fn nearest_downsample(&self, stride: usize) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4("nearest_downsample")?;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![0.0; b * c * oh * ow];
            for plane in 0..b * c {
                for oy in 0..oh {
                    let sy = kernels::nearest_source(oy, stride, h);
                    for ox in 0..ow {
                        let sx = kernels::nearest_source(ox, stride, w);
                        out[plane * oh * ow + oy * ow + ox] = xd[plane * h * w + sy * w + sx];
                    }
                }
            }
            out
        };
        Ok(self.unary(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::Downsample {
                x: self.id,
                stride,
                dims: [b, c, h, w],
            },
        ))
    }

    /// Divides each row of an `N x d` matrix by `max(norm, 1e-12)`.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (n, d) = self.value().dims2("l2_normalize_rows")?;
        let (out, norms) = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![0.0; n * d];
            let mut norms = vec![0.0; n];
            for r in 0..n {
                let row = &xd[r * d..(r + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms[r] = norm;
                let denom = norm.max(L2_FLOOR);
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / denom;
                }
            }
            (out, norms)
        };
        Ok(self.unary(
            Tensor::from_parts(vec![n, d], out),
            Op::L2Normalize { x: self.id, norms },
        ))
    }

    /// Row-wise log-sum-exp of an `N x M` matrix, giving a length-`N` vector.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        let (n, m) = self.value().dims2("logsumexp")?;
        let out = {
            let x = self.value();
            (0..n)
                .map(|r| logsumexp(&x.data()[r * m..(r + 1) * m]))
                .collect::<Vec<_>>()
        };
        Ok(self.unary(Tensor::from_parts(vec![n], out), Op::LogSumExp(self.id)))
    }

    /// Mean per-pixel cross-entropy of `B x C x H x W` logits against a label
    /// map, skipping `ignore_index` pixels.
    pub fn softmax_cross_entropy(&self, target: &LabelMap) -> Result<Var<'t>> {
        let (b, c, h, w) = self.value().dims4("softmax_cross_entropy")?;
        if target.shape() != [b, h, w] {
            return shape_err("softmax_cross_entropy", &self.shape(), &target.shape());
        }
        let hw = h * w;
        let targets: Vec<Option<u32>> = target
            .data()
            .iter()
            .map(|&t| (t != target.ignore_index()).then_some(t))
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let (loss, probs) = {
            let x = self.value();
            let xd = x.data();
            let mut probs = vec![0.0; xd.len()];
            let mut loss = 0.0;
            let mut col = vec![0.0; c];
            for bi in 0..b {
                for p in 0..hw {
                    for (ch, v) in col.iter_mut().enumerate() {
                        *v = xd[(bi * c + ch) * hw + p];
                    }
                    let lse = logsumexp(&col);
                    for ch in 0..c {
                        probs[(bi * c + ch) * hw + p] = (col[ch] - lse).exp();
                    }
                    if let Some(t) = targets[bi * hw + p] {
                        loss += lse - col[t as usize];
                    }
                }
            }
            (loss / count as f64, probs)
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: self.id,
                probs,
                targets,
                count,
            },
        ))
    }

    /// Gathers `d`-dimensional feature vectors from a `B x d x h x w` map at
    /// `(batch, row, col)` positions, giving an `N x d` matrix.
    pub fn gather_positions(&self, positions: &[(usize, usize, usize)]) -> Result<Var<'t>> {
        let (b, d, h, w) = self.value().dims4("gather_positions")?;
        let plane = h * w;
        let mut offsets = Vec::with_capacity(positions.len());
        for &(bi, r, c) in positions {
            if bi >= b || r >= h || c >= w {
                return Err(Error::InvalidArgument(format!(
                    "position ({bi}, {r}, {c}) outside feature map {:?}",
                    [b, d, h, w]
                )));
            }
            offsets.push(bi * d * plane + r * w + c);
        }
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("gather of zero positions".into()));
        }
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut out = Vec::with_capacity(offsets.len() * d);
            for &off in &offsets {
                out.extend((0..d).map(|k| xd[off + k * plane]));
            }
            out
        };
        let n = offsets.len();
        Ok(self.unary(
            Tensor::from_parts(vec![n, d], out),
            Op::Gather {
                x: self.id,
                offsets,
                plane,
            },
        ))
    }
}

/// Numerically stable `log(sum(exp(x)))`; `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
