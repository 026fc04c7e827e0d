use crate::error::{Error, Result};

use super::kernels::{self, AttentionCache, AttentionGeom, ConvGeom};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        k: usize,
    },
    Shift {
        input: Var,
        dx: isize,
        dy: isize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar {
        input: Var,
        scalar: Var,
    },
    Concat(Vec<Var>),
    SumGroups {
        input: Var,
        groups: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeom,
        cache: AttentionCache,
    },
    BalancedBce {
        pred: Var,
        gt: Var,
        w_pos: f64,
        w_neg: f64,
        eps: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Depthwise { input, kernel, .. } => vec![*input, *kernel],
            Op::Shift { input, .. }
            | Op::Softmax { input, .. }
            | Op::Upsample { input, .. }
            | Op::SumGroups { input, .. }
            | Op::Relu(input)
            | Op::Sigmoid(input)
            | Op::Scale(input, _)
            | Op::Sum(input) => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulScalar { input, scalar } => vec![*input, *scalar],
            Op::Concat(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::BalancedBce { pred, gt, .. } => vec![*pred, *gt],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape is single-threaded; independent tapes may live on different threads.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Number of recorded operations that read `v`.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().iter().filter(|&&i| i == v).count())
            .sum()
    }

    /// Window weights saved by a [`Tape::local_attention`] node, `[pixel][head][slot]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.weights),
            _ => None,
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        self.value(v).dims3().map_err(|_| {
            Error::shape(
                op,
                format!("expected a C×H×W input, got {:?}", self.shape(v)),
            )
        })
    }

    /// Dense 2-D convolution. `weight` is C_out×C_in×k×k, `bias` has C_out entries.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let dims = self.dims3(input, "conv2d")?;
        let (c_out, c_in, k) = match *self.shape(weight) {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be C_out×C_in×k×k, got {s:?}"),
                ))
            }
        };
        if c_in != dims.0 {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {c_in}", dims.0),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{c_out}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(dims, c_out, k, stride, padding)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Per-channel k×k convolution with "same" zero padding. `kernel` is C×k×k.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let dims = self.dims3(input, "depthwise_conv2d")?;
        let k = match *self.shape(kernel) {
            [c, kh, kw] if c == dims.0 && kh == kw && kh % 2 == 1 => kh,
            ref s => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("kernel must be {}×k×k with odd k, got {s:?}", dims.0),
                ))
            }
        };
        let out = kernels::depthwise_forward(
            dims,
            k,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let value = Tensor::new([dims.0, dims.1, dims.2], out)?;
        Ok(self.push(value, Op::Depthwise { input, kernel, k }))
    }

    /// `out[c, i, j] = input[c, i + dx, j + dy]`, zero-filled outside the image.
    pub fn shift(&mut self, input: Var, dx: isize, dy: isize) -> Result<Var> {
        let dims = self.dims3(input, "shift")?;
        let lim = dims.1.min(dims.2) as isize;
        if dx.abs() >= lim || dy.abs() >= lim {
            return Err(Error::Contract(format!(
                "shift ({dx}, {dy}) must be smaller than the {}×{} image",
                dims.1, dims.2
            )));
        }
        let out = kernels::shift(dims, self.value(input).data(), dx, dy);
        let value = Tensor::new([dims.0, dims.1, dims.2], out)?;
        Ok(self.push(value, Op::Shift { input, dx, dy }))
    }

    /// The shift realized as a depthwise 3×3 convolution with a fixed one-hot
    /// kernel at `(1 + dx, 1 + dy)`.
    pub fn shift_conv(&mut self, input: Var, dx: isize, dy: isize) -> Result<Var> {
        if !(-1..=1).contains(&dx) || !(-1..=1).contains(&dy) {
            return Err(Error::UnsupportedOffset { dx, dy });
        }
        let c = self.dims3(input, "shift_conv")?.0;
        let kernel = shift_kernel::<T>(c, 3, dx, dy);
        let kernel = self.constant(kernel);
        self.depthwise_conv2d(input, kernel)
    }

    /// Softmax along `axis`, stabilized by max-subtraction.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let out = kernels::softmax_forward(&shape, axis, self.value(input).data());
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input, axis }))
    }

    /// Bilinear (align-corners-false) upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, input: Var, scale: usize) -> Result<Var> {
        if scale == 0 {
            return Err(Error::Contract("upsample scale must be at least 1".into()));
        }
        let dims = self.dims3(input, "upsample_bilinear")?;
        let out = kernels::upsample_forward(dims, scale, self.value(input).data());
        let value = Tensor::new([dims.0, dims.1 * scale, dims.2 * scale], out)?;
        Ok(self.push(value, Op::Upsample { input, scale }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::of(sigmoid(v.f64())));
        self.push(value, Op::Sigmoid(x))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| T::of(v.f64() * s));
        self.push(value, Op::Scale(a, s))
    }

    /// Multiplication by a one-element tensor on the tape (a learnable scalar).
    pub fn mul_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!("scalar has shape {:?}", self.shape(scalar)),
            ));
        }
        let s = self.value(scalar).data()[0];
        let value = self.value(input).map(|v| v * s);
        Ok(self.push(value, Op::MulScalar { input, scalar }))
    }

    /// Stacks C×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("concat of an empty list".into()));
        };
        let (_, h, w) = self.dims3(first, "concat_channels")?;
        let mut c_total = 0;
        for &x in xs {
            let (c, hx, wx) = self.dims3(x, "concat_channels")?;
            if (hx, wx) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial {hx}×{wx} vs {h}×{w}"),
                ));
            }
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let value = Tensor::new([c_total, h, w], data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec())))
    }

    /// (G·C)×H×W → C×H×W by summing the `groups` consecutive channel blocks.
    pub fn sum_groups(&mut self, input: Var, groups: usize) -> Result<Var> {
        let (gc, h, w) = self.dims3(input, "sum_groups")?;
        if groups == 0 || gc % groups != 0 {
            return Err(Error::shape(
                "sum_groups",
                format!("{gc} channels do not split into {groups} groups"),
            ));
        }
        let c = gc / groups;
        let plane = c * h * w;
        let src = self.value(input).data();
        let data = (0..plane)
            .map(|i| T::of((0..groups).map(|g| src[g * plane + i].f64()).sum()))
            .collect();
        let value = Tensor::new([c, h, w], data)?;
        Ok(self.push(value, Op::SumGroups { input, groups }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x))
    }

    /// Windowed multi-head attention over C×H×W query/key/value maps.
    pub fn local_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        radius: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.dims3(q, "local_attention")?;
        self.same_shape(q, k, "local_attention")?;
        self.same_shape(q, v, "local_attention")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(
                "local_attention",
                format!("{c} channels not divisible into {heads} heads"),
            ));
        }
        let geom = AttentionGeom {
            c,
            h,
            w,
            heads,
            radius,
        };
        let (out, cache) = kernels::attention_forward(
            &geom,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new([c, h, w], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                cache,
            },
        ))
    }

    /// `-Σ [w_pos·G·log P + w_neg·(1-G)·log(1-P)]` with `P` clamped to `[eps, 1-eps]`.
    pub fn balanced_bce(
        &mut self,
        pred: Var,
        gt: Var,
        w_pos: f64,
        w_neg: f64,
        eps: f64,
    ) -> Result<Var> {
        self.same_shape(pred, gt, "balanced_bce")?;
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(gt).data())
            .map(|(p, g)| {
                let (p, g) = (p.f64().clamp(eps, 1.0 - eps), g.f64());
                -(w_pos * g * p.ln() + w_neg * (1.0 - g) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::BalancedBce {
                pred,
                gt,
                w_pos,
                w_neg,
                eps,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`. Gradients of earlier passes are
    /// discarded; afterwards every node that requires grad and feeds `loss`
    /// holds `dloss/dnode`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gin) in self.input_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(gin),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if needs(*input) {
                    out.push((
                        *input,
                        kernels::conv2d_backward_input(geom, val(*weight), g),
                    ));
                }
                if needs(*weight) {
                    out.push((
                        *weight,
                        kernels::conv2d_backward_weight(geom, val(*input), g),
                    ));
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    out.push((b, kernels::channel_sums(geom.c_out, geom.oh * geom.ow, g)));
                }
            }
            Op::Depthwise { input, kernel, k } => {
                let dims = self.nodes[input.0].value.dims3()?;
                if needs(*input) {
                    out.push((
                        *input,
                        kernels::depthwise_backward_input(dims, *k, val(*kernel), g),
                    ));
                }
                if needs(*kernel) {
                    out.push((
                        *kernel,
                        kernels::depthwise_backward_kernel(dims, *k, val(*input), g),
                    ));
                }
            }
            Op::Shift { input, dx, dy } => {
                let dims = self.nodes[input.0].value.dims3()?;
                out.push((*input, kernels::shift(dims, g, -dx, -dy)));
            }
            Op::Softmax { input, axis } => {
                out.push((
                    *input,
                    kernels::softmax_backward(node.value.shape(), *axis, node.value.data(), g),
                ));
            }
            Op::Upsample { input, scale } => {
                let dims = self.nodes[input.0].value.dims3()?;
                out.push((*input, kernels::upsample_backward(dims, *scale, g)));
            }
            Op::Relu(x) => {
                let gin = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, gin));
            }
            Op::Sigmoid(x) => {
                let gin = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| T::of(gv.f64() * y.f64() * (1.0 - y.f64())))
                    .collect();
                out.push((*x, gin));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.iter().zip(val(*b)).map(|(&gv, &y)| gv * y).collect()));
                out.push((*b, g.iter().zip(val(*a)).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::Scale(a, s) => {
                out.push((*a, g.iter().map(|gv| T::of(gv.f64() * s)).collect()));
            }
            Op::MulScalar { input, scalar } => {
                let s = val(*scalar)[0];
                if needs(*input) {
                    out.push((*input, g.iter().map(|&gv| gv * s).collect()));
                }
                if needs(*scalar) {
                    let d: f64 = g
                        .iter()
                        .zip(val(*input))
                        .map(|(gv, x)| gv.f64() * x.f64())
                        .sum();
                    out.push((*scalar, vec![T::of(d)]));
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    out.push((x, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SumGroups { input, groups } => {
                let mut gin = Vec::with_capacity(g.len() * groups);
                for _ in 0..*groups {
                    gin.extend_from_slice(g);
                }
                out.push((*input, gin));
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; self.nodes[x.0].value.len()]));
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                cache,
            } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(geom, val(*q), val(*k), val(*v), cache, g);
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::BalancedBce {
                pred,
                gt,
                w_pos,
                w_neg,
                eps,
            } => {
                let up = g[0].f64();
                let gin = val(*pred)
                    .iter()
                    .zip(val(*gt))
                    .map(|(p, gv)| {
                        let (p, gv) = (p.f64(), gv.f64());
                        if p < *eps || p > 1.0 - eps {
                            T::zero()
                        } else {
                            T::of(up * (-w_pos * gv / p + w_neg * (1.0 - gv) / (1.0 - p)))
                        }
                    })
                    .collect();
                out.push((*pred, gin));
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// C×k×k bank of one-hot kernels with the 1 at `(k/2 + dx, k/2 + dy)`.
pub(crate) fn shift_kernel<T: Real>(c: usize, k: usize, dx: isize, dy: isize) -> Tensor<T> {
    let r = (k / 2) as isize;
    let hot = ((r + dx) * k as isize + (r + dy)) as usize;
    Tensor::from_fn([c, k, k], |i| {
        if i % (k * k) == hot {
            T::one()
        } else {
            T::zero()
        }
    })
}
