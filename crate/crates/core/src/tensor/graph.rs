use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ChannelStats, ConvGeom, ResamplePlan};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::wavelet::{self, SubbandSet};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    MatMul { a: Var, b: Var, dims: [usize; 4] },
    LayerNorm { input: Var, gamma: Var, beta: Var, eps: T, dims: [usize; 3] },
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    DivScalar { x: Var, s: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Roll { x: Var, shift: isize },
    WindowPartition { x: Var, window: usize },
    WindowMerge { x: Var, window: usize },
    Haar(Var),
    InverseHaar(Var),
    AvgPool2(Var),
    Resample { x: Var, plan: ResamplePlan },
    L2NormalizeLast { x: Var, eps: T },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(*bias);
                v
            }
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            LayerNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            DivScalar { x, s } => vec![*x, *s],
            Concat { parts, .. } => parts.clone(),
            Relu(x) | Abs(x) | Scale(x, _) | AddScalar(x) | Sum(x) | Mean(x) | Reshape(x) | Haar(x)
            | InverseHaar(x) | AvgPool2(x) => vec![*x],
            Permute { x, .. }
            | Narrow { x, .. }
            | Roll { x, .. }
            | WindowPartition { x, .. }
            | WindowMerge { x, .. }
            | Resample { x, .. }
            | L2NormalizeLast { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations for one forward/backward pass.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order and every node is visited exactly once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    cleared: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that were marked as requiring them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], wants: &[bool], v: Var, g: Tensor<T>) {
    if !wants[v.0] {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), cleared: false }
    }

    /// Hash of the sign pattern at every `relu`/`abs` input.
    ///
    /// Two evaluations with equal signatures lie in the same linear piece of
    /// every kink, which is what a finite-difference probe needs.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: u64| {
            h ^= bit;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = &node.op {
                for &v in self.nodes[x.0].value.data() {
                    mix(if v > T::zero() { 1 } else if v < T::zero() { 2 } else { 3 });
                }
            }
        }
        h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if self.cleared {
            return Err(Error::GraphCleared);
        }
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.requires_grad)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.cleared {
            return Err(Error::GraphCleared);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a trainable leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let x = self.value(input)?;
        let w = self.value(weight)?;
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding, groups)?;
        let b = match bias {
            Some(b) => {
                let b = self.value(b)?;
                if b.shape() != [geom.out_channels] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias shape {:?}, expected [{}]", b.shape(), geom.out_channels),
                    ));
                }
                Some(b.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b);
        let value = Tensor::from_parts(geom.output_shape().to_vec(), out);
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, geom })
    }

    /// Batched matrix product `…×M×K · …×K×N`; leading extents must be equal.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(Error::shape("matmul", format!("operands {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul { a, b, dims: [batch, m, k, n] })
    }

    /// Layer normalization across channels at every (batch, row, column) position.
    pub fn layer_norm_channel(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let x = self.value(input)?;
        let [b, c, h, w] = x.dims4("layer_norm_channel")?;
        if c == 0 {
            return Err(Error::shape("layer_norm_channel", "zero channels"));
        }
        if !(eps > T::zero()) {
            return Err(Error::arg("layer_norm_channel", "eps must be positive"));
        }
        let (g, be) = (self.value(gamma)?, self.value(beta)?);
        if g.shape() != [c] || be.shape() != [c] {
            return Err(Error::shape(
                "layer_norm_channel",
                format!("gamma {:?} / beta {:?} for {c} channels", g.shape(), be.shape()),
            ));
        }
        let dims = [b, c, h * w];
        let stats = kernels::channel_stats(x.data(), b, c, h * w, eps);
        let y = kernels::layer_norm_forward(x.data(), dims, g.data(), be.data(), &stats);
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        self.push("layer_norm_channel", value, Op::LayerNorm { input, gamma, beta, eps, dims })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(|a| if a > T::zero() { a } else { T::zero() });
        self.push("relu", v, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?.map(T::abs);
        self.push("abs", v, Op::Abs(x))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x)?.map(|a| a * s);
        self.push("scale", v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x)?.map(|a| a + c);
        self.push("add_scalar", v, Op::AddScalar(x))
    }

    /// Divides every element by a one-element variable.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.value(s)?.item().ok_or_else(|| {
            Error::shape("div_scalar", "divisor must have exactly one element")
        })?;
        if d == T::zero() {
            return Err(Error::arg("div_scalar", "division by zero"));
        }
        let v = self.value(x)?.map(|a| a / d);
        self.push("div_scalar", v, Op::DivScalar { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x)?.sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push("mean", v, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x)?.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x)?.permute(perm)?;
        self.push("permute", v, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x)?.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let v = Tensor::concat(&tensors, axis)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x)?.narrow(axis, start, len)?;
        self.push("narrow", v, Op::Narrow { x, axis, start })
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let t = self.value(x)?;
        if axis >= t.rank() || sizes.iter().sum::<usize>() != t.shape()[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not tile axis {axis} of {:?}", t.shape()),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Circular spatial shift of a B×C×H×W tensor by `(shift, shift)`.
    pub fn cyclic_shift(&mut self, x: Var, shift: isize) -> Result<Var> {
        let t = self.value(x)?;
        let [b, c, h, w] = t.dims4("cyclic_shift")?;
        let v = Tensor::from_parts(t.shape().to_vec(), kernels::roll_planes(t.data(), b * c, h, w, shift));
        self.push("cyclic_shift", v, Op::Roll { x, shift })
    }

    /// B×C×H×W → (B·HW/N²)×C×N×N.
    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        let t = self.value(x)?;
        let [b, c, h, w] = t.dims4("window_partition")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "window_partition",
                format!("window {window} does not divide {h}×{w}"),
            ));
        }
        let count = b * (h / window) * (w / window);
        let data = kernels::window_partition(t.data(), [b, c, h, w], window);
        let v = Tensor::from_parts(vec![count, c, window, window], data);
        self.push("window_partition", v, Op::WindowPartition { x, window })
    }

    /// Inverse of [`Graph::window_partition`] back to a `batch`×C×`height`×`width` tensor.
    pub fn window_merge(&mut self, x: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x)?;
        let [count, c, n, n2] = t.dims4("window_merge")?;
        if n != n2 || n == 0 || !height.is_multiple_of(n) || !width.is_multiple_of(n) || count != batch * (height / n) * (width / n) {
            return Err(Error::shape(
                "window_merge",
                format!("{:?} windows cannot tile {batch}×{c}×{height}×{width}", t.shape()),
            ));
        }
        let data = kernels::window_merge(t.data(), [batch, c, height, width], n);
        let v = Tensor::from_parts(vec![batch, c, height, width], data);
        self.push("window_merge", v, Op::WindowMerge { x, window: n })
    }

    /// Haar analysis into the four subbands (see [`crate::wavelet`]).
    pub fn dwt2(&mut self, x: Var) -> Result<SubbandSet<Var>> {
        let t = self.value(x)?;
        let [b, c, h, w] = t.dims4("dwt2_haar")?;
        wavelet::check_even(h, w)?;
        let packed = wavelet::analysis(t.data(), [b, c, h, w]);
        let v = Tensor::from_parts(vec![b, 4 * c, h / 2, w / 2], packed);
        let p = self.push("dwt2_haar", v, Op::Haar(x))?;
        let bands = self.split(p, 1, &[c, c, c, c])?;
        Ok(SubbandSet { ll: bands[0], lh: bands[1], hl: bands[2], hh: bands[3], source_shape: (h, w) })
    }

    /// Haar synthesis; exact inverse of [`Graph::dwt2`].
    pub fn idwt2(&mut self, bands: &SubbandSet<Var>) -> Result<Var> {
        let shape = self.value(bands.ll)?.shape().to_vec();
        for v in [bands.lh, bands.hl, bands.hh] {
            if self.value(v)?.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "idwt2_haar",
                    format!("subband shapes differ: {:?} vs {shape:?}", self.value(v)?.shape()),
                ));
            }
        }
        let [b, c, h, w] = self.value(bands.ll)?.dims4("idwt2_haar")?;
        if bands.source_shape != (2 * h, 2 * w) {
            return Err(Error::shape(
                "idwt2_haar",
                format!("bands of {h}×{w} cannot restore {:?}", bands.source_shape),
            ));
        }
        let packed = self.concat(&[bands.ll, bands.lh, bands.hl, bands.hh], 1)?;
        let data = wavelet::synthesis(self.value(packed)?.data(), [b, c, 2 * h, 2 * w]);
        let v = Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data);
        self.push("idwt2_haar", v, Op::InverseHaar(packed))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x)?;
        let [b, c, h, w] = t.dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd extent {h}×{w}")));
        }
        let v = Tensor::from_parts(vec![b, c, h / 2, w / 2], kernels::avg_pool2(t.data(), b * c, h, w));
        self.push("avg_pool2", v, Op::AvgPool2(x))
    }

    /// Bicubic resize of a B×C×H×W tensor (see [`crate::train::bicubic_resize`]).
    pub fn resize_bicubic(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x)?;
        let [b, c, h, w] = t.dims4("resize_bicubic")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("resize_bicubic", "extents must be at least 1"));
        }
        let plan = ResamplePlan::bicubic(h, w, out_h, out_w);
        let v = Tensor::from_parts(vec![b, c, out_h, out_w], plan.forward(t.data(), b * c));
        self.push("resize_bicubic", v, Op::Resample { x, plan })
    }

    /// `x / sqrt(Σ x² + eps)` along the last axis.
    pub fn l2_normalize_last(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x)?;
        let len = *t.shape().last().ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
        let mut out = t.data().to_vec();
        if len > 0 {
            for row in out.chunks_exact_mut(len) {
                let r = (kernels::dot(row, row) + eps).sqrt();
                row.iter_mut().for_each(|v| *v = *v / r);
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("l2_normalize", v, Op::L2NormalizeLast { x, eps })
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode pass from a single-element `loss`.
    ///
    /// Returns gradients for every leaf created with [`Graph::param`]; leaves the
    /// loss does not depend on get zeros. The graph is cleared afterwards and any
    /// further use fails with [`Error::GraphCleared`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let l = self.node(loss)?;
        if l.value.numel() != 1 {
            return Err(Error::NonScalarLoss(l.value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let wants: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(l.value.shape()));
        for i in (0..=loss.0).rev() {
            if !wants[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, g, &wants, &mut grads)?;
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, nd)| match (&nd.op, nd.requires_grad) {
                (Op::Leaf, true) => Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(nd.value.shape()))),
                _ => None,
            })
            .collect();
        self.nodes.clear();
        self.cleared = true;
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, i: usize, g: Tensor<T>, wants: &[bool], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let want = (wants[input.0], wants[weight.0], bias.is_some_and(|b| wants[b.0]));
                let cg = kernels::conv2d_backward(geom, val(*input).data(), val(*weight).data(), g.data(), want);
                if let Some(d) = cg.input {
                    accumulate(grads, wants, *input, like(*input, d));
                }
                if let Some(d) = cg.weight {
                    accumulate(grads, wants, *weight, like(*weight, d));
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    accumulate(grads, wants, *b, like(*b, d));
                }
            }
            Op::MatMul { a, b, dims: [batch, m, k, n] } => {
                let (m, k, n) = (*m, *k, *n);
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if wants[a.0] {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..*batch {
                        kernels::gemm_nt(m, n, k, &g.data()[s * m * n..][..m * n], &tb[s * k * n..][..k * n], &mut da[s * m * k..][..m * k]);
                    }
                    accumulate(grads, wants, *a, like(*a, da));
                }
                if wants[b.0] {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..*batch {
                        kernels::gemm_tn(k, m, n, &ta[s * m * k..][..m * k], &g.data()[s * m * n..][..m * n], &mut db[s * k * n..][..k * n]);
                    }
                    accumulate(grads, wants, *b, like(*b, db));
                }
            }
            Op::LayerNorm { input, gamma, beta, eps, dims } => {
                let x = val(*input).data();
                let [b, c, p] = *dims;
                let stats: ChannelStats<T> = kernels::channel_stats(x, b, c, p, *eps);
                let ng = kernels::layer_norm_backward(x, *dims, val(*gamma).data(), &stats, g.data());
                accumulate(grads, wants, *input, like(*input, ng.input));
                accumulate(grads, wants, *gamma, like(*gamma, ng.gamma));
                accumulate(grads, wants, *beta, like(*beta, ng.beta));
            }
            Op::Relu(x) => {
                let d = g.data().iter().zip(val(*x).data()).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                accumulate(grads, wants, *x, like(*x, d));
            }
            Op::Abs(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, wants, *x, like(*x, d));
            }
            Op::Add(a, b) => {
                if wants[a.0] {
                    accumulate(grads, wants, *a, g.clone());
                }
                accumulate(grads, wants, *b, g);
            }
            Op::Sub(a, b) => {
                if wants[a.0] {
                    accumulate(grads, wants, *a, g.clone());
                }
                accumulate(grads, wants, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let prod = |o: Var| g.data().iter().zip(val(o).data()).map(|(&x, &y)| x * y).collect();
                if wants[a.0] {
                    accumulate(grads, wants, *a, like(*a, prod(*b)));
                }
                if wants[b.0] {
                    accumulate(grads, wants, *b, like(*b, prod(*a)));
                }
            }
            Op::Scale(x, s) => accumulate(grads, wants, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => accumulate(grads, wants, *x, g),
            Op::DivScalar { x, s } => {
                let d = val(*s).data()[0];
                if wants[s.0] {
                    let ds = -kernels::dot(g.data(), node.value.data()) / d;
                    accumulate(grads, wants, *s, like(*s, vec![ds]));
                }
                accumulate(grads, wants, *x, g.map(|v| v / d));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, wants, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let t = val(*x);
                let gv = g.data()[0] / T::of(t.numel() as f64);
                accumulate(grads, wants, *x, Tensor::full(t.shape(), gv));
            }
            Op::Reshape(x) => accumulate(grads, wants, *x, like(*x, g.into_data())),
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                accumulate(grads, wants, *x, like(*x, kernels::permute(g.data(), g.shape(), &inv)));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if wants[p.0] {
                        accumulate(grads, wants, *p, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src = val(*x).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let (extent, len) = (src[*axis], g.shape()[*axis]);
                let mut d = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    d[(o * extent + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                accumulate(grads, wants, *x, like(*x, d));
            }
            Op::Roll { x, shift } => {
                let [b, c, h, w] = g.dims4("cyclic_shift")?;
                accumulate(grads, wants, *x, like(*x, kernels::roll_planes(g.data(), b * c, h, w, -shift)));
            }
            Op::WindowPartition { x, window } => {
                let dims = val(*x).dims4("window_partition")?;
                accumulate(grads, wants, *x, like(*x, kernels::window_merge(g.data(), dims, *window)));
            }
            Op::WindowMerge { x, window } => {
                let dims = g.dims4("window_merge")?;
                accumulate(grads, wants, *x, like(*x, kernels::window_partition(g.data(), dims, *window)));
            }
            Op::Haar(x) => {
                let dims = val(*x).dims4("dwt2_haar")?;
                accumulate(grads, wants, *x, like(*x, wavelet::analysis_adjoint(g.data(), dims)));
            }
            Op::InverseHaar(x) => {
                let dims = g.dims4("idwt2_haar")?;
                accumulate(grads, wants, *x, like(*x, wavelet::synthesis_adjoint(g.data(), dims)));
            }
            Op::AvgPool2(x) => {
                let [b, c, h, w] = val(*x).dims4("avg_pool2")?;
                accumulate(grads, wants, *x, like(*x, kernels::avg_pool2_backward(g.data(), b * c, h, w)));
            }
            Op::Resample { x, plan } => {
                let [b, c, _, _] = val(*x).dims4("resize_bicubic")?;
                accumulate(grads, wants, *x, like(*x, plan.backward(g.data(), b * c)));
            }
            Op::L2NormalizeLast { x, eps } => {
                let xs = val(*x).data();
                let len = *g.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); xs.len()];
                if len > 0 {
                    for ((drow, xrow), (yrow, grow)) in d
                        .chunks_exact_mut(len)
                        .zip(xs.chunks_exact(len))
                        .zip(node.value.data().chunks_exact(len).zip(g.data().chunks_exact(len)))
                    {
                        let r = (kernels::dot(xrow, xrow) + *eps).sqrt();
                        let gy = kernels::dot(grow, yrow);
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv = (gv - yv * gy) / r;
                        }
                    }
                }
                accumulate(grads, wants, *x, like(*x, d));
            }
        }
        Ok(())
    }
}
