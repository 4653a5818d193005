//! Full-domain transformer block: regional (windowed) and global (multi-head)
//! channel attention gated by ReLU instead of softmax.
//!
//! Both attentions build their queries, keys and values from a 1×1 then a
//! depthwise 3×3 convolution of the layer-normalized input, so every token
//! already carries local context. The attention maps are C×C (regional, per
//! window) and Ĉ×Ĉ (global, per head), which keeps the cost linear in the
//! number of pixels.

use alloc::format;


use crate::error::{Error, Result};
use crate::nn::{expect_channels, BoundParams, Conv2d, FeedForward, LayerNorm, ParamBuilder, ParamId};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Added to `|α|` so a learned temperature can never divide by zero.
pub const TEMPERATURE_FLOOR: f64 = 1e-6;
/// Epsilon of the token-axis L2 normalization of queries and keys.
pub const QK_NORM_EPS: f64 = 1e-12;

/// Result of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    /// Gate `ReLU(q̂·k̂ᵀ / t)`, shaped `[..., C, C]`.
    pub map: Var,
}

/// ReLU-gated channel attention over `[..., C, L]` operands (channels by tokens).
///
/// Queries and keys are L2-normalized along the token axis, the map is
/// `M = ReLU(q̂ k̂ᵀ / t)` and the output is `M·v`, or `Mᵀ·v` when
/// `transpose_map` is set (token-major `v·M`).
pub fn relu_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    temperature: Var,
    transpose_map: bool,
) -> Result<Attention> {
    let q = g.l2_normalize_last(q, T::of(QK_NORM_EPS))?;
    let k = g.l2_normalize_last(k, T::of(QK_NORM_EPS))?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.div_scalar(scores, temperature)?;
    let map = g.relu(scores)?;
    let gate = if transpose_map { g.transpose(map)? } else { map };
    let output = g.matmul(gate, v)?;
    Ok(Attention { output, map })
}

fn temperature<T: Real>(g: &mut Graph<T>, p: &BoundParams, id: ParamId, op: &'static str) -> Result<Var> {
    let raw = p[id];
    if g.value(raw)?.data().iter().any(|v| *v == T::zero()) {
        return Err(Error::arg(op, "temperature is exactly zero"));
    }
    let a = g.abs(raw)?;
    g.add_scalar(a, T::of(TEMPERATURE_FLOOR))
}

/// Channel permutation mixing heads: with channels viewed as `heads` groups of
/// `C/heads`, channel `g·Ĉ + k` moves to `k·heads + g`.
pub fn shuffle_heads<T: Real>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("shuffle_heads")?;
    check_heads(c, heads)?;
    x.clone()
        .reshape(&[b, heads, c / heads, h * w])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, c, h, w])
}

fn shuffle_heads_var<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, c, h, w] = g.value(x)?.dims4("shuffle_heads")?;
    check_heads(c, heads)?;
    let y = g.reshape(x, &[b, heads, c / heads, h * w])?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    g.reshape(y, &[b, c, h, w])
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::arg("shuffle_heads", format!("{heads} heads do not divide {channels} channels")));
    }
    Ok(())
}

/// Window edge actually used on an `h`×`w` feature: the configured size capped by the extents.
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    window.min(h).min(w)
}

/// Regional self-attention: channel attention inside non-overlapping N×N windows.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionalAttention {
    pub norm: LayerNorm,
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub alpha: ParamId,
    pub proj: Conv2d,
    pub channels: usize,
    /// Largest window edge; see [`effective_window`].
    pub window: usize,
    /// Shift the feature by half a window before partitioning.
    pub shifted: bool,
}

impl RegionalAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 {
            return Err(Error::arg("rsa", "window must be positive"));
        }
        Ok(RegionalAttention {
            norm: LayerNorm::new(b, &format!("{name}.norm"), channels)?,
            qkv: Conv2d::pointwise(b, &format!("{name}.qkv"), channels, 3 * channels)?,
            qkv_dw: Conv2d::depthwise3(b, &format!("{name}.qkv_dw"), 3 * channels)?,
            alpha: b.constant(format!("{name}.alpha"), &[1], 1.0)?,
            proj: Conv2d::pointwise(b, &format!("{name}.proj"), channels, channels)?,
            channels,
            window,
            shifted,
        })
    }

    /// Window edge and shift used on an `h`×`w` input.
    pub fn geometry(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let n = effective_window(self.window, h, w);
        if n == 0 || !h.is_multiple_of(n) || !w.is_multiple_of(n) {
            return Err(Error::shape("rsa", format!("window {n} does not divide {h}×{w}")));
        }
        Ok((n, if self.shifted { n / 2 } else { 0 }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_with_map(g, p, x)?.output)
    }

    /// Output plus the per-window attention map `[windows, C, C]`.
    pub fn forward_with_map<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Attention> {
        let [b, c, h, w] = expect_channels(g, x, "rsa", self.channels)?;
        let (n, shift) = self.geometry(h, w)?;
        let t = temperature(g, p, self.alpha, "rsa")?;
        let f = self.norm.forward(g, p, x)?;
        let f = self.qkv.forward(g, p, f)?;
        let mut f = self.qkv_dw.forward(g, p, f)?;
        if shift != 0 {
            f = g.cyclic_shift(f, -(shift as isize))?;
        }
        let win = g.window_partition(f, n)?;
        let count = g.value(win)?.shape()[0];
        let win = g.reshape(win, &[count, 3 * c, n * n])?;
        let qkv = g.split(win, 1, &[c, c, c])?;
        let att = relu_attention(g, qkv[0], qkv[1], qkv[2], t, true)?;
        let out = g.reshape(att.output, &[count, c, n, n])?;
        let mut merged = g.window_merge(out, b, h, w)?;
        if shift != 0 {
            merged = g.cyclic_shift(merged, shift as isize)?;
        }
        let y = self.proj.forward(g, p, merged)?;
        let output = g.add(x, y)?;
        Ok(Attention { output, map: att.map })
    }
}

/// Global self-attention: multi-head channel attention over the whole feature.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAttention {
    pub norm: LayerNorm,
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub beta: ParamId,
    pub proj: Conv2d,
    pub channels: usize,
    pub heads: usize,
    pub shuffle: bool,
}

impl GlobalAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, heads: usize, shuffle: bool) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::arg("gsa", format!("{heads} heads do not divide {channels} channels")));
        }
        Ok(GlobalAttention {
            norm: LayerNorm::new(b, &format!("{name}.norm"), channels)?,
            qkv: Conv2d::pointwise(b, &format!("{name}.qkv"), channels, 3 * channels)?,
            qkv_dw: Conv2d::depthwise3(b, &format!("{name}.qkv_dw"), 3 * channels)?,
            beta: b.constant(format!("{name}.beta"), &[1], 1.0)?,
            proj: Conv2d::pointwise(b, &format!("{name}.proj"), channels, channels)?,
            channels,
            heads,
            shuffle,
        })
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_with_map(g, p, x)?.output)
    }

    /// Output plus the per-head attention map `[B, heads, Ĉ, Ĉ]`.
    pub fn forward_with_map<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Attention> {
        let [b, c, h, w] = expect_channels(g, x, "gsa", self.channels)?;
        let (heads, hc) = (self.heads, self.head_channels());
        let t = temperature(g, p, self.beta, "gsa")?;
        let f = self.norm.forward(g, p, x)?;
        let f = self.qkv.forward(g, p, f)?;
        let f = self.qkv_dw.forward(g, p, f)?;
        let f = g.reshape(f, &[b, 3 * heads, hc, h * w])?;
        let qkv = g.split(f, 1, &[heads, heads, heads])?;
        let att = relu_attention(g, qkv[0], qkv[1], qkv[2], t, false)?;
        let mut out = g.reshape(att.output, &[b, c, h, w])?;
        if self.shuffle {
            out = shuffle_heads_var(g, out, heads)?;
        }
        let y = self.proj.forward(g, p, out)?;
        let output = g.add(x, y)?;
        Ok(Attention { output, map: att.map })
    }
}

/// Construction parameters of one [`FdtBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FdtSpec {
    pub channels: usize,
    pub window: usize,
    pub shifted: bool,
    pub heads: usize,
    pub shuffle: bool,
    pub ffn_expansion: usize,
}

/// Regional attention, feed-forward, global attention, feed-forward; each
/// sublayer is pre-normalized and carries its own residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct FdtBlock {
    pub rsa: RegionalAttention,
    pub rsa_ffn: FeedForward,
    pub gsa: GlobalAttention,
    pub gsa_ffn: FeedForward,
}

impl FdtBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: FdtSpec) -> Result<Self> {
        Ok(FdtBlock {
            rsa: RegionalAttention::new(b, &format!("{name}.rsa"), spec.channels, spec.window, spec.shifted)?,
            rsa_ffn: FeedForward::new(b, &format!("{name}.rsa_ffn"), spec.channels, spec.ffn_expansion)?,
            gsa: GlobalAttention::new(b, &format!("{name}.gsa"), spec.channels, spec.heads, spec.shuffle)?,
            gsa_ffn: FeedForward::new(b, &format!("{name}.gsa_ffn"), spec.channels, spec.ffn_expansion)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.rsa.channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let x1 = self.rsa.forward(g, p, x)?;
        let x2 = self.rsa_ffn.forward(g, p, x1)?;
        let x3 = self.gsa.forward(g, p, x2)?;
        self.gsa_ffn.forward(g, p, x3)
    }
}

/// Names of the parameters whose zeroing turns every attention and
/// feed-forward branch of a block into the identity.
pub fn is_branch_output(name: &str) -> bool {
    name.contains(".proj.") || name.contains("_ffn.project.")
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParameterStore;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn spec(channels: usize, window: usize, shifted: bool, heads: usize) -> FdtSpec {
        FdtSpec { channels, window, shifted, heads, shuffle: true, ffn_expansion: 2 }
    }

    fn run<T: Real>(store: &ParameterStore<T>, x: &Tensor<T>, f: impl Fn(&mut Graph<T>, &BoundParams, Var) -> Result<Var>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let xv = g.input(x.clone()).unwrap();
        let y = f(&mut g, &p, xv).unwrap();
        g.value(y).unwrap().clone()
    }

    #[test]
    fn shuffle_heads_examples() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 1, 1], |i| i as f32);
        assert_eq!(shuffle_heads(&x, 2).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
        let y = random(&[2, 6, 3, 3], 1);
        assert_eq!(shuffle_heads(&y, 1).unwrap(), y);
        assert_eq!(shuffle_heads(&shuffle_heads(&y, 2).unwrap(), 3).unwrap(), y);
        assert!(shuffle_heads(&y, 4).is_err());
    }

    #[test]
    fn regional_map_is_channel_square_and_shape_preserved() {
        for (n, shifted) in [(8, false), (4, true), (8, true)] {
            let mut b = ParamBuilder::new(2);
            let rsa = RegionalAttention::new(&mut b, "rsa", 8, n, shifted).unwrap();
            let store = b.finish();
            let mut g = Graph::new();
            let p = store.bind(&mut g).unwrap();
            let x = g.input(random(&[1, 8, 16, 16], 3)).unwrap();
            let att = rsa.forward_with_map(&mut g, &p, x).unwrap();
            assert_eq!(g.value(att.output).unwrap().shape(), &[1, 8, 16, 16]);
            assert_eq!(g.value(att.map).unwrap().shape(), &[256 / (n * n), 8, 8]);
        }
    }

    #[test]
    fn global_map_is_head_square() {
        let mut b = ParamBuilder::new(2);
        let gsa = GlobalAttention::new(&mut b, "gsa", 8, 2, true).unwrap();
        let store = b.finish();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.input(random(&[1, 8, 6, 6], 3)).unwrap();
        let att = gsa.forward_with_map(&mut g, &p, x).unwrap();
        assert_eq!(g.value(att.map).unwrap().shape(), &[1, 2, 4, 4]);
        assert_eq!(g.value(att.output).unwrap().shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn zero_projection_makes_sublayers_identity() {
        let mut b = ParamBuilder::new(4);
        let block = FdtBlock::new(&mut b, "fdt", spec(8, 4, true, 2)).unwrap();
        let full = b.finish();
        let x = random(&[2, 8, 8, 8], 5);

        let mut rsa_off = full.clone();
        rsa_off.zero_where(|n| n.starts_with("fdt.rsa.proj"));
        assert_eq!(run(&rsa_off, &x, |g, p, v| block.rsa.forward(g, p, v)), x);

        let mut gsa_off = full.clone();
        gsa_off.zero_where(|n| n.starts_with("fdt.gsa.proj"));
        assert_eq!(run(&gsa_off, &x, |g, p, v| block.gsa.forward(g, p, v)), x);

        let mut all_off = full.clone();
        all_off.zero_where(is_branch_output);
        assert_eq!(run(&all_off, &x, |g, p, v| block.forward(g, p, v)), x);
        assert_ne!(run(&full, &x, |g, p, v| block.forward(g, p, v)), x);
    }

    #[test]
    fn attention_is_linear_in_values() {
        let q = random(&[2, 4, 16], 10);
        let k = random(&[2, 4, 16], 11);
        let v = random(&[2, 4, 16], 12);
        for transpose in [false, true] {
            let eval = |v: &Tensor<f32>| {
                let mut g = Graph::new();
                let (qv, kv, vv) = (g.input(q.clone()).unwrap(), g.input(k.clone()).unwrap(), g.input(v.clone()).unwrap());
                let t = g.input(Tensor::from_f64(&[1], &[0.7]).unwrap()).unwrap();
                let a = relu_attention(&mut g, qv, kv, vv, t, transpose).unwrap();
                g.value(a.output).unwrap().clone()
            };
            let once = eval(&v);
            let twice = eval(&v.map(|x| 2.0 * x));
            for (a, b) in once.data().iter().zip(twice.data()) {
                assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1e-6), "{a} {b}");
            }
        }
    }

    #[test]
    fn attention_map_oracle() {
        // direct evaluation of ReLU(q̂·k̂ᵀ/t) and the token-major product v·M
        let q = random(&[1, 3, 5], 20);
        let k = random(&[1, 3, 5], 21);
        let v = random(&[1, 3, 5], 22);
        let t = 0.5f64;
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.input(q.cast()).unwrap(), g.input(k.cast()).unwrap(), g.input(v.cast()).unwrap());
        let tv = g.input(Tensor::from_f64(&[1], &[t]).unwrap()).unwrap();
        let a = relu_attention(&mut g, qv, kv, vv, tv, true).unwrap();
        let norm = |x: &Tensor<f32>, c: usize| {
            let row: alloc::vec::Vec<f64> = (0..5).map(|j| x.data()[c * 5 + j] as f64).collect();
            let r = (row.iter().map(|v| v * v).sum::<f64>() + QK_NORM_EPS).sqrt();
            row.into_iter().map(|v| v / r).collect::<alloc::vec::Vec<_>>()
        };
        let mut m = [[0.0f64; 3]; 3];
        for (i, mi) in m.iter_mut().enumerate() {
            for (j, mij) in mi.iter_mut().enumerate() {
                let (qi, kj) = (norm(&q, i), norm(&k, j));
                *mij = (qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / t).max(0.0);
            }
        }
        let map = g.value(a.map).unwrap();
        let out = g.value(a.output).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((map.data()[i * 3 + j] - m[i][j]).abs() < 1e-12);
            }
            for tok in 0..5 {
                // out[c=i, tok] = Σ_d v[d, tok] · M[d, i]
                let want: f64 = (0..3).map(|d| v.data()[d * 5 + tok] as f64 * m[d][i]).sum();
                assert!((out.data()[i * 5 + tok] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_temperature_and_bad_geometry_rejected() {
        let mut b = ParamBuilder::new(0);
        let rsa = RegionalAttention::new(&mut b, "rsa", 4, 3, false).unwrap();
        let gsa = GlobalAttention::new(&mut b, "gsa", 4, 2, false).unwrap();
        assert!(GlobalAttention::new(&mut b, "bad", 4, 3, false).is_err());
        let mut store = b.finish();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.input(random(&[1, 4, 8, 8], 0)).unwrap();
        assert!(matches!(rsa.forward(&mut g, &p, x), Err(Error::Shape { .. })));
        store.zero_where(|n| n == "gsa.beta");
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.input(random(&[1, 4, 8, 8], 0)).unwrap();
        assert!(matches!(gsa.forward(&mut g, &p, x), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn small_windows_shrink_to_the_feature() {
        let mut b = ParamBuilder::new(0);
        let rsa = RegionalAttention::new(&mut b, "rsa", 4, 8, true).unwrap();
        assert_eq!(rsa.geometry(4, 4).unwrap(), (4, 2));
        assert_eq!(rsa.geometry(16, 8).unwrap(), (8, 4));
        assert!(rsa.geometry(12, 12).is_err());
    }

    fn check_block(shifted: bool, seed: u64) {
        let mut b = ParamBuilder::new(seed);
        let block = FdtBlock::new(&mut b, "fdt", spec(4, 4, shifted, 2)).unwrap();
        let mut store = b.finish().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // perturb the zero-initialized biases and temperatures off their defaults
        let names: alloc::vec::Vec<_> = store.iter().map(|(_, n, _)| alloc::string::String::from(n)).collect();
        for name in names {
            let t = store.get(&name).unwrap().map(|v| v + rng.random_range(-0.2..0.2));
            store.set(&name, t).unwrap();
        }
        let input = store.insert("input", random(&[1, 4, 8, 8], seed + 1).cast()).unwrap();
        let probe = random(&[1, 4, 8, 8], seed + 2).cast::<f64>();
        let report = grad_check(
            &store,
            |g, p| {
                let y = block.forward(g, p, p[input])?;
                let r = g.input(probe.clone())?;
                let y = g.mul(y, r)?;
                g.sum(y)
            },
            &GradCheckOptions { max_probes_per_param: Some(12), seed, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn fdt_block_gradients() {
        check_block(false, 7);
        check_block(true, 8);
    }
}
