//! Slice-level numeric kernels shared by the tensor graph and the plain-tensor APIs.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Real;
use crate::error::{Error, Result};

const LANES: usize = 8;

/// Sum with eight interleaved accumulators, combined in a fixed order.
pub fn sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s += a;
    }
    for &t in tail {
        s += t;
    }
    s
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

fn strides(shape: &[usize]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Row-major data movement for an axis permutation of order ≤ 4.
pub fn permute<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let st = strides(shape);
    let mut od = [1usize; 4];
    let mut os = [0usize; 4];
    for i in 0..rank {
        od[4 - rank + i] = shape[perm[i]];
        os[4 - rank + i] = st[perm[i]];
    }
    let mut out = Vec::with_capacity(src.len());
    for a in 0..od[0] {
        for b in 0..od[1] {
            for c in 0..od[2] {
                let base = a * os[0] + b * os[1] + c * os[2];
                if os[3] == 1 {
                    out.extend_from_slice(&src[base..base + od[3]]);
                } else {
                    out.extend((0..od[3]).map(|d| src[base + d * os[3]]));
                }
            }
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution on B×C×H×W input with O×(C/groups)×K×K weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[batch, in_channels, height, width] = input else {
            return Err(Error::shape(OP, format!("input must be B×C×H×W, got {input:?}")));
        };
        let &[out_channels, per_group, kh, kw] = weight else {
            return Err(Error::shape(OP, format!("weight must be O×I×K×K, got {weight:?}")));
        };
        if stride == 0 || groups == 0 {
            return Err(Error::arg(OP, "stride and groups must be positive"));
        }
        if kh != kw || kh == 0 {
            return Err(Error::shape(OP, format!("kernel must be square and non-empty, got {kh}×{kw}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::arg(
                OP,
                format!("groups {groups} must divide input channels {in_channels} and output channels {out_channels}"),
            ));
        }
        if per_group != in_channels / groups {
            return Err(Error::shape(
                OP,
                format!(
                    "weight expects {per_group} input channels per group, input provides {} ({in_channels}/{groups})",
                    in_channels / groups
                ),
            ));
        }
        if height + 2 * padding < kh || width + 2 * padding < kh {
            return Err(Error::shape(
                OP,
                format!("kernel {kh} larger than padded input {}×{}", height + 2 * padding, width + 2 * padding),
            ));
        }
        Ok(ConvGeom {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            groups,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kh) / stride + 1,
        })
    }

    fn cg(&self) -> usize {
        self.in_channels / self.groups
    }

    fn og(&self) -> usize {
        self.out_channels / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.stride == 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Output columns `[lo, hi)` whose tap `kw` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.padding, self.width);
        // need 0 <= ow*s + kw - p < w
        let lo = if kw >= p { 0 } else { (p - kw).div_ceil(s) };
        let hi = if w + p > kw { ((w + p - kw - 1) / s + 1).min(self.out_width) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Real>(g: &ConvGeom, src: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let (h, w, ho, wo) = (g.height, g.width, g.out_height, g.out_width);
    let howo = ho * wo;
    for c in 0..g.cg() {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((c * k + kh) * k + kw) * howo..][..howo];
                let (lo, hi) = g.valid_cols(kw);
                for oh in 0..ho {
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    let ih = (oh * s + kh) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[ih as usize * w..(ih as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if s == 1 {
                        let off = lo + kw - p;
                        dst[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                    } else {
                        for ow in lo..hi {
                            dst[ow] = srow[ow * s + kw - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dst: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let (h, w, ho, wo) = (g.height, g.width, g.out_height, g.out_width);
    let howo = ho * wo;
    for c in 0..g.cg() {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((c * k + kh) * k + kw) * howo..][..howo];
                let (lo, hi) = g.valid_cols(kw);
                for oh in 0..ho {
                    let ih = (oh * s + kh) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let srow = &row[oh * wo..(oh + 1) * wo];
                    for ow in lo..hi {
                        drow[ow * s + kw - p] += srow[ow];
                    }
                }
            }
        }
    }
}

/// Stride-1 depthwise correlation of one plane: `out += w ⋆ x`.
fn depthwise_plane<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], out: &mut [T]) {
    let (k, p, w) = (g.kernel, g.padding, g.width);
    let (ho, wo) = (g.out_height, g.out_width);
    for kh in 0..k {
        for kw in 0..k {
            let wv = wt[kh * k + kw];
            let (lo, hi) = g.valid_cols(kw);
            for oh in 0..ho {
                let ih = (oh + kh) as isize - p as isize;
                if ih < 0 || ih >= g.height as isize {
                    continue;
                }
                let srow = &x[ih as usize * w..][..w];
                let off = lo + kw - p;
                axpy(wv, &srow[off..off + hi - lo], &mut out[oh * wo + lo..oh * wo + hi]);
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cg, og, k) = (g.cg(), g.og(), g.kernel);
    let hw = g.height * g.width;
    let howo = g.out_height * g.out_width;
    let ckk = cg * k * k;
    let mut out = vec![T::zero(); g.batch * g.out_channels * howo];
    let mut cols = if g.is_pointwise() || g.is_depthwise() { Vec::new() } else { vec![T::zero(); ckk * howo] };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let src = &input[(b * g.in_channels + grp * cg) * hw..][..cg * hw];
            let dst = &mut out[(b * g.out_channels + grp * og) * howo..][..og * howo];
            if let Some(bias) = bias {
                for (o, row) in dst.chunks_exact_mut(howo).enumerate() {
                    row.fill(bias[grp * og + o]);
                }
            }
            let wg = &weight[grp * og * ckk..][..og * ckk];
            if g.is_depthwise() {
                depthwise_plane(g, src, wg, dst);
            } else if g.is_pointwise() {
                gemm(og, ckk, howo, wg, src, dst);
            } else {
                im2col(g, src, &mut cols);
                gemm(og, ckk, howo, wg, &cols, dst);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (cg, og, k) = (g.cg(), g.og(), g.kernel);
    let hw = g.height * g.width;
    let howo = g.out_height * g.out_width;
    let ckk = cg * k * k;
    let mut dx = want.0.then(|| vec![T::zero(); input.len()]);
    let mut dw = want.1.then(|| vec![T::zero(); weight.len()]);
    let db = want.2.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (o, d) in db.iter_mut().enumerate() {
                *d += sum(&grad_out[(b * g.out_channels + o) * howo..][..howo]);
            }
        }
        db
    });
    let mut cols = vec![T::zero(); if g.is_pointwise() || g.is_depthwise() { 0 } else { ckk * howo }];
    let mut dcols = cols.clone();
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let src = &input[(b * g.in_channels + grp * cg) * hw..][..cg * hw];
            let gout = &grad_out[(b * g.out_channels + grp * og) * howo..][..og * howo];
            let wg = &weight[grp * og * ckk..][..og * ckk];
            if g.is_depthwise() {
                if let Some(dw) = dw.as_mut() {
                    let dwg = &mut dw[grp * k * k..][..k * k];
                    depthwise_weight_grad(g, src, gout, dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxg = &mut dx[(b * g.in_channels + grp) * hw..][..hw];
                    depthwise_input_grad(g, wg, gout, dxg);
                }
                continue;
            }
            let pointwise = g.is_pointwise();
            if !pointwise {
                im2col(g, src, &mut cols);
            }
            if let Some(dw) = dw.as_mut() {
                let c: &[T] = if pointwise { src } else { &cols };
                gemm_nt(og, howo, ckk, gout, c, &mut dw[grp * og * ckk..][..og * ckk]);
            }
            if let Some(dx) = dx.as_mut() {
                let dxg = &mut dx[(b * g.in_channels + grp * cg) * hw..][..cg * hw];
                if pointwise {
                    gemm_tn(ckk, og, howo, wg, gout, dxg);
                } else {
                    dcols.fill(T::zero());
                    gemm_tn(ckk, og, howo, wg, gout, &mut dcols);
                    col2im(g, &dcols, dxg);
                }
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

fn depthwise_weight_grad<T: Real>(g: &ConvGeom, x: &[T], gout: &[T], dw: &mut [T]) {
    let (k, p, w) = (g.kernel, g.padding, g.width);
    let (ho, wo) = (g.out_height, g.out_width);
    for kh in 0..k {
        for kw in 0..k {
            let (lo, hi) = g.valid_cols(kw);
            let mut acc = T::zero();
            for oh in 0..ho {
                let ih = (oh + kh) as isize - p as isize;
                if ih < 0 || ih >= g.height as isize {
                    continue;
                }
                let off = lo + kw - p;
                let srow = &x[ih as usize * w + off..][..hi - lo];
                acc += dot(srow, &gout[oh * wo + lo..oh * wo + hi]);
            }
            dw[kh * k + kw] += acc;
        }
    }
}

fn depthwise_input_grad<T: Real>(g: &ConvGeom, wt: &[T], gout: &[T], dx: &mut [T]) {
    let (k, p, w) = (g.kernel, g.padding, g.width);
    let (ho, wo) = (g.out_height, g.out_width);
    for kh in 0..k {
        for kw in 0..k {
            let wv = wt[kh * k + kw];
            let (lo, hi) = g.valid_cols(kw);
            for oh in 0..ho {
                let ih = (oh + kh) as isize - p as isize;
                if ih < 0 || ih >= g.height as isize {
                    continue;
                }
                let off = lo + kw - p;
                axpy(wv, &gout[oh * wo + lo..oh * wo + hi], &mut dx[ih as usize * w + off..][..hi - lo]);
            }
        }
    }
}

/// Per-position channel statistics for layer normalization over C of a B×C×P layout.
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn channel_stats<T: Real>(x: &[T], batch: usize, channels: usize, positions: usize, eps: T) -> ChannelStats<T> {
    let inv_c = T::one() / T::of(channels as f64);
    let mut mean = vec![T::zero(); batch * positions];
    let mut rstd = vec![T::zero(); batch * positions];
    for b in 0..batch {
        let m = &mut mean[b * positions..(b + 1) * positions];
        let r = &mut rstd[b * positions..(b + 1) * positions];
        for c in 0..channels {
            axpy(T::one(), &x[(b * channels + c) * positions..][..positions], m);
        }
        m.iter_mut().for_each(|v| *v *= inv_c);
        for c in 0..channels {
            let row = &x[(b * channels + c) * positions..][..positions];
            for ((rv, &xv), &mv) in r.iter_mut().zip(row).zip(m.iter()) {
                let d = xv - mv;
                *rv += d * d;
            }
        }
        r.iter_mut().for_each(|v| *v = T::one() / (*v * inv_c + eps).sqrt());
    }
    ChannelStats { mean, rstd }
}

pub fn layer_norm_forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    beta: &[T],
    stats: &ChannelStats<T>,
) -> Vec<T> {
    let [batch, channels, positions] = dims;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        let m = &stats.mean[b * positions..(b + 1) * positions];
        let r = &stats.rstd[b * positions..(b + 1) * positions];
        for c in 0..channels {
            let off = (b * channels + c) * positions;
            let (gc, bc) = (gamma[c], beta[c]);
            for (((yv, &xv), &mv), &rv) in y[off..off + positions].iter_mut().zip(&x[off..off + positions]).zip(m).zip(r) {
                *yv = (xv - mv) * rv * gc + bc;
            }
        }
    }
    y
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn layer_norm_backward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    stats: &ChannelStats<T>,
    dy: &[T],
) -> NormGrads<T> {
    let [batch, channels, positions] = dims;
    let inv_c = T::one() / T::of(channels as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut xhat = vec![T::zero(); channels * positions];
    let mut m1 = vec![T::zero(); positions];
    let mut m2 = vec![T::zero(); positions];
    for b in 0..batch {
        let m = &stats.mean[b * positions..(b + 1) * positions];
        let r = &stats.rstd[b * positions..(b + 1) * positions];
        m1.fill(T::zero());
        m2.fill(T::zero());
        for c in 0..channels {
            let off = (b * channels + c) * positions;
            let xh = &mut xhat[c * positions..(c + 1) * positions];
            let gy = &dy[off..off + positions];
            for ((((h, &xv), &mv), &rv), ((a1, a2), &g)) in xh
                .iter_mut()
                .zip(&x[off..off + positions])
                .zip(m)
                .zip(r)
                .zip(m1.iter_mut().zip(m2.iter_mut()).zip(gy))
            {
                *h = (xv - mv) * rv;
                let d = g * gamma[c];
                *a1 += d;
                *a2 += d * *h;
            }
            dgamma[c] += dot(gy, xh);
            dbeta[c] += sum(gy);
        }
        for c in 0..channels {
            let off = (b * channels + c) * positions;
            let xh = &xhat[c * positions..(c + 1) * positions];
            for (i, dv) in dx[off..off + positions].iter_mut().enumerate() {
                let d = dy[off + i] * gamma[c];
                *dv = r[i] * (d - m1[i] * inv_c - xh[i] * m2[i] * inv_c);
            }
        }
    }
    NormGrads { input: dx, gamma: dgamma, beta: dbeta }
}

/// Circular shift of every H×W plane by `(shift, shift)`; element `(h, w)` moves to
/// `((h + shift) mod H, (w + shift) mod W)`.
pub fn roll_planes<T: Copy + Default>(x: &[T], planes: usize, h: usize, w: usize, shift: isize) -> Vec<T> {
    let sh = shift.rem_euclid(h as isize) as usize;
    let sw = shift.rem_euclid(w as isize) as usize;
    let mut out = vec![T::default(); x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            let srow = &src[r * w..(r + 1) * w];
            let dr = (r + sh) % h;
            let drow = &mut dst[dr * w..(dr + 1) * w];
            drow[sw..].copy_from_slice(&srow[..w - sw]);
            drow[..sw].copy_from_slice(&srow[w - sw..]);
        }
    }
    out
}

/// B×C×H×W → (B·H/N·W/N)×C×N×N, windows ordered batch-major then row-major.
pub fn window_partition<T: Copy>(x: &[T], dims: [usize; 4], n: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (nh, nw) = (h / n, w / n);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for i in 0..n {
                        let row = (wy * n + i) * w + wx * n;
                        out.extend_from_slice(&plane[row..row + n]);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition`]; `dims` is the merged B×C×H×W shape.
pub fn window_merge<T: Copy + Default>(x: &[T], dims: [usize; 4], n: usize) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (nh, nw) = (h / n, w / n);
    let mut out = vec![T::default(); x.len()];
    let mut src = x.chunks_exact(n);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ci in 0..c {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    for i in 0..n {
                        let row = (wy * n + i) * w + wx * n;
                        plane[row..row + n].copy_from_slice(src.next().unwrap());
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let (r0, r1) = (&src[2 * i * w..][..w], &src[(2 * i + 1) * w..][..w]);
            for j in 0..wo {
                out.push((r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * q);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let g = dy[(p * ho + i) * wo + j] * q;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dst[(2 * i + di) * w + 2 * j + dj] = g;
                }
            }
        }
    }
    dx
}

/// Keys' cubic convolution kernel with parameter `a`.
pub fn cubic_weight(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four-tap resampling weights for one axis (pixel-center mapping, edge clamp).
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleAxis {
    pub src: usize,
    pub dst: usize,
    taps: Vec<([usize; 4], [f64; 4])>,
}

pub const BICUBIC_A: f64 = -0.5;

impl ResampleAxis {
    pub fn bicubic(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let last = src as isize - 1;
        let taps = (0..dst)
            .map(|i| {
                let x = (i as f64 + 0.5) * scale - 0.5;
                let x0 = num_traits::Float::floor(x);
                let t = x - x0;
                let base = x0 as isize;
                let mut idx = [0usize; 4];
                let mut wts = [0f64; 4];
                for j in 0..4 {
                    idx[j] = (base - 1 + j as isize).clamp(0, last) as usize;
                    wts[j] = cubic_weight(t + 1.0 - j as f64, BICUBIC_A);
                }
                (idx, wts)
            })
            .collect();
        ResampleAxis { src, dst, taps }
    }

    /// Resamples `lines` rows of length `src` (contiguous) into rows of length `dst`.
    fn apply_rows<T: Real>(&self, x: &[T], lines: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(lines * self.dst);
        let taps: Vec<([usize; 4], [T; 4])> =
            self.taps.iter().map(|(i, w)| (*i, w.map(T::of))).collect();
        for l in 0..lines {
            let row = &x[l * self.src..(l + 1) * self.src];
            for (idx, w) in &taps {
                out.push(row[idx[0]] * w[0] + row[idx[1]] * w[1] + row[idx[2]] * w[2] + row[idx[3]] * w[3]);
            }
        }
        out
    }

    fn adjoint_rows<T: Real>(&self, dy: &[T], lines: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); lines * self.src];
        for l in 0..lines {
            let row = &mut dx[l * self.src..(l + 1) * self.src];
            for (o, (idx, w)) in self.taps.iter().enumerate() {
                let g = dy[l * self.dst + o];
                for j in 0..4 {
                    row[idx[j]] += g * T::of(w[j]);
                }
            }
        }
        dx
    }

    /// Resamples along the second-to-last axis of `planes` planes of `rows × cols`.
    fn apply_cols<T: Real>(&self, x: &[T], planes: usize, cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); planes * self.dst * cols];
        for p in 0..planes {
            let src = &x[p * self.src * cols..(p + 1) * self.src * cols];
            let dst = &mut out[p * self.dst * cols..(p + 1) * self.dst * cols];
            for (o, (idx, w)) in self.taps.iter().enumerate() {
                let drow = &mut dst[o * cols..(o + 1) * cols];
                for j in 0..4 {
                    axpy(T::of(w[j]), &src[idx[j] * cols..(idx[j] + 1) * cols], drow);
                }
            }
        }
        out
    }

    fn adjoint_cols<T: Real>(&self, dy: &[T], planes: usize, cols: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); planes * self.src * cols];
        for p in 0..planes {
            let src = &dy[p * self.dst * cols..(p + 1) * self.dst * cols];
            let dst = &mut dx[p * self.src * cols..(p + 1) * self.src * cols];
            for (o, (idx, w)) in self.taps.iter().enumerate() {
                for j in 0..4 {
                    axpy(T::of(w[j]), &src[o * cols..(o + 1) * cols], &mut dst[idx[j] * cols..(idx[j] + 1) * cols]);
                }
            }
        }
        dx
    }
}

/// Separable resampling plan for P planes of H×W → H'×W'.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    pub rows: ResampleAxis,
    pub cols: ResampleAxis,
}

impl ResamplePlan {
    pub fn bicubic(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        ResamplePlan { rows: ResampleAxis::bicubic(h, out_h), cols: ResampleAxis::bicubic(w, out_w) }
    }

    pub fn forward<T: Real>(&self, x: &[T], planes: usize) -> Vec<T> {
        let tmp = self.cols.apply_rows(x, planes * self.rows.src);
        self.rows.apply_cols(&tmp, planes, self.cols.dst)
    }

    pub fn backward<T: Real>(&self, dy: &[T], planes: usize) -> Vec<T> {
        let tmp = self.rows.adjoint_cols(dy, planes, self.cols.dst);
        self.cols.adjoint_rows(&tmp, planes * self.rows.src)
    }
}
