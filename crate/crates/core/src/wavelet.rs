//! Single-level 2-D Haar wavelet transform.
//!
//! Forward filters are the unnormalized pair `[1, 1]` / `[1, -1]`, applied first
//! along rows (pairing columns `2j`, `2j+1`) and then along columns (pairing rows
//! `2i`, `2i+1`). All factors of ½ live in the inverse, so integer-valued input
//! round-trips exactly.
//!
//! With `a b / c d` the 2×2 block at `(2i, 2j)`:
//!
//! ```text
//! ll = (a + b) + (c + d)     lh = (a + b) - (c + d)
//! hl = (a - b) + (c - d)     hh = (a - b) - (c - d)
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// The four half-resolution Haar subbands of a B×C×H×W tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<X> {
    /// Approximation `A_LL`.
    pub ll: X,
    /// Horizontal detail `H_LH`.
    pub lh: X,
    /// Vertical detail `V_HL`.
    pub hl: X,
    /// Diagonal detail `D_HH`.
    pub hh: X,
    /// Spatial extent `(H, W)` of the transformed tensor.
    pub source_shape: (usize, usize),
}

impl<X> SubbandSet<X> {
    pub fn bands(&self) -> [&X; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn map<Y>(self, mut f: impl FnMut(X) -> Y) -> SubbandSet<Y> {
        SubbandSet { ll: f(self.ll), lh: f(self.lh), hl: f(self.hl), hh: f(self.hh), source_shape: self.source_shape }
    }
}

pub(crate) fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::shape("dwt2_haar", format!("extents must be even and non-zero, got {h}×{w}")));
    }
    Ok(())
}

/// Packs B×C×H×W into B×4C×(H/2)×(W/2), band-major (`ll`, `lh`, `hl`, `hh`).
pub(crate) fn analysis<T: Real>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * h * w..][..h * w];
            let band = |k: usize| ((bi * 4 + k) * c + ci) * q;
            let (o_ll, o_lh, o_hl, o_hh) = (band(0), band(1), band(2), band(3));
            for i in 0..h2 {
                let (r0, r1) = (&plane[2 * i * w..][..w], &plane[(2 * i + 1) * w..][..w]);
                for j in 0..w2 {
                    // row pass
                    let l0 = r0[2 * j] + r0[2 * j + 1];
                    let h0 = r0[2 * j] - r0[2 * j + 1];
                    let l1 = r1[2 * j] + r1[2 * j + 1];
                    let h1 = r1[2 * j] - r1[2 * j + 1];
                    // column pass
                    let k = i * w2 + j;
                    out[o_ll + k] = l0 + l1;
                    out[o_lh + k] = l0 - l1;
                    out[o_hl + k] = h0 + h1;
                    out[o_hh + k] = h0 - h1;
                }
            }
        }
    }
    out
}

/// Inverse of [`analysis`]; `dims` is the reconstructed B×C×H×W shape.
pub(crate) fn synthesis<T: Real>(packed: &[T], dims: [usize; 4]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let half = T::of(0.5);
    let mut out = vec![T::zero(); packed.len()];
    for bi in 0..b {
        for ci in 0..c {
            let band = |k: usize| &packed[((bi * 4 + k) * c + ci) * q..][..q];
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let k = i * w2 + j;
                    // column unpack
                    let l0 = (ll[k] + lh[k]) * half;
                    let l1 = (ll[k] - lh[k]) * half;
                    let h0 = (hl[k] + hh[k]) * half;
                    let h1 = (hl[k] - hh[k]) * half;
                    // row unpack
                    plane[2 * i * w + 2 * j] = (l0 + h0) * half;
                    plane[2 * i * w + 2 * j + 1] = (l0 - h0) * half;
                    plane[(2 * i + 1) * w + 2 * j] = (l1 + h1) * half;
                    plane[(2 * i + 1) * w + 2 * j + 1] = (l1 - h1) * half;
                }
            }
        }
    }
    out
}

/// Transpose of [`analysis`]: maps band gradients back to the source layout.
pub(crate) fn analysis_adjoint<T: Real>(g: &[T], dims: [usize; 4]) -> Vec<T> {
    // analysis·analysisᵀ = 4·I, so the adjoint is 4× the inverse.
    let mut out = synthesis(g, dims);
    let four = T::of(4.0);
    out.iter_mut().for_each(|v| *v *= four);
    out
}

/// Transpose of [`synthesis`].
pub(crate) fn synthesis_adjoint<T: Real>(g: &[T], dims: [usize; 4]) -> Vec<T> {
    let mut out = analysis(g, dims);
    let quarter = T::of(0.25);
    out.iter_mut().for_each(|v| *v *= quarter);
    out
}

/// Haar analysis of a B×C×H×W tensor (H and W even).
pub fn dwt2_haar<T: Real>(x: &Tensor<T>) -> Result<SubbandSet<Tensor<T>>> {
    let [b, c, h, w] = x.dims4("dwt2_haar")?;
    check_even(h, w)?;
    let packed = Tensor::from_parts(vec![b, 4 * c, h / 2, w / 2], analysis(x.data(), [b, c, h, w]));
    let mut parts = packed.split(1, &[c, c, c, c])?.into_iter();
    let mut next = || parts.next().expect("four bands");
    Ok(SubbandSet { ll: next(), lh: next(), hl: next(), hh: next(), source_shape: (h, w) })
}

/// Haar synthesis; `idwt2_haar(&dwt2_haar(x)?)? == x` exactly for integer-valued `x`.
pub fn idwt2_haar<T: Real>(bands: &SubbandSet<Tensor<T>>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape();
    if bands.bands().iter().any(|t| t.shape() != shape) {
        return Err(Error::shape(
            "idwt2_haar",
            format!(
                "subband shapes differ: {:?}",
                bands.bands().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
            ),
        ));
    }
    let [b, c, h, w] = bands.ll.dims4("idwt2_haar")?;
    if bands.source_shape != (2 * h, 2 * w) {
        return Err(Error::shape(
            "idwt2_haar",
            format!("bands of {h}×{w} cannot restore {:?}", bands.source_shape),
        ));
    }
    let packed = Tensor::concat(&[&bands.ll, &bands.lh, &bands.hl, &bands.hh], 1)?;
    Ok(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], synthesis(packed.data(), [b, c, 2 * h, 2 * w])))
}
