//! Decoded three-channel raster images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar RGB image with values nominally in `[0, 1]`.
///
/// Values are stored channel-major (`R` plane, then `G`, then `B`), matching
/// the 3×H×W slice of a batch tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// File path or synthetic tag the image came from.
    pub source: String,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>, source: impl Into<String>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(Error::shape(
                "image",
                format!("{} values for a {width}×{height} RGB image", data.len()),
            ));
        }
        Ok(ImageBuffer { width, height, data, source: source.into() })
    }

    pub fn filled(width: usize, height: usize, value: f32, source: impl Into<String>) -> Self {
        ImageBuffer { width, height, data: alloc::vec![value; 3 * width * height], source: source.into() }
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, source: impl Into<String>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [3, h, w] | [1, 3, h, w] => (h, w),
            _ => return Err(Error::shape("image", format!("cannot view {:?} as one RGB image", t.shape()))),
        };
        Ok(ImageBuffer { width: w, height: h, data: t.data().iter().map(|v| v.as_f64() as f32).collect(), source: source.into() })
    }

    /// `[1, 3, H, W]` tensor of the stored values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| T::of(self.data[i] as f64))
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        ImageBuffer { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    pub fn same_extent(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Stacks equally sized images into a `[N, 3, H, W]` batch.
pub fn stack<T: Real>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::arg("stack", "no images"))?;
    if let Some(bad) = images.iter().find(|im| !im.same_extent(first)) {
        return Err(Error::shape(
            "stack",
            format!("{}×{} image among {}×{} images", bad.width, bad.height, first.width, first.height),
        ));
    }
    let data = images.iter().flat_map(|im| im.data.iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new(&[images.len(), 3, first.height, first.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = ImageBuffer::new(3, 2, (0..18).map(|i| i as f32 / 17.0).collect(), "t").unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert_eq!(ImageBuffer::from_tensor(&t, "t").unwrap(), img);
        assert_eq!(img.get(1, 1, 2), 11.0 / 17.0);
        assert!(ImageBuffer::new(3, 2, alloc::vec![0.0; 17], "t").is_err());
        let batch = stack::<f32>(&[&img, &img]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 3]);
    }
}
