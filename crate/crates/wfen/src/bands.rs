//! `dwt` / `idwt` on PPM files.
//!
//! The transform runs on raw byte values (0..=255), where the unnormalized
//! Haar analysis is exact in `f32`. Besides four display images, `dwt` writes
//! the raw bands to `<prefix>.bands` in checkpoint layout; `idwt` reads only
//! that file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wfen_core::wavelet::{dwt2_haar, idwt2_haar, SubbandSet};
use wfen_core::{ImageBuffer, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ppm;

pub const BAND_NAMES: [&str; 4] = ["ll", "lh", "hl", "hh"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandHeader {
    width: usize,
    height: usize,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn raw_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".bands")
}

/// `<prefix>_ll.ppm` and friends.
pub fn display_paths(prefix: &Path) -> [PathBuf; 4] {
    BAND_NAMES.map(|b| with_suffix(prefix, &format!("_{b}.ppm")))
}

/// Raw-byte subbands of a P6 file.
pub fn analyze(ppm_bytes: &[u8]) -> Result<SubbandSet<Tensor<f32>>> {
    let (w, h, raster) = ppm::decode_bytes(ppm_bytes)?;
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Usage(format!("dwt needs even image extents, got {w}×{h}")));
    }
    let n = w * h;
    let x = Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        raster[3 * p + c] as f32
    });
    Ok(dwt2_haar(&x)?)
}

/// P6 bytes rebuilt from raw subbands.
pub fn synthesize(bands: &SubbandSet<Tensor<f32>>) -> Result<Vec<u8>> {
    let x = idwt2_haar(bands)?;
    let [_, c, h, w] = x.dims4("idwt")?;
    if c != 3 {
        return Err(Error::Format(format!("bands carry {c} channels, expected 3")));
    }
    let n = w * h;
    let mut raster = vec![0u8; 3 * n];
    for (i, v) in x.data().iter().enumerate() {
        raster[3 * (i % n) + i / n] = v.round().clamp(0.0, 255.0) as u8;
    }
    ppm::encode_bytes(w, h, &raster)
}

/// Display rendering: `ll / 4` for the approximation, `v / 8 + 0.5` (in `[0, 1]`
/// units) for details so that zero maps to mid-gray.
pub fn display_images(bands: &SubbandSet<Tensor<f32>>) -> Result<[ImageBuffer; 4]> {
    let render = |t: &Tensor<f32>, f: &dyn Fn(f32) -> f32, name: &str| -> Result<ImageBuffer> {
        let [_, _, h, w] = t.dims4("display")?;
        Ok(ImageBuffer::new(w, h, t.data().iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(), name)?)
    };
    let ll = |v: f32| v / 4.0 / 255.0;
    let detail = |v: f32| v / 255.0 / 8.0 + 0.5;
    Ok([
        render(&bands.ll, &ll, "ll")?,
        render(&bands.lh, &detail, "lh")?,
        render(&bands.hl, &detail, "hl")?,
        render(&bands.hh, &detail, "hh")?,
    ])
}

pub fn encode_raw(bands: &SubbandSet<Tensor<f32>>) -> Vec<u8> {
    let (height, width) = bands.source_shape;
    let header = serde_json::to_string(&BandHeader { width, height }).expect("header serializes");
    let entries = BAND_NAMES.iter().zip(bands.bands()).map(|(n, t)| (n.to_string(), t.clone())).collect();
    Checkpoint { config: header, entries }.encode()
}

pub fn decode_raw(bytes: &[u8]) -> Result<SubbandSet<Tensor<f32>>> {
    let ck = Checkpoint::decode(bytes)?;
    let header: BandHeader = serde_json::from_str(&ck.config)
        .map_err(|e| Error::Format(format!("band header: {e}")))?;
    let take = |name: &str| -> Result<Tensor<f32>> {
        let i = ck
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing band `{name}`")))?;
        let t = ck.entries[i].1.clone();
        match t.shape() {
            &[1, 3, h, w] if 2 * h == header.height && 2 * w == header.width => Ok(t),
            s => Err(Error::Format(format!(
                "band `{name}` has shape {s:?}, expected [1, 3, {}, {}]",
                header.height / 2,
                header.width / 2
            ))),
        }
    };
    Ok(SubbandSet {
        ll: take("ll")?,
        lh: take("lh")?,
        hl: take("hl")?,
        hh: take("hh")?,
        source_shape: (header.height, header.width),
    })
}

pub fn cmd_dwt(input: &Path, prefix: &Path) -> Result<()> {
    let bytes = std::fs::read(input).map_err(Error::io(input))?;
    let bands = analyze(&bytes).map_err(|e| match e {
        Error::Format(m) | Error::Usage(m) => Error::Usage(format!("{}: {m}", input.display())),
        other => other,
    })?;
    for (img, path) in display_images(&bands)?.iter().zip(display_paths(prefix)) {
        ppm::write(img, path)?;
    }
    let raw = raw_path(prefix);
    std::fs::write(&raw, encode_raw(&bands)).map_err(Error::io(raw))
}

pub fn cmd_idwt(prefix: &Path, output: &Path) -> Result<()> {
    let raw = raw_path(prefix);
    let bytes = std::fs::read(&raw).map_err(Error::io(&raw))?;
    let bands = decode_raw(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", raw.display())),
        other => other,
    })?;
    std::fs::write(output, synthesize(&bands)?).map_err(Error::io(output))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm_of(w: usize, h: usize, f: impl Fn(usize) -> u8) -> Vec<u8> {
        ppm::encode_bytes(w, h, &(0..3 * w * h).map(f).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_example_per_channel() {
        // every channel holds [[1, 2], [3, 4]]
        let bytes = ppm_of(2, 2, |i| (i / 3 + 1) as u8);
        let b = analyze(&bytes).unwrap();
        for c in 0..3 {
            assert_eq!([b.ll.data()[c], b.lh.data()[c], b.hl.data()[c], b.hh.data()[c]], [10.0, -4.0, -2.0, 0.0]);
        }
        assert_eq!(synthesize(&b).unwrap(), bytes);
    }

    #[test]
    fn constant_gray_display() {
        let b = analyze(&ppm_of(4, 4, |_| 128)).unwrap();
        let shown = display_images(&b).unwrap();
        for (k, img) in shown.iter().enumerate() {
            let bytes = ppm::encode(img);
            let raster = &bytes[bytes.len() - 12..];
            assert!(raster.iter().all(|&v| v == 128), "band {k}: {raster:?}");
        }
    }

    #[test]
    fn odd_extent_and_missing_band() {
        assert!(analyze(&ppm_of(3, 2, |_| 0)).unwrap_err().to_string().contains("even"));
        let b = analyze(&ppm_of(2, 2, |i| i as u8)).unwrap();
        let mut ck = Checkpoint::decode(&encode_raw(&b)).unwrap();
        ck.entries.retain(|(n, _)| n != "hl");
        assert!(decode_raw(&ck.encode()).unwrap_err().to_string().contains("missing band `hl`"));
    }
}
