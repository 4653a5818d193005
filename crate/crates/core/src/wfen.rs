//! Wavelet feature downsample/upgrade modules and the assembled
//! encoder–decoder network.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdt::{effective_window, FdtBlock, FdtSpec};
use crate::nn::{expect_channels, BoundParams, Conv2d, ParamBuilder, ParameterStore, ResidualBlock};
use crate::tensor::{Graph, Real, Var};
use crate::wavelet::SubbandSet;

/// Number of downsampling levels; inputs must be divisible by `2^LEVELS`.
pub const LEVELS: usize = 3;

/// Encoder downsampling operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleKind {
    /// Haar subbands: low band through a transformer block, high bands through a residual block, fused by 1×1.
    #[default]
    Wfd,
    /// 3×3 convolution with stride 2.
    Stride,
    /// 2×2 average pool then 1×1 channel expansion.
    Avgpool,
    /// Bicubic half-scale then 1×1 channel expansion.
    Bicubic,
}

impl DownsampleKind {
    pub const ALL: [DownsampleKind; 4] =
        [DownsampleKind::Stride, DownsampleKind::Avgpool, DownsampleKind::Bicubic, DownsampleKind::Wfd];

    pub fn name(self) -> &'static str {
        match self {
            DownsampleKind::Wfd => "wfd",
            DownsampleKind::Stride => "stride",
            DownsampleKind::Avgpool => "avgpool",
            DownsampleKind::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for DownsampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DownsampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DownsampleKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::arg("downsample", format!("unknown variant `{s}`; valid: stride, avgpool, bicubic, wfd"))
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WfenConfig {
    pub base_channels: usize,
    /// Channel multipliers of the full-resolution stage and the three downsampled levels.
    pub channel_mult: Vec<usize>,
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_blocks: usize,
    /// Transformer blocks after each upgrade, listed from the deepest level up.
    pub decoder_blocks: Vec<usize>,
    /// Largest attention window edge; capped per stage by the feature size.
    pub window: usize,
    /// Global-attention heads per level.
    pub heads: Vec<usize>,
    pub ffn_expansion: usize,
    pub shift_window: bool,
    pub shuffle_heads: bool,
    pub downsample: DownsampleKind,
}

impl Default for WfenConfig {
    fn default() -> Self {
        WfenConfig {
            base_channels: 40,
            channel_mult: alloc::vec![1, 2, 4, 4],
            encoder_blocks: alloc::vec![2, 1, 1],
            bottleneck_blocks: 6,
            decoder_blocks: alloc::vec![1, 1, 1],
            window: 8,
            heads: alloc::vec![2, 4, 8, 8],
            ffn_expansion: 2,
            shift_window: true,
            shuffle_heads: true,
            downsample: DownsampleKind::Wfd,
        }
    }
}

impl WfenConfig {
    /// Desk-scale preset: 16 base channels, one block per stage, two in the bottleneck.
    pub fn tiny() -> Self {
        WfenConfig {
            base_channels: 16,
            encoder_blocks: alloc::vec![1, 1, 1],
            bottleneck_blocks: 2,
            decoder_blocks: alloc::vec![1, 1, 1],
            ..Self::default()
        }
    }

    /// Channel count at level 0..=3.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult.get(level).copied().unwrap_or(0)
    }

    fn structural_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.base_channels == 0 {
            v.push("base_channels must be positive".to_string());
        }
        if self.channel_mult.len() != LEVELS + 1 {
            v.push(format!("channel_mult needs {} entries, got {}", LEVELS + 1, self.channel_mult.len()));
        } else if self.channel_mult.contains(&0) {
            v.push("channel_mult entries must be positive".to_string());
        }
        if self.encoder_blocks.len() != LEVELS {
            v.push(format!("encoder_blocks needs {LEVELS} entries, got {}", self.encoder_blocks.len()));
        }
        if self.decoder_blocks.len() != LEVELS {
            v.push(format!("decoder_blocks needs {LEVELS} entries, got {}", self.decoder_blocks.len()));
        }
        if self.window == 0 {
            v.push("window must be positive".to_string());
        }
        if self.ffn_expansion == 0 {
            v.push("ffn_expansion must be positive".to_string());
        }
        if self.heads.len() != LEVELS + 1 {
            v.push(format!("heads needs {} entries, got {}", LEVELS + 1, self.heads.len()));
        } else if self.channel_mult.len() == LEVELS + 1 {
            for (level, &h) in self.heads.iter().enumerate() {
                let c = self.channels(level);
                if h == 0 || !c.is_multiple_of(h) {
                    v.push(format!("level {level}: {h} heads do not divide {c} channels"));
                }
            }
        }
        v
    }

    /// Checks the architecture on its own; lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let v = self.structural_violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Checks the architecture against an input of `height`×`width` pixels.
    pub fn validate_input(&self, height: usize, width: usize) -> Result<()> {
        let mut v = self.structural_violations();
        let f = 1 << LEVELS;
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            v.push(format!("input {height}×{width} is not divisible by {f}"));
        } else if self.window > 0 {
            for level in 0..=LEVELS {
                let (h, w) = (height >> level, width >> level);
                let n = effective_window(self.window, h, w);
                if h % n != 0 || w % n != 0 {
                    v.push(format!("level {level}: window {n} does not divide {h}×{w}"));
                }
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn fdt_spec(&self, level: usize, shifted: bool) -> FdtSpec {
        FdtSpec {
            channels: self.channels(level),
            window: self.window,
            shifted: shifted && self.shift_window,
            heads: self.heads[level],
            shuffle: self.shuffle_heads,
            ffn_expansion: self.ffn_expansion,
        }
    }
}

fn fdt_stack(b: &mut ParamBuilder, cfg: &WfenConfig, name: &str, level: usize, count: usize) -> Result<Vec<FdtBlock>> {
    // consecutive blocks alternate unshifted / half-window shifted
    (0..count).map(|j| FdtBlock::new(b, &format!("{name}.fdt{j}"), cfg.fdt_spec(level, j % 2 == 1))).collect()
}

fn run_stack<T: Real>(blocks: &[FdtBlock], g: &mut Graph<T>, p: &BoundParams, mut x: Var) -> Result<Var> {
    for block in blocks {
        x = block.forward(g, p, x)?;
    }
    Ok(x)
}

/// Intermediate features of a [`Wfd`] pass.
#[derive(Clone, Debug)]
pub struct WfdParts {
    pub bands: SubbandSet<Var>,
    pub low: Var,
    pub high: Var,
    /// `concat(low, high)` before the 1×1 fusion.
    pub fused_input: Var,
    pub output: Var,
}

/// Wavelet feature downsample.
#[derive(Clone, Debug, PartialEq)]
pub struct Wfd {
    pub low: FdtBlock,
    pub high: ResidualBlock,
    pub fuse: Conv2d,
    pub in_channels: usize,
}

impl Wfd {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: FdtSpec, out_channels: usize) -> Result<Self> {
        let c = spec.channels;
        Ok(Wfd {
            low: FdtBlock::new(b, &format!("{name}.low"), FdtSpec { shifted: false, ..spec })?,
            high: ResidualBlock::new(b, &format!("{name}.high"), 3 * c, c)?,
            fuse: Conv2d::pointwise(b, &format!("{name}.fuse"), 2 * c, out_channels)?,
            in_channels: c,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, p, x)?.output)
    }

    pub fn forward_parts<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<WfdParts> {
        expect_channels(g, x, "wfd", self.in_channels)?;
        let bands = g.dwt2(x)?;
        let low = self.low.forward(g, p, bands.ll)?;
        let highs = g.concat(&[bands.lh, bands.hl, bands.hh], 1)?;
        let high = self.high.forward(g, p, highs)?;
        let fused_input = g.concat(&[low, high], 1)?;
        let output = self.fuse.forward(g, p, fused_input)?;
        Ok(WfdParts { bands, low, high, fused_input, output })
    }
}

/// Wavelet feature upgrade: merges a decoder feature into the low band of the
/// matching encoder feature and restores resolution with the inverse transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Wfu {
    pub low: Conv2d,
    pub high: ResidualBlock,
    pub channels: usize,
}

impl Wfu {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Wfu {
            low: Conv2d::pointwise(b, &format!("{name}.low"), 2 * channels, channels)?,
            high: ResidualBlock::new(b, &format!("{name}.high"), 3 * channels, 3 * channels)?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, f_enc: Var, f_dec: Var) -> Result<Var> {
        let c = self.channels;
        let [be, _, he, we] = expect_channels(g, f_enc, "wfu", c)?;
        let [bd, _, hd, wd] = expect_channels(g, f_dec, "wfu", c)?;
        if be != bd || he != 2 * hd || we != 2 * wd {
            return Err(Error::shape(
                "wfu",
                format!("encoder feature {he}×{we} is not twice the decoder feature {hd}×{wd}"),
            ));
        }
        let bands = g.dwt2(f_enc)?;
        let low_in = g.concat(&[bands.ll, f_dec], 1)?;
        let low = self.low.forward(g, p, low_in)?;
        let highs = g.concat(&[bands.lh, bands.hl, bands.hh], 1)?;
        let highs = self.high.forward(g, p, highs)?;
        let h = g.split(highs, 1, &[c, c, c])?;
        g.idwt2(&SubbandSet { ll: low, lh: h[0], hl: h[1], hh: h[2], source_shape: bands.source_shape })
    }
}

/// Encoder downsampling operator with its weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Downsample {
    Wfd(Wfd),
    Stride(Conv2d),
    Avgpool(Conv2d),
    Bicubic(Conv2d),
}

impl Downsample {
    pub fn new(b: &mut ParamBuilder, name: &str, kind: DownsampleKind, spec: FdtSpec, out: usize) -> Result<Self> {
        let c = spec.channels;
        Ok(match kind {
            DownsampleKind::Wfd => Downsample::Wfd(Wfd::new(b, name, spec, out)?),
            DownsampleKind::Stride => Downsample::Stride(Conv2d::new(b, &format!("{name}.conv"), c, out, 3, 2, 1, 1)?),
            DownsampleKind::Avgpool => Downsample::Avgpool(Conv2d::pointwise(b, &format!("{name}.expand"), c, out)?),
            DownsampleKind::Bicubic => Downsample::Bicubic(Conv2d::pointwise(b, &format!("{name}.expand"), c, out)?),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        match self {
            Downsample::Wfd(m) => m.forward(g, p, x),
            Downsample::Stride(conv) => conv.forward(g, p, x),
            Downsample::Avgpool(conv) => {
                let y = g.avg_pool2(x)?;
                conv.forward(g, p, y)
            }
            Downsample::Bicubic(conv) => {
                let [_, _, h, w] = g.value(x)?.dims4("bicubic_downsample")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("bicubic_downsample", format!("odd extent {h}×{w}")));
                }
                let y = g.resize_bicubic(x, h / 2, w / 2)?;
                conv.forward(g, p, y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub blocks: Vec<FdtBlock>,
    pub down: Downsample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub reduce: Conv2d,
    pub wfu: Wfu,
    pub blocks: Vec<FdtBlock>,
}

/// Features recorded by [`WfenModel::forward_traced`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub shallow: Var,
    /// Encoder output of each level just before downsampling.
    pub skips: Vec<Var>,
    pub latent: Var,
    pub decoded: Var,
    pub output: Var,
}

/// The assembled network. Weights live in a separate [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct WfenModel {
    pub config: WfenConfig,
    pub shallow: Conv2d,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: Vec<FdtBlock>,
    /// Ordered from the deepest level up.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl WfenModel {
    /// Builds the layer graph and its initial weights from `seed`.
    pub fn new(config: &WfenConfig, seed: u64) -> Result<(Self, ParameterStore<f32>)> {
        config.validate()?;
        let cfg = config;
        let mut b = ParamBuilder::new(seed);
        let c0 = cfg.channels(0);
        let shallow = Conv2d::same3(&mut b, "shallow", 3, c0)?;
        let mut encoder = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let name = format!("enc{level}");
            let blocks = fdt_stack(&mut b, cfg, &name, level, cfg.encoder_blocks[level])?;
            let down = Downsample::new(
                &mut b,
                &format!("{name}.down"),
                cfg.downsample,
                cfg.fdt_spec(level, false),
                cfg.channels(level + 1),
            )?;
            encoder.push(EncoderStage { blocks, down });
        }
        let bottleneck = fdt_stack(&mut b, cfg, "bottleneck", LEVELS, cfg.bottleneck_blocks)?;
        let mut decoder = Vec::with_capacity(LEVELS);
        for (i, level) in (0..LEVELS).rev().enumerate() {
            let name = format!("dec{level}");
            let c = cfg.channels(level);
            decoder.push(DecoderStage {
                reduce: Conv2d::pointwise(&mut b, &format!("{name}.reduce"), cfg.channels(level + 1), c)?,
                wfu: Wfu::new(&mut b, &format!("{name}.wfu"), c)?,
                blocks: fdt_stack(&mut b, cfg, &name, level, cfg.decoder_blocks[i])?,
            });
        }
        let head = Conv2d::same3(&mut b, "head", 2 * c0, 3)?;
        let model = WfenModel { config: cfg.clone(), shallow, encoder, bottleneck, decoder, head };
        Ok((model, b.finish()))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.output)
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<ForwardTrace> {
        let [_, c, h, w] = g.value(x)?.dims4("wfen")?;
        if c != 3 {
            return Err(Error::Config(alloc::vec![format!("input has {c} channels, expected 3")]));
        }
        self.config.validate_input(h, w)?;

        let shallow = self.shallow.forward(g, p, x)?;
        let mut f = shallow;
        let mut skips = Vec::with_capacity(LEVELS);
        for stage in &self.encoder {
            f = run_stack(&stage.blocks, g, p, f)?;
            skips.push(f);
            f = stage.down.forward(g, p, f)?;
        }
        let latent = run_stack(&self.bottleneck, g, p, f)?;
        f = latent;
        for (stage, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let reduced = stage.reduce.forward(g, p, f)?;
            f = stage.wfu.forward(g, p, skip, reduced)?;
            f = run_stack(&stage.blocks, g, p, f)?;
        }
        let decoded = f;
        let cat = g.concat(&[decoded, shallow], 1)?;
        let head = self.head.forward(g, p, cat)?;
        let output = g.add(head, x)?;
        Ok(ForwardTrace { shallow, skips, latent, decoded, output })
    }
}
