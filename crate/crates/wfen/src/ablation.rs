//! Downsampling ablation: identical training runs that differ only in the
//! encoder's downsampling operator.

use std::fmt::Write as _;
use std::io::Write;

use wfen_core::metrics::MetricReport;
use wfen_core::train::TrainReport;
use wfen_core::wfen::DownsampleKind;
use wfen_core::{Graph, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::session::{self, LoadedModel, Precision};

/// Published Helen ×8 results for each operator (PSNR dB, SSIM).
pub const REFERENCE: [(DownsampleKind, f64, f64); 4] = [
    (DownsampleKind::Stride, 26.22, 0.7743),
    (DownsampleKind::Avgpool, 26.26, 0.7747),
    (DownsampleKind::Bicubic, 26.21, 0.7731),
    (DownsampleKind::Wfd, 26.36, 0.7795),
];

/// What each fixed downsampling path keeps of a ±1 checkerboard.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckerboardBench {
    pub size: usize,
    /// Largest |value| after 2×2 average pooling.
    pub avgpool_max_abs: f64,
    /// Largest |value| after bicubic half-scale resampling.
    pub bicubic_max_abs: f64,
    /// Share of the subband energy in the diagonal band.
    pub wfd_hh_energy_share: f64,
    /// Largest |x - idwt(dwt(x))|.
    pub wfd_reconstruction_error: f64,
}

impl CheckerboardBench {
    pub fn avgpool_destroys(&self) -> bool {
        self.avgpool_max_abs == 0.0
    }

    pub fn wfd_preserves(&self) -> bool {
        self.wfd_reconstruction_error == 0.0
    }
}

pub fn checkerboard(size: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, 1, size, size], |i| if (i / size + i % size).is_multiple_of(2) { 1.0 } else { -1.0 })
}

/// Runs the checkerboard through the same graph ops the model uses.
pub fn checkerboard_bench(size: usize) -> Result<CheckerboardBench> {
    let x = checkerboard(size);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone())?;
    let pooled = g.avg_pool2(xv)?;
    let resized = g.resize_bicubic(xv, size / 2, size / 2)?;
    let bands = g.dwt2(xv)?;
    let back = g.idwt2(&bands)?;
    let energy = |v| -> Result<f64> { Ok(g.value(v)?.data().iter().map(|a| a * a).sum()) };
    let total: f64 = [bands.ll, bands.lh, bands.hl, bands.hh].iter().map(|&b| energy(b)).sum::<Result<f64>>()?;
    Ok(CheckerboardBench {
        size,
        avgpool_max_abs: g.value(pooled)?.max_abs(),
        bicubic_max_abs: g.value(resized)?.max_abs(),
        wfd_hh_energy_share: energy(bands.hh)? / total,
        wfd_reconstruction_error: g.value(back)?.max_abs_diff(&x).expect("same shape"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub kind: DownsampleKind,
    pub params: usize,
    pub report: TrainReport,
    pub metrics: MetricReport,
    pub seconds: f64,
}

impl VariantResult {
    /// Digest of every batch seen in training, in order.
    pub fn data_digest(&self) -> u64 {
        self.report.batch_hashes().iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub config: RunConfig,
    pub variants: Vec<VariantResult>,
    pub baseline: MetricReport,
    pub eval_images: usize,
    pub bench: CheckerboardBench,
}

/// Trains every variant in `kinds` from the same seed and data, then scores
/// each on the evaluation set. Progress lines go to `log`.
pub fn run(cfg: &RunConfig, kinds: &[DownsampleKind], log: &mut dyn Write) -> Result<AblationReport> {
    if kinds.is_empty() {
        return Err(Error::Usage("no variants selected".into()));
    }
    let references = session::eval_references(cfg, None)?;
    let mut variants: Vec<VariantResult> = Vec::new();
    for &kind in kinds {
        let mut vcfg = cfg.clone();
        vcfg.model.downsample = kind;
        writeln!(log, "variant {kind}").map_err(Error::io("<log>"))?;
        let out = session::train(&vcfg, &mut std::io::sink())?;
        let loaded = LoadedModel::from_checkpoint(&out.checkpoint)?;
        let metrics = session::evaluate(&loaded, &references, Precision::F32)?;
        writeln!(
            log,
            "variant {kind} loss {} -> {} psnr {:.4} ssim {:.4} ({:.1} s)",
            out.report.records.first().map_or(f32::NAN, |r| r.loss),
            out.report.records.last().map_or(f32::NAN, |r| r.loss),
            metrics.psnr_db,
            metrics.ssim,
            out.seconds
        )
        .map_err(Error::io("<log>"))?;
        let result = VariantResult {
            kind,
            params: loaded.store.param_count(),
            report: out.report,
            metrics,
            seconds: out.seconds,
        };
        if let Some(first) = variants.first() {
            if first.data_digest() != result.data_digest() {
                return Err(Error::Usage(format!(
                    "variant {kind} saw different training batches than {}",
                    first.kind
                )));
            }
        }
        variants.push(result);
    }
    Ok(AblationReport {
        config: cfg.clone(),
        variants,
        baseline: session::bicubic_baseline(cfg, &references)?,
        eval_images: references.len(),
        bench: checkerboard_bench(8)?,
    })
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let t = &self.config.train;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "downsampling ablation: base_channels {} steps {} batch {} lr {} seed {} x{} on {} images of {}px, {} eval images",
            self.config.model.base_channels,
            t.steps,
            t.batch_size,
            t.lr,
            t.seed,
            t.sr_factor,
            t.dataset.count,
            t.dataset.size,
            self.eval_images
        );
        let _ = writeln!(s, "{:<8} {:>9} {:>12} {:>12} {:>9} {:>8}", "variant", "params", "first_loss", "final_loss", "psnr", "ssim");
        for v in &self.variants {
            let losses = v.report.losses();
            let _ = writeln!(
                s,
                "{:<8} {:>9} {:>12.5} {:>12.5} {:>9.4} {:>8.4}",
                v.kind.name(),
                v.params,
                losses.first().copied().unwrap_or(f32::NAN),
                losses.last().copied().unwrap_or(f32::NAN),
                v.metrics.psnr_db,
                v.metrics.ssim
            );
        }
        let _ = writeln!(s, "{:<8} {:>9} {:>12} {:>12} {:>9.4} {:>8.4}", "bicubic-input", "-", "-", "-", self.baseline.psnr_db, self.baseline.ssim);
        let mut ranked: Vec<&VariantResult> = self.variants.iter().collect();
        ranked.sort_by(|a, b| b.metrics.psnr_db.total_cmp(&a.metrics.psnr_db));
        let order: Vec<&str> = ranked.iter().map(|v| v.kind.name()).collect();
        let _ = writeln!(s, "psnr order: {} (reported, not asserted)", order.join(" > "));
        if let Some(v) = self.variants.first() {
            let _ = writeln!(s, "training data digest {:016x} (identical across variants)", v.data_digest());
        }
        let b = &self.bench;
        let _ = writeln!(
            s,
            "checkerboard {n}x{n} (±1): avgpool max|y| {:e}, bicubic half-scale max|y| {:e}, wfd hh energy share {:.3}, wfd reconstruction error {:e}",
            b.avgpool_max_abs,
            b.bicubic_max_abs,
            b.wfd_hh_energy_share,
            b.wfd_reconstruction_error,
            n = b.size
        );
        let _ = writeln!(s, "reference (Helen x8, full-scale training):");
        for (kind, psnr, ssim) in REFERENCE {
            let _ = writeln!(s, "  {:<8} {psnr:.2} dB / {ssim:.4}", kind.name());
        }
        s
    }
}

/// `all` or a single variant name.
pub fn parse_variants(spec: &str) -> Result<Vec<DownsampleKind>> {
    if spec == "all" {
        return Ok(DownsampleKind::ALL.to_vec());
    }
    spec.parse::<DownsampleKind>().map(|k| vec![k]).map_err(|e| Error::Usage(format!("{e} (or `all`)")))
}
