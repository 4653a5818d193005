//! Training, inference and evaluation driven by a [`RunConfig`].

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use wfen_core::metrics::{self, MetricReport};
use wfen_core::nn::ParameterStore;
use wfen_core::train::{self, make_pair, SampleSource, SyntheticFaces, TrainReport};
use wfen_core::wfen::WfenModel;
use wfen_core::{Graph, ImageBuffer, Real, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{eval_seed, training_source, PpmDirectory};
use crate::error::{Error, Result};

/// Arithmetic used for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// A model rebuilt from a checkpoint.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: WfenModel,
    pub store: ParameterStore<f32>,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_json(&ck.config)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let (model, mut store) = WfenModel::new(&config.model, config.train.seed)?;
        ck.load_into(&mut store)?;
        Ok(LoadedModel { config, model, store })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Model output for a pre-upsampled `[1, 3, H, W]` input, clamped to `[0, 1]`.
    pub fn predict(&self, lr_up: &ImageBuffer, precision: Precision) -> Result<ImageBuffer> {
        self.config.model.validate_input(lr_up.height, lr_up.width)?;
        let y = match precision {
            Precision::F32 => forward(&self.model, &self.store, lr_up.to_tensor())?,
            Precision::F64 => forward(&self.model, &self.store.cast::<f64>(), lr_up.to_tensor())?.cast(),
        };
        Ok(ImageBuffer::from_tensor(&y, lr_up.source.clone())?.clamped())
    }

    /// Bicubically upsamples `input` when it is the configured training size
    /// divided by the SR factor; otherwise passes it through.
    pub fn prepare_input(&self, input: &ImageBuffer) -> Result<ImageBuffer> {
        let t = &self.config.train;
        let size = t.dataset.size;
        if input.width * t.sr_factor == size && input.height * t.sr_factor == size {
            let up = train::bicubic_resize(&input.to_tensor::<f32>(), size, size)?;
            Ok(ImageBuffer::from_tensor(&up, input.source.clone())?)
        } else {
            Ok(input.clone())
        }
    }
}

fn forward<T: Real>(model: &WfenModel, store: &ParameterStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g)?;
    let x = g.input(x)?;
    let y = model.forward(&mut g, &p, x)?;
    Ok(g.value(y)?.clone())
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub seconds: f64,
}

/// Trains from a fresh initialization, logging `step <n> loss <v>` lines to `log`.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source = training_source(&cfg.train)?;
    let (model, mut store) = WfenModel::new(&cfg.model, cfg.train.seed)?;
    let every = cfg.train.log_every.max(1);
    let last = cfg.train.steps;
    let start = Instant::now();
    let mut io_err = None;
    let report = train::train_loop(&model, &mut store, &cfg.train, &*source, |r| {
        if r.step == 1 || r.step % every == 0 || r.step == last {
            if let Err(e) = writeln!(log, "step {} loss {}", r.step, r.loss) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(e) = io_err {
        return Err(Error::Io { path: "<log>".into(), source: e });
    }
    let checkpoint = Checkpoint::from_store(cfg.to_json(), &store);
    Ok(TrainOutcome { report, checkpoint, seconds })
}

/// High-resolution references for evaluation: `dir` (or `eval.dir`) when set,
/// otherwise the held-out synthetic set.
pub fn eval_references(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<ImageBuffer>> {
    match dir.map(Path::to_path_buf).or_else(|| cfg.eval.dir.as_ref().map(Into::into)) {
        Some(d) => PpmDirectory::open(d)?.load_all(),
        None => {
            let set = SyntheticFaces {
                seed: eval_seed(cfg.train.seed),
                count: cfg.eval.count,
                size: cfg.train.dataset.size,
            };
            (0..set.len()).map(|i| set.sample(i)).collect::<wfen_core::Result<Vec<_>>>().map_err(Into::into)
        }
    }
}

/// Mean PSNR and SSIM of the model on degraded copies of `references`.
pub fn evaluate(loaded: &LoadedModel, references: &[ImageBuffer], precision: Precision) -> Result<MetricReport> {
    if references.is_empty() {
        return Err(Error::Usage("no evaluation images".into()));
    }
    let mode = loaded.config.eval.mode;
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for hr in references {
        let (lr_up, _) = make_pair(&hr.to_tensor::<f32>(), loaded.config.train.sr_factor)?;
        let pred = loaded.predict(&ImageBuffer::from_tensor(&lr_up, hr.source.clone())?, precision)?;
        let m = metrics::evaluate(&pred, hr, mode)?;
        psnr += m.psnr_db;
        ssim += m.ssim;
    }
    let n = references.len() as f64;
    Ok(MetricReport { psnr_db: psnr / n, ssim: ssim / n, channel_mode: mode })
}

/// Mean metrics of the bicubic pre-upsampled input itself.
pub fn bicubic_baseline(cfg: &RunConfig, references: &[ImageBuffer]) -> Result<MetricReport> {
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for hr in references {
        let (lr_up, _) = make_pair(&hr.to_tensor::<f32>(), cfg.train.sr_factor)?;
        let m = metrics::evaluate(&ImageBuffer::from_tensor(&lr_up, "")?.clamped(), hr, cfg.eval.mode)?;
        psnr += m.psnr_db;
        ssim += m.ssim;
    }
    let n = references.len().max(1) as f64;
    Ok(MetricReport { psnr_db: psnr / n, ssim: ssim / n, channel_mode: cfg.eval.mode })
}
