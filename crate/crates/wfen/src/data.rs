//! Dataset sources backed by the file system.

use std::path::{Path, PathBuf};

use wfen_core::train::{DataSourceKind, SampleSource, SyntheticFaces, TrainConfig};
use wfen_core::ImageBuffer;

use crate::error::{Error, Result};
use crate::ppm;

/// The `.ppm` files of a directory in sorted path order.
#[derive(Clone, Debug)]
pub struct PpmDirectory {
    pub paths: Vec<PathBuf>,
}

impl PpmDirectory {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
            let path = entry.map_err(Error::io(dir))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
                paths.push(path);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Usage(format!("{}: no .ppm files", dir.display())));
        }
        Ok(PpmDirectory { paths })
    }

    /// Decodes every image up front so that read errors surface before training.
    pub fn load_all(&self) -> Result<Vec<ImageBuffer>> {
        self.paths.iter().map(ppm::read).collect()
    }
}

/// The training images selected by `cfg.dataset`.
pub fn training_source(cfg: &TrainConfig) -> Result<Box<dyn SampleSource>> {
    let d = &cfg.dataset;
    match d.source {
        DataSourceKind::Synthetic => {
            Ok(Box::new(SyntheticFaces { seed: cfg.seed, count: d.count, size: d.size }))
        }
        DataSourceKind::Directory => {
            let dir = d.dir.as_deref().ok_or_else(|| {
                Error::Usage("train.dataset.dir is required for the directory source".into())
            })?;
            let images = PpmDirectory::open(dir)?.load_all()?;
            if let Some(bad) = images.iter().find(|i| i.width != d.size || i.height != d.size) {
                return Err(Error::Usage(format!(
                    "{} is {}×{}, expected {}×{}",
                    bad.source, bad.width, bad.height, d.size, d.size
                )));
            }
            Ok(Box::new(ImageList(images)))
        }
    }
}

/// Owned list of images.
pub struct ImageList(pub Vec<ImageBuffer>);

impl SampleSource for ImageList {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, index: usize) -> wfen_core::Result<ImageBuffer> {
        self.0.as_slice().sample(index)
    }
}

/// Seed of the held-out synthetic evaluation set, disjoint from the training stream.
pub fn eval_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x9e37_79b9_7f4a_7c15
}
