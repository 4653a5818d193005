//! JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wfen_core::metrics::ChannelMode;
use wfen_core::train::TrainConfig;
use wfen_core::wfen::WfenConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: ChannelMode,
    /// Held-out synthetic images scored when `dir` is unset.
    pub count: usize,
    /// Directory of high-resolution PPM references.
    pub dir: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mode: ChannelMode::RgbMean, count: 8, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Where `train` writes its checkpoint unless `--out` is given.
    pub checkpoint: String,
    /// Train report path; defaults to the checkpoint path with `.report` appended.
    pub report: Option<String>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { checkpoint: "wfen.ckpt".into(), report: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: WfenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Defaults with the small model used for quick experiments.
    pub fn tiny() -> Self {
        RunConfig { model: WfenConfig::tiny(), ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// Checks every section and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: wfen_core::Result<()>| match r {
            Ok(()) => Ok(()),
            Err(wfen_core::Error::Config(v)) => {
                problems.extend(v);
                Ok(())
            }
            Err(e) => Err(e),
        };
        collect(self.model.validate())?;
        collect(self.train.validate())?;
        let size = self.train.dataset.size;
        collect(self.model.validate_input(size, size))?;
        if self.eval.count == 0 && self.eval.dir.is_none() {
            problems.push("eval.count must be positive when eval.dir is unset".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(wfen_core::Error::Config(problems).into())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::tiny()] {
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"model": {"base_chanels": 8}}"#).unwrap_err();
        assert!(err.to_string().contains("base_chanels"), "{err}");
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"steps": 3}}"#).unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.model, WfenConfig::default());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = RunConfig::tiny();
        cfg.train.batch_size = 0;
        cfg.train.dataset.size = 36;
        cfg.eval.count = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");
        assert!(msg.contains("eval.count"), "{msg}");
        assert!(msg.matches(';').count() >= 2, "{msg}");
    }
}
