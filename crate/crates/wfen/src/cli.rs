//! Command-line definition and dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use wfen_core::gradsuite;

use crate::ablation;
use crate::bands;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ppm;
use crate::session::{self, LoadedModel, Precision};

#[derive(Debug, Parser)]
#[command(name = "wfen", version, about = "Wavelet feature enhancement network for face super-resolution")]
pub struct Cli {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`, which also seeds initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (checkpoint, image, band prefix or report, per command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Downsampling operator: stride, avgpool, bicubic, wfd (ablation also takes `all`).
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Arithmetic for forward passes.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Precision>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Haar-decompose a PPM into four subband images plus a lossless `.bands` dump.
    Dwt { input: PathBuf, prefix: Option<PathBuf> },
    /// Rebuild a PPM from `<prefix>.bands`.
    Idwt { prefix: PathBuf, output: Option<PathBuf> },
    /// Train from scratch and save a checkpoint.
    Train {
        /// Use the small model preset.
        #[arg(long)]
        tiny: bool,
    },
    /// Super-resolve one image.
    Infer { checkpoint: PathBuf, input: PathBuf, output: Option<PathBuf> },
    /// Mean PSNR / SSIM on a directory of references or the held-out synthetic set.
    Eval { checkpoint: PathBuf, dir: Option<PathBuf> },
    /// Finite-difference gradient check in f64.
    Gradcheck {
        #[arg(default_value = "all")]
        scope: String,
    },
    /// Train and compare every downsampling operator under one seed.
    AblateDownsample {
        #[arg(long)]
        tiny: bool,
    },
    /// Print the effective configuration.
    Config {
        /// Print the built-in defaults instead.
        #[arg(long)]
        defaults: bool,
        #[arg(long)]
        tiny: bool,
    },
}

/// Reads `WFEN_THREADS`. The engine runs on one thread, so any positive cap is honoured.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("WFEN_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("WFEN_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

impl Cli {
    fn run_config(&self, tiny: bool) -> Result<RunConfig> {
        let mut cfg = match (&self.config, tiny) {
            (Some(_), true) => return Err(Error::Usage("--tiny cannot be combined with --config".into())),
            (Some(path), false) => RunConfig::load(path)?,
            (None, true) => RunConfig::tiny(),
            (None, false) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn out_or(&self, positional: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        match (positional, &self.out) {
            (Some(_), Some(_)) => Err(Error::Usage(format!("{what} given both positionally and with --out"))),
            (Some(p), None) | (None, Some(p)) => Ok(p.clone()),
            (None, None) => Err(Error::Usage(format!("missing {what}"))),
        }
    }

    fn reject_mode(&self, command: &str, allowed: Precision) -> Result<()> {
        match self.mode {
            Some(m) if m != allowed => Err(Error::Usage(format!("{command} supports only --mode {}", mode_name(allowed)))),
            _ => Ok(()),
        }
    }

    /// Commands that read a checkpoint use the configuration stored in it.
    fn reject_config(&self, command: &str) -> Result<()> {
        if self.config.is_some() || self.seed.is_some() {
            return Err(Error::Usage(format!("{command} uses the configuration stored in the checkpoint")));
        }
        self.reject_variant(command)
    }

    fn reject_variant(&self, command: &str) -> Result<()> {
        if self.variant.is_some() {
            return Err(Error::Usage(format!("--variant does not apply to {command}")));
        }
        Ok(())
    }
}

fn mode_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Executes a parsed command line; regular output goes to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    thread_cap()?;
    let print = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(Error::io("<stdout>"));
    match &cli.command {
        Command::Dwt { input, prefix } => {
            cli.reject_variant("dwt")?;
            let prefix = cli.out_or(prefix, "output prefix")?;
            bands::cmd_dwt(input, &prefix)?;
            let [ll, lh, hl, hh] = bands::display_paths(&prefix);
            print(
                out,
                &format!(
                    "wrote {} {} {} {} {}\n",
                    ll.display(),
                    lh.display(),
                    hl.display(),
                    hh.display(),
                    bands::raw_path(&prefix).display()
                ),
            )
        }
        Command::Idwt { prefix, output } => {
            cli.reject_variant("idwt")?;
            let output = cli.out_or(output, "output image")?;
            bands::cmd_idwt(prefix, &output)?;
            print(out, &format!("wrote {}\n", output.display()))
        }
        Command::Train { tiny } => {
            cli.reject_mode("train", Precision::F32)?;
            let mut cfg = cli.run_config(*tiny)?;
            if let Some(v) = &cli.variant {
                cfg.model.downsample = v.parse()?;
            }
            let ckpt_path = cli.out.clone().unwrap_or_else(|| cfg.io.checkpoint.clone().into());
            let report_path = cfg.io.report.clone().map(PathBuf::from).unwrap_or_else(|| with_suffix(&ckpt_path, ".report"));
            let outcome = session::train(&cfg, out)?;
            outcome.checkpoint.save(&ckpt_path)?;
            let text = outcome.report.to_text(cfg.train.log_every);
            std::fs::write(&report_path, text).map_err(Error::io(&report_path))?;
            print(
                out,
                &format!(
                    "wall time {:.2} s\ncheckpoint {}\nreport {}\n",
                    outcome.seconds,
                    ckpt_path.display(),
                    report_path.display()
                ),
            )
        }
        Command::Infer { checkpoint, input, output } => {
            cli.reject_config("infer")?;
            let output = cli.out_or(output, "output image")?;
            let loaded = LoadedModel::load(checkpoint)?;
            let img = loaded.prepare_input(&ppm::read(input)?)?;
            let pred = loaded.predict(&img, cli.mode.unwrap_or_default())?;
            ppm::write(&pred, &output)?;
            print(out, &format!("wrote {} ({}x{})\n", output.display(), pred.width, pred.height))
        }
        Command::Eval { checkpoint, dir } => {
            cli.reject_config("eval")?;
            let loaded = LoadedModel::load(checkpoint)?;
            let refs = session::eval_references(&loaded.config, dir.as_deref())?;
            let m = session::evaluate(&loaded, &refs, cli.mode.unwrap_or_default())?;
            print(out, &format!("psnr {} ssim {}\n", m.psnr_db, m.ssim))
        }
        Command::Gradcheck { scope } => {
            cli.reject_variant("gradcheck")?;
            cli.reject_mode("gradcheck", Precision::F64)?;
            let rows = gradsuite::run(scope, cli.seed.unwrap_or(0))?;
            print(out, &gradsuite::format_table(&rows))?;
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.scope.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Usage(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::AblateDownsample { tiny } => {
            cli.reject_mode("ablate-downsample", Precision::F32)?;
            let cfg = cli.run_config(*tiny)?;
            let kinds = ablation::parse_variants(cli.variant.as_deref().unwrap_or("all"))?;
            let report = ablation::run(&cfg, &kinds, out)?;
            let text = report.to_text();
            if let Some(path) = &cli.out {
                std::fs::write(path, &text).map_err(Error::io(path))?;
            }
            print(out, &text)
        }
        Command::Config { defaults, tiny } => {
            cli.reject_variant("config")?;
            let cfg = if *defaults {
                if cli.config.is_some() {
                    return Err(Error::Usage("--defaults cannot be combined with --config".into()));
                }
                let mut cfg = if *tiny { RunConfig::tiny() } else { RunConfig::default() };
                if let Some(seed) = cli.seed {
                    cfg.train.seed = seed;
                }
                cfg
            } else {
                let cfg = cli.run_config(*tiny)?;
                cfg.validate()?;
                cfg
            };
            let text = cfg.to_json();
            if let Some(path) = &cli.out {
                std::fs::write(path, &text).map_err(Error::io(path))?;
            }
            print(out, &text)
        }
    }
}
