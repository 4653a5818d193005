use std::path::Path;

use clap::Parser;
use wfen::checkpoint::Checkpoint;
use wfen::cli::{execute, Cli};
use wfen::session::LoadedModel;
use wfen::{ppm, RunConfig};
use wfen_core::wfen::WfenModel;

fn run(args: &[&str]) -> wfen::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("wfen").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    execute(&cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> std::path::PathBuf {
    let mut cfg = RunConfig::tiny();
    cfg.train.steps = 2;
    cfg.train.dataset.count = 4;
    cfg.eval.count = 2;
    edit(&mut cfg);
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn defaults_reparse_identically() {
    let dir = tempfile::tempdir().unwrap();
    for tiny in [false, true] {
        let mut args = vec!["config", "--defaults"];
        if tiny {
            args.push("--tiny");
        }
        let text = run(&args).unwrap();
        let parsed = RunConfig::from_json(&text).unwrap();
        assert_eq!(parsed, if tiny { RunConfig::tiny() } else { RunConfig::default() });
        let path = dir.path().join("d.json");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(run(&["config", "--config", p(&path)]).unwrap(), text);
    }
}

#[test]
fn config_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), |c| {
        c.train.batch_size = 0;
        c.model.heads = vec![3, 4, 8, 8];
    });
    let msg = run(&["config", "--config", p(&path)]).unwrap_err().to_string();
    assert!(msg.contains("batch_size") && msg.contains("heads"), "{msg}");

    std::fs::write(&path, r#"{"train": {"stesp": 3}}"#).unwrap();
    assert!(run(&["config", "--config", p(&path)]).unwrap_err().to_string().contains("stesp"));
}

#[test]
fn zero_learning_rate_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), |c| {
        c.train.lr = 0.0;
        c.train.seed = 11;
    });
    let ckpt = dir.path().join("m.ckpt");
    let log = run(&["train", "--config", p(&cfg_path), "--out", p(&ckpt)]).unwrap();
    assert!(log.starts_with("step 1 loss "), "{log}");
    assert!(log.contains("wall time"));
    let report = std::fs::read_to_string(dir.path().join("m.ckpt.report")).unwrap();
    assert_eq!(report.lines().count(), 2);

    let saved = Checkpoint::load(&ckpt).unwrap();
    let cfg = RunConfig::from_json(&saved.config).unwrap();
    let (_, init) = WfenModel::new(&cfg.model, 11).unwrap();
    assert_eq!(saved, Checkpoint::from_store(saved.config.clone(), &init));
}

#[test]
fn zero_head_inference_returns_the_upsampled_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = {
        let mut c = RunConfig::tiny();
        c.train.steps = 0;
        c
    };
    let (_, mut store) = WfenModel::new(&cfg.model, cfg.train.seed).unwrap();
    assert_eq!(store.zero_where(|n| n.starts_with("head.")), 2);
    let ckpt = dir.path().join("zero.ckpt");
    Checkpoint::from_store(cfg.to_json(), &store).save(&ckpt).unwrap();

    // 4×4 is the configured 32×32 divided by the ×8 factor, so it is pre-upsampled
    let small = dir.path().join("small.ppm");
    let raster: Vec<u8> = (0..48).map(|i| (i * 53 % 256) as u8).collect();
    std::fs::write(&small, ppm::encode_bytes(4, 4, &raster).unwrap()).unwrap();
    let out = dir.path().join("out.ppm");
    for mode in ["f32", "f64"] {
        run(&["infer", p(&ckpt), p(&small), "--out", p(&out), "--mode", mode]).unwrap();
        let loaded = LoadedModel::load(&ckpt).unwrap();
        let expected = loaded.prepare_input(&ppm::read(&small).unwrap()).unwrap();
        assert_eq!((expected.width, expected.height), (32, 32));
        assert_eq!(std::fs::read(&out).unwrap(), ppm::encode(&expected), "{mode}");
    }

    // full-size input goes through unchanged
    let big = dir.path().join("big.ppm");
    let raster: Vec<u8> = (0..3 * 32 * 32).map(|i| (i * 31 % 256) as u8).collect();
    std::fs::write(&big, ppm::encode_bytes(32, 32, &raster).unwrap()).unwrap();
    run(&["infer", p(&ckpt), p(&big), p(&out)]).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&big).unwrap());
}

#[test]
fn eval_prints_metrics_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), |_| {});
    let ckpt = dir.path().join("m.ckpt");
    run(&["train", "--config", p(&cfg_path), "--out", p(&ckpt)]).unwrap();
    let a = run(&["eval", p(&ckpt)]).unwrap();
    let b = run(&["eval", p(&ckpt)]).unwrap();
    assert_eq!(a, b);
    let fields: Vec<&str> = a.split_whitespace().collect();
    assert_eq!((fields[0], fields[2]), ("psnr", "ssim"), "{a}");
    assert!(fields[1].parse::<f64>().unwrap().is_finite());

    // a directory of references
    let refs = dir.path().join("refs");
    std::fs::create_dir(&refs).unwrap();
    for i in 0..2u8 {
        let raster: Vec<u8> = (0..3 * 32 * 32).map(|j| ((j as u32 * (i as u32 + 3)) % 256) as u8).collect();
        std::fs::write(refs.join(format!("{i}.ppm")), ppm::encode_bytes(32, 32, &raster).unwrap()).unwrap();
    }
    assert!(run(&["eval", p(&ckpt), p(&refs)]).unwrap().starts_with("psnr "));
    assert!(run(&["eval", p(&ckpt), "--config", p(&cfg_path)]).is_err());
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), |c| c.train.steps = 3);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let path = dir.path().join(n);
            run(&["train", "--config", p(&cfg_path), "--out", p(&path)]).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let other = dir.path().join("c");
    run(&["train", "--config", p(&cfg_path), "--seed", "5", "--out", p(&other)]).unwrap();
    assert_ne!(std::fs::read(&other).unwrap(), outs[0]);
}

#[test]
fn dwt_command_writes_bands_and_inverts() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.ppm");
    let raster: Vec<u8> = (0..3 * 8 * 6).map(|i| (i * 97 % 256) as u8).collect();
    std::fs::write(&src, ppm::encode_bytes(8, 6, &raster).unwrap()).unwrap();
    let prefix = dir.path().join("b");
    run(&["dwt", p(&src), p(&prefix)]).unwrap();
    for band in ["ll", "lh", "hl", "hh"] {
        let img = ppm::read(dir.path().join(format!("b_{band}.ppm"))).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
    }
    let back = dir.path().join("back.ppm");
    run(&["idwt", p(&prefix), "--out", p(&back)]).unwrap();
    assert_eq!(std::fs::read(&back).unwrap(), std::fs::read(&src).unwrap());

    let odd = dir.path().join("odd.ppm");
    std::fs::write(&odd, ppm::encode_bytes(3, 2, &[0; 18]).unwrap()).unwrap();
    assert!(run(&["dwt", p(&odd), p(&prefix)]).unwrap_err().to_string().contains("even"));
}

#[test]
fn command_line_misuse() {
    assert!(run(&["gradcheck", "conv", "--mode", "f32"]).is_err());
    assert!(run(&["gradcheck", "everything"]).is_err());
    assert!(run(&["ablate-downsample", "--variant", "maxpool"]).unwrap_err().to_string().contains("avgpool"));
    assert!(run(&["train", "--tiny", "--variant", "maxpool"]).is_err());
    assert!(run(&["config", "--defaults", "--variant", "wfd"]).is_err());
    let table = run(&["gradcheck", "norm"]).unwrap();
    assert!(table.contains("norm") && table.contains("ok"), "{table}");
}

#[test]
fn ablation_variants_share_their_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), |c| c.train.steps = 2);
    let report_path = dir.path().join("ablation.txt");
    let out = run(&["ablate-downsample", "--config", p(&cfg_path), "--out", p(&report_path)]).unwrap();
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(out.ends_with(&report));
    for name in ["stride", "avgpool", "bicubic", "wfd"] {
        assert!(report.lines().any(|l| l.starts_with(name)), "{report}");
    }
    assert!(report.contains("26.36 dB / 0.7795"));
    assert!(report.contains("identical across variants"));
}
