use std::path::PathBuf;

use dpsarnn::config::RunConfig;
use dpsarnn::core::dualpath::{param_count, ModelConfig};
use dpsarnn::core::train::{LossKind, TrainConfig};
use dpsarnn::manifest::{self, Entry};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn empty_config_is_the_default() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg.model, ModelConfig::paper_causal());
    assert_eq!(cfg.train, TrainConfig::default());
}

#[test]
fn unknown_keys_and_invalid_values_are_errors() {
    assert!(RunConfig::parse("[model]\nwidht = 3\n").is_err());
    assert!(RunConfig::parse("[modle]\nwidth = 3\n").is_err());
    assert!(RunConfig::parse("[train]\nbatch_size = 0\n").is_err());
    assert!(RunConfig::parse("[model]\nchunk_shift = 0\n").is_err());
    assert!(RunConfig::parse("[train]\nloss = \"mse\"\n").is_err());
}

#[test]
fn serialisation_roundtrips() {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy();
    cfg.train.loss = LossKind::L1Time;
    cfg.train.max_steps = Some(7);
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn shipped_configs_load() {
    let expect = [
        ("paper_causal.toml", ModelConfig::paper_causal()),
        ("paper_noncausal.toml", ModelConfig::paper_noncausal()),
        ("toy.toml", ModelConfig::toy()),
        ("reduced.toml", ModelConfig::reduced()),
        ("realtime.toml", ModelConfig::realtime()),
    ];
    for (file, model) in expect {
        let cfg = RunConfig::load(configs_dir().join(file)).unwrap();
        assert_eq!(cfg.model, model, "{file}");
        assert!(param_count(&cfg.model).unwrap() > 0);
    }
}

#[test]
fn manifest_roundtrip_and_defaults() {
    let entries = vec![
        Entry { mixture: "mix/a.wav".into(), clean: "clean/a.wav".into(), snr_db: -5.0, seed: 3, kind: "pink".into() },
        Entry { mixture: "mix/b.wav".into(), clean: "clean/b.wav".into(), snr_db: 0.5, seed: 4, kind: "white".into() },
    ];
    assert_eq!(manifest::parse(&manifest::render(&entries)).unwrap(), entries);
    let four = manifest::parse("# comment\n\nm.wav\tc.wav\t-2\t9\n").unwrap();
    assert_eq!(four[0].kind, "all");
    assert_eq!(four[0].seed, 9);
}

#[test]
fn malformed_manifests_are_errors() {
    assert!(manifest::parse("").is_err());
    assert!(manifest::parse("a\tb\tc\n").is_err());
    assert!(manifest::parse("a\tb\tloud\t1\n").is_err());
    assert!(manifest::parse("a\tb\t1\t-1\n").is_err());
}

#[test]
fn manifest_paths_resolve_against_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(manifest::FILE_NAME), "m/x.wav\tc/x.wav\t0\t1\twhite\n").unwrap();
    for target in [dir.path().to_path_buf(), dir.path().join(manifest::FILE_NAME)] {
        let e = manifest::load(&target).unwrap();
        assert_eq!(e[0].mixture, dir.path().join("m/x.wav"));
        assert_eq!(e[0].clean, dir.path().join("c/x.wav"));
    }
    assert!(manifest::load(dir.path().join("nope")).is_err());
}
