use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use dpsarnn::wav::read_wav;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpsarnn"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesises a small data set and trains the toy model for a few steps.
fn trained_toy(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    run(&["synth-data", "--count", "4", "--duration", "1.0", "--seed", "5", "--out", s(&data)]);
    let cfg = dir.join("toy.toml");
    let mut text = std::fs::read_to_string(configs().join("toy.toml")).unwrap();
    text.push_str("max_steps = 2\n");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.join("run");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--val", s(&data), "--out", s(&out)]);
    let text = stdout(&o);
    assert!(text.contains("steps=2"), "{text}");
    assert!(text.contains("best_epoch=1"), "{text}");
    out.join("best.ckpt")
}

#[test]
fn params_reports_exact_counts() {
    let o = run(&["params", "--config", s(&configs().join("paper_causal.toml"))]);
    assert_eq!(stdout(&o).trim(), "6863632");
    let o = run(&["params", "--config", s(&configs().join("toy.toml"))]);
    assert_eq!(stdout(&o).trim(), "22064");
}

#[test]
fn synth_train_enhance_eval_stream() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_toy(dir.path());
    let run_dir = model.parent().unwrap();
    for f in ["train.log", "epoch1.ckpt", "best.ckpt", "config.toml"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.starts_with("step\tepoch\tlr\tloss\n"));

    let input = dir.path().join("data/mix/00000.wav");
    let (offline, streamed) = (dir.path().join("o.wav"), dir.path().join("s.wav"));
    run(&["enhance", "--model", s(&model), "--in", s(&input), "--out", s(&offline)]);
    run(&["enhance", "--model", s(&model), "--in", s(&input), "--out", s(&streamed), "--streaming"]);
    let (x, _) = read_wav(&input).unwrap();
    let (a, _) = read_wav(&offline).unwrap();
    let (b, _) = read_wav(&streamed).unwrap();
    assert_eq!(a.len(), x.len());
    assert_eq!(a.samples(), b.samples());

    // Raw float32 through stdin matches the streamed file.
    let mut child = bin().args(["stream", "--model", s(&model)]).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
    let bytes: Vec<u8> = x.samples().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let mut stdin = child.stdin.take().unwrap();
    let writer = std::thread::spawn(move || {
        for piece in bytes.chunks(1001) {
            stdin.write_all(piece).unwrap();
        }
    });
    let o = child.wait_with_output().unwrap();
    writer.join().unwrap();
    assert!(o.status.success());
    let ys: Vec<f64> = o.stdout.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    assert_eq!(ys, b.samples());

    let o = run(&["eval", "--model", s(&model), "--manifest", s(&dir.path().join("data"))]);
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "noise\tsnr_db\tcount\tinput_si_snr\toutput_si_snr\tsi_snr_i");
    assert!(lines.last().unwrap().starts_with("average\tall\t4\t"), "{table}");
}

#[test]
fn bench_prints_machine_lines() {
    let o = run(&["bench", "--config", s(&configs().join("toy.toml")), "--seconds", "2", "--warmup", "3"]);
    let text = stdout(&o);
    // floor(2·16000/248) = 129 chunks, three of them warm-up.
    assert!(text.contains("\nchunks=126\n"), "{text}");
    for key in ["mean_ms=", "p95_ms=", "max_ms=", "realtime_pass=", "reference_mean_ms=7.9"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{key} missing");
    }
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["params".into(), "--config".into(), s(&dir.path().join("none.toml")).into()],
        vec!["enhance".into(), "--model".into(), s(&dir.path().join("none.ckpt")).into(), "--in".into(), "x.wav".into(), "--out".into(), "y.wav".into()],
        vec!["eval".into(), "--model".into(), "m".into(), "--manifest".into(), "nothing".into()],
    ];
    for args in cases {
        let o = bin().args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
    let o = bin().args(["bench"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn stream_rejects_partial_samples_and_noncausal_models() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_toy(dir.path());
    let mut child = bin().args(["stream", "--model", s(&model)]).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
    child.stdin.take().unwrap().write_all(&[0u8; 4 * 300 + 2]).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trailing bytes"));

    let mut cfg = dpsarnn::core::dualpath::ModelConfig::toy();
    cfg.causal = false;
    let mut net = dpsarnn::core::dualpath::EnhancementNetwork::<f32>::new(&cfg, 1).unwrap();
    net.freeze();
    let nc = dir.path().join("nc.ckpt");
    dpsarnn::checkpoint::save(&nc, &net).unwrap();
    let o = bin().args(["stream", "--model", s(&nc)]).stdin(Stdio::null()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let input = dir.path().join("data/mix/00001.wav");
    let out = dir.path().join("nc.wav");
    let o = bin().args(["enhance", "--model", s(&nc), "--in", s(&input), "--out", s(&out), "--streaming"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    run(&["enhance", "--model", s(&nc), "--in", s(&input), "--out", s(&out)]);
}
