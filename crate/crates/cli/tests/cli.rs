use std::path::Path;
use std::process::{Command, Output};

fn coswin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coswin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success(), "expected failure, got {}", stdout(o));
    let lines: Vec<String> = stderr(o)
        .lines()
        .filter(|l| l.starts_with("error kind="))
        .map(str::to_string)
        .collect();
    assert_eq!(lines.len(), 1, "stderr: {}", stderr(o));
    lines[0].clone()
}

fn manifest_hash(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("manifest sha256 "))
        .expect("hash line")
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_counts_refuses_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let a = coswin(&["synth", "--count", "12", "--size", "64", "--seed", "7", "--out", p(&out)]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(std::fs::read_dir(out.join("images")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 12);

    let again = coswin(&["synth", "--count", "12", "--size", "64", "--seed", "7", "--out", p(&out)]);
    assert!(error_line(&again).contains("--force"));

    let forced = coswin(&["synth", "--count", "12", "--size", "64", "--seed", "7", "--out", p(&out), "--force"]);
    assert!(forced.status.success());
    assert_eq!(manifest_hash(&a), manifest_hash(&forced));

    let bad = coswin(&["synth", "--size", "60", "--out", p(&tmp.path().join("bad"))]);
    let line = error_line(&bad);
    assert!(line.starts_with("error kind=config"), "{line}");
    assert!(line.contains("divisible by 16"), "{line}");
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let ok = coswin(&["gradcheck", "--seed", "1"]);
    assert!(ok.status.success(), "{}{}", stdout(&ok), stderr(&ok));
    assert!(stdout(&ok).contains("network_32x32"));

    let bad = coswin(&["gradcheck", "--inject-fault", "tanh"]);
    let line = error_line(&bad);
    assert!(line.contains("tanh"), "{line}");
    assert!(stdout(&bad).lines().any(|l| l.starts_with("tanh ") && l.contains("FAIL")));
}

fn write_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 5\nout_dir = {:?}\n\n[network]\nwidths = [8, 16, 32]\nres_blocks = 1\n\n[optim]\nepochs = 2\n\n[data]\ndir = {:?}\n",
        p(&dir.join("run")),
        p(data)
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_eval_infer_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(coswin(&["synth", "--count", "20", "--out", p(&data)]).status.success());
    let cfg = write_config(tmp.path(), &data);

    let first = coswin(&["train", p(&cfg)]);
    assert!(first.status.success(), "{}", stderr(&first));
    let run = tmp.path().join("run");
    for f in ["config.toml", "metrics.csv", "best.ckpt", "last.ckpt", "test.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read(run.join("metrics.csv")).unwrap();
    let ckpt = std::fs::read(run.join("last.ckpt")).unwrap();
    let second = coswin(&["train", p(&cfg), "--out", p(&tmp.path().join("run2"))]);
    assert!(second.status.success());
    assert_eq!(std::fs::read(tmp.path().join("run2/metrics.csv")).unwrap(), metrics);
    assert_eq!(std::fs::read(tmp.path().join("run2/last.ckpt")).unwrap(), ckpt);

    // the saved config reproduces the run on its own
    let third = coswin(&["train", p(&run.join("config.toml")), "--out", p(&tmp.path().join("run3"))]);
    assert!(third.status.success());
    assert_eq!(std::fs::read(tmp.path().join("run3/last.ckpt")).unwrap(), ckpt);

    let csv = tmp.path().join("eval.csv");
    let eval = coswin(&[
        "eval",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--data",
        p(&data),
        "--csv",
        p(&csv),
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report = std::fs::read_to_string(&csv).unwrap();
    assert!(report.starts_with("model,precision,recall,f1,iou,oa\nmicro,"));
    assert!(report.contains("\nmacro,"));

    let image = data.join("images/synth_00000.png");
    let infer = coswin(&[
        "infer",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--image",
        p(&image),
        "--out",
        p(&tmp.path().join("pred")),
    ]);
    assert!(infer.status.success(), "{}", stderr(&infer));
    let mask = image::open(tmp.path().join("pred/synth_00000_mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
    assert!(tmp.path().join("pred/synth_00000_prob.png").exists());

    // a checkpoint from a different architecture is rejected by strict load
    let other = tmp.path().join("other.toml");
    let text = std::fs::read_to_string(run.join("config.toml")).unwrap().replace("[8, 16, 32]", "[8, 16, 16]");
    std::fs::write(&other, text).unwrap();
    let mismatch = coswin(&[
        "eval",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--config",
        p(&other),
        "--data",
        p(&data),
    ]);
    let line = error_line(&mismatch);
    assert!(line.starts_with("error kind=checkpoint") && line.contains('`'), "{line}");
}

#[test]
fn eval_of_oracle_and_empty_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(coswin(&["synth", "--count", "10", "--out", p(&data)]).status.success());

    let csv = tmp.path().join("oracle.csv");
    let oracle = coswin(&["eval", "--pred-dir", p(&data.join("masks")), "--data", p(&data), "--split", "all", "--csv", p(&csv)]);
    assert!(oracle.status.success(), "{}", stderr(&oracle));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.contains("micro,1.0000,1.0000,1.0000,1.0000,1.0000"), "{text}");

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    for entry in std::fs::read_dir(data.join("masks")).unwrap() {
        let name = entry.unwrap().file_name();
        image::GrayImage::new(64, 64).save(empty.join(name)).unwrap();
    }
    let out = coswin(&["eval", "--pred-dir", p(&empty), "--data", p(&data), "--split", "all"]);
    assert!(out.status.success());
    let table = stdout(&out);
    let micro = table.lines().find(|l| l.starts_with("micro")).unwrap();
    let cols: Vec<&str> = micro.split_whitespace().collect();
    assert_eq!(cols[2], "0.0000", "{micro}");
    assert!(micro.contains("(degenerate)"), "{micro}");
}

#[test]
fn unknown_config_key_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[optim]\nweight_decay = 0.1\n").unwrap();
    let line = error_line(&coswin(&["train", p(&cfg)]));
    assert!(line.starts_with("error kind=config") && line.contains("weight_decay"), "{line}");
}

#[test]
fn ablation_flag_selects_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("a.toml");
    std::fs::write(
        &cfg,
        format!(
            "out_dir = {:?}\n[network]\nwidths = [8, 16, 32]\nres_blocks = 1\n[optim]\nepochs = 1\n[data]\ncount = 10\n",
            p(&tmp.path().join("run"))
        ),
    )
    .unwrap();
    let out = coswin(&["train", p(&cfg), "--ablation", "none"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let saved = std::fs::read_to_string(tmp.path().join("run/config.toml")).unwrap();
    assert!(saved.contains("use_coswin = false") && saved.contains("use_cfilter = false"), "{saved}");
}
