//! End-to-end runs of the `emcomm` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
n_attributes = 2
values_per_attribute = 3
feature_dim = 8
train_per_concept = 4
heldout_per_concept = 2
vocab_size = 6
max_len = 3
distractors = 2
batch_size = 8
embed_dim = 6
hidden_dim = 8
baseline_hidden = 8
max_updates = 20
eval_interval = 10
eval_rounds = 16
checkpoint_interval = 10
lm_epochs = 2
probe_count = 6
";

fn emcomm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_emcomm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn emcomm");
    assert!(
        out.status.success(),
        "emcomm {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn train_eval_analyze_probe() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--estimator",
        "st-gs",
        "--seed",
        "3",
    ]);
    for f in [
        "config.txt",
        "metrics.csv",
        "checkpoint.json",
        "messages.txt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(header(&out.join("metrics.csv")).starts_with("update,train_loss,"));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("estimator = st-gs"));
    assert!(written.contains("seed = 3"));

    let ck = out.join("checkpoint.json");
    emcomm(&["eval", "--checkpoint", s(&ck), "--decode", "greedy"]);
    assert!(out.join("eval_report.txt").exists());
    assert!(out.join("eval_report.csv").exists());

    emcomm(&["analyze", "--checkpoint", s(&ck)]);
    assert_eq!(
        header(&out.join("purity.csv")),
        "prefix_len,attribute,purity"
    );
    assert!(out.join("heldout_messages.txt").exists());
    assert!(out.join("analysis_report.txt").exists());

    let stdout = emcomm(&[
        "probe-pseudograd",
        "--checkpoint",
        s(&ck),
        "--probes",
        "4",
        "--eps",
        "1e-3",
    ])
    .stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("acute-angle fraction"));
    let probes = fs::read_to_string(out.join("probes.csv")).unwrap();
    assert_eq!(probes.lines().next(), Some("update,probe,dot,sign,crossed"));
    assert_eq!(probes.lines().count(), 5);
}

#[test]
fn resume_continues_to_the_same_metrics() {
    let (dir, cfg) = setup();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&full),
        "--estimator",
        "reinforce",
    ]);
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&part),
        "--estimator",
        "reinforce",
        "--max-updates",
        "10",
    ]);
    let ck = part.join("checkpoint.json");
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&part),
        "--resume",
        s(&ck),
    ]);
    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
}

#[test]
fn sequential_flag_gives_identical_metrics() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&a),
        "--estimator",
        "gs",
    ]);
    emcomm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        s(&b),
        "--estimator",
        "gs",
        "--sequential",
    ]);
    assert_eq!(
        fs::read_to_string(a.join("metrics.csv")).unwrap(),
        fs::read_to_string(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn lm_and_grounded_training() {
    let (dir, cfg) = setup();
    let lm = dir.path().join("lm");
    emcomm(&["lm-train", "--config", &cfg, "--out", s(&lm)]);
    assert_eq!(header(&lm.join("lm_metrics.csv")), "epoch,perplexity");
    assert!(lm.join("checkpoint.json").exists());

    let kl = dir.path().join("kl");
    emcomm(&[
        "ground-train",
        "--config",
        &cfg,
        "--out",
        s(&kl),
        "--grounding",
        "kl",
        "--kl-weight",
        "0.1",
    ]);
    let metrics = fs::read_to_string(kl.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(!last.ends_with(','), "lm perplexity column filled: {last}");

    let direct = dir.path().join("direct");
    emcomm(&[
        "ground-train",
        "--config",
        &cfg,
        "--out",
        s(&direct),
        "--grounding",
        "direct",
        "--caption-weight",
        "0.5",
    ]);
    assert!(direct.join("metrics.csv").exists());
}

#[test]
fn feature_and_caption_files_are_read() {
    let (dir, cfg) = setup();
    let mut features = String::from("dim=8 count=36\n");
    let mut captions = String::new();
    for concept in 0..9 {
        for k in 0..4 {
            let v: Vec<String> = (0..8)
                .map(|j| {
                    format!(
                        "{}",
                        if j == concept % 8 {
                            1.0
                        } else {
                            0.05 * (k + j) as f64
                        }
                    )
                })
                .collect();
            features.push_str(&format!("{concept} {}\n", v.join(" ")));
        }
        captions.push_str(&format!("{concept} {} {}\n", concept / 3, 3 + concept % 3));
    }
    let fpath = dir.path().join("features.txt");
    let cpath = dir.path().join("captions.txt");
    fs::write(&fpath, features).unwrap();
    fs::write(&cpath, captions).unwrap();
    let out = dir.path().join("files");
    emcomm(&[
        "ground-train",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--features",
        s(&fpath),
        "--captions",
        s(&cpath),
    ]);
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn lr_sweep_writes_one_row_per_point() {
    let (dir, cfg) = setup();
    let out = dir.path().join("sweep");
    emcomm(&[
        "lr-sweep",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--max-updates",
        "10",
    ]);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("lr,updates,success_greedy,success_sample,convergence_update")
    );
    assert_eq!(lines.count(), 5);
}

#[test]
fn gradcheck_passes() {
    let stdout = emcomm(&["gradcheck", "--trials", "3"]).stdout;
    let table = String::from_utf8_lossy(&stdout);
    assert!(table.contains("lstm_cell"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn bad_config_is_rejected() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "vocab_size = 6\nno_such_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_emcomm"))
        .args([
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("x")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr)
        .contains("bad.cfg:2: invalid configuration: unknown key"));
}
