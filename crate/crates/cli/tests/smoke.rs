//! End-to-end runs of every `dsnn` subcommand through the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsnn_cli::ExperimentConfig;

const CLUSTERS: &str = "\
# small clusters run
task.dim = 16
task.train_size = 400
task.eval_size = 200
model.mlp_hidden = 32,32
train.pretrain_steps = 120
train.steps = 120
train.freeze_steps = 30
train.ramp_steps = 60
train.mask_update_frequency = 10
train.lr = 0.005
train.ema_decay = 0.95
";

const SYMBOLS: &str = "\
task.kind = symbol-count
task.seq_len = 6
task.train_size = 300
task.eval_size = 100
task.classes = 3
model.kind = lstm
model.hidden = 16
model.projection = 8
train.pretrain_steps = 60
train.steps = 60
train.freeze_steps = 10
train.ramp_steps = 30
train.mask_update_frequency = 5
train.lr = 0.01
train.ema_decay = 0.9
";

fn dsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsnn"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dsnn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = dsnn(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, body: &str, out: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{body}output.dir = {}\n", out.display())).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

#[test]
fn dump_defaults_prints_a_parsable_complete_config() {
    let text = ok(&["--dump-defaults"]);
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::default());
    assert!(text.contains("plan.Small = "));
    assert!(text.contains("train.mask_update_frequency = 100"));
}

#[test]
fn help_is_available_for_every_subcommand() {
    for sub in [
        "pretrain",
        "train-dsnn",
        "train-single",
        "train-snn",
        "eval",
        "compare",
        "bench",
        "pipeline",
        "ablation",
    ] {
        assert!(ok(&[sub, "--help"]).contains("Usage"), "{sub}");
    }
}

#[test]
fn clusters_pipeline_is_complete_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = write_config(tmp.path(), CLUSTERS, &a);
    let table = ok(&["pipeline", "--config", s(&cfg)]);
    assert!(table.starts_with("| Type | Sparsity | Model |"), "{table}");
    for run in ["pretrain", "dsnn", "single_Medium", "single_Small"] {
        assert!(a.join(run).join("manifest.json").is_file(), "{run}");
        let metrics = fs::read_to_string(a.join(format!("{run}.metrics.csv"))).unwrap();
        assert!(metrics.starts_with("step,config,loss,accuracy,sparsity,wall_ms\n"));
    }
    let manifests = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().join("manifest.json").is_file());
    assert_eq!(manifests.count(), 4);

    let csv = fs::read_to_string(a.join("compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("type,sparsity,model,loss,accuracy"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r.len() == 5));
    let models: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[2])).collect();
    assert_eq!(
        models,
        [
            ("Large", "Pretrain"),
            ("Large", "DSNN"),
            ("Medium", "Single_M"),
            ("Medium", "DSNN"),
            ("Small", "Single_S"),
            ("Small", "DSNN")
        ]
    );

    // same config and seed, different output directory
    let cfg_b = write_config(tmp.path(), CLUSTERS, &b);
    ok(&["pipeline", "--config", s(&cfg_b)]);
    for run in ["pretrain", "dsnn", "single_Medium", "single_Small"] {
        assert!(tree(&a.join(run)) == tree(&b.join(run)), "{run} differs between runs");
    }
}

#[test]
fn staged_commands_eval_and_compare_on_the_lstm_task() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), SYMBOLS, &out);
    let c = s(&cfg);
    let pre = out.join("pre");
    ok(&["pretrain", "--config", c, "--out", s(&pre)]);
    ok(&["train-dsnn", "--config", c, "--pretrained", s(&pre)]);
    ok(&["train-snn", "--config", c, "--pretrained", s(&pre), "--label", "Slim"]);
    ok(&["train-single", "--config", c, "--pretrained", s(&pre), "--sparsity-config", "Small"]);
    let dsnn_dir = out.join("dsnn");
    for d in ["dsnn", "snn", "single_Small"] {
        assert!(out.join(d).join("manifest.json").is_file(), "{d}");
    }

    let before = tree(&dsnn_dir);
    let small = ok(&["eval", "--checkpoint", s(&dsnn_dir), "--sparsity-config", "Small"]);
    assert_eq!(tree(&dsnn_dir), before, "eval modified the checkpoint");
    // lstm0.w is 64 x 20 with 4 x 1 blocks: 320 blocks
    let lstm: f64 = field(&small, "weight lstm0.w").parse().unwrap();
    assert!((lstm - 0.9).abs() <= 1.0 / 320.0 + 1e-12, "{lstm}");
    let large = ok(&["eval", "--checkpoint", s(&dsnn_dir), "--sparsity-config", "Large"]);
    assert_eq!(field(&large, "sparsity"), "0.0000");
    assert!(field(&large, "loss").parse::<f64>().unwrap().is_finite());

    let table = ok(&["compare", s(&dsnn_dir), s(&dsnn_dir), "--format", "csv"]);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0], pair[1]);
    }

    let mixed = ok(&[
        "compare",
        s(&out.join("single_Small")),
        s(&dsnn_dir),
        s(&out.join("snn")),
        "--markdown",
        s(&tmp.path().join("t.md")),
    ]);
    assert!(mixed.contains("| Slim |"));
    assert!(fs::read_to_string(tmp.path().join("t.md")).unwrap() == mixed);

    // ablation grid reusing the pretrained checkpoint
    let abl = ok(&["ablation", "--config", c, "--pretrained", s(&pre)]);
    for label in ["Baseline DSNN", "+ Lazy Update", "+ In-Place Distillation", "+ Progressive Freezing"] {
        assert!(abl.contains(label), "{label} missing from\n{abl}");
    }
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}

#[test]
fn bench_emits_speedup_csv() {
    let text = ok(&["bench", "--sizes", "64", "--sparsities", "0,0.5", "--reps", "3"]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("size,sparsity,dense_ns,sparse_ns,ratio"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), CLUSTERS, &out);
    let c = s(&cfg);

    assert_eq!(code(&["pretrain", "--bogus-flag"]).0, 1);
    assert_eq!(code(&[]).0, 1);

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "train.lerning_rate = 0.1\n").unwrap();
    let (status, err) = code(&["pretrain", "--config", s(&bad)]);
    assert_eq!(status, 1);
    assert!(err.contains("unknown key `train.lerning_rate`"), "{err}");

    let (status, err) = code(&["train-dsnn", "--config", c, "--pretrained", s(&tmp.path().join("nowhere"))]);
    assert_eq!(status, 1);
    assert!(err.contains("no checkpoint"), "{err}");

    let pre = out.join("pre");
    ok(&["pretrain", "--config", c, "--out", s(&pre), "--set", "train.pretrain_steps=5"]);
    let (status, err) = code(&["eval", "--checkpoint", s(&pre), "--sparsity-config", "Tiny"]);
    assert_eq!(status, 1);
    assert!(err.contains("Large, Medium, Small"), "{err}");

    // a checkpoint trained under another plan cannot be compared
    let other = out.join("other");
    ok(&[
        "pretrain",
        "--config",
        c,
        "--out",
        s(&other),
        "--set",
        "train.pretrain_steps=5",
        "--set",
        "plan.Full=fc*:0",
    ]);
    assert_eq!(code(&["compare", s(&pre), s(&other)]).0, 1);

    let (status, err) = code(&["pretrain", "--config", c, "--out", s(&out.join("boom")), "--set", "train.lr=1e300"]);
    assert_eq!(status, 2, "{err}");
    assert!(err.contains("diverged"), "{err}");
}
