use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "samples=48",
    "--set",
    "height=16",
    "--set",
    "width=16",
    "--set",
    "object_size=6",
    "--set",
    "backbone=4",
    "--set",
    "pool=4",
    "--set",
    "epochs=2",
];

fn ersm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ersm")).current_dir(dir).args(args).args(SMALL).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn generated() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(ersm(dir.path(), &["generate", "--seed", "3"]));
    dir
}

fn train_into(dir: &Path, out: &str, extra: &[&str]) -> String {
    std::fs::create_dir_all(dir.join(out)).unwrap();
    let mut args = vec!["train", "--quiet", "--seed", "3", "--data", "dataset.ersd", "--out", out];
    args.extend_from_slice(extra);
    ok(ersm(dir, &args))
}

#[test]
fn training_twice_writes_identical_bytes() {
    let dir = generated();
    train_into(dir.path(), "a", &[]);
    train_into(dir.path(), "b", &[]);
    for f in ["metrics.csv", "final.ersm", "best.ersm"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn full_without_pairwise_logs_like_unary() {
    let dir = generated();
    train_into(dir.path(), "full", &["--lambda-pair", "0"]);
    train_into(dir.path(), "unary", &["--variant", "unary"]);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("full"), read("unary"));
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let dir = generated();
    let stdout = train_into(dir.path(), "m", &[]);
    assert!(stdout.starts_with("peak_test_acc="));
    let csv = std::fs::read_to_string(dir.path().join("m/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("epoch,lce,lreg,ltotal,train_acc,test_acc,mean_mask,hist_0"));
    assert!(lines[0].ends_with("hist_9"));
    assert_eq!(lines.len(), 1 + 3);
}

#[test]
fn frozen_backbone_checkpoint_keeps_the_initial_backbone() {
    let dir = generated();
    train_into(dir.path(), "init", &["--epochs", "1", "--set", "lr=0", "--set", "min_lr=0", "--set", "weight_decay=0"]);
    train_into(dir.path(), "frozen", &["--freeze", "backbone"]);
    let cfg = {
        let mut c = ersm::RunConfig::default();
        for kv in SMALL.chunks(2).map(|p| p[1]) {
            let (k, v) = kv.split_once('=').unwrap();
            c.set(k, v).unwrap();
        }
        c.model()
    };
    let init = ersm::checkpoint::load(&dir.path().join("init/final.ersm"), &cfg).unwrap();
    let trained = ersm::checkpoint::load(&dir.path().join("frozen/final.ersm"), &cfg).unwrap();
    assert_eq!(init.backbone, trained.backbone);
    assert_ne!(init.head_w, trained.head_w);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = generated();
    for (u, p, rows) in [("1e-3", "1e-3", 1), ("0,1e-3", "0,1e-3", 4)] {
        let out = ok(ersm(
            dir.path(),
            &["ablate", "--data", "dataset.ersd", "--epochs", "1", "--unary-grid", u, "--pair-grid", p],
        ));
        assert_eq!(out.lines().count(), rows);
        let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + rows);
        assert!(csv.starts_with("lambda_unary,lambda_pair,peak_test_acc,mean_mask"));
    }
}

#[test]
fn eval_writes_reports_and_masks() {
    let dir = generated();
    train_into(dir.path(), ".", &[]);
    let out = ok(ersm(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "final.ersm",
            "--data",
            "dataset.ersd",
            "--masks-out",
            "masks",
            "--set",
            "mask_limit=3",
        ],
    ));
    assert!(out.contains("masks=3"));
    for f in ["curves.csv", "sparsity.csv", "alignment.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 16);
    let masks: Vec<_> = std::fs::read_dir(dir.path().join("masks")).unwrap().collect();
    assert_eq!(masks.len(), 3);
    let (w, h, _) = ersm::pgm::decode(&std::fs::read(dir.path().join("masks/mask_00000.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (16, 16));
}

#[test]
fn exit_codes_separate_usage_from_io() {
    let dir = generated();
    let code = |args: &[&str]| ersm(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "missing.ersm", "--data", "dataset.ersd"]), 2);
    assert!(!dir.path().join("curves.csv").exists());
    let bare = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_ersm")).current_dir(dir.path()).args(args).status().unwrap().code()
    };
    assert_eq!(bare(&["generate", "--object-size", "40"]), Some(1));
    assert_eq!(code(&["train", "--data", "dataset.ersd", "--bogus"]), 1);
    assert_eq!(code(&["train", "--data", "dataset.ersd", "--set", "nonsense=1"]), 1);
    assert_eq!(code(&["train", "--data", "dataset.ersd", "--set", "classes=5"]), 1);
    std::fs::write(dir.path().join("junk.ersd"), b"nope").unwrap();
    assert_eq!(code(&["train", "--data", "junk.ersd"]), 2);
    assert_eq!(bare(&["--help"]), Some(0));
}
