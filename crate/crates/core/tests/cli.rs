//! End-to-end runs of the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
data.profile = toy
data.sizing = floor32
model.embed_dim = 8
model.unet_width = 8
model.encoder_width = 8
cide.num_classes = 10
cide.num_embeddings = 10
cide.hidden = 16
cide.classifier_width = 4
conditioning.num_scenes = 4
train.batch_size = 4
train.epochs = 2
";

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffdepth"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_evaluate_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&bin(&["synth", "--out", "data"], d));
    fs::write(d.join("toy.cfg"), TOY).unwrap();

    ok(&bin(
        &["train", "--config", "toy.cfg", "--data-root", "data", "--out", "run"],
        d,
    ));
    assert!(d.join("run/checkpoint.ckpt").exists());
    let log = fs::read_to_string(d.join("run/train.log")).unwrap();
    assert!(log.starts_with("# epochs=2 "));
    assert_eq!(log.lines().nth(1), Some("step, lr, loss, wall_time"));
    assert_eq!(log.lines().count(), 2 + 4);

    ok(&bin(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--data-root",
            "data",
            "--out",
            "ev",
        ],
        d,
    ));
    let csv = fs::read_to_string(d.join("ev/per_sample.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(fs::read_to_string(d.join("ev/summary.json"))
        .unwrap()
        .contains("\"abs_rel\""));

    // oracle injection: ground truth scored against itself
    let o = bin(
        &[
            "evaluate",
            "--oracle",
            "--config",
            "toy.cfg",
            "--data-root",
            "data",
            "--out",
            "or",
        ],
        d,
    );
    ok(&o);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("or/summary.json")).unwrap()).unwrap();
    assert_eq!(s["metrics"]["delta1"], 1.0);
    assert_eq!(s["metrics"]["abs_rel"], 0.0);

    // a baseline report turns on mRI
    fs::write(d.join("base.json"), r#"{"delta1": 0.5, "abs_rel": 0.2, "rmse": 1.0}"#).unwrap();
    ok(&bin(
        &[
            "evaluate",
            "--oracle",
            "--config",
            "toy.cfg",
            "--data-root",
            "data",
            "--out",
            "or2",
            "--baseline-report",
            "base.json",
        ],
        d,
    ));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("or2/summary.json")).unwrap()).unwrap();
    assert!((s["mri"].as_f64().unwrap() - (1.0 + 1.0 + 1.0) / 3.0).abs() < 1e-12);

    // predict twice: identical bytes, color map at input size
    for out in ["p1", "p2"] {
        ok(&bin(
            &[
                "predict",
                "--checkpoint",
                "run/checkpoint.ckpt",
                "--out",
                out,
                "data/rgb/0003.png",
            ],
            d,
        ));
    }
    let a = fs::read(d.join("p1/0003.png")).unwrap();
    assert_eq!(a, fs::read(d.join("p2/0003.png")).unwrap());
    let color = image::open(d.join("p1/0003_color.png")).unwrap();
    assert_eq!((color.width(), color.height()), (64, 64));
    let depth = image::open(d.join("p1/0003.png")).unwrap();
    assert!(matches!(depth, image::DynamicImage::ImageLuma16(_)));

    // an unreadable image fails on its own; the other is still written
    let o = bin(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--out",
            "p3",
            "missing.png",
            "data/rgb/0001.png",
        ],
        d,
    );
    assert!(!o.status.success());
    assert!(d.join("p3/0001.png").exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.png"));

    // edited config against the checkpoint: refused unless overridden
    fs::write(d.join("edited.cfg"), format!("{TOY}train.seed = 9\n")).unwrap();
    let args = [
        "evaluate",
        "--checkpoint",
        "run/checkpoint.ckpt",
        "--config",
        "edited.cfg",
        "--data-root",
        "data",
        "--out",
        "e2",
    ];
    assert_eq!(bin(&args, d).status.code(), Some(2));
    let mut loose = args.to_vec();
    loose.push("--allow-config-mismatch");
    ok(&bin(&loose, d));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("toy.cfg"), TOY).unwrap();
    let o = bin(
        &["train", "--config", "toy.cfg", "--data-root", "nowhere", "--out", "x"],
        d,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere/train.txt"));

    fs::write(d.join("bad.cfg"), "train.epoch = 3\n").unwrap();
    assert_eq!(
        bin(&["train", "--config", "bad.cfg", "--out", "x"], d).status.code(),
        Some(2)
    );

    let o = Command::new(env!("CARGO_BIN_EXE_diffdepth"))
        .args(["train", "--config", "toy.cfg", "--data-root", "data", "--out", "x"])
        .current_dir(d)
        .env("DIFFDEPTH_TRAIN_LR_MAX", "-1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    // one_hot on a listing without scene labels is a data error
    ok(&bin(&["synth", "--out", "data"], d));
    fs::write(d.join("unl.cfg"), format!("{TOY}data.train_split = unlabeled.txt\n")).unwrap();
    let o = bin(
        &[
            "ablate-conditioning",
            "--config",
            "unl.cfg",
            "--data-root",
            "data",
            "--out",
            "ab",
            "--variant",
            "one_hot",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(3));

    // a sample with no valid depth is excluded from the aggregate, with a warning
    let blank = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(64, 64);
    blank.save(d.join("data/depth/0002.png")).unwrap();
    let o = bin(
        &[
            "evaluate",
            "--oracle",
            "--config",
            "toy.cfg",
            "--data-root",
            "data",
            "--out",
            "ev",
        ],
        d,
    );
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rgb/0002.png has no valid pixels"));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/summary.json")).unwrap()).unwrap();
    assert_eq!(s["excluded"][0], "rgb/0002.png");
    assert_eq!(s["n_samples"], 7);
}
