use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hrfseg::data::{filter_annotated_samples, load_dataset, read_image_png, DatasetManifest, Split, VendorFilter};
use hrfseg::eval::{evaluate, pr_curve, write_pr_curve_csv, Averaging, EvalReport, Prediction};
use hrfseg::train::predict;

fn hrfseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrfseg"))
        .args(args)
        .arg("-q")
        .output()
        .expect("spawn hrfseg")
}

fn ok(args: &[&str]) -> Output {
    let out = hrfseg(args);
    assert!(
        out.status.success(),
        "hrfseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// A phantom plus a one-epoch SemSeg checkpoint trained on it.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let run = dir.join("train");
    ok(&["synth", "--images", "40", "--seed", "5", "--out", p(&data)]);
    let manifest = data.join("manifest.csv");
    ok(&[
        "train",
        "--arch",
        "semseg",
        "--loss",
        "ce",
        "--vendors",
        "both",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--patches-per-epoch",
        "16",
        "--lr",
        "1e-3",
        "--seed",
        "1",
        "--manifest",
        p(&manifest),
        "--out",
        p(&run),
    ]);
    (manifest, run.join("best.ckpt"))
}

#[test]
fn synth_is_byte_identical_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--images", "12", "--seed", "7", "--out", p(&a)]);
    ok(&["synth", "--images", "12", "--seed", "7", "--out", p(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("manifest.csv")));
    assert!(ta.contains_key(Path::new("run.toml")));
    assert_eq!(ta.len(), 2 + 2 * 12);
    assert_eq!(ta, tb);

    let c = dir.path().join("c");
    ok(&["synth", "--images", "12", "--seed", "8", "--out", p(&c)]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn train_eval_predict_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(dir.path());
    let run = ckpt.parent().unwrap();
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "epoch,train_loss,val_dsc,val_ap,checkpoint_flag"
    );
    assert_eq!(log.lines().count(), 2);
    let header = std::fs::read_to_string(run.join("run.toml")).unwrap();
    assert!(header.contains("command = \"train\""));
    assert!(header.contains("seed = 1"));
    assert!(header.contains("arch = \"semseg\""));

    let eval_dir = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--split",
        "test",
        "--out",
        p(&eval_dir),
    ]);
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "Precision,Recall,DSC,AP,AUC");
    let parsed = EvalReport::read_scores_csv(&eval_dir.join("eval.csv")).unwrap();

    let model = hrfseg::load_checkpoint(&ckpt).unwrap();
    let m = DatasetManifest::read(&manifest).unwrap();
    let samples = filter_annotated_samples(load_dataset(&m, VendorFilter::Both, &[Split::Test]).unwrap());
    let probs: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| predict(&model, &s.scan.pixels).unwrap().into_data())
        .collect();
    let preds: Vec<Prediction<'_>> = probs
        .iter()
        .zip(&samples)
        .map(|(pr, s)| Prediction {
            probs: pr,
            mask: s.mask.pixels().data(),
        })
        .collect();
    let report = evaluate(&preds, 0.5, Averaging::Pooled).unwrap();
    assert_eq!(parsed, report.scores());

    let entry = &m.entries[0];
    let pred_dir = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&m.resolve(&entry.image_path)),
        "--vendor",
        entry.vendor.tag(),
        "--out",
        p(&pred_dir),
    ]);
    let prob = read_image_png(&pred_dir.join("probability.png")).unwrap();
    assert_eq!(prob.dims(), (320, 512));
    assert!(prob.data().iter().all(|&v| (0.0..=65535.0).contains(&v)));
    assert!(pred_dir.join("mask.png").exists());

    let wrong = hrfseg(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--arch",
        "resunet_plus",
        "--input",
        p(&m.resolve(&entry.image_path)),
        "--vendor",
        entry.vendor.tag(),
        "--out",
        p(&dir.path().join("pred2")),
    ]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("SemSeg"));
}

#[test]
fn plot_legends_and_polylines() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = pr_curve(&[0.9f64, 0.7, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
    let mixed = pr_curve(&[0.9f64, 0.8, 0.7, 0.3], &[1, 0, 1, 0]).unwrap();
    let worse = pr_curve(&[0.9f64, 0.8, 0.7, 0.3], &[0, 1, 0, 1]).unwrap();
    let mut paths = Vec::new();
    for (name, c) in [("perfect", &perfect), ("mixed", &mixed), ("worse", &worse)] {
        let path = dir.path().join(format!("{name}.csv"));
        write_pr_curve_csv(c, &path).unwrap();
        paths.push(path);
    }

    let single = dir.path().join("single.svg");
    ok(&[
        "plot",
        "--curve",
        &format!("Perfect={}", p(&paths[0])),
        "--out",
        p(&single),
    ]);
    let svg = std::fs::read_to_string(&single).unwrap();
    assert!(svg.contains("Perfect (AP=1.0000)"));

    let three = dir.path().join("three.svg");
    ok(&[
        "plot",
        "--curve",
        &format!("SemSeg={}", p(&paths[0])),
        "--curve",
        &format!("ResUNet={}", p(&paths[1])),
        "--curve",
        p(&paths[2]),
        "--out",
        p(&three),
    ]);
    let svg = std::fs::read_to_string(&three).unwrap();
    let polylines: Vec<&str> = svg
        .lines()
        .filter(|l| l.trim_start().starts_with("<polyline"))
        .collect();
    assert_eq!(polylines.len(), 3);
    let points: std::collections::BTreeSet<&str> =
        polylines.iter().map(|l| l.split("points=\"").nth(1).unwrap()).collect();
    assert_eq!(points.len(), 3, "polylines must be distinct");
    assert!(svg.contains("ResUNet (AP=0.8333)"));
    assert!(svg.contains("worse (AP="));

    let empty = hrfseg(&["plot", "--out", p(&dir.path().join("none.svg"))]);
    assert_eq!(empty.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "recall,precision\n0.5,0.5\n").unwrap();
    let out = hrfseg(&["plot", "--curve", p(&bad), "--out", p(&dir.path().join("bad.svg"))]);
    assert!(!out.status.success());
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_flag = hrfseg(&["synth", "--bogus", "--out", p(dir.path())]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let missing = hrfseg(&[
        "train",
        "--manifest",
        p(&dir.path().join("absent.csv")),
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.csv"));

    let config = hrfseg(&[
        "train",
        "--epochs",
        "0",
        "--manifest",
        p(&dir.path().join("absent.csv")),
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(config.status.code(), Some(4));

    let toml = dir.path().join("cfg.toml");
    std::fs::write(&toml, "adam_beta2 = 1.5\n").unwrap();
    let bad_cfg = hrfseg(&[
        "train",
        "--config",
        p(&toml),
        "--manifest",
        p(&dir.path().join("absent.csv")),
        "--out",
        p(&dir.path().join("t")),
    ]);
    assert_eq!(bad_cfg.status.code(), Some(4));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", p(dir.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("forward_resunet_plus"));
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("gradcheck.csv").exists());
}
