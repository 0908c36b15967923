use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pionono"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pionono")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("run.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn get<'a>(m: &'a [(String, String)], key: &str) -> &'a str {
    &m.iter()
        .find(|(k, _)| k == key)
        .unwrap_or_else(|| panic!("no {key}"))
        .1
}

/// Tiny dataset and a one-epoch model trained on it.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let ds = root.join("ds");
    ok(&[
        "gen-data",
        "--out",
        s(&ds),
        "--train",
        "3",
        "--test",
        "2",
        "--size",
        "16",
        "--seed",
        "5",
    ]);
    let run_dir = root.join("run");
    ok(&[
        "train",
        "--data",
        s(&ds.join("train")),
        "--out",
        s(&run_dir),
        "--epochs",
        "1",
        "--quiet",
    ]);
    (ds, run_dir.join("checkpoint.pnn"))
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&[
        "gen-data",
        "--out",
        s(&ds),
        "--train",
        "2",
        "--test",
        "1",
        "--size",
        "16",
    ]);
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "epochs = 3\nlambda = 0.25\n").unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "1",
        "--data",
        s(&ds.join("train")),
        "--out",
        s(&out),
        "--quiet",
    ]);
    let m = manifest(&out);
    assert_eq!(get(&m, "config.epochs"), "1");
    assert_eq!(get(&m, "config.lambda"), "0.25");
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn eval_of_identical_directories_has_unit_kappa() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&[
        "gen-data",
        "--out",
        s(&ds),
        "--train",
        "1",
        "--test",
        "3",
        "--size",
        "16",
    ]);
    let gold = ds.join("test").join("gold");
    let out = tmp.path().join("ev");
    let stdout = ok(&[
        "eval",
        "--pred",
        s(&gold),
        "--reference",
        s(&gold),
        "--classes",
        "4",
        "--out",
        s(&out),
    ])
    .stdout;
    let row = String::from_utf8(stdout).unwrap();
    let fields: Vec<&str> = row.trim().split(',').collect();
    assert_eq!(fields[2], "3");
    assert_eq!(&fields[3..7], ["1.000000"; 4]);
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(csv.starts_with(
        "source,reference,images,kappa_unweighted,kappa_quadratic,accuracy,mean_iou,iou_0"
    ));
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_dataset");
    let out = run(&[
        "train",
        "--data",
        s(&missing),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--epochs", "1"]).status.code(), Some(1));
    assert_eq!(
        run(&[
            "eval",
            "--pred",
            "a",
            "--reference",
            "b",
            "--out",
            "c",
            "--aggregation",
            "median"
        ])
        .status
        .code(),
        Some(1)
    );
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.txt");
    fs::write(&cfg, "epochs = 1\nnot_a_key = 2\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        "x",
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn diverging_training_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&[
        "gen-data",
        "--out",
        s(&ds),
        "--train",
        "3",
        "--test",
        "1",
        "--size",
        "16",
    ]);
    let out = run(&[
        "train",
        "--data",
        s(&ds.join("train")),
        "--out",
        s(&tmp.path().join("o")),
        "--epochs",
        "3",
        "--lr-net",
        "1e30",
        "--lr-latent",
        "1e30",
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn manifests_hash_their_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained(tmp.path());
    let digest = format!("{:x}", Sha256::digest(fs::read(&ckpt).unwrap()));
    let m = manifest(ckpt.parent().unwrap());
    assert_eq!(get(&m, "subcommand"), "train");
    assert_eq!(get(&m, "sha256.checkpoint"), digest);

    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&ds.join("test")),
        "--out",
        s(&pred),
        "--samples",
        "2",
    ]);
    let m = manifest(&pred);
    assert_eq!(get(&m, "sha256.checkpoint"), digest);
    assert!(!pred.join("run.tmp").exists());
}

#[test]
fn gen_data_replays_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&[
        "gen-data",
        "--out",
        s(&a),
        "--train",
        "2",
        "--test",
        "1",
        "--size",
        "16",
        "--seed",
        "9",
        "--coverage",
        "0.5",
    ]);
    let b = tmp.path().join("b");
    ok(&[
        "gen-data",
        "--config",
        s(&a.join("manifest.txt")),
        "--out",
        s(&b),
    ]);
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| {
        t.into_iter()
            .filter(|(p, _)| p != Path::new("run.txt"))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(tree(&a)), strip(tree(&b)));
}

#[test]
fn predict_and_simulate_write_maps_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained(tmp.path());
    let test = ds.join("test");
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&pred),
        "--samples",
        "3",
        "--save-samples",
    ]);
    for f in [
        "0000.pgm",
        "0000_uncertainty.pgm",
        "0001.pgm",
        "samples/0001_002.pgm",
        "meta.txt",
    ] {
        assert!(pred.join(f).is_file(), "{f}");
    }
    let meta = fs::read_to_string(pred.join("meta.txt")).unwrap();
    assert!(
        meta.contains("samples = 3") && meta.contains("seed = 0") && meta.contains("rater = 4")
    );

    let sim = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&sim),
        "--rater",
        "4",
    ]);
    assert!(fs::read_to_string(sim.join("meta.txt"))
        .unwrap()
        .contains("gold_requested = true"));
    let bad = run(&[
        "simulate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&sim),
        "--rater",
        "9",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let inside = run(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&test.join("p")),
    ]);
    assert_eq!(inside.status.code(), Some(1));
    assert!(!test.join("p").exists());
}

#[test]
fn report_is_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained(tmp.path());
    let test = ds.join("test");
    let (a, b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    for out in [&a, &b] {
        ok(&[
            "report",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&test),
            "--out",
            s(out),
            "--samples",
            "2",
            "--gold",
        ]);
    }
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| {
        t.into_iter()
            .filter(|(p, _)| p != Path::new("run.txt"))
            .collect::<Vec<_>>()
    };
    let ta = strip(tree(&a));
    assert_eq!(ta, strip(tree(&b)));
    let names: Vec<_> = ta
        .iter()
        .map(|(p, _)| p.to_str().unwrap().to_string())
        .collect();
    assert!(names.contains(&"agreement.csv".to_string()));
    assert!(names.contains(&"overlays/0001.ppm".to_string()));
    let agreement = fs::read_to_string(a.join("agreement.csv")).unwrap();
    let lines: Vec<&str> = agreement.lines().collect();
    assert!(lines[0].contains("kappa_sim_vs_self"));
    assert_eq!(lines.len(), 1 + 4 + 1);
    for l in &lines[1..] {
        assert!(!l.split(',').nth(2).unwrap().is_empty(), "{l}");
    }

    fs::remove_file(test.join("gold").join("0000.pgm")).unwrap();
    let out = run(&[
        "report",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&a),
        "--gold",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gold"));
}

#[test]
fn fuse_writes_masks_and_confusion() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&[
        "gen-data",
        "--out",
        s(&ds),
        "--train",
        "1",
        "--test",
        "2",
        "--size",
        "16",
    ]);
    let out = tmp.path().join("fused");
    ok(&["fuse", "--data", s(&ds.join("test")), "--out", s(&out)]);
    assert!(out.join("0001.pgm").is_file());
    let conf = fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(conf.lines().count(), 1 + 4 * 4 * 4);
    let mv = tmp.path().join("mv");
    ok(&[
        "fuse",
        "--data",
        s(&ds.join("test")),
        "--out",
        s(&mv),
        "--method",
        "majority",
    ]);
    assert!(mv.join("0000.pgm").is_file());
    assert_eq!(
        run(&[
            "fuse",
            "--data",
            s(&ds.join("test")),
            "--out",
            s(&mv),
            "--method",
            "mean"
        ])
        .status
        .code(),
        Some(1)
    );
}
