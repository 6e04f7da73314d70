use std::path::Path;
use std::process::{Command, Output};

fn hsgcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsgcn"))
        .current_dir(dir)
        .env_remove("MGK_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const DATA: [&str; 3] = ["--paths.cube=s/cube.hsc", "--paths.labels=s/labels.hsl", "--paths.split=s/split.json"];

fn with_data<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = DATA.to_vec();
    v.extend_from_slice(extra);
    v
}

fn scene(dir: &Path) {
    ok(&hsgcn(dir, &["synth", "--out", "s", "--size", "16", "--train-per-class", "15"]));
}

#[test]
fn seeded_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    for run in ["a", "b"] {
        let ckpt = format!("--paths.checkpoint={run}.ckpt");
        let out = format!("--paths.output={run}");
        ok(&hsgcn(dir.path(), &with_data(&["train", &ckpt, &out, "--train.epochs=5", "--train.seed=4"])));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt.json"), read("b.ckpt.json"));
    assert_eq!(read("a/train_log.csv"), read("b/train_log.csv"));
    let log = String::from_utf8(read("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,loss,train_oa"));
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn seed_env_var_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let args = with_data(&["train", "--paths.checkpoint=e.ckpt", "--train.epochs=1"]);
    ok(&hsgcn(dir.path(), &args));
    let base = std::fs::read(dir.path().join("e.ckpt")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_hsgcn"))
        .current_dir(dir.path())
        .env("MGK_SEED", "9")
        .args(&args)
        .output()
        .unwrap();
    ok(&out);
    assert_ne!(std::fs::read(dir.path().join("e.ckpt")).unwrap(), base);
}

#[test]
fn eval_and_map_outputs() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let common = ["--paths.checkpoint=m.ckpt", "--paths.output=o"];
    ok(&hsgcn(dir.path(), &with_data(&[&["train", "--train.epochs=20"][..], &common].concat())));
    let text = ok(&hsgcn(dir.path(), &with_data(&[&["eval"][..], &common].concat())));
    assert!(text.contains("OA"));
    let csv = std::fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,value"));
    ok(&hsgcn(dir.path(), &with_data(&[&["predict-map", "--ground-truth"][..], &common].concat())));
    let ppm = std::fs::read(dir.path().join("o/map.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    let legend = std::fs::read_to_string(dir.path().join("o/map_legend.txt")).unwrap();
    assert_eq!(legend.lines().count(), 4);
    assert!(dir.path().join("o/ground_truth.ppm").exists());
}

#[test]
fn bias_csv_schema_and_full_budget() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    ok(&hsgcn(dir.path(), &with_data(&["bias", "--trials", "50", "--paths.output=o", "--train.batch=45"])));
    for f in ["o/bias_unit.csv", "o/bias_cobatch.csv"] {
        let csv = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("vertex_id,target,mc_mean,bias,stderr"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 45);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), 5);
            assert_eq!(r[0], i as f64);
            assert_eq!(r[3], 0.0, "{f} row {i}");
        }
    }
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    ok(&hsgcn(dir.path(), &with_data(&["sweep", "--k=3,5", "--sigma=0.5,1,2", "--train.epochs=2", "--paths.output=o"])));
    let csv = std::fs::read_to_string(dir.path().join("o/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,sigma,oa"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    let code = |args: &[&str]| hsgcn(dir.path(), args).status.code();
    assert_eq!(code(&["train", "--train.epochz=3"]), Some(1));
    assert_eq!(code(&["train"]), Some(1));
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&with_data(&["eval", "--paths.checkpoint=missing.ckpt"])), Some(2));
    assert_eq!(code(&["train", "--paths.cube=nope.hsc", "--paths.labels=x", "--paths.split=y", "--paths.checkpoint=z"]), Some(2));
    std::fs::write(dir.path().join("bad.hsc"), b"HSC1{").unwrap();
    assert_eq!(code(&["train", "--paths.cube=bad.hsc", "--paths.labels=s/labels.hsl", "--paths.split=s/split.json", "--paths.checkpoint=z"]), Some(1));
    assert_eq!(code(&["bench", "--n=4,5,6", "--d=2", "--p=2", "--m=2", "--repeats=3", "--modes=full-gcn-sparse"]), Some(1));
    // Checkpoint trained on 3 classes evaluated against a 4-class scene.
    ok(&hsgcn(dir.path(), &with_data(&["train", "--paths.checkpoint=m.ckpt", "--train.epochs=1"])));
    ok(&hsgcn(dir.path(), &["synth", "--out", "s4", "--size", "16", "--classes", "4", "--train-per-class", "5"]));
    assert_eq!(
        code(&["eval", "--paths.cube=s4/cube.hsc", "--paths.labels=s4/labels.hsl", "--paths.split=s4/split.json", "--paths.checkpoint=m.ckpt"]),
        Some(1)
    );
}

#[test]
fn config_file_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    scene(dir.path());
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"train": {"epochs": 3}, "paths": {"cube": "s/cube.hsc", "labels": "s/labels.hsl", "split": "s/split.json", "checkpoint": "f.ckpt", "output": "f"}}"#,
    )
    .unwrap();
    ok(&hsgcn(dir.path(), &["train", "--config", "run.json", "--train.epochs=2"]));
    let log = std::fs::read_to_string(dir.path().join("f/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}
