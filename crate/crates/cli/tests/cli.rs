use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rangegan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("RANGEGAN_CONFIG").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

const SMALL_RUN: &str = r#"
[run.sensor]
height = 64
width = 256

[run.generator]
base_width = 4
n_resblocks = 1

[run.discriminator]
n_layers = 1
base_width = 4

[run.heads]
hidden = 8
out = 8

[run.loss]
patches_per_layer = 16

[run.train]
batch_size = 2
epochs = 2
crop_width = 64
checkpoint_every = 1
learning_rate = 0.001

[metrics]
sample_count = 100

[metrics.swd]
projections = 32
descriptors_per_image = 16

[metrics.mmd]
points_per_cloud = 256
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(count: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let o = run(&["toy", "--output", s(&data), "--count", &count.to_string(), "--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn help_and_usage_exit_codes() {
    for cmd in ["project", "reconstruct", "train", "translate", "evaluate", "stats", "render", "toy"] {
        assert_eq!(code(&run(&[cmd, "--help"])), 0, "{cmd} --help");
    }
    assert_eq!(code(&run(&["--help"])), 0);
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 64);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&["project", "--input", "x"])), 64);
    assert_eq!(code(&run(&["--threads", "0", "stats", "--dataset", "x"])), 64);
}

#[test]
fn project_reconstruct_round_trip() {
    let f = Fixture::new(3);
    let (sim, rimg, rec) = (f.path("data/sim"), f.path("rimg"), f.path("rec"));
    let grid = ["--height", "64", "--width", "256"];
    let o = run(&[&["project", "--input", s(&sim), "--output", s(&rimg)][..], &grid].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&rimg, "rimg").len(), 3);
    assert!(rimg.join("config.toml").is_file());
    let o = run(&[&["reconstruct", "--input", s(&rimg), "--output", s(&rec)][..], &grid].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (files(&sim, "bin"), files(&rec, "bin"));
    assert_eq!(b.len(), 3);
    // toy scans have one return per cell, so every point is retained
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::metadata(x).unwrap().len(), fs::metadata(y).unwrap().len());
    }
    let o = run(&["render", "--input", s(&rimg), "--output", s(&f.path("png"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(files(&f.path("png"), "png").len(), 3);
    assert_eq!(code(&run(&["project", "--input", s(&f.path("missing")), "--output", s(&rimg)])), 2);
}

#[test]
fn stats_prints_class_table() {
    let f = Fixture::new(2);
    let o = run(&["stats", "--dataset", s(&f.path("data/sim/dataset.toml"))]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("1\tcar\t")));
    // real-style scans carry no labels
    assert_eq!(code(&run(&["stats", "--dataset", s(&f.path("data/real/dataset.toml"))])), 2);
}

#[test]
fn train_translate_evaluate() {
    let f = Fixture::new(4);
    let cfg = f.path("run.toml");
    let (sim, real) = (f.path("data/sim/dataset.toml"), f.path("data/real/dataset.toml"));
    let train = |dir: &Path| run(&["--config", s(&cfg), "--seed", "3", "train", "--sim", s(&sim), "--real", s(&real), "--run-dir", s(dir)]);
    let o = train(&f.path("run1"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cks = files(&f.path("run1/checkpoints"), "ckpt");
    assert!(cks.len() >= 2, "{cks:?}");
    assert!(f.path("run1/config.toml").is_file());
    assert_eq!(fs::read_to_string(f.path("run1/train.log")).unwrap().lines().count(), 4 * 5);

    // identical config and seed reproduce the run byte for byte
    assert_eq!(code(&train(&f.path("run2"))), 0);
    let last = |d: &str| fs::read(f.path(d).join("checkpoints/last.ckpt")).unwrap();
    assert_eq!(last("run1"), last("run2"));
    assert_eq!(fs::read(f.path("run1/train.log")).unwrap(), fs::read(f.path("run2/train.log")).unwrap());

    let ck = f.path("run1/checkpoints/last.ckpt");
    let out = f.path("translated");
    let o = run(&["translate", "--dataset", s(&sim), "--checkpoint", s(&ck), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out, "bin").len(), 4);
    assert_eq!(files(&out, "rimg").len(), 4);
    assert!(out.join("manifest.jsonl").is_file());

    let bad = f.path("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = run(&["translate", "--dataset", s(&sim), "--checkpoint", s(&bad), "--output", s(&f.path("t2"))]);
    assert_eq!(code(&o), 3);
    let o = run(&["train", "--sim", s(&sim), "--real", s(&real), "--run-dir", s(&f.path("run3")), "--resume", s(&bad)]);
    assert_eq!(code(&o), 3);

    let real_dir = f.path("data/real");
    let eval = |gen: &Path, manifest: Option<&Path>, report: &Path| {
        let mut args = vec!["--config", s(&cfg), "evaluate", "--real", s(&real_dir), "--generated", s(gen), "--output", s(report)];
        if let Some(m) = manifest {
            args.extend(["--manifest", s(m)]);
        }
        let mut c = bin();
        c.args(&args).env_remove("RANGEGAN_CONFIG");
        c.output().unwrap()
    };
    let o = eval(&real_dir, None, &f.path("e0"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().nth(1).unwrap().split('\t').map(String::from).collect();
    for v in &row[..4] {
        assert!(v.parse::<f64>().unwrap().abs() < 1e-6, "{row:?}");
    }
    assert_eq!(&row[4..], ["-", "-"]);

    let manifest = out.join("manifest.jsonl");
    let o = eval(&out, Some(&manifest), &f.path("e1"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(f.path("e1/report.json")).unwrap()).unwrap();
    assert!(report["cd"].as_f64().is_some() && report["rmse"].as_f64().is_some());
    assert_eq!(code(&eval(&out, Some(&manifest), &f.path("e2"))), 0);
    assert_eq!(fs::read(f.path("e1/report.json")).unwrap(), fs::read(f.path("e2/report.json")).unwrap());
}

#[test]
fn relative_paths_pair_through_the_manifest() {
    let f = Fixture::new(2);
    let in_dir = |args: &[&str]| bin().current_dir(f.dir.path()).args(args).env_remove("RANGEGAN_CONFIG").output().unwrap();
    let o = in_dir(&["--config", "run.toml", "train", "--sim", "data/sim/dataset.toml", "--real", "data/real/dataset.toml", "--run-dir", "run", "--max-steps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = in_dir(&["translate", "--dataset", "data/sim/dataset.toml", "--checkpoint", "run/checkpoints/last.ckpt", "--output", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = in_dir(&["--config", "run.toml", "evaluate", "--real", "data/real", "--generated", "out", "--manifest", "out/manifest.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
