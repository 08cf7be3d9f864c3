use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn imn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new(extra: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(
            &config,
            format!("seed = 7\n{extra}\n[dataset]\nn_per_config = 6\n[train]\nbatch_size = 16\nmax_epochs = 2\n"),
        )
        .unwrap();
        Workspace {
            _dir: dir,
            config: config.display().to_string(),
            root,
        }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", &self.config];
        let out = self.root.display().to_string();
        full.extend(["--out", &out]);
        full.extend(args);
        imn(&full)
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
        stdout(&o)
    }
}

fn without_seconds(csv: &Path) -> Vec<String> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn default_config_is_printed_and_accepted() {
    let o = imn(&["--print-default-config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("n_per_config = 40000"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    fs::write(&path, &text).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{text}\nunknown_key = 1\n")).unwrap();
    let o = imn(&["--config", bad.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_key"));
}

#[test]
fn generation_is_reproducible() {
    let ws = Workspace::new("");
    let text = ws.ok(&["generate"]);
    assert!(text.contains("32 configurations"));
    assert!(text.contains("192 sequences written"));
    let first = fs::read(ws.path("dataset.imn")).unwrap();
    ws.ok(&["generate", "--output", &ws.path("again.imn")]);
    assert_eq!(first, fs::read(ws.path("again.imn")).unwrap());
    ws.ok(&["--seed", "8", "generate", "--output", &ws.path("other.imn")]);
    assert_ne!(first, fs::read(ws.path("other.imn")).unwrap());
}

#[test]
fn desk_scale_override_counts() {
    let ws = Workspace::new("");
    fs::write(ws.path("run.toml"), "[dataset]\np_grid = [0.1]\nr_grid = [10.0]\ngamma_grid = [1.0]\n").unwrap();
    let o = ws.run(&["generate", "--n-per-config", "1000", "--output", &ws.path("d.imn")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("1000 sequences written"));
}

#[test]
fn training_logs_weights_and_is_deterministic() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    let text = ws.ok(&["train", "--lambdas", "unequal", "--run-dir", &ws.path("a")]);
    assert!(text.contains("λ = (0.7, 0.85, 1)"));
    let log = fs::read_to_string(ws.path("a/run.log")).unwrap();
    assert!(log.contains("lambdas = (0.7, 0.85, 1)"));
    assert!(log.contains("manifest_hash = ") && log.contains("seed = 7"));
    assert!(log.contains("[train]"));
    ws.ok(&["train", "--lambdas", "unequal", "--run-dir", &ws.path("b")]);
    let name = "metrics_mtl_lambda-0.7-0.85-1.csv";
    let a = without_seconds(&ws.root.join("a").join(name));
    assert_eq!(a.len(), 1 + 3 * 2);
    assert_eq!(a, without_seconds(&ws.root.join("b").join(name)));
    let load = |run: &str| imn_core::model::Checkpoint::load(&ws.root.join(run).join("model.ckpt")).unwrap();
    let (a, mut b) = (load("a"), load("b"));
    assert_eq!(a.model, b.model);
    b.meta.train_seconds = a.meta.train_seconds;
    assert_eq!(a.meta, b.meta);

    let text = ws.ok(&["train", "--lambdas", "equal", "--run-dir", &ws.path("c")]);
    assert!(text.contains("λ = (1, 1, 1)"));
    assert!(ws.root.join("c/metrics_mtl_lambda-1-1-1.csv").exists());
    assert!(ws.root.join("c/metrics_mtl_lambda-1-1-1.svg").exists());
}

#[test]
fn eval_refuses_foreign_dataset() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    ws.ok(&["train", "--epochs", "1"]);
    let ckpt = ws.path("mtl/model.ckpt");
    let text = ws.ok(&["eval", "--checkpoint", &ckpt]);
    assert!(text.contains("test") && text.contains("nmse_p"));
    ws.ok(&["--seed", "99", "generate", "--output", &ws.path("other.imn")]);
    let o = ws.run(&["eval", "--checkpoint", &ckpt, "--data", &ws.path("other.imn")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
}

#[test]
fn bench_and_predict() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    for mode in ["mtl", "stl-p", "stl-r", "stl-gamma"] {
        ws.ok(&["train", "--mode", mode, "--epochs", "1"]);
    }
    let text = ws.ok(&[
        "bench",
        "--mtl",
        &ws.path("mtl/model.ckpt"),
        "--stl",
        &ws.path("stl-p/model.ckpt"),
        &ws.path("stl-r/model.ckpt"),
        &ws.path("stl-gamma/model.ckpt"),
    ]);
    for row in ["STL-P", "STL-R", "STL-GAMMA", "STL Total", "MTL", "Difference", "Reduction"] {
        assert!(text.contains(row), "missing {row}:\n{text}");
    }
    assert!(ws.root.join("bench.csv").exists());

    let text = ws.ok(&["predict", "--checkpoint", &ws.path("mtl/model.ckpt"), "--p", "0.1", "--r", "100", "--gamma", "10"]);
    assert!(text.contains("p̂ = ") && text.contains("R̂ = ") && text.contains("Γ̂ = "));
    assert_eq!(text.matches("P(Γ = ").count(), 4);

    let seq: String = (0..100).map(|i| format!("{},{}\n", (i as f64 * 0.3).cos(), (i as f64 * 0.3).sin())).collect();
    fs::write(ws.path("seq.csv"), seq).unwrap();
    ws.ok(&["predict", "--checkpoint", &ws.path("stl-r/model.ckpt"), "--input", &ws.path("seq.csv")]);
    fs::write(ws.path("short.csv"), "1,0\n0,1\n").unwrap();
    let o = ws.run(&["predict", "--checkpoint", &ws.path("mtl/model.ckpt"), "--input", &ws.path("short.csv")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exit_codes_classify_failures() {
    let ws = Workspace::new("");
    let o = ws.run(&["train", "--mode", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ws.run(&["train", "--lambdas", "0,0,0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ws.run(&["train"]);
    assert_eq!(o.status.code(), Some(3), "missing dataset is a data error");

    ws.ok(&["generate"]);
    let path = ws.path("dataset.imn");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    fs::write(&path, bytes).unwrap();
    let o = ws.run(&["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).to_lowercase().contains("crc"));
}

#[test]
fn numeric_blow_up_exits_with_code_four() {
    let ws = Workspace::new("");
    ws.ok(&["generate"]);
    fs::write(
        ws.path("run.toml"),
        "seed = 7\n[dataset]\nn_per_config = 6\n[train]\nbatch_size = 16\nmax_epochs = 3\nlearning_rate = 1e300\n",
    )
    .unwrap();
    let o = ws.run(&["train"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}
