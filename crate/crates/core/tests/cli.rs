use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdmtl::cli::RunInfo;
use kdmtl::data::{load_dataset, split_train_val};
use kdmtl::models::load_checkpoint;
use kdmtl::pipeline::evaluate;

const CONFIG: &str = r#"
name = "smoke"

[dataset]
val_fraction = 0.25
split_seed = 4

[dataset.generator]
name = "scale_clash"
n = 160
d = 4
seed = 2

[model]
widths = [8, 4]
taps = [1]

[[tasks]]
id = "cls"
lambda = 5.0

[[tasks]]
id = "reg"
lambda = 5.0

[train]
method = "kd"
epochs = 3
lr = 0.01
batch_size = 32
seed = 1

[sweep]
grid = [1.0, 5.0, 10.0, 20.0]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self, file: &str, text: &str) -> PathBuf {
        let p = self.path(file);
        fs::write(&p, text).unwrap();
        p
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn kdmtl(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_kdmtl"))
            .args(args)
            .current_dir(self.dir.path())
            .env("KDMTL_OUTPUT_ROOT", self.path("root"))
            .output()
            .unwrap()
    }

    /// Runs `cmd config --out <out>`.
    fn step(&self, cmd: &str, config: &Path) -> Output {
        self.kdmtl(&[cmd, config.to_str().unwrap(), "--out", self.out().to_str().unwrap()])
    }
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_method(method: &str) -> String {
    CONFIG.replace("method = \"kd\"", &format!("method = \"{method}\""))
}

#[test]
fn gen_prints_a_stable_hash() {
    let env = Env::new();
    let cfg = env.config("c.toml", CONFIG);
    let a = ok(&env.step("gen", &cfg));
    let b = ok(&env.step("gen", &cfg));
    assert_eq!(a, b);
    let hash = a.split_whitespace().next().unwrap();
    assert_eq!(hash.len(), 64);
    let ds = load_dataset(&env.out().join("data/dataset.kdds")).unwrap();
    assert_eq!(ds.hash(), hash);
    assert!(env.out().join("data/resolved_config.toml").is_file());

    let other = ok(&env.kdmtl(&["gen", cfg.to_str().unwrap(), "--seed", "3", "--out", "o3"]));
    assert_ne!(other.split_whitespace().next().unwrap(), hash);
}

#[test]
fn unknown_generator_names_the_valid_set() {
    let env = Env::new();
    let cfg = env.config("c.toml", &CONFIG.replace("name = \"scale_clash\"", "name = \"cifar\""));
    let o = env.step("gen", &cfg);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("scale_clash") && e.contains("disjoint_pair"), "{e}");
}

#[test]
fn unknown_keys_are_config_errors() {
    let env = Env::new();
    let cfg = env.config("c.toml", &CONFIG.replace("epochs = 3", "epochs = 3\nepoch = 4"));
    let o = env.step("train-mtl", &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
    assert_eq!(env.kdmtl(&["train-mtl", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_fails_before_training() {
    let env = Env::new();
    let cfg = env.config("c.toml", CONFIG);
    let o = env.step("train-single", &cfg);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("kdmtl gen"), "{}", stderr(&o));
    assert!(!env.out().exists());
}

#[test]
fn stale_dataset_is_rejected() {
    let env = Env::new();
    ok(&env.step("gen", &env.config("a.toml", CONFIG)));
    let moved = env.config("b.toml", &CONFIG.replace("seed = 2", "seed = 5"));
    let o = env.step("train-mtl", &moved);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("does not match"));
}

#[test]
fn teachers_then_students() {
    let env = Env::new();
    let cfg = env.config("c.toml", CONFIG);
    ok(&env.step("gen", &cfg));

    let kd_early = env.step("train-mtl", &cfg);
    assert_eq!(kd_early.status.code(), Some(3));
    let e = stderr(&kd_early);
    assert!(e.contains("train-single") && e.contains("cls"), "{e}");

    let uniform = env.config("u.toml", &with_method("uniform"));
    let line = ok(&env.step("train-mtl", &uniform));
    assert!(line.contains("cls=") && line.contains("reg="), "{line}");

    ok(&env.step("train-single", &cfg));
    let ckpts: Vec<PathBuf> = ["stl-cls", "stl-reg"]
        .iter()
        .map(|d| env.out().join(d).join("checkpoint.ckpt"))
        .collect();
    assert!(ckpts.iter().all(|p| p.is_file()));

    // Checkpoints evaluate to the metrics their run recorded.
    let ds = load_dataset(&env.out().join("data/dataset.kdds")).unwrap();
    let (_, val) = split_train_val(&ds, 0.25, 4).unwrap();
    for (ckpt, task) in ckpts.iter().zip(["cls", "reg"]) {
        let info: RunInfo =
            serde_json::from_str(&fs::read_to_string(ckpt.with_file_name("summary.json")).unwrap()).unwrap();
        let model = load_checkpoint(ckpt).unwrap();
        assert!(model.is_frozen());
        assert_eq!(evaluate(&model, &val).unwrap()[task], info.summary.tasks[task].final_metric);
    }

    ok(&env.step("train-mtl", &cfg));
    let kd = env.out().join("kd");
    for f in ["checkpoint.ckpt", "metrics.csv", "summary.json", "resolved_config.toml"] {
        assert!(kd.join(f).is_file(), "{f}");
    }
    let header = fs::read_to_string(kd.join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,task,task_loss,distill_loss_tap1,val_metric,weight\n"));

    // The snapshot reruns byte for byte.
    let before: Vec<Vec<u8>> = ["checkpoint.ckpt", "metrics.csv", "summary.json"]
        .iter()
        .map(|f| fs::read(kd.join(f)).unwrap())
        .collect();
    let snap = env.path("snap.toml");
    fs::copy(kd.join("resolved_config.toml"), &snap).unwrap();
    ok(&env.kdmtl(&["train-mtl", snap.to_str().unwrap()]));
    for (f, b) in ["checkpoint.ckpt", "metrics.csv", "summary.json"].iter().zip(before) {
        assert_eq!(fs::read(kd.join(f)).unwrap(), b, "{f}");
    }

    // Sweep: one row per grid point, rerun identical.
    let line = ok(&env.step("sweep", &cfg));
    assert!(line.contains("chosen trial") && line.contains("validation score"), "{line}");
    let table = fs::read_to_string(env.out().join("sweep/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert_eq!(table.lines().skip(1).filter(|l| l.ends_with(",1")).count(), 1);
    ok(&env.step("sweep", &cfg));
    assert_eq!(fs::read_to_string(env.out().join("sweep/sweep.csv")).unwrap(), table);

    // Report over stl x2, uniform and kd, plus a broken directory.
    fs::create_dir_all(env.path("broken")).unwrap();
    fs::write(env.path("broken/summary.json"), "{").unwrap();
    let dirs = ["stl-cls", "stl-reg", "uniform", "kd"].map(|d| env.out().join(d).display().to_string());
    let rep = env.path("rep");
    let mut args = vec!["report".to_string()];
    args.extend(dirs.iter().cloned());
    args.push(env.path("broken").display().to_string());
    args.extend(["--out".into(), rep.display().to_string()]);
    let o = env.kdmtl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let text = ok(&o);
    assert!(stderr(&o).contains("warning: skipping"), "{}", stderr(&o));
    assert_eq!(text.lines().count(), 5, "{text}");
    assert_eq!(fs::read_to_string(rep.join("report.txt")).unwrap(), text);

    let mut rd = csv::Reader::from_path(rep.join("report.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["run", "method", "cls", "reg", "cls_normalized", "reg_normalized", "average"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    let num = |s: &str| s.parse::<f64>().unwrap();
    let stl_cls = num(&rows[0][2]);
    let stl_reg = num(&rows[1][3]);
    for r in &rows[2..] {
        let (c, g) = (num(&r[2]), num(&r[3]));
        let nc = c / stl_cls;
        let ng = stl_reg / g;
        assert_eq!(num(&r[4]), nc);
        assert_eq!(num(&r[5]), ng);
        assert_eq!(num(&r[6]), (nc + ng) / 2.0);
    }
    let curves = fs::read_to_string(rep.join("curves.csv")).unwrap();
    assert!(curves.starts_with("run,method,epoch,task,task_loss,distill_loss,val_metric,weight\n"));
    // 3 epochs: 1 task per STL run, 2 per multi-task run.
    assert_eq!(curves.lines().count(), 1 + 3 * (1 + 1 + 2 + 2));
}

#[test]
fn report_fails_when_every_run_is_malformed() {
    let env = Env::new();
    fs::create_dir_all(env.path("a")).unwrap();
    let o = env.kdmtl(&["report", "a", "b"]);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(stderr(&o).matches("warning: skipping").count(), 2);
}

#[test]
fn divergence_has_its_own_exit_code() {
    let env = Env::new();
    let cfg = env.config("c.toml", &with_method("uniform").replace("lr = 0.01", "lr = 1e300"));
    ok(&env.step("gen", &cfg));
    let o = env.step("train-mtl", &cfg);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn output_root_comes_from_the_environment() {
    let env = Env::new();
    let cfg = env.config("c.toml", CONFIG);
    ok(&env.kdmtl(&["gen", cfg.to_str().unwrap()]));
    assert!(env.path("root/smoke/data/dataset.kdds").is_file());
}
