use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config() -> Value {
    json!({
        "seed": 0,
        "synth": { "segment_len": 32, "token_len": 8, "stream_len": 60, "init_pool": 10, "heart_cycles": 0.5 },
        "data": { "source_subjects": 3, "target_subjects": 2, "source_stream_len": 30 },
        "model": { "hidden": 8, "depth": 1 },
        "pretrain": { "epochs": 2, "batch_size": 16 },
        "adapt": {
            "reps_per_batch": 2,
            "composition": { "n_unlabel": 6, "n_label": 2 },
            "capacity": { "unlabeled": 16, "labeled": 8 }
        },
        "grid": { "frequencies": [null, 10], "init_label_counts": [0], "subjects": 2, "seeds": [0] }
    })
}

struct Workdir {
    dir: tempfile::TempDir,
}

impl Workdir {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_otta"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "otta {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    /// Source and target data plus a checkpoint.
    fn prepared(config: &Value) -> Self {
        let w = Self::new(config);
        w.ok(&["synth", "--domain", "source", "--out", "source.csv"]);
        w.ok(&["synth", "--out", "target.csv"]);
        w.ok(&["pretrain", "--data", "source.csv", "--out", "model.json"]);
        w
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn synth_writes_one_row_per_event() {
    let mut cfg = small_config();
    cfg["synth"]["stream_len"] = 100.into();
    cfg["synth"]["init_pool"] = 0.into();
    let w = Workdir::new(&cfg);
    w.ok(&["synth", "--subjects", "2", "--out", "t.csv"]);
    assert_eq!(read(&w.path("t.csv")).lines().count(), 201);
}

#[test]
fn seed_flag_changes_the_data() {
    let w = Workdir::new(&small_config());
    w.ok(&["synth", "--out", "a.csv"]);
    w.ok(&["synth", "--out", "b.csv"]);
    w.ok(&["synth", "--seed", "9", "--out", "c.csv"]);
    assert_eq!(read(&w.path("a.csv")), read(&w.path("b.csv")));
    assert_ne!(read(&w.path("a.csv")), read(&w.path("c.csv")));
}

#[test]
fn missing_config_is_an_input_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_otta"))
        .args(["synth", "--out", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn bad_config_names_the_field() {
    let mut cfg = small_config();
    cfg["adapt"]["reps_per_batch"] = 0.into();
    let out = Workdir::new(&cfg).run(&["synth", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("adapt.reps_per_batch"),
        "{}",
        stderr(&out)
    );

    let mut cfg = small_config();
    cfg["adapt"]["lr"] = 0.1.into();
    let out = Workdir::new(&cfg).run(&["synth", "--out", "x.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lr"), "{}", stderr(&out));
}

#[test]
fn unknown_strategy_is_an_input_error() {
    let mut cfg = small_config();
    cfg["adapt"]["strategy"] = "nope".into();
    let w = Workdir::prepared(&small_config());
    std::fs::write(w.path("config.json"), cfg.to_string()).unwrap();
    let out = w.run(&[
        "sweep",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope"), "{}", stderr(&out));
}

#[test]
fn missing_data_is_an_input_error() {
    let w = Workdir::new(&small_config());
    let out = w.run(&["pretrain", "--data", "absent.csv", "--out", "m.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent.csv"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_is_an_input_error() {
    let w = Workdir::prepared(&small_config());
    std::fs::write(w.path("model.json"), "{\"params\": 1}").unwrap();
    let out = w.run(&[
        "baseline",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn divergent_pretraining_exits_with_training_code() {
    let mut cfg = small_config();
    cfg["pretrain"]["lr_sl"] = 1e6.into();
    let w = Workdir::new(&cfg);
    w.ok(&["synth", "--domain", "source", "--out", "source.csv"]);
    let out = w.run(&["pretrain", "--data", "source.csv", "--out", "model.json"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
    assert!(!w.path("model.json").exists());
}

#[test]
fn geometry_mismatch_reports_both_shapes() {
    let w = Workdir::prepared(&small_config());
    let mut wide = small_config();
    wide["synth"]["segment_len"] = 64.into();
    std::fs::write(w.path("config.json"), wide.to_string()).unwrap();
    w.ok(&["synth", "--out", "wide.csv"]);
    std::fs::write(w.path("config.json"), small_config().to_string()).unwrap();
    let out = w.run(&[
        "sweep",
        "--data",
        "wide.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("64") && err.contains("32"), "{err}");
}

#[test]
fn sweep_writes_reports_and_logs() {
    let w = Workdir::prepared(&small_config());
    let out = w.ok(&[
        "sweep",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
        "--logs",
        "logs",
    ]);
    let csv = read(&w.path("r/report.csv"));
    // 2 cells and the baseline, 4 metric rows each
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(read(&w.path("r/report.txt")).contains("No adaptation"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("No adaptation"));
    let logs = std::fs::read_dir(w.path("logs")).unwrap().count();
    assert_eq!(logs, 2 * 2);
    // F=10 on 60 events leaves 54 scored predictions per subject
    let f10 = read(&w.path("logs/f10_n0_s0_target-000.jsonl"));
    assert_eq!(f10.lines().count(), 54);
}

#[test]
fn baseline_writes_reports() {
    let w = Workdir::prepared(&small_config());
    w.ok(&[
        "baseline",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
        "--logs",
        "logs",
    ]);
    let csv = read(&w.path("r/baseline.csv"));
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("baseline,")));
    assert_eq!(
        read(&w.path("logs/baseline_target-001.jsonl"))
            .lines()
            .count(),
        60
    );
}

#[test]
fn failed_cells_still_write_the_report() {
    let mut cfg = small_config();
    cfg["grid"]["init_label_counts"] = json!([0, 20]);
    let w = Workdir::prepared(&cfg);
    let out = w.run(&[
        "sweep",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let csv = read(&w.path("r/report.csv"));
    assert!(
        csv.lines()
            .any(|l| l.contains(",20,") && l.contains("ERROR")),
        "{csv}"
    );
    assert!(
        csv.lines()
            .any(|l| l.starts_with("10,0,mae,sbp,") && !l.contains("ERROR")),
        "{csv}"
    );
}

#[test]
fn too_many_subjects_is_an_input_error() {
    let w = Workdir::prepared(&small_config());
    let out = w.run(&[
        "sweep",
        "--subjects",
        "5",
        "--data",
        "target.csv",
        "--checkpoint",
        "model.json",
        "--out",
        "r",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
