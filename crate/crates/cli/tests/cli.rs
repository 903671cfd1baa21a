use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salt_core::jet::{write_jets, Jet, Particle};
use salt_core::model::{ModelConfig, Variant};
use salt_core::profiler::{flops_estimate, with_commas};
use tempfile::TempDir;

fn salt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SALT_THREADS")
        .output()
        .expect("spawn salt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn first_line(o: &Output) -> String {
    stdout(o).lines().next().unwrap_or_default().to_string()
}

/// Small model and two-epoch schedule for end-to-end runs.
const TOY_CONFIG: &str = r#"
seed = 3

[model]
n = 16
proj = 2

[train]
phases = [{ batch_size = 32, max_epochs = 2 }]

[data]
pt_min = 1.0
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        salt(args, self.dir.path())
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.path(rel);
        fs::write(&p, text).unwrap();
        p
    }

    /// Generates 240 jets into `data/jets.jsonl` and writes the toy config.
    fn with_data(self) -> Self {
        ok(self.run(&["gen-data", "--n-jets", "240", "--seed", "11", "--out", "data"]));
        self.write("toy.toml", TOY_CONFIG);
        self
    }

    fn files(&self, rel: &str) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(self.path(rel))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    }
}

#[test]
fn flops_prints_the_reference_count() {
    let ws = Workspace::new();
    let o = ok(ws.run(&["flops", "--variant", "salt", "--n", "150", "--p", "4", "--filters", "1,3,5"]));
    assert_eq!(first_line(&o), "739,918");
    let o = ok(ws.run(&["flops", "--variant", "transformer", "--n", "150"]));
    assert_eq!(first_line(&o), "2,479,918");
}

#[test]
fn flops_writes_cost_and_scaling_tables() {
    let ws = Workspace::new();
    ok(ws.run(&["flops", "--n", "150", "--scan", "16,32", "--out", "cost"]));
    let cost = fs::read_to_string(ws.path("cost/cost.csv")).unwrap();
    assert!(cost.starts_with("name,variant,n,p,filters,"));
    assert!(cost.lines().nth(1).unwrap().starts_with("salt,salt,150,4,1;3;5,1,5,739918,3356,"));
    let scaling = fs::read_to_string(ws.path("cost/scaling.csv")).unwrap();
    assert_eq!(scaling.lines().count(), 3);
    assert!(scaling.lines().nth(1).unwrap().starts_with("salt,16,"));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let ws = Workspace::new();
    ws.write("cfg.toml", "[model]\nn = 32\nproj = 2\n");
    let expect = |n, proj| {
        let cfg = ModelConfig { proj, ..ModelConfig::new(Variant::Salt, n) };
        with_commas(flops_estimate(&cfg).unwrap())
    };
    let from_file = ok(ws.run(&["flops", "--config", "cfg.toml"]));
    assert_eq!(first_line(&from_file), expect(32, 2));
    let flag_wins = ok(ws.run(&["flops", "--config", "cfg.toml", "--n", "16"]));
    assert_eq!(first_line(&flag_wins), expect(16, 2));
    let defaults = ok(ws.run(&["flops"]));
    assert_eq!(first_line(&defaults), expect(150, 4));
}

#[test]
fn sorting_a_single_particle_file_leaves_it_unchanged() {
    let ws = Workspace::new();
    let jet = Jet::new(vec![Particle::new(3.5, 0.12, -0.07).unwrap()], 1);
    write_jets(ws.path("one.jsonl"), &[jet]).unwrap();
    ok(ws.run(&["sort", "--key", "kt", "--data", "one.jsonl", "--out", "sorted"]));
    let before = fs::read(ws.path("one.jsonl")).unwrap();
    let after = fs::read(ws.path("sorted/sorted.jsonl")).unwrap();
    assert_eq!(before, after);
    assert_eq!(ws.files("sorted"), ["sorted.jsonl"]);
}

#[test]
fn sort_with_capacity_also_writes_padded_tensor() {
    let ws = Workspace::new().with_data();
    ok(ws.run(&["sort", "--sort", "pt", "--n", "8", "--data", "data/jets.jsonl", "--out", "s"]));
    assert_eq!(ws.files("s"), ["sorted.bin", "sorted.jsonl"]);
    let t: salt_core::Tensor<f32> = salt_core::tensor::read_tensor(ws.path("s/sorted.bin")).unwrap();
    assert_eq!(t.shape(), &[240, 8, 3]);
}

#[test]
fn gen_data_is_reproducible_and_honours_class_count() {
    let ws = Workspace::new();
    for out in ["a", "b"] {
        ok(ws.run(&["gen-data", "--n-jets", "50", "--classes", "4", "--seed", "9", "--out", out]));
    }
    let a = fs::read(ws.path("a/jets.jsonl")).unwrap();
    assert_eq!(a, fs::read(ws.path("b/jets.jsonl")).unwrap());
    let jets = salt_core::jet::read_jets(ws.path("a/jets.jsonl")).unwrap();
    assert_eq!(jets.len(), 50);
    assert!(jets.iter().all(|j| j.label < 4));
    assert!(jets.iter().any(|j| j.label == 3));
}

#[test]
fn training_twice_with_one_seed_gives_identical_outputs() {
    let ws = Workspace::new().with_data();
    for out in ["run1", "run2"] {
        ok(ws.run(&["train", "--config", "toy.toml", "--seed", "7", "--data", "data/jets.jsonl", "--out", out]));
    }
    assert_eq!(ws.files("run1"), ["history.csv", "model.ckpt", "scaler.json", "train.json"]);
    for f in ["history.csv", "model.ckpt", "scaler.json", "train.json"] {
        let a = fs::read(ws.path(&format!("run1/{f}"))).unwrap();
        let b = fs::read(ws.path(&format!("run2/{f}"))).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    let history = fs::read_to_string(ws.path("run1/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("run1/train.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["model"]["classes"], 2);
    assert_eq!(summary["model"]["n"], 16);
}

#[test]
fn epochs_and_batch_flags_replace_the_schedule() {
    let ws = Workspace::new().with_data();
    ok(ws.run(&[
        "train", "--config", "toy.toml", "--epochs", "3", "--batch", "64", "--data", "data/jets.jsonl", "--out", "r",
    ]));
    let history = fs::read_to_string(ws.path("r/history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() <= 3);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("64")));
}

#[test]
fn evaluation_commands_write_their_tables() {
    let ws = Workspace::new().with_data();
    ok(ws.run(&["train", "--config", "toy.toml", "--data", "data/jets.jsonl", "--out", "m"]));
    ok(ws.run(&["eval", "--model", "m/model.ckpt", "--data", "data/jets.jsonl", "--out", "e"]));
    let scores = fs::read_to_string(ws.path("e/scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("jet_id,label,score_0,score_1"));
    assert_eq!(scores.lines().count(), 241);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("e/report.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(ws.run(&["binned-eval", "--model", "m/model.ckpt", "--data", "data/jets.jsonl", "--bins", "0,10,20,40", "--out", "b"]));
    let bins = fs::read_to_string(ws.path("b/bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 4);

    ok(ws.run(&["dump-attn", "--model", "m/model.ckpt", "--data", "data/jets.jsonl", "--jet", "5", "--out", "a"]));
    let files = ws.files("a");
    assert_eq!(files.len(), 4 * 3);
    assert!(files.contains(&"attn_h0_softmax.csv".to_string()));
}

#[test]
fn commands_write_only_inside_out() {
    let ws = Workspace::new().with_data();
    let before = ws.files(".");
    ok(ws.run(&["train", "--config", "toy.toml", "--data", "data/jets.jsonl", "--out", "only"]));
    ok(ws.run(&["eval", "--model", "only/model.ckpt", "--data", "data/jets.jsonl", "--out", "only"]));
    ok(ws.run(&["flops", "--n", "16"]));
    let mut expected = before;
    expected.push("only".to_string());
    expected.sort();
    assert_eq!(ws.files("."), expected);
    assert_eq!(ws.files("data"), ["jets.jsonl"]);
}

#[test]
fn bench_reports_latency() {
    let ws = Workspace::new();
    ok(ws.run(&["bench", "--n", "16", "--batch", "4", "--reps", "30", "--out", "lat"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("lat/latency.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "salt");
    assert_eq!(report["dtype"], "f32");
    assert_eq!(report["reps"], 30);
    assert!(report["mean_us"].as_f64().unwrap() > 0.0);
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_flag() {
    let ws = Workspace::new();
    let o = ws.run(&["flops", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&[]).status.code(), Some(1));
    assert_eq!(ws.run(&["flops", "--variant", "mamba"]).status.code(), Some(1));
    assert_eq!(ws.run(&["gen-data"]).status.code(), Some(1), "missing --out");
    ws.write("bad.toml", "[model]\nwidth = 3\n");
    let o = ws.run(&["flops", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"));
    let o = Command::new(env!("CARGO_BIN_EXE_salt"))
        .args(["flops"])
        .current_dir(ws.path("."))
        .env("SALT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "flops does not spawn workers");
}

#[test]
fn help_and_version_succeed() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
    assert_eq!(ws.run(&["--version"]).status.code(), Some(0));
}

#[test]
fn data_and_model_errors_exit_with_two() {
    let ws = Workspace::new().with_data();
    let o = ws.run(&["train", "--data", "missing.jsonl", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    ws.write("broken.jsonl", "{\"label\": 0, \"particles\": [[1.0, 0.0, 0.0]]}\nnot json\n");
    let o = ws.run(&["sort", "--data", "broken.jsonl", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = ws.run(&["flops", "--n", "2", "--p", "4"]);
    assert_eq!(o.status.code(), Some(2), "more partitions than tokens");
    let o = ws.run(&["eval", "--model", "data/jets.jsonl", "--data", "data/jets.jsonl", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2), "not a checkpoint");
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let ws = Workspace::new().with_data();
    let o = Command::new(env!("CARGO_BIN_EXE_salt"))
        .args(["train", "--config", "toy.toml", "--data", "data/jets.jsonl", "--out", "t"])
        .current_dir(ws.path("."))
        .env("SALT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SALT_THREADS"));
}
