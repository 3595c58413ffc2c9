use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn repcl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repcl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
preset = "paper-synthetic"
seeds = [0]
output = "out"

[universe]
d = 10
d_prime = 5
anchors = 8

[sequence]
length = 2
samples_per_task = 48

[network]
hidden = [8]

[train]
max_epochs = 2

[eval]
num_tasks = 1
subsample_sizes = [16]
repeats = 1
pool_size = 48
test_size = 48
finetune = { max_epochs = 3 }

[[strategies]]
name = "vanilla"
method = { kind = "vanilla" }

[[strategies]]
name = "adapter"
method = { kind = "vanilla" }
adapter = { mode = "binary_unit", tau = 0.95 }
"#;

#[test]
fn run_then_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();

    let v = repcl(&["validate", "tiny.toml"], dir.path());
    assert!(v.status.success());
    assert!(stdout(&v).starts_with("ok "));

    let r = repcl(&["run", "tiny.toml", "--seeds", "1,2", "--workers", "1"], dir.path());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for s in ["vanilla", "adapter"] {
        for seed in [1, 2] {
            assert!(dir.path().join(format!("out/{s}/seed-{seed}.json")).exists());
            assert!(dir.path().join(format!("out/{s}/seed-{seed}.csv")).exists());
        }
    }
    assert!(!dir.path().join("out/vanilla/seed-0.json").exists());

    let t = repcl(&["table", "out"], dir.path());
    assert!(t.status.success());
    assert!(stdout(&t).contains("adapter"));

    let p = repcl(&["plot", "rep_curve", "out", "--out", "plots"], dir.path());
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(fs::read_dir(dir.path().join("plots")).unwrap().count() > 0);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "preset = \"paper-synthetic\"\n[network]\nwidth = 3\n").unwrap();
    let v = repcl(&["validate", "bad.toml"], dir.path());
    assert!(!v.status.success());
    assert!(String::from_utf8_lossy(&v.stderr).contains("width"));

    let w = Command::new(env!("CARGO_BIN_EXE_repcl"))
        .args(["run", "bad.toml"])
        .current_dir(dir.path())
        .env("REPCL_WORKERS", "lots")
        .output()
        .unwrap();
    assert!(!w.status.success());

    let k = repcl(&["plot", "pie_chart", "."], dir.path());
    assert!(!k.status.success());
}
