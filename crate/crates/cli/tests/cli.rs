use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[data]
n_per_class = 20
n_classes = 3
input_dim = 6
test_per_class = 10

[partition]
n_clients = 3

[model]
bottom = [10, 8]
middle = [8]

[protocol]
rounds = 3
batch_size = 8
probe_samples = 16

[embed]
k = 4

[verify]
samples = 32
"#;

fn gradmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmark"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_verify_and_attack() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");

    let run = gradmark(&["run", "--config", path(&config), "--out", path(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for file in ["metrics.csv", "manifest.json", "key.txt", "model.ckpt"] {
        assert!(out.join(file).is_file(), "{file}");
    }

    let verify = gradmark(&[
        "verify",
        "--checkpoint",
        path(&out.join("model.ckpt")),
        "--key",
        path(&out.join("key.txt")),
        "--samples",
        "64",
    ]);
    assert!(verify.status.success());
    let report: serde_json::Value = serde_json::from_slice(&verify.stdout).unwrap();
    let wsr = report["wsr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&wsr));

    let attacked = dir.path().join("attacked");
    let attack = gradmark(&[
        "attack",
        "--checkpoint",
        path(&out.join("model.ckpt")),
        "--key",
        path(&out.join("key.txt")),
        "--attack",
        "int8",
        "--attack",
        "prune:0.5",
        "--config",
        path(&config),
        "--out",
        path(&attacked),
    ]);
    assert!(attack.status.success(), "{}", String::from_utf8_lossy(&attack.stderr));
    assert!(attacked.join("attacked-int8.ckpt").is_file());
    assert!(attacked.join("attacked-prune-0.5.ckpt").is_file());
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[embed]\nlambda = -0.5\nk = 0\n").unwrap();
    let out = gradmark(&["run", "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embed.lambda") && err.contains("embed.k"), "{err}");

    fs::write(&config, "seed = 1\nbogus = 2\n").unwrap();
    let out = gradmark(&["run", "--config", path(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn keygen_writes_a_readable_key() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("key.txt");
    let out = gradmark(&["keygen", "--d", "32", "--k", "8", "--seed", "5", "--out", path(&key)]);
    assert!(out.status.success());
    let first = fs::read(&key).unwrap();
    gradmark(&["keygen", "--d", "32", "--k", "8", "--seed", "5", "--out", path(&key)]);
    assert_eq!(fs::read(&key).unwrap(), first);
}

#[test]
fn presets_are_listed() {
    let out = gradmark(&["presets"]);
    assert!(out.status.success());
    let listed = String::from_utf8(out.stdout).unwrap();
    assert!(listed.lines().any(|l| l == "table2-desk"));
    assert_eq!(listed.lines().count(), 6);
}
