use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reldl(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reldl"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .expect("run reldl")
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = reldl(ws, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_graph(ws: &Path) {
    ok(ws, &["--seed", "3", "generate", "sbm-graph", "--nodes", "24", "--features", "6", "--hidden", "4"]);
}

#[test]
fn forward_without_model_is_a_missing_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reldl(dir.path(), &["forward"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("reldl: MissingInput"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn bad_generator_params_exit_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reldl(dir.path(), &["generate", "sbm-graph", "--p-intra", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidParams"));
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_graph(a.path());
    small_graph(b.path());
    for f in ["model.json", "data/samples.csv", "data/adj.csv", "data/labels.csv", "data/train_select.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn emit_sql_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    small_graph(dir.path());
    for dialect in ["embedded-default", "strict-sql92"] {
        ok(dir.path(), &["emit-sql", "--dialect", dialect]);
        let first: Vec<Vec<u8>> =
            ["schema", "data", "forward"].iter().map(|k| fs::read(dir.path().join(format!("sql/gcn_{k}.sql"))).unwrap()).collect();
        ok(dir.path(), &["emit-sql", "--dialect", dialect]);
        for (k, bytes) in ["schema", "data", "forward"].iter().zip(&first) {
            assert_eq!(&fs::read(dir.path().join(format!("sql/gcn_{k}.sql"))).unwrap(), bytes, "{dialect} {k}");
        }
    }
}

#[test]
fn train_then_forward_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    small_graph(dir.path());
    let out = ok(dir.path(), &["train", "--epochs", "20"]);
    assert!(out.starts_with("20 epochs"), "{out}");
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 21);
    let out = ok(dir.path(), &["forward"]);
    assert!(out.contains("test accuracy"), "{out}");
    let preds = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("row,prediction"));
    assert_eq!(preds.lines().count(), 25);
}

#[test]
fn toy_images_train_with_minibatches() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "toy-images", "--images", "8", "--extent", "6"]);
    let out = ok(dir.path(), &["train", "--epochs", "2", "--batch-size", "3"]);
    assert!(out.starts_with("2 epochs"), "{out}");
    assert!(dir.path().join("params").is_dir());
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--seed", "5", "verify", "--trials", "5"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out.contains("sql gcn strict-sql92: PASS"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("reports/verify.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().len() > 10);
}

#[test]
fn gradcheck_builtin_gcn() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--model", "gcn", "gradcheck"]);
    assert!(out.contains("gcn/gc1_w: PASS"), "{out}");
    assert!(dir.path().join("reports/gradcheck.json").is_file());
}

#[test]
fn builtin_models_need_no_workspace_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--model", "toy-cnn", "emit-sql"]);
    let forward = fs::read_to_string(dir.path().join("sql/cnn_forward.sql")).unwrap();
    assert!(forward.contains("CREATE TABLE conv1_unbiased AS"));
    let out = ok(dir.path(), &["--model", "gcn", "forward"]);
    assert!(out.contains("test accuracy"), "{out}");
}

#[test]
fn verify_builtin_cnn_seed_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = reldl(dir.path(), &["--model", "toy-cnn", "--seed", "0", "verify", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}
