use std::path::Path;
use std::process::{Command, Output};

fn apts(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apts"))
        .args(args)
        .current_dir(cwd)
        .env_remove("APTS_THREADS")
        .output()
        .expect("binary runs")
}

fn without_wall_column(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0)
        .collect::<Vec<_>>()
        .join("\n")
}

const SMALL: &str = "\
# tiny synthetic run
train_samples = 200
val_samples = 50
synth_dim = 5
layers = 5,8,4
max_epochs = 3
";

#[test]
fn train_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), SMALL).unwrap();
    let out = apts(&["train", "--config", "run.conf", "--output", "m.csv", "--subdomains", "4"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,iteration,train_loss,val_accuracy,delta,rho,grad_norm,sync_count,cumulative_wall_seconds"
    );
    assert_eq!(lines.count(), 3);
    let meta = std::fs::read_to_string(dir.path().join("m.csv.meta")).unwrap();
    assert!(meta.contains("subdomains = 4"));
    assert!(meta.contains("output = m.csv"));
}

#[test]
fn repeated_runs_match_except_for_timing() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), SMALL).unwrap();
    for (name, threads) in [("a.csv", "8"), ("b.csv", "1")] {
        let out = Command::new(env!("CARGO_BIN_EXE_apts"))
            .args(["train", "--config", "run.conf", "--subdomains=8", "--output", name])
            .current_dir(dir.path())
            .env("APTS_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(without_wall_column(&dir.path().join("a.csv")), without_wall_column(&dir.path().join("b.csv")));
}

#[test]
fn unknown_keys_fail_with_their_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "learning_rate = 0.1\n").unwrap();
    let out = apts(&["train", "--config", "bad.conf"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = apts(&["train", "--momentum", "0.9"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}

#[test]
fn fixtures_feed_the_mnist_loader() {
    let dir = tempfile::tempdir().unwrap();
    let out = apts(&["gen-fixtures", "--dir", "fx", "--train", "100", "--test", "30"], dir.path());
    assert!(out.status.success());
    let out = apts(
        &[
            "train", "--dataset", "mnist", "--mnist-dir", "fx", "--layers", "784,8,10", "--max-epochs", "2",
            "--output", "fx.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("fx.csv")).unwrap().lines().count(), 3);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = apts(&["selftest"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}
