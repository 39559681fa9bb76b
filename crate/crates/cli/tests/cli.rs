//! Runs the `ltcl` binary on small configurations.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
name=small
n_tasks=3
classes_per_task=2
base_count=60
imbalance_ratio=0.1
ordering=shuffled
dim=4
separation=3
pool_per_class=60
test_per_class=20
hidden=32
buffer_capacity=12
buffer_policy=uncertainty
candidate_order=max_mi
mc_passes=3
dropout_rate=0.2
tau1=0.1
tau2=2
scale_s=10
alpha_kd=0.5
beta_proto=0.1
epochs=2
batch_size=16
lr=0.03
seed=4
";

fn ltcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltcl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    dir
}

#[test]
fn run_writes_every_artifact() {
    let dir = setup();
    let out = ltcl(
        &[
            "run",
            "--config",
            "small.conf",
            "--out",
            "runs",
            "--dump-scores",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = dir.path().join("runs/small");
    for f in [
        "summary.json",
        "metrics.csv",
        "losses.csv",
        "buffer_audit.csv",
        "weight_norms.csv",
        "config.txt",
        "scores.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("class-il ACC"), "{stdout}");
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = setup();
    assert!(ltcl(
        &["run", "--config", "small.conf", "--out", "a", "--seed", "4"],
        dir.path()
    )
    .status
    .success());
    assert!(ltcl(
        &["run", "--config", "small.conf", "--out", "b", "--seed", "5"],
        dir.path()
    )
    .status
    .success());
    let read =
        |d: &str| std::fs::read_to_string(dir.path().join(d).join("small/summary.json")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert!(read("b").contains("\"seed\": 5"));
}

#[test]
fn score_prints_one_line_per_training_sample() {
    let dir = setup();
    let out = ltcl(&["score", "--config", "small.conf"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("task_id,sample_index,H,expected_H,MI"));
    // Task sizes 60, 18, 6.
    assert_eq!(lines.count(), 84);
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let out = ltcl(&["gradcheck", "--configs", "4"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("16 of 16 checks"), "{text}");
}

#[test]
fn sweep_runs_the_grid() {
    let dir = setup();
    std::fs::write(
        dir.path().join("g.grid"),
        "head = linear | cosine\nbuffer_policy = none | vanilla | uncertainty\n",
    )
    .unwrap();
    let out = ltcl(
        &[
            "sweep",
            "--config",
            "small.conf",
            "--grid",
            "g.grid",
            "--out",
            "sw",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let runs = std::fs::read_dir(dir.path().join("sw")).unwrap().count();
    assert_eq!(runs, 6);
}

#[test]
fn bad_config_is_reported() {
    let dir = setup();
    std::fs::write(
        dir.path().join("bad.conf"),
        SMALL.replace("lr=0.03", "lr=-1"),
    )
    .unwrap();
    let out = ltcl(&["run", "--config", "bad.conf"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    std::fs::write(
        dir.path().join("missing.conf"),
        SMALL.replace("seed=4\n", ""),
    )
    .unwrap();
    let out = ltcl(&["run", "--config", "missing.conf"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}
