use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_rpr");

const BLOBS: &str = r#"
seed = 3

[data]
source = "synth_blobs"
classes = 3
per_class = 40
test_per_class = 20
dim = 4
batch_size = 16
pad = 0

[model]
layers = ["linear(4,8)", "batchnorm2d(8)", "relu", "linear(8,8)", "relu", "linear(8,3)"]

[baseline]
epochs = 3
lr = 0.01
"#;

const SHORT_PLAN: &str = r#"
initial_ff = 0.9
max_initial_epochs = 1
ff_ladder = [1.0]
epochs_per_rung = 2
lr_drop_after = 1
final_epochs_per_lr = 1
final_lr_divisors = [1.0]
"#;

fn rpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_rpr_config(dir: &Path, name: &str, family: &str, checkpoint: &str) {
    let text = format!(
        "{BLOBS}\n[rpr]\ninit = \"checkpoint\"\ncheckpoint = \"{checkpoint}\"\n{SHORT_PLAN}\n[rpr.levels]\nfamily = \"{family}\"\n"
    );
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn baseline_then_rpr_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("blobs.toml"), BLOBS).unwrap();

    let out = rpr(dir, &["train-baseline", "--config", "blobs.toml"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("test_acc="));
    let run = dir.join("runs/blobs");
    for f in ["model.ckpt", "metrics.csv", "timing.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,phase,ff,lr,train_loss,train_acc,val_loss,val_acc,wall_time_s\n"));
    assert_eq!(metrics.lines().count(), 4);

    write_rpr_config(dir, "q.toml", "ternary", "runs/blobs/model.ckpt");
    let out = rpr(dir, &["quantize-rpr", "--config", "q.toml", "--out", "q"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("fraction_in_levels=1\n"), "{text}");
    assert!(text.contains("epochs=4\n"), "{text}");
    assert!(dir.join("q/state.ckpt").exists());

    let out = rpr(dir, &["eval", "--config", "q.toml", "--checkpoint", "q/model.ckpt", "--csv", "eval.csv"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("accuracy="));
    assert!(fs::read_to_string(dir.join("eval.csv")).unwrap().starts_with("split,loss,accuracy\n"));

    let again = rpr(dir, &["eval", "--config", "q.toml", "--checkpoint", "q/model.ckpt"]);
    assert_eq!(stdout(&again), stdout(&out));

    let out = rpr(dir, &["inspect-checkpoint", "--checkpoint", "q/model.ckpt"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("levels: ternary"), "{}", stdout(&out));

    // a ternary checkpoint cannot seed a binary run
    write_rpr_config(dir, "b.toml", "binary", "q/model.ckpt");
    let out = rpr(dir, &["quantize-rpr", "--config", "b.toml", "--out", "b"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_override_reaches_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), BLOBS).unwrap();
    let out = rpr(tmp.path(), &["train-baseline", "--config", "c.toml", "--seed", "99", "--out", "r"]);
    assert_eq!(code(&out), 0);
    let snapshot = fs::read_to_string(tmp.path().join("r/config.toml")).unwrap();
    assert!(snapshot.contains("seed = 99"));
}

#[test]
fn nondeterministic_mode_keeps_wall_time_in_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), BLOBS).unwrap();
    let out = rpr(tmp.path(), &["train-baseline", "--config", "c.toml", "--deterministic", "off", "--out", "r"]);
    assert_eq!(code(&out), 0);
    assert!(!tmp.path().join("r/timing.csv").exists());
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&rpr(dir, &["train-baseline", "--config", "missing.toml"])), 2);

    fs::write(dir.join("typo.toml"), "seed = 1\n[rpr]\npatiance = 4\n").unwrap();
    assert_eq!(code(&rpr(dir, &["oracle-compare", "--config", "typo.toml"])), 2);

    fs::write(dir.join("ladder.toml"), "seed = 1\n[rpr]\nff_ladder = [0.99, 0.95]\n").unwrap();
    assert_eq!(code(&rpr(dir, &["oracle-compare", "--config", "ladder.toml"])), 2);

    fs::write(dir.join("nodata.toml"), "seed = 1\n[data]\ndir = \"nowhere\"\n").unwrap();
    assert_eq!(code(&rpr(dir, &["train-baseline", "--config", "nodata.toml", "--out", "nd"])), 2);
    assert!(!dir.join("nd/model.ckpt").exists());

    fs::write(dir.join("big.toml"), "seed = 1\n[oracle]\ndim = 15\n").unwrap();
    assert_eq!(code(&rpr(dir, &["oracle-compare", "--config", "big.toml"])), 2);

    // clap's own usage error
    assert_eq!(code(&rpr(dir, &["no-such-command"])), 2);
}

#[test]
fn checkpoint_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.ckpt"), b"RPRCKPT1 but not really").unwrap();
    let out = rpr(dir, &["inspect-checkpoint", "--checkpoint", "bad.ckpt"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
    assert_eq!(code(&rpr(dir, &["inspect-checkpoint", "--checkpoint", "absent.ckpt"])), 3);
}

#[test]
fn oracle_compare_prints_the_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/oracle_tiny.toml");
    let out = rpr(tmp.path(), &["oracle-compare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let ratio: f64 = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("ratio="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio >= 1.0 - 1e-12);
}

#[test]
fn linear_model_separates_wide_blobs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seed = 7\n[data]\nsource = \"synth_blobs\"\ndim = 16\npad = 0\nbatch_size = 16\n\
                [model]\nlayers = [\"linear(16,3)\"]\n[baseline]\nepochs = 20\nlr = 0.01\n";
    fs::write(tmp.path().join("lin.toml"), text).unwrap();
    let out = rpr(tmp.path(), &["train-baseline", "--config", "lin.toml"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("train_acc=1\n"), "{}", stdout(&out));
    let first = fs::read(tmp.path().join("runs/lin/metrics.csv")).unwrap();
    let _ = fs::remove_dir_all(tmp.path().join("runs"));
    rpr(tmp.path(), &["train-baseline", "--config", "lin.toml"]);
    assert_eq!(fs::read(tmp.path().join("runs/lin/metrics.csv")).unwrap(), first);
}
