use std::path::Path;
use std::process::{Command, Output};

fn isag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isag")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn weight_on_unguided_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = isag(&["--out", path(dir.path()), "sample", "--mode", "unguided", "--w", "0.7"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--w"), "{}", stderr(&o));
}

#[test]
fn out_of_range_p_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = isag(&["--out", path(dir.path()), "sample", "--mode", "insitu", "--p", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_config_key_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n\n[guidance]\nmode = \"insitu\"\np = 1.5\n").unwrap();
    let o = isag(&["--config", path(&cfg), "--out", path(dir.path()), "train"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("guidance.p") && e.contains("line 5"), "{e}");
}

#[test]
fn autoguide_without_weak_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = isag(&["--out", path(dir.path()), "sample", "--mode", "autoguide", "--w", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_eval_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = isag(&["--out", path(dir.path()), "eval", path(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));
}

#[test]
fn fig2_without_checkpoints_needs_train() {
    let dir = tempfile::tempdir().unwrap();
    let o = isag(&["--out", path(dir.path()), "fig2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--train"));
}

#[test]
fn sample_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = isag(&["--out", path(dir.path()), "sample", "--mode", "cfg", "--w", "4"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("final.ckpt"), "{}", stderr(&o));
}

#[test]
fn train_then_sample_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[train]\nbatch_size = 32\nsteps = 300\nweak_step = 30\nhidden = [16, 16, 16]\n\n\
         [sampler]\nsteps = 8\nsamples_per_class = 64\n\n[metrics]\nreference_per_class = 2000\n",
    )
    .unwrap();
    let base = ["--config", path(&cfg), "--out", path(dir.path())];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        let o = isag(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["train"]);
    for f in ["final.ckpt", "weak.ckpt", "loss.csv", "resolved_config.train.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let weak = dir.path().join("weak.ckpt");
    run(&["sample", "--mode", "autoguide", "--w", "1.5", "--weak-ckpt", path(&weak), "--class", "1", "--svg"]);
    let samples = dir.path().join("samples.csv");
    let text = std::fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 65);
    assert!(text.lines().skip(1).all(|l| l.starts_with("1,")));
    let o = run(&["eval", path(&samples)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("outlier_rate"));
    assert!(dir.path().join("metrics.csv").exists());

    // The resolved config reproduces the sample file on its own.
    let resolved = dir.path().join("resolved_config.sample.toml");
    let again = tempfile::tempdir().unwrap();
    std::fs::copy(dir.path().join("final.ckpt"), again.path().join("final.ckpt")).unwrap();
    let o = isag(&["--config", path(&resolved), "--out", path(again.path()), "sample", "--class", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&samples).unwrap(), std::fs::read(again.path().join("samples.csv")).unwrap());
}

#[test]
fn oracle_check_passes() {
    let o = isag(&["oracle-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.matches("PASS").count(), 8, "{out}");
}
