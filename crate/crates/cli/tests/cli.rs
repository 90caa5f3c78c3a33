use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reid(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// Small split dataset under `dir/ds/{train,test}`.
fn small_dataset(dir: &Path) {
    ok(&reid(
        &["synth", "--ids", "6", "--cams", "2", "--shots", "2", "--held-out", "1", "--seed", "3", "--out", "ds"],
        dir,
    ));
}

fn quick_train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", "ds/train", "--iterations", "4", "--batch-size", "8", "--out", out,
        "--set", "log_every=2", "--set", "translations=1",
    ];
    args.extend_from_slice(extra);
    reid(&args, dir)
}

#[test]
fn synth_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| reid(&["synth", "--ids", "50", "--cams", "2", "--shots", "4", "--seed", "7", "--out", out], dir.path());
    let a = run("a");
    ok(&a);
    assert!(stdout(&a).contains("wrote 400 images"));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 400);
    ok(&run("b"));
    for line in manifest.lines() {
        let name = line.split_whitespace().next().unwrap();
        let x = fs::read(dir.path().join("a").join(name)).unwrap();
        let y = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
}

#[test]
fn one_identity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = reid(&["synth", "--ids", "1", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("identities"));
}

#[test]
fn bad_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# test\nlambda = -1\nwhatever = 3\nbatch_size = 1\n").unwrap();
    let o = reid(&["--config", "run.cfg", "train", "--data", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("run.cfg:3: unknown key `whatever`"), "{err}");
    assert!(err.contains("lambda"), "{err}");
    assert!(err.contains("batch size"), "{err}");
}

#[test]
fn missing_data_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let o = reid(&["train", "--data", "missing", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
    assert!(!dir.path().join("run/model.ckpt").exists());
}

#[test]
fn train_eval_finetune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);

    let t = quick_train(d, "run", &[]);
    ok(&t);
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    for line in ["lambda = 0.01", "alpha = 0.5", "beta = 0.001", "frw_norm_target = 200.0"] {
        assert!(echo.contains(line), "config echo lacks `{line}`:\n{echo}");
    }
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,L,L_I,L_C,L_F,lr,seconds\n"));
    assert!(d.join("run/model.ckpt").exists());

    // same config and seed, same parameters
    ok(&quick_train(d, "run2", &[]));
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("run2/model.ckpt")).unwrap());

    // the echoed config reproduces the run
    ok(&reid(&["--config", "run/config.txt", "--out", "run3", "train"], d));
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("run3/model.ckpt")).unwrap());

    let eval = |out: &str| {
        reid(
            &["eval", "--checkpoint", "run/model.ckpt", "--data", "ds/test", "--splits", "1", "--seed", "3", "--out", out],
            d,
        )
    };
    let e = eval("ev");
    ok(&e);
    assert!(stdout(&e).contains("rank-1"));
    let cmc = fs::read_to_string(d.join("ev/cmc.csv")).unwrap();
    let mut lines = cmc.lines();
    assert_eq!(lines.next(), Some("rank,mean_rate,stddev"));
    let ranks: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ranks, (1..=20).collect::<Vec<_>>());
    ok(&eval("ev2"));
    assert_eq!(cmc, fs::read_to_string(d.join("ev2/cmc.csv")).unwrap());

    let f = reid(
        &["finetune", "--checkpoint", "run/model.ckpt", "--data", "ds/test", "--phase1-iters", "3", "--iterations", "2",
          "--batch-size", "4", "--out", "ft", "--set", "batch_size=4", "--set", "log_every=1"],
        d,
    );
    // `--batch-size` belongs to `train` only
    assert_eq!(f.status.code(), Some(1));
    let f = reid(
        &["finetune", "--checkpoint", "run/model.ckpt", "--data", "ds/test", "--phase1-iters", "3", "--iterations", "2",
          "--out", "ft", "--set", "batch_size=4", "--set", "log_every=1"],
        d,
    );
    ok(&f);
    assert!(stdout(&f).contains("(unchanged)"), "{}", stdout(&f));
    let log = fs::read_to_string(d.join("ft/finetune_log.csv")).unwrap();
    assert!(log.starts_with("phase,iteration,"));
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(phases.contains(&"1") && phases.contains(&"2"));
    assert!(phases.iter().all(|p| *p == "1" || *p == "2"));

    // zero head-only iterations: only phase-2 rows
    let f0 = reid(
        &["finetune", "--checkpoint", "run/model.ckpt", "--data", "ds/test", "--phase1-iters", "0", "--iterations", "2",
          "--out", "ft0", "--set", "batch_size=4"],
        d,
    );
    ok(&f0);
    let log = fs::read_to_string(d.join("ft0/finetune_log.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.starts_with("2,")), "{log}");

    // checkpoint trained on one preset cannot be fine-tuned under another
    let m = reid(
        &["finetune", "--checkpoint", "run/model.ckpt", "--data", "ds/test", "--set", "preset=paper", "--out", "ftp"],
        d,
    );
    assert_eq!(m.status.code(), Some(1));
    assert!(stderr(&m).contains("preset"));
}

#[test]
fn compare_with_zero_budget_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let o = reid(
        &["compare", "--data", "ds/train", "--test-data", "ds/test", "--budget", "0", "--out", "cmp", "--set", "splits=2"],
        d,
    );
    ok(&o);
    let csv = fs::read_to_string(d.join("cmp/compare.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,rank1,rank5,rank10,mean,stddev,sec_per_iter"));
    let modes: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["IC", "IV"]);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = reid(&["verify"], dir.path());
    ok(&o);
    let out = stdout(&o);
    for suite in ["gradients", "frw_fold", "center_update", "no_backprop", "cmc"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(suite)), "{out}");
    }
}
