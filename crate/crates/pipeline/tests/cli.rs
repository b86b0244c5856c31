use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn glyrl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyrl"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--output")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn glyrl")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = glyrl(out, args);
    assert!(
        o.status.success(),
        "glyrl {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_flow_on_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");

    // report before anything exists lists every section as missing
    ok(&run, &["report"]);
    let md = String::from_utf8(read(run.join("report/report.md"))).unwrap();
    assert!(md.contains("MISSING"));

    ok(&run, &["gen-data"]);
    for f in ["data/dataset.bin", "data/dataset_eval.bin", "data/cohort_summary.json", "data/manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("data/logs").read_dir().unwrap().count() >= 4);

    ok(&run, &["train"]);
    assert!(run.join("train/td3bc/policy.bin").is_file());
    assert!(run.join("train/td3bc/curve.csv").is_file());
    assert!(run.join("train/td3bc/checkpoints").read_dir().unwrap().count() >= 3);

    let eval = ok(&run, &["eval"]);
    assert!(eval.contains("ΔTIR"));
    ok(&run, &["eval", "--scenario", "unannounced"]);
    ok(&run, &["fqe"]);
    let pers = ok(&run, &["personalize"]);
    assert!(pers.contains("/2"));
    assert!(run.join("personalize/audit.json").is_file());
    ok(&run, &["analyze"]);
    assert!(run.join("analyze/correlation.csv").is_file());
    assert!(run.join("analyze/basal_vs_future.csv").is_file());

    ok(&run, &["report"]);
    let first = read(run.join("report/report.md"));
    ok(&run, &["report"]);
    assert_eq!(first, read(run.join("report/report.md")), "report regeneration must be idempotent");
    let md = String::from_utf8(first).unwrap();
    assert!(!md.contains("MISSING"), "{md}");
}

#[test]
fn gen_data_and_train_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        ok(run, &["gen-data"]);
        ok(run, &["train", "--algorithm", "bcq"]);
    }
    for f in ["data/dataset.bin", "data/dataset_eval.bin", "train/bcq/policy.bin", "train/bcq/curve.csv"] {
        assert!(read(a.join(f)) == read(b.join(f)), "{f} differs between identical runs");
    }
    // a different master seed changes the data
    let c = dir.path().join("c");
    ok(&c, &["gen-data", "--seed", "8"]);
    assert!(read(a.join("data/dataset.bin")) != read(c.join("data/dataset.bin")));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = glyrl(dir.path(), &["train", "--algorithm", "ppo"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ppo"));

    // training without a dataset names the missing input
    let o = glyrl(dir.path(), &["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "split = [0.5, 0.5]\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_glyrl")).arg("--config").arg(&bad).arg("config").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
}
