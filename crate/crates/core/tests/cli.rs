//! End-to-end runs of the `fcn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcn::io::read_checkpoint;
use fcn::{Net, NetSpec};

fn fcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FCN_RUN_DIR")
        .output()
        .unwrap()
}

fn zoo(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../zoo")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = fcn(
        &[
            "gen-data",
            "--count",
            "6",
            "--val-count",
            "3",
            "--size",
            "32",
            "--seed",
            "3",
            "--out",
            data.to_str().unwrap(),
        ],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn help_lists_subcommands_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcn(&["--help"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in [
        "gen-data",
        "train",
        "eval",
        "rf",
        "iu-bound",
        "stitch-check",
        "predict",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from:\n{text}");
    }
    let o = fcn(&["train", "--help"], dir.path());
    let text = stdout(&o);
    for flag in [
        "--net",
        "--data",
        "--seed",
        "--epochs",
        "--lr",
        "--batch",
        "--sample-p",
        "--init",
        "--lr-drop",
        "--f64",
    ] {
        assert!(text.contains(flag), "{flag} missing from:\n{text}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fcn(&["rf", "--bogus"], dir.path()).status.code(), Some(1));
}

#[test]
fn rf_table_ends_with_total_stride() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcn(&["rf", "--net", &zoo("fcn-coarse.net")], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().last().unwrap(), "total stride 8");
    assert!(text.contains("pool3"));
    let o = fcn(&["rf", "--net", &zoo("fcn-skip2.net"), "--csv"], dir.path());
    assert!(stdout(&o).starts_with("node,kind,rf,stride"));
}

#[test]
fn missing_net_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcn(&["rf", "--net", "nope.net"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let val = data.join("val");
    let o = fcn(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--pred",
            val.to_str().unwrap(),
            "--classes",
            "6",
            "--csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let row = text.lines().nth(1).unwrap();
    assert!(
        row.split(',').all(|v| v.parse::<f64>().unwrap() == 1.0),
        "{text}"
    );
}

#[test]
fn iu_bound_is_exact_at_one_and_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let o = fcn(
        &[
            "iu-bound",
            "--data",
            data.to_str().unwrap(),
            "--classes",
            "6",
            "--csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ious: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ious.len(), 4);
    assert_eq!(ious[0], 1.0);
    assert!(ious.windows(2).all(|w| w[1] <= w[0]), "{ious:?}");
}

#[test]
fn stitch_check_passes_and_rejects_wrong_factor() {
    let dir = tempfile::tempdir().unwrap();
    let net = zoo("toy-classifier.net");
    let o = fcn(&["stitch-check", "--net", &net, "--seed", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = fcn(
        &["stitch-check", "--net", &net, "--factor", "4"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let out = dir.path().join("run");
    let o = fcn(
        &[
            "train",
            "--net",
            &zoo("fcn-coarse.net"),
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "0",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = read_checkpoint(out.join("checkpoint.fcnz")).unwrap();
    let init = Net::<f32>::init(NetSpec::read(zoo("fcn-coarse.net")).unwrap(), 7).unwrap();
    assert_eq!(saved, init.checkpoint());
}

#[test]
fn config_echo_records_init_and_lr_drop() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let first = dir.path().join("first");
    let o = fcn(
        &[
            "train",
            "--net",
            &zoo("fcn-coarse.net"),
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "3",
            "--out",
            first.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let init = first.join("checkpoint.fcnz");
    let second = dir.path().join("second");
    let o = fcn(
        &[
            "train",
            "--net",
            &zoo("fcn-skip1.net"),
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "3",
            "--init",
            init.to_str().unwrap(),
            "--lr-drop",
            "100",
            "--out",
            second.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = std::fs::read_to_string(second.join("config.txt")).unwrap();
    assert!(
        echo.contains(&format!("init_checkpoint = {}", init.display())),
        "{echo}"
    );
    assert!(echo.contains("lr_drop_factor = 100"), "{echo}");
    let csv = std::fs::read_to_string(second.join("history.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn bad_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "lr = 0.1\nlearning_rate = 2\n").unwrap();
    let o = fcn(
        &[
            "train",
            "--net",
            &zoo("fcn-coarse.net"),
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let o = fcn(
        &[
            "train",
            "--net",
            &zoo("fcn-coarse.net"),
            "--data",
            data.to_str().unwrap(),
            "--lr",
            "1e12",
            "--epochs",
            "3",
            "--batch",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn predict_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path());
    let run = dir.path().join("run");
    let net = zoo("fcn-skip2.net");
    let o = fcn(
        &[
            "train",
            "--net",
            &net,
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "2",
            "--out",
            run.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("checkpoint.fcnz");
    let pred = dir.path().join("pred");
    let o = fcn(
        &[
            "predict",
            "--net",
            &net,
            "--init",
            ckpt.to_str().unwrap(),
            "--data",
            data.join("val").to_str().unwrap(),
            "--out",
            pred.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let via_files = fcn(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--pred",
            pred.to_str().unwrap(),
            "--classes",
            "6",
        ],
        dir.path(),
    );
    let direct = fcn(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--net",
            &net,
            "--init",
            ckpt.to_str().unwrap(),
            "--classes",
            "6",
        ],
        dir.path(),
    );
    assert!(via_files.status.success() && direct.status.success());
    assert_eq!(stdout(&via_files), stdout(&direct));
}

#[test]
fn run_dir_env_sets_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_fcn"))
        .args([
            "gen-data",
            "--count",
            "2",
            "--val-count",
            "1",
            "--size",
            "32",
        ])
        .env("FCN_RUN_DIR", &root)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.join("synth/train").is_dir());
    assert!(root.join("synth/gen.txt").is_file());
}
