use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sensireg(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sensireg"));
    cmd.args(args).env_remove("SENSIREG_OUT");
    if let Some(dir) = out {
        cmd.env("SENSIREG_OUT", dir);
    }
    cmd.output().unwrap()
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.json")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let o = sensireg(&["--help"], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["train", "evaluate", "attribute", "sweep-lambda", "select-lambda", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let o = sensireg(&["train", "--config", "/nonexistent/cfg.json", "--seed", "1"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn usage_and_schema_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let cfg = cfg.to_str().unwrap();
    let o = sensireg(&["train", "--config", cfg], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1), "missing --seed");
    let o = sensireg(&["train", "--config", cfg, "--seed", "1", "--set", "bogus=3"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = sensireg(&["train", "--config", cfg, "--seed", "1", "--set", "regime=jacobreg"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = sensireg(
        &[
            "evaluate",
            "--config",
            config().to_str().unwrap(),
            "--seed",
            "1",
            "--checkpoint",
            "/nonexistent/model.srck",
        ],
        Some(dir.path()),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn full_pipeline_on_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config();
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str], out: &Path| {
        let o = sensireg(args, Some(out));
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };

    let std_dir = d.join("standard");
    run(&["train", "--config", cfg, "--seed", "1"], &std_dir);
    let ckpt = std_dir.join("model.srck");
    assert!(ckpt.exists());
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(std_dir.join("log.json")).unwrap()).unwrap();
    assert_eq!(log["epochs"].as_array().unwrap().len(), 5);
    assert_eq!(log["initial"]["epoch"], 0);

    let ck = ckpt.to_str().unwrap();
    run(
        &["evaluate", "--config", cfg, "--seed", "1", "--checkpoint", ck, "--method", "standard"],
        &std_dir,
    );
    let report = fs::read_to_string(std_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("method,max_sens,"));
    assert!(report.lines().nth(1).unwrap().starts_with("standard,"));
    assert!(std_dir.join("report.txt").exists());

    let o = run(&["select-lambda", "--config", cfg, "--checkpoint", ck], &std_dir);
    let lambda: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(lambda > 0.0);
    assert!(std_dir.join("lambda.json").exists());

    let ns_dir = d.join("nsloss");
    let lam = format!("ns.lambda={lambda}");
    run(
        &["train", "--config", cfg, "--seed", "1", "--set", "regime=nsloss", "--set", &lam],
        &ns_dir,
    );
    let ns_ck = ns_dir.join("model.srck");
    run(
        &[
            "evaluate",
            "--config",
            cfg,
            "--seed",
            "1",
            "--checkpoint",
            ns_ck.to_str().unwrap(),
            "--method",
            "nsloss",
        ],
        &ns_dir,
    );

    let table = d.join("compare.csv");
    let a = format!("standard={}", std_dir.join("evaluation.json").display());
    let b = format!("nsloss={}", ns_dir.join("evaluation.json").display());
    run(&["report", "--eval", &a, "--eval", &b, "--out", table.to_str().unwrap()], d);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);

    let attr_dir = d.join("attr");
    run(
        &["attribute", "--config", cfg, "--checkpoint", ck, "--count", "2", "--normalization", "abs-min-max"],
        &attr_dir,
    );
    for i in 0..2 {
        let bytes = fs::read(attr_dir.join(format!("attribution_{i:04}.pgm"))).unwrap();
        let (w, h, _) = sensireg::attribution::parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (8, 1));
    }

    let sweep_dir = d.join("sweep");
    run(
        &["sweep-lambda", "--config", cfg, "--lambdas", "0.1,1", "--set", "epochs=2"],
        &sweep_dir,
    );
    let sweep = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "lambda,max_sens,faith_est,sparseness,accuracy");
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn output_dir_comes_from_env_over_set() {
    let dir = tempfile::tempdir().unwrap();
    let via_set = dir.path().join("via_set");
    let via_env = dir.path().join("via_env");
    let set = format!("output_dir={}", via_set.display());
    let cfg = config();
    let args = ["train", "--config", cfg.to_str().unwrap(), "--seed", "2", "--set", "epochs=1", "--set", &set];
    let o = sensireg(&args, None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(via_set.join("model.srck").exists());
    let o = sensireg(&args, Some(&via_env));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(via_env.join("model.srck").exists());
    assert_eq!(
        fs::read(via_set.join("model.srck")).unwrap(),
        fs::read(via_env.join("model.srck")).unwrap()
    );
}
