use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfl"))
        .args(args)
        .current_dir(dir)
        .env_remove("CFL_OUTPUT_DIR")
        .output()
        .expect("spawn cfl")
}

const TINY: &str = r#"
name = "tiny"
alphas = [0.5]
epsilons = [1e-4]
iterations = 10
repeats = 1

[topology]
kind = "path"
servers = 2
users_per_server = 2

[data]
per_user = 5
[data.synthetic]
num_samples = 40
dim = 3
label_noise = 0.1
seed = 3
"#;

#[test]
fn check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfl(&["check"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn reference_cache_is_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let args = ["reference", "--config", "tiny.toml", "--output-dir", "out"];
    let first = cfl(&args, dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let path = dir.path().join(String::from_utf8(first.stdout).unwrap().lines().next().unwrap());
    let bytes = fs::read(&path).unwrap();
    fs::remove_file(&path).unwrap();
    assert!(cfl(&args, dir.path()).status.success());
    assert_eq!(fs::read(&path).unwrap(), bytes);
}

#[test]
fn run_without_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let no_data: String = TINY.split("[data]").next().unwrap().to_string();
    fs::write(dir.path().join("nodata.toml"), no_data).unwrap();
    let out = cfl(&["run", "--config", "nodata.toml", "--seed", "1"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("no dataset"), "{err}");
}

#[test]
fn run_requires_seed_and_rejects_unknown_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!cfl(&["run"], dir.path()).status.success());
    assert!(!cfl(&["run", "--seed", "1", "--bogus"], dir.path()).status.success());
    fs::write(dir.path().join("bad.toml"), "alphas = [").unwrap();
    assert!(!cfl(&["run", "--config", "bad.toml", "--seed", "1"], dir.path()).status.success());
}

#[test]
fn run_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let mut outputs = Vec::new();
    for sub in ["a", "b"] {
        let out = cfl(
            &["run", "--config", "tiny.toml", "--seed", "9", "--output-dir", sub, "--epsilon", "decreasing"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(dir.path().join(sub).join("tiny.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert!(text.contains("# seed: 9"));
    assert!(text.contains(",1/(100+k^2),"));
}

#[test]
fn output_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cfl"))
        .args(["run", "--config", "tiny.toml", "--seed", "2"])
        .current_dir(dir.path())
        .env("CFL_OUTPUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("elsewhere/tiny.csv").exists());
}
