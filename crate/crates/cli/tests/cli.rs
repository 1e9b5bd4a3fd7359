use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn out_root(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ergosched-cli-{}", std::process::id())).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ergosched"))
        .args(args)
        .env("ERGOSCHED_OUT", root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const FAST_ESTIMATE: [&str; 6] = ["--set", "seeds=1", "--set", "working_ticks=40", "--set", "n_particles=50"];

#[test]
fn estimate_writes_outputs_and_refuses_overwrite() {
    let root = out_root("estimate");
    let mut args = vec!["estimate"];
    args.extend(FAST_ESTIMATE);
    let first = run(&root, &args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let csv = std::fs::read_to_string(root.join("estimate").join("estimator.csv")).unwrap();
    assert!(csv.starts_with("config,humans,robots,metric,mean,std,n\n"));
    assert!(csv.contains("\nPF,1,0,lambda_err,"));

    assert_eq!(code(&run(&root, &args)), 2);
    args.push("--force");
    assert_eq!(code(&run(&root, &args)), 0);
}

#[test]
fn validation_errors_exit_2() {
    let root = out_root("invalid");
    assert_eq!(code(&run(&root, &["estimate", "--set", "no_such_key=1"])), 2);
    assert_eq!(code(&run(&root, &["estimate", "--set", "n_particles=abc"])), 2);
    assert_eq!(code(&run(&root, &["estimate", "--set", "seeds="])), 2);
    assert_eq!(code(&run(&root, &["train", "--scenario", "/nonexistent/scenario.scn"])), 2);
    assert_eq!(code(&run(&root, &["plot"])), 2);
}

#[test]
fn failed_checks_exit_3_only_in_check_mode() {
    let root = out_root("check");
    // One particle drawn from a wildly perturbed prior cannot reach 10% error.
    let mut args = vec!["estimate", "--set", "sigma_init=0.9", "--set", "n_particles=1"];
    args.extend(FAST_ESTIMATE[..4].iter());
    let plain = run(&root, &args);
    assert_eq!(code(&plain), 0);
    assert!(String::from_utf8_lossy(&plain.stdout).contains("FAIL PF lambda error"));
    args.extend(["--check", "--force"]);
    assert_eq!(code(&run(&root, &args)), 3);
}

#[test]
fn plot_renders_svg_next_to_csv() {
    let root = out_root("plot");
    std::fs::create_dir_all(&root).unwrap();
    let csv = root.join("curve.csv");
    std::fs::write(&csv, "episode,ret\n0,1.0\n1,2.5\n2,2.0\n").unwrap();
    let o = run(&root, &["plot", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(root.join("curve.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}
