//! Command-line experiment driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ergosched::agent::AgentKind;
use ergosched::estimation::FilterKind;
use ergosched::harness::experiments::{
    run_ablation, run_estimator_study, run_evaluate, run_latency, run_noise_sweep, run_sensitivity, run_train,
};
use ergosched::harness::export::plot_csv;
use ergosched::harness::{ExperimentKind, ExperimentSpec, HarnessError, ResultTable};
use ergosched::scenario::{default_scenario, load_scenario};

/// Environment variable naming the output root.
const OUT_ENV: &str = "ERGOSCHED_OUT";

#[derive(Parser)]
#[command(name = "ergosched", about = "Fatigue-aware human-robot task planning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Scenario file; the built-in duct workshop when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override any experiment field, e.g. `--set episodes=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Use the scenario as written instead of the reduced desk-scale version.
    #[arg(long)]
    full: bool,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
    /// Exit with code 3 when the experiment's acceptance checks fail.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum Cmd {
    Estimate(Common),
    NoiseSweep(Common),
    Train(Common),
    Evaluate(Common),
    Sensitivity(Common),
    Ablate(Common),
    Latency(Common),
    /// Render CSV exports (curves, tables, Gantt) as SVG files next to them.
    Plot { files: Vec<PathBuf> },
}

enum Failure {
    Validation(String),
    Check(Vec<String>),
    Other(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Validation(_) | HarnessError::Scenario(_) => Failure::Validation(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn build_spec(kind: ExperimentKind, c: &Common) -> Result<ExperimentSpec, Failure> {
    let scenario = match &c.scenario {
        Some(p) => load_scenario(p).map_err(|e| Failure::Validation(e.to_string()))?,
        None => default_scenario(),
    };
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"));
    let mut spec = ExperimentSpec::new(kind, &scenario, c.seed, &root);
    if c.full {
        spec.scenario = scenario;
        spec.train.env.reward.horizon = 2500;
        spec.humans = vec![1, 2, 3];
        spec.robots = vec![1, 2, 3];
    }
    for kv in &c.overrides {
        spec.set_pair(kv)?;
    }
    spec.validate()?;
    if spec.out_dir.exists() && !c.force {
        return Err(Failure::Validation(format!("{} exists; pass --force to overwrite", spec.out_dir.display())));
    }
    if c.force && spec.out_dir.exists() {
        std::fs::remove_dir_all(&spec.out_dir).map_err(|e| Failure::Other(e.to_string()))?;
    }
    Ok(spec)
}

fn mean(t: &ResultTable, config: &str, metric: &str) -> f64 {
    t.get(config, metric).map_or(f64::NAN, |r| r.mean)
}

fn check(fails: &mut Vec<String>, ok: bool, what: String) {
    println!("{} {what}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        fails.push(what);
    }
}

fn estimator_checks(t: &ResultTable, suffix: &str, fails: &mut Vec<String>) {
    let pf = mean(t, &format!("{}{suffix}", FilterKind::Pf.name()), "lambda_err");
    let kf = mean(t, &format!("{}{suffix}", FilterKind::Kf.name()), "lambda_err");
    let ekf = mean(t, &format!("{}{suffix}", FilterKind::Ekf.name()), "lambda_err");
    check(fails, pf < 0.1, format!("PF lambda error {pf:.4} < 0.1"));
    check(fails, pf < kf && pf < ekf, format!("PF lambda error {pf:.4} below KF {kf:.4} and EKF {ekf:.4}"));
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    let mut fails = Vec::new();
    let progress = |r: &ergosched::agent::CurveRow| {
        if (r.episode + 1) % 25 == 0 {
            eprintln!("episode {:>4} return {:.3} makespan {} overwork {}", r.episode + 1, r.ret, r.makespan, r.overwork);
        }
    };
    let checked = match cmd {
        Cmd::Plot { files } => {
            if files.is_empty() {
                return Err(Failure::Validation("plot needs at least one CSV file".into()));
            }
            for f in files {
                let text = std::fs::read_to_string(&f).map_err(|e| Failure::Validation(format!("{}: {e}", f.display())))?;
                let name = f.file_stem().map_or("plot".into(), |s| s.to_string_lossy().into_owned());
                let svg = plot_csv(&name, &text).map_err(Failure::Validation)?;
                let out = f.with_extension("svg");
                std::fs::write(&out, svg).map_err(|e| Failure::Other(e.to_string()))?;
                println!("wrote {}", out.display());
            }
            return Ok(());
        }
        Cmd::Estimate(c) => {
            let spec = build_spec(ExperimentKind::Estimate, &c)?;
            let t = run_estimator_study(&spec)?;
            print!("{}", t.to_csv());
            estimator_checks(&t, "", &mut fails);
            report(&spec.out_dir);
            c.check
        }
        Cmd::NoiseSweep(c) => {
            let spec = build_spec(ExperimentKind::NoiseSweep, &c)?;
            let t = run_noise_sweep(&spec)?;
            print!("{}", t.to_csv());
            for &s in &spec.sigma_grid {
                let get = |k: FilterKind, m: &str| mean(&t, &format!("{}@{s}", k.name()), m);
                if s < 1e-4 {
                    for k in FilterKind::ALL {
                        check(&mut fails, get(k, "lambda_err") < 0.1, format!("{} lambda error < 0.1 at sigma_m {s}", k.name()));
                    }
                }
                if s >= 1e-2 {
                    let pf = get(FilterKind::Pf, "lambda_err");
                    let gauss = [FilterKind::Kf, FilterKind::Ekf].iter().any(|&k| get(k, "lambda_err") > pf.max(0.15) || get(k, "flag_rate") > 0.0);
                    check(&mut fails, pf <= 0.15 && gauss, format!("PF lambda error {pf:.4} <= 0.15 with KF/EKF above it or flagged at sigma_m {s}"));
                }
            }
            report(&spec.out_dir);
            c.check
        }
        Cmd::Train(c) => {
            let spec = build_spec(ExperimentKind::Train, &c)?;
            let out = run_train(&spec, &mut |r| progress(r))?;
            let n = out.curves.len().min(50).max(1);
            let tail = &out.curves[out.curves.len().saturating_sub(50)..];
            println!("agent {} episodes {} final-{n} mean return {:.4}", spec.train.kind.name(), out.curves.len(), tail.iter().map(|r| r.ret).sum::<f64>() / n as f64);
            if spec.train.kind.masked() {
                check(&mut fails, out.unsafe_selections() == 0, format!("{} unsafe selections", out.unsafe_selections()));
            }
            report(&spec.out_dir);
            c.check
        }
        Cmd::Evaluate(c) => {
            let spec = build_spec(ExperimentKind::Evaluate, &c)?;
            let t = run_evaluate(&spec)?;
            print!("{}", t.to_csv());
            for row in t.rows.iter().filter(|r| r.metric == "overwork_free") {
                if AgentKind::parse(&row.config).is_some_and(|k| k.masked()) {
                    check(&mut fails, row.mean >= 0.95, format!("{} {}h{}r overwork-free episodes {:.3} >= 0.95", row.config, row.humans, row.robots, row.mean));
                }
            }
            report(&spec.out_dir);
            c.check
        }
        Cmd::Sensitivity(c) => {
            let spec = build_spec(ExperimentKind::Sensitivity, &c)?;
            let t = run_sensitivity(&spec)?;
            print!("{}", t.to_csv());
            for &d in spec.limit_grid.iter().filter(|&&d| d > 0.9) {
                let id = format!("d={d}");
                check(&mut fails, mean(&t, &id, "overwork") == 0.0 && mean(&t, &id, "progress") == 1.0, format!("{id}: no overwork and full progress"));
            }
            for w in spec.limit_grid.windows(2) {
                let (a, b) = (mean(&t, &format!("d={}", w[0]), "makespan"), mean(&t, &format!("d={}", w[1]), "makespan"));
                check(&mut fails, b <= a * 1.02, format!("makespan {b:.1} at d={} within 2% of {a:.1} at d={}", w[1], w[0]));
            }
            report(&spec.out_dir);
            c.check
        }
        Cmd::Ablate(c) => {
            let spec = build_spec(ExperimentKind::Ablate, &c)?;
            let t = run_ablation(&spec, &mut |v, r| {
                if (r.episode + 1) % 50 == 0 {
                    eprintln!("{} episode {} return {:.3}", v.name(), r.episode + 1, r.ret);
                }
            })?;
            print!("{}", t.to_csv());
            report(&spec.out_dir);
            c.check
        }
        Cmd::Latency(c) => {
            let spec = build_spec(ExperimentKind::Latency, &c)?;
            let rep = run_latency(&spec)?;
            print!("{}", rep.to_csv());
            let p50 = |n: &str, p: usize| rep.get(n, p).map_or(f64::NAN, |r| r.p50_us);
            check(&mut fails, p50("pf_update_humans", 1) < 650.0, format!("PF update p50 {:.1} us < 650", p50("pf_update_humans", 1)));
            check(&mut fails, p50("task_prediction", 1) < 200.0, format!("prediction p50 {:.1} us < 200", p50("task_prediction", 1)));
            let fwd = rep.rows.iter().find(|r| r.name == "network_forward").map_or(f64::NAN, |r| r.p50_us);
            check(&mut fails, fwd < 20_000.0, format!("forward p50 {fwd:.1} us < 20000"));
            report(&spec.out_dir);
            c.check
        }
    };
    if checked && !fails.is_empty() {
        return Err(Failure::Check(fails));
    }
    Ok(())
}

fn report(dir: &Path) {
    eprintln!("outputs in {}", dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(f)) => {
            eprintln!("{} check(s) failed", f.len());
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
