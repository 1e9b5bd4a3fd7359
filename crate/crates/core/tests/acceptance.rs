//! Acceptance suite. Each test prints one PASS/FAIL line to stderr,
//! bypassing the test harness capture, and then asserts.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ergosched::agent::rollout::{mask_from_sets, offered_sets, wait_action, RolloutConfig};
use ergosched::agent::train::{evaluate, evaluate_random, TrainOutput};
use ergosched::agent::AgentKind;
use ergosched::allocation::allocate;
use ergosched::env::{self, EnvConfig, WorldState};
use ergosched::estimation::{EstimatorBank, FilterKind};
use ergosched::fatigue::simulate_subtask;
use ergosched::harness::experiments::{agent_config, run_estimator_study, run_evaluate, run_noise_sweep, sensitivity_table, train_into};
use ergosched::harness::latency::{forward_samples, percentile, pf_update_samples, prediction_samples};
use ergosched::harness::{mean_std, ExperimentKind, ExperimentSpec, ResultTable};
use ergosched::neural::{grad_check, Network, NetworkConfig};
use ergosched::scenario::{default_scenario, parse_scenario, randomize_episode, Scenario};

/// Criteria share one CPU; running them one at a time keeps timings honest.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ergosched-acceptance-{}", std::process::id())).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn spec(kind: ExperimentKind, name: &str) -> ExperimentSpec {
    ExperimentSpec::new(kind, &default_scenario(), 1, &scratch(name))
}

#[test]
fn c01_fatigue_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut tick_mismatch = 0;
    for _ in 0..1000 {
        let f0: f64 = rng.gen_range(0.0..0.99);
        let lambda: f64 = rng.gen_range(0.001..1.0);
        let tau: f64 = rng.gen_range(1.0..40.0);
        let delta: f64 = rng.gen_range(0.0..1.0);
        let (ticks, f_end) = simulate_subtask(f0, tau, lambda, delta).unwrap();
        // Straight-line replay: closed-form work step, explicit efficiency.
        let (mut f, mut progress, mut n) = (f0, 0.0f64, 0u32);
        while progress < 1.0 - 1e-9 {
            f = 1.0 - (1.0 - f) * (-lambda).exp();
            progress += 1.0 / (tau * (1.0 + delta * (1.0 + f).ln()));
            n += 1;
        }
        tick_mismatch += (n != ticks) as u32;
        worst = worst.max((f - f_end).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    report(1, tick_mismatch == 0 && worst < 1e-12 && secs < 5.0, &format!("tick mismatches {tick_mismatch}, max |dF| {worst:.2e}, {secs:.2}s"));
}

fn estimator_errors(t: &ResultTable, suffix: &str) -> (f64, f64, f64) {
    let get = |k: FilterKind| t.get(&format!("{}{suffix}", k.name()), "lambda_err").unwrap().mean;
    (get(FilterKind::Pf), get(FilterKind::Kf), get(FilterKind::Ekf))
}

#[test]
fn c02_pf_convergence() {
    let _g = serial();
    let t0 = Instant::now();
    let mut sp = spec(ExperimentKind::Estimate, "estimate");
    sp.seeds = vec![1, 2, 3];
    sp.train.env.noise.sigma_m = 5e-5;
    sp.train.env.noise.sigma_init = 0.2;
    sp.train.env.noise.sigma_particle = 0.3;
    sp.train.n_particles = 500;
    let t = run_estimator_study(&sp).unwrap();
    let (pf, kf, ekf) = estimator_errors(&t, "");
    let secs = t0.elapsed().as_secs_f64();
    let ok = pf < 0.10 && pf < kf && pf < ekf && secs < 30.0;
    report(2, ok, &format!("lambda error PF {pf:.4} KF {kf:.4} EKF {ekf:.4} (need PF < 0.10 and lowest), {secs:.1}s"));
}

#[test]
fn c03_noise_robustness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut sp = spec(ExperimentKind::NoiseSweep, "noise");
    sp.seeds = vec![1, 2, 3];
    sp.sigma_grid = vec![1e-5, 5e-5, 1e-2];
    let t = run_noise_sweep(&sp).unwrap();
    let mut low_ok = true;
    let mut detail = String::new();
    for s in [1e-5, 5e-5] {
        let (pf, kf, ekf) = estimator_errors(&t, &format!("@{s}"));
        low_ok &= pf < 0.1 && kf < 0.1 && ekf < 0.1;
        detail += &format!("sigma {s}: PF {pf:.4} KF {kf:.4} EKF {ekf:.4}; ");
    }
    let (pf, kf, ekf) = estimator_errors(&t, "@0.01");
    let flag = |k: FilterKind| t.get(&format!("{}@0.01", k.name()), "flag_rate").unwrap().mean;
    let high_ok = pf <= 0.15 && (kf > pf.max(0.15) || ekf > pf.max(0.15) || flag(FilterKind::Kf) > 0.0 || flag(FilterKind::Ekf) > 0.0);
    detail += &format!("sigma 0.01: PF {pf:.4} KF {kf:.4} EKF {ekf:.4} flags KF {:.2} EKF {:.2}", flag(FilterKind::Kf), flag(FilterKind::Ekf));
    let secs = t0.elapsed().as_secs_f64();
    report(3, low_ok && high_ok && secs < 60.0, &format!("{detail}, {secs:.1}s"));
}

/// Single-station scenario: every subtask at one cell where the human spawns.
fn tiny_scenario(lambdas: &[f64], taus: &[u32], tasks: &[&[usize]], deps: &[(usize, usize)]) -> Scenario {
    let mut text = String::from("[order]\nproducts = 1\n\n[entities]\nhumans = 1..1\nrobots = 1..1\n");
    text += "human_spawn = 1,1..1,1\nrobot_spawn = 2,2..2,2\ncage_spawn = 0,0..0,0\n\n[subtasks]\n";
    for (i, t) in taus.iter().enumerate() {
        text += &format!("{i} | s{i} | human | {t} | 1,1\n");
    }
    text += "\n[tasks]\n";
    for (i, subs) in tasks.iter().enumerate() {
        let ids: Vec<String> = subs.iter().map(|s| s.to_string()).collect();
        text += &format!("{i} | t{i} | {} | 1 | -\n", ids.join(","));
    }
    text += "\n[deps]\n";
    for (a, b) in deps {
        text += &format!("{a} -> {b}\n");
    }
    text += "\n[fatigue]\n";
    for (i, l) in lambdas.iter().enumerate() {
        text += &format!("lambda.{i} = {l}\n");
    }
    text += "mu.free = 0.05\nmu.waiting = 0.05\nmu.walking = 0.02\ndelta_eff = 0.3\ntype.weak = 1.2\ntype.normal = 1.0\ntype.strong = 0.8\n\n[grid]\n...\n...\n...\n";
    parse_scenario(&text).unwrap()
}

struct Soundness {
    checked: u64,
    violations: u64,
}

/// Depth-first enumeration of every schedule: at each decision the human
/// runs any offered task or waits 1 or 6 ticks (at most two waits per path).
fn enumerate(s: &Scenario, w: &WorldState, bank: &EstimatorBank, cfg: &RolloutConfig, waits: u32, acc: &mut Soundness) {
    if w.done {
        return;
    }
    let sets = offered_sets(s, w, bank, cfg);
    let mask = mask_from_sets(s, &sets);
    let limit = cfg.env.reward.limit(0);
    for a in 0..mask.len() {
        if !mask[a] {
            continue;
        }
        let (mut w2, mut b2) = (w.clone(), bank.clone());
        let step = |w: &mut WorldState, b: &mut EstimatorBank, act: Option<&env::ExpandedAction>| {
            let out = env::step(s, w, act, &cfg.env).unwrap();
            for (k, (&z, &act)) in out.info.measurements.iter().zip(&out.info.activities).enumerate() {
                b.observe(k, z, act);
            }
        };
        if a == wait_action(s) {
            if waits == 0 {
                continue;
            }
            for ticks in [1, 6] {
                let (mut w3, mut b3) = (w.clone(), bank.clone());
                for _ in 0..ticks {
                    if !w3.done {
                        step(&mut w3, &mut b3, None);
                    }
                }
                enumerate(s, &w3, &b3, cfg, waits - 1, acc);
            }
            continue;
        }
        let act = allocate(s, a, &sets, &w2).unwrap();
        assert_eq!(act.t_travel, 0);
        step(&mut w2, &mut b2, Some(&act));
        acc.checked += 1;
        let mut peak = w2.humans[0].fatigue;
        while !w2.humans[0].is_idle() && !w2.done {
            step(&mut w2, &mut b2, None);
            peak = peak.max(w2.humans[0].fatigue);
        }
        acc.violations += (peak >= limit) as u64;
        enumerate(s, &w2, &b2, cfg, waits, acc);
    }
}

#[test]
fn c04_safe_set_soundness() {
    let _g = serial();
    let t0 = Instant::now();
    let cases: Vec<(Scenario, f64)> = vec![
        (tiny_scenario(&[0.3], &[3], &[&[0]], &[]), 0.7),
        (tiny_scenario(&[0.2, 0.4], &[2, 2], &[&[0], &[1]], &[(0, 1)]), 0.8),
        (tiny_scenario(&[0.25, 0.1, 0.35], &[2, 4, 1], &[&[0, 1], &[2], &[0, 2]], &[(0, 2), (1, 2)]), 0.85),
        (tiny_scenario(&[0.5, 0.15], &[1, 3], &[&[0], &[1], &[0, 1]], &[(0, 2), (1, 2)]), 0.6),
        (tiny_scenario(&[0.05, 0.45, 0.3], &[6, 1, 2], &[&[0, 1], &[1, 2]], &[(0, 1)]), 0.9),
    ];
    let mut acc = Soundness { checked: 0, violations: 0 };
    for (i, (s, limit)) in cases.iter().enumerate() {
        let mut cfg = RolloutConfig::default();
        cfg.env.noise.sigma_init = 0.0;
        cfg.env.noise.sigma_time = 0.0;
        cfg.env.noise.sigma_m = 0.0;
        cfg.env.noise.sigma_particle = 0.0;
        cfg.env.reward.fatigue_limit = *limit;
        cfg.n_particles = 50;
        for seed in 0..3u64 {
            let init = randomize_episode(s, seed + 10 * i as u64).unwrap();
            let w = env::reset(s, &init, &cfg.env, seed);
            let bank = EstimatorBank::for_episode(s, &init, FilterKind::Pf, &cfg.env.noise, cfg.n_particles, seed);
            enumerate(s, &w, &bank, &cfg, 2, &mut acc);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = acc.violations == 0 && acc.checked > 0 && secs < 10.0;
    report(4, ok, &format!("{} safe executions enumerated, {} violations, {secs:.2}s", acc.checked, acc.violations));
}

/// Desk-scale training shared by criteria 5 to 7.
struct Trained {
    spec: ExperimentSpec,
    pf: TrainOutput,
    pf_dqn: TrainOutput,
    d3qn: TrainOutput,
    secs: f64,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t0 = Instant::now();
        let sp = spec(ExperimentKind::Train, "train");
        let run = |kind: AgentKind, episodes: u32| {
            let mut cfg = agent_config(&sp, kind, None);
            cfg.episodes = episodes;
            train_into(&sp, &cfg, &sp.out_dir.join(kind.name()), &mut |_| {}).unwrap()
        };
        let pf = run(AgentKind::PfCd3q, 300);
        let d3qn = run(AgentKind::D3qn, 300);
        let pf_dqn = run(AgentKind::PfDqn, 60);
        Trained { spec: sp, pf, pf_dqn, d3qn, secs: t0.elapsed().as_secs_f64() }
    })
}

fn mean_of(res: &[ergosched::agent::rollout::EpisodeResult], f: impl Fn(&ergosched::agent::rollout::EpisodeResult) -> f64) -> f64 {
    mean_std(&res.iter().map(f).collect::<Vec<_>>()).0
}

#[test]
fn c05_masked_policy_guarantee() {
    let _g = serial();
    let tr = trained();
    let seeds = tr.spec.eval_seeds();
    let mut decisions: u64 = tr.pf.curves.iter().chain(&tr.pf_dqn.curves).map(|r| r.decisions as u64).sum();
    let mut unsafe_sel = tr.pf.unsafe_selections() + tr.pf_dqn.unsafe_selections();
    for out in [&tr.pf, &tr.pf_dqn] {
        let cfg = out.learner.cfg.rollout();
        for r in evaluate(&tr.spec.scenario, &out.learner.online, &cfg, &seeds) {
            decisions += r.decisions as u64;
            unsafe_sel += r.unsafe_selections as u64;
        }
    }
    report(5, unsafe_sel == 0 && decisions > 0, &format!("{unsafe_sel} of {decisions} PF-variant selections outside the safe set"));
}

#[test]
fn c06_desk_training() {
    let _g = serial();
    let tr = trained();
    let s = &tr.spec.scenario;
    let seeds = tr.spec.eval_seeds();
    let pf_cfg = tr.pf.learner.cfg.rollout();
    let tail = &tr.pf.curves[tr.pf.curves.len() - 50..];
    let final_ret = tail.iter().map(|r| r.ret).sum::<f64>() / 50.0;
    let random = evaluate_random(s, &pf_cfg, &seeds, 7);
    let random_ret = mean_of(&random, |r| r.ret);
    let pf_eval = evaluate(s, &tr.pf.learner.online, &pf_cfg, &seeds);
    let free = mean_of(&pf_eval, |r| (r.metrics.overwork == 0) as u8 as f64);
    let pf_ms = mean_of(&pf_eval, |r| r.metrics.makespan as f64);
    let d3_eval = evaluate(s, &tr.d3qn.learner.online, &tr.d3qn.learner.cfg.rollout(), &seeds);
    let d3_ms = mean_of(&d3_eval, |r| r.metrics.makespan as f64);
    let d3_ow = mean_of(&d3_eval, |r| r.metrics.overwork as f64);
    let (a, b, c) = (final_ret > random_ret, free >= 0.95, pf_ms <= 1.15 * d3_ms && d3_ow > 0.0);
    let detail = format!(
        "(a) final-50 return {final_ret:.3} vs random {random_ret:.3}; (b) overwork-free {free:.3}; (c) makespan {pf_ms:.1} vs D3QN {d3_ms:.1} (D3QN overwork {d3_ow:.3}); training {:.0}s",
        tr.secs
    );
    report(6, a && b && c && tr.secs < 1800.0, &detail);
}

#[test]
fn c07_sensitivity_shape() {
    let _g = serial();
    let tr = trained();
    let mut sp = tr.spec.clone();
    sp.eval_episodes = 50;
    let t = sensitivity_table(&sp, &tr.pf.learner.online, &tr.pf.learner.cfg);
    let m = |d: f64, metric: &str| t.get(&format!("d={d}"), metric).unwrap().mean;
    let mut ok = true;
    let mut detail = String::new();
    for &d in sp.limit_grid.iter().filter(|&&d| d > 0.9) {
        let (ow, pr) = (m(d, "overwork"), m(d, "progress"));
        ok &= ow == 0.0 && pr == 1.0;
        detail += &format!("d={d}: overwork {ow:.3} progress {pr:.3}; ");
    }
    let mut worst = 0.0f64;
    for w in sp.limit_grid.windows(2) {
        let (a, b) = (m(w[0], "makespan"), m(w[1], "makespan"));
        worst = worst.max(b / a - 1.0);
    }
    ok &= worst <= 0.02;
    let curve: Vec<String> = sp.limit_grid.iter().map(|&d| format!("{:.0}", m(d, "makespan"))).collect();
    detail += &format!("largest makespan increase {:.2}%; makespans [{}]", worst * 100.0, curve.join(" "));
    report(7, ok, &detail);
}

#[test]
fn c08_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();
    let s = default_scenario();
    let init = randomize_episode(&s, 3).unwrap();
    let cfg = EnvConfig::default();
    let w = env::reset(&s, &init, &cfg, 3);
    let bank = EstimatorBank::for_episode(&s, &init, FilterKind::Pf, &cfg.noise, 100, 3);
    let obs = env::observe(&s, &w, &bank, &cfg);
    let mask: Vec<bool> = (0..=s.tasks.len()).map(|i| i % 2 == 0 || i == s.tasks.len()).collect();
    let net = Network::for_scenario(&s, NetworkConfig::default(), 5);
    let loss = |q: &[f64]| {
        let target: Vec<f64> = (0..q.len()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let l = q.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (l, q.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect())
    };
    let err = grad_check(&net, &obs, &mask, &loss, 1e-4, 80, 9);
    let secs = t0.elapsed().as_secs_f64();
    report(8, err < 1e-4 && secs < 10.0, &format!("max relative error {err:.2e} over 80 parameters, {secs:.2}s"));
}

#[test]
fn c09_latency_envelope() {
    let _g = serial();
    let s = default_scenario();
    let pf = percentile(&pf_update_samples(&s, 1, 500, 300, 1), 0.5);
    let pred = percentile(&prediction_samples(&s, 1, 300, 1), 0.5);
    let (_, fwd) = forward_samples(&s, NetworkConfig::default(), 50, 1);
    let fwd = percentile(&fwd, 0.5);
    let ok = pf < 650.0 && pred < 200.0 && fwd < 20_000.0;
    report(9, ok, &format!("p50 PF update {pf:.1}us (< 650), prediction {pred:.1}us (< 200), forward {fwd:.0}us (< 20000)"));
}

fn read_csvs(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let run = |tag: &str| {
        let root = scratch(tag);
        let s = default_scenario();
        let mut est = ExperimentSpec::new(ExperimentKind::Estimate, &s, 4, &root);
        est.trace.working_ticks = 60;
        est.train.n_particles = 100;
        run_estimator_study(&est).unwrap();
        let mut sweep = ExperimentSpec::new(ExperimentKind::NoiseSweep, &s, 4, &root);
        sweep.sigma_grid = vec![1e-4, 1e-2];
        sweep.trace = est.trace;
        sweep.train.n_particles = 100;
        run_noise_sweep(&sweep).unwrap();
        let mut tr = ExperimentSpec::new(ExperimentKind::Train, &s, 4, &root);
        tr.train.episodes = 12;
        tr.train.warmup = 64;
        tr.train.n_particles = 100;
        for kind in [AgentKind::PfCd3q, AgentKind::D3qn] {
            let cfg = agent_config(&tr, kind, None);
            train_into(&tr, &cfg, &tr.out_dir.join(kind.name()), &mut |_| {}).unwrap();
        }
        let mut ev = ExperimentSpec::new(ExperimentKind::Evaluate, &s, 4, &root);
        ev.train = tr.train.clone();
        ev.eval_episodes = 5;
        ev.agents = vec![AgentKind::PfCd3q, AgentKind::D3qn];
        run_evaluate(&ev).unwrap();
        let mut sens = ev.clone();
        sens.out_dir = root.join("sensitivity");
        sens.limit_grid = vec![0.5, 0.95];
        ergosched::harness::experiments::run_sensitivity(&sens).unwrap();
        read_csvs(&root)
    };
    let a = run("det-a");
    let b = run("det-b");
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x == y);
    let names: Vec<&str> = a.iter().map(|x| x.0.as_str()).collect();
    report(10, same && a.len() >= 8, &format!("{} CSV files identical across reruns: {}", a.len(), names.join(" ")));
}
