//! Estimator studies, training, evaluation, sensitivity and ablation runs.

use std::fmt::Write as _;
use std::path::Path;

use super::estimator::{filter_runs, run_trace, synth_trace, TraceRow};
use super::export::{gantt_csv, trace_lines};
use super::{write_file, ExperimentSpec, HarnessError, ResultTable};
use crate::agent::rollout::{run_episode, Decision, EpisodeResult, RolloutConfig};
use crate::agent::train::{evaluate, evaluate_random, write_curves_csv, Checkpoint, CurveRow, Learner, TrainConfig, TrainOutput};
use crate::agent::{select_action, AgentKind};
use crate::estimation::{Activity, FilterKind};
use crate::fatigue::{work_step, NoiseConfig};
use crate::neural::{Network, Variant};
use crate::scenario::{randomize_episode, RestMode, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ticks of the reference execution used for the task-level fatigue error.
const TASK_TICKS: u32 = 10;

fn task_fatigue(lambda: f64) -> f64 {
    (0..TASK_TICKS).fold(0.0, |f, _| work_step(f, lambda))
}

/// PF, KF and EKF on synthetic traces for every `λ` of the scenario table.
/// Writes `estimator.csv` and one trace CSV per filter for the first seed.
pub fn run_estimator_study(spec: &ExperimentSpec) -> Result<ResultTable, HarnessError> {
    let noise = spec.train.env.noise;
    let table = estimator_table(&spec.scenario, &noise, spec, "")?;
    table.write_csv(&spec.out_dir.join("estimator.csv"))?;
    for kind in FilterKind::ALL {
        write_file(&spec.out_dir.join(format!("trace_{}.csv", kind.name())), &estimator_trace_csv(&spec.scenario, kind, &noise, spec))?;
    }
    Ok(table)
}

fn estimator_table(s: &Scenario, noise: &NoiseConfig, spec: &ExperimentSpec, suffix: &str) -> Result<ResultTable, HarnessError> {
    let runs = filter_runs(s, &FilterKind::ALL, noise, &spec.trace, spec.train.n_particles, &spec.seeds);
    let mut table = ResultTable::default();
    for (kind, r) in FilterKind::ALL.iter().zip(runs) {
        let id = format!("{}{suffix}", kind.name());
        let lam: Vec<f64> = r.iter().map(|x| x.2.lambda_err).collect();
        let mu: Vec<f64> = r.iter().map(|x| x.2.mu_err).collect();
        let mse: Vec<f64> = r.iter().map(|x| (task_fatigue(x.2.lambda_est) - task_fatigue(x.1)).powi(2)).collect();
        let flags: Vec<f64> = r.iter().map(|x| x.2.flagged as u8 as f64).collect();
        table.push(&id, 1, 0, "lambda_err", &lam);
        table.push(&id, 1, 0, "mu_err", &mu);
        table.push(&id, 1, 0, "task_mse", &mse);
        table.push(&id, 1, 0, "flag_rate", &flags);
    }
    Ok(table)
}

/// `tick,human,mode,true_param,estimate,measurement,n_eff` for the first
/// seed and every subtask.
fn estimator_trace_csv(s: &Scenario, kind: FilterKind, noise: &NoiseConfig, spec: &ExperimentSpec) -> String {
    let mu = s.fatigue_table.mu(RestMode::Free);
    let seed = spec.seeds[0];
    let mut out = String::from("subtask,tick,human,mode,true_param,estimate,measurement,n_eff\n");
    for (&sub, &lambda) in &s.fatigue_table.lambda {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(sub as u64));
        let trace = synth_trace(sub, lambda, mu, &spec.trace, noise.sigma_m, &mut rng);
        let filter_seed: u64 = rand::Rng::gen(&mut rng);
        let mut rows: Vec<TraceRow> = Vec::new();
        run_trace(kind, sub, lambda, mu, &trace, noise, spec.train.n_particles, filter_seed, Some(&mut rows));
        for r in rows {
            let mode = match r.mode {
                Activity::Working(j) => format!("work{j}"),
                Activity::Resting(m) => m.name().to_string(),
            };
            let _ = writeln!(out, "{sub},{},0,{mode},{},{},{},{}", r.tick, r.true_param, r.estimate, r.z, r.n_eff);
        }
    }
    out
}

/// Estimator errors per measurement-noise level. Writes `noise_sweep.csv`.
pub fn run_noise_sweep(spec: &ExperimentSpec) -> Result<ResultTable, HarnessError> {
    let mut table = ResultTable::default();
    for &sigma_m in &spec.sigma_grid {
        let noise = NoiseConfig { sigma_m, ..spec.train.env.noise };
        table.rows.extend(estimator_table(&spec.scenario, &noise, spec, &format!("@{sigma_m}"))?.rows);
    }
    table.write_csv(&spec.out_dir.join("noise_sweep.csv"))?;
    Ok(table)
}

/// Configuration of `kind` under the spec's overrides.
pub fn agent_config(spec: &ExperimentSpec, kind: AgentKind, variant: Option<Variant>) -> TrainConfig {
    let mut cfg = TrainConfig { kind, ..spec.train.clone() };
    if let Some(v) = variant {
        cfg.net = cfg.net.with_variant(v);
    }
    cfg
}

/// Train one agent into `dir`: `curves.csv`, `checkpoint.bin`, `config.txt`.
pub fn train_into(spec: &ExperimentSpec, cfg: &TrainConfig, dir: &Path, on_episode: &mut dyn FnMut(&CurveRow)) -> Result<TrainOutput, HarnessError> {
    let out = crate::agent::run_training(&spec.scenario, cfg, spec.seeds[0], None, on_episode);
    let mut csv = Vec::new();
    write_curves_csv(&out.curves, &mut csv)?;
    write_file(&dir.join("curves.csv"), &String::from_utf8_lossy(&csv))?;
    write_file(&dir.join("config.txt"), &format!("{cfg:#?}\n"))?;
    out.learner.checkpoint().save(dir.join("checkpoint.bin"))?;
    Ok(out)
}

/// Train the spec's agent into `out_dir/<agent>`.
pub fn run_train(spec: &ExperimentSpec, on_episode: &mut dyn FnMut(&CurveRow)) -> Result<TrainOutput, HarnessError> {
    let cfg = spec.train.clone();
    train_into(spec, &cfg, &spec.out_dir.join(cfg.kind.name()), on_episode)
}

/// Online network of a checkpoint trained with `cfg`.
pub fn load_network(s: &Scenario, cfg: &TrainConfig, path: &Path) -> Result<Network, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Validation(format!("missing checkpoint {}", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    Ok(Learner::restore(s, cfg.clone(), &ck)?.online)
}

fn push_metrics(table: &mut ResultTable, id: &str, humans: usize, robots: usize, res: &[EpisodeResult]) {
    let col = |f: &dyn Fn(&EpisodeResult) -> f64| res.iter().map(f).collect::<Vec<f64>>();
    table.push(id, humans, robots, "makespan", &col(&|r| r.metrics.makespan as f64));
    table.push(id, humans, robots, "overwork", &col(&|r| r.metrics.overwork as f64));
    table.push(id, humans, robots, "progress", &col(&|r| r.metrics.progress));
    table.push(id, humans, robots, "return", &col(&|r| r.ret));
    table.push(id, humans, robots, "overwork_free", &col(&|r| (r.metrics.overwork == 0) as u8 as f64));
    table.push(id, humans, robots, "unsafe_selections", &col(&|r| r.unsafe_selections as f64));
}

/// Greedy episode with event recording; writes `gantt.csv` and `trace.txt`.
pub fn export_episode(s: &Scenario, net: &Network, rcfg: &RolloutConfig, seed: u64, dir: &Path) -> Result<EpisodeResult, HarnessError> {
    let mut net = net.clone();
    net.freeze_noise();
    let rcfg = RolloutConfig { record: true, ..rcfg.clone() };
    let init = randomize_episode(s, seed)?;
    let mut policy = |d: &Decision| select_action(&net.forward_q(d.obs, d.mask), d.mask);
    let (res, w) = run_episode(s, &init, &rcfg, seed, &mut policy, &mut |_| {});
    write_file(&dir.join("gantt.csv"), &gantt_csv(&w.gantt))?;
    write_file(&dir.join("trace.txt"), &trace_lines(&w.events))?;
    Ok(res)
}

/// Evaluate every agent with a checkpoint under `spec.checkpoints`, plus the
/// random masked policy, over the entity grid. Writes `evaluate.csv` and a
/// Gantt export of the first agent's first episode.
pub fn run_evaluate(spec: &ExperimentSpec) -> Result<ResultTable, HarnessError> {
    let seeds = spec.eval_seeds();
    let mut table = ResultTable::default();
    let mut exported = false;
    for &h in &spec.humans {
        for &r in &spec.robots {
            let s = spec.scenario.clone().with_entity_counts((h, h), (r, r));
            for &kind in &spec.agents {
                let cfg = agent_config(spec, kind, None);
                let path = spec.checkpoints.join(kind.name()).join("checkpoint.bin");
                if !path.exists() {
                    continue;
                }
                let net = load_network(&spec.scenario, &cfg, &path)?;
                let rcfg = cfg.rollout();
                push_metrics(&mut table, kind.name(), h, r, &evaluate(&s, &net, &rcfg, &seeds));
                if !exported {
                    export_episode(&s, &net, &rcfg, seeds[0], &spec.out_dir.join(kind.name()))?;
                    exported = true;
                }
            }
            let rcfg = agent_config(spec, AgentKind::PfCd3q, None).rollout();
            push_metrics(&mut table, "random-masked", h, r, &evaluate_random(&s, &rcfg, &seeds, spec.seeds[0]));
        }
    }
    if table.rows.iter().all(|r| r.config == "random-masked") {
        return Err(HarnessError::Validation(format!("no checkpoints found under {}", spec.checkpoints.display())));
    }
    table.write_csv(&spec.out_dir.join("evaluate.csv"))?;
    Ok(table)
}

/// Evaluate a fixed policy across fatigue limits with masks rebuilt per
/// limit; configs are named `d=<limit>`.
pub fn sensitivity_table(spec: &ExperimentSpec, net: &Network, cfg: &TrainConfig) -> ResultTable {
    let seeds = spec.eval_seeds();
    let mut table = ResultTable::default();
    for &d in &spec.limit_grid {
        let mut rcfg = cfg.rollout();
        rcfg.env.reward.fatigue_limit = d;
        let res = evaluate(&spec.scenario, net, &rcfg, &seeds);
        push_metrics(&mut table, &format!("d={d}"), 1, 1, &res);
    }
    table
}

/// Sensitivity of the spec agent's checkpoint. Writes `sensitivity.csv`.
pub fn run_sensitivity(spec: &ExperimentSpec) -> Result<ResultTable, HarnessError> {
    let cfg = spec.train.clone();
    let net = load_network(&spec.scenario, &cfg, &spec.checkpoints.join(cfg.kind.name()).join("checkpoint.bin"))?;
    let table = sensitivity_table(spec, &net, &cfg);
    table.write_csv(&spec.out_dir.join("sensitivity.csv"))?;
    Ok(table)
}

/// Train and evaluate each architecture variant at equal budget. Writes
/// `ablation.csv` and per-variant training outputs.
pub fn run_ablation(spec: &ExperimentSpec, on_episode: &mut dyn FnMut(Variant, &CurveRow)) -> Result<ResultTable, HarnessError> {
    let seeds = spec.eval_seeds();
    let mut table = ResultTable::default();
    for &v in &spec.variants {
        let cfg = agent_config(spec, spec.train.kind, Some(v));
        let out = train_into(spec, &cfg, &spec.out_dir.join(v.name()), &mut |r| on_episode(v, r))?;
        push_metrics(&mut table, v.name(), 1, 1, &evaluate(&spec.scenario, &out.learner.online, &cfg.rollout(), &seeds));
    }
    table.write_csv(&spec.out_dir.join("ablation.csv"))?;
    Ok(table)
}

pub fn run_latency(spec: &ExperimentSpec) -> Result<super::latency::LatencyReport, HarnessError> {
    let rep = super::latency::run_latency_bench(&spec.scenario, &spec.particle_grid, spec.latency_reps, spec.seeds[0]);
    write_file(&spec.out_dir.join("latency.csv"), &rep.to_csv())?;
    Ok(rep)
}
