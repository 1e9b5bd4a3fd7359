use ergosched::agent::rollout::{run_episode, wait_action, Decision, RolloutConfig};
use ergosched::agent::train::{episode_seed, run_training, Checkpoint, Learner, TrainConfig};
use ergosched::agent::{select_action, AgentKind};
use ergosched::env::Observation;
use ergosched::harness::export::{gantt_csv, gantt_is_consistent, parse_gantt_csv};
use ergosched::harness::reduced_scenario;
use ergosched::scenario::{default_scenario, randomize_episode, Scenario};

fn tiny_config(kind: AgentKind) -> TrainConfig {
    let mut cfg = TrainConfig::desk(kind);
    cfg.episodes = 4;
    cfg.warmup = 32;
    cfg.batch = 8;
    cfg.n_particles = 50;
    cfg
}

/// Observations and masks met by a random masked policy.
fn collect_observations(s: &Scenario, rcfg: &RolloutConfig, n: usize) -> Vec<(Observation, Vec<bool>)> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < n {
        let init = randomize_episode(s, seed).unwrap();
        let mut policy = |d: &Decision| {
            if out.len() < n {
                out.push((d.obs.clone(), d.mask.to_vec()));
            }
            d.mask.iter().position(|&m| m).unwrap()
        };
        run_episode(s, &init, rcfg, seed, &mut policy, &mut |_| {});
        seed += 1;
    }
    out
}

#[test]
fn checkpoint_round_trip_keeps_greedy_actions() {
    let s = reduced_scenario(&default_scenario());
    let cfg = tiny_config(AgentKind::PfCd3q);
    let out = run_training(&s, &cfg, 3, None, &mut |_| {});
    let path = std::env::temp_dir().join(format!("ergosched-pipeline-{}.bin", std::process::id()));
    out.learner.checkpoint().save(&path).unwrap();
    let restored = Learner::restore(&s, cfg.clone(), &Checkpoint::load(&path).unwrap()).unwrap();
    let _ = std::fs::remove_file(&path);

    assert_eq!(restored.steps, out.learner.steps);
    assert_eq!(restored.updates, out.learner.updates);
    let obs = collect_observations(&s, &cfg.rollout(), 100);
    assert_eq!(obs.len(), 100);
    for (o, m) in &obs {
        assert_eq!(restored.greedy(o, m), out.learner.greedy(o, m));
    }

    let mut other = cfg.clone();
    other.lr *= 2.0;
    assert!(Learner::restore(&s, other, &out.learner.checkpoint()).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let s = reduced_scenario(&default_scenario());
    let mut cfg = tiny_config(AgentKind::PfCd3q);
    // The importance-sampling exponent anneals over the planned run length,
    // which differs between the two runs; pin it.
    cfg.per.beta0 = 1.0;
    cfg.per.beta1 = 1.0;
    let full = run_training(&s, &cfg, 5, None, &mut |_| {});

    // `episodes` counts additional episodes, so the second half reuses it.
    cfg.episodes = 2;
    let half = run_training(&s, &cfg, 5, None, &mut |_| {});
    let ck = half.learner.checkpoint();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut learner = Learner::restore(&s, cfg.clone(), &ck).unwrap();
    // The replay buffer is not part of a checkpoint; refill it from the first half.
    learner.buffer = half.learner.buffer;
    let resumed = run_training(&s, &cfg, 5, Some(learner), &mut |_| {});

    assert_eq!(resumed.curves.len(), 2);
    for (a, b) in full.curves[2..].iter().zip(&resumed.curves) {
        assert_eq!(a.episode, b.episode);
        assert_eq!(a.ret.to_bits(), b.ret.to_bits());
        assert_eq!(a.makespan, b.makespan);
    }
}

#[test]
fn gantt_export_is_consistent() {
    let s = reduced_scenario(&default_scenario());
    let rcfg = RolloutConfig { record: true, n_particles: 50, ..RolloutConfig::default() };
    let wait = wait_action(&s);
    for seed in 0..3 {
        let init = randomize_episode(&s, episode_seed(9, seed)).unwrap();
        let mut policy = |d: &Decision| select_action(&vec![0.0; d.mask.len()], d.mask).min(wait);
        let (res, w) = run_episode(&s, &init, &rcfg, seed, &mut policy, &mut |_| {});
        assert_eq!(res.unsafe_selections, 0);
        let rows = parse_gantt_csv(&gantt_csv(&w.gantt)).unwrap();
        assert!(!rows.is_empty());
        assert!(gantt_is_consistent(&rows));
        assert!(rows.iter().all(|r| r.end <= w.tick && r.task < s.tasks.len()));
    }
}
