//! Episode driver: decision points, safe-set construction, allocation and
//! transition assembly.

use crate::allocation::allocate;
use crate::env::{self, EnvConfig, Observation, WorldState};
use crate::estimation::{build_safe_sets, EstimatorBank, FilterKind, HumanSnapshot, SafeSets};
use crate::scenario::{EpisodeInit, Scenario, TaskId};

/// How actions are constrained during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub env: EnvConfig,
    pub filter: FilterKind,
    pub n_particles: usize,
    /// Particle roughening after resampling; zero disables it.
    pub jitter: f64,
    /// Restrict choices to the predicted safe set. Otherwise every feasible
    /// task is offered and `penalty` is charged per violation onset.
    pub masked: bool,
    pub penalty: f64,
    pub gamma: f64,
    /// Discount per tick (`γ^k` over a `k`-tick gap) instead of once per
    /// decision.
    pub tick_discount: bool,
    /// Ticks a WAIT lasts when nothing is running. Otherwise WAIT lasts
    /// until a task completes or the offered set changes.
    pub idle_wait: u32,
    /// Keep per-entity trace events in the returned world.
    pub record: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            filter: FilterKind::Pf,
            n_particles: 500,
            jitter: 0.0,
            masked: true,
            penalty: 1.0,
            gamma: 0.99,
            tick_discount: false,
            idle_wait: 10,
            record: false,
        }
    }
}

/// Action-space size: every task plus WAIT, which is the last index.
pub fn n_actions(s: &Scenario) -> usize {
    s.tasks.len() + 1
}

pub fn wait_action(s: &Scenario) -> usize {
    s.tasks.len()
}

/// Sets offered to an unmasked agent: every ready task is feasible for every
/// idle human.
pub fn unconstrained_sets(s: &Scenario, w: &WorldState, ready: &[TaskId]) -> SafeSets {
    let e_safe = w
        .humans
        .iter()
        .map(|h| if h.is_idle() { ready.to_vec() } else { ready.iter().copied().filter(|&t| !s.task_needs_human(t)).collect() })
        .collect();
    SafeSets { e_safe, a_safe: ready.to_vec() }
}

pub fn mask_from_sets(s: &Scenario, sets: &SafeSets) -> Vec<bool> {
    let mut mask = vec![false; n_actions(s)];
    for &t in &sets.a_safe {
        mask[t] = true;
    }
    mask[wait_action(s)] = true;
    mask
}

/// One decision-to-decision transition. `reward` sums the tick rewards up to
/// the next decision point. `discount` is `γ`, or `γ^k` for a `k`-tick gap
/// under tick discounting, and zero at episode end.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub mask: Vec<bool>,
    pub action: usize,
    pub reward: f64,
    pub discount: f64,
    pub next_obs: Option<Observation>,
    pub next_mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeResult {
    /// Environment return without the baseline penalty.
    pub ret: f64,
    /// Return including the penalty that the learner sees.
    pub shaped_ret: f64,
    pub metrics: env::EpisodeMetrics,
    pub decisions: u32,
    /// Selected actions outside the offered set; zero for a correct policy.
    pub unsafe_selections: u32,
}

/// Everything a policy sees at a decision point.
pub struct Decision<'a> {
    pub obs: &'a Observation,
    pub mask: &'a [bool],
    pub sets: &'a SafeSets,
    pub tick: u32,
}

/// Offered sets at the current tick: predicted-safe ones when masked,
/// otherwise all feasible tasks.
pub fn offered_sets(s: &Scenario, w: &WorldState, bank: &EstimatorBank, cfg: &RolloutConfig) -> SafeSets {
    let ready = w.ready_tasks(s);
    if cfg.masked {
        let snaps: Vec<HumanSnapshot> = w
            .humans
            .iter()
            .enumerate()
            .map(|(k, h)| HumanSnapshot { f_now: bank.current_fatigue(k), limit: cfg.env.reward.limit(k), idle: h.is_idle() })
            .collect();
        build_safe_sets(s, bank, &snaps, &ready)
    } else {
        unconstrained_sets(s, w, &ready)
    }
}

/// Run one episode. `policy` returns an action index; `sink` receives every
/// completed transition in order.
pub fn run_episode(
    s: &Scenario,
    init: &EpisodeInit,
    cfg: &RolloutConfig,
    seed: u64,
    policy: &mut dyn FnMut(&Decision) -> usize,
    sink: &mut dyn FnMut(Transition),
) -> (EpisodeResult, WorldState) {
    let mut w = env::reset(s, init, &cfg.env, seed);
    w.record_events = cfg.record;
    let mut bank = EstimatorBank::for_episode(s, init, cfg.filter, &cfg.env.noise, cfg.n_particles, seed ^ 0x9e37_79b9_7f4a_7c15);
    bank.set_jitter(cfg.jitter);
    let wait = wait_action(s);
    let mut pending: Option<Transition> = None;
    let mut gap_discount = 1.0;
    let mut last_mask: Option<Vec<bool>> = None;
    let mut changed = true;
    let mut since_decision = 0u32;
    let mut result = EpisodeResult {
        ret: 0.0,
        shaped_ret: 0.0,
        metrics: w.metrics(s, &cfg.env),
        decisions: 0,
        unsafe_selections: 0,
    };
    loop {
        let sets = offered_sets(s, &w, &bank, cfg);
        let mut action = None;
        let mask = mask_from_sets(s, &sets);
        if !sets.a_safe.is_empty() && (changed || last_mask.as_deref() != Some(mask.as_slice())) {
            let obs = env::observe(s, &w, &bank, &cfg.env);
            if let Some(mut t) = pending.take() {
                t.discount = if cfg.tick_discount { gap_discount } else { cfg.gamma };
                t.next_obs = Some(obs.clone());
                t.next_mask = mask.clone();
                sink(t);
            }
            let a = policy(&Decision { obs: &obs, mask: &mask, sets: &sets, tick: w.tick });
            result.decisions += 1;
            if !mask.get(a).copied().unwrap_or(false) {
                result.unsafe_selections += 1;
            }
            if a != wait && a < s.tasks.len() {
                action = allocate(s, a, &sets, &w).ok();
            }
            last_mask = Some(mask.clone());
            changed = a != wait;
            since_decision = 0;
            pending = Some(Transition { obs, mask, action: a, reward: 0.0, discount: 1.0, next_obs: None, next_mask: Vec::new() });
            gap_discount = 1.0;
        }
        let out = env::step(s, &mut w, action.as_ref(), &cfg.env).expect("allocated actions are valid");
        for (k, (&z, &act)) in out.info.measurements.iter().zip(&out.info.activities).enumerate() {
            bank.observe(k, z, act);
        }
        // With nothing running a held WAIT would never end; it lasts
        // `idle_wait` ticks instead.
        since_decision += 1;
        changed |= !out.info.tasks_completed.is_empty() || (since_decision >= cfg.idle_wait && w.running().next().is_none());
        let shaped = out.reward - if cfg.masked { 0.0 } else { cfg.penalty * out.info.violation_onsets as f64 };
        result.ret += out.reward;
        result.shaped_ret += shaped;
        if let Some(t) = pending.as_mut() {
            t.reward += gap_discount * shaped;
        }
        if cfg.tick_discount {
            gap_discount *= cfg.gamma;
        }
        if out.done {
            if let Some(mut t) = pending.take() {
                t.discount = 0.0;
                sink(t);
            }
            break;
        }
    }
    result.metrics = w.metrics(s, &cfg.env);
    (result, w)
}
