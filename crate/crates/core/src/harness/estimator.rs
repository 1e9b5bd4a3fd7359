//! Synthetic work/rest traces and the filter comparison studies.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::estimation::{Activity, EstimatorBank, FilterKind, TrueParams};
use crate::fatigue::{self, rest_step, work_step, NoiseConfig};
use crate::scenario::{RestMode, Scenario, SubtaskId};

/// Shape of a synthetic trace: alternating work bursts on one subtask and
/// free rest, until `working_ticks` working ticks have been emitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub work_block: u32,
    pub rest_block: u32,
    pub working_ticks: u32,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            work_block: 4,
            rest_block: 20,
            working_ticks: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub tick: u32,
    pub activity: Activity,
    pub f_true: f64,
    pub z: f64,
}

/// Ground-truth trace with noisy measurements. The first sample is the
/// rested initial state.
pub fn synth_trace(
    subtask: SubtaskId,
    lambda: f64,
    mu: f64,
    cfg: &TraceConfig,
    sigma_m: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TraceSample> {
    let mut f = 0.0;
    let mut out = vec![TraceSample {
        tick: 0,
        activity: Activity::Resting(RestMode::Free),
        f_true: f,
        z: fatigue::measure_fatigue_with(f, sigma_m, rng),
    }];
    let mut worked = 0;
    let mut tick = 0;
    while worked < cfg.working_ticks {
        for _ in 0..cfg.work_block.min(cfg.working_ticks - worked) {
            f = work_step(f, lambda);
            worked += 1;
            tick += 1;
            let z = fatigue::measure_fatigue_with(f, sigma_m, rng);
            out.push(TraceSample { tick, activity: Activity::Working(subtask), f_true: f, z });
        }
        if worked >= cfg.working_ticks {
            break;
        }
        for _ in 0..cfg.rest_block {
            f = rest_step(f, mu);
            tick += 1;
            let z = fatigue::measure_fatigue_with(f, sigma_m, rng);
            out.push(TraceSample { tick, activity: Activity::Resting(RestMode::Free), f_true: f, z });
        }
    }
    out
}

/// Final relative errors of one filter run on one trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceResult {
    pub lambda_est: f64,
    pub mu_est: f64,
    pub lambda_err: f64,
    pub mu_err: f64,
    pub flagged: bool,
}

/// One row of a trace export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub tick: u32,
    pub mode: Activity,
    pub true_param: f64,
    pub estimate: f64,
    pub z: f64,
    pub n_eff: f64,
}

pub fn run_trace(
    kind: FilterKind,
    subtask: SubtaskId,
    lambda: f64,
    mu: f64,
    trace: &[TraceSample],
    noise: &NoiseConfig,
    n_p: usize,
    seed: u64,
    rows: Option<&mut Vec<TraceRow>>,
) -> TraceResult {
    let truth = TrueParams {
        lambda: BTreeMap::from([(subtask, lambda)]),
        mu,
    };
    let mut bank = EstimatorBank::new(&[truth], kind, noise, n_p, 0.0, seed);
    let mut rows = rows;
    for s in trace {
        let rec = bank.observe(0, s.z, s.activity);
        if let Some(rows) = rows.as_deref_mut() {
            let true_param = match s.activity {
                Activity::Working(_) => lambda,
                Activity::Resting(_) => mu,
            };
            rows.push(TraceRow {
                tick: s.tick,
                mode: s.activity,
                true_param,
                estimate: rec.estimate,
                z: s.z,
                n_eff: rec.n_eff,
            });
        }
    }
    let h = &bank.humans[0];
    let l = h.lambda[&subtask].estimate();
    let m = h.mu.estimate();
    TraceResult {
        lambda_est: l,
        mu_est: m,
        lambda_err: (l - lambda).abs() / lambda,
        mu_err: (m - mu).abs() / mu,
        flagged: h.mu.flags + h.lambda[&subtask].flags > 0,
    }
}

/// Aggregate filter errors over the scenario's `λ` table.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub kind: FilterKind,
    pub sigma_m: f64,
    pub lambda_err: f64,
    pub mu_err: f64,
    pub flag_rate: f64,
    pub n: usize,
}

/// Per-run results `[kind][run]` over seeds and the scenario's `λ` table.
/// Runs are ordered by seed, then subtask id.
pub fn filter_runs(
    s: &Scenario,
    kinds: &[FilterKind],
    noise: &NoiseConfig,
    cfg: &TraceConfig,
    n_p: usize,
    seeds: &[u64],
) -> Vec<Vec<(SubtaskId, f64, TraceResult)>> {
    let mu = s.fatigue_table.mu(RestMode::Free);
    let mut out = vec![Vec::new(); kinds.len()];
    for &seed in seeds {
        for (&sub, &lambda) in &s.fatigue_table.lambda {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(sub as u64));
            let trace = synth_trace(sub, lambda, mu, cfg, noise.sigma_m, &mut rng);
            let filter_seed: u64 = rng.gen();
            for (i, &k) in kinds.iter().enumerate() {
                out[i].push((sub, lambda, run_trace(k, sub, lambda, mu, &trace, noise, n_p, filter_seed, None)));
            }
        }
    }
    out
}

pub fn compare_filters(
    s: &Scenario,
    kinds: &[FilterKind],
    noise: &NoiseConfig,
    cfg: &TraceConfig,
    n_p: usize,
    seeds: &[u64],
) -> Vec<FilterSummary> {
    let runs = filter_runs(s, kinds, noise, cfg, n_p, seeds);
    kinds
        .iter()
        .zip(runs)
        .map(|(&kind, r)| {
            let n = r.len().max(1) as f64;
            FilterSummary {
                kind,
                sigma_m: noise.sigma_m,
                lambda_err: r.iter().map(|x| x.2.lambda_err).sum::<f64>() / n,
                mu_err: r.iter().map(|x| x.2.mu_err).sum::<f64>() / n,
                flag_rate: r.iter().filter(|x| x.2.flagged).count() as f64 / n,
                n: r.len(),
            }
        })
        .collect()
}
