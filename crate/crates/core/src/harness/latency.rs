//! Wall-time percentiles for filter updates, task prediction and the network
//! forward pass.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use crate::env::{self, EnvConfig};
use crate::estimation::{build_safe_sets, EstimatorBank, FilterKind, HumanSnapshot};
use crate::neural::{Network, NetworkConfig};
use crate::scenario::{randomize_episode, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub name: String,
    /// Human count, particle count or token count depending on `name`.
    pub param: usize,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn get(&self, name: &str, param: usize) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.name == name && r.param == param)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,param,p50_us,p90_us,p99_us,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.3},{:.3},{:.3},{}", r.name, r.param, r.p50_us, r.p90_us, r.p99_us, r.n);
        }
        s
    }
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn time_us(reps: usize, mut f: impl FnMut()) -> Vec<f64> {
    f();
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e6
        })
        .collect()
}

fn row(name: &str, param: usize, samples: &[f64]) -> LatencyRow {
    LatencyRow {
        name: name.into(),
        param,
        p50_us: percentile(samples, 0.5),
        p90_us: percentile(samples, 0.9),
        p99_us: percentile(samples, 0.99),
        n: samples.len(),
    }
}

fn bank_for(s: &Scenario, humans: usize, n_p: usize, seed: u64) -> (EstimatorBank, crate::scenario::EpisodeInit) {
    let s = s.clone().with_entity_counts((humans, humans), (1, 1));
    let init = randomize_episode(&s, seed).expect("valid scenario");
    let bank = EstimatorBank::for_episode(&s, &init, FilterKind::Pf, &EnvConfig::default().noise, n_p, seed);
    (bank, init)
}

/// One PF weight update across every subtask filter of every human.
pub fn pf_update_samples(s: &Scenario, humans: usize, n_p: usize, reps: usize, seed: u64) -> Vec<f64> {
    let (mut bank, _) = bank_for(s, humans, n_p, seed);
    let mut z = 0.3;
    time_us(reps, || {
        for k in 0..humans {
            bank.update_all(k, z, 0.3);
        }
        z = if z > 0.31 { 0.3 } else { z + 1e-4 };
    })
}

/// Terminal-fatigue prediction of every task for every human.
pub fn prediction_samples(s: &Scenario, humans: usize, reps: usize, seed: u64) -> Vec<f64> {
    let (bank, _) = bank_for(s, humans, 500, seed);
    let snaps: Vec<HumanSnapshot> = (0..humans).map(|_| HumanSnapshot { f_now: 0.2, limit: 0.95, idle: true }).collect();
    let ready: Vec<usize> = (0..s.tasks.len()).collect();
    time_us(reps, || {
        black_box(build_safe_sets(s, &bank, &snaps, &ready));
    })
}

pub fn forward_samples(s: &Scenario, cfg: NetworkConfig, reps: usize, seed: u64) -> (usize, Vec<f64>) {
    let init = randomize_episode(s, seed).expect("valid scenario");
    let ecfg = EnvConfig::default();
    let w = env::reset(s, &init, &ecfg, seed);
    let bank = EstimatorBank::for_episode(s, &init, FilterKind::Pf, &ecfg.noise, 10, seed);
    let obs = env::observe(s, &w, &bank, &ecfg);
    let mask = vec![true; s.tasks.len() + 1];
    let mut net = Network::for_scenario(s, cfg, seed);
    net.freeze_noise();
    let samples = time_us(reps, || {
        black_box(net.forward_q(&obs, &mask));
    });
    (obs.tokens.len(), samples)
}

/// Full benchmark: PF update per human count 1-3 at 500 particles, a
/// particle sweep for one human, the prediction pass and a default-size
/// forward.
pub fn run_latency_bench(s: &Scenario, particle_grid: &[usize], reps: usize, seed: u64) -> LatencyReport {
    let mut rows = Vec::new();
    for humans in 1..=3 {
        rows.push(row("pf_update_humans", humans, &pf_update_samples(s, humans, 500, reps, seed)));
    }
    for &n_p in particle_grid {
        rows.push(row("pf_update_particles", n_p, &pf_update_samples(s, 1, n_p, reps, seed)));
    }
    rows.push(row("task_prediction", 1, &prediction_samples(s, 1, reps, seed)));
    let (tokens, fwd) = forward_samples(s, NetworkConfig::default(), reps.min(100).max(1), seed);
    rows.push(row("network_forward", tokens, &fwd));
    LatencyReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.99), 5.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }
}
