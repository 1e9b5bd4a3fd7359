//! Ground-truth fatigue and recovery dynamics.
//!
//! Fatigue `F` lives in `[0, 1)`. Working with rate `λ` moves it toward 1,
//! resting with rate `µ` decays it toward 0. Efficiency drops logarithmically
//! with fatigue through `δ_eff`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Largest representable value below one.
pub const F_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Floor applied to perturbed parameters so they stay positive.
pub const PARAM_FLOOR: f64 = 1e-6;

/// Slack on the progress completion test; the float sum of `1/τ` can land
/// a few ulps below one.
pub const PROGRESS_EPS: f64 = 1e-9;

pub const MAX_SUBTASK_TICKS: u32 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FatigueError {
    #[error("fatigue {0} outside [0, 1)")]
    OutOfRange(f64),
    #[error("rate {0} must be positive")]
    NonPositiveRate(f64),
    #[error("subtask did not complete within {MAX_SUBTASK_TICKS} ticks")]
    Diverged,
}

/// Fatigue level of one human.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct FatigueState(f64);

impl FatigueState {
    pub const ZERO: FatigueState = FatigueState(0.0);

    pub fn new(f: f64) -> Result<Self, FatigueError> {
        if (0.0..1.0).contains(&f) {
            Ok(Self(f))
        } else {
            Err(FatigueError::OutOfRange(f))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FatigueMode {
    Working(f64),
    Resting(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_init: f64,
    pub sigma_time: f64,
    pub sigma_particle: f64,
    pub sigma_m: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_init: 0.2,
            sigma_time: 0.1,
            sigma_particle: 0.3,
            sigma_m: 5e-5,
        }
    }
}

/// One working tick without domain checks. Also used by the filters, which
/// evaluate hypotheses that may sit outside the physical domain.
#[inline]
pub fn work_step(f: f64, lambda: f64) -> f64 {
    let next = f + (1.0 - f) * (-(-lambda).exp_m1());
    if next >= 1.0 && f < 1.0 {
        F_MAX
    } else {
        next
    }
}

#[inline]
pub fn rest_step(f: f64, mu: f64) -> f64 {
    f * (-mu).exp()
}

#[inline]
pub fn propagate(f: f64, mode: FatigueMode) -> f64 {
    match mode {
        FatigueMode::Working(l) => work_step(f, l),
        FatigueMode::Resting(m) => rest_step(f, m),
    }
}

pub fn fatigue_step(f: FatigueState, mode: FatigueMode) -> Result<FatigueState, FatigueError> {
    let rate = match mode {
        FatigueMode::Working(r) | FatigueMode::Resting(r) => r,
    };
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(FatigueError::NonPositiveRate(rate));
    }
    FatigueState::new(f.0)?;
    Ok(FatigueState(propagate(f.0, mode)))
}

/// Returns `(τ_scaled, efficiency)`.
#[inline]
pub fn scaled_completion_time(tau: f64, delta_eff: f64, f: f64) -> (f64, f64) {
    let scaled = tau * (1.0 + delta_eff * f.ln_1p());
    (scaled, 1.0 / scaled)
}

/// Closed-loop subtask duration: each tick applies one working step, then
/// adds the efficiency at the new fatigue level to the progress.
pub fn simulate_subtask(
    f0: f64,
    tau: f64,
    lambda: f64,
    delta_eff: f64,
) -> Result<(u32, f64), FatigueError> {
    FatigueState::new(f0)?;
    if !(lambda > 0.0) {
        return Err(FatigueError::NonPositiveRate(lambda));
    }
    Ok(simulate_subtask_unchecked(f0, tau, lambda, delta_eff)?)
}

pub(crate) fn simulate_subtask_unchecked(
    f0: f64,
    tau: f64,
    lambda: f64,
    delta_eff: f64,
) -> Result<(u32, f64), FatigueError> {
    let mut f = f0;
    let mut progress = 0.0;
    let mut ticks = 0u32;
    while progress < 1.0 - PROGRESS_EPS {
        if ticks >= MAX_SUBTASK_TICKS {
            return Err(FatigueError::Diverged);
        }
        f = work_step(f, lambda);
        progress += scaled_completion_time(tau, delta_eff, f).1;
        ticks += 1;
    }
    Ok((ticks, f))
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

pub fn perturb_params_with<R: Rng>(params: &[f64], sigma_init: f64, rng: &mut R) -> Vec<f64> {
    let dist = normal(sigma_init);
    params
        .iter()
        .map(|&p| (p * (1.0 + dist.sample(rng))).max(PARAM_FLOOR))
        .collect()
}

/// Multiplicative Gaussian perturbation of each parameter.
pub fn perturb_params(params: &[f64], sigma_init: f64, seed: u64) -> Vec<f64> {
    perturb_params_with(params, sigma_init, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn randomize_exec_time_with<R: Rng>(
    subtime: u32,
    sigma_time: f64,
    t_travel: u32,
    rng: &mut R,
) -> u32 {
    let n = normal(sigma_time).sample(rng);
    let base = (subtime as f64 * (1.0 + n)).round().max(1.0) as u32;
    base + t_travel
}

pub fn randomize_exec_time(subtime: u32, sigma_time: f64, t_travel: u32, seed: u64) -> u32 {
    randomize_exec_time_with(subtime, sigma_time, t_travel, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn measure_fatigue_with<R: Rng>(f: f64, sigma_m: f64, rng: &mut R) -> f64 {
    f + normal(sigma_m).sample(rng)
}

pub fn measure_fatigue(f: f64, sigma_m: f64, seed: u64) -> f64 {
    measure_fatigue_with(f, sigma_m, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_examples() {
        let rest = |f, m| fatigue_step(FatigueState::new(f).unwrap(), FatigueMode::Resting(m)).unwrap().value();
        let work = |f, l| fatigue_step(FatigueState::new(f).unwrap(), FatigueMode::Working(l)).unwrap().value();
        assert_eq!(rest(0.0, 0.015), 0.0);
        // 0.5 + 0.5 (1 - e^-0.12) and 0.5 e^-0.015, evaluated at 30 digits.
        assert!((work(0.5, 0.12) - 0.556_539_781_641_421_2).abs() < 1e-15);
        assert!((rest(0.5, 0.015) - 0.492_555_969_801_531_3).abs() < 1e-15);
    }

    #[test]
    fn step_domain_errors() {
        let f = FatigueState::new(0.3).unwrap();
        assert!(FatigueState::new(1.0).is_err());
        assert!(FatigueState::new(-0.1).is_err());
        assert_eq!(fatigue_step(f, FatigueMode::Working(0.0)), Err(FatigueError::NonPositiveRate(0.0)));
        assert!(fatigue_step(f, FatigueMode::Resting(-1.0)).is_err());
    }

    #[test]
    fn step_near_one_stays_below_one() {
        let f = FatigueState::new(F_MAX).unwrap();
        let next = fatigue_step(f, FatigueMode::Working(5.0)).unwrap();
        assert!(next.value() < 1.0);
    }

    #[test]
    fn scaled_time_examples() {
        assert_eq!(scaled_completion_time(10.0, 0.3, 0.0), (10.0, 0.1));
        let (t, e) = scaled_completion_time(10.0, 0.3, F_MAX);
        assert!((t - 10.0 * (1.0 + 0.3 * std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((t - 12.079442).abs() < 1e-6);
        assert!((e - 0.0827853).abs() < 1e-7);
        assert_eq!(scaled_completion_time(10.0, 0.0, 0.7), (10.0, 0.1));
    }

    #[test]
    fn subtask_limits() {
        let (n, f) = simulate_subtask(0.0, 10.0, 1e-12, 0.3).unwrap();
        assert_eq!(n, 10);
        assert!(f < 1e-10);
        let low = simulate_subtask(0.0, 10.0, 0.12, 0.3).unwrap().0;
        let high = simulate_subtask(0.8, 10.0, 0.12, 0.3).unwrap().0;
        assert!(high >= low);
        assert!(simulate_subtask(1.0, 10.0, 0.12, 0.3).is_err());
    }

    #[test]
    fn subtask_matches_replay() {
        let (n, f) = simulate_subtask(0.0, 10.0, 0.12, 0.3).unwrap();
        let mut g = 0.0f64;
        let mut p = 0.0f64;
        let mut k = 0;
        while p < 1.0 - 1e-9 {
            g = 1.0 - (1.0 - g) * (-0.12f64).exp();
            p += 1.0 / (10.0 * (1.0 + 0.3 * (1.0 + g).ln()));
            k += 1;
        }
        assert_eq!(n, k);
        assert!((f - g).abs() < 1e-12);
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let p = [0.12, 0.36, 0.015];
        assert_eq!(perturb_params(&p, 0.0, 9), p.to_vec());
    }

    #[test]
    fn perturb_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| perturb_params_with(&[0.36], 0.2, &mut rng)[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean / 0.36 - 1.0).abs() < 0.01);
        assert!((var.sqrt() / 0.072 - 1.0).abs() < 0.05);
    }

    #[test]
    fn perturb_floor() {
        let out = perturb_params(&[0.1; 200], 5.0, 3);
        assert!(out.iter().any(|&v| v == PARAM_FLOOR));
        assert!(out.iter().all(|&v| v >= PARAM_FLOOR));
    }

    #[test]
    fn exec_time_behaviour() {
        assert_eq!(randomize_exec_time(17, 0.0, 0, 1), 17);
        assert_eq!(randomize_exec_time(1, 50.0, 4, 0).min(5), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..10_000)
            .map(|_| randomize_exec_time_with(100, 0.1, 0, &mut rng) as f64)
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((sd - 10.0).abs() < 0.5, "{sd}");
    }

    #[test]
    fn exec_time_floor_on_negative_draw() {
        for seed in 0..200 {
            assert!(randomize_exec_time(1, 3.0, 2, seed) >= 3);
        }
    }

    #[test]
    fn measurement_statistics() {
        assert_eq!(measure_fatigue(0.4, 0.0, 1), 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..10_000).map(|_| measure_fatigue_with(0.5, 5e-5, &mut rng)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((sd / 5e-5 - 1.0).abs() < 0.05);
        assert_ne!(measure_fatigue(0.5, 5e-5, 1), measure_fatigue(0.5, 5e-5, 2));
    }

    proptest! {
        #[test]
        fn work_step_monotone_and_bounded(a in 0.0f64..0.999, b in 0.0f64..0.999, l in 1e-4f64..3.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let fl = work_step(lo, l);
            let fh = work_step(hi, l);
            prop_assert!(fl <= fh);
            if lo < hi { prop_assert!(fl < fh || fh == F_MAX); }
            prop_assert!((0.0..1.0).contains(&fh));
        }

        #[test]
        fn rest_composition(f in 0.0f64..0.999, mu in 1e-4f64..0.5, n in 1u32..50) {
            let mut g = f;
            for _ in 0..n { g = rest_step(g, mu); }
            let once = rest_step(f, mu * n as f64);
            prop_assert!((g - once).abs() <= 1e-12 * once.abs().max(1e-300));
        }

        #[test]
        fn no_coupling_takes_ceil_tau(tau in 1u32..200, l in 1e-4f64..1.0, f0 in 0.0f64..0.99) {
            let (n, _) = simulate_subtask(f0, tau as f64, l, 0.0).unwrap();
            prop_assert_eq!(n, tau);
        }

        #[test]
        fn efficiency_non_increasing(a in 0.0f64..0.999, b in 0.0f64..0.999, d in 0.0f64..2.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(scaled_completion_time(7.0, d, hi).1 <= scaled_completion_time(7.0, d, lo).1);
        }
    }
}
