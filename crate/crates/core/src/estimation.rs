//! Online fatigue-parameter estimation and task-level prediction.
//!
//! Each human carries one recovery filter and one accumulation filter per
//! human-performable subtask. Filters share the human's last fatigue
//! prediction as the propagation origin. Safe sets are built from task-level
//! predictions that chain [`simulate_subtask`](crate::fatigue::simulate_subtask)
//! over the current estimates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::fatigue::{self, work_step, rest_step, NoiseConfig, PARAM_FLOOR};
use crate::scenario::{EpisodeInit, RestMode, Scenario, SubtaskId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Lambda(SubtaskId),
    Mu,
}

impl ParamKind {
    #[inline]
    fn propagate(self, f: f64, param: f64) -> f64 {
        match self {
            ParamKind::Lambda(_) => work_step(f, param),
            ParamKind::Mu => rest_step(f, param),
        }
    }

    /// Analytic derivative of one step with respect to the parameter.
    #[inline]
    fn jacobian(self, f: f64, param: f64) -> f64 {
        match self {
            ParamKind::Lambda(_) => (1.0 - f) * (-param).exp(),
            ParamKind::Mu => -f * (-param).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    Pf,
    Kf,
    Ekf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Pf, FilterKind::Kf, FilterKind::Ekf];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Pf => "PF",
            FilterKind::Kf => "KF",
            FilterKind::Ekf => "EKF",
        }
    }
}

/// Result of one filter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutput {
    pub estimate: f64,
    pub f_pred: f64,
    /// Degenerate likelihood (PF) or divergence (KF/EKF).
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: ParamKind,
    /// Relative std of multiplicative roughening applied after resampling.
    pub jitter: f64,
    rng: ChaCha8Rng,
    scratch: Vec<f64>,
}

pub fn init_particles(param0: f64, sigma_particle: f64, n_p: usize, kind: ParamKind, seed: u64) -> ParticleSet {
    assert!(n_p >= 1, "need at least one particle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = param0 * (1.0 - sigma_particle);
    let hi = param0 * (1.0 + sigma_particle);
    let particles = (0..n_p)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { param0 })
        .collect();
    ParticleSet {
        particles,
        weights: vec![1.0 / n_p as f64; n_p],
        kind,
        jitter: 0.0,
        rng,
        scratch: Vec::with_capacity(n_p),
    }
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn estimate(&self) -> f64 {
        self.particles.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    /// Systematic resampling on cumulative weights; resets weights to uniform.
    pub fn resample(&mut self) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let u0 = self.rng.gen::<f64>() * step;
        self.scratch.clear();
        let mut cum = self.weights[0];
        let mut i = 0;
        for m in 0..n {
            let u = u0 + m as f64 * step;
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.weights[i];
            }
            self.scratch.push(self.particles[i]);
        }
        std::mem::swap(&mut self.particles, &mut self.scratch);
        if self.jitter > 0.0 {
            let dist = Normal::new(0.0, self.jitter).expect("finite jitter");
            for p in &mut self.particles {
                *p = (*p * (1.0 + dist.sample(&mut self.rng))).max(PARAM_FLOOR);
            }
        }
        self.weights.fill(step);
    }
}

/// `sigma_m == 0` uses the zero-noise limit of the likelihood: only the
/// particles whose prediction is closest to `z` keep their weight.
pub fn pf_update(ps: &mut ParticleSet, z: f64, f_prev: f64, sigma_m: f64) -> FilterOutput {
    let mut total = 0.0;
    if sigma_m > 0.0 {
        let inv = 1.0 / (2.0 * sigma_m * sigma_m);
        for (p, w) in ps.particles.iter().zip(ps.weights.iter_mut()) {
            let d = z - ps.kind.propagate(f_prev, *p);
            *w *= (-d * d * inv).exp();
            total += *w;
        }
    } else {
        ps.scratch.clear();
        ps.scratch.extend(ps.particles.iter().map(|&p| (z - ps.kind.propagate(f_prev, p)).abs()));
        let best = ps.scratch.iter().cloned().fold(f64::INFINITY, f64::min);
        for (d, w) in ps.scratch.iter().zip(ps.weights.iter_mut()) {
            if *d > best {
                *w = 0.0;
            }
            total += *w;
        }
    }
    let flagged = !(total > 0.0) || !total.is_finite();
    let n = ps.len() as f64;
    if flagged {
        ps.weights.fill(1.0 / n);
    } else {
        for w in &mut ps.weights {
            *w /= total;
        }
        if ps.ess() < n / 2.0 {
            ps.resample();
        }
    }
    let estimate = ps.estimate();
    FilterOutput {
        estimate,
        f_pred: ps.kind.propagate(f_prev, estimate),
        flagged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaussianKind {
    Kf,
    Ekf,
}

/// Scalar Gaussian belief over one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianState {
    pub mean: f64,
    pub var: f64,
    pub kind: ParamKind,
    pub process_var: f64,
    pub diverged: bool,
}

impl GaussianState {
    pub fn new(mean: f64, var: f64, kind: ParamKind) -> Self {
        Self {
            mean,
            var,
            kind,
            process_var: 0.0,
            diverged: false,
        }
    }
}

/// Relative finite-difference step for the KF linearization.
const KF_FD_REL_STEP: f64 = 1e-3;

pub fn gaussian_filter_update(
    kind: GaussianKind,
    st: &mut GaussianState,
    z: f64,
    f_prev: f64,
    sigma_m: f64,
) -> FilterOutput {
    let prior_var = st.var + st.process_var;
    let h0 = st.kind.propagate(f_prev, st.mean);
    let jac = match kind {
        GaussianKind::Ekf => st.kind.jacobian(f_prev, st.mean),
        GaussianKind::Kf => {
            let eps = KF_FD_REL_STEP * st.mean.abs().max(PARAM_FLOOR);
            (st.kind.propagate(f_prev, st.mean + eps) - st.kind.propagate(f_prev, st.mean - eps)) / (2.0 * eps)
        }
    };
    let s = jac * jac * prior_var + sigma_m * sigma_m;
    let gain = if s > 0.0 { prior_var * jac / s } else { 0.0 };
    let mean = st.mean + gain * (z - h0);
    let var = (1.0 - gain * jac) * prior_var;
    if !mean.is_finite() || !var.is_finite() {
        st.diverged = true;
    } else if mean <= 0.0 {
        // Keep the belief usable for propagation; the event still counts as
        // a divergence.
        st.diverged = true;
        st.mean = PARAM_FLOOR;
        st.var = var.max(0.0);
    } else {
        st.mean = mean;
        st.var = var.max(0.0);
    }
    FilterOutput {
        estimate: st.mean,
        f_pred: st.kind.propagate(f_prev, st.mean),
        flagged: st.diverged,
    }
}

/// One parameter filter of any kind.
#[derive(Debug, Clone)]
pub enum ParamFilter {
    Particle(ParticleSet),
    Gaussian(GaussianKind, GaussianState),
}

impl ParamFilter {
    pub fn new(kind: FilterKind, param0: f64, param_kind: ParamKind, noise: &NoiseConfig, n_p: usize, seed: u64) -> Self {
        match kind {
            FilterKind::Pf => ParamFilter::Particle(init_particles(param0, noise.sigma_particle, n_p, param_kind, seed)),
            FilterKind::Kf | FilterKind::Ekf => {
                let g = if kind == FilterKind::Kf { GaussianKind::Kf } else { GaussianKind::Ekf };
                let sd = noise.sigma_init * param0;
                ParamFilter::Gaussian(g, GaussianState::new(param0, sd * sd, param_kind))
            }
        }
    }

    pub fn estimate(&self) -> f64 {
        match self {
            ParamFilter::Particle(p) => p.estimate(),
            ParamFilter::Gaussian(_, g) => g.mean,
        }
    }

    pub fn update(&mut self, z: f64, f_prev: f64, sigma_m: f64) -> FilterOutput {
        match self {
            ParamFilter::Particle(p) => pf_update(p, z, f_prev, sigma_m),
            ParamFilter::Gaussian(k, g) => gaussian_filter_update(*k, g, z, f_prev, sigma_m),
        }
    }

    pub fn n_eff(&self) -> f64 {
        match self {
            ParamFilter::Particle(p) => p.ess(),
            ParamFilter::Gaussian(..) => f64::NAN,
        }
    }
}

/// A filter plus the prior it starts from.
#[derive(Debug, Clone)]
pub struct TrackedParam {
    pub prior: f64,
    pub filter: ParamFilter,
    pub updates: u64,
    pub flags: u64,
}

impl TrackedParam {
    /// The prior until the first update, the filter estimate afterwards.
    pub fn estimate(&self) -> f64 {
        if self.updates == 0 {
            self.prior
        } else {
            self.filter.estimate()
        }
    }
}

/// What a human did during the tick that produced a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Working(SubtaskId),
    Resting(RestMode),
}

#[derive(Debug, Clone)]
pub struct HumanEstimator {
    pub mu: TrackedParam,
    pub lambda: BTreeMap<SubtaskId, TrackedParam>,
    pub f_pred: Option<f64>,
    pub last_z: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EstimatorBank {
    pub kind: FilterKind,
    pub sigma_m: f64,
    pub delta_eff: f64,
    pub humans: Vec<HumanEstimator>,
}

/// True per-human parameters: `λ` per human subtask (type multiplier
/// applied) and the free-mode `µ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParams {
    pub lambda: BTreeMap<SubtaskId, f64>,
    pub mu: f64,
}

impl TrueParams {
    pub fn for_human(s: &Scenario, multiplier: f64) -> Self {
        Self {
            lambda: s.fatigue_table.lambda.iter().map(|(&k, &v)| (k, v * multiplier)).collect(),
            mu: s.fatigue_table.mu(RestMode::Free),
        }
    }
}

impl HumanEstimator {
    pub fn new(truth: &TrueParams, kind: FilterKind, noise: &NoiseConfig, n_p: usize, rng: &mut ChaCha8Rng) -> Self {
        let make = |p: f64, pk: ParamKind, rng: &mut ChaCha8Rng| {
            let prior = fatigue::perturb_params_with(&[p], noise.sigma_init, rng)[0];
            TrackedParam {
                prior,
                filter: ParamFilter::new(kind, prior, pk, noise, n_p, rng.gen()),
                updates: 0,
                flags: 0,
            }
        };
        let mu = make(truth.mu, ParamKind::Mu, rng);
        let lambda = truth
            .lambda
            .iter()
            .map(|(&s, &l)| (s, make(l, ParamKind::Lambda(s), rng)))
            .collect();
        Self {
            mu,
            lambda,
            f_pred: None,
            last_z: None,
        }
    }
}

/// Per-update record for trace export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub kind: Option<ParamKind>,
    pub estimate: f64,
    pub f_pred: f64,
    pub n_eff: f64,
    pub flagged: bool,
}

impl EstimatorBank {
    pub fn new(truths: &[TrueParams], kind: FilterKind, noise: &NoiseConfig, n_p: usize, delta_eff: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let humans = truths
            .iter()
            .map(|t| HumanEstimator::new(t, kind, noise, n_p, &mut rng))
            .collect();
        Self {
            kind,
            sigma_m: noise.sigma_m,
            delta_eff,
            humans,
        }
    }

    /// Bank for an episode: priors perturbed from each human's true values.
    pub fn for_episode(s: &Scenario, init: &EpisodeInit, kind: FilterKind, noise: &NoiseConfig, n_p: usize, seed: u64) -> Self {
        let truths: Vec<TrueParams> = init.humans.iter().map(|h| TrueParams::for_human(s, h.multiplier)).collect();
        Self::new(&truths, kind, noise, n_p, s.fatigue_table.delta_eff, seed)
    }

    /// Enable multiplicative roughening after resampling on every particle
    /// filter of the bank.
    pub fn set_jitter(&mut self, jitter: f64) {
        for h in &mut self.humans {
            for t in std::iter::once(&mut h.mu).chain(h.lambda.values_mut()) {
                if let ParamFilter::Particle(p) = &mut t.filter {
                    p.jitter = jitter;
                }
            }
        }
    }

    pub fn n_humans(&self) -> usize {
        self.humans.len()
    }

    /// Feed one measurement taken after a tick of `activity`.
    ///
    /// Accumulation filters update on working ticks and the recovery filter
    /// on free or waiting ticks. Walking recovers at a different rate than
    /// the filtered one, so walking ticks re-anchor the prediction on the
    /// measurement instead.
    pub fn observe(&mut self, human: usize, z: f64, activity: Activity) -> UpdateRecord {
        let sigma_m = self.sigma_m;
        let h = &mut self.humans[human];
        h.last_z = Some(z);
        let Some(f_prev) = h.f_pred else {
            h.f_pred = Some(z);
            return UpdateRecord { kind: None, estimate: f64::NAN, f_pred: z, n_eff: f64::NAN, flagged: false };
        };
        let tracked = match activity {
            Activity::Working(s) => h.lambda.get_mut(&s),
            Activity::Resting(RestMode::Free | RestMode::Waiting) => Some(&mut h.mu),
            Activity::Resting(RestMode::Walking) => None,
        };
        let Some(t) = tracked else {
            h.f_pred = Some(z);
            return UpdateRecord { kind: None, estimate: f64::NAN, f_pred: z, n_eff: f64::NAN, flagged: false };
        };
        let out = t.filter.update(z, f_prev, sigma_m);
        t.updates += 1;
        t.flags += out.flagged as u64;
        let kind = match &t.filter {
            ParamFilter::Particle(p) => p.kind,
            ParamFilter::Gaussian(_, g) => g.kind,
        };
        let rec = UpdateRecord { kind: Some(kind), estimate: out.estimate, f_pred: out.f_pred, n_eff: t.filter.n_eff(), flagged: out.flagged };
        h.f_pred = Some(out.f_pred);
        rec
    }

    pub fn lambda_estimate(&self, human: usize, subtask: SubtaskId) -> Option<f64> {
        self.humans[human].lambda.get(&subtask).map(TrackedParam::estimate)
    }

    pub fn mu_estimate(&self, human: usize) -> f64 {
        self.humans[human].mu.estimate()
    }

    /// Latest measurement, or zero before any.
    pub fn current_fatigue(&self, human: usize) -> f64 {
        self.humans[human].last_z.unwrap_or(0.0)
    }

    /// Update every filter of one human with the same measurement; used for
    /// latency measurement.
    pub fn update_all(&mut self, human: usize, z: f64, f_prev: f64) {
        let sigma_m = self.sigma_m;
        let h = &mut self.humans[human];
        h.mu.filter.update(z, f_prev, sigma_m);
        for t in h.lambda.values_mut() {
            t.filter.update(z, f_prev, sigma_m);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskPrediction {
    pub human: usize,
    pub task: TaskId,
    pub ticks: u32,
    pub f_end: f64,
}

/// Chain the closed-loop subtask model over the human subtasks of a task
/// with the human's current estimates. Travel, waiting and time noise are
/// ignored.
pub fn predict_task(s: &Scenario, human: usize, task: TaskId, bank: &EstimatorBank, f_now: f64) -> TaskPrediction {
    let mut f = f_now;
    let mut ticks = 0u32;
    for &sid in &s.tasks[task].subtasks {
        let sub = &s.subtasks[sid];
        if !sub.performer.needs_human() {
            continue;
        }
        let lambda = bank.lambda_estimate(human, sid).expect("validated scenario has a lambda per human subtask");
        let (n, f_end) = fatigue::simulate_subtask_unchecked(f, sub.static_time as f64, lambda.max(PARAM_FLOOR), bank.delta_eff)
            .expect("positive rates complete");
        ticks += n;
        f = f_end;
    }
    TaskPrediction { human, task, ticks, f_end: f }
}

/// Snapshot of one human used to build safe sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanSnapshot {
    pub f_now: f64,
    pub limit: f64,
    pub idle: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SafeSets {
    /// Per human, fatigue-feasible task ids in ascending order.
    pub e_safe: Vec<Vec<TaskId>>,
    /// Safe plannable tasks; WAIT is implicit and always allowed.
    pub a_safe: Vec<TaskId>,
}

impl SafeSets {
    pub fn contains(&self, task: TaskId) -> bool {
        self.a_safe.binary_search(&task).is_ok()
    }

    pub fn human_safe(&self, human: usize, task: TaskId) -> bool {
        self.e_safe[human].binary_search(&task).is_ok()
    }
}

/// `ready` lists tasks whose dependencies and non-human resources are met.
/// A task needing a human enters `E_safe_k` only for idle humans whose
/// predicted terminal fatigue stays below their limit; a task without human
/// subtasks enters `E_safe_k` whenever the human's current fatigue is below
/// the limit.
pub fn build_safe_sets(s: &Scenario, bank: &EstimatorBank, humans: &[HumanSnapshot], ready: &[TaskId]) -> SafeSets {
    let mut e_safe = vec![Vec::new(); humans.len()];
    let mut a_safe = Vec::new();
    let mut sorted = ready.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &task in &sorted {
        let needs_human = s.task_needs_human(task);
        let mut any = false;
        for (k, h) in humans.iter().enumerate() {
            if needs_human && !h.idle {
                continue;
            }
            let pred = predict_task(s, k, task, bank, h.f_now);
            if pred.f_end < h.limit {
                e_safe[k].push(task);
                any = true;
            }
        }
        if any {
            a_safe.push(task);
        }
    }
    SafeSets { e_safe, a_safe }
}
