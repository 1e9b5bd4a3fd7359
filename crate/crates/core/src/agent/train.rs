//! Training loop, evaluation and agent checkpoints.

use std::cell::RefCell;
use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, Adam};
use super::replay::{PerConfig, ReplayBuffer, Stored};
use super::rollout::{run_episode, Decision, EpisodeResult, RolloutConfig, Transition};
use super::{random_masked_action, select_action, td_target, AgentKind};
use crate::env::EnvConfig;
use crate::estimation::FilterKind;
use crate::neural::params::{read_u32, read_u64};
use crate::neural::{CheckpointError, Network, NetworkConfig, Params};
use crate::scenario::{randomize_episode, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: AgentKind,
    pub net: NetworkConfig,
    pub lr: f64,
    pub batch: usize,
    pub gamma: f64,
    /// Discount per tick rather than per decision point.
    pub tick_discount: bool,
    pub idle_wait: u32,
    /// Decision steps collected before the first update.
    pub warmup: u64,
    /// After warmup, `burst` updates run every `update_period` steps.
    pub update_period: u64,
    pub burst: u32,
    /// Target replacement period in gradient updates.
    pub target_period: u64,
    pub episodes: u32,
    pub buffer_capacity: usize,
    pub per: PerConfig,
    /// Reward charged per violation onset for unmasked kinds.
    pub penalty: f64,
    pub grad_clip: f64,
    /// Epsilon-greedy schedule, used only when the network has no noisy
    /// layers. Decays linearly over `eps_decay` of the episodes.
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay: f64,
    pub env: EnvConfig,
    pub filter: FilterKind,
    pub n_particles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::PfCd3q,
            net: NetworkConfig::default(),
            lr: 1e-4,
            batch: 512,
            gamma: 0.99,
            tick_discount: false,
            idle_wait: 10,
            warmup: 50_000,
            update_period: 400,
            burst: 50,
            target_period: 2_000,
            episodes: 1_000,
            buffer_capacity: 500_000,
            per: PerConfig::default(),
            penalty: 1.0,
            grad_clip: 10.0,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay: 0.5,
            env: EnvConfig::default(),
            filter: FilterKind::Pf,
            n_particles: 500,
        }
    }
}

impl TrainConfig {
    /// Sizes that train on the reduced scenario within minutes on one core.
    pub fn desk(kind: AgentKind) -> Self {
        let mut env = EnvConfig::default();
        env.reward.horizon = 800;
        Self {
            kind,
            net: NetworkConfig { d_model: 32, heads: 4, layers: 1, ..NetworkConfig::default() },
            lr: 5e-4,
            gamma: 0.95,
            batch: 32,
            warmup: 256,
            update_period: 4,
            burst: 1,
            target_period: 250,
            episodes: 300,
            buffer_capacity: 50_000,
            env,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.net.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.update_period == 0 || self.target_period == 0 || self.burst == 0 {
            return Err("periods must be at least 1".into());
        }
        if self.batch == 0 || self.buffer_capacity == 0 {
            return Err("batch and buffer capacity must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.penalty >= 0.0) {
            return Err("lr must be positive and penalty non-negative".into());
        }
        Ok(())
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            env: self.env.clone(),
            filter: self.filter,
            n_particles: self.n_particles,
            jitter: 0.0,
            masked: self.kind.masked(),
            penalty: self.penalty,
            gamma: self.gamma,
            tick_discount: self.tick_discount,
            idle_wait: self.idle_wait,
            record: false,
        }
    }

    /// FNV-1a over the configuration without the episode budget, so a
    /// checkpoint can be resumed with a longer run.
    pub fn hash(&self) -> u64 {
        let text = format!("{:?}", TrainConfig { episodes: 0, ..self.clone() });
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

/// Per-episode seed derived from a run seed.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    let mut z = seed.wrapping_add(episode.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: u32,
    pub ret: f64,
    pub shaped_ret: f64,
    pub makespan: u32,
    pub overwork: u32,
    pub progress: f64,
    /// True when exploration came from noisy layers rather than epsilon.
    pub noisy: bool,
    pub decisions: u32,
    pub unsafe_selections: u32,
    pub mean_loss: f64,
}

pub fn write_curves_csv<W: Write>(rows: &[CurveRow], w: &mut W) -> io::Result<()> {
    writeln!(w, "episode,return,shaped_return,makespan,overwork,progress,noisy,decisions,unsafe_selections,mean_loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode, r.ret, r.shaped_ret, r.makespan, r.overwork, r.progress, r.noisy as u8, r.decisions, r.unsafe_selections, r.mean_loss
        )?;
    }
    Ok(())
}

/// Online and target networks with optimizer, replay and counters.
#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: TrainConfig,
    pub online: Network,
    pub target: Network,
    pub adam: Adam,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub steps: u64,
    pub updates: u64,
    pub episodes: u32,
}

impl Learner {
    pub fn new(s: &Scenario, cfg: TrainConfig, seed: u64) -> Self {
        let online = Network::for_scenario(s, cfg.kind.network(&cfg.net), seed);
        let target = online.clone();
        let adam = Adam::new(&online.params, cfg.lr);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity, cfg.per);
        Self { online, target, adam, buffer, rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), steps: 0, updates: 0, episodes: 0, cfg }
    }

    pub fn noisy(&self) -> bool {
        self.online.n_noisy_layers() > 0
    }

    fn epsilon(&self) -> f64 {
        if self.noisy() {
            return 0.0;
        }
        let span = (self.cfg.eps_decay * self.cfg.episodes as f64).max(1.0);
        let t = (self.episodes as f64 / span).min(1.0);
        self.cfg.eps_start + (self.cfg.eps_end - self.cfg.eps_start) * t
    }

    /// Exploring action: uniform during warmup, then fresh layer noise, or
    /// epsilon-greedy without noisy layers.
    pub fn explore(&mut self, d: &Decision) -> usize {
        if self.steps < self.cfg.warmup {
            random_masked_action(d.mask, &mut self.rng)
        } else if self.noisy() {
            self.online.sample_noise(&mut self.rng);
            select_action(&self.online.forward_q(d.obs, d.mask), d.mask)
        } else if self.rng.gen::<f64>() < self.epsilon() {
            random_masked_action(d.mask, &mut self.rng)
        } else {
            select_action(&self.online.forward_q(d.obs, d.mask), d.mask)
        }
    }

    /// Greedy action with noise frozen at zero; does not touch the rng.
    pub fn greedy(&self, obs: &crate::env::Observation, mask: &[bool]) -> usize {
        let mut net = self.online.clone();
        net.freeze_noise();
        select_action(&net.forward_q(obs, mask), mask)
    }

    /// Insert a transition and run the scheduled updates. Returns the losses
    /// of the updates performed.
    pub fn observe(&mut self, t: Stored, beta: f64) -> Vec<f64> {
        self.buffer.push(t);
        self.steps += 1;
        let mut losses = Vec::new();
        if self.steps >= self.cfg.warmup && self.steps % self.cfg.update_period == 0 && self.buffer.len() >= self.cfg.batch {
            for _ in 0..self.cfg.burst {
                losses.push(self.train_step(beta));
            }
        }
        losses
    }

    /// One prioritized minibatch update; returns the weighted loss.
    pub fn train_step(&mut self, beta: f64) -> f64 {
        let sample = self.buffer.sample(self.cfg.batch, beta, &mut self.rng);
        if self.noisy() {
            self.online.sample_noise(&mut self.rng);
            self.target.sample_noise(&mut self.rng);
        }
        let (loss, grads, td) = batch_loss(&self.online, &self.target, &self.buffer, &sample.indices, &sample.weights, self.cfg.kind.double());
        let mut grads = grads;
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.adam.step(&mut self.online.params, &grads);
        self.buffer.update(&sample.indices, &td);
        self.updates += 1;
        if self.updates % self.cfg.target_period == 0 {
            self.target.params.copy_from(&self.online.params);
        }
        loss
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            online: self.online.params.clone(),
            target: self.target.params.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_t: self.adam.t,
            steps: self.steps,
            updates: self.updates,
            episodes: self.episodes,
            rng: self.rng.clone(),
        }
    }

    /// Rebuild a learner from a checkpoint taken with the same configuration.
    /// The replay buffer starts empty.
    pub fn restore(s: &Scenario, cfg: TrainConfig, ck: &Checkpoint) -> Result<Self, CheckpointError> {
        if ck.config_hash != cfg.hash() {
            return Err(CheckpointError::Layout);
        }
        let mut l = Learner::new(s, cfg, 0);
        for (dst, src) in [(&mut l.online.params, &ck.online), (&mut l.target.params, &ck.target), (&mut l.adam.m, &ck.adam_m), (&mut l.adam.v, &ck.adam_v)] {
            if !dst.same_layout(src) {
                return Err(CheckpointError::Layout);
            }
            dst.copy_from(src);
        }
        l.adam.t = ck.adam_t;
        l.steps = ck.steps;
        l.updates = ck.updates;
        l.episodes = ck.episodes;
        l.rng = ck.rng.clone();
        Ok(l)
    }
}

/// Weighted squared TD loss over replay slots, its gradient with respect to
/// the online parameters and the absolute TD errors.
pub fn batch_loss(online: &Network, target: &Network, buffer: &ReplayBuffer, indices: &[usize], weights: &[f64], double: bool) -> (f64, Params, Vec<f64>) {
    let n = indices.len() as f64;
    let mut grads = online.params.zeros_like();
    let mut loss = 0.0;
    let mut td = Vec::with_capacity(indices.len());
    for (&i, &w) in indices.iter().zip(weights) {
        let t = buffer.get(i);
        let y = match &t.next_obs {
            Some(next) if t.discount > 0.0 => {
                let tq = target.forward_q(next, &t.next_mask);
                let oq = if double { online.forward_q(next, &t.next_mask) } else { Vec::new() };
                td_target(t.reward, t.discount, &oq, &tq, &t.next_mask, double)
            }
            _ => t.reward,
        };
        let mut err = 0.0;
        online.backward(
            &t.obs,
            &t.mask,
            |q| {
                err = q[t.action] - y;
                let mut g = vec![0.0; q.len()];
                g[t.action] = 2.0 * w * err / n;
                g
            },
            &mut grads,
        );
        loss += w * err * err / n;
        td.push(err.abs());
    }
    (loss, grads, td)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub learner: Learner,
    pub curves: Vec<CurveRow>,
}

impl TrainOutput {
    pub fn unsafe_selections(&self) -> u64 {
        self.curves.iter().map(|r| r.unsafe_selections as u64).sum()
    }
}

/// Train `cfg.episodes` episodes starting from `learner` (or a fresh one).
/// `on_episode` sees every curve row as it is produced.
pub fn run_training(s: &Scenario, cfg: &TrainConfig, seed: u64, learner: Option<Learner>, on_episode: &mut dyn FnMut(&CurveRow)) -> TrainOutput {
    let learner = RefCell::new(learner.unwrap_or_else(|| Learner::new(s, cfg.clone(), seed)));
    let rcfg = cfg.rollout();
    let mut curves = Vec::new();
    let start = learner.borrow().episodes;
    for ep in start..start + cfg.episodes {
        let eseed = episode_seed(seed, ep as u64);
        let init = randomize_episode(s, eseed).expect("scenario validated");
        let beta = {
            let l = learner.borrow();
            l.buffer.beta(ep as f64 / (start + cfg.episodes).max(1) as f64)
        };
        let losses = RefCell::new(Vec::new());
        let mut prev_next: Option<Arc<crate::env::Observation>> = None;
        let mut policy = |d: &Decision| learner.borrow_mut().explore(d);
        let mut sink = |t: Transition| {
            let obs = match prev_next.take() {
                Some(a) if *a == t.obs => a,
                _ => Arc::new(t.obs),
            };
            let next_obs = t.next_obs.map(Arc::new);
            prev_next = next_obs.clone();
            let stored = Stored { obs, mask: t.mask, action: t.action, reward: t.reward, discount: t.discount, next_obs, next_mask: t.next_mask };
            let l = learner.borrow_mut().observe(stored, beta);
            losses.borrow_mut().extend(l);
        };
        let (res, _) = run_episode(s, &init, &rcfg, eseed, &mut policy, &mut sink);
        let mut l = learner.borrow_mut();
        l.episodes += 1;
        let losses = losses.into_inner();
        let row = CurveRow {
            episode: ep,
            ret: res.ret,
            shaped_ret: res.shaped_ret,
            makespan: res.metrics.makespan,
            overwork: res.metrics.overwork,
            progress: res.metrics.progress,
            noisy: l.noisy(),
            decisions: res.decisions,
            unsafe_selections: res.unsafe_selections,
            mean_loss: if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 },
        };
        drop(l);
        on_episode(&row);
        curves.push(row);
    }
    TrainOutput { learner: learner.into_inner(), curves }
}

/// Greedy evaluation with frozen noise on the given episode seeds.
pub fn evaluate(s: &Scenario, net: &Network, rcfg: &RolloutConfig, seeds: &[u64]) -> Vec<EpisodeResult> {
    let mut net = net.clone();
    net.freeze_noise();
    seeds
        .iter()
        .map(|&seed| {
            let init = randomize_episode(s, seed).expect("scenario validated");
            let mut policy = |d: &Decision| select_action(&net.forward_q(d.obs, d.mask), d.mask);
            run_episode(s, &init, rcfg, seed, &mut policy, &mut |_| {}).0
        })
        .collect()
}

/// Uniform random choice among offered actions on the given seeds.
pub fn evaluate_random(s: &Scenario, rcfg: &RolloutConfig, seeds: &[u64], rng_seed: u64) -> Vec<EpisodeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    seeds
        .iter()
        .map(|&seed| {
            let init = randomize_episode(s, seed).expect("scenario validated");
            let mut policy = |d: &Decision| random_masked_action(d.mask, &mut rng);
            run_episode(s, &init, rcfg, seed, &mut policy, &mut |_| {}).0
        })
        .collect()
}

/// Everything needed to resume training or reproduce greedy actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub online: Params,
    pub target: Params,
    pub adam_m: Params,
    pub adam_v: Params,
    pub adam_t: u64,
    pub steps: u64,
    pub updates: u64,
    pub episodes: u32,
    pub rng: ChaCha8Rng,
}

const CK_MAGIC: &[u8; 4] = b"ERGC";
const CK_VERSION: u32 = 1;

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(CK_MAGIC)?;
        w.write_all(&CK_VERSION.to_le_bytes())?;
        for v in [self.config_hash, self.adam_t, self.steps, self.updates] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.episodes.to_le_bytes())?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        for p in [&self.online, &self.target, &self.adam_m, &self.adam_v] {
            p.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CK_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CK_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_hash = read_u64(r)?;
        let adam_t = read_u64(r)?;
        let steps = read_u64(r)?;
        let updates = read_u64(r)?;
        let episodes = read_u32(r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(r)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        let online = Params::read_from(r)?;
        let target = Params::read_from(r)?;
        let adam_m = Params::read_from(r)?;
        let adam_v = Params::read_from(r)?;
        Ok(Self { config_hash, online, target, adam_m, adam_v, adam_t, steps, updates, episodes, rng })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
