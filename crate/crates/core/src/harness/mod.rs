//! Experiment drivers, result tables and file export.

pub mod estimator;
pub mod experiments;
pub mod export;
pub mod latency;

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::agent::{AgentKind, TrainConfig};
use crate::estimation::FilterKind;
use crate::neural::{CheckpointError, Variant};
use crate::scenario::{Scenario, ScenarioError};

use estimator::TraceConfig;

/// Reduced scenario for desk-scale runs: one human, one robot, two products.
pub fn reduced_scenario(s: &Scenario) -> Scenario {
    s.clone().with_product_order(2).with_entity_counts((1, 1), (1, 1))
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Validation(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Sample mean and standard deviation (population form; zero for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config: String,
    pub humans: usize,
    pub robots: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, config: &str, humans: usize, robots: usize, metric: &str, values: &[f64]) {
        let (mean, std) = mean_std(values);
        self.rows.push(ResultRow { config: config.into(), humans, robots, metric: metric.into(), mean, std, n: values.len() });
    }

    pub fn get(&self, config: &str, metric: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.config == config && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,humans,robots,metric,mean,std,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.config, r.humans, r.robots, r.metric, r.mean, r.std, r.n);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        write_file(path, &self.to_csv())
    }
}

/// Write a file, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Estimate,
    NoiseSweep,
    Train,
    Evaluate,
    Sensitivity,
    Ablate,
    Latency,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Estimate => "estimate",
            ExperimentKind::NoiseSweep => "noise-sweep",
            ExperimentKind::Train => "train",
            ExperimentKind::Evaluate => "evaluate",
            ExperimentKind::Sensitivity => "sensitivity",
            ExperimentKind::Ablate => "ablate",
            ExperimentKind::Latency => "latency",
        }
    }
}

/// A fully resolved experiment. Every field can be overridden by name with
/// [`ExperimentSpec::set`].
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Evaluation episodes per seed.
    pub eval_episodes: usize,
    /// Entity-count grid for evaluation.
    pub humans: Vec<usize>,
    pub robots: Vec<usize>,
    pub sigma_grid: Vec<f64>,
    pub limit_grid: Vec<f64>,
    pub particle_grid: Vec<usize>,
    pub variants: Vec<Variant>,
    pub agents: Vec<AgentKind>,
    pub trace: TraceConfig,
    pub latency_reps: usize,
    pub out_dir: PathBuf,
    /// Directory holding trained checkpoints, one subdirectory per agent.
    pub checkpoints: PathBuf,
}

impl ExperimentSpec {
    /// Desk-scale defaults on the reduced version of `scenario`.
    pub fn new(kind: ExperimentKind, scenario: &Scenario, seed: u64, out_root: &Path) -> Self {
        Self {
            kind,
            scenario: reduced_scenario(scenario),
            seeds: vec![seed],
            train: TrainConfig::desk(AgentKind::PfCd3q),
            eval_episodes: 100,
            humans: vec![1],
            robots: vec![1],
            sigma_grid: vec![1e-5, 5e-5, 1e-4, 1e-3, 1e-2],
            limit_grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            particle_grid: (1..=10).map(|i| i * 100).collect(),
            variants: Variant::ALL.to_vec(),
            agents: AgentKind::ALL.to_vec(),
            trace: TraceConfig::default(),
            latency_reps: 200,
            out_dir: out_root.join(kind.name()),
            checkpoints: out_root.join("train"),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Validation("seeds must be non-empty".into()));
        }
        self.train.validate().map_err(HarnessError::Validation)?;
        self.scenario.validate()?;
        if self.humans.is_empty() || self.robots.is_empty() {
            return Err(HarnessError::Validation("entity grid must be non-empty".into()));
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
            v.trim().parse().map_err(|_| HarnessError::Validation(format!("bad value {v:?} for {key}")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
            if v.trim().is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| p(key, x)).collect()
        }
        let t = &mut self.train;
        match key {
            "agent" => t.kind = AgentKind::parse(value).ok_or_else(|| HarnessError::Validation(format!("unknown agent {value}")))?,
            "lr" => t.lr = p(key, value)?,
            "batch" => t.batch = p(key, value)?,
            "gamma" => t.gamma = p(key, value)?,
            "tick_discount" => t.tick_discount = p(key, value)?,
            "idle_wait" => t.idle_wait = p(key, value)?,
            "warmup" => t.warmup = p(key, value)?,
            "update_period" => t.update_period = p(key, value)?,
            "burst" => t.burst = p(key, value)?,
            "target_period" => t.target_period = p(key, value)?,
            "episodes" => t.episodes = p(key, value)?,
            "buffer" => t.buffer_capacity = p(key, value)?,
            "per_alpha" => t.per.alpha = p(key, value)?,
            "per_beta" => t.per.beta0 = p(key, value)?,
            "penalty" => t.penalty = p(key, value)?,
            "grad_clip" => t.grad_clip = p(key, value)?,
            "d_model" => t.net.d_model = p(key, value)?,
            "heads" => t.net.heads = p(key, value)?,
            "layers" => t.net.layers = p(key, value)?,
            "sigma0" => t.net.sigma0 = p(key, value)?,
            "variant" => {
                let v = Variant::parse(value).ok_or_else(|| HarnessError::Validation(format!("unknown variant {value}")))?;
                t.net = t.net.clone().with_variant(v);
            }
            "eta1" => t.env.reward.eta1 = p(key, value)?,
            "eta2" => t.env.reward.eta2 = p(key, value)?,
            "eta3" => t.env.reward.eta3 = p(key, value)?,
            "horizon" => t.env.reward.horizon = p(key, value)?,
            "fatigue_limit" => t.env.reward.fatigue_limit = p(key, value)?,
            "sigma_init" => t.env.noise.sigma_init = p(key, value)?,
            "sigma_time" => t.env.noise.sigma_time = p(key, value)?,
            "sigma_particle" => t.env.noise.sigma_particle = p(key, value)?,
            "sigma_m" => t.env.noise.sigma_m = p(key, value)?,
            "n_particles" => t.n_particles = p(key, value)?,
            "filter" => {
                t.filter = FilterKind::ALL
                    .into_iter()
                    .find(|k| k.name().eq_ignore_ascii_case(value))
                    .ok_or_else(|| HarnessError::Validation(format!("unknown filter {value}")))?
            }
            "products" => self.scenario = self.scenario.clone().with_product_order(p(key, value)?),
            "seeds" => self.seeds = list(key, value)?,
            "eval_episodes" => self.eval_episodes = p(key, value)?,
            "humans" => self.humans = list(key, value)?,
            "robots" => self.robots = list(key, value)?,
            "sigma_grid" => self.sigma_grid = list(key, value)?,
            "limit_grid" => self.limit_grid = list(key, value)?,
            "particle_grid" => self.particle_grid = list(key, value)?,
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(|v| Variant::parse(v.trim()).ok_or_else(|| HarnessError::Validation(format!("unknown variant {v}"))))
                    .collect::<Result<_, _>>()?
            }
            "agents" => {
                self.agents = value
                    .split(',')
                    .map(|v| AgentKind::parse(v.trim()).ok_or_else(|| HarnessError::Validation(format!("unknown agent {v}"))))
                    .collect::<Result<_, _>>()?
            }
            "work_block" => self.trace.work_block = p(key, value)?,
            "rest_block" => self.trace.rest_block = p(key, value)?,
            "working_ticks" => self.trace.working_ticks = p(key, value)?,
            "latency_reps" => self.latency_reps = p(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoints" => self.checkpoints = PathBuf::from(value),
            _ => return Err(HarnessError::Validation(format!("unknown override key {key}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` string.
    pub fn set_pair(&mut self, kv: &str) -> Result<(), HarnessError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| HarnessError::Validation(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Evaluation episode seeds, disjoint from training episodes.
    pub fn eval_seeds(&self) -> Vec<u64> {
        self.seeds
            .iter()
            .flat_map(|&s| (0..self.eval_episodes as u64).map(move |i| crate::agent::train::episode_seed(s ^ 0xe7a1_0000_0000_0000, i)))
            .collect()
    }
}
