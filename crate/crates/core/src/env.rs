//! Discrete-time production simulator.
//!
//! One call to [`step`] advances the world by one tick. Entities held by a
//! task run walk to the current subtask location one cell per tick, then work
//! until the subtask's progress reaches one. Humans accumulate fatigue while
//! working with their true rates and recover otherwise at the rate of their
//! rest mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::allocation::DistanceField;
use crate::estimation::{Activity, EstimatorBank};
use crate::fatigue::{self, rest_step, scaled_completion_time, work_step, NoiseConfig, PROGRESS_EPS};
use crate::scenario::{Cell, EpisodeInit, HumanType, Location, Performer, RestMode, Scenario, SubtaskId, TaskId};

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub horizon: u32,
    /// Fatigue limit for every human without an override.
    pub fatigue_limit: f64,
    /// Optional per-human limits, indexed by human id.
    pub limit_overrides: Vec<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            eta1: 0.005,
            eta2: 5.0,
            eta3: 1.0,
            horizon: 2500,
            fatigue_limit: 0.95,
            limit_overrides: Vec::new(),
        }
    }
}

impl RewardConfig {
    pub fn limit(&self, human: usize) -> f64 {
        self.limit_overrides.get(human).copied().unwrap_or(self.fatigue_limit)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    pub noise: NoiseConfig,
}

/// Event flags of one tick, consumed by [`compute_reward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RewardEvents {
    pub products: u32,
    pub order_met: bool,
    pub horizon_reached: bool,
}

pub fn compute_reward(ev: &RewardEvents, cfg: &RewardConfig) -> f64 {
    let mut r = -cfg.eta1 + cfg.eta3 * ev.products as f64;
    if ev.order_met {
        r += cfg.eta2;
    } else if ev.horizon_reached {
        r -= cfg.eta2;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpandedAction {
    pub task: TaskId,
    pub human: Option<usize>,
    pub robot: Option<usize>,
    /// Travel cost estimate recorded at allocation time.
    pub t_travel: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeOver,
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} has an unmet dependency")]
    UnmetDependency(TaskId),
    #[error("task {0} already ran its full quota")]
    QuotaReached(TaskId),
    #[error("machine for task {0} is busy")]
    MachineBusy(TaskId),
    #[error("no material left for task {0}")]
    NoMaterial(TaskId),
    #[error("human {0} is busy or does not exist")]
    BusyHuman(usize),
    #[error("robot {0} is busy or does not exist")]
    BusyRobot(usize),
    #[error("assignment does not match the performers of task {0}")]
    WrongAssignment(TaskId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanState {
    pub pos: Cell,
    pub fatigue: f64,
    pub human_type: HumanType,
    pub multiplier: f64,
    pub run: Option<usize>,
    pub activity: Activity,
    pub last_z: f64,
    above_limit: bool,
}

impl HumanState {
    pub fn is_idle(&self) -> bool {
        self.run.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub pos: Cell,
    pub run: Option<usize>,
    pub moving: bool,
}

impl RobotState {
    pub fn is_idle(&self) -> bool {
        self.run.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub pos: Cell,
    pub run: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub task: TaskId,
    pub human: Option<usize>,
    pub robot: Option<usize>,
    pub machine: Option<usize>,
    pub stage: usize,
    pub progress: f64,
    /// Noisy static time of the current subtask.
    pub tau_eff: f64,
    pub start_tick: u32,
    human_released: bool,
    robot_released: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRef {
    Human(usize),
    Robot(usize),
    Machine(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GanttInterval {
    pub entity: EntityRef,
    pub task: TaskId,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub tick: u32,
    pub entity: EntityRef,
    pub event: &'static str,
    pub fatigue: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub tick: u32,
    pub humans: Vec<HumanState>,
    pub robots: Vec<RobotState>,
    pub machines: Vec<MachineState>,
    pub material_stock: Vec<u32>,
    material_initial: Vec<u32>,
    pub runs: Vec<Option<TaskRun>>,
    pub started: Vec<u32>,
    pub completed: Vec<u32>,
    /// Unconsumed completions per dependency edge.
    pub edge_tokens: Vec<u32>,
    pub products: u32,
    pub cage: Cell,
    pub overwork: u32,
    pub done: bool,
    pub finish_tick: Option<u32>,
    pub gantt: Vec<GanttInterval>,
    pub fatigue_trace: Vec<Vec<f64>>,
    pub events: Vec<TraceEvent>,
    pub record_events: bool,
    fields: Vec<DistanceField>,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// What each human did during the tick.
    pub activities: Vec<Activity>,
    /// Noisy fatigue measurement per human taken at the end of the tick.
    pub measurements: Vec<f64>,
    pub violation_onsets: u32,
    pub products_completed: u32,
    pub tasks_completed: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub makespan: u32,
    pub overwork: u32,
    pub progress: f64,
}

/// `fatigue[k]` is the per-tick fatigue trace of human k.
pub fn episode_metrics(
    fatigue: &[Vec<f64>],
    limits: &[f64],
    products: u32,
    order: u32,
    finish_tick: Option<u32>,
    horizon: u32,
) -> EpisodeMetrics {
    let mut overwork = 0;
    for (k, trace) in fatigue.iter().enumerate() {
        let mut above = false;
        for &f in trace {
            let now = f >= limits[k];
            if now && !above {
                overwork += 1;
            }
            above = now;
        }
    }
    EpisodeMetrics {
        makespan: finish_tick.unwrap_or(horizon).min(horizon),
        overwork,
        progress: (products as f64 / order as f64).min(1.0),
    }
}

fn location_cell(loc: Location, cage: Cell) -> Cell {
    match loc {
        Location::Cell(c) => c,
        Location::Cage => cage,
    }
}

fn last_stage(s: &Scenario, task: TaskId, pred: impl Fn(Performer) -> bool) -> Option<usize> {
    s.tasks[task]
        .subtasks
        .iter()
        .rposition(|&sid| pred(s.subtasks[sid].performer))
}

pub fn reset(s: &Scenario, init: &EpisodeInit, cfg: &EnvConfig, seed: u64) -> WorldState {
    let _ = cfg;
    let humans = init
        .humans
        .iter()
        .map(|h| HumanState {
            pos: h.position,
            fatigue: 0.0,
            human_type: h.human_type,
            multiplier: h.multiplier,
            run: None,
            activity: Activity::Resting(RestMode::Free),
            last_z: 0.0,
            above_limit: false,
        })
        .collect::<Vec<_>>();
    let robots = init
        .robots
        .iter()
        .map(|&pos| RobotState { pos, run: None, moving: false })
        .collect();
    let machines = s
        .entity_pool
        .machines
        .iter()
        .map(|m| MachineState { pos: m.cell, run: None })
        .collect();
    let material_initial: Vec<u32> = s.entity_pool.materials.iter().map(|m| s.task_cap(m.task)).collect();
    let mut targets: Vec<Cell> = s
        .subtasks
        .iter()
        .map(|st| location_cell(st.location, init.cage))
        .collect();
    targets.sort();
    targets.dedup();
    let fields = targets.into_iter().map(|t| DistanceField::new(&s.grid, t)).collect();
    let n_h = humans.len();
    WorldState {
        tick: 0,
        humans,
        robots,
        machines,
        material_stock: material_initial.clone(),
        material_initial,
        runs: Vec::new(),
        started: vec![0; s.tasks.len()],
        completed: vec![0; s.tasks.len()],
        edge_tokens: vec![0; s.dependency_edges.len()],
        products: 0,
        cage: init.cage,
        overwork: 0,
        done: false,
        finish_tick: None,
        gantt: Vec::new(),
        fatigue_trace: vec![vec![0.0]; n_h],
        events: Vec::new(),
        record_events: false,
        fields,
        rng: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl WorldState {
    pub fn task_entry_cell(&self, s: &Scenario, task: TaskId) -> Cell {
        let first = s.tasks[task].subtasks[0];
        location_cell(s.subtasks[first].location, self.cage)
    }

    fn field(&self, target: Cell) -> &DistanceField {
        self.fields
            .iter()
            .find(|f| f.target == target)
            .expect("distance field for every subtask location")
    }

    /// Dependency, quota, machine and material preconditions, ignoring
    /// entity availability.
    pub fn task_precondition(&self, s: &Scenario, task: TaskId) -> Result<(), EnvError> {
        if task >= s.tasks.len() {
            return Err(EnvError::UnknownTask(task));
        }
        if self.started[task] >= s.task_cap(task) {
            return Err(EnvError::QuotaReached(task));
        }
        for (e, &(_, b)) in s.dependency_edges.iter().enumerate() {
            if b == task && self.edge_tokens[e] == 0 {
                return Err(EnvError::UnmetDependency(task));
            }
        }
        if let Some(m) = s.tasks[task].machine {
            if self.machines[m].run.is_some() {
                return Err(EnvError::MachineBusy(task));
            }
        }
        for (i, mat) in s.entity_pool.materials.iter().enumerate() {
            if mat.task == task && self.material_stock[i] == 0 {
                return Err(EnvError::NoMaterial(task));
            }
        }
        Ok(())
    }

    /// Tasks whose preconditions hold and whose required entity classes have
    /// an idle member.
    pub fn ready_tasks(&self, s: &Scenario) -> Vec<TaskId> {
        let any_human = self.humans.iter().any(HumanState::is_idle);
        let any_robot = self.robots.iter().any(RobotState::is_idle);
        (0..s.tasks.len())
            .filter(|&t| self.task_precondition(s, t).is_ok())
            .filter(|&t| !s.task_needs_human(t) || any_human)
            .filter(|&t| !s.task_needs_robot(t) || any_robot)
            .collect()
    }

    pub fn running(&self) -> impl Iterator<Item = &TaskRun> {
        self.runs.iter().flatten()
    }

    pub fn metrics(&self, s: &Scenario, cfg: &EnvConfig) -> EpisodeMetrics {
        EpisodeMetrics {
            makespan: self.finish_tick.unwrap_or(cfg.reward.horizon).min(cfg.reward.horizon),
            overwork: self.overwork,
            progress: (self.products as f64 / s.product_order as f64).min(1.0),
        }
    }

    pub fn limits(&self, cfg: &EnvConfig) -> Vec<f64> {
        (0..self.humans.len()).map(|k| cfg.reward.limit(k)).collect()
    }

    fn sample_tau(&mut self, s: &Scenario, sid: SubtaskId, sigma_time: f64) -> f64 {
        let tau = s.subtasks[sid].static_time as f64;
        let n = if sigma_time > 0.0 {
            Normal::new(0.0, sigma_time).expect("finite sigma").sample(&mut self.rng)
        } else {
            0.0
        };
        (tau * (1.0 + n)).max(1.0)
    }

    fn log(&mut self, entity: EntityRef, event: &'static str) {
        if self.record_events {
            let fatigue = match entity {
                EntityRef::Human(k) => self.humans[k].fatigue,
                _ => f64::NAN,
            };
            self.events.push(TraceEvent { tick: self.tick, entity, event, fatigue });
        }
    }

    fn start(&mut self, s: &Scenario, a: &ExpandedAction, cfg: &EnvConfig) -> Result<(), EnvError> {
        let task = a.task;
        self.task_precondition(s, task)?;
        if s.task_needs_human(task) != a.human.is_some() || s.task_needs_robot(task) != a.robot.is_some() {
            return Err(EnvError::WrongAssignment(task));
        }
        if let Some(k) = a.human {
            if !self.humans.get(k).is_some_and(HumanState::is_idle) {
                return Err(EnvError::BusyHuman(k));
            }
        }
        if let Some(r) = a.robot {
            if !self.robots.get(r).is_some_and(RobotState::is_idle) {
                return Err(EnvError::BusyRobot(r));
            }
        }
        self.started[task] += 1;
        for (e, &(_, b)) in s.dependency_edges.iter().enumerate() {
            if b == task {
                self.edge_tokens[e] -= 1;
            }
        }
        for (i, mat) in s.entity_pool.materials.iter().enumerate() {
            if mat.task == task {
                self.material_stock[i] -= 1;
            }
        }
        let slot = self.runs.iter().position(Option::is_none).unwrap_or_else(|| {
            self.runs.push(None);
            self.runs.len() - 1
        });
        let machine = s.tasks[task].machine;
        if let Some(m) = machine {
            self.machines[m].run = Some(slot);
        }
        if let Some(k) = a.human {
            self.humans[k].run = Some(slot);
            self.log(EntityRef::Human(k), "assigned");
        }
        if let Some(r) = a.robot {
            self.robots[r].run = Some(slot);
            self.log(EntityRef::Robot(r), "assigned");
        }
        let tau_eff = self.sample_tau(s, s.tasks[task].subtasks[0], cfg.noise.sigma_time);
        self.runs[slot] = Some(TaskRun {
            task,
            human: a.human,
            robot: a.robot,
            machine,
            stage: 0,
            progress: 0.0,
            tau_eff,
            start_tick: self.tick,
            human_released: false,
            robot_released: false,
        });
        Ok(())
    }

    /// Advance one run by one tick. Returns true when the task completed.
    fn advance_run(&mut self, s: &Scenario, slot: usize, cfg: &EnvConfig, worked: &mut [bool]) -> bool {
        let mut run = self.runs[slot].take().expect("live run");
        let task = &s.tasks[run.task];
        let sid = task.subtasks[run.stage];
        let sub = &s.subtasks[sid];
        let target = location_cell(sub.location, self.cage);
        let human_part = sub.performer.needs_human().then_some(run.human).flatten();
        let robot_part = sub.performer.needs_robot().then_some(run.robot).flatten();

        let human_there = human_part.map_or(true, |k| self.humans[k].pos == target);
        let robot_there = robot_part.map_or(true, |r| self.robots[r].pos == target);
        if !(human_there && robot_there) {
            let field = self.field(target).clone();
            if let Some(k) = human_part {
                if let Some(next) = field.next_step(&s.grid, self.humans[k].pos) {
                    self.humans[k].pos = next;
                    self.humans[k].activity = Activity::Resting(RestMode::Walking);
                }
            }
            if let Some(r) = robot_part {
                if let Some(next) = field.next_step(&s.grid, self.robots[r].pos) {
                    self.robots[r].pos = next;
                    self.robots[r].moving = true;
                }
            }
            self.runs[slot] = Some(run);
            return false;
        }

        let efficiency = match human_part {
            Some(k) => {
                let h = &mut self.humans[k];
                let lambda = s.fatigue_table.lambda[&sid] * h.multiplier;
                h.fatigue = work_step(h.fatigue, lambda);
                h.activity = Activity::Working(sid);
                worked[k] = true;
                scaled_completion_time(run.tau_eff, s.fatigue_table.delta_eff, h.fatigue).1
            }
            None => 1.0 / run.tau_eff,
        };
        run.progress += efficiency;
        if run.progress < 1.0 - PROGRESS_EPS {
            self.runs[slot] = Some(run);
            return false;
        }

        // Subtask finished.
        let stage = run.stage;
        let end = self.tick;
        if !run.human_released && last_stage(s, run.task, Performer::needs_human) == Some(stage) {
            if let Some(k) = run.human {
                self.humans[k].run = None;
                self.gantt.push(GanttInterval { entity: EntityRef::Human(k), task: run.task, start: run.start_tick, end });
                self.log(EntityRef::Human(k), "released");
            }
            run.human_released = true;
        }
        if !run.robot_released && last_stage(s, run.task, Performer::needs_robot) == Some(stage) {
            if let Some(r) = run.robot {
                self.robots[r].run = None;
                self.gantt.push(GanttInterval { entity: EntityRef::Robot(r), task: run.task, start: run.start_tick, end });
                self.log(EntityRef::Robot(r), "released");
            }
            run.robot_released = true;
        }
        run.stage += 1;
        if run.stage == task.subtasks.len() {
            if let Some(m) = run.machine {
                self.machines[m].run = None;
                self.gantt.push(GanttInterval { entity: EntityRef::Machine(m), task: run.task, start: run.start_tick, end });
            }
            self.completed[run.task] += 1;
            for (e, &(a, _)) in s.dependency_edges.iter().enumerate() {
                if a == run.task {
                    self.edge_tokens[e] += 1;
                }
            }
            return true;
        }
        run.progress = 0.0;
        run.tau_eff = self.sample_tau(s, task.subtasks[run.stage], cfg.noise.sigma_time);
        self.runs[slot] = Some(run);
        false
    }
}

/// Advance one tick, optionally starting a task first.
pub fn step(s: &Scenario, w: &mut WorldState, action: Option<&ExpandedAction>, cfg: &EnvConfig) -> Result<StepOutcome, EnvError> {
    if w.done {
        return Err(EnvError::EpisodeOver);
    }
    if let Some(a) = action {
        w.start(s, a, cfg)?;
    }
    w.tick += 1;
    for h in &mut w.humans {
        h.activity = Activity::Resting(if h.run.is_some() { RestMode::Waiting } else { RestMode::Free });
    }
    for r in &mut w.robots {
        r.moving = false;
    }
    let mut worked = vec![false; w.humans.len()];
    let mut tasks_completed = Vec::new();
    for slot in 0..w.runs.len() {
        if w.runs[slot].is_none() {
            continue;
        }
        let task = w.runs[slot].as_ref().map(|r| r.task).expect("live run");
        if w.advance_run(s, slot, cfg, &mut worked) {
            tasks_completed.push(task);
        }
    }
    for (k, h) in w.humans.iter_mut().enumerate() {
        if !worked[k] {
            let mode = match h.activity {
                Activity::Resting(m) => m,
                Activity::Working(_) => RestMode::Waiting,
            };
            h.fatigue = rest_step(h.fatigue, s.fatigue_table.mu(mode));
        }
    }

    let mut onsets = 0;
    let mut measurements = Vec::with_capacity(w.humans.len());
    for k in 0..w.humans.len() {
        let limit = cfg.reward.limit(k);
        let f = w.humans[k].fatigue;
        let z = fatigue::measure_fatigue_with(f, cfg.noise.sigma_m, &mut w.rng);
        w.humans[k].last_z = z;
        measurements.push(z);
        w.fatigue_trace[k].push(f);
        let above = f >= limit;
        if above && !w.humans[k].above_limit {
            onsets += 1;
            w.log(EntityRef::Human(k), "violation");
        }
        w.humans[k].above_limit = above;
    }
    w.overwork += onsets;

    let products = tasks_completed.iter().filter(|&&t| t == s.product_task).count() as u32;
    w.products += products;
    let order_met = w.products >= s.product_order;
    let horizon_reached = w.tick >= cfg.reward.horizon;
    if order_met {
        w.finish_tick = Some(w.tick);
    }
    w.done = order_met || horizon_reached;
    let ev = RewardEvents { products, order_met, horizon_reached };
    Ok(StepOutcome {
        reward: compute_reward(&ev, &cfg.reward),
        done: w.done,
        info: StepInfo {
            activities: w.humans.iter().map(|h| h.activity).collect(),
            measurements,
            violation_onsets: onsets,
            products_completed: products,
            tasks_completed,
        },
    })
}

pub mod token {
    pub const HUMAN: usize = 0;
    pub const ROBOT: usize = 1;
    pub const MACHINE: usize = 2;
    pub const MATERIAL: usize = 3;
    pub const TASK: usize = 4;
    pub const SUBTASK: usize = 5;
    pub const PARAMS: usize = 6;
    pub const KINDS: usize = 7;
}

/// One observation token: a kind id, two categorical ids (`0` = none,
/// otherwise task or subtask id + 1) and a fixed-width feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: usize,
    pub task: usize,
    pub subtask: usize,
    pub feats: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub tokens: Vec<Token>,
}

/// Feature width of every token for a scenario.
pub fn token_width(s: &Scenario) -> usize {
    12.max(1 + s.human_subtasks().len())
}

fn token(kind: usize, task: Option<TaskId>, subtask: Option<SubtaskId>, width: usize, vals: &[f64]) -> Token {
    let mut feats = vec![0.0; width];
    feats[..vals.len()].copy_from_slice(vals);
    Token {
        kind,
        task: task.map_or(0, |t| t + 1),
        subtask: subtask.map_or(0, |t| t + 1),
        feats,
    }
}

/// Tokenize the world: humans, robots, machines, materials, tasks,
/// subtasks, then one fatigue-parameter token per human holding `µ̂` and
/// the `λ̂` of every human subtask in id order.
pub fn observe(s: &Scenario, w: &WorldState, bank: &EstimatorBank, cfg: &EnvConfig) -> Observation {
    let width = token_width(s);
    let rows = s.grid.height.max(1) as f64;
    let cols = s.grid.width.max(1) as f64;
    let mut tokens = Vec::new();
    let run_of = |slot: Option<usize>| slot.and_then(|i| w.runs[i].as_ref());
    for (k, h) in w.humans.iter().enumerate() {
        let run = run_of(h.run);
        let (task, sub, progress) = match run {
            Some(r) => (Some(r.task), Some(s.tasks[r.task].subtasks[r.stage]), r.progress),
            None => (None, None, 0.0),
        };
        let mode = match h.activity {
            Activity::Resting(RestMode::Free) => 0,
            Activity::Resting(RestMode::Waiting) => 1,
            Activity::Resting(RestMode::Walking) => 2,
            Activity::Working(_) => 3,
        };
        let mut one_hot = [0.0; 4];
        one_hot[mode] = 1.0;
        tokens.push(token(
            token::HUMAN,
            task,
            sub,
            width,
            &[
                progress,
                h.pos.row as f64 / rows,
                h.pos.col as f64 / cols,
                bank.current_fatigue(k),
                one_hot[0],
                one_hot[1],
                one_hot[2],
                one_hot[3],
                h.is_idle() as u8 as f64,
                cfg.reward.limit(k),
            ],
        ));
    }
    for r in &w.robots {
        let run = run_of(r.run);
        let (task, sub, progress) = match run {
            Some(x) => (Some(x.task), Some(s.tasks[x.task].subtasks[x.stage]), x.progress),
            None => (None, None, 0.0),
        };
        tokens.push(token(
            token::ROBOT,
            task,
            sub,
            width,
            &[progress, r.pos.row as f64 / rows, r.pos.col as f64 / cols, r.is_idle() as u8 as f64, r.moving as u8 as f64],
        ));
    }
    for m in &w.machines {
        let run = run_of(m.run);
        let (task, sub, progress) = match run {
            Some(x) => (Some(x.task), Some(s.tasks[x.task].subtasks[x.stage]), x.progress),
            None => (None, None, 0.0),
        };
        tokens.push(token(
            token::MACHINE,
            task,
            sub,
            width,
            &[progress, m.pos.row as f64 / rows, m.pos.col as f64 / cols, run.is_some() as u8 as f64],
        ));
    }
    for (i, mat) in s.entity_pool.materials.iter().enumerate() {
        let init = w.material_initial[i].max(1) as f64;
        tokens.push(token(token::MATERIAL, Some(mat.task), None, width, &[w.material_stock[i] as f64 / init]));
    }
    let ready = w.ready_tasks(s);
    for t in 0..s.tasks.len() {
        let cap = s.task_cap(t).max(1) as f64;
        let running = w.running().filter(|r| r.task == t).count() as f64;
        tokens.push(token(
            token::TASK,
            Some(t),
            None,
            width,
            &[
                w.started[t] as f64 / cap,
                w.completed[t] as f64 / cap,
                ready.contains(&t) as u8 as f64,
                running,
                s.task_needs_human(t) as u8 as f64,
                s.task_needs_robot(t) as u8 as f64,
                s.tasks[t].machine.is_some() as u8 as f64,
                w.tick as f64 / cfg.reward.horizon.max(1) as f64,
            ],
        ));
    }
    for sub in &s.subtasks {
        let active = w
            .running()
            .filter(|r| s.tasks[r.task].subtasks[r.stage] == sub.id)
            .count() as f64;
        let perf = match sub.performer {
            Performer::Human => 0,
            Performer::Robot => 1,
            Performer::HumanRobot => 2,
            Performer::Machine => 3,
        };
        let mut one_hot = [0.0; 4];
        one_hot[perf] = 1.0;
        tokens.push(token(
            token::SUBTASK,
            None,
            Some(sub.id),
            width,
            &[sub.static_time as f64 / 10.0, one_hot[0], one_hot[1], one_hot[2], one_hot[3], active],
        ));
    }
    let human_subs = s.human_subtasks();
    for k in 0..w.humans.len() {
        let mut vals = Vec::with_capacity(1 + human_subs.len());
        vals.push(bank.mu_estimate(k));
        for &sid in &human_subs {
            vals.push(bank.lambda_estimate(k, sid).unwrap_or(0.0));
        }
        tokens.push(token(token::PARAMS, None, None, width, &vals));
    }
    Observation { tokens }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{FilterKind, TrueParams};
    use crate::scenario::{default_scenario, randomize_episode, HumanInit};

    fn init_with(s: &Scenario, humans: usize, robots: usize) -> EpisodeInit {
        let mut seed = 0;
        loop {
            let e = randomize_episode(s, seed).unwrap();
            if e.humans.len() == humans && e.robots.len() == robots {
                return e;
            }
            seed += 1;
        }
    }

    fn quiet() -> EnvConfig {
        EnvConfig {
            reward: RewardConfig::default(),
            noise: NoiseConfig { sigma_time: 0.0, sigma_m: 0.0, ..NoiseConfig::default() },
        }
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(compute_reward(&RewardEvents::default(), &cfg), -0.005);
        let prod = RewardEvents { products: 1, ..Default::default() };
        assert_eq!(compute_reward(&prod, &cfg), -0.005 + 1.0);
        let fin = RewardEvents { products: 1, order_met: true, horizon_reached: false };
        assert_eq!(compute_reward(&fin, &cfg), -0.005 + 1.0 + 5.0);
    }

    #[test]
    fn reset_is_clean_and_deterministic() {
        let s = default_scenario();
        let init = init_with(&s, 3, 1);
        let w = reset(&s, &init, &quiet(), 4);
        assert_eq!(w.humans.len(), 3);
        assert!(w.humans.iter().all(|h| h.fatigue == 0.0));
        assert_eq!(w.products, 0);
        assert!(w.running().next().is_none());
        let w2 = reset(&s, &init, &quiet(), 4);
        assert_eq!(format!("{w:?}"), format!("{w2:?}"));
    }

    #[test]
    fn wait_rests_everyone() {
        let s = default_scenario();
        let init = init_with(&s, 2, 1);
        let mut w = reset(&s, &init, &quiet(), 1);
        w.humans[0].fatigue = 0.5;
        step(&s, &mut w, None, &quiet()).unwrap();
        assert!(w.humans[0].fatigue < 0.5);
        assert_eq!(w.humans[1].fatigue, 0.0);
    }

    #[test]
    fn zero_travel_subtask_matches_oracle() {
        let s = default_scenario();
        let mut init = init_with(&s, 1, 1);
        let sid = s.tasks[0].subtasks[0];
        let Location::Cell(c) = s.subtasks[sid].location else { panic!() };
        init.humans[0] = HumanInit { position: c, human_type: HumanType::Normal, multiplier: 1.0 };
        let cfg = quiet();
        let mut w = reset(&s, &init, &cfg, 3);
        let a = ExpandedAction { task: 0, human: Some(0), robot: None, t_travel: 0 };
        step(&s, &mut w, Some(&a), &cfg).unwrap();
        let mut ticks = 1;
        while w.runs[0].as_ref().unwrap().stage == 0 {
            step(&s, &mut w, None, &cfg).unwrap();
            ticks += 1;
        }
        let (n, f) = fatigue::simulate_subtask(0.0, s.subtasks[sid].static_time as f64, s.fatigue_table.lambda[&sid], 0.3).unwrap();
        assert_eq!(ticks, n);
        assert_eq!(w.fatigue_trace[0][n as usize], f);
    }

    #[test]
    fn illegal_actions_are_named() {
        let s = default_scenario();
        let init = init_with(&s, 1, 1);
        let cfg = quiet();
        let mut w = reset(&s, &init, &cfg, 3);
        let weld = ExpandedAction { task: 5, human: Some(0), robot: None, t_travel: 0 };
        assert_eq!(step(&s, &mut w, Some(&weld), &cfg), Err(EnvError::UnmetDependency(5)));
        let a = ExpandedAction { task: 0, human: Some(0), robot: None, t_travel: 0 };
        step(&s, &mut w, Some(&a), &cfg).unwrap();
        assert_eq!(step(&s, &mut w, Some(&a), &cfg), Err(EnvError::BusyHuman(0)));
        let wrong = ExpandedAction { task: 2, human: Some(0), robot: None, t_travel: 0 };
        assert_eq!(step(&s, &mut w, Some(&wrong), &cfg), Err(EnvError::WrongAssignment(2)));
    }

    #[test]
    fn horizon_ends_with_penalty() {
        let s = default_scenario();
        let init = init_with(&s, 1, 1);
        let mut cfg = quiet();
        cfg.reward.horizon = 5;
        let mut w = reset(&s, &init, &cfg, 3);
        let mut last = None;
        for _ in 0..5 {
            last = Some(step(&s, &mut w, None, &cfg).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, -0.005 - 5.0);
        let m = w.metrics(&s, &cfg);
        assert!(m.progress < 1.0);
        assert_eq!(m.makespan, 5);
        assert_eq!(step(&s, &mut w, None, &cfg), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn metrics_examples() {
        let none = episode_metrics(&[vec![0.1, 0.5, 0.9]], &[0.95], 8, 8, Some(100), 2500);
        assert_eq!(none.overwork, 0);
        let mut trace = vec![0.5, 0.96];
        trace.extend(std::iter::repeat(0.97).take(30));
        trace.push(0.4);
        assert_eq!(episode_metrics(&[trace], &[0.95], 8, 8, None, 2500).overwork, 1);
        assert_eq!(episode_metrics(&[vec![]], &[0.95], 3, 8, None, 2500).progress, 0.375);
    }

    #[test]
    fn observation_token_count_and_params() {
        let s = default_scenario();
        let init = init_with(&s, 1, 1);
        let cfg = EnvConfig::default();
        let w = reset(&s, &init, &cfg, 3);
        let truths: Vec<TrueParams> = init.humans.iter().map(|h| TrueParams::for_human(&s, h.multiplier)).collect();
        let bank = EstimatorBank::new(&truths, FilterKind::Pf, &cfg.noise, 20, 0.3, 9);
        let obs = observe(&s, &w, &bank, &cfg);
        let expected = 1 + 1 + s.entity_pool.machines.len() + s.entity_pool.materials.len() + s.tasks.len() + s.subtasks.len() + 1;
        assert_eq!(obs.tokens.len(), expected);
        let p = obs.tokens.last().unwrap();
        assert_eq!(p.kind, token::PARAMS);
        assert_eq!(p.feats[0], bank.mu_estimate(0));
        for (i, sid) in s.human_subtasks().into_iter().enumerate() {
            assert_eq!(p.feats[1 + i], bank.lambda_estimate(0, sid).unwrap());
        }
        assert_eq!(obs, observe(&s, &w, &bank, &cfg));
    }
}
