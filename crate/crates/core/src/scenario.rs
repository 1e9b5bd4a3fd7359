//! Declarative production scenarios: task decomposition, entities, the
//! occupancy grid and the fatigue parameter table.
//!
//! Scenarios are loaded from a sectioned text format (see [`parse_scenario`])
//! and validated on construction, so every `Scenario` value in circulation
//! satisfies the structural invariants: acyclic dependencies, resolvable
//! subtask references, a `λ` entry for every human-performed subtask and
//! subtask locations on free cells.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

pub type TaskId = usize;
pub type SubtaskId = usize;

const DEFAULT_SCENARIO: &str = include_str!("../scenarios/duct_factory.scn");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("task {task} references unknown subtask {subtask}")]
    UnknownSubtask { task: TaskId, subtask: SubtaskId },
    #[error("dependency references unknown task {0}")]
    UnknownTask(TaskId),
    #[error("dependency cycle through task {0}")]
    Cycle(TaskId),
    #[error("human-performed subtask {0} has no lambda entry")]
    MissingLambda(SubtaskId),
    #[error("subtask {0} is located on an obstacle or outside the grid")]
    ObstacleLocation(SubtaskId),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot spawn {what}: not enough free cells in its region")]
    SpawnFailure { what: &'static str },
    #[error("io error reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// Inclusive rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub min: Cell,
    pub max: Cell,
}

impl Region {
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.min.row..=self.max.row)
            .flat_map(move |r| (self.min.col..=self.max.col).map(move |c| Cell::new(r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Performer {
    Human,
    Robot,
    HumanRobot,
    Machine,
}

impl Performer {
    pub fn needs_human(self) -> bool {
        matches!(self, Performer::Human | Performer::HumanRobot)
    }

    pub fn needs_robot(self) -> bool {
        matches!(self, Performer::Robot | Performer::HumanRobot)
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "human" => Some(Self::Human),
            "robot" => Some(Self::Robot),
            "human+robot" => Some(Self::HumanRobot),
            "machine" => Some(Self::Machine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Cell(Cell),
    /// Resolved per episode to the randomized cage position.
    Cage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtaskDef {
    pub id: SubtaskId,
    pub name: String,
    pub performer: Performer,
    /// Static completion time τ in ticks.
    pub static_time: u32,
    pub location: Location,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDef {
    pub id: TaskId,
    pub name: String,
    pub subtasks: Vec<SubtaskId>,
    pub runs_per_product: u32,
    pub machine: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RestMode {
    Free,
    Waiting,
    Walking,
}

impl RestMode {
    pub const ALL: [RestMode; 3] = [RestMode::Free, RestMode::Waiting, RestMode::Walking];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RestMode::Free => "free",
            RestMode::Waiting => "waiting",
            RestMode::Walking => "walking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HumanType {
    Weak,
    Normal,
    Strong,
}

impl HumanType {
    pub const ALL: [HumanType; 3] = [HumanType::Weak, HumanType::Normal, HumanType::Strong];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HumanType::Weak => "weak",
            HumanType::Normal => "normal",
            HumanType::Strong => "strong",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FatigueTable {
    /// Base accumulation rate per human-performed subtask, per tick.
    pub lambda: BTreeMap<SubtaskId, f64>,
    /// Recovery rate per rest mode, indexed by [`RestMode::index`].
    pub mu: [f64; 3],
    pub delta_eff: f64,
    /// λ multipliers indexed by [`HumanType::index`].
    pub type_multipliers: [f64; 3],
}

impl FatigueTable {
    pub fn mu(&self, mode: RestMode) -> f64 {
        self.mu[mode.index()]
    }

    pub fn multiplier(&self, t: HumanType) -> f64 {
        self.type_multipliers[t.index()]
    }

    /// Multiply every λ by `factor`.
    pub fn scaled_lambda(&self, factor: f64) -> FatigueTable {
        let mut out = self.clone();
        for v in out.lambda.values_mut() {
            *v *= factor;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    occupancy: Vec<bool>,
}

impl GridMap {
    pub fn new(width: usize, height: usize, occupancy: Vec<bool>) -> Self {
        assert_eq!(occupancy.len(), width * height, "occupancy size mismatch");
        Self {
            width,
            height,
            occupancy,
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_rows(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let occ = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Self::new(width, height, occ)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.occupancy[c.row * self.width + c.col]
    }

    pub fn set_obstacle(&mut self, c: Cell, obstacle: bool) {
        let w = self.width;
        self.occupancy[c.row * w + c.col] = obstacle;
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height)
            .flat_map(move |r| (0..self.width).map(move |c| Cell::new(r, c)))
            .filter(|c| self.is_free(*c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineDef {
    pub name: String,
    pub cell: Cell,
}

/// A raw material stock drawn once per start of its task.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialDef {
    pub name: String,
    pub task: TaskId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityPool {
    pub humans: (usize, usize),
    pub robots: (usize, usize),
    pub human_spawn: Region,
    pub robot_spawn: Region,
    pub cage_spawn: Region,
    pub machines: Vec<MachineDef>,
    pub materials: Vec<MaterialDef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub tasks: Vec<TaskDef>,
    pub subtasks: Vec<SubtaskDef>,
    pub dependency_edges: Vec<(TaskId, TaskId)>,
    pub grid: GridMap,
    pub fatigue_table: FatigueTable,
    pub entity_pool: EntityPool,
    pub product_order: u32,
    /// Task whose completions count as finished products.
    pub product_task: TaskId,
}

impl Scenario {
    /// Validate all structural invariants.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (i, s) in self.subtasks.iter().enumerate() {
            if s.id != i {
                return Err(ScenarioError::Invalid(format!(
                    "subtask ids must be 0..n in order, found {} at row {i}",
                    s.id
                )));
            }
            if s.static_time < 1 {
                return Err(ScenarioError::Invalid(format!(
                    "subtask {i} has static time 0"
                )));
            }
            if let Location::Cell(c) = s.location {
                if !self.grid.is_free(c) {
                    return Err(ScenarioError::ObstacleLocation(i));
                }
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(ScenarioError::Invalid(format!(
                    "task ids must be 0..n in order, found {} at row {i}",
                    t.id
                )));
            }
            if t.subtasks.is_empty() {
                return Err(ScenarioError::Invalid(format!("task {i} has no subtasks")));
            }
            for &s in &t.subtasks {
                if s >= self.subtasks.len() {
                    return Err(ScenarioError::UnknownSubtask { task: i, subtask: s });
                }
            }
            if t.runs_per_product < 1 {
                return Err(ScenarioError::Invalid(format!(
                    "task {i} must run at least once per product"
                )));
            }
            match t.machine {
                Some(m) if m >= self.entity_pool.machines.len() => {
                    return Err(ScenarioError::Invalid(format!(
                        "task {i} references unknown machine {m}"
                    )));
                }
                None if t
                    .subtasks
                    .iter()
                    .any(|&s| self.subtasks[s].performer == Performer::Machine) =>
                {
                    return Err(ScenarioError::Invalid(format!(
                        "task {i} has a machine subtask but no machine"
                    )));
                }
                _ => {}
            }
        }
        for &(a, b) in &self.dependency_edges {
            for t in [a, b] {
                if t >= self.tasks.len() {
                    return Err(ScenarioError::UnknownTask(t));
                }
            }
        }
        self.topological_order()?;
        for s in &self.subtasks {
            if s.performer.needs_human() {
                match self.fatigue_table.lambda.get(&s.id) {
                    Some(&l) if l > 0.0 => {}
                    Some(_) => {
                        return Err(ScenarioError::Invalid(format!(
                            "lambda for subtask {} must be positive",
                            s.id
                        )))
                    }
                    None => return Err(ScenarioError::MissingLambda(s.id)),
                }
            }
        }
        let ft = &self.fatigue_table;
        if ft.mu.iter().any(|&m| m <= 0.0 || !m.is_finite()) {
            return Err(ScenarioError::Invalid("all mu values must be positive".into()));
        }
        if ft.delta_eff < 0.0 || !ft.delta_eff.is_finite() {
            return Err(ScenarioError::Invalid("delta_eff must be non-negative".into()));
        }
        if ft.type_multipliers.iter().any(|&m| m <= 0.0) {
            return Err(ScenarioError::Invalid("type multipliers must be positive".into()));
        }
        let pool = &self.entity_pool;
        for (what, (lo, hi)) in [("humans", pool.humans), ("robots", pool.robots)] {
            if lo < 1 || hi < lo {
                return Err(ScenarioError::Invalid(format!("bad {what} range {lo}..{hi}")));
            }
        }
        for (what, region) in [
            ("human_spawn", pool.human_spawn),
            ("robot_spawn", pool.robot_spawn),
            ("cage_spawn", pool.cage_spawn),
        ] {
            if region.min.row > region.max.row
                || region.min.col > region.max.col
                || !self.grid.in_bounds(region.max)
            {
                return Err(ScenarioError::Invalid(format!("region {what} out of bounds")));
            }
            if !region.cells().any(|c| self.grid.is_free(c)) {
                return Err(ScenarioError::Invalid(format!("region {what} has no free cell")));
            }
        }
        for (i, m) in pool.machines.iter().enumerate() {
            if !self.grid.is_free(m.cell) {
                return Err(ScenarioError::Invalid(format!("machine {i} is on an obstacle")));
            }
        }
        for m in &pool.materials {
            if m.task >= self.tasks.len() {
                return Err(ScenarioError::UnknownTask(m.task));
            }
        }
        if self.product_task >= self.tasks.len() {
            return Err(ScenarioError::UnknownTask(self.product_task));
        }
        if self.product_order < 1 {
            return Err(ScenarioError::Invalid("product order must be positive".into()));
        }
        Ok(())
    }

    /// Kahn topological order; deterministic (lowest ready id first).
    pub fn topological_order(&self) -> Result<Vec<TaskId>, ScenarioError> {
        let n = self.tasks.len();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.dependency_edges {
            indeg[b] += 1;
        }
        let mut ready: std::collections::BTreeSet<TaskId> =
            (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&t) = ready.iter().next() {
            ready.remove(&t);
            order.push(t);
            for &(a, b) in &self.dependency_edges {
                if a == t {
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        ready.insert(b);
                    }
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(ScenarioError::Cycle(stuck));
        }
        Ok(order)
    }

    pub fn predecessors(&self, task: TaskId) -> impl Iterator<Item = TaskId> + '_ {
        self.dependency_edges
            .iter()
            .filter(move |(_, b)| *b == task)
            .map(|(a, _)| *a)
    }

    pub fn successors(&self, task: TaskId) -> impl Iterator<Item = TaskId> + '_ {
        self.dependency_edges
            .iter()
            .filter(move |(a, _)| *a == task)
            .map(|(_, b)| *b)
    }

    /// Subtasks that a human performs (alone or with a robot), in id order.
    pub fn human_subtasks(&self) -> Vec<SubtaskId> {
        self.subtasks
            .iter()
            .filter(|s| s.performer.needs_human())
            .map(|s| s.id)
            .collect()
    }

    pub fn task_needs_human(&self, task: TaskId) -> bool {
        self.tasks[task]
            .subtasks
            .iter()
            .any(|&s| self.subtasks[s].performer.needs_human())
    }

    pub fn task_needs_robot(&self, task: TaskId) -> bool {
        self.tasks[task]
            .subtasks
            .iter()
            .any(|&s| self.subtasks[s].performer.needs_robot())
    }

    /// Total number of starts allowed for a task over the whole order.
    pub fn task_cap(&self, task: TaskId) -> u32 {
        self.tasks[task].runs_per_product * self.product_order
    }

    pub fn with_product_order(mut self, products: u32) -> Self {
        self.product_order = products;
        self
    }

    pub fn with_entity_counts(mut self, humans: (usize, usize), robots: (usize, usize)) -> Self {
        self.entity_pool.humans = humans;
        self.entity_pool.robots = robots;
        self
    }

    /// Render back into the text format accepted by [`parse_scenario`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.entity_pool;
        let region = |r: &Region| format!("{}..{}", r.min, r.max);
        out += "[order]\n";
        out += &format!("products = {}\nproduct_task = {}\n\n", self.product_order, self.product_task);
        out += "[entities]\n";
        out += &format!("humans = {}..{}\nrobots = {}..{}\n", p.humans.0, p.humans.1, p.robots.0, p.robots.1);
        out += &format!("human_spawn = {}\n", region(&p.human_spawn));
        out += &format!("robot_spawn = {}\n", region(&p.robot_spawn));
        out += &format!("cage_spawn = {}\n", region(&p.cage_spawn));
        for (i, m) in p.machines.iter().enumerate() {
            out += &format!("machine.{i} = {} @ {}\n", m.name, m.cell);
        }
        for (i, m) in p.materials.iter().enumerate() {
            out += &format!("material.{i} = {} @ {}\n", m.name, m.task);
        }
        out += "\n[subtasks]\n";
        for s in &self.subtasks {
            let perf = match s.performer {
                Performer::Human => "human",
                Performer::Robot => "robot",
                Performer::HumanRobot => "human+robot",
                Performer::Machine => "machine",
            };
            let loc = match s.location {
                Location::Cell(c) => c.to_string(),
                Location::Cage => "cage".into(),
            };
            out += &format!("{} | {} | {} | {} | {}\n", s.id, s.name, perf, s.static_time, loc);
        }
        out += "\n[tasks]\n";
        for t in &self.tasks {
            let subs: Vec<String> = t.subtasks.iter().map(|s| s.to_string()).collect();
            let machine = t.machine.map_or("-".to_string(), |m| m.to_string());
            out += &format!(
                "{} | {} | {} | {} | {}\n",
                t.id,
                t.name,
                subs.join(","),
                t.runs_per_product,
                machine
            );
        }
        out += "\n[deps]\n";
        for (a, b) in &self.dependency_edges {
            out += &format!("{a} -> {b}\n");
        }
        out += "\n[fatigue]\n";
        let ft = &self.fatigue_table;
        for (s, l) in &ft.lambda {
            out += &format!("lambda.{s} = {l:?}\n");
        }
        for m in RestMode::ALL {
            out += &format!("mu.{} = {:?}\n", m.name(), ft.mu(m));
        }
        out += &format!("delta_eff = {:?}\n", ft.delta_eff);
        for t in HumanType::ALL {
            out += &format!("type.{} = {:?}\n", t.name(), ft.multiplier(t));
        }
        out += "\n[grid]\n";
        for r in 0..self.grid.height {
            let row: String = (0..self.grid.width)
                .map(|c| if self.grid.is_free(Cell::new(r, c)) { '.' } else { '#' })
                .collect();
            out += &row;
            out.push('\n');
        }
        out
    }
}

/// The bundled duct-workshop scenario.
pub fn default_scenario() -> Scenario {
    parse_scenario(DEFAULT_SCENARIO).expect("bundled scenario is valid")
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_scenario(&text)
}

fn collect_indexed<T>(m: BTreeMap<usize, T>, what: &str) -> Result<Vec<T>, ScenarioError> {
    let n = m.len();
    if m.keys().copied().ne(0..n) {
        return Err(ScenarioError::Invalid(format!("{what} indices must be 0..n")));
    }
    Ok(m.into_values().collect())
}

fn parse_err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_cell(s: &str, line: usize) -> Result<Cell, ScenarioError> {
    let (r, c) = s
        .trim()
        .split_once(',')
        .ok_or_else(|| parse_err(line, format!("expected `row,col`, got `{s}`")))?;
    let row = r.trim().parse().map_err(|_| parse_err(line, format!("bad row `{r}`")))?;
    let col = c.trim().parse().map_err(|_| parse_err(line, format!("bad col `{c}`")))?;
    Ok(Cell::new(row, col))
}

fn parse_range(s: &str, line: usize) -> Result<(usize, usize), ScenarioError> {
    let (a, b) = s
        .trim()
        .split_once("..")
        .ok_or_else(|| parse_err(line, format!("expected `lo..hi`, got `{s}`")))?;
    let lo = a.trim().parse().map_err(|_| parse_err(line, format!("bad number `{a}`")))?;
    let hi = b.trim().parse().map_err(|_| parse_err(line, format!("bad number `{b}`")))?;
    Ok((lo, hi))
}

fn parse_region(s: &str, line: usize) -> Result<Region, ScenarioError> {
    let (a, b) = s
        .trim()
        .split_once("..")
        .ok_or_else(|| parse_err(line, format!("expected `r,c..r,c`, got `{s}`")))?;
    Ok(Region {
        min: parse_cell(a, line)?,
        max: parse_cell(b, line)?,
    })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, ScenarioError> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad number `{}`", s.trim())))
}

/// Parse the sectioned scenario text format.
///
/// Sections: `[order]`, `[entities]`, `[subtasks]`, `[tasks]`, `[deps]`,
/// `[fatigue]`, `[grid]`. `#` starts a comment except inside `[grid]`, where
/// rows are `.` (free) and `#` (obstacle). Table rows are `|`-separated.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut section = String::new();
    let mut products: Option<u32> = None;
    let mut product_task: Option<TaskId> = None;
    let mut humans = None;
    let mut robots = None;
    let mut human_spawn = None;
    let mut robot_spawn = None;
    let mut cage_spawn = None;
    let mut machines: BTreeMap<usize, MachineDef> = BTreeMap::new();
    let mut materials: BTreeMap<usize, MaterialDef> = BTreeMap::new();
    let mut subtasks = Vec::new();
    let mut tasks = Vec::new();
    let mut deps = Vec::new();
    let mut lambda = BTreeMap::new();
    let mut mu: [Option<f64>; 3] = [None; 3];
    let mut delta_eff = None;
    let mut types: [Option<f64>; 3] = [None; 3];
    let mut grid_rows: Vec<String> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if section == "grid" && !trimmed.is_empty() && !trimmed.starts_with('[') {
            if trimmed.chars().any(|c| c != '.' && c != '#') {
                return Err(parse_err(line, "grid rows may only contain `.` and `#`"));
            }
            grid_rows.push(trimmed.to_string());
            continue;
        }
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            let name = content
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| parse_err(line, "malformed section header"))?;
            match name {
                "order" | "entities" | "subtasks" | "tasks" | "deps" | "fatigue" | "grid" => {
                    section = name.to_string()
                }
                _ => return Err(parse_err(line, format!("unknown section [{name}]"))),
            }
            continue;
        }
        let unknown = |key: &str| ScenarioError::UnknownKey {
            line,
            section: section.clone(),
            key: key.to_string(),
        };
        match section.as_str() {
            "order" | "entities" | "fatigue" => {
                let (key, value) = content
                    .split_once('=')
                    .ok_or_else(|| parse_err(line, "expected `key = value`"))?;
                let key = key.trim();
                let value = value.trim();
                match (section.as_str(), key) {
                    ("order", "products") => products = Some(parse_num(value, line)?),
                    ("order", "product_task") => product_task = Some(parse_num(value, line)?),
                    ("entities", "humans") => humans = Some(parse_range(value, line)?),
                    ("entities", "robots") => robots = Some(parse_range(value, line)?),
                    ("entities", "human_spawn") => human_spawn = Some(parse_region(value, line)?),
                    ("entities", "robot_spawn") => robot_spawn = Some(parse_region(value, line)?),
                    ("entities", "cage_spawn") => cage_spawn = Some(parse_region(value, line)?),
                    ("entities", k) if k.starts_with("machine.") => {
                        let i: usize = parse_num(&k["machine.".len()..], line)?;
                        let (name, cell) = value
                            .split_once('@')
                            .ok_or_else(|| parse_err(line, "expected `name @ row,col`"))?;
                        machines.insert(
                            i,
                            MachineDef {
                                name: name.trim().to_string(),
                                cell: parse_cell(cell, line)?,
                            },
                        );
                    }
                    ("entities", k) if k.starts_with("material.") => {
                        let i: usize = parse_num(&k["material.".len()..], line)?;
                        let (name, task) = value
                            .split_once('@')
                            .ok_or_else(|| parse_err(line, "expected `name @ task`"))?;
                        materials.insert(
                            i,
                            MaterialDef {
                                name: name.trim().to_string(),
                                task: parse_num(task, line)?,
                            },
                        );
                    }
                    ("fatigue", k) if k.starts_with("lambda.") => {
                        let s: SubtaskId = parse_num(&k["lambda.".len()..], line)?;
                        lambda.insert(s, parse_num::<f64>(value, line)?);
                    }
                    ("fatigue", k) if k.starts_with("mu.") => {
                        let mode = match &k["mu.".len()..] {
                            "free" => RestMode::Free,
                            "waiting" => RestMode::Waiting,
                            "walking" => RestMode::Walking,
                            _ => return Err(unknown(k)),
                        };
                        mu[mode.index()] = Some(parse_num(value, line)?);
                    }
                    ("fatigue", "delta_eff") => delta_eff = Some(parse_num(value, line)?),
                    ("fatigue", k) if k.starts_with("type.") => {
                        let t = match &k["type.".len()..] {
                            "weak" => HumanType::Weak,
                            "normal" => HumanType::Normal,
                            "strong" => HumanType::Strong,
                            _ => return Err(unknown(k)),
                        };
                        types[t.index()] = Some(parse_num(value, line)?);
                    }
                    (_, k) => return Err(unknown(k)),
                }
            }
            "subtasks" => {
                let cols: Vec<&str> = content.split('|').map(str::trim).collect();
                if cols.len() != 5 {
                    return Err(parse_err(line, "subtask rows need 5 columns"));
                }
                let performer = Performer::parse(cols[2])
                    .ok_or_else(|| parse_err(line, format!("unknown performer `{}`", cols[2])))?;
                let location = if cols[4] == "cage" {
                    Location::Cage
                } else {
                    Location::Cell(parse_cell(cols[4], line)?)
                };
                subtasks.push(SubtaskDef {
                    id: parse_num(cols[0], line)?,
                    name: cols[1].to_string(),
                    performer,
                    static_time: parse_num(cols[3], line)?,
                    location,
                });
            }
            "tasks" => {
                let cols: Vec<&str> = content.split('|').map(str::trim).collect();
                if cols.len() != 5 {
                    return Err(parse_err(line, "task rows need 5 columns"));
                }
                let subs = cols[2]
                    .split(',')
                    .map(|s| parse_num(s, line))
                    .collect::<Result<Vec<SubtaskId>, _>>()?;
                let machine = if cols[4] == "-" {
                    None
                } else {
                    Some(parse_num(cols[4], line)?)
                };
                tasks.push(TaskDef {
                    id: parse_num(cols[0], line)?,
                    name: cols[1].to_string(),
                    subtasks: subs,
                    runs_per_product: parse_num(cols[3], line)?,
                    machine,
                });
            }
            "deps" => {
                let (a, b) = content
                    .split_once("->")
                    .ok_or_else(|| parse_err(line, "expected `a -> b`"))?;
                deps.push((parse_num(a, line)?, parse_num(b, line)?));
            }
            "grid" => unreachable!(),
            _ => return Err(parse_err(line, "content outside of a section")),
        }
    }

    let missing = |what: &str| ScenarioError::Invalid(format!("missing `{what}`"));
    if grid_rows.is_empty() {
        return Err(missing("[grid]"));
    }
    let width = grid_rows[0].len();
    if grid_rows.iter().any(|r| r.len() != width) {
        return Err(ScenarioError::Invalid("grid rows have unequal width".into()));
    }
    let rows: Vec<&str> = grid_rows.iter().map(String::as_str).collect();
    let grid = GridMap::from_rows(&rows);

    let machines = collect_indexed(machines, "machine")?;
    let materials = collect_indexed(materials, "material")?;

    let mut mu_vals = [0.0; 3];
    for m in RestMode::ALL {
        mu_vals[m.index()] = mu[m.index()].ok_or_else(|| missing(&format!("mu.{}", m.name())))?;
    }
    let mut type_vals = [0.0; 3];
    for t in HumanType::ALL {
        type_vals[t.index()] = types[t.index()].unwrap_or(match t {
            HumanType::Weak => 1.2,
            HumanType::Normal => 1.0,
            HumanType::Strong => 0.8,
        });
    }

    let product_task = match product_task {
        Some(t) => t,
        None => {
            let sinks: Vec<TaskId> = (0..tasks.len())
                .filter(|&t| !deps.iter().any(|&(a, _)| a == t))
                .collect();
            match sinks.as_slice() {
                [only] => *only,
                _ => return Err(missing("product_task (no unique sink task)")),
            }
        }
    };

    let scenario = Scenario {
        tasks,
        subtasks,
        dependency_edges: deps,
        grid,
        fatigue_table: FatigueTable {
            lambda,
            mu: mu_vals,
            delta_eff: delta_eff.ok_or_else(|| missing("delta_eff"))?,
            type_multipliers: type_vals,
        },
        entity_pool: EntityPool {
            humans: humans.unwrap_or((1, 3)),
            robots: robots.unwrap_or((1, 3)),
            human_spawn: human_spawn.ok_or_else(|| missing("human_spawn"))?,
            robot_spawn: robot_spawn.ok_or_else(|| missing("robot_spawn"))?,
            cage_spawn: cage_spawn.ok_or_else(|| missing("cage_spawn"))?,
            machines,
            materials,
        },
        product_order: products.unwrap_or(8),
        product_task,
    };
    scenario.validate()?;
    Ok(scenario)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanInit {
    pub position: Cell,
    pub human_type: HumanType,
    /// λ multiplier applied to every subtask rate of this human.
    pub multiplier: f64,
}

/// Randomized per-episode initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInit {
    pub humans: Vec<HumanInit>,
    pub robots: Vec<Cell>,
    pub cage: Cell,
    pub seed: u64,
}

impl EpisodeInit {
    /// Check this init against the scenario it was drawn for.
    pub fn validate(&self, s: &Scenario) -> Result<(), ScenarioError> {
        let pool = &s.entity_pool;
        let in_range = |n: usize, (lo, hi): (usize, usize)| n >= lo && n <= hi;
        if !in_range(self.humans.len(), pool.humans) || !in_range(self.robots.len(), pool.robots) {
            return Err(ScenarioError::Invalid("entity count outside pool range".into()));
        }
        let cells = self.humans.iter().map(|h| h.position).chain(self.robots.iter().copied());
        for c in cells.chain(std::iter::once(self.cage)) {
            if !s.grid.is_free(c) {
                return Err(ScenarioError::Invalid(format!("spawn cell {c} is not free")));
            }
        }
        for h in &self.humans {
            if h.multiplier != s.fatigue_table.multiplier(h.human_type) {
                return Err(ScenarioError::Invalid("human multiplier does not match type".into()));
            }
        }
        Ok(())
    }
}

fn draw_cells(
    grid: &GridMap,
    region: Region,
    n: usize,
    taken: &mut Vec<Cell>,
    rng: &mut ChaCha8Rng,
    what: &'static str,
) -> Result<Vec<Cell>, ScenarioError> {
    let mut pool: Vec<Cell> = region
        .cells()
        .filter(|c| grid.is_free(*c) && !taken.contains(c))
        .collect();
    if pool.len() < n {
        return Err(ScenarioError::SpawnFailure { what });
    }
    pool.shuffle(rng);
    pool.truncate(n);
    taken.extend(pool.iter().copied());
    Ok(pool)
}

/// Draw entity counts, human types and start cells for one episode.
pub fn randomize_episode(s: &Scenario, seed: u64) -> Result<EpisodeInit, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = &s.entity_pool;
    let n_humans = rng.gen_range(pool.humans.0..=pool.humans.1);
    let n_robots = rng.gen_range(pool.robots.0..=pool.robots.1);
    let types: Vec<HumanType> = (0..n_humans)
        .map(|_| HumanType::ALL[rng.gen_range(0..3)])
        .collect();
    let mut taken = Vec::new();
    let cage = draw_cells(&s.grid, pool.cage_spawn, 1, &mut taken, &mut rng, "cage")?[0];
    let human_cells = draw_cells(&s.grid, pool.human_spawn, n_humans, &mut taken, &mut rng, "humans")?;
    let robots = draw_cells(&s.grid, pool.robot_spawn, n_robots, &mut taken, &mut rng, "robots")?;
    let humans = human_cells
        .into_iter()
        .zip(types)
        .map(|(position, human_type)| HumanInit {
            position,
            human_type,
            multiplier: s.fatigue_table.multiplier(human_type),
        })
        .collect();
    Ok(EpisodeInit {
        humans,
        robots,
        cage,
        seed,
    })
}
