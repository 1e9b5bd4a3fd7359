//! Grid path planning and nearest-entity expansion of planner choices.

use std::collections::VecDeque;

use crate::env::{ExpandedAction, WorldState};
use crate::estimation::SafeSets;
use crate::scenario::{Cell, GridMap, Scenario, TaskId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathResult {
    Found { path: Vec<Cell>, cost: u32 },
    Unreachable,
}

impl PathResult {
    pub fn cost(&self) -> Option<u32> {
        match self {
            PathResult::Found { cost, .. } => Some(*cost),
            PathResult::Unreachable => None,
        }
    }
}

/// 4-neighbours in ascending (row, col) order.
fn neighbours(grid: &GridMap, c: Cell) -> impl Iterator<Item = Cell> + '_ {
    let up = c.row.checked_sub(1).map(|r| Cell::new(r, c.col));
    let left = c.col.checked_sub(1).map(|col| Cell::new(c.row, col));
    let right = Some(Cell::new(c.row, c.col + 1));
    let down = Some(Cell::new(c.row + 1, c.col));
    [up, left, right, down]
        .into_iter()
        .flatten()
        .filter(move |n| grid.is_free(*n))
}

/// BFS distances from one target cell to every cell; `u32::MAX` marks
/// unreachable or blocked cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    pub target: Cell,
    width: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    pub fn new(grid: &GridMap, target: Cell) -> Self {
        let mut dist = vec![u32::MAX; grid.width * grid.height];
        let mut queue = VecDeque::new();
        if grid.is_free(target) {
            dist[target.row * grid.width + target.col] = 0;
            queue.push_back(target);
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[c.row * grid.width + c.col];
            for n in neighbours(grid, c) {
                let slot = &mut dist[n.row * grid.width + n.col];
                if *slot == u32::MAX {
                    *slot = d + 1;
                    queue.push_back(n);
                }
            }
        }
        Self {
            target,
            width: grid.width,
            dist,
        }
    }

    pub fn distance(&self, c: Cell) -> Option<u32> {
        if c.col >= self.width {
            return None;
        }
        match self.dist.get(c.row * self.width + c.col) {
            Some(&d) if d != u32::MAX => Some(d),
            _ => None,
        }
    }

    /// Next cell on the canonical shortest path from `from`, or `None` when
    /// already at the target or unreachable.
    pub fn next_step(&self, grid: &GridMap, from: Cell) -> Option<Cell> {
        let d = self.distance(from)?;
        if d == 0 {
            return None;
        }
        neighbours(grid, from).find(|n| self.distance(*n) == Some(d - 1))
    }
}

/// Minimal 4-connected path with unit cell cost. Among equal-cost paths the
/// one choosing the lowest (row, col) neighbour at every step is returned.
pub fn shortest_path(grid: &GridMap, from: Cell, to: Cell) -> PathResult {
    if !grid.is_free(from) || !grid.is_free(to) {
        return PathResult::Unreachable;
    }
    let field = DistanceField::new(grid, to);
    let Some(cost) = field.distance(from) else {
        return PathResult::Unreachable;
    };
    let mut path = vec![from];
    let mut cur = from;
    while let Some(n) = field.next_step(grid, cur) {
        path.push(n);
        cur = n;
    }
    PathResult::Found { path, cost }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AllocationError {
    #[error("no idle fatigue-safe human for task {0}")]
    NoHuman(TaskId),
    #[error("no idle robot for task {0}")]
    NoRobot(TaskId),
    #[error("task {0} is not in the safe action set")]
    NotSafe(TaskId),
}

fn nearest(candidates: impl Iterator<Item = (usize, Cell)>, field: &DistanceField) -> Option<(usize, u32)> {
    candidates
        .filter_map(|(id, pos)| field.distance(pos).map(|d| (id, d)))
        .min_by_key(|&(id, d)| (d, id))
}

/// Pick the nearest idle safe human (and nearest idle robot when needed)
/// by path cost to the task's first subtask location.
pub fn allocate(s: &Scenario, task: TaskId, sets: &SafeSets, w: &WorldState) -> Result<ExpandedAction, AllocationError> {
    if !sets.contains(task) {
        return Err(AllocationError::NotSafe(task));
    }
    let target = w.task_entry_cell(s, task);
    let field = DistanceField::new(&s.grid, target);
    let human = if s.task_needs_human(task) {
        let cands = w
            .humans
            .iter()
            .enumerate()
            .filter(|(k, h)| h.is_idle() && sets.human_safe(*k, task))
            .map(|(k, h)| (k, h.pos));
        let (k, d) = nearest(cands, &field).ok_or(AllocationError::NoHuman(task))?;
        Some((k, d))
    } else {
        None
    };
    let robot = if s.task_needs_robot(task) {
        let cands = w
            .robots
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_idle())
            .map(|(k, r)| (k, r.pos));
        Some(nearest(cands, &field).ok_or(AllocationError::NoRobot(task))?)
    } else {
        None
    };
    let t_travel = human.map_or(0, |h| h.1).max(robot.map_or(0, |r| r.1));
    Ok(ExpandedAction {
        task,
        human: human.map(|h| h.0),
        robot: robot.map(|r| r.0),
        t_travel,
    })
}
