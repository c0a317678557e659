//! Deterministic top-down "FPS-lite" board supplying episodes for imitation.
//!
//! A board holds walls (cover), one enemy, and one each of item, vehicle and
//! safezone marker, plus the agent. Every episode asks for one of four tasks;
//! because all candidate targets are always present, the policy has to read the
//! instruction to know where to go.

mod expert;
mod instructions;
mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use expert::{bfs_distances, expert_action, goal_cells};
pub use instructions::{instruction_text, instruction_words, max_instruction_len, word_vocabulary, Verbosity, DISTRACTOR_POOL, TASK_NOUNS};
pub use render::{render, RenderConfig, TexturedRaster, CELL_PX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Entity {
    Empty,
    Wall,
    Enemy,
    Item,
    Vehicle,
    Safezone,
}

impl Entity {
    pub fn passable(self) -> bool {
        !matches!(self, Entity::Wall | Entity::Enemy)
    }
}

pub const N_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    North,
    East,
    South,
    West,
    Attack,
    Noop,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::North,
        Action::East,
        Action::South,
        Action::West,
        Action::Attack,
        Action::Noop,
    ];

    /// Move actions in tie-break preference order.
    pub const MOVES: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Action> {
        Action::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::data(format!("invalid action id {id}")))
    }

    /// (drow, dcol) for moves.
    pub fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::North => Some((-1, 0)),
            Action::East => Some((0, 1)),
            Action::South => Some((1, 0)),
            Action::West => Some((0, -1)),
            _ => None,
        }
    }
}

pub type Pos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    ReachItem,
    ReachVehicle,
    ReachSafezone,
    EngageEnemyUsingCover,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::ReachItem,
        TaskType::ReachVehicle,
        TaskType::ReachSafezone,
        TaskType::EngageEnemyUsingCover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::ReachItem => "reach_item",
            TaskType::ReachVehicle => "reach_vehicle",
            TaskType::ReachSafezone => "reach_safezone",
            TaskType::EngageEnemyUsingCover => "engage_enemy_using_cover",
        }
    }

    pub fn target_entity(self) -> Entity {
        match self {
            TaskType::ReachItem => Entity::Item,
            TaskType::ReachVehicle => Entity::Vehicle,
            TaskType::ReachSafezone => Entity::Safezone,
            TaskType::EngageEnemyUsingCover => Entity::Enemy,
        }
    }

    pub fn index(self) -> usize {
        TaskType::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::data(format!("unknown task type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_type: TaskType,
    /// Cell of the target entity.
    pub target: Pos,
    pub budget: u32,
    pub template_id: u8,
    pub verbosity: Verbosity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    size: usize,
    cells: Vec<Entity>,
    agent: Pos,
    /// Last move direction; starts North.
    pub facing: Action,
    pub steps: u32,
    pub seed: u64,
}

impl WorldState {
    pub fn new(size: usize, cells: Vec<Entity>, agent: Pos, seed: u64) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::data(format!("board has {} cells, expected {}", cells.len(), size * size)));
        }
        if agent.0 >= size || agent.1 >= size {
            return Err(Error::data(format!("agent {agent:?} off board")));
        }
        if !cells[agent.0 * size + agent.1].passable() {
            return Err(Error::data(format!("agent {agent:?} placed on an obstacle")));
        }
        Ok(WorldState {
            size,
            cells,
            agent,
            facing: Action::North,
            steps: 0,
            seed,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn at(&self, p: Pos) -> Entity {
        self.cells[p.0 * self.size + p.1]
    }

    pub fn cells(&self) -> &[Entity] {
        &self.cells
    }

    pub fn find(&self, e: Entity) -> Option<Pos> {
        self.cells
            .iter()
            .position(|&c| c == e)
            .map(|i| (i / self.size, i % self.size))
    }

    pub fn neighbor(&self, p: Pos, dir: Action) -> Option<Pos> {
        let (dr, dc) = dir.delta()?;
        let r = p.0 as i32 + dr;
        let c = p.1 as i32 + dc;
        if r < 0 || c < 0 || r >= self.size as i32 || c >= self.size as i32 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Empty-or-passable 4-neighbors of `enemy` that touch a wall in their 8-neighborhood.
    pub fn firing_cells(&self, enemy: Pos) -> Vec<Pos> {
        Action::MOVES
            .iter()
            .filter_map(|&d| self.neighbor(enemy, d))
            .filter(|&p| self.at(p).passable() && self.touches_wall(p))
            .collect()
    }

    fn touches_wall(&self, p: Pos) -> bool {
        for dr in -1i32..=1 {
            for dc in -1i32..=1 {
                let r = p.0 as i32 + dr;
                let c = p.1 as i32 + dc;
                if (dr, dc) != (0, 0)
                    && r >= 0
                    && c >= 0
                    && r < self.size as i32
                    && c < self.size as i32
                    && self.cells[r as usize * self.size + c as usize] == Entity::Wall
                {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub done: bool,
    pub success: bool,
}

/// Deterministic transition. Reach tasks succeed when the agent stands on the
/// target; the engage task succeeds on `Attack` from a firing cell.
pub fn step(state: &WorldState, task: &TaskDescriptor, action: Action) -> StepOutcome {
    let mut next = state.clone();
    next.steps += 1;
    let mut success = false;
    match action {
        Action::North | Action::East | Action::South | Action::West => {
            next.facing = action;
            if let Some(p) = state.neighbor(state.agent, action) {
                if state.at(p).passable() {
                    next.agent = p;
                }
            }
            if task.task_type != TaskType::EngageEnemyUsingCover && next.agent == task.target {
                success = true;
            }
        }
        Action::Attack => {
            if task.task_type == TaskType::EngageEnemyUsingCover
                && state.firing_cells(task.target).contains(&state.agent)
            {
                success = true;
            }
        }
        Action::Noop => {}
    }
    let done = success || next.steps >= task.budget;
    StepOutcome {
        state: next,
        done,
        success,
    }
}

pub fn step_id(state: &WorldState, task: &TaskDescriptor, action_id: u8) -> Result<StepOutcome> {
    Ok(step(state, task, Action::from_id(action_id)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub board_size: usize,
    /// Relative frequency per task type, in `TaskType::ALL` order.
    pub task_weights: [f64; 4],
    /// Relative frequency of terse / verbose / distractor-laden instructions.
    pub verbosity_weights: [f64; 3],
    pub wall_segments: usize,
    /// Steps granted beyond the shortest solution.
    pub budget_slack: u32,
    pub render: RenderConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            board_size: 16,
            task_weights: [1.0; 4],
            verbosity_weights: [1.0, 1.0, 1.0],
            wall_segments: 10,
            budget_slack: 8,
            render: RenderConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.board_size < 4 {
            return Err(Error::config(format!("board_size {} too small (minimum 4)", self.board_size)));
        }
        if self.task_weights.iter().any(|w| !(*w >= 0.0)) || self.task_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("task_weights must be non-negative with a positive sum"));
        }
        if self.verbosity_weights.iter().any(|w| !(*w >= 0.0)) || self.verbosity_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("verbosity_weights must be non-negative with a positive sum"));
        }
        let free = self.board_size * self.board_size;
        if self.wall_segments * 3 + 6 > free / 2 {
            return Err(Error::config(format!(
                "{} wall segments do not fit on a {}x{} board",
                self.wall_segments, self.board_size, self.board_size
            )));
        }
        Ok(())
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap()
}

/// Samples a solvable episode; a pure function of `(seed, cfg)`.
pub fn generate_episode(seed: u64, cfg: &EnvConfig) -> Result<(WorldState, TaskDescriptor)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task_type = TaskType::ALL[weighted_index(&mut rng, &cfg.task_weights)];
    let verbosity = Verbosity::ALL[weighted_index(&mut rng, &cfg.verbosity_weights)];
    let template_id = rng.gen_range(0..instructions::n_templates(task_type)) as u8;
    let n = cfg.board_size;

    for _attempt in 0..200 {
        let mut cells = vec![Entity::Empty; n * n];
        for _ in 0..cfg.wall_segments {
            let len = rng.gen_range(1..=3usize);
            let horizontal = rng.gen::<bool>();
            let r0 = rng.gen_range(0..n);
            let c0 = rng.gen_range(0..n);
            for i in 0..len {
                let (r, c) = if horizontal { (r0, c0 + i) } else { (r0 + i, c0) };
                if r < n && c < n {
                    cells[r * n + c] = Entity::Wall;
                }
            }
        }
        let mut free: Vec<usize> = (0..n * n).filter(|&i| cells[i] == Entity::Empty).collect();
        free.shuffle(&mut rng);
        let mut take = || free.pop();
        let (Some(enemy), Some(item), Some(vehicle), Some(safezone), Some(agent)) = (take(), take(), take(), take(), take())
        else {
            continue;
        };
        cells[enemy] = Entity::Enemy;
        cells[item] = Entity::Item;
        cells[vehicle] = Entity::Vehicle;
        cells[safezone] = Entity::Safezone;
        let agent = (agent / n, agent % n);
        let state = WorldState::new(n, cells, agent, seed)?;
        let target = state.find(task_type.target_entity()).expect("placed above");

        let goals = goal_cells(&state, task_type, target);
        if goals.is_empty() {
            continue;
        }
        let dist = bfs_distances(&state, &goals);
        let Some(d) = dist[agent.0 * n + agent.1] else { continue };
        if d == 0 {
            continue;
        }
        let needed = d + u32::from(task_type == TaskType::EngageEnemyUsingCover);
        let task = TaskDescriptor {
            task_type,
            target,
            budget: needed + cfg.budget_slack,
            template_id,
            verbosity,
        };
        return Ok((state, task));
    }
    Err(Error::config(format!(
        "could not place a solvable episode on a {n}x{n} board with {} wall segments",
        cfg.wall_segments
    )))
}

/// Shortest number of actions the expert needs from `state`.
pub fn optimal_steps(state: &WorldState, task: &TaskDescriptor) -> Option<u32> {
    let goals = goal_cells(state, task.task_type, task.target);
    let d = bfs_distances(state, &goals)[state.agent.0 * state.size + state.agent.1]?;
    Some(d + u32::from(task.task_type == TaskType::EngageEnemyUsingCover))
}

/// Runs `policy` until done; returns (success, steps taken).
pub fn rollout<F>(state: &WorldState, task: &TaskDescriptor, mut policy: F) -> Result<(bool, u32, Vec<WorldState>)>
where
    F: FnMut(&WorldState, u32) -> Result<Action>,
{
    let mut s = state.clone();
    let mut visited = vec![s.clone()];
    loop {
        let a = policy(&s, s.steps)?;
        let out = step(&s, task, a);
        s = out.state;
        visited.push(s.clone());
        if out.done {
            return Ok((out.success, s.steps, visited));
        }
    }
}
