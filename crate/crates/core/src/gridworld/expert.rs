use std::collections::VecDeque;

use super::{Action, Pos, TaskType, WorldState};
use crate::error::{Error, Result};

/// Cells the agent has to reach: the target itself, or the firing cells around the enemy.
pub fn goal_cells(state: &WorldState, task_type: TaskType, target: Pos) -> Vec<Pos> {
    match task_type {
        TaskType::EngageEnemyUsingCover => state.firing_cells(target),
        _ => vec![target],
    }
}

/// Multi-source BFS over passable cells; `None` where no goal is reachable.
pub fn bfs_distances(state: &WorldState, goals: &[Pos]) -> Vec<Option<u32>> {
    let n = state.size();
    let mut dist = vec![None; n * n];
    let mut queue = VecDeque::new();
    for &g in goals {
        if dist[g.0 * n + g.1].is_none() {
            dist[g.0 * n + g.1] = Some(0);
            queue.push_back(g);
        }
    }
    while let Some(p) = queue.pop_front() {
        let d = dist[p.0 * n + p.1].unwrap();
        for dir in Action::MOVES {
            if let Some(q) = state.neighbor(p, dir) {
                if state.at(q).passable() && dist[q.0 * n + q.1].is_none() {
                    dist[q.0 * n + q.1] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
    }
    dist
}

/// Shortest-path action with N > E > S > W preference among equally short moves.
/// From a firing cell during an engage task the expert attacks.
pub fn expert_action(state: &WorldState, task: &super::TaskDescriptor) -> Result<Action> {
    let goals = goal_cells(state, task.task_type, task.target);
    let dist = bfs_distances(state, &goals);
    let n = state.size();
    let here = state.agent();
    let d = dist[here.0 * n + here.1]
        .ok_or_else(|| Error::data(format!("target unreachable from agent at {here:?}")))?;
    if d == 0 {
        return Ok(match task.task_type {
            TaskType::EngageEnemyUsingCover => Action::Attack,
            _ => Action::Noop,
        });
    }
    for dir in Action::MOVES {
        if let Some(q) = state.neighbor(here, dir) {
            if dist[q.0 * n + q.1] == Some(d - 1) {
                return Ok(dir);
            }
        }
    }
    unreachable!("a cell at distance {d} has a neighbor at distance {}", d - 1)
}
