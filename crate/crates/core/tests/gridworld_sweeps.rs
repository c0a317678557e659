use std::collections::VecDeque;

use vla_core::gridworld::{
    expert_action, generate_episode, step, Action, EnvConfig, Pos, TaskType, Verbosity, WorldState,
};
use vla_core::harness::{evaluate, intention_vocabulary, ExperimentConfig, Policy};

/// Plain BFS from the agent outwards; returns the distance to the nearest goal.
fn bfs_from_agent(state: &WorldState, goals: &[Pos]) -> Option<u32> {
    let n = state.size();
    let mut seen = vec![false; n * n];
    let mut q = VecDeque::from([(state.agent(), 0u32)]);
    seen[state.agent().0 * n + state.agent().1] = true;
    while let Some(((r, c), d)) = q.pop_front() {
        if goals.contains(&(r, c)) {
            return Some(d);
        }
        let next = [(r as i64 - 1, c as i64), (r as i64 + 1, c as i64), (r as i64, c as i64 - 1), (r as i64, c as i64 + 1)];
        for (nr, nc) in next {
            if nr < 0 || nc < 0 || nr >= n as i64 || nc >= n as i64 {
                continue;
            }
            let p = (nr as usize, nc as usize);
            if !seen[p.0 * n + p.1] && state.at(p).passable() {
                seen[p.0 * n + p.1] = true;
                q.push_back((p, d + 1));
            }
        }
    }
    None
}

fn goals(state: &WorldState, task: TaskType, target: Pos) -> Vec<Pos> {
    if task == TaskType::EngageEnemyUsingCover {
        state.firing_cells(target)
    } else {
        vec![target]
    }
}

#[test]
fn expert_solves_1000_seeds_along_shortest_paths() {
    let cfg = EnvConfig::default();
    for seed in 0..1000 {
        let (mut s, task) = generate_episode(seed, &cfg).unwrap();
        let shortest = bfs_from_agent(&s, &goals(&s, task.task_type, task.target)).expect("solvable");
        let extra = u32::from(task.task_type == TaskType::EngageEnemyUsingCover);
        assert!(shortest + extra <= task.budget);
        loop {
            // every move the expert makes reduces the independent distance by one
            let before = bfs_from_agent(&s, &goals(&s, task.task_type, task.target)).unwrap();
            let a = expert_action(&s, &task).unwrap();
            let out = step(&s, &task, a);
            if a.delta().is_some() {
                let after = bfs_from_agent(&out.state, &goals(&out.state, task.task_type, task.target)).unwrap();
                assert_eq!(after + 1, before, "seed {seed}: {a:?} is not on a shortest path");
            }
            s = out.state;
            if out.done {
                assert!(out.success, "seed {seed} failed");
                break;
            }
        }
        assert_eq!(s.steps, shortest + extra, "seed {seed}");
    }
}

#[test]
fn task_and_verbosity_frequencies_match_weights() {
    // chi-square, 3 degrees of freedom each; 16.27 is the 0.999 quantile
    let mut cfg = EnvConfig::default();
    cfg.task_weights = [1.0, 2.0, 3.0, 4.0];
    let n = 10_000;
    let mut tasks = [0usize; 4];
    let mut verb = [0usize; 3];
    for seed in 0..n as u64 {
        let (_, t) = generate_episode(seed, &cfg).unwrap();
        tasks[t.task_type.index()] += 1;
        verb[Verbosity::ALL.iter().position(|&v| v == t.verbosity).unwrap()] += 1;
    }
    let chi = |obs: &[usize], p: &[f64]| -> f64 {
        obs.iter()
            .zip(p)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum()
    };
    let c_task = chi(&tasks, &[0.1, 0.2, 0.3, 0.4]);
    let c_verb = chi(&verb, &[1.0 / 3.0; 3]);
    assert!(c_task < 16.27, "task chi-square {c_task} for {tasks:?}");
    assert!(c_verb < 13.82, "verbosity chi-square {c_verb} for {verb:?}");
}

#[test]
fn random_policy_is_below_expert() {
    let cfg = ExperimentConfig::default();
    let vocab = intention_vocabulary();
    let expert = evaluate(&Policy::Expert, &cfg, &vocab, 1000, cfg.eval.seed_start).unwrap();
    let random = evaluate(&Policy::Random(7), &cfg, &vocab, 1000, cfg.eval.seed_start).unwrap();
    assert_eq!(expert.success_rate, 1.0);
    assert!(random.success_rate < expert.success_rate);
    assert!(random.sr_ci_high < 1.0);
    assert!(expert.episodes.iter().all(|e| e.steps <= e.budget));
    assert!(random.episodes.iter().all(|e| e.steps <= e.budget));
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = ExperimentConfig::default();
    let vocab = intention_vocabulary();
    let a = evaluate(&Policy::Random(3), &cfg, &vocab, 50, 77).unwrap();
    let b = evaluate(&Policy::Random(3), &cfg, &vocab, 50, 77).unwrap();
    assert_eq!(a, b);
    assert!(a.episodes.iter().any(|e| e.actions.contains(&Action::Attack.id())));
}
