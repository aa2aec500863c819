use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use videoagent_core::gridworld::{
    expert_demo, generate_demos, read_dataset, reset, shortest_solutions, solve, step, write_dataset, GridError,
    Pos, GRID_SIZE, MAX_DEMO_LEN, TASKS,
};
use videoagent_core::{Action, GridState, Trajectory};

/// Shortest pushing solution length by plain BFS over (agent, block),
/// written against the movement rules directly.
fn bfs_length(start: &GridState) -> Option<usize> {
    let inside = |(r, c): (isize, isize)| r >= 0 && c >= 0 && r < GRID_SIZE as isize && c < GRID_SIZE as isize;
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([((start.agent, start.block), 0usize)]);
    seen.insert((start.agent, start.block));
    while let Some(((agent, block), d)) = queue.pop_front() {
        if block == start.goal {
            return Some(d);
        }
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let a2 = (agent.0 as isize + dr, agent.1 as isize + dc);
            if !inside(a2) {
                continue;
            }
            let a2: Pos = (a2.0 as usize, a2.1 as usize);
            let next = if a2 == block {
                let b2 = (block.0 as isize + dr, block.1 as isize + dc);
                if !inside(b2) {
                    continue;
                }
                (a2, (b2.0 as usize, b2.1 as usize))
            } else {
                (a2, block)
            };
            if seen.insert(next) {
                queue.push_back((next, d + 1));
            }
        }
    }
    None
}

#[test]
fn solver_matches_independent_bfs() {
    for task in TASKS {
        for seed in 0..200 {
            let s = reset(task, seed);
            let want = bfs_length(&s).expect("reset states are solvable");
            let path = solve(&s).unwrap();
            assert_eq!(path.len(), want, "task {} seed {seed}", task.id);
            assert!(want <= MAX_DEMO_LEN);
            let all = shortest_solutions(&s);
            assert!(!all.is_empty());
            for p in &all {
                assert_eq!(p.len(), want);
                assert_eq!(Trajectory::rollout(s, p).reward, 1);
            }
        }
    }
}

#[test]
fn each_task_has_sixty_distinct_starts() {
    for task in TASKS {
        let layouts: HashSet<_> = (0..3000).map(|seed| reset(task, seed).layout()).collect();
        assert_eq!(layouts.len(), 60, "task {}", task.id);
    }
}

#[test]
fn pushing_against_the_wall_moves_nothing() {
    let s = GridState {
        task: 0,
        agent: (0, 1),
        block: (0, 0),
        goal: TASKS[0].goal,
        step_count: 0,
        max_steps: 24,
    };
    let (next, r) = step(&s, Action::Left).unwrap();
    assert_eq!((next.agent, next.block, r), (s.agent, s.block, 0));
    assert_eq!(next.step_count, 1);
}

#[test]
fn terminal_states_refuse_to_step() {
    let mut s = reset(TASKS[2], 4);
    s.step_count = s.max_steps;
    assert!(matches!(step(&s, Action::Up), Err(GridError::Terminal { .. })));
}

#[test]
fn dataset_round_trips_and_rejects_bad_headers() {
    let records = generate_demos(3, 40, 8).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, 4, &records).unwrap();
    let (tasks, back) = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(tasks, 4);
    assert_eq!(back.len(), records.len());
    for (a, b) in back.iter().zip(&records) {
        assert_eq!((a.task, a.seed, &a.actions), (b.task, b.seed, &b.actions));
        let bytes = |r: &videoagent_core::gridworld::DemoRecord| r.frames.iter().flat_map(|f| f.to_u8()).collect::<Vec<_>>();
        assert_eq!(bytes(a), bytes(b));
    }
    let mut again = Vec::new();
    write_dataset(&mut again, 4, &back).unwrap();
    assert_eq!(again, buf, "8-bit pixels make a second round trip exact");

    let mut bad = buf.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(read_dataset(bad.as_slice()).unwrap_err().to_string().contains("version"));
    let mut bad = buf;
    bad[0] = b'X';
    assert!(read_dataset(bad.as_slice()).is_err());
}

proptest! {
    #[test]
    fn expert_demos_are_deterministic_and_succeed(task in 0usize..4, seed in any::<u64>()) {
        let a = expert_demo(TASKS[task], seed).unwrap();
        let b = expert_demo(TASKS[task], seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.reward, 1);
        prop_assert_eq!(a.renders.len(), a.actions.len() + 1);
    }

    #[test]
    fn rollouts_stay_on_the_grid_and_stop_when_terminal(
        task in 0usize..4,
        seed in 0u64..500,
        codes in prop::collection::vec(0u8..4, 0..40),
    ) {
        let actions: Vec<Action> = codes.iter().map(|c| Action::from_code(*c).unwrap()).collect();
        let start = reset(TASKS[task], seed);
        let traj = Trajectory::rollout(start, &actions);
        let end = traj.final_state();
        prop_assert!(end.agent.0 < GRID_SIZE && end.agent.1 < GRID_SIZE);
        prop_assert!(end.agent != end.block);
        prop_assert!(traj.actions.len() <= start.max_steps as usize);
        prop_assert_eq!(traj.reward, end.solved() as u8);
        if traj.actions.len() < actions.len() {
            prop_assert!(end.is_terminal());
        }
    }
}
