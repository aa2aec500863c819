//! Block-pushing grid-world: an agent pushes a colored block onto a colored
//! goal. States are plain values, [`step`] returns a new one.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::video::{Frame, VideoPlan, FRAME_SIDE};

pub const GRID_SIZE: usize = 8;
pub const CELL_PX: usize = FRAME_SIDE / GRID_SIZE;
pub const MAX_STEPS: u32 = 24;
/// Frames per video plan.
pub const PLAN_FRAMES: usize = 8;

pub const EMPTY_LEVEL: f32 = 0.0;
pub const GOAL_LEVEL: f32 = 0.33;
pub const BLOCK_LEVEL: f32 = 0.66;
pub const AGENT_LEVEL: f32 = 1.0;

/// Longest expert solution `reset` will hand out; keeps every demo inside one
/// plan without merging steps.
pub const MAX_DEMO_LEN: usize = PLAN_FRAMES - 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown task id {0} (valid ids are 0..{n})", n = TASKS.len())]
    UnknownTask(usize),
    #[error("cannot step a terminal state (step {step_count}, solved: {solved})")]
    Terminal { step_count: u32, solved: bool },
    #[error("no pushing solution exists from {0:?}")]
    Unsolvable(GridState),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Pos = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Task {
    pub id: usize,
    pub block_color: Color,
    pub goal_color: Color,
    pub goal: Pos,
}

pub const TASKS: [Task; 4] = [
    Task {
        id: 0,
        block_color: Color::Red,
        goal_color: Color::Blue,
        goal: (2, 2),
    },
    Task {
        id: 1,
        block_color: Color::Green,
        goal_color: Color::Yellow,
        goal: (2, 5),
    },
    Task {
        id: 2,
        block_color: Color::Blue,
        goal_color: Color::Red,
        goal: (5, 2),
    },
    Task {
        id: 3,
        block_color: Color::Yellow,
        goal_color: Color::Green,
        goal: (5, 5),
    },
];

impl Task {
    pub fn get(id: usize) -> Result<Task, GridError> {
        TASKS.get(id).copied().ok_or(GridError::UnknownTask(id))
    }

    pub fn all() -> &'static [Task] {
        &TASKS
    }

    pub fn text(&self) -> String {
        format!(
            "push the {} block to the {} goal",
            self.block_color.name(),
            self.goal_color.name()
        )
    }

    /// Inverse of [`Task::text`].
    pub fn from_text(text: &str) -> Option<Task> {
        TASKS.iter().copied().find(|t| t.text() == text.trim())
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

fn offset(p: Pos, d: (isize, isize), k: isize) -> Option<Pos> {
    let r = p.0 as isize + d.0 * k;
    let c = p.1 as isize + d.1 * k;
    let n = GRID_SIZE as isize;
    (r >= 0 && r < n && c >= 0 && c < n).then_some((r as usize, c as usize))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridState {
    pub task: usize,
    pub agent: Pos,
    pub block: Pos,
    pub goal: Pos,
    pub step_count: u32,
    pub max_steps: u32,
}

impl GridState {
    pub fn solved(&self) -> bool {
        self.block == self.goal
    }

    pub fn is_terminal(&self) -> bool {
        self.solved() || self.step_count >= self.max_steps
    }

    pub fn reward(&self) -> u8 {
        self.solved() as u8
    }

    /// The state's positions with the step counter reset, for comparing
    /// configurations reached along different paths.
    pub fn layout(&self) -> (Pos, Pos, Pos) {
        (self.agent, self.block, self.goal)
    }
}

/// Seeds the placement generator. Distinct `(task, seed)` pairs get distinct
/// streams.
fn reset_rng(task: usize, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (task as u64 + 1))
}

/// Places the block one or two cells from the goal with room to push it
/// there, and the agent near the pushing cell. Rejects layouts whose shortest
/// solution exceeds [`MAX_DEMO_LEN`].
pub fn reset(task: Task, seed: u64) -> GridState {
    let mut rng = reset_rng(task.id, seed);
    loop {
        let dir = Action::ALL[rng.random_range(0..4)].delta();
        let dist = rng.random_range(1..=2i32) as isize;
        let Some(block) = offset(task.goal, dir, -dist) else {
            continue;
        };
        let Some(push_cell) = offset(block, dir, -1) else {
            continue;
        };
        let dr = rng.random_range(-2..=2i32) as isize;
        let budget = 2 - dr.abs();
        let dc = rng.random_range(-budget as i32..=budget as i32) as isize;
        let Some(agent) = offset(push_cell, (dr, dc), 1) else {
            continue;
        };
        if agent == block || agent == task.goal {
            continue;
        }
        let state = GridState {
            task: task.id,
            agent,
            block,
            goal: task.goal,
            step_count: 0,
            max_steps: MAX_STEPS,
        };
        match solve(&state) {
            Some(path) if path.len() <= MAX_DEMO_LEN => return state,
            _ => continue,
        }
    }
}

/// Applies one action. Moving into the block pushes it unless the block
/// would leave the grid, in which case nothing moves.
pub fn step(state: &GridState, action: Action) -> Result<(GridState, u8), GridError> {
    if state.is_terminal() {
        return Err(GridError::Terminal {
            step_count: state.step_count,
            solved: state.solved(),
        });
    }
    Ok(transition(state, action))
}

fn transition(state: &GridState, action: Action) -> (GridState, u8) {
    let mut next = *state;
    next.step_count += 1;
    let d = action.delta();
    if let Some(target) = offset(state.agent, d, 1) {
        if target == state.block {
            if let Some(dest) = offset(state.block, d, 1) {
                next.block = dest;
                next.agent = target;
            }
        } else {
            next.agent = target;
        }
    }
    let reward = next.reward();
    (next, reward)
}

/// Paints goal, then block, then agent, so later layers cover earlier ones.
pub fn render(state: &GridState) -> Frame {
    let mut frame = Frame::blank();
    let mut paint = |(r, c): Pos, level: f32| {
        for dr in 0..CELL_PX {
            for dc in 0..CELL_PX {
                frame.set(r * CELL_PX + dr, c * CELL_PX + dc, level);
            }
        }
    };
    paint(state.goal, GOAL_LEVEL);
    paint(state.block, BLOCK_LEVEL);
    paint(state.agent, AGENT_LEVEL);
    frame
}

/// Breadth-first search over (agent, block) placements. Returns a shortest
/// action sequence reaching the goal, trying actions in [`Action::ALL`] order.
pub fn solve(state: &GridState) -> Option<Vec<Action>> {
    if state.solved() {
        return Some(Vec::new());
    }
    let idx = |a: Pos, b: Pos| ((a.0 * GRID_SIZE + a.1) * GRID_SIZE + b.0) * GRID_SIZE + b.1;
    let n = GRID_SIZE.pow(4);
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; n];
    let mut seen = vec![false; n];
    let start = idx(state.agent, state.block);
    seen[start] = true;
    let mut queue = VecDeque::from([(state.agent, state.block)]);
    let mut probe = *state;
    probe.step_count = 0;
    probe.max_steps = u32::MAX;
    while let Some((agent, block)) = queue.pop_front() {
        let from = idx(agent, block);
        for action in Action::ALL {
            probe.agent = agent;
            probe.block = block;
            let (next, _) = transition(&probe, action);
            let to = idx(next.agent, next.block);
            if seen[to] {
                continue;
            }
            seen[to] = true;
            parent[to] = Some((from, action));
            if next.block == state.goal {
                let mut path = Vec::new();
                let mut cur = to;
                while let Some((prev, a)) = parent[cur] {
                    path.push(a);
                    cur = prev;
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back((next.agent, next.block));
        }
    }
    None
}

/// Every shortest action sequence reaching the goal, in lexicographic
/// [`Action::ALL`] order. Empty when the state is unsolvable.
pub fn shortest_solutions(state: &GridState) -> Vec<Vec<Action>> {
    let Some(best) = solve(state) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut probe = *state;
    probe.step_count = 0;
    probe.max_steps = u32::MAX;
    let mut path = Vec::with_capacity(best.len());
    collect_paths(probe, best.len(), &mut path, &mut out);
    out
}

fn collect_paths(state: GridState, left: usize, path: &mut Vec<Action>, out: &mut Vec<Vec<Action>>) {
    if state.solved() {
        if left == 0 {
            out.push(path.clone());
        }
        return;
    }
    if left == 0 || manhattan(state.block, state.goal) > left {
        return;
    }
    for action in Action::ALL {
        let (next, _) = transition(&state, action);
        if next.agent == state.agent {
            continue;
        }
        path.push(action);
        collect_paths(next, left - 1, path, out);
        path.pop();
    }
}

fn manhattan(a: Pos, b: Pos) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// An executed episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: GridState,
    pub actions: Vec<Action>,
    /// One render per visited state, starting with the initial one.
    pub renders: Vec<Frame>,
    pub reward: u8,
}

impl Trajectory {
    pub fn initial_frame(&self) -> &Frame {
        &self.renders[0]
    }

    pub fn final_frame(&self) -> &Frame {
        self.renders.last().expect("trajectory has at least one render")
    }

    /// Steps `start` through `actions`, stopping early at a terminal state.
    pub fn rollout(start: GridState, actions: &[Action]) -> Trajectory {
        let mut state = start;
        let mut renders = vec![render(&state)];
        let mut taken = Vec::new();
        for &a in actions {
            if state.is_terminal() {
                break;
            }
            let (next, _) = transition(&state, a);
            state = next;
            taken.push(a);
            renders.push(render(&state));
        }
        Trajectory {
            start,
            actions: taken,
            renders,
            reward: state.reward(),
        }
    }

    pub fn final_state(&self) -> GridState {
        let mut state = self.start;
        for &a in &self.actions {
            state = transition(&state, a).0;
        }
        state
    }
}

/// Shortest-path expert. When several shortest solutions exist, one is
/// drawn uniformly with an RNG seeded by `(task, seed)`.
pub fn expert_demo(task: Task, seed: u64) -> Result<Trajectory, GridError> {
    let start = reset(task, seed);
    let mut paths = shortest_solutions(&start);
    if paths.is_empty() {
        return Err(GridError::Unsolvable(start));
    }
    let mut rng = reset_rng(task.id, seed ^ 0xE8_9E27);
    let path = paths.swap_remove(rng.random_range(0..paths.len()));
    let traj = Trajectory::rollout(start, &path);
    if traj.reward != 1 {
        return Err(GridError::Unsolvable(start));
    }
    Ok(traj)
}

/// Indices of `h` frames picked evenly from `n`, always including the first
/// and last. With fewer than `h` frames the last index repeats.
pub fn subsample_indices(n: usize, h: usize) -> Vec<usize> {
    assert!(n >= 1 && h >= 2, "need at least one frame and h >= 2");
    if n < h {
        return (0..h).map(|k| k.min(n - 1)).collect();
    }
    (0..h)
        .map(|k| ((k * (n - 1)) as f64 / (h - 1) as f64).round() as usize)
        .collect()
}

pub fn subsample_video(traj: &Trajectory, h: usize) -> VideoPlan {
    let frames: Vec<Frame> = subsample_indices(traj.renders.len(), h)
        .into_iter()
        .map(|i| traj.renders[i].clone())
        .collect();
    VideoPlan::from_frames(&frames)
}

pub const DATASET_MAGIC: &[u8; 4] = b"VADT";
pub const DATASET_VERSION: u32 = 1;

/// One stored demonstration: a video of `frames` plus the actions behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoRecord {
    pub task: usize,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub actions: Vec<Action>,
}

impl DemoRecord {
    pub fn from_trajectory(task: usize, seed: u64, traj: &Trajectory, h: usize) -> Self {
        Self {
            task,
            seed,
            frames: subsample_video(traj, h).to_frames(),
            actions: traj.actions.clone(),
        }
    }

    pub fn plan(&self) -> VideoPlan {
        VideoPlan::from_frames(&self.frames)
    }
}

/// Writes records as `"VADT" | version | task count | records...`, each record
/// `task u32 | seed u32 | H u32 | H·256 u8 | action count u32 | codes u8`.
pub fn write_dataset<W: Write>(mut w: W, task_count: u32, records: &[DemoRecord]) -> Result<(), GridError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&task_count.to_le_bytes())?;
    for rec in records {
        let seed = u32::try_from(rec.seed)
            .map_err(|_| GridError::Dataset(format!("seed {} does not fit in u32", rec.seed)))?;
        w.write_all(&(rec.task as u32).to_le_bytes())?;
        w.write_all(&seed.to_le_bytes())?;
        w.write_all(&(rec.frames.len() as u32).to_le_bytes())?;
        for f in &rec.frames {
            w.write_all(&f.to_u8())?;
        }
        w.write_all(&(rec.actions.len() as u32).to_le_bytes())?;
        let codes: Vec<u8> = rec.actions.iter().map(|a| a.code()).collect();
        w.write_all(&codes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GridError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| GridError::Dataset("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Returns `(task count, records)`.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(u32, Vec<DemoRecord>), GridError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    if cur.len() < 12 || &cur[..4] != DATASET_MAGIC {
        return Err(GridError::Dataset("missing VADT header".into()));
    }
    cur = &cur[4..];
    let version = read_u32(&mut cur)?;
    if version != DATASET_VERSION {
        return Err(GridError::Dataset(format!(
            "unsupported version {version} (this build reads version {DATASET_VERSION})"
        )));
    }
    let task_count = read_u32(&mut cur)?;
    let mut records = Vec::new();
    while !cur.is_empty() {
        let task = read_u32(&mut cur)? as usize;
        let seed = read_u32(&mut cur)? as u64;
        let h = read_u32(&mut cur)? as usize;
        let mut frames = Vec::with_capacity(h);
        for _ in 0..h {
            let mut px = vec![0u8; crate::video::FRAME_PIXELS];
            cur.read_exact(&mut px)
                .map_err(|_| GridError::Dataset("truncated frame data".into()))?;
            frames.push(Frame::from_u8(&px));
        }
        let n = read_u32(&mut cur)? as usize;
        let mut codes = vec![0u8; n];
        cur.read_exact(&mut codes)
            .map_err(|_| GridError::Dataset("truncated action codes".into()))?;
        let actions = codes
            .iter()
            .map(|c| Action::from_code(*c).ok_or_else(|| GridError::Dataset(format!("bad action code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(DemoRecord {
            task,
            seed,
            frames,
            actions,
        });
    }
    Ok((task_count, records))
}

/// `per_task` expert demos for every task, seeds `seed_offset..`.
pub fn generate_demos(per_task: usize, seed_offset: u64, h: usize) -> Result<Vec<DemoRecord>, GridError> {
    let mut out = Vec::with_capacity(per_task * TASKS.len());
    for task in TASKS {
        for s in 0..per_task as u64 {
            let seed = seed_offset + s;
            let traj = expert_demo(task, seed)?;
            out.push(DemoRecord::from_trajectory(task.id, seed, &traj, h));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(agent: Pos, block: Pos) -> GridState {
        GridState {
            task: 0,
            agent,
            block,
            goal: (2, 2),
            step_count: 0,
            max_steps: MAX_STEPS,
        }
    }

    #[test]
    fn push_moves_agent_and_block() {
        let (next, r) = step(&state((4, 3), (4, 4)), Action::Right).unwrap();
        assert_eq!((next.agent, next.block), ((4, 4), (4, 5)));
        assert_eq!(r, 0);
    }

    #[test]
    fn wall_blocks_movement() {
        let s = state((3, 7), (0, 0));
        let (next, _) = step(&s, Action::Right).unwrap();
        assert_eq!(next.layout(), s.layout());
        assert_eq!(next.step_count, 1);

        let s = state((3, 6), (3, 7));
        let (next, _) = step(&s, Action::Right).unwrap();
        assert_eq!(next.layout(), s.layout());
    }

    #[test]
    fn terminal_states_reject_steps() {
        let s = state((2, 1), (2, 2));
        assert!(matches!(step(&s, Action::Up), Err(GridError::Terminal { solved: true, .. })));
        let mut s = state((5, 5), (4, 4));
        s.step_count = MAX_STEPS;
        assert!(step(&s, Action::Up).is_err());
    }

    #[test]
    fn single_push_demo() {
        let s = state((2, 0), (2, 1));
        assert_eq!(solve(&s).unwrap(), vec![Action::Right]);
    }

    #[test]
    fn palette_levels() {
        let f = render(&state((0, 0), (7, 7)));
        assert_eq!(f.get(0, 0), AGENT_LEVEL);
        assert_eq!(f.get(15, 15), BLOCK_LEVEL);
        assert_eq!(f.get(5, 4), GOAL_LEVEL);
        assert_eq!(f.get(10, 0), EMPTY_LEVEL);
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_indices(15, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(subsample_indices(8, 8), (0..8).collect::<Vec<_>>());
        assert_eq!(subsample_indices(2, 8), vec![0, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn task_text_round_trips() {
        for t in TASKS {
            assert_eq!(Task::from_text(&t.text()), Some(t));
        }
        assert_eq!(TASKS[0].text(), "push the red block to the blue goal");
    }

    #[test]
    fn dataset_rejects_unknown_version() {
        let mut buf = b"VADT".to_vec();
        buf.extend_from_slice(&9u32.to_le_bytes());
        buf.extend_from_slice(&4u32.to_le_bytes());
        let err = read_dataset(buf.as_slice()).unwrap_err().to_string();
        assert!(err.contains("unsupported version 9"), "{err}");
    }
}
