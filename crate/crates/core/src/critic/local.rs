use thiserror::Error;

use super::{Critic, CriticSource, Verdict};
use crate::gridworld::{Pos, Task, AGENT_LEVEL, BLOCK_LEVEL, CELL_PX, EMPTY_LEVEL, GOAL_LEVEL, GRID_SIZE};
use crate::video::{Frame, VideoPlan};

/// Largest distance between a cell's mean intensity and its palette level.
pub const DECODE_TOLERANCE: f32 = 0.15;

const PALETTE: [(Cell, f32); 4] = [
    (Cell::Empty, EMPTY_LEVEL),
    (Cell::Goal, GOAL_LEVEL),
    (Cell::Block, BLOCK_LEVEL),
    (Cell::Agent, AGENT_LEVEL),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Goal,
    Block,
    Agent,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cell ({row}, {col}) mean {mean:.3} matches no palette level")]
pub struct DecodeError {
    pub row: usize,
    pub col: usize,
    pub mean: f32,
}

/// Cell-level reading of a frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedFrame {
    pub cells: [[Cell; GRID_SIZE]; GRID_SIZE],
}

impl DecodedFrame {
    pub fn positions(&self, kind: Cell) -> Vec<Pos> {
        let mut out = Vec::new();
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if *cell == kind {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// The single cell of `kind`, if there is exactly one.
    pub fn unique(&self, kind: Cell) -> Option<Pos> {
        match self.positions(kind).as_slice() {
            [p] => Some(*p),
            _ => None,
        }
    }
}

/// Nearest palette level of every cell's mean intensity. A cell farther than
/// [`DECODE_TOLERANCE`] from every level, or equally close to two, fails.
pub fn decode_frame(frame: &Frame) -> Result<DecodedFrame, DecodeError> {
    let mut cells = [[Cell::Empty; GRID_SIZE]; GRID_SIZE];
    for (r, row) in cells.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let mut sum = 0.0;
            for dr in 0..CELL_PX {
                for dc in 0..CELL_PX {
                    sum += frame.get(r * CELL_PX + dr, c * CELL_PX + dc);
                }
            }
            let mean = sum / (CELL_PX * CELL_PX) as f32;
            let mut dists: Vec<(f32, Cell)> = PALETTE.iter().map(|(k, v)| ((mean - v).abs(), *k)).collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (best, kind) = dists[0];
            if !(best <= DECODE_TOLERANCE) || dists[1].0 == best {
                return Err(DecodeError { row: r, col: c, mean });
            }
            *cell = kind;
        }
    }
    Ok(DecodedFrame { cells })
}

fn manhattan(a: Pos, b: Pos) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// Exact checker over decoded frames. Accepts a plan iff every frame decodes
/// with exactly one agent and one block, the agent moves at most one cell per
/// frame, the block moves only when pushed by the agent, and the final frame
/// has the block on the task's goal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OracleCritic;

impl OracleCritic {
    /// `Ok(())` on acceptance, otherwise a short reason.
    pub fn check(&self, plan: &VideoPlan, task: Task) -> Result<(), String> {
        let mut prev: Option<(Pos, Pos)> = None;
        for k in 0..plan.frames() {
            let decoded =
                decode_frame(&plan.frame_image(k)).map_err(|_| format!("undecodable frame {k}"))?;
            let blocks = decoded.positions(Cell::Block).len();
            if blocks != 1 {
                return Err(format!("frame {k} shows {blocks} blocks instead of one"));
            }
            let agents = decoded.positions(Cell::Agent).len();
            if agents != 1 {
                return Err(format!("frame {k} shows {agents} agents instead of one"));
            }
            let agent = decoded.unique(Cell::Agent).expect("counted");
            let block = decoded.unique(Cell::Block).expect("counted");
            if let Some((pa, pb)) = prev {
                if manhattan(pa, agent) > 1 {
                    return Err(format!("agent jumps between frames {} and {k}", k - 1));
                }
                if pb != block {
                    let pushed = agent == pb
                        && manhattan(pa, agent) == 1
                        && block.0 as isize - pb.0 as isize == agent.0 as isize - pa.0 as isize
                        && block.1 as isize - pb.1 as isize == agent.1 as isize - pa.1 as isize;
                    if !pushed {
                        return Err(format!("block moves without a push at frame {k}"));
                    }
                }
            }
            prev = Some((agent, block));
        }
        match prev {
            Some((_, block)) if block == task.goal => Ok(()),
            Some(_) => Err(format!("block does not reach the {} goal", task.goal_color.name())),
            None => Err("empty plan".into()),
        }
    }
}

impl Critic for OracleCritic {
    fn evaluate(&self, plan: &VideoPlan, task: Task) -> Verdict {
        match self.check(plan, task) {
            Ok(()) => Verdict::new(true, CriticSource::Oracle),
            Err(reason) => Verdict::new(false, CriticSource::Oracle).with_suggestion(&reason),
        }
    }
}

/// Pixels per palette level `[empty, goal, block, agent]`, assigning each
/// pixel to its nearest level.
pub fn palette_counts(frame: &Frame) -> [usize; 4] {
    let mut counts = [0; 4];
    for v in frame.data() {
        let (idx, _) = PALETTE
            .iter()
            .enumerate()
            .min_by(|a, b| (v - a.1 .1).abs().total_cmp(&(v - b.1 .1).abs()))
            .expect("palette is nonempty");
        counts[idx] += 1;
    }
    counts
}

/// Task-agnostic plausibility check on raw pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicCritic {
    /// Accept only if the mean absolute change between consecutive frames is
    /// below this.
    pub tau_smooth: f32,
    /// Accept only if no palette level's pixel count varies across frames by
    /// more than this.
    pub tau_mass: usize,
}

impl Default for HeuristicCritic {
    /// Thresholds calibrated as the 95th percentile over expert demos,
    /// seeds 0..128 of every task (see [`HeuristicCritic::calibrate`]).
    fn default() -> Self {
        Self {
            tau_smooth: Self::CALIBRATED_SMOOTH,
            tau_mass: Self::CALIBRATED_MASS,
        }
    }
}

impl HeuristicCritic {
    pub const CALIBRATED_SMOOTH: f32 = 0.026_049_11;
    pub const CALIBRATED_MASS: usize = 4;

    /// `(mean inter-frame L1, largest palette-count range)`.
    pub fn statistics(plan: &VideoPlan) -> (f32, usize) {
        let frames = plan.to_frames();
        let smooth = if frames.len() < 2 {
            0.0
        } else {
            frames.windows(2).map(|w| w[0].mean_abs_diff(&w[1])).sum::<f32>() / (frames.len() - 1) as f32
        };
        let counts: Vec<[usize; 4]> = frames.iter().map(palette_counts).collect();
        let mass = (0..4)
            .map(|i| {
                let lo = counts.iter().map(|c| c[i]).min().unwrap_or(0);
                let hi = counts.iter().map(|c| c[i]).max().unwrap_or(0);
                hi - lo
            })
            .max()
            .unwrap_or(0);
        (smooth, mass)
    }

    /// Sets each threshold to the `quantile` of its statistic over `plans`
    /// (nearest-rank), nudging the smoothness bound up so the calibration
    /// plans at the quantile itself still pass the strict comparison.
    pub fn calibrate(plans: &[VideoPlan], quantile: f64) -> Self {
        assert!(!plans.is_empty(), "calibration needs plans");
        let stats: Vec<(f32, usize)> = plans.iter().map(Self::statistics).collect();
        let rank = ((quantile * stats.len() as f64).ceil() as usize).clamp(1, stats.len()) - 1;
        let mut smooth: Vec<f32> = stats.iter().map(|s| s.0).collect();
        smooth.sort_by(f32::total_cmp);
        let mut mass: Vec<usize> = stats.iter().map(|s| s.1).collect();
        mass.sort_unstable();
        Self {
            tau_smooth: f32::from_bits(smooth[rank].to_bits() + 1),
            tau_mass: mass[rank],
        }
    }
}

impl Critic for HeuristicCritic {
    fn evaluate(&self, plan: &VideoPlan, _task: Task) -> Verdict {
        let (smooth, mass) = Self::statistics(plan);
        if smooth >= self.tau_smooth {
            return Verdict::new(false, CriticSource::Heuristic)
                .with_suggestion("frames change too much between steps, move one object at a time");
        }
        if mass > self.tau_mass {
            return Verdict::new(false, CriticSource::Heuristic)
                .with_suggestion("objects appear or vanish between frames, keep every object visible");
        }
        Verdict::new(true, CriticSource::Heuristic)
    }
}
