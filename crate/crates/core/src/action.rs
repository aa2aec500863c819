//! Action extraction from video plans with exhaustive block-matching flow.

use std::io::{self, Write};

use crate::gridworld::{Action, GridState, Trajectory, AGENT_LEVEL, BLOCK_LEVEL, CELL_PX};
use crate::video::{Frame, VideoPlan, FRAME_SIDE};

pub const FLOW_BLOCK: usize = 4;
pub const SEARCH_RADIUS: i32 = 4;
const BLOCKS: usize = FRAME_SIDE / FLOW_BLOCK;

/// Per-block displacement between two frames; every pixel of a block shares
/// its block's vector. `du` is horizontal (columns), `dv` vertical (rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowField {
    du: [i8; BLOCKS * BLOCKS],
    dv: [i8; BLOCKS * BLOCKS],
}

impl FlowField {
    pub fn blocks_per_side(&self) -> usize {
        BLOCKS
    }

    /// `(du, dv)` of block `(block_row, block_col)`.
    pub fn block(&self, block_row: usize, block_col: usize) -> (i32, i32) {
        let i = block_row * BLOCKS + block_col;
        (self.du[i] as i32, self.dv[i] as i32)
    }

    /// `(du, dv)` at pixel `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> (i32, i32) {
        self.block(row / FLOW_BLOCK, col / FLOW_BLOCK)
    }

    pub fn is_zero(&self) -> bool {
        self.du.iter().chain(&self.dv).all(|v| *v == 0)
    }
}

fn pixel_or_zero(frame: &Frame, row: i32, col: i32) -> f32 {
    let n = FRAME_SIDE as i32;
    if row < 0 || col < 0 || row >= n || col >= n {
        0.0
    } else {
        frame.get(row as usize, col as usize)
    }
}

fn sad(a: &Frame, b: &Frame, br: usize, bc: usize, du: i32, dv: i32) -> f32 {
    let mut s = 0.0;
    for r in br * FLOW_BLOCK..(br + 1) * FLOW_BLOCK {
        for c in bc * FLOW_BLOCK..(bc + 1) * FLOW_BLOCK {
            s += (a.get(r, c) - pixel_or_zero(b, r as i32 + dv, c as i32 + du)).abs();
        }
    }
    s
}

fn textureless(frame: &Frame, br: usize, bc: usize) -> bool {
    let v = frame.get(br * FLOW_BLOCK, bc * FLOW_BLOCK);
    (br * FLOW_BLOCK..(br + 1) * FLOW_BLOCK)
        .all(|r| (bc * FLOW_BLOCK..(bc + 1) * FLOW_BLOCK).all(|c| frame.get(r, c) == v))
}

/// Exhaustive search over displacements within [`SEARCH_RADIUS`] minimizing
/// the sum of absolute differences, with pixels outside `b` read as zero.
/// Ties go to the smallest displacement, then to the lexicographically
/// smallest `(du, dv)`. Blocks of constant intensity in `a` get zero flow.
pub fn optical_flow(a: &Frame, b: &Frame) -> FlowField {
    let mut du = [0i8; BLOCKS * BLOCKS];
    let mut dv = [0i8; BLOCKS * BLOCKS];
    for br in 0..BLOCKS {
        for bc in 0..BLOCKS {
            if textureless(a, br, bc) {
                continue;
            }
            let mut best = (f32::INFINITY, 0, 0, 0);
            for u in -SEARCH_RADIUS..=SEARCH_RADIUS {
                for v in -SEARCH_RADIUS..=SEARCH_RADIUS {
                    let cand = (sad(a, b, br, bc, u, v), u * u + v * v, u, v);
                    if (cand.0, cand.1, cand.2, cand.3) < (best.0, best.1, best.2, best.3) {
                        best = cand;
                    }
                }
            }
            du[br * BLOCKS + bc] = best.2 as i8;
            dv[br * BLOCKS + bc] = best.3 as i8;
        }
    }
    FlowField { du, dv }
}

/// Keeps only pixels whose nearest palette level is the agent's, as a 0/1
/// mask, so static scenery does not pull on the match.
pub fn agent_mask(frame: &Frame) -> Frame {
    let cut = (BLOCK_LEVEL + AGENT_LEVEL) / 2.0;
    Frame::from_intensities(
        frame
            .data()
            .iter()
            .map(|v| if *v > cut { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Mean `(du, dv)` over the agent's pixels in `a`, or `None` when either
/// frame shows no agent.
pub fn agent_displacement(a: &Frame, b: &Frame) -> Option<(f64, f64)> {
    let (ma, mb) = (agent_mask(a), agent_mask(b));
    let pixels: Vec<(usize, usize)> = (0..FRAME_SIDE)
        .flat_map(|r| (0..FRAME_SIDE).map(move |c| (r, c)))
        .filter(|&(r, c)| ma.get(r, c) > 0.0)
        .collect();
    if pixels.is_empty() || mb.data().iter().all(|v| *v == 0.0) {
        return None;
    }
    let flow = optical_flow(&ma, &mb);
    let (mut su, mut sv) = (0.0, 0.0);
    for &(r, c) in &pixels {
        let (u, v) = flow.at(r, c);
        su += u as f64;
        sv += v as f64;
    }
    let n = pixels.len() as f64;
    Some((su / n, sv / n))
}

/// Actions for one transition: `round(|d| / 2)` moves along the dominant
/// axis, horizontal on ties.
pub fn displacement_to_actions(du: f64, dv: f64) -> Vec<Action> {
    let (mag, action) = if du.abs() >= dv.abs() {
        (du.abs(), if du > 0.0 { Action::Right } else { Action::Left })
    } else {
        (dv.abs(), if dv > 0.0 { Action::Down } else { Action::Up })
    };
    let n = (mag / CELL_PX as f64).round() as usize;
    vec![action; n]
}

/// Agent motion between consecutive frames, converted to grid actions.
/// Transitions where the agent cannot be found are skipped.
pub fn flow_to_actions(plan: &VideoPlan) -> Vec<Action> {
    let frames = plan.to_frames();
    let mut actions = Vec::new();
    for (k, w) in frames.windows(2).enumerate() {
        match agent_displacement(&w[0], &w[1]) {
            Some((du, dv)) => actions.extend(displacement_to_actions(du, dv)),
            None => log::debug!("no agent visible around transition {k}, skipping it"),
        }
    }
    actions
}

/// Extracts actions from `plan` and runs them from `start`, stopping at a
/// terminal state.
pub fn execute_plan(start: &GridState, plan: &VideoPlan) -> Trajectory {
    let first = plan.frame_image(0);
    let rendered = crate::gridworld::render(start);
    let gap = first.mean_abs_diff(&rendered);
    if gap > 0.05 {
        log::debug!("plan's first frame differs from the current state (mean gap {gap:.3})");
    }
    Trajectory::rollout(*start, &flow_to_actions(plan))
}

/// Writes `frame_idx,block_row,block_col,du,dv` rows for every transition.
pub fn write_flow_csv<W: Write>(mut w: W, plan: &VideoPlan) -> io::Result<()> {
    writeln!(w, "frame_idx,block_row,block_col,du,dv")?;
    let frames = plan.to_frames();
    for (k, pair) in frames.windows(2).enumerate() {
        let flow = optical_flow(&agent_mask(&pair[0]), &agent_mask(&pair[1]));
        for br in 0..BLOCKS {
            for bc in 0..BLOCKS {
                let (u, v) = flow.block(br, bc);
                writeln!(w, "{k},{br},{bc},{u},{v}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_have_zero_flow() {
        let mut f = Frame::blank();
        f.set(5, 6, 1.0);
        f.set(9, 2, 0.5);
        assert!(optical_flow(&f, &f).is_zero());
    }

    #[test]
    fn diagonal_tie_goes_horizontal() {
        assert_eq!(displacement_to_actions(2.0, 2.0), vec![Action::Right]);
        assert_eq!(displacement_to_actions(-2.0, 4.0), vec![Action::Down, Action::Down]);
        assert!(displacement_to_actions(0.4, -0.2).is_empty());
    }

    #[test]
    fn static_plan_yields_no_actions() {
        let mut f = Frame::blank();
        f.set(4, 4, 1.0);
        let plan = VideoPlan::from_frames(&vec![f; 8]);
        assert!(flow_to_actions(&plan).is_empty());
    }
}
