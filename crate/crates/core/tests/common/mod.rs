//! Oracles shared by the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videoagent_core::action::{FLOW_BLOCK, SEARCH_RADIUS};
use videoagent_core::video::FRAME_SIDE;
use videoagent_core::Frame;

/// Brute-force block matching in f64, scanning candidates in a different
/// order and keeping the best by (SAD, |d|², du, dv).
pub fn oracle_flow(a: &Frame, b: &Frame) -> Vec<(i32, i32)> {
    let n = FRAME_SIDE as i32;
    let blocks = FRAME_SIDE / FLOW_BLOCK;
    let px = |f: &Frame, r: i32, c: i32| {
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            f.get(r as usize, c as usize) as f64
        }
    };
    let mut out = Vec::new();
    for br in 0..blocks {
        for bc in 0..blocks {
            let (r0, c0) = ((br * FLOW_BLOCK) as i32, (bc * FLOW_BLOCK) as i32);
            let first = px(a, r0, c0);
            let flat = (0..FLOW_BLOCK as i32)
                .all(|r| (0..FLOW_BLOCK as i32).all(|c| px(a, r0 + r, c0 + c) == first));
            if flat {
                out.push((0, 0));
                continue;
            }
            let mut cands = Vec::new();
            for dv in (-SEARCH_RADIUS..=SEARCH_RADIUS).rev() {
                for du in (-SEARCH_RADIUS..=SEARCH_RADIUS).rev() {
                    let mut s = 0.0;
                    for r in 0..FLOW_BLOCK as i32 {
                        for c in 0..FLOW_BLOCK as i32 {
                            s += (px(a, r0 + r, c0 + c) - px(b, r0 + r + dv, c0 + c + du)).abs();
                        }
                    }
                    cands.push((s, du * du + dv * dv, du, dv));
                }
            }
            cands.sort_by(|x, y| x.partial_cmp(y).unwrap());
            out.push((cands[0].2, cands[0].3));
        }
    }
    out
}

/// Quantized random texture so SAD sums are exact in f32 and f64 alike.
pub fn texture(seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::from_intensities((0..FRAME_SIDE * FRAME_SIDE).map(|_| rng.random_range(0..16) as f32 / 16.0).collect())
}

pub fn shifted(f: &Frame, du: i32, dv: i32) -> Frame {
    let mut out = Frame::blank();
    for r in 0..FRAME_SIDE as i32 {
        for c in 0..FRAME_SIDE as i32 {
            let (sr, sc) = (r - dv, c - du);
            if sr >= 0 && sc >= 0 && sr < FRAME_SIDE as i32 && sc < FRAME_SIDE as i32 {
                out.set(r as usize, c as usize, f.get(sr as usize, sc as usize));
            }
        }
    }
    out
}
