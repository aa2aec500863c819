//! Animated GIF export of videos.

use std::borrow::Cow;
use std::io::Write;

use thiserror::Error;

use crate::video::{Frame, VideoPlan, FRAME_SIDE};

pub const GIF_LEVELS: usize = 16;
pub const GIF_SCALE: usize = 8;
/// Frame delay in hundredths of a second.
pub const GIF_DELAY: u16 = 40;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("gif encoding failed: {0}")]
    Gif(#[from] gif::EncodingError),
    #[error("nothing to export")]
    Empty,
}

fn palette() -> Vec<u8> {
    (0..GIF_LEVELS)
        .flat_map(|k| {
            let v = (k * 255 / (GIF_LEVELS - 1)) as u8;
            [v, v, v]
        })
        .collect()
}

/// Palette index of an intensity in `[0, 1]`.
pub fn gray_level(intensity: f32) -> u8 {
    (intensity.clamp(0.0, 1.0) * (GIF_LEVELS - 1) as f32).round() as u8
}

/// Nearest-neighbour upscaled palette indices of one frame.
fn indices(frame: &Frame, scale: usize) -> Vec<u8> {
    let side = FRAME_SIDE * scale;
    let mut out = vec![0u8; side * side];
    for (i, px) in out.iter_mut().enumerate() {
        let (r, c) = (i / side / scale, i % side / scale);
        *px = gray_level(frame.get(r, c));
    }
    out
}

/// Writes `frames` as a looping animation, each upscaled `scale` times.
pub fn write_gif<W: Write>(w: W, frames: &[Frame], scale: usize) -> Result<(), ExportError> {
    if frames.is_empty() {
        return Err(ExportError::Empty);
    }
    let side = (FRAME_SIDE * scale) as u16;
    let mut enc = gif::Encoder::new(w, side, side, &palette())?;
    enc.set_repeat(gif::Repeat::Infinite)?;
    for f in frames {
        let frame = gif::Frame {
            width: side,
            height: side,
            delay: GIF_DELAY,
            buffer: Cow::Owned(indices(f, scale)),
            ..gif::Frame::default()
        };
        enc.write_frame(&frame)?;
    }
    Ok(())
}

pub fn write_plan_gif<W: Write>(w: W, plan: &VideoPlan) -> Result<(), ExportError> {
    write_gif(w, &plan.to_frames(), GIF_SCALE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gif_decodes_with_expected_size_and_frames() {
        let mut f = Frame::blank();
        f.set(3, 4, 1.0);
        let mut buf = Vec::new();
        write_gif(&mut buf, &[f.clone(), Frame::blank()], GIF_SCALE).unwrap();
        let mut opts = gif::DecodeOptions::new();
        opts.set_color_output(gif::ColorOutput::Indexed);
        let mut dec = opts.read_info(buf.as_slice()).unwrap();
        assert_eq!(dec.width() as usize, FRAME_SIDE * GIF_SCALE);
        let first = dec.read_next_frame().unwrap().unwrap().buffer.to_vec();
        let side = FRAME_SIDE * GIF_SCALE;
        assert_eq!(first[(3 * GIF_SCALE) * side + 4 * GIF_SCALE + 7], 15);
        assert_eq!(first[0], 0);
        assert!(dec.read_next_frame().unwrap().is_some());
        assert!(dec.read_next_frame().unwrap().is_none());
    }

    #[test]
    fn palette_levels_are_evenly_spaced() {
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(1.0), 15);
        assert_eq!(gray_level(0.66), 10);
    }
}
