//! Frame and video containers shared by the environment, the diffusion model
//! and the critics.
//!
//! A [`Frame`] holds display intensities in `[0, 1]`. A [`VideoPlan`] holds a
//! stack of frames in model space, `x = 2·v − 1`, so values lie in `[−1, 1]`.

use std::fmt;

pub const FRAME_SIDE: usize = 16;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;

#[derive(Clone, PartialEq)]
pub struct Frame {
    data: Vec<f32>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Frame[")?;
        for row in self.data.chunks_exact(FRAME_SIDE) {
            let line: String = row
                .iter()
                .map(|v| match (v * 3.0).round() as i32 {
                    i32::MIN..=0 => '.',
                    1 => 'g',
                    2 => 'b',
                    _ => 'A',
                })
                .collect();
            writeln!(f, "  {line}")?;
        }
        write!(f, "]")
    }
}

impl Frame {
    pub fn blank() -> Self {
        Self {
            data: vec![0.0; FRAME_PIXELS],
        }
    }

    /// Panics unless `data` has exactly [`FRAME_PIXELS`] entries.
    pub fn from_intensities(data: Vec<f32>) -> Self {
        assert_eq!(data.len(), FRAME_PIXELS, "frame must be 16x16");
        Self { data }
    }

    pub fn from_model(values: &[f32]) -> Self {
        assert_eq!(values.len(), FRAME_PIXELS, "frame must be 16x16");
        Self {
            data: values.iter().map(|x| (x + 1.0) * 0.5).collect(),
        }
    }

    pub fn from_u8(bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), FRAME_PIXELS, "frame must be 16x16");
        Self {
            data: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * FRAME_SIDE + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * FRAME_SIDE + col] = value;
    }

    pub fn to_model(&self) -> Vec<f32> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// `round(255 · clamp(v, 0, 1))` per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Number of pixels whose values differ.
    pub fn pixel_diff(&self, other: &Frame) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Mean absolute per-pixel difference.
    pub fn mean_abs_diff(&self, other: &Frame) -> f32 {
        let s: f32 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        s / FRAME_PIXELS as f32
    }
}

/// A fixed-length stack of frames in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPlan {
    frames: usize,
    data: Vec<f32>,
}

impl VideoPlan {
    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            data: vec![0.0; frames * FRAME_PIXELS],
        }
    }

    pub fn from_model(frames: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), frames * FRAME_PIXELS, "plan data length");
        Self { frames, data }
    }

    pub fn from_frames(frames: &[Frame]) -> Self {
        let mut data = Vec::with_capacity(frames.len() * FRAME_PIXELS);
        for f in frames {
            data.extend(f.data.iter().map(|v| 2.0 * v - 1.0));
        }
        Self {
            frames: frames.len(),
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        &self.data[k * FRAME_PIXELS..(k + 1) * FRAME_PIXELS]
    }

    pub fn frame_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.data[k * FRAME_PIXELS..(k + 1) * FRAME_PIXELS]
    }

    /// Frame `k` converted to display intensities.
    pub fn frame_image(&self, k: usize) -> Frame {
        Frame::from_model(self.frame(k))
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        (0..self.frames).map(|k| self.frame_image(k)).collect()
    }

    /// Overwrites frame 0 with the given model-space frame.
    pub fn pin_first_frame(&mut self, first: &[f32]) {
        self.frame_mut(0).copy_from_slice(first);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &VideoPlan) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        (s / self.data.len() as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_space_round_trip() {
        let mut f = Frame::blank();
        f.set(3, 4, 1.0);
        f.set(0, 0, 0.5);
        let plan = VideoPlan::from_frames(&[f.clone(), Frame::blank()]);
        assert_eq!(plan.frame(0)[3 * 16 + 4], 1.0);
        assert_eq!(plan.frame(1)[0], -1.0);
        assert_eq!(plan.frame_image(0), f);
    }

    #[test]
    fn u8_quantization_rounds() {
        let f = Frame::from_intensities(vec![0.33; FRAME_PIXELS]);
        assert!(f.to_u8().iter().all(|&b| b == 84));
        let back = Frame::from_u8(&f.to_u8());
        assert!((back.get(0, 0) - 0.33).abs() < 0.5 / 255.0 + 1e-6);
    }
}
