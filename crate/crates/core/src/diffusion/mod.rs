//! Noise schedule, forward noising, the conditional denoiser and its training
//! losses.

mod denoiser;
mod loss;
mod train;

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::video::VideoPlan;

pub use denoiser::{time_embedding, Conditioning, DenoiseInput, DenoiseNet, Denoiser, DenoiserConfig, ToyNet};
pub use loss::{
    loss_sc_consistency, loss_video_diffusion, sc_pair_target, total_loss, NoiseDraw, ScAnchor, ScBatch, ScLoss, TotalLoss,
    TrainBatch,
};
pub use train::{load_checkpoint, save_checkpoint, Checkpoint, LossRecord, ReplayBuffer, ReplayEntry, TrainConfig, TrainError, TrainExample, Trainer};

/// Maximum words kept from a suggestion.
pub const MAX_SUGGESTION_WORDS: usize = 20;
/// Width of the feedback conditioning vector.
pub const FEEDBACK_DIM: usize = 16;

const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal levels `alpha_bar[0..=T]` of a cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Panics if `t < 2`.
    pub fn cosine(timesteps: usize) -> Self {
        assert!(timesteps >= 2, "schedule needs at least 2 timesteps");
        let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut alpha_bar: Vec<f64> = (0..=timesteps)
            .map(|t| f(t as f64 / timesteps as f64) / f0)
            .collect();
        alpha_bar[0] = 1.0;
        Self { alpha_bar }
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (a.sqrt(), (1.0 - a).max(0.0).sqrt())
    }
}

/// `sqrt(ab)·x0 + sqrt(1-ab)·eps`. At `t = 0` the result is `x0` bit for bit.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &VideoPlan, t: usize, eps: &[f32]) -> VideoPlan {
    assert_eq!(x0.len(), eps.len(), "noise must match the plan shape");
    if schedule.alpha_bar(t) == 1.0 {
        return x0.clone();
    }
    VideoPlan::from_model(x0.frames(), noise_slice(schedule, x0.data(), t, eps))
}

pub(crate) fn noise_slice(schedule: &NoiseSchedule, x0: &[f32], t: usize, eps: &[f32]) -> Vec<f32> {
    if schedule.alpha_bar(t) == 1.0 {
        return x0.to_vec();
    }
    let (a, b) = schedule.coefficients(t);
    let (a, b) = (a as f32, b as f32);
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Noise implied by a clean-sample prediction: `(x_t − sqrt(ab)·x0) / sqrt(1−ab)`.
/// Panics at `t = 0`, where it is undefined.
pub fn eps_from_x0(schedule: &NoiseSchedule, x_t: &[f32], x0: &[f32], t: usize) -> Vec<f32> {
    let (a, b) = schedule.coefficients(t);
    assert!(b > 0.0, "noise is undefined at alpha_bar = 1");
    x_t.iter()
        .zip(x0)
        .map(|(xt, x)| ((*xt as f64 - a * *x as f64) / b) as f32)
        .collect()
}

/// Clean sample implied by a noise prediction.
pub fn x0_from_eps(schedule: &NoiseSchedule, x_t: &[f32], eps: &[f32], t: usize) -> Vec<f32> {
    let (a, b) = schedule.coefficients(t);
    x_t.iter()
        .zip(eps)
        .map(|(xt, e)| ((*xt as f64 - b * *e as f64) / a) as f32)
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

/// Conditioning signal derived from a critic verdict.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Feedback {
    None,
    Binary(bool),
    Suggestive(String),
}

impl Feedback {
    /// Builds a suggestion, keeping at most [`MAX_SUGGESTION_WORDS`] words.
    pub fn suggestive(text: &str) -> Self {
        Feedback::Suggestive(truncate_words(text, MAX_SUGGESTION_WORDS))
    }

    /// Fixed part of the conditioning vector: zeros except for suggestions,
    /// which hash to a unit-norm bag of words. Binary verdicts are looked up
    /// in a learned table by the network instead.
    pub fn hashed_features(&self) -> [f32; FEEDBACK_DIM] {
        let mut v = [0.0f32; FEEDBACK_DIM];
        if let Feedback::Suggestive(text) = self {
            for w in words(text) {
                v[(fnv1a(w.to_lowercase().as_bytes()) % FEEDBACK_DIM as u64) as usize] += 1.0;
            }
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        v
    }
}

impl fmt::Display for Feedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feedback::None => f.write_str("none"),
            Feedback::Binary(true) => f.write_str("accept"),
            Feedback::Binary(false) => f.write_str("reject"),
            Feedback::Suggestive(s) => write!(f, "suggest: {s}"),
        }
    }
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

pub fn truncate_words(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Which kind of feedback the critic feeds back into the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FeedbackMode {
    #[default]
    None,
    Binary,
    Suggestive,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::None => "none",
            FeedbackMode::Binary => "binary",
            FeedbackMode::Suggestive => "suggestive",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FeedbackMode::None),
            "binary" => Ok(FeedbackMode::Binary),
            "suggestive" => Ok(FeedbackMode::Suggestive),
            other => Err(format!("unknown feedback mode {other:?} (expected none, binary or suggestive)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_shape() {
        let s = NoiseSchedule::cosine(100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(100) < 1e-3);
        assert!(s.values().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn eps_and_x0_conversions_invert() {
        let s = NoiseSchedule::cosine(100);
        let x0 = [0.5f32, -0.25, 1.0];
        let eps = [0.1f32, -1.3, 0.7];
        let xt = noise_slice(&s, &x0, 40, &eps);
        let e = eps_from_x0(&s, &xt, &x0, 40);
        let back = x0_from_eps(&s, &xt, &e, 40);
        for i in 0..3 {
            assert!((e[i] - eps[i]).abs() < 1e-5);
            assert!((back[i] - x0[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn suggestion_truncates_to_twenty_words() {
        let text = (0..25).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let Feedback::Suggestive(s) = Feedback::suggestive(&text) else {
            unreachable!()
        };
        assert_eq!(s.split_whitespace().count(), 20);
    }

    #[test]
    fn hashed_features() {
        assert_eq!(Feedback::None.hashed_features(), [0.0; FEEDBACK_DIM]);
        assert_eq!(Feedback::Binary(true).hashed_features(), [0.0; FEEDBACK_DIM]);
        let v = Feedback::suggestive("Move the agent LEFT").hashed_features();
        let norm: f32 = v.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(v, Feedback::suggestive("move the agent left").hashed_features());
    }
}
