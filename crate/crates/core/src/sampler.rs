//! Deterministic DDIM plan generation, self-conditioned refinement and
//! critic-gated refinement loops.
//!
//! Every function works on batches so one network call serves many plans.
//! Each plan owns its random stream, so results do not depend on how plans
//! are grouped into batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::critic::{make_feedback, Critic, Verdict};
use crate::diffusion::{
    noise_slice, standard_normal, Conditioning, DenoiseInput, Denoiser, Feedback, FeedbackMode, NoiseSchedule,
};
use crate::gridworld::Task;
use crate::tensor::Tensor;
use crate::video::{VideoPlan, FRAME_PIXELS};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar = {budget} at t = {t_to}")]
    SigmaTooLarge { sigma_sq: f64, budget: f64, t_to: usize },
    #[error("ddim step needs t_from > t_to, got {t_from} -> {t_to}")]
    BadTimesteps { t_from: usize, t_to: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// DDIM steps for a full generation from `T`.
    pub steps: usize,
    /// `eta`: 0 is deterministic DDIM, 1 matches ancestral sampling.
    pub sigma_scale: f64,
    /// Re-noising depth of a refinement, as a fraction of `T`.
    pub refine_noise_level: f64,
    pub max_refine_iterations: usize,
    /// Clamp each clean-sample prediction to `[-1, 1]` before the update.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            sigma_scale: 0.0,
            refine_noise_level: 0.5,
            max_refine_iterations: 5,
            clip_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<(), String> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(format!("steps must lie in 1..={timesteps}, got {}", self.steps));
        }
        if !(0.0..=1.0).contains(&self.sigma_scale) {
            return Err(format!("sigma_scale must lie in [0, 1], got {}", self.sigma_scale));
        }
        if !(self.refine_noise_level > 0.0 && self.refine_noise_level <= 1.0) {
            return Err(format!(
                "refine_noise_level must lie in (0, 1], got {}",
                self.refine_noise_level
            ));
        }
        Ok(())
    }
}

/// Batched clean-sample predictor used by the sampler.
pub trait PlanDenoiser {
    fn video_dim(&self) -> usize;

    /// `x_t` and `self_cond` are row-major `[batch, video_dim]`.
    fn predict_x0(&self, x_t: &[f32], t: &[usize], self_cond: &[f32], cond: &Conditioning) -> Vec<f32>;
}

impl PlanDenoiser for Denoiser<f32> {
    fn video_dim(&self) -> usize {
        self.config.video_dim()
    }

    fn predict_x0(&self, x_t: &[f32], t: &[usize], self_cond: &[f32], cond: &Conditioning) -> Vec<f32> {
        let b = t.len();
        let d = self.video_dim();
        let input = DenoiseInput {
            x_t: Tensor::new(vec![b, d], x_t.to_vec()).expect("x_t shape"),
            t: t.to_vec(),
            self_cond: Tensor::new(vec![b, d], self_cond.to_vec()).expect("self-cond shape"),
            cond: cond.clone(),
        };
        self.predict(&input)
    }
}

/// Timesteps visited from `start` down to 0 with the given stride; always
/// ends at 0.
pub fn timestep_path(start: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut path: Vec<usize> = (0..=start / stride).rev().map(|k| k * stride).collect();
    if path.first() != Some(&start) {
        path.insert(0, start);
    }
    path
}

/// DDIM noise level for a step: `eta · sqrt((1−ab_to)/(1−ab_from)) · sqrt(1 − ab_from/ab_to)`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t_from: usize, t_to: usize, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let (af, at) = (schedule.alpha_bar(t_from), schedule.alpha_bar(t_to));
    eta * ((1.0 - at) / (1.0 - af)).sqrt() * (1.0 - af / at).max(0.0).sqrt()
}

/// One update from `t_from` to `t_to` given a clean-sample prediction.
///
/// `rng` supplies the fresh noise and is only drawn from when `sigma > 0`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &[f32],
    x0_hat: &[f32],
    t_from: usize,
    t_to: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>, SamplerError> {
    if t_from <= t_to {
        return Err(SamplerError::BadTimesteps { t_from, t_to });
    }
    let (a_to, s_to) = schedule.coefficients(t_to);
    let budget = s_to * s_to;
    if sigma * sigma > budget {
        return Err(SamplerError::SigmaTooLarge {
            sigma_sq: sigma * sigma,
            budget,
            t_to,
        });
    }
    if schedule.alpha_bar(t_to) == 1.0 && sigma == 0.0 {
        return Ok(x0_hat.to_vec());
    }
    let (a_from, s_from) = schedule.coefficients(t_from);
    let dir = (budget - sigma * sigma).max(0.0).sqrt();
    let z = if sigma > 0.0 {
        standard_normal(x_t.len(), rng)
    } else {
        Vec::new()
    };
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .enumerate()
        .map(|(i, (xt, x0))| {
            let (xt, x0) = (*xt as f64, *x0 as f64);
            let eps = (xt - a_from * x0) / s_from;
            let mut v = a_to * x0 + dir * eps;
            if sigma > 0.0 {
                v += sigma * z[i] as f64;
            }
            v as f32
        })
        .collect())
}

/// A DDIM step on a single plan: predicts `x̂0` at `t_from`, then moves to
/// `t_to`. Returns `(x_{t_to}, x̂0)`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    x_t: &VideoPlan,
    t_from: usize,
    t_to: usize,
    self_cond: &VideoPlan,
    cond: &Conditioning,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(VideoPlan, VideoPlan), SamplerError> {
    let x0 = den.predict_x0(x_t.data(), &[t_from], self_cond.data(), cond);
    let next = ddim_update(schedule, x_t.data(), &x0, t_from, t_to, sigma, rng)?;
    Ok((
        VideoPlan::from_model(x_t.frames(), next),
        VideoPlan::from_model(x_t.frames(), x0),
    ))
}

/// Inputs for one generated plan.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest {
    /// Conditioning frame in model space.
    pub first: Vec<f32>,
    pub task: usize,
    pub seed: u64,
}

/// Inputs for one refinement pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineRequest {
    pub plan: VideoPlan,
    pub first: Vec<f32>,
    pub task: usize,
    pub feedback: Feedback,
    pub seed: u64,
}

fn pin_rows(data: &mut [f32], first: &[f32], d: usize) {
    for (row, f) in data.chunks_exact_mut(d).zip(first.chunks_exact(FRAME_PIXELS)) {
        row[..FRAME_PIXELS].copy_from_slice(f);
    }
}

/// Shared denoising loop. `self_cond = None` means generation mode: start
/// from zeros and feed back the running prediction.
#[allow(clippy::too_many_arguments)]
fn denoise_loop<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    mut x: Vec<f32>,
    path: &[usize],
    fixed_self_cond: Option<&[f32]>,
    cond: &Conditioning,
    rngs: &mut [ChaCha8Rng],
) -> Vec<f32> {
    let b = cond.batch();
    let d = den.video_dim();
    let mut running = vec![0.0f32; b * d];
    let mut x0 = x.clone();
    for w in path.windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        let sc = fixed_self_cond.unwrap_or(&running);
        x0 = den.predict_x0(&x, &vec![t_from; b], sc, cond);
        if cfg.clip_x0 {
            x0.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        pin_rows(&mut x0, &cond.first, d);
        let sigma = ddim_sigma(schedule, t_from, t_to, cfg.sigma_scale);
        let mut next = Vec::with_capacity(b * d);
        for (r, rng) in rngs.iter_mut().enumerate() {
            let rows = r * d..(r + 1) * d;
            let step = ddim_update(schedule, &x[rows.clone()], &x0[rows], t_from, t_to, sigma, rng)
                .expect("sigma derived from eta stays within the noise budget");
            next.extend(step);
        }
        x = next;
        if fixed_self_cond.is_none() {
            running.copy_from_slice(&x0);
        }
    }
    if path.len() < 2 {
        x0 = x;
    }
    pin_rows(&mut x0, &cond.first, d);
    x0
}

fn stride(schedule: &NoiseSchedule, steps: usize) -> usize {
    (schedule.timesteps() / steps.max(1)).max(1)
}

/// Generates one plan per request from seeded Gaussian noise at `T`.
pub fn generate_plans<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    requests: &[PlanRequest],
) -> Vec<VideoPlan> {
    if requests.is_empty() {
        return Vec::new();
    }
    let d = den.video_dim();
    let mut cond = Conditioning::default();
    let mut rngs = Vec::with_capacity(requests.len());
    let mut x = Vec::with_capacity(requests.len() * d);
    for r in requests {
        cond.push(&r.first, r.task, Feedback::None);
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        x.extend(standard_normal(d, &mut rng));
        rngs.push(rng);
    }
    let path = timestep_path(schedule.timesteps(), stride(schedule, cfg.steps));
    let out = denoise_loop(den, schedule, cfg, x, &path, None, &cond, &mut rngs);
    out.chunks_exact(d)
        .map(|c| VideoPlan::from_model(d / FRAME_PIXELS, c.to_vec()))
        .collect()
}

pub fn generate_plan<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    first: &[f32],
    task: Task,
    seed: u64,
) -> VideoPlan {
    let req = PlanRequest {
        first: first.to_vec(),
        task: task.id,
        seed,
    };
    generate_plans(den, schedule, cfg, &[req]).remove(0)
}

/// `round(refine_noise_level · T)`.
pub fn refine_timestep(schedule: &NoiseSchedule, cfg: &SamplerConfig) -> usize {
    (cfg.refine_noise_level * schedule.timesteps() as f64).round() as usize
}

/// One refinement pass per request: re-noise the previous plan to `t_r`,
/// then denoise back to 0 while self-conditioning on that plan.
pub fn refine_plans<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    requests: &[RefineRequest],
) -> Vec<VideoPlan> {
    if requests.is_empty() {
        return Vec::new();
    }
    let d = den.video_dim();
    let t_r = refine_timestep(schedule, cfg);
    let mut cond = Conditioning::default();
    let mut rngs = Vec::with_capacity(requests.len());
    let mut x = Vec::with_capacity(requests.len() * d);
    let mut prev = Vec::with_capacity(requests.len() * d);
    for r in requests {
        cond.push(&r.first, r.task, r.feedback.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
        let eps = standard_normal(d, &mut rng);
        x.extend(noise_slice(schedule, r.plan.data(), t_r, &eps));
        prev.extend_from_slice(r.plan.data());
        rngs.push(rng);
    }
    let path = timestep_path(t_r, stride(schedule, cfg.steps));
    let out = denoise_loop(den, schedule, cfg, x, &path, Some(&prev), &cond, &mut rngs);
    out.chunks_exact(d)
        .map(|c| VideoPlan::from_model(d / FRAME_PIXELS, c.to_vec()))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn refine_once<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    plan: &VideoPlan,
    first: &[f32],
    task: Task,
    feedback: Feedback,
    seed: u64,
) -> VideoPlan {
    let req = RefineRequest {
        plan: plan.clone(),
        first: first.to_vec(),
        task: task.id,
        feedback,
        seed,
    };
    refine_plans(den, schedule, cfg, &[req]).remove(0)
}

/// Seed of refinement pass `iteration` for a plan seeded with `seed`.
pub fn refine_seed(seed: u64, iteration: usize) -> u64 {
    let mut z = seed ^ (iteration as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 32)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z ^ (z >> 29)
}

/// Result of a critic-gated refinement loop.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub plan: VideoPlan,
    /// Index of the returned iterate.
    pub iterations: usize,
    pub accepted: bool,
    /// One verdict per critic query, in order.
    pub history: Vec<Verdict>,
    /// Every iterate produced, starting with the input plan.
    pub iterates: Vec<VideoPlan>,
}

/// Inputs for one critic-gated refinement loop.
#[derive(Clone, Debug)]
pub struct GateRequest {
    pub plan: VideoPlan,
    pub first: Vec<f32>,
    pub task: usize,
    pub seed: u64,
}

/// Refines each plan until the critic accepts it or the iteration cap is
/// reached. The critic is queried at most `max_refine_iterations + 1` times
/// per plan; transport failures count as rejections.
pub fn refine_until_accept_batch<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    critic: &dyn Critic,
    mode: FeedbackMode,
    requests: &[GateRequest],
) -> Vec<RefineOutcome> {
    let mut out: Vec<RefineOutcome> = requests
        .iter()
        .map(|r| RefineOutcome {
            plan: r.plan.clone(),
            iterations: 0,
            accepted: false,
            history: Vec::new(),
            iterates: vec![r.plan.clone()],
        })
        .collect();
    let mut active: Vec<usize> = (0..requests.len()).collect();
    for i in 0..=cfg.max_refine_iterations {
        let mut pending = Vec::new();
        for &k in &active {
            let task = Task::get(requests[k].task).expect("valid task id");
            let verdict = critic.evaluate(&out[k].plan, task);
            if verdict.transport_error {
                log::warn!("critic transport failure on plan {k}, treating as reject");
            }
            let accept = verdict.accept && !verdict.transport_error;
            let fb = make_feedback(&verdict, mode);
            out[k].history.push(verdict);
            out[k].iterations = i;
            if accept {
                out[k].accepted = true;
            } else if i < cfg.max_refine_iterations {
                pending.push((k, fb));
            }
        }
        if pending.is_empty() {
            break;
        }
        let reqs: Vec<RefineRequest> = pending
            .iter()
            .map(|(k, fb)| RefineRequest {
                plan: out[*k].plan.clone(),
                first: requests[*k].first.clone(),
                task: requests[*k].task,
                feedback: fb.clone(),
                seed: refine_seed(requests[*k].seed, i),
            })
            .collect();
        let refined = refine_plans(den, schedule, cfg, &reqs);
        active = pending.iter().map(|(k, _)| *k).collect();
        for (&k, plan) in active.iter().zip(refined) {
            out[k].iterates.push(plan.clone());
            out[k].plan = plan;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn refine_until_accept<D: PlanDenoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    critic: &dyn Critic,
    mode: FeedbackMode,
    plan: &VideoPlan,
    first: &[f32],
    task: Task,
    seed: u64,
) -> RefineOutcome {
    let req = GateRequest {
        plan: plan.clone(),
        first: first.to_vec(),
        task: task.id,
        seed,
    };
    refine_until_accept_batch(den, schedule, cfg, critic, mode, &[req]).remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_paths() {
        assert_eq!(timestep_path(10, 2), vec![10, 8, 6, 4, 2, 0]);
        assert_eq!(timestep_path(7, 2), vec![7, 6, 4, 2, 0]);
        assert_eq!(timestep_path(0, 2), vec![0]);
    }

    #[test]
    fn sigma_budget_is_enforced() {
        let s = NoiseSchedule::cosine(100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = ddim_update(&s, &[0.0], &[0.0], 50, 40, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, SamplerError::SigmaTooLarge { .. }));
        assert!(ddim_update(&s, &[0.0], &[0.0], 40, 40, 0.0, &mut rng).is_err());
    }

    #[test]
    fn eta_one_sigma_fits_budget() {
        let s = NoiseSchedule::cosine(100);
        for t in (2..=100).step_by(2) {
            let sigma = ddim_sigma(&s, t, t - 2, 1.0);
            assert!(sigma * sigma <= 1.0 - s.alpha_bar(t - 2) + 1e-12);
        }
    }

    #[test]
    fn refine_seeds_differ_per_iteration() {
        assert_ne!(refine_seed(3, 0), refine_seed(3, 1));
        assert_ne!(refine_seed(3, 0), refine_seed(4, 0));
    }
}
