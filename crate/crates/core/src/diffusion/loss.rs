use rand::Rng;

use super::denoiser::{Conditioning, DenoiseInput, DenoiseNet};
use super::{standard_normal, Feedback, NoiseSchedule};
use crate::tensor::{Graph, Result, Scalar, Tensor, Var};

/// Clean videos with their conditioning, `[batch, frames·pixels]`.
#[derive(Clone, Debug)]
pub struct TrainBatch<S> {
    pub x0: Tensor<S>,
    pub cond: Conditioning,
}

/// Timesteps and Gaussian noise for one batch, drawn outside the loss so
/// the loss is a deterministic function of parameters.
#[derive(Clone, Debug)]
pub struct NoiseDraw<S> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
}

impl<S: Scalar> NoiseDraw<S> {
    /// `t` uniform on `1..=T`, unit-normal noise.
    pub fn sample<R: Rng + ?Sized>(batch: usize, dim: usize, timesteps: usize, rng: &mut R) -> Self {
        let t = (0..batch).map(|_| rng.random_range(1..=timesteps)).collect();
        let eps = standard_normal(batch * dim, rng)
            .into_iter()
            .map(|v| S::from_real(v as f64))
            .collect();
        Self {
            t,
            eps: Tensor::new(vec![batch, dim], eps).expect("noise shape"),
        }
    }
}

/// Which video is noised to form `x_t` in the consistency loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScAnchor {
    /// The ground truth `x0`.
    #[default]
    GroundTruth,
    /// The first earlier sample `x̂1`, matching how refinement re-noises the
    /// previous plan at inference.
    Sample,
}

impl std::fmt::Display for ScAnchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScAnchor::GroundTruth => "ground_truth",
            ScAnchor::Sample => "sample",
        })
    }
}

impl std::str::FromStr for ScAnchor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ground_truth" => Ok(ScAnchor::GroundTruth),
            "sample" => Ok(ScAnchor::Sample),
            other => Err(format!("unknown anchor {other:?}, expected ground_truth or sample")),
        }
    }
}

/// Inputs of the self-conditioning consistency loss: ground truth plus two
/// earlier samples for the same conditioning.
#[derive(Clone, Debug)]
pub struct ScBatch<S> {
    pub x0: Tensor<S>,
    pub xhat1: Tensor<S>,
    pub xhat2: Tensor<S>,
    pub cond: Conditioning,
    pub anchor: ScAnchor,
}

impl<S> ScBatch<S> {
    fn anchor_video(&self) -> &Tensor<S> {
        match self.anchor {
            ScAnchor::GroundTruth => &self.x0,
            ScAnchor::Sample => &self.xhat1,
        }
    }
}

pub struct ScLoss {
    pub total: Var,
    pub fit: Var,
    pub pair: Var,
}

pub struct TotalLoss {
    pub total: Var,
    pub video_diffusion: Var,
    pub sc: Option<ScLoss>,
}

fn noised<S: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<S>, noise: &NoiseDraw<S>) -> Tensor<S> {
    let b = noise.t.len();
    let d = x0.len() / b.max(1);
    let mut data = x0.data().to_vec();
    for (r, &t) in noise.t.iter().enumerate() {
        if schedule.alpha_bar(t) == 1.0 {
            continue;
        }
        let (a, s) = schedule.coefficients(t);
        let (a, s) = (S::from_real(a), S::from_real(s));
        let row = &mut data[r * d..(r + 1) * d];
        for (x, e) in row.iter_mut().zip(&noise.eps.data()[r * d..(r + 1) * d]) {
            *x = a * *x + s * *e;
        }
    }
    Tensor::new(x0.shape().to_vec(), data).expect("same shape")
}

/// Squared error summed over a video and averaged over the batch.
fn batch_sq_error<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Result<Var> {
    let t = g.value(target);
    let per_row = t.len() / t.shape()[0].max(1);
    let m = g.mse(pred, target)?;
    Ok(g.scale(m, S::from_real(per_row as f64)))
}

fn with_feedback(cond: &Conditioning, fb: Option<Feedback>) -> Conditioning {
    let mut c = cond.clone();
    if let Some(fb) = fb {
        c.feedback = vec![fb; c.tasks.len()];
    }
    c
}

/// Plain denoising loss: generation mode (zero self-conditioning, no feedback).
pub fn loss_video_diffusion<S: Scalar, N: DenoiseNet<S>>(
    g: &mut Graph<S>,
    net: &N,
    vars: &[Var],
    schedule: &NoiseSchedule,
    batch: &TrainBatch<S>,
    noise: &NoiseDraw<S>,
) -> Result<Var> {
    let input = DenoiseInput {
        x_t: noised(schedule, &batch.x0, noise),
        t: noise.t.clone(),
        self_cond: Tensor::zeros(batch.x0.shape()),
        cond: with_feedback(&batch.cond, Some(Feedback::None)),
    };
    let pred = net.forward(g, vars, &input)?;
    let target = g.constant(batch.x0.clone());
    batch_sq_error(g, pred, target)
}

/// Prediction from the second sample, used as the fixed target of the pair
/// term. Computed with frozen parameters, so no gradient reaches it.
pub fn sc_pair_target<S: Scalar, N: DenoiseNet<S>>(
    net: &N,
    schedule: &NoiseSchedule,
    batch: &ScBatch<S>,
    noise: &NoiseDraw<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = net.params().register_frozen(&mut g);
    let input = DenoiseInput {
        x_t: noised(schedule, batch.anchor_video(), noise),
        t: noise.t.clone(),
        self_cond: batch.xhat2.clone(),
        cond: with_feedback(&batch.cond, Some(Feedback::None)),
    };
    let out = net.forward(&mut g, &vars, &input)?;
    Ok(g.value(out).clone())
}

/// Feedback-conditioned fit of the refiner to the ground truth from `x̂1`,
/// plus `mu` times the disagreement between refinements from `x̂1` and `x̂2`.
///
/// `pair_target` overrides the `x̂2` branch (see [`sc_pair_target`]); when
/// absent it is computed from the current parameters.
#[allow(clippy::too_many_arguments)]
pub fn loss_sc_consistency<S: Scalar, N: DenoiseNet<S>>(
    g: &mut Graph<S>,
    net: &N,
    vars: &[Var],
    schedule: &NoiseSchedule,
    batch: &ScBatch<S>,
    noise: &NoiseDraw<S>,
    mu: f64,
    pair_target: Option<&Tensor<S>>,
) -> Result<ScLoss> {
    let x_t = noised(schedule, batch.anchor_video(), noise);
    let fit_input = DenoiseInput {
        x_t: x_t.clone(),
        t: noise.t.clone(),
        self_cond: batch.xhat1.clone(),
        cond: batch.cond.clone(),
    };
    let fit_pred = net.forward(g, vars, &fit_input)?;
    let x0 = g.constant(batch.x0.clone());
    let fit = batch_sq_error(g, fit_pred, x0)?;

    let plain = batch.cond.feedback.iter().all(|f| *f == Feedback::None);
    let pair_pred = if plain {
        fit_pred
    } else {
        let input = DenoiseInput {
            cond: with_feedback(&batch.cond, Some(Feedback::None)),
            ..fit_input
        };
        net.forward(g, vars, &input)?
    };
    let target = match pair_target {
        Some(t) => t.clone(),
        None => sc_pair_target(net, schedule, batch, noise)?,
    };
    let target = g.constant(target);
    let pair = batch_sq_error(g, pair_pred, target)?;
    let weighted = g.scale(pair, S::from_real(mu));
    let total = g.add(fit, weighted)?;
    Ok(ScLoss { total, fit, pair })
}

/// `L_vd + lambda · L_sc`. Without an SC batch, or with `lambda = 0`, this
/// is the plain diffusion loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar, N: DenoiseNet<S>>(
    g: &mut Graph<S>,
    net: &N,
    vars: &[Var],
    schedule: &NoiseSchedule,
    batch: &TrainBatch<S>,
    noise: &NoiseDraw<S>,
    sc: Option<(&ScBatch<S>, &NoiseDraw<S>)>,
    lambda: f64,
    mu: f64,
) -> Result<TotalLoss> {
    let vd = loss_video_diffusion(g, net, vars, schedule, batch, noise)?;
    let Some((sc_batch, sc_noise)) = sc.filter(|_| lambda != 0.0) else {
        return Ok(TotalLoss {
            total: vd,
            video_diffusion: vd,
            sc: None,
        });
    };
    let sc = loss_sc_consistency(g, net, vars, schedule, sc_batch, sc_noise, mu, None)?;
    let weighted = g.scale(sc.total, S::from_real(lambda));
    let total = g.add(vd, weighted)?;
    Ok(TotalLoss {
        total,
        video_diffusion: vd,
        sc: Some(sc),
    })
}
