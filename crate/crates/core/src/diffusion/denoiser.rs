use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Feedback, FEEDBACK_DIM};
use crate::tensor::{Graph, ParamStore, Result, Scalar, Tensor, Var};
use crate::video::FRAME_PIXELS;

/// Shape of the denoising network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub pixels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub task_dim: usize,
    pub tasks: usize,
    /// Diffusion steps `T`; timestep inputs lie in `0..=timesteps`.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frames: crate::gridworld::PLAN_FRAMES,
            pixels: FRAME_PIXELS,
            hidden: 256,
            time_dim: 32,
            task_dim: 32,
            tasks: crate::gridworld::TASKS.len(),
            timesteps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn video_dim(&self) -> usize {
        self.frames * self.pixels
    }

    pub fn input_dim(&self) -> usize {
        2 * self.video_dim() + self.pixels + self.time_dim + self.task_dim + FEEDBACK_DIM
    }
}

/// Everything the network conditions on besides the noisy sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    /// Row-major `[batch, pixels]` first frames in model space.
    pub first: Vec<f32>,
    pub tasks: Vec<usize>,
    pub feedback: Vec<Feedback>,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.tasks.len()
    }

    pub fn push(&mut self, first: &[f32], task: usize, feedback: Feedback) {
        self.first.extend_from_slice(first);
        self.tasks.push(task);
        self.feedback.push(feedback);
    }

    /// Rows `idx` of this batch, in that order.
    pub fn select(&self, idx: &[usize]) -> Conditioning {
        let p = self.first.len() / self.batch().max(1);
        let mut out = Conditioning::default();
        for &i in idx {
            out.push(&self.first[i * p..(i + 1) * p], self.tasks[i], self.feedback[i].clone());
        }
        out
    }
}

/// One batched network call.
#[derive(Clone, Debug)]
pub struct DenoiseInput<S> {
    /// `[batch, frames·pixels]`.
    pub x_t: Tensor<S>,
    pub t: Vec<usize>,
    /// Previous sample, zeros in generation mode.
    pub self_cond: Tensor<S>,
    pub cond: Conditioning,
}

impl<S: Scalar> DenoiseInput<S> {
    pub fn batch(&self) -> usize {
        self.t.len()
    }

    /// `[batch, frames·pixels]` tiling of each row's first frame.
    pub fn first_frame_broadcast(&self) -> Tensor<S> {
        let b = self.batch();
        let d = self.x_t.len() / b.max(1);
        let p = self.cond.first.len() / b.max(1);
        let mut data = Vec::with_capacity(b * d);
        for r in 0..b {
            let f = &self.cond.first[r * p..(r + 1) * p];
            for _ in 0..d / p {
                data.extend(f.iter().map(|v| S::from_real(*v as f64)));
            }
        }
        Tensor::new(vec![b, d], data).expect("broadcast shape")
    }
}

/// A network predicting the clean video from a noisy one.
pub trait DenoiseNet<S: Scalar> {
    fn params(&self) -> &ParamStore<S>;

    /// Records the forward pass on `graph`. `vars` are the registered
    /// parameters, in store order. Returns a `[batch, frames·pixels]` var.
    fn forward(&self, graph: &mut Graph<S>, vars: &[Var], input: &DenoiseInput<S>) -> Result<Var>;
}

/// Sinusoidal embedding of an integer timestep, `dim/2` sines then cosines.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

const TASK_EMBED: usize = 0;
const FB_TABLE: usize = 1;
const W1: usize = 2;

/// Three-layer perceptron over the concatenated noisy video, self-conditioning
/// video, first frame, time, task and feedback features. The output is added
/// to the first frame tiled across time, so a zero last layer predicts a
/// static video.
#[derive(Clone, Debug)]
pub struct Denoiser<S = f32> {
    pub config: DenoiserConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> PartialEq for Denoiser<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<S: Scalar> Denoiser<S> {
    /// He-normal hidden layers, unit-normal embeddings, zero output layer.
    pub fn new(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (din, h, dout) = (config.input_dim(), config.hidden, config.video_dim());
        let mut params = ParamStore::new();
        params.push("task_embed", Tensor::randn(&[config.tasks, config.task_dim], 1.0, &mut rng));
        params.push("fb_binary", Tensor::randn(&[2, FEEDBACK_DIM], 1.0, &mut rng));
        params.push("w1", Tensor::randn(&[din, h], (2.0 / din as f64).sqrt(), &mut rng));
        params.push("b1", Tensor::zeros(&[h]));
        params.push("w2", Tensor::randn(&[h, h], (2.0 / h as f64).sqrt(), &mut rng));
        params.push("b2", Tensor::zeros(&[h]));
        params.push("w3", Tensor::zeros(&[h, dout]));
        params.push("b3", Tensor::zeros(&[dout]));
        Self { config, params }
    }

    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

impl<S: Scalar> DenoiseNet<S> for Denoiser<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn forward(&self, g: &mut Graph<S>, vars: &[Var], input: &DenoiseInput<S>) -> Result<Var> {
        let cfg = &self.config;
        let b = input.batch();
        let xt = g.constant(input.x_t.clone());
        let sc = g.constant(input.self_cond.clone());
        let first_data = input.cond.first.iter().map(|v| S::from_real(*v as f64)).collect();
        let first = g.constant(Tensor::new(vec![b, cfg.pixels], first_data)?);
        let mut temb = Vec::with_capacity(b * cfg.time_dim);
        for &t in &input.t {
            temb.extend(time_embedding(t, cfg.time_dim).into_iter().map(S::from_real));
        }
        let temb = g.constant(Tensor::new(vec![b, cfg.time_dim], temb)?);
        let task = g.embed_lookup(vars[TASK_EMBED], &input.cond.tasks)?;
        let fb = feedback_features(g, vars[FB_TABLE], &input.cond.feedback)?;

        let x = g.concat(&[xt, sc, first, temb, task, fb])?;
        let mut h = x;
        for layer in 0..2 {
            let z = g.matmul(h, vars[W1 + 2 * layer])?;
            let z = g.add(z, vars[W1 + 2 * layer + 1])?;
            h = g.relu(z);
        }
        let z = g.matmul(h, vars[W1 + 4])?;
        let out = g.add(z, vars[W1 + 5])?;
        let base = g.constant(input.first_frame_broadcast());
        g.add(out, base)
    }
}

/// Binary verdicts select a learned row; suggestions contribute their hashed
/// bag of words; no feedback is an exact zero vector.
fn feedback_features<S: Scalar>(g: &mut Graph<S>, table: Var, feedback: &[Feedback]) -> Result<Var> {
    let b = feedback.len();
    let mut hashed = Vec::with_capacity(b * FEEDBACK_DIM);
    for f in feedback {
        hashed.extend(f.hashed_features().iter().map(|v| S::from_real(*v as f64)));
    }
    let hashed = g.constant(Tensor::new(vec![b, FEEDBACK_DIM], hashed)?);
    if !feedback.iter().any(|f| matches!(f, Feedback::Binary(_))) {
        return Ok(hashed);
    }
    let ids: Vec<usize> = feedback
        .iter()
        .map(|f| matches!(f, Feedback::Binary(true)) as usize)
        .collect();
    let mut mask = Vec::with_capacity(b * FEEDBACK_DIM);
    for f in feedback {
        let m = if matches!(f, Feedback::Binary(_)) { S::one() } else { S::zero() };
        mask.extend(std::iter::repeat_n(m, FEEDBACK_DIM));
    }
    let rows = g.embed_lookup(table, &ids)?;
    let mask = g.constant(Tensor::new(vec![b, FEEDBACK_DIM], mask)?);
    let rows = g.mul(rows, mask)?;
    g.add(rows, hashed)
}

impl Denoiser<f32> {
    /// Inference-only forward pass.
    pub fn predict(&self, input: &DenoiseInput<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let vars = self.params.register_frozen(&mut g);
        let out = self.forward(&mut g, &vars, input).expect("denoiser input shapes");
        g.value(out).data().to_vec()
    }
}

/// Four scalar weights: `a·x_t + b·x̂ + c·first + sigmoid(d·x_t)`. Small enough
/// for exhaustive finite-difference checks of the training losses.
#[derive(Clone, Debug)]
pub struct ToyNet<S = f64> {
    pub params: ParamStore<S>,
}

impl<S: Scalar> ToyNet<S> {
    pub fn new(weights: [f64; 4]) -> Self {
        let mut params = ParamStore::new();
        for (name, w) in ["a", "b", "c", "d"].iter().zip(weights) {
            params.push(*name, Tensor::matrix(1, 1, vec![S::from_real(w)]).expect("1x1"));
        }
        Self { params }
    }
}

impl<S: Scalar> DenoiseNet<S> for ToyNet<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn forward(&self, g: &mut Graph<S>, vars: &[Var], input: &DenoiseInput<S>) -> Result<Var> {
        let shape = input.x_t.shape().to_vec();
        let n = input.x_t.len();
        let col = |g: &mut Graph<S>, t: Tensor<S>| g.constant(t.reshape(vec![n, 1]).expect("column"));
        let xt = col(g, input.x_t.clone());
        let sc = col(g, input.self_cond.clone());
        let first = col(g, input.first_frame_broadcast());
        let a = g.matmul(xt, vars[0])?;
        let b = g.matmul(sc, vars[1])?;
        let c = g.matmul(first, vars[2])?;
        let d = g.matmul(xt, vars[3])?;
        let d = g.sigmoid(d);
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        let s = g.add(s, d)?;
        g.reshape(s, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &DenoiserConfig, fb: Feedback) -> DenoiseInput<f32> {
        let d = cfg.video_dim();
        DenoiseInput {
            x_t: Tensor::new(vec![1, d], (0..d).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap(),
            t: vec![17],
            self_cond: Tensor::zeros(&[1, d]),
            cond: Conditioning {
                first: (0..cfg.pixels).map(|i| (i % 3) as f32 - 1.0).collect(),
                tasks: vec![1],
                feedback: vec![fb],
            },
        }
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            frames: 3,
            pixels: 4,
            hidden: 8,
            time_dim: 4,
            task_dim: 3,
            tasks: 4,
            timesteps: 10,
        }
    }

    #[test]
    fn zero_output_layer_predicts_static_video() {
        let cfg = small();
        let net = Denoiser::<f32>::new(cfg, 3);
        let inp = input(&cfg, Feedback::Binary(true));
        let out = net.predict(&inp);
        assert_eq!(out, inp.first_frame_broadcast().into_data());
    }

    #[test]
    fn no_feedback_matches_zeroed_binary_table() {
        let cfg = small();
        let mut net = Denoiser::<f32>::new(cfg, 5);
        for i in 0..net.params.len() {
            if net.params.names().nth(i) == Some("w3") {
                net.params.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.01);
            }
        }
        let none = net.predict(&input(&cfg, Feedback::None));
        let with_table = net.predict(&input(&cfg, Feedback::Binary(true)));
        assert_ne!(none, with_table);
        net.params.tensor_mut(FB_TABLE).data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(none, net.predict(&input(&cfg, Feedback::Binary(true))));
    }

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }
}
