use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::denoiser::{Conditioning, Denoiser, DenoiserConfig};
use super::loss::{total_loss, NoiseDraw, ScAnchor, ScBatch, TrainBatch};
use super::{Feedback, FeedbackMode, NoiseSchedule};
use crate::critic::{make_feedback, Critic};
use crate::gridworld::{DemoRecord, Task};
use crate::sampler::{generate_plans, refine_plans, PlanRequest, RefineRequest, SamplerConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, Ema, Graph, ParamStore, Sgd, Tensor, TensorError};
use crate::video::{VideoPlan, FRAME_PIXELS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub frames: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub mu: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    pub feedback_mode: FeedbackMode,
    /// Iterations between replay-buffer refreshes.
    pub replay_every: usize,
    /// Plans regenerated per refresh.
    pub replay_size: usize,
    /// DDIM steps of the refresh sampler.
    pub replay_steps: usize,
    pub sc_anchor: ScAnchor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            frames: crate::gridworld::PLAN_FRAMES,
            hidden: 256,
            lambda: 1.0,
            mu: 0.1,
            lr: 5e-4,
            momentum: 0.9,
            clip_norm: 100.0,
            ema_decay: 0.999,
            batch: 16,
            iters: 2000,
            seed: 0,
            feedback_mode: FeedbackMode::None,
            replay_every: 50,
            replay_size: 32,
            replay_steps: 10,
            sc_anchor: ScAnchor::GroundTruth,
        }
    }
}

impl TrainConfig {
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            frames: self.frames,
            hidden: self.hidden,
            timesteps: self.timesteps,
            ..DenoiserConfig::default()
        }
    }
}

/// A clean video with its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: VideoPlan,
    /// Model-space first frame.
    pub first: Vec<f32>,
    pub task: usize,
}

impl TrainExample {
    pub fn new(x0: VideoPlan, task: usize) -> Self {
        let first = x0.frame(0).to_vec();
        Self { x0, first, task }
    }

    pub fn from_record(rec: &DemoRecord) -> Self {
        Self::new(rec.plan(), rec.task)
    }
}

/// Two earlier samples for one training example, plus the critic feedback
/// on the first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub example: usize,
    pub xhat1: VideoPlan,
    pub xhat2: VideoPlan,
    pub feedback: Feedback,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    pub entries: Vec<ReplayEntry>,
}

/// Losses logged for one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub video_diffusion: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,L_vd,L_sc,L_total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.iter, self.video_diffusion, self.sc, self.total)
    }
}

/// Owns the parameters, optimizer state, EMA and replay buffer.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Denoiser<f32>,
    pub ema: Ema,
    pub schedule: NoiseSchedule,
    pub replay: ReplayBuffer,
    pub iteration: usize,
    sgd: Sgd,
    rng: ChaCha8Rng,
}

fn stack<'a>(plans: impl Iterator<Item = &'a VideoPlan>) -> Vec<f32> {
    plans.flat_map(|p| p.data().iter().copied()).collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let model = Denoiser::new(config.denoiser_config(), config.seed);
        Self::from_model(config, model)
    }

    /// Continues training from existing parameters.
    pub fn from_model(config: TrainConfig, model: Denoiser<f32>) -> Self {
        let schedule = NoiseSchedule::cosine(config.timesteps);
        let ema = Ema::new(&model.params, config.ema_decay as f32);
        let sgd = Sgd::new(config.lr as f32, config.momentum as f32).with_clip(config.clip_norm as f32);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_7A1E);
        Self {
            config,
            model,
            ema,
            schedule,
            replay: ReplayBuffer::default(),
            iteration: 0,
            sgd,
            rng,
        }
    }

    /// Continues from a checkpoint, keeping its EMA and iteration count.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Self {
        let mut t = Self::from_model(config, checkpoint.model);
        if let Some(ema) = checkpoint.ema {
            t.ema = Ema::resume(ema.params, t.config.ema_decay as f32, checkpoint.iteration as u64);
        }
        t.iteration = checkpoint.iteration;
        t.rng = ChaCha8Rng::seed_from_u64(t.config.seed ^ 0x5EED_7A1E ^ (checkpoint.iteration as u64).rotate_left(32));
        t
    }

    /// EMA parameters wrapped as a denoiser.
    pub fn ema_model(&self) -> Denoiser<f32> {
        Denoiser {
            config: self.model.config,
            params: self.ema.params().clone(),
        }
    }

    /// Regenerates `replay_size` sample pairs with a short sampler on the
    /// current parameters. The second sample refines the first under the
    /// critic's feedback on it.
    pub fn refresh_replay(&mut self, data: &[TrainExample], critic: Option<&dyn Critic>) {
        let n = self.config.replay_size.min(data.len()).max(1);
        let picks: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..data.len())).collect();
        let cfg = SamplerConfig {
            steps: self.config.replay_steps,
            ..SamplerConfig::default()
        };
        let requests: Vec<PlanRequest> = picks
            .iter()
            .map(|&i| PlanRequest {
                first: data[i].first.clone(),
                task: data[i].task,
                seed: self.rng.random(),
            })
            .collect();
        let first_pass = generate_plans(&self.model, &self.schedule, &cfg, &requests);
        let mode = self.config.feedback_mode;
        let feedback: Vec<Feedback> = picks
            .iter()
            .zip(&first_pass)
            .map(|(&i, plan)| match (mode, critic) {
                (FeedbackMode::None, _) => Feedback::None,
                (_, None) => {
                    log::warn!("feedback mode {mode} needs a critic; training without feedback");
                    Feedback::None
                }
                (_, Some(c)) => {
                    let task = Task::get(data[i].task).expect("valid task id");
                    let v = c.evaluate(plan, task);
                    if v.transport_error {
                        log::warn!("critic unavailable during training; using no feedback");
                        Feedback::None
                    } else {
                        make_feedback(&v, mode)
                    }
                }
            })
            .collect();
        let refine: Vec<RefineRequest> = picks
            .iter()
            .zip(&first_pass)
            .zip(&feedback)
            .map(|((&i, plan), fb)| RefineRequest {
                plan: plan.clone(),
                first: data[i].first.clone(),
                task: data[i].task,
                feedback: fb.clone(),
                seed: self.rng.random(),
            })
            .collect();
        let second_pass = refine_plans(&self.model, &self.schedule, &cfg, &refine);
        self.replay.entries = picks
            .into_iter()
            .zip(first_pass)
            .zip(second_pass)
            .zip(feedback)
            .map(|(((example, xhat1), xhat2), feedback)| ReplayEntry {
                example,
                xhat1,
                xhat2,
                feedback,
            })
            .collect();
    }

    fn train_batch(&mut self, data: &[TrainExample]) -> TrainBatch<f32> {
        let picks: Vec<&TrainExample> = (0..self.config.batch)
            .map(|_| data.choose(&mut self.rng).expect("nonempty"))
            .collect();
        let mut cond = Conditioning::default();
        for ex in &picks {
            cond.push(&ex.first, ex.task, Feedback::None);
        }
        let d = picks[0].x0.len();
        TrainBatch {
            x0: Tensor::new(vec![picks.len(), d], stack(picks.iter().map(|e| &e.x0))).expect("batch shape"),
            cond,
        }
    }

    fn sc_batch(&mut self, data: &[TrainExample]) -> Option<ScBatch<f32>> {
        if self.replay.entries.is_empty() {
            return None;
        }
        let b = self.config.batch;
        let mut cond = Conditioning::default();
        let (mut x0, mut h1, mut h2) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..b {
            let e = self.replay.entries.choose(&mut self.rng).expect("nonempty");
            let ex = &data[e.example];
            cond.push(&ex.first, ex.task, e.feedback.clone());
            let (a, c) = if self.rng.random::<bool>() {
                (&e.xhat2, &e.xhat1)
            } else {
                (&e.xhat1, &e.xhat2)
            };
            x0.extend_from_slice(ex.x0.data());
            h1.extend_from_slice(a.data());
            h2.extend_from_slice(c.data());
        }
        let d = x0.len() / b;
        let t = |v: Vec<f32>| Tensor::new(vec![b, d], v).expect("batch shape");
        Some(ScBatch {
            x0: t(x0),
            xhat1: t(h1),
            xhat2: t(h2),
            cond,
            anchor: self.config.sc_anchor,
        })
    }

    /// One optimizer step on `L_vd + lambda · L_sc`.
    pub fn train_iteration(
        &mut self,
        data: &[TrainExample],
        critic: Option<&dyn Critic>,
    ) -> Result<LossRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let use_sc = self.config.lambda != 0.0;
        if use_sc && (self.iteration % self.config.replay_every.max(1) == 0 || self.replay.entries.is_empty()) {
            self.refresh_replay(data, critic);
        }
        let batch = self.train_batch(data);
        let d = batch.x0.len() / self.config.batch;
        let noise = NoiseDraw::sample(self.config.batch, d, self.config.timesteps, &mut self.rng);
        let sc = if use_sc { self.sc_batch(data) } else { None };
        let sc_noise = sc
            .as_ref()
            .map(|_| NoiseDraw::sample(self.config.batch, d, self.config.timesteps, &mut self.rng));

        let mut g = Graph::new();
        let vars = self.model.params.register(&mut g);
        let sc_pair = sc.as_ref().zip(sc_noise.as_ref());
        let losses = total_loss(
            &mut g,
            &self.model,
            &vars,
            &self.schedule,
            &batch,
            &noise,
            sc_pair,
            self.config.lambda,
            self.config.mu,
        )?;
        let record = LossRecord {
            iter: self.iteration,
            video_diffusion: g.value(losses.video_diffusion).item() as f64,
            sc: losses.sc.as_ref().map_or(0.0, |s| g.value(s.total).item() as f64),
            total: g.value(losses.total).item() as f64,
        };
        if !record.total.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
            });
        }
        let grads = g.backward(losses.total)?.collect(&vars);
        self.sgd.step(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
            });
        }
        self.ema.update(&self.model.params);
        self.iteration += 1;
        Ok(record)
    }

    /// Runs `iters` iterations, returning the loss log.
    pub fn train(
        &mut self,
        data: &[TrainExample],
        critic: Option<&dyn Critic>,
        iters: usize,
    ) -> Result<Vec<LossRecord>, TrainError> {
        (0..iters).map(|_| self.train_iteration(data, critic)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(path, &self.model, Some(self.ema.params()), self.iteration)
    }
}

const META: &str = "meta/config";

/// Writes model parameters under `model/`, optional EMA parameters under
/// `ema/`, and a `meta/config` record holding the network shape and
/// iteration count.
pub fn save_checkpoint(
    path: &Path,
    model: &Denoiser<f32>,
    ema: Option<&ParamStore<f32>>,
    iteration: usize,
) -> Result<(), TrainError> {
    let c = &model.config;
    let meta = [c.frames, c.pixels, c.hidden, c.time_dim, c.task_dim, c.tasks, c.timesteps, iteration];
    let meta = Tensor::vector(meta.iter().map(|v| *v as f32).collect());
    let mut records: Vec<(String, &Tensor<f32>)> = vec![(META.to_string(), &meta)];
    records.extend(model.params.iter().map(|(n, t)| (format!("model/{n}"), t)));
    if let Some(ema) = ema {
        records.extend(ema.iter().map(|(n, t)| (format!("ema/{n}"), t)));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(&mut w, records.iter().map(|(n, t)| (n.as_str(), *t)))?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub ema: Option<Denoiser<f32>>,
    pub iteration: usize,
}

impl Checkpoint {
    /// The EMA parameters when present, otherwise the raw ones.
    pub fn inference_model(&self) -> &Denoiser<f32> {
        self.ema.as_ref().unwrap_or(&self.model)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let records = read_checkpoint(BufReader::new(File::open(path)?))?;
    let meta = records
        .iter()
        .find(|(n, _)| n == META)
        .ok_or_else(|| TrainError::Checkpoint("missing meta/config record".into()))?;
    let m: Vec<usize> = meta.1.data().iter().map(|v| *v as usize).collect();
    if m.len() != 8 {
        return Err(TrainError::Checkpoint(format!("meta/config has {} fields, expected 8", m.len())));
    }
    let config = DenoiserConfig {
        frames: m[0],
        pixels: m[1],
        hidden: m[2],
        time_dim: m[3],
        task_dim: m[4],
        tasks: m[5],
        timesteps: m[6],
    };
    if config.pixels != FRAME_PIXELS {
        return Err(TrainError::Checkpoint(format!("unsupported frame size {}", config.pixels)));
    }
    let template = Denoiser::<f32>::new(config, 0);
    let collect = |prefix: &str| -> Result<Option<ParamStore<f32>>, TrainError> {
        let mut store = ParamStore::new();
        for (name, t) in template.params.iter() {
            let key = format!("{prefix}/{name}");
            match records.iter().find(|(n, _)| *n == key) {
                Some((_, v)) if v.shape() == t.shape() => store.push(name, v.clone()),
                Some((_, v)) => {
                    return Err(TrainError::Checkpoint(format!(
                        "{key} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None if prefix == "ema" && store.is_empty() => return Ok(None),
                None => return Err(TrainError::Checkpoint(format!("missing record {key}"))),
            }
        }
        Ok(Some(store))
    };
    let model = collect("model")?.ok_or_else(|| TrainError::Checkpoint("missing model records".into()))?;
    let ema = collect("ema")?;
    Ok(Checkpoint {
        model: Denoiser { config, params: model },
        ema: ema.map(|params| Denoiser { config, params }),
        iteration: m[7],
    })
}
