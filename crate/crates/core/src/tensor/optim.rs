use super::{ParamStore, Tensor};

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    /// Global-norm clip applied before the update; `0` disables it.
    pub clip_norm: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            clip_norm: 0.0,
            velocity: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip_norm: f32) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// Applies one update. `grads[i]` is the gradient of `params.tensor(i)`.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> f32 {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.len() != params.len() {
            self.velocity = (0..params.len())
                .map(|i| vec![0.0; params.tensor(i).len()])
                .collect();
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32;
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (i, grad) in grads.iter().enumerate() {
            let vel = &mut self.velocity[i];
            let p = params.tensor_mut(i).data_mut();
            for ((pv, vv), gv) in p.iter_mut().zip(vel.iter_mut()).zip(grad.data()) {
                *vv = self.momentum * *vv + *gv * scale;
                *pv -= self.lr * *vv;
            }
        }
        norm
    }
}

/// Exponential moving average of parameters.
///
/// The effective decay warms up as `min(decay, (1 + n) / (10 + n))` so short
/// runs are not dominated by the initialization.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f32,
    shadow: ParamStore<f32>,
    updates: u64,
}

impl Ema {
    pub fn new(params: &ParamStore<f32>, decay: f32) -> Self {
        Self {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    /// Restores a saved average that has seen `updates` steps.
    pub fn resume(shadow: ParamStore<f32>, decay: f32, updates: u64) -> Self {
        Self {
            decay,
            shadow,
            updates,
        }
    }

    pub fn update(&mut self, params: &ParamStore<f32>) {
        self.updates += 1;
        let n = self.updates as f32;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for i in 0..params.len() {
            let src = params.tensor(i).data();
            let dst = self.shadow.tensor_mut(i).data_mut();
            for (s, p) in dst.iter_mut().zip(src) {
                *s = d * *s + (1.0 - d) * *p;
            }
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}
