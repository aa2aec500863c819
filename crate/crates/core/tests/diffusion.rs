use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use videoagent_core::critic::{ConstantCritic, Critic, CriticSource, Verdict};
use videoagent_core::diffusion::{
    forward_noise, loss_sc_consistency, sc_pair_target, standard_normal, Conditioning, DenoiserConfig, NoiseDraw,
    ScAnchor, ScBatch, ToyNet, TrainConfig, TrainExample,
};
use videoagent_core::gridworld::{generate_demos, render, reset, TASKS};
use videoagent_core::sampler::{
    ddim_step, generate_plans, refine_until_accept, PlanDenoiser, PlanRequest, SamplerConfig,
};
use videoagent_core::video::FRAME_PIXELS;
use videoagent_core::{Denoiser, Feedback, FeedbackMode, Graph, NoiseSchedule, Task, Tensor, Trainer, VideoPlan};

/// Always predicts the same clean video.
struct Oracle(Vec<f32>);

impl PlanDenoiser for Oracle {
    fn video_dim(&self) -> usize {
        self.0.len()
    }

    fn predict_x0(&self, _x_t: &[f32], t: &[usize], _sc: &[f32], _cond: &Conditioning) -> Vec<f32> {
        self.0.repeat(t.len())
    }
}

fn small_denoiser(seed: u64) -> Denoiser<f32> {
    Denoiser::new(
        DenoiserConfig {
            hidden: 16,
            ..DenoiserConfig::default()
        },
        seed,
    )
}

proptest! {
    #[test]
    fn schedule_identities(t in 2usize..600) {
        let s = NoiseSchedule::cosine(t);
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert_eq!(s.values().len(), t + 1);
        prop_assert!(s.values().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.values().iter().all(|a| *a > 0.0 && *a <= 1.0));
    }

    #[test]
    fn forward_noise_at_zero_is_identity(data in prop::collection::vec(-1.0f32..1.0, 16), seed in any::<u64>()) {
        let x0 = VideoPlan::from_model(1, data.repeat(FRAME_PIXELS / 16));
        let eps = standard_normal(x0.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let out = forward_noise(&NoiseSchedule::cosine(100), &x0, 0, &eps);
        prop_assert!(out.data().iter().zip(x0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn oracle_ddim_tracks_the_noising_trajectory(seed in any::<u64>(), stride in 1usize..20) {
        let s = NoiseSchedule::cosine(100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = VideoPlan::from_model(2, standard_normal(2 * FRAME_PIXELS, &mut rng));
        let eps = standard_normal(x0.len(), &mut rng);
        let oracle = Oracle(x0.data().to_vec());
        let mut cond = Conditioning::default();
        cond.push(&x0.data()[..FRAME_PIXELS], 0, Feedback::None);
        let mut x = forward_noise(&s, &x0, 100, &eps);
        let path = videoagent_core::sampler::timestep_path(100, stride);
        for w in path.windows(2) {
            let (next, _) = ddim_step(&oracle, &s, &x, w[0], w[1], &x0, &cond, 0.0, &mut rng).unwrap();
            let want = forward_noise(&s, &x0, w[1], &eps);
            let err = next.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            prop_assert!(err < 1e-5, "t {} -> {}: {err}", w[0], w[1]);
            x = next;
        }
    }

    #[test]
    fn pair_term_vanishes_for_identical_samples(w in prop::array::uniform4(-1.0f64..1.0), seed in any::<u64>()) {
        let net = ToyNet::<f64>::new(w);
        let s = NoiseSchedule::cosine(50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * FRAME_PIXELS;
        let x0: Vec<f64> = standard_normal(2 * d, &mut rng).into_iter().map(f64::from).collect();
        let xhat: Vec<f64> = standard_normal(2 * d, &mut rng).into_iter().map(f64::from).collect();
        let mut cond = Conditioning::default();
        for r in 0..2 {
            cond.push(&vec![0.25; FRAME_PIXELS], r, Feedback::None);
        }
        let t = |v: Vec<f64>| Tensor::new(vec![2, d], v).unwrap();
        let batch = ScBatch { x0: t(x0), xhat1: t(xhat.clone()), xhat2: t(xhat), cond, anchor: ScAnchor::GroundTruth };
        let noise = NoiseDraw::<f64>::sample(2, d, 50, &mut rng);
        let mut g = Graph::new();
        let vars = net.params.register(&mut g);
        let loss = loss_sc_consistency(&mut g, &net, &vars, &s, &batch, &noise, 0.1, None).unwrap();
        prop_assert!(g.value(loss.pair).item().abs() < 1e-12);
        let target = sc_pair_target(&net, &s, &batch, &noise).unwrap();
        let mut g2 = Graph::new();
        let vars2 = net.params.register(&mut g2);
        let again = loss_sc_consistency(&mut g2, &net, &vars2, &s, &batch, &noise, 0.1, Some(&target)).unwrap();
        prop_assert_eq!(g.value(loss.total).item(), g2.value(again.total).item());
    }
}

#[test]
fn generation_is_deterministic_and_pins_the_first_frame() {
    let model = small_denoiser(3);
    let s = NoiseSchedule::cosine(100);
    let cfg = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let requests: Vec<PlanRequest> = (0..4)
        .map(|i| PlanRequest {
            first: render(&reset(TASKS[i], i as u64)).to_model(),
            task: i,
            seed: 17 + i as u64,
        })
        .collect();
    let a = generate_plans(&model, &s, &cfg, &requests);
    let b = generate_plans(&model, &s, &cfg, &requests);
    for ((pa, pb), r) in a.iter().zip(&b).zip(&requests) {
        assert!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(pa.frame(0).iter().zip(&r.first).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let alone = generate_plans(&model, &s, &cfg, &requests[2..3]);
    assert_eq!(alone[0], a[2], "batching must not change a plan");
}

struct Scripted(std::sync::Mutex<Vec<bool>>);

impl Critic for Scripted {
    fn evaluate(&self, _plan: &VideoPlan, _task: Task) -> Verdict {
        let mut v = self.0.lock().unwrap();
        let accept = if v.len() > 1 { v.remove(0) } else { v[0] };
        Verdict::new(accept, CriticSource::Fixed)
    }
}

#[test]
fn refinement_loop_respects_query_budget_and_stops_on_accept() {
    let model = small_denoiser(5);
    let s = NoiseSchedule::cosine(100);
    let cfg = SamplerConfig {
        steps: 10,
        max_refine_iterations: 5,
        ..SamplerConfig::default()
    };
    let first = render(&reset(TASKS[0], 0)).to_model();
    let plan = generate_plans(
        &model,
        &s,
        &cfg,
        &[PlanRequest {
            first: first.clone(),
            task: 0,
            seed: 1,
        }],
    )
    .remove(0);
    let never = refine_until_accept(&model, &s, &cfg, &ConstantCritic(false), FeedbackMode::Binary, &plan, &first, TASKS[0], 1);
    assert_eq!(never.history.len(), 6);
    assert_eq!(never.iterates.len(), 6);
    assert!(!never.accepted);
    let scripted = Scripted(std::sync::Mutex::new(vec![false, false, true]));
    let out = refine_until_accept(&model, &s, &cfg, &scripted, FeedbackMode::None, &plan, &first, TASKS[0], 1);
    assert!(out.accepted);
    assert_eq!(out.iterations, 2);
    assert_eq!(out.history.len(), 3);
    for p in &out.iterates {
        assert_eq!(p.frame(0), first.as_slice());
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data: Vec<TrainExample> = generate_demos(2, 0, 8)
        .unwrap()
        .iter()
        .map(TrainExample::from_record)
        .collect();
    let cfg = TrainConfig {
        hidden: 16,
        batch: 4,
        replay_every: 2,
        replay_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(cfg.clone());
        let log = t.train(&data, None, 5).unwrap();
        (log, t.model.params.clone())
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la, lb);
    for ((_, a), (_, b)) in pa.iter().zip(pb.iter()) {
        assert_eq!(a, b);
    }
}
