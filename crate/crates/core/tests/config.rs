use proptest::prelude::*;
use videoagent_core::agent::StoredVideo;
use videoagent_core::config::CriticKind;
use videoagent_core::critic::CriticMode;
use videoagent_core::diffusion::ScAnchor;
use videoagent_core::{ExperimentConfig, FeedbackMode};

fn feedback() -> impl Strategy<Value = FeedbackMode> {
    prop_oneof![
        Just(FeedbackMode::None),
        Just(FeedbackMode::Binary),
        Just(FeedbackMode::Suggestive)
    ]
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (1usize..100, any::<u64>(), 2usize..1000, 2usize..12, 1usize..512),
        (0.0f64..10.0, 0.0f64..1.0, 1e-6f64..1e-1, 0.0f64..0.99, 0.9f64..1.0),
        (1usize..64, any::<u64>(), feedback(), any::<bool>()),
        (1usize..50, 0.0f64..=1.0, 0.01f64..=1.0, 0usize..10, any::<bool>()),
        (
            prop_oneof![
                Just(CriticKind::Oracle),
                Just(CriticKind::Heuristic),
                Just(CriticKind::Remote),
                Just(CriticKind::AlwaysAccept),
                Just(CriticKind::AlwaysReject)
            ],
            "[a-z]{1,8}",
            0.5f64..100.0,
            any::<bool>(),
            any::<f32>().prop_filter("finite", |v| v.is_finite() && *v > 0.0),
        ),
        (feedback(), 1usize..5, 0usize..5, 1usize..30, prop::sample::subsequence(vec![0usize, 1, 2, 3], 1..=4)),
    )
        .prop_map(|(d, o, m, s, c, e)| {
            let mut cfg = ExperimentConfig::default();
            cfg.data.demos_per_task = d.0;
            cfg.data.seed_offset = d.1;
            cfg.train.timesteps = d.2;
            cfg.train.frames = d.3;
            cfg.train.hidden = d.4;
            cfg.train.lambda = o.0;
            cfg.train.mu = o.1;
            cfg.train.lr = o.2;
            cfg.train.momentum = o.3;
            cfg.train.ema_decay = o.4;
            cfg.train.batch = m.0;
            cfg.train.seed = m.1;
            cfg.train.feedback_mode = m.2;
            cfg.train.sc_anchor = if m.3 { ScAnchor::Sample } else { ScAnchor::GroundTruth };
            cfg.sampler.steps = s.0.min(cfg.train.timesteps);
            cfg.sampler.sigma_scale = s.1;
            cfg.sampler.refine_noise_level = s.2;
            cfg.sampler.max_refine_iterations = s.3;
            cfg.sampler.clip_x0 = s.4;
            cfg.critic.kind = c.0;
            cfg.critic.endpoint = format!("http://{}.local:9000", c.1);
            cfg.critic.timeout_secs = c.2;
            cfg.critic.remote.mode = if c.3 { CriticMode::Suggestive } else { CriticMode::Binary };
            cfg.critic.heuristic.tau_smooth = c.4;
            cfg.agent_feedback = e.0;
            cfg.max_replans = e.1;
            cfg.online.iters = e.2;
            cfg.online.collect.cap = e.3;
            cfg.online.collect.store = if e.3 % 2 == 0 { StoredVideo::Plan } else { StoredVideo::Renders };
            cfg.eval.tasks = e.4;
            cfg
        })
}

proptest! {
    #[test]
    fn parse_inverts_serialize(cfg in config()) {
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.serialize(), text);
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}

#[test]
fn fingerprint_changes_with_any_field() {
    let base = ExperimentConfig::default();
    let mut other = base.clone();
    other.sampler.sigma_scale = 0.25;
    assert_ne!(base.fingerprint(), other.fingerprint());
    assert_eq!(base.fingerprint().len(), 16);
}

#[test]
fn load_rejects_invalid_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "[sampler]\nsteps = 0\n").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
    std::fs::write(&path, "[sampler]\nbogus = 1\n").unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}
