use std::time::Duration;

use base64::Engine;
use proptest::prelude::*;
use videoagent_core::critic::{
    build_prompt, classification_metrics, critic_accuracy, ConstantCritic, Critic, CriticConfig, CriticMode,
    EvaluateRequest, HeuristicCritic, MockCriticServer, MockPolicy, MockReply, OracleCritic, RemoteCritic,
};
use videoagent_core::diffusion::DenoiserConfig;
use videoagent_core::gridworld::{expert_demo, generate_demos, reset, subsample_video, GOAL_LEVEL, TASKS};
use videoagent_core::sampler::{refine_until_accept, SamplerConfig};
use videoagent_core::{Action, Denoiser, FeedbackMode, NoiseSchedule, Trajectory, VideoPlan};

fn expert_plan(task: usize, seed: u64) -> VideoPlan {
    subsample_video(&expert_demo(TASKS[task], seed).unwrap(), 8)
}

/// Paints the block's cell over in the last frame, as if it vanished.
fn erase_block_last_frame(plan: &VideoPlan, task: usize) -> VideoPlan {
    let mut frames = plan.to_frames();
    let last = frames.len() - 1;
    let (gr, gc) = TASKS[task].goal;
    for r in 0..2 {
        for c in 0..2 {
            frames[last].set(gr * 2 + r, gc * 2 + c, GOAL_LEVEL);
        }
    }
    VideoPlan::from_frames(&frames)
}

#[test]
fn oracle_accepts_experts_and_rejects_vanishing_blocks() {
    for task in 0..4 {
        for seed in 0..25 {
            let plan = expert_plan(task, seed);
            assert!(OracleCritic.evaluate(&plan, TASKS[task]).accept);
            assert!(!OracleCritic.evaluate(&erase_block_last_frame(&plan, task), TASKS[task]).accept);
            assert!(!OracleCritic.evaluate(&plan, TASKS[(task + 1) % 4]).accept);
        }
    }
}

proptest! {
    #[test]
    fn oracle_on_rendered_rollouts_matches_reward(
        task in 0usize..4,
        seed in 0u64..300,
        codes in prop::collection::vec(0u8..4, 1..8),
    ) {
        let actions: Vec<Action> = codes.iter().map(|c| Action::from_code(*c).unwrap()).collect();
        let traj = Trajectory::rollout(reset(TASKS[task], seed), &actions);
        let plan = VideoPlan::from_frames(&traj.renders);
        prop_assert_eq!(OracleCritic.evaluate(&plan, TASKS[task]).accept, traj.reward == 1);
    }
}

#[test]
fn heuristic_thresholds_reproduce_from_calibration() {
    let plans: Vec<VideoPlan> = generate_demos(128, 0, 8).unwrap().iter().map(|r| r.plan()).collect();
    let fitted = HeuristicCritic::calibrate(&plans, 0.95);
    assert_eq!(fitted, HeuristicCritic::default());
    let accepted = plans.iter().filter(|p| fitted.evaluate(p, TASKS[0]).accept).count();
    assert!(accepted as f64 >= 0.95 * plans.len() as f64 - 1.0);
}

#[test]
fn always_accept_on_balanced_set_has_closed_form_metrics() {
    let mut labeled = Vec::new();
    for seed in 0..10 {
        let plan = expert_plan(0, seed);
        labeled.push((erase_block_last_frame(&plan, 0), TASKS[0], false));
        labeled.push((plan, TASKS[0], true));
    }
    let m = critic_accuracy(&ConstantCritic(true), &labeled);
    assert_eq!(m.precision, Some(0.5));
    assert_eq!(m.recall, Some(1.0));
    assert_eq!(m.accuracy, 0.5);
    let oracle = critic_accuracy(&OracleCritic, &labeled);
    assert_eq!((oracle.precision, oracle.recall, oracle.accuracy), (Some(1.0), Some(1.0), 1.0));
    let none = classification_metrics(&[false, false], &[true, false]);
    assert_eq!(none.precision, None);
}

#[test]
fn weighted_prompt_differs_only_by_an_appended_clause() {
    for mode in [CriticMode::Binary, CriticMode::Suggestive] {
        let plain = CriticConfig {
            mode,
            weighted: false,
            include_examples: false,
        };
        let weighted = CriticConfig { weighted: true, ..plain };
        let a = build_prompt(TASKS[1], &plain);
        let b = build_prompt(TASKS[1], &weighted);
        let tail = b.strip_prefix(a.as_str()).expect("weighted prompt extends the plain one");
        assert!(tail.starts_with('\n') && tail.len() > 1);

        let plan = expert_plan(1, 0);
        let ra = EvaluateRequest::new(&plan, TASKS[1], &plain);
        let rb = EvaluateRequest::new(&plan, TASKS[1], &weighted);
        assert_eq!(ra.frames, rb.frames);
        assert_eq!((ra.task, ra.mode), (rb.task, rb.mode));
        assert_ne!(ra.weighted, rb.weighted);
    }
}

fn client(url: &str) -> RemoteCritic {
    RemoteCritic::new(url, CriticConfig::default(), Duration::from_secs(5))
}

#[test]
fn remote_critic_against_fixed_policies() {
    let plan = expert_plan(2, 3);
    let yes = MockCriticServer::start(0, MockPolicy::AlwaysAccept).unwrap();
    assert!(client(&yes.url()).evaluate(&plan, TASKS[2]).accept);
    let no = MockCriticServer::start(0, MockPolicy::AlwaysReject).unwrap();
    let v = client(&no.url()).evaluate(&plan, TASKS[2]);
    assert!(!v.accept && !v.transport_error);
    let req = &yes.requests()[0];
    assert_eq!(req.frames.len(), 8);
    assert_eq!(req.task, TASKS[2].text());
}

#[test]
fn scripted_replies_stop_refinement_at_iteration_two() {
    let server = MockCriticServer::start(
        0,
        MockPolicy::Scripted(vec![
            MockReply::reject(),
            MockReply::reject_with("move the agent left"),
            MockReply::accept(),
        ]),
    )
    .unwrap();
    let critic = client(&server.url());
    let model = Denoiser::<f32>::new(
        DenoiserConfig {
            hidden: 16,
            ..DenoiserConfig::default()
        },
        0,
    );
    let schedule = NoiseSchedule::cosine(100);
    let cfg = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let plan = expert_plan(0, 0);
    let first = plan.frame(0).to_vec();
    let out = refine_until_accept(&model, &schedule, &cfg, &critic, FeedbackMode::Suggestive, &plan, &first, TASKS[0], 9);
    assert!(out.accepted);
    assert_eq!(out.iterations, 2);
    assert_eq!(server.served(), 3);
    assert_eq!(out.history[1].suggestion.as_deref(), Some("move the agent left"));
}

#[test]
fn malformed_requests_get_400() {
    let server = MockCriticServer::start(0, MockPolicy::AlwaysAccept).unwrap();
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let url = format!("{}/evaluate", server.url());
    let mut req = EvaluateRequest::new(&expert_plan(0, 1), TASKS[0], &CriticConfig::default());
    req.frames[3] = "not base64 !!".into();
    let mut resp = agent.post(&url).send_json(&req).unwrap();
    assert_eq!(resp.status(), 400);
    assert!(resp.body_mut().read_to_string().unwrap().contains("base64"));

    let png_garbage = base64::engine::general_purpose::STANDARD.encode(b"hello");
    req.frames[3] = png_garbage;
    assert_eq!(agent.post(&url).send_json(&req).unwrap().status(), 400);
    assert_eq!(agent.post(&url).send("{").unwrap().status(), 400);
    assert_eq!(server.served(), 0);
}

#[test]
fn unreachable_critic_is_a_transport_failure() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let v = client(&format!("http://127.0.0.1:{port}")).evaluate(&expert_plan(0, 0), TASKS[0]);
    assert!(v.transport_error && !v.accept);
}
