//! The closed loop: plan, refine under a critic, execute, replan; plus
//! evaluation and success-filtered online data collection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use crate::action::execute_plan;
use crate::critic::{decode_frame, Cell, Critic};
use crate::diffusion::{Denoiser, FeedbackMode, NoiseSchedule, TrainError, TrainExample, Trainer};
use crate::gridworld::{
    render, reset, shortest_solutions, subsample_video, DemoRecord, GridState, Task, Trajectory, MAX_STEPS,
    PLAN_FRAMES, TASKS,
};
use crate::sampler::{generate_plans, refine_until_accept_batch, GateRequest, PlanRequest, SamplerConfig};
use crate::video::VideoPlan;

/// Where plans come from.
#[derive(Clone, Copy)]
pub enum Planner<'a> {
    Model {
        denoiser: &'a Denoiser<f32>,
        schedule: &'a NoiseSchedule,
    },
    /// Renders a shortest expert solution from the current state. Skips the
    /// critic entirely.
    Expert,
}

impl<'a> Planner<'a> {
    pub fn model(denoiser: &'a Denoiser<f32>, schedule: &'a NoiseSchedule) -> Self {
        Planner::Model { denoiser, schedule }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub sampler: SamplerConfig,
    pub feedback_mode: FeedbackMode,
    /// Generate/refine/execute cycles per episode, at least 1.
    pub max_replans: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            feedback_mode: FeedbackMode::None,
            max_replans: 2,
        }
    }
}

/// One generate/refine/execute cycle.
#[derive(Clone, Debug)]
pub struct CycleLog {
    pub start: GridState,
    pub plan: VideoPlan,
    pub plan_seed: u64,
    pub refine_iterations: usize,
    pub critic_accepted: bool,
    pub critic_queries: usize,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub task: usize,
    pub seed: u64,
    pub success: bool,
    pub cycles: Vec<CycleLog>,
}

/// Seed of the plan generated in `cycle` of the episode `(task, seed)`.
pub fn plan_seed(task: usize, seed: u64, cycle: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((task as u64) << 40)
        .wrapping_add(cycle as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Video of a shortest solution from `state`, `frames` long.
pub fn expert_plan(state: &GridState, frames: usize) -> VideoPlan {
    let path = shortest_solutions(state).into_iter().next().unwrap_or_default();
    subsample_video(&Trajectory::rollout(*state, &path), frames)
}

struct Proposal {
    plan: VideoPlan,
    refine_iterations: usize,
    accepted: bool,
    queries: usize,
}

fn propose(
    planner: Planner,
    critic: &dyn Critic,
    cfg: &AgentConfig,
    jobs: &[(GridState, u64)],
) -> Vec<Proposal> {
    match planner {
        Planner::Expert => jobs
            .iter()
            .map(|(s, _)| Proposal {
                plan: expert_plan(s, PLAN_FRAMES),
                refine_iterations: 0,
                accepted: true,
                queries: 0,
            })
            .collect(),
        Planner::Model { denoiser, schedule } => {
            let requests: Vec<PlanRequest> = jobs
                .iter()
                .map(|(s, seed)| PlanRequest {
                    first: render(s).to_model(),
                    task: s.task,
                    seed: *seed,
                })
                .collect();
            let plans = generate_plans(denoiser, schedule, &cfg.sampler, &requests);
            let gates: Vec<GateRequest> = plans
                .into_iter()
                .zip(requests)
                .map(|(plan, r)| GateRequest {
                    plan,
                    first: r.first,
                    task: r.task,
                    seed: r.seed,
                })
                .collect();
            refine_until_accept_batch(denoiser, schedule, &cfg.sampler, critic, cfg.feedback_mode, &gates)
                .into_iter()
                .map(|o| Proposal {
                    queries: o.history.len(),
                    plan: o.plan,
                    refine_iterations: o.iterations,
                    accepted: o.accepted,
                })
                .collect()
        }
    }
}

/// Runs many episodes in lockstep so each cycle batches plan generation.
/// Results come back in input order.
pub fn run_episodes(
    planner: Planner,
    critic: &dyn Critic,
    cfg: &AgentConfig,
    episodes: &[(usize, u64)],
) -> Vec<EpisodeLog> {
    let mut logs: Vec<EpisodeLog> = episodes
        .iter()
        .map(|&(task, seed)| EpisodeLog {
            task,
            seed,
            success: false,
            cycles: Vec::new(),
        })
        .collect();
    let mut states: Vec<GridState> = episodes
        .iter()
        .map(|&(task, seed)| reset(TASKS[task], seed))
        .collect();
    let mut active: Vec<usize> = (0..episodes.len()).collect();
    for cycle in 0..cfg.max_replans.max(1) {
        if active.is_empty() {
            break;
        }
        let jobs: Vec<(GridState, u64)> = active
            .iter()
            .map(|&k| (states[k], plan_seed(episodes[k].0, episodes[k].1, cycle)))
            .collect();
        let proposals = propose(planner, critic, cfg, &jobs);
        let mut still = Vec::new();
        for ((&k, (start, seed)), p) in active.iter().zip(jobs).zip(proposals) {
            let trajectory = execute_plan(&start, &p.plan);
            let end = trajectory.final_state();
            let success = trajectory.reward == 1;
            logs[k].cycles.push(CycleLog {
                start,
                plan: p.plan,
                plan_seed: seed,
                refine_iterations: p.refine_iterations,
                critic_accepted: p.accepted,
                critic_queries: p.queries,
                trajectory,
            });
            logs[k].success = success;
            states[k] = end;
            if !success && !end.is_terminal() {
                still.push(k);
            }
        }
        active = still;
    }
    logs
}

pub fn run_episode(planner: Planner, critic: &dyn Critic, cfg: &AgentConfig, task: Task, seed: u64) -> EpisodeLog {
    run_episodes(planner, critic, cfg, &[(task.id, seed)]).remove(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub task: usize,
    pub seed: u64,
    pub success: bool,
    pub cycles: usize,
    pub critic_queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(task id, success rate)` for each evaluated task.
    pub per_task: Vec<(usize, f64)>,
    pub overall: f64,
    pub outcomes: Vec<EpisodeOutcome>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_logs(logs: &[EpisodeLog], fingerprint: &str) -> Self {
        let outcomes: Vec<EpisodeOutcome> = logs
            .iter()
            .map(|l| EpisodeOutcome {
                task: l.task,
                seed: l.seed,
                success: l.success,
                cycles: l.cycles.len(),
                critic_queries: l.cycles.iter().map(|c| c.critic_queries).sum(),
            })
            .collect();
        let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for o in &outcomes {
            let e = tally.entry(o.task).or_default();
            e.0 += o.success as usize;
            e.1 += 1;
        }
        let per_task: Vec<(usize, f64)> = tally
            .into_iter()
            .map(|(t, (s, n))| (t, s as f64 / n as f64))
            .collect();
        let overall = if per_task.is_empty() {
            0.0
        } else {
            per_task.iter().map(|(_, r)| r).sum::<f64>() / per_task.len() as f64
        };
        Self {
            per_task,
            overall,
            outcomes,
            fingerprint: fingerprint.to_string(),
        }
    }

    /// Per-episode rows preceded by a `#` line carrying the config fingerprint.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# config_fingerprint={}", self.fingerprint)?;
        writeln!(w, "task,seed,success,cycles,critic_queries")?;
        for o in &self.outcomes {
            writeln!(
                w,
                "{},{},{},{},{}",
                o.task, o.seed, o.success as u8, o.cycles, o.critic_queries
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>8}", "task", "success");
        for (t, r) in &self.per_task {
            let _ = writeln!(s, "{:<40} {:>7.1}%", TASKS[*t].text(), 100.0 * r);
        }
        let _ = writeln!(s, "{:<40} {:>7.1}%", "overall", 100.0 * self.overall);
        s
    }
}

/// Seeds `seed_offset..seed_offset + n_seeds` for every task in `tasks`.
pub fn eval_episodes(tasks: &[usize], n_seeds: usize, seed_offset: u64) -> Vec<(usize, u64)> {
    tasks
        .iter()
        .flat_map(|&t| (0..n_seeds as u64).map(move |s| (t, seed_offset + s)))
        .collect()
}

pub fn evaluate(
    planner: Planner,
    critic: &dyn Critic,
    cfg: &AgentConfig,
    tasks: &[usize],
    n_seeds: usize,
    seed_offset: u64,
    fingerprint: &str,
) -> EvalReport {
    let logs = run_episodes(planner, critic, cfg, &eval_episodes(tasks, n_seeds, seed_offset));
    EvalReport::from_logs(&logs, fingerprint)
}

/// What a collected entry stores as its video.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StoredVideo {
    /// The refined plan that led to success.
    #[default]
    Plan,
    /// The executed environment renders, subsampled to the plan length.
    Renders,
}

impl std::fmt::Display for StoredVideo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StoredVideo::Plan => "plan",
            StoredVideo::Renders => "renders",
        })
    }
}

impl std::str::FromStr for StoredVideo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plan" => Ok(StoredVideo::Plan),
            "renders" => Ok(StoredVideo::Renders),
            other => Err(format!("unknown stored video {other:?}, expected plan or renders")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectConfig {
    pub cap: usize,
    /// Seeds tried per task, as a multiple of `cap`.
    pub budget_factor: usize,
    pub seed_offset: u64,
    pub store: StoredVideo,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            cap: 15,
            budget_factor: 10,
            seed_offset: 1_000_000,
            store: StoredVideo::Plan,
        }
    }
}

/// Start state shown in a stored video's first frame.
fn state_from_frame(task: usize, plan: &VideoPlan) -> Option<GridState> {
    let d = decode_frame(&plan.frame_image(0)).ok()?;
    let agent = d.unique(Cell::Agent)?;
    let block = d.unique(Cell::Block)?;
    Some(GridState {
        task,
        agent,
        block,
        goal: TASKS[task].goal,
        step_count: 0,
        max_steps: MAX_STEPS,
    })
}

/// Re-executes a stored entry from the state in its first frame using the
/// stored actions; true when that reaches the goal.
pub fn replay_verifies(rec: &DemoRecord) -> bool {
    let plan = rec.plan();
    let Some(start) = state_from_frame(rec.task, &plan) else {
        return false;
    };
    Trajectory::rollout(start, &rec.actions).reward == 1
}

/// Rolls out fresh seeds per task until `cap` successes or the seed budget
/// runs out. Only replay-verified successes are kept.
pub fn collect_online_dataset(
    planner: Planner,
    critic: &dyn Critic,
    cfg: &AgentConfig,
    collect: &CollectConfig,
    tasks: &[usize],
) -> Vec<DemoRecord> {
    let mut out = Vec::new();
    let budget = collect.cap * collect.budget_factor.max(1);
    for &task in tasks {
        let mut kept = 0;
        let mut next = 0;
        while kept < collect.cap && next < budget {
            let chunk = (collect.cap - kept).max(8).min(budget - next);
            let episodes: Vec<(usize, u64)> = (next..next + chunk)
                .map(|s| (task, collect.seed_offset + s as u64))
                .collect();
            next += chunk;
            for log in run_episodes(planner, critic, cfg, &episodes) {
                if kept == collect.cap || !log.success {
                    continue;
                }
                let last = log.cycles.last().expect("successful episode has a cycle");
                let frames = match collect.store {
                    StoredVideo::Plan => last.plan.to_frames(),
                    StoredVideo::Renders => subsample_video(&last.trajectory, last.plan.frames()).to_frames(),
                };
                let rec = DemoRecord {
                    task,
                    seed: log.seed,
                    frames,
                    actions: last.trajectory.actions.clone(),
                };
                if replay_verifies(&rec) {
                    out.push(rec);
                    kept += 1;
                } else {
                    log::warn!("task {task} seed {} succeeded but failed replay, dropped", log.seed);
                }
            }
        }
        if kept == 0 {
            log::warn!("task {task}: no successes within {budget} seeds");
        }
    }
    out
}

/// Dataset and bookkeeping carried across online iterations.
#[derive(Clone, Debug, Default)]
pub struct OnlineState {
    pub iteration: usize,
    pub dataset: Vec<DemoRecord>,
    /// Per-iteration collected counts, indexed by task id.
    pub collected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineConfig {
    pub iters: usize,
    pub finetune_iters: usize,
    pub collect: CollectConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            iters: 2,
            finetune_iters: 1000,
            collect: CollectConfig::default(),
        }
    }
}

/// Collects with the EMA parameters, grows the dataset, and continues
/// training on all of it.
pub fn online_iteration(
    mut state: OnlineState,
    trainer: &mut Trainer,
    critic: &dyn Critic,
    agent: &AgentConfig,
    online: &OnlineConfig,
) -> Result<OnlineState, TrainError> {
    let snapshot = trainer.ema_model();
    let collect = CollectConfig {
        seed_offset: online.collect.seed_offset + (state.iteration as u64) * 100_000,
        ..online.collect.clone()
    };
    let new = collect_online_dataset(
        Planner::model(&snapshot, &trainer.schedule),
        critic,
        agent,
        &collect,
        &(0..TASKS.len()).collect::<Vec<_>>(),
    );
    let mut counts = vec![0; TASKS.len()];
    for r in &new {
        counts[r.task] += 1;
    }
    if new.is_empty() {
        log::warn!("online iteration {}: nothing collected, finetuning on the existing data", state.iteration);
    }
    state.dataset.extend(new);
    state.collected.push(counts);
    let data: Vec<TrainExample> = state.dataset.iter().map(TrainExample::from_record).collect();
    trainer.train(&data, Some(critic), online.finetune_iters)?;
    state.iteration += 1;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{ConstantCritic, OracleCritic};

    #[test]
    fn expert_planner_solves_every_task_first_cycle() {
        let cfg = AgentConfig::default();
        let r = evaluate(Planner::Expert, &OracleCritic, &cfg, &[0, 1, 2, 3], 10, 0, "x");
        assert_eq!(r.overall, 1.0);
        assert!(r.outcomes.iter().all(|o| o.cycles == 1 && o.critic_queries == 0));
    }

    #[test]
    fn untrained_model_fails() {
        let den = Denoiser::<f32>::new(Default::default(), 0);
        let sched = NoiseSchedule::cosine(100);
        let cfg = AgentConfig {
            sampler: SamplerConfig {
                steps: 5,
                max_refine_iterations: 0,
                ..SamplerConfig::default()
            },
            ..AgentConfig::default()
        };
        let r = evaluate(Planner::model(&den, &sched), &ConstantCritic(true), &cfg, &[0, 1], 5, 0, "x");
        assert_eq!(r.overall, 0.0);
    }

    #[test]
    fn expert_collection_fills_cap() {
        let collect = CollectConfig {
            cap: 3,
            ..CollectConfig::default()
        };
        let d = collect_online_dataset(Planner::Expert, &OracleCritic, &AgentConfig::default(), &collect, &[0, 2]);
        assert_eq!(d.len(), 6);
        assert!(d.iter().all(replay_verifies));
    }
}
