use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;
use videoagent_core::agent::{
    collect_online_dataset, evaluate, online_iteration, OnlineState, Planner, StoredVideo,
};
use videoagent_core::config::{ConfigError, CriticKind, CriticSettings, ExperimentConfig};
use videoagent_core::critic::{
    ConstantCritic, Critic, MockCriticServer, MockPolicy, MockReply, OracleCritic, RemoteCritic,
};
use videoagent_core::diffusion::{
    load_checkpoint, Checkpoint, LossRecord, TrainError, TrainExample, Trainer,
};
use videoagent_core::export::{write_plan_gif, ExportError};
use videoagent_core::gridworld::{
    generate_demos, read_dataset, render, reset, write_dataset, DemoRecord, GridError,
};
use videoagent_core::sampler::{generate_plan, refine_once, refine_seed};
use videoagent_core::{EvalReport, NoiseSchedule, Task, VideoPlan};

const CRITIC_URL_VAR: &str = "VIDEOAGENT_CRITIC_URL";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] GridError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{0}")]
    Train(TrainError),
    #[error("numerical failure at iteration {iteration}; last good checkpoint kept at {}", checkpoint.display())]
    NonFinite {
        iteration: usize,
        checkpoint: PathBuf,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::NonFinite { .. } => 3,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Train, evaluate and inspect video-plan agents on the box-pushing grid-world.
#[derive(Parser)]
#[command(name = "videoagent", version)]
struct Cli {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write expert demonstrations as a VADT dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_task: Option<usize>,
        /// First reset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the video denoiser on a dataset.
    Train(TrainArgs),
    /// Run evaluation episodes and report success rates.
    Eval {
        #[command(flatten)]
        planner: PlannerArgs,
        #[command(flatten)]
        episodes: EpisodeArgs,
        /// CSV destination; defaults to eval.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one plan and refine it repeatedly, writing a GIF per iteration.
    Refine(RefineArgs),
    /// Alternate success-filtered collection and finetuning.
    Online(OnlineArgs),
    /// Roll out fresh seeds and keep verified successes as a VADT dataset.
    Collect(CollectArgs),
    /// Convert every record of a VADT file to an animated GIF.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve a stub critic on 127.0.0.1 until interrupted.
    MockCritic {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        /// accept, reject, or script:<reply>,<reply>,... where a reply is
        /// accept, reject or reject=<suggestion>.
        #[arg(long, default_value = "accept", value_parser = parse_policy)]
        policy: MockPolicy,
    },
}

#[derive(Args)]
struct PlannerArgs {
    #[arg(long, required_unless_present = "expert")]
    checkpoint: Option<PathBuf>,
    /// Plan with rendered expert solutions instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    expert: bool,
    /// Use the raw parameters even when the checkpoint holds an average.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EpisodeArgs {
    /// Comma-separated task ids or "all".
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_offset: Option<u64>,
    /// Generate/refine/execute cycles per episode.
    #[arg(long)]
    replans: Option<usize>,
}

fn parse_policy(s: &str) -> Result<MockPolicy, String> {
    match s {
        "accept" => Ok(MockPolicy::AlwaysAccept),
        "reject" => Ok(MockPolicy::AlwaysReject),
        _ => {
            let list = s.strip_prefix("script:").ok_or_else(|| {
                format!("unknown policy {s:?}, expected accept, reject or script:...")
            })?;
            let replies = list
                .split(',')
                .map(|item| match item.trim().split_once('=') {
                    Some(("reject", text)) => Ok(MockReply::reject_with(text)),
                    None if item.trim() == "accept" => Ok(MockReply::accept()),
                    None if item.trim() == "reject" => Ok(MockReply::reject()),
                    _ => Err(format!("bad scripted reply {item:?}")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(MockPolicy::Scripted(replies))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) if !p.exists() => {
            return Err(CliError::Usage(format!(
                "config file {} not found",
                p.display()
            )))
        }
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(url) = std::env::var(CRITIC_URL_VAR) {
        if !url.trim().is_empty() {
            cfg.critic.endpoint = url.trim().to_string();
        }
    }
    Ok(cfg)
}

/// Validates the effective config and logs its fingerprint.
fn finalize(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let fp = cfg.fingerprint();
    log::info!("config fingerprint {fp}");
    Ok(fp)
}

fn make_critic(settings: &CriticSettings) -> Box<dyn Critic> {
    match settings.kind {
        CriticKind::Oracle => Box::new(OracleCritic),
        CriticKind::Heuristic => Box::new(settings.heuristic),
        CriticKind::AlwaysAccept => Box::new(ConstantCritic(true)),
        CriticKind::AlwaysReject => Box::new(ConstantCritic(false)),
        CriticKind::Remote => {
            log::info!("remote critic at {}", settings.endpoint);
            Box::new(RemoteCritic::new(
                &settings.endpoint,
                settings.remote.clone(),
                Duration::from_secs_f64(settings.timeout_secs),
            ))
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn read_data(path: &Path) -> Result<Vec<DemoRecord>> {
    require(path, "dataset")?;
    let file = File::open(path).map_err(io_err(path))?;
    let (_, records) = read_dataset(BufReader::new(file))?;
    if records.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset {} is empty",
            path.display()
        )));
    }
    Ok(records)
}

fn write_data(path: &Path, records: &[DemoRecord]) -> Result<()> {
    let mut w = create_file(path)?;
    write_dataset(
        &mut w,
        videoagent_core::gridworld::TASKS.len() as u32,
        records,
    )?;
    w.flush().map_err(io_err(path))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create_file(path)?;
    report.write_csv(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn cmd_gen_data(
    mut cfg: ExperimentConfig,
    out: &Path,
    per_task: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(n) = per_task {
        cfg.data.demos_per_task = n;
    }
    if let Some(s) = seed {
        cfg.data.seed_offset = s;
    }
    finalize(&cfg)?;
    let records = generate_demos(
        cfg.data.demos_per_task,
        cfg.data.seed_offset,
        cfg.train.frames,
    )?;
    write_data(out, &records)?;
    log::info!(
        "wrote {} demonstrations to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    checkpoint_every: usize,
}

fn cmd_train(mut cfg: ExperimentConfig, args: TrainArgs) -> Result<()> {
    if let Some(n) = args.iters {
        cfg.train.iters = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    finalize(&cfg)?;
    let records = read_data(&args.data)?;
    let out_dir = args.out_dir.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out_dir)?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(cfg.train.clone(), read_checkpoint(p)?),
        None => Trainer::new(cfg.train.clone()),
    };
    let data: Vec<TrainExample> = records.iter().map(TrainExample::from_record).collect();
    let critic = (cfg.train.feedback_mode != videoagent_core::FeedbackMode::None)
        .then(|| make_critic(&cfg.critic));
    let ckpt = out_dir.join("model.vagt");
    let loss_path = out_dir.join("loss.csv");
    let mut log_w = create_file(&loss_path)?;
    writeln!(log_w, "{}", LossRecord::CSV_HEADER).map_err(io_err(&loss_path))?;
    let every = args.checkpoint_every.max(1);
    for k in 0..cfg.train.iters {
        let rec = match trainer.train_iteration(&data, critic.as_deref()) {
            Ok(r) => r,
            Err(TrainError::NonFinite { iteration }) => {
                log_w.flush().map_err(io_err(&loss_path))?;
                return Err(CliError::NonFinite {
                    iteration,
                    checkpoint: ckpt,
                });
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(log_w, "{}", rec.csv_row()).map_err(io_err(&loss_path))?;
        if (k + 1) % every == 0 {
            trainer.save(&ckpt)?;
            log_w.flush().map_err(io_err(&loss_path))?;
            log::info!(
                "iteration {}: L_vd {:.4} L_sc {:.4}",
                trainer.iteration,
                rec.video_diffusion,
                rec.sc
            );
        }
    }
    trainer.save(&ckpt)?;
    log_w.flush().map_err(io_err(&loss_path))?;
    log::info!(
        "saved {} after {} iterations",
        ckpt.display(),
        trainer.iteration
    );
    Ok(())
}

/// Owns whatever a [`Planner`] borrows.
struct LoadedPlanner {
    model: Option<videoagent_core::Denoiser<f32>>,
    schedule: NoiseSchedule,
}

impl LoadedPlanner {
    fn load(args: &PlannerArgs, cfg: &ExperimentConfig) -> Result<Self> {
        let model = match (&args.checkpoint, args.expert) {
            (_, true) => None,
            (Some(p), false) => {
                let ck = read_checkpoint(p)?;
                Some(if args.raw {
                    ck.model
                } else {
                    ck.inference_model().clone()
                })
            }
            (None, false) => {
                return Err(CliError::Usage(
                    "--checkpoint or --expert is required".into(),
                ))
            }
        };
        let timesteps = model
            .as_ref()
            .map_or(cfg.train.timesteps, |m| m.config.timesteps);
        Ok(Self {
            model,
            schedule: NoiseSchedule::cosine(timesteps),
        })
    }

    fn planner(&self) -> Planner<'_> {
        match &self.model {
            Some(m) => Planner::model(m, &self.schedule),
            None => Planner::Expert,
        }
    }
}

fn parse_task_list(s: &str) -> Result<Vec<usize>> {
    if s == "all" {
        return Ok((0..videoagent_core::gridworld::TASKS.len()).collect());
    }
    s.split(',')
        .map(|t| {
            let id: usize = t
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad task id {t:?}")))?;
            Task::get(id)
                .map(|_| id)
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn cmd_eval(
    mut cfg: ExperimentConfig,
    planner: PlannerArgs,
    ep: EpisodeArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(t) = &ep.tasks {
        cfg.eval.tasks = parse_task_list(t)?;
    }
    if let Some(n) = ep.seeds {
        cfg.eval.seeds = n;
    }
    if let Some(o) = ep.seed_offset {
        cfg.eval.seed_offset = o;
    }
    if let Some(r) = ep.replans {
        cfg.max_replans = r;
    }
    let fp = finalize(&cfg)?;
    let loaded = LoadedPlanner::load(&planner, &cfg)?;
    let critic = make_critic(&cfg.critic);
    let report = evaluate(
        loaded.planner(),
        critic.as_ref(),
        &cfg.agent(),
        &cfg.eval.tasks,
        cfg.eval.seeds,
        cfg.eval.seed_offset,
        &fp,
    );
    let out = out.unwrap_or_else(|| cfg.output_dir.join("eval.csv"));
    write_report(&out, &report)?;
    print!("{}", report.summary());
    log::info!("wrote {}", out.display());
    Ok(())
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    task: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    refine_iters: Option<usize>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_refine(mut cfg: ExperimentConfig, args: RefineArgs) -> Result<()> {
    if let Some(n) = args.refine_iters {
        cfg.sampler.max_refine_iterations = n;
    }
    if let Some(l) = args.noise_level {
        cfg.sampler.refine_noise_level = l;
    }
    finalize(&cfg)?;
    let task = Task::get(args.task).map_err(|e| CliError::Usage(e.to_string()))?;
    let ck = read_checkpoint(&args.checkpoint)?;
    let model = ck.inference_model();
    let schedule = NoiseSchedule::cosine(model.config.timesteps);
    cfg.sampler
        .validate(schedule.timesteps())
        .map_err(|e| CliError::Usage(format!("sampler: {e}")))?;
    let critic = make_critic(&cfg.critic);
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| cfg.output_dir.join("refine"));
    create_dir(&out_dir)?;

    let first = render(&reset(task, args.seed)).to_model();
    let mut plan = generate_plan(model, &schedule, &cfg.sampler, &first, task, args.seed);
    let mut iterates: Vec<VideoPlan> = Vec::new();
    for i in 0..=cfg.sampler.max_refine_iterations {
        let path = out_dir.join(format!("iter_{i}.gif"));
        write_plan_gif(create_file(&path)?, &plan)?;
        let verdict = critic.evaluate(&plan, task);
        log::info!(
            "iteration {i}: {}{}",
            if verdict.accept { "accept" } else { "reject" },
            verdict
                .suggestion
                .as_deref()
                .map(|s| format!(" ({s})"))
                .unwrap_or_default()
        );
        iterates.push(plan.clone());
        if i < cfg.sampler.max_refine_iterations {
            let fb = videoagent_core::critic::make_feedback(&verdict, cfg.agent_feedback);
            plan = refine_once(
                model,
                &schedule,
                &cfg.sampler,
                &plan,
                &first,
                task,
                fb,
                refine_seed(args.seed, i),
            );
        }
    }
    let records: Vec<DemoRecord> = iterates
        .iter()
        .map(|p| DemoRecord {
            task: task.id,
            seed: args.seed,
            frames: p.to_frames(),
            actions: Vec::new(),
        })
        .collect();
    write_data(&out_dir.join("iterates.vadt"), &records)?;
    log::info!(
        "wrote {} iterations to {}",
        iterates.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct OnlineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Initial demonstrations.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Successes kept per task and iteration.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_online(mut cfg: ExperimentConfig, args: OnlineArgs) -> Result<()> {
    if let Some(n) = args.iters {
        cfg.online.iters = n;
    }
    if let Some(c) = args.cap {
        cfg.online.collect.cap = c;
    }
    let fp = finalize(&cfg)?;
    let ck = read_checkpoint(&args.checkpoint)?;
    let dataset = read_data(&args.data)?;
    let out_dir = args
        .out_dir
        .unwrap_or_else(|| cfg.output_dir.join("online"));
    create_dir(&out_dir)?;
    let critic = make_critic(&cfg.critic);
    let agent = cfg.agent();
    let mut trainer = Trainer::resume(cfg.train.clone(), ck);
    let eval = |trainer: &Trainer| {
        let model = trainer.ema_model();
        evaluate(
            Planner::model(&model, &trainer.schedule),
            critic.as_ref(),
            &agent,
            &cfg.eval.tasks,
            cfg.eval.seeds,
            cfg.eval.seed_offset,
            &fp,
        )
    };
    let before = eval(&trainer);
    write_report(&out_dir.join("eval_iter0.csv"), &before)?;
    println!("iteration 0\n{}", before.summary());
    let mut state = OnlineState {
        dataset,
        ..OnlineState::default()
    };
    for k in 1..=cfg.online.iters {
        let ckpt = out_dir.join(format!("model_iter{k}.vagt"));
        state = match online_iteration(state, &mut trainer, critic.as_ref(), &agent, &cfg.online) {
            Ok(s) => s,
            Err(TrainError::NonFinite { iteration }) => {
                return Err(CliError::NonFinite {
                    iteration,
                    checkpoint: if k == 1 {
                        args.checkpoint.clone()
                    } else {
                        out_dir.join(format!("model_iter{}.vagt", k - 1))
                    },
                })
            }
            Err(e) => return Err(e.into()),
        };
        let counts = state.collected.last().cloned().unwrap_or_default();
        log::info!(
            "iteration {k}: collected {counts:?}, dataset size {}",
            state.dataset.len()
        );
        trainer.save(&ckpt)?;
        write_data(
            &out_dir.join(format!("dataset_iter{k}.vadt")),
            &state.dataset,
        )?;
        let report = eval(&trainer);
        write_report(&out_dir.join(format!("eval_iter{k}.csv")), &report)?;
        println!("iteration {k}\n{}", report.summary());
    }
    Ok(())
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    planner: PlannerArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    seed_offset: Option<u64>,
    #[arg(long)]
    store: Option<StoredVideo>,
}

fn cmd_collect(mut cfg: ExperimentConfig, args: CollectArgs) -> Result<()> {
    if let Some(c) = args.cap {
        cfg.online.collect.cap = c;
    }
    if let Some(o) = args.seed_offset {
        cfg.online.collect.seed_offset = o;
    }
    if let Some(s) = args.store {
        cfg.online.collect.store = s;
    }
    finalize(&cfg)?;
    let loaded = LoadedPlanner::load(&args.planner, &cfg)?;
    let critic = make_critic(&cfg.critic);
    let records = collect_online_dataset(
        loaded.planner(),
        critic.as_ref(),
        &cfg.agent(),
        &cfg.online.collect,
        &cfg.eval.tasks,
    );
    write_data(&args.out, &records)?;
    println!("collected {} verified successes", records.len());
    Ok(())
}

fn cmd_render(input: &Path, out_dir: &Path) -> Result<()> {
    let records = read_data(input)?;
    create_dir(out_dir)?;
    for (i, r) in records.iter().enumerate() {
        let path = out_dir.join(format!("record_{i:04}_task{}_seed{}.gif", r.task, r.seed));
        write_plan_gif(create_file(&path)?, &r.plan())?;
    }
    log::info!(
        "rendered {} records to {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_mock_critic(port: u16, policy: MockPolicy) -> Result<()> {
    let server = MockCriticServer::start(port, policy)
        .map_err(|e| CliError::Usage(format!("cannot bind port {port}: {e}")))?;
    println!("{}", server.url());
    io::stdout().flush().ok();
    server.join();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out,
            per_task,
            seed,
        } => cmd_gen_data(cfg, &out, per_task, seed),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Eval {
            planner,
            episodes,
            out,
        } => cmd_eval(cfg, planner, episodes, out),
        Command::Refine(args) => cmd_refine(cfg, args),
        Command::Online(args) => cmd_online(cfg, args),
        Command::Collect(args) => cmd_collect(cfg, args),
        Command::Render { input, out_dir } => cmd_render(&input, &out_dir),
        Command::MockCritic { port, policy } => cmd_mock_critic(port, policy),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
