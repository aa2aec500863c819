//! Video-plan agent on a block-pushing grid-world.
//!
//! A small diffusion model proposes short videos of a task being solved from
//! the current frame. Plans are refined until a critic accepts them, turned
//! into actions with block-matching optical flow and executed. Successful
//! rollouts are folded back into the training set.
//!
//! The modules build on each other in this order: [`tensor`] (autodiff),
//! [`gridworld`] (environment and demos), [`diffusion`] (schedule, network,
//! losses, trainer), [`sampler`], [`critic`], [`action`] and [`agent`].
//! [`config`] and [`export`] hold the experiment file format and GIF output.

pub mod action;
pub mod agent;
pub mod config;
pub mod critic;
pub mod diffusion;
pub mod export;
pub mod gridworld;
pub mod sampler;
pub mod tensor;
pub mod video;

pub use agent::{EvalReport, Planner};
pub use config::ExperimentConfig;
pub use diffusion::{Denoiser, Feedback, FeedbackMode, NoiseSchedule, Trainer};
pub use gridworld::{Action, GridState, Task, Trajectory};
pub use tensor::{Graph, ParamStore, Tensor};
pub use video::{Frame, VideoPlan};
