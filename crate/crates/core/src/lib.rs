//! Shared-autonomy sidewalk navigation: scene simulation, instruction
//! encoding, a truncated-diffusion trajectory policy, automatic instruction
//! labeling and a human-in-the-loop supervision layer.

pub mod autolabel;
pub mod geometry;
pub mod instruction;
pub mod nn;
pub mod policy;
pub mod service;
pub mod shared_control;
pub mod training;
pub mod world;

pub use geometry::{CameraModel, Pose2D, Vec2};
pub use instruction::{Command, Instruction, InstructionState};
pub use policy::{PolicyConfig, PolicyInput, PolicyModel, Trajectory, TrajectoryDistribution};
pub use service::{ClientMessage, ServerMessage, SessionConfig};
pub use shared_control::{Decision, JudgmentOutcome, SharedControlMetrics};
pub use world::{EpisodeLog, RobotState, World, WorldKind};
