//! Closed-loop expert rollouts and the JSON Lines episode format.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expert::{Expert, ExpertConfig};
use super::render::{render_raster, RasterConfig, RleRaster};
use super::{generate_world, step_in_world, Action, RobotLimits, RobotState, World, WorldConfig, WorldError, WorldKind};
use crate::geometry::{ego_to_world, tangent_at_arclength, world_to_ego, CameraModel, Pose2D, Vec2};
use crate::instruction::Instruction;

pub const EPISODE_FORMAT: &str = "sharenav-episode";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("invalid episode: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Expert,
    Policy,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub duration: f64,
    pub frame_rate: f64,
    /// Integration substeps per frame.
    pub substeps: usize,
    /// Arc length ahead of the robot at which the goal is placed (m).
    pub goal_lookahead: f64,
    pub raster: RasterConfig,
    pub camera: CameraModel,
    pub start_offset: f64,
    pub start_heading_noise: f64,
    pub max_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 16.0,
            frame_rate: 5.0,
            substeps: 4,
            goal_lookahead: 5.0,
            raster: RasterConfig::default(),
            camera: CameraModel::default(),
            start_offset: 0.0,
            start_heading_noise: 0.0,
            max_attempts: 8,
        }
    }
}

/// First JSON Lines record of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub world_seed: u64,
    pub expert_seed: u64,
    pub world_config: WorldConfig,
    pub world: World,
    pub camera: CameraModel,
    pub frame_rate: f64,
    pub substeps: usize,
    pub raster: RasterConfig,
    pub goal_lookahead: f64,
    pub limits: RobotLimits,
}

/// Policy output recorded for offline replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub noise_seed: u64,
    pub selected: Vec<Vec2>,
    pub confidence: f64,
    pub decision: String,
    pub collision_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub state: RobotState,
    pub action: Action,
    pub goal: Option<Vec2>,
    pub instruction: Option<Instruction>,
    pub intervention: bool,
    pub controller: Controller,
    pub raster: RleRaster,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub frames: Vec<FrameRecord>,
}

impl EpisodeLog {
    pub fn frame_rate(&self) -> f64 {
        self.header.frame_rate
    }

    pub fn world(&self) -> &World {
        &self.header.world
    }

    pub fn kind(&self) -> WorldKind {
        self.header.world.kind
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.header.frame_rate
    }

    /// World position at time `t`, linearly interpolated between frames.
    /// `None` outside the logged span.
    pub fn position_at(&self, t: f64) -> Option<Vec2> {
        let f = t * self.header.frame_rate;
        if f < -1e-9 || self.frames.is_empty() {
            return None;
        }
        let last = (self.frames.len() - 1) as f64;
        if f > last + 1e-9 {
            return None;
        }
        let f = f.clamp(0.0, last);
        let i = (f.floor() as usize).min(self.frames.len() - 1);
        let frac = f - i as f64;
        let a = self.frames[i].state.pose.position();
        if frac < 1e-12 || i + 1 >= self.frames.len() {
            return Some(a);
        }
        Some(a.lerp(self.frames[i + 1].state.pose.position(), frac))
    }

    /// Future waypoints at `dt` spacing in the ego frame of `frame`, or `None`
    /// if the episode ends first. Waypoint 0 is one step ahead.
    pub fn future_trajectory(&self, frame: usize, horizon: usize, dt: f64) -> Option<Vec<Vec2>> {
        let pose = self.frames.get(frame)?.state.pose;
        let t0 = self.frames[frame].timestamp;
        (1..=horizon)
            .map(|k| self.position_at(t0 + k as f64 * dt).map(|p| world_to_ego(&pose, p)))
            .collect()
    }

    /// Indices of the frames `-(n-1)..=0` relative to `frame`, clamped at 0.
    pub fn history(&self, frame: usize, n: usize) -> Vec<usize> {
        (0..n).rev().map(|k| frame.saturating_sub(k)).collect()
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<(), EpisodeError> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &self.header).map_err(|e| EpisodeError::Parse { line: 1, source: e })?;
        w.write_all(b"\n")?;
        for (i, f) in self.frames.iter().enumerate() {
            serde_json::to_writer(&mut w, f).map_err(|e| EpisodeError::Parse { line: i + 2, source: e })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(r: impl Read) -> Result<EpisodeLog, EpisodeError> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| EpisodeError::Invalid("empty file".into()))??;
        let header: EpisodeHeader =
            serde_json::from_str(&first).map_err(|e| EpisodeError::Parse { line: 1, source: e })?;
        if header.format != EPISODE_FORMAT || header.version != EPISODE_VERSION {
            return Err(EpisodeError::Invalid(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut frames = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(serde_json::from_str(&line).map_err(|e| EpisodeError::Parse { line: i + 2, source: e })?);
        }
        let log = EpisodeLog { header, frames };
        log.validate()?;
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EpisodeError> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EpisodeLog, EpisodeError> {
        EpisodeLog::read_jsonl(std::fs::File::open(path)?)
    }

    /// Checks frame indices and the fixed timestamp spacing.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        let fr = self.header.frame_rate;
        if !(fr > 0.0) {
            return Err(EpisodeError::Invalid("frame_rate must be positive".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(EpisodeError::Invalid(format!("frame {i} has index {}", f.index)));
            }
            let expect = i as f64 / fr;
            if (f.timestamp - expect).abs() > 1e-9 {
                return Err(EpisodeError::Invalid(format!("frame {i} timestamp {} != {expect}", f.timestamp)));
            }
        }
        Ok(())
    }
}

/// Writes each episode to `<dir>/<name>.jsonl`.
pub fn save_episode_dir(dir: impl AsRef<Path>, episodes: &[(String, EpisodeLog)]) -> Result<(), EpisodeError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, ep) in episodes {
        ep.save(dir.join(format!("{name}.jsonl")))?;
    }
    Ok(())
}

/// Loads every `*.jsonl` episode in `dir`, sorted by name. Label files
/// (`*.labels.jsonl`) written next to episodes are skipped.
pub fn load_episode_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, EpisodeLog)>, EpisodeError> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
        if let Some(stem) = file.strip_suffix(".jsonl") {
            if !stem.ends_with(".labels") && path.is_file() {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let ep = EpisodeLog::load(dir.as_ref().join(format!("{n}.jsonl")))
                .map_err(|e| EpisodeError::Invalid(format!("{n}: {e}")))?;
            Ok((n, ep))
        })
        .collect()
}

/// Runs the expert closed-loop in `world`. Fails on the first collision.
pub fn rollout_episode(
    world: &World,
    world_config: &WorldConfig,
    expert: &mut Expert,
    cfg: &EpisodeConfig,
    seeds: (u64, u64, u64),
    start: RobotState,
) -> Result<EpisodeLog, WorldError> {
    let (seed, world_seed, expert_seed) = seeds;
    let limits = expert.config.limits;
    let n_frames = (cfg.duration * cfg.frame_rate).round() as usize;
    let dt = 1.0 / (cfg.frame_rate * cfg.substeps as f64);
    let mut state = start;
    let mut frames = Vec::with_capacity(n_frames);
    if world.collides(state.pose.position(), 0.0) {
        return Err(WorldError::RolloutFailed { attempts: 1, reason: "start pose collides".into() });
    }
    for k in 0..n_frames {
        let t = k as f64 / cfg.frame_rate;
        let raster = render_raster(world, &state.pose, t, &cfg.raster).to_rle();
        let goal = world_to_ego(&state.pose, world.route_lookahead(state.pose.position(), cfg.goal_lookahead));
        let action = expert.act(world, &state, t, 1.0 / cfg.frame_rate);
        frames.push(FrameRecord {
            index: k,
            timestamp: t,
            state,
            action,
            goal: Some(goal),
            instruction: None,
            intervention: false,
            controller: Controller::Expert,
            raster,
            prediction: None,
            events: vec![],
        });
        for j in 0..cfg.substeps {
            let (next, hit) = step_in_world(world, &state, action, t + j as f64 * dt, dt, &limits);
            if hit {
                return Err(WorldError::RolloutFailed {
                    attempts: 1,
                    reason: format!("collision at frame {k}, substep {j}"),
                });
            }
            state = next;
        }
    }
    Ok(EpisodeLog {
        header: EpisodeHeader {
            format: EPISODE_FORMAT.into(),
            version: EPISODE_VERSION,
            seed,
            world_seed,
            expert_seed,
            world_config: world_config.clone(),
            world: world.clone(),
            camera: cfg.camera,
            frame_rate: cfg.frame_rate,
            substeps: cfg.substeps,
            raster: cfg.raster,
            goal_lookahead: cfg.goal_lookahead,
            limits,
        },
        frames,
    })
}

/// Per-kind defaults for the expert and the start-state perturbation.
pub fn defaults_for_kind(kind: WorldKind) -> (ExpertConfig, EpisodeConfig) {
    match kind {
        WorldKind::Corridor => (
            ExpertConfig { preferred_offset_spread: 0.3, speed_events: true, ..Default::default() },
            EpisodeConfig { start_offset: 0.3, start_heading_noise: 0.1, ..Default::default() },
        ),
        WorldKind::Straight | WorldKind::YJunction => (ExpertConfig::default(), EpisodeConfig::default()),
    }
}

/// Generates a collision-free expert episode, retrying with fresh expert
/// randomness and then fresh world variants.
pub fn generate_episode(
    seed: u64,
    world_config: &WorldConfig,
    expert_config: &ExpertConfig,
    cfg: &EpisodeConfig,
) -> Result<EpisodeLog, WorldError> {
    let mut last = String::new();
    for attempt in 0..cfg.max_attempts.max(1) {
        let world_seed = if attempt < cfg.max_attempts / 2 { seed } else { seed ^ ((attempt as u64) << 40) };
        let expert_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt as u64);
        let world = generate_world(world_seed, world_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(expert_seed);
        let mut expert = Expert::new(expert_config.clone(), &mut rng);
        let start = start_state(&world, cfg, expert_config.cruise_speed, &mut rng);
        match rollout_episode(&world, world_config, &mut expert, cfg, (seed, world_seed, expert_seed), start) {
            Ok(log) => return Ok(log),
            Err(WorldError::RolloutFailed { reason, .. }) => {
                log::debug!("seed {seed} attempt {attempt}: {reason}");
                last = reason;
            }
            Err(e) => return Err(e),
        }
    }
    Err(WorldError::RolloutFailed { attempts: cfg.max_attempts, reason: last })
}

fn start_state(world: &World, cfg: &EpisodeConfig, speed: f64, rng: &mut ChaCha8Rng) -> RobotState {
    use rand::Rng;
    let tan = tangent_at_arclength(&world.centerline, 0.0);
    let heading = tan.y.atan2(tan.x);
    let off = if cfg.start_offset > 0.0 { rng.gen_range(-cfg.start_offset..=cfg.start_offset) } else { 0.0 };
    let dh = if cfg.start_heading_noise > 0.0 {
        rng.gen_range(-cfg.start_heading_noise..=cfg.start_heading_noise)
    } else {
        0.0
    };
    let base = Pose2D::new(world.centerline[0].x, world.centerline[0].y, heading);
    let p = ego_to_world(&base, Vec2::new(0.0, off));
    RobotState { pose: Pose2D::new(p.x, p.y, heading + dh), speed, yaw_rate: 0.0 }
}
