//! Live shared-autonomy sessions: a world and the policy stepped at the
//! control rate, judged every tick, steerable by an operator.

pub mod protocol;
pub mod server;

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{project_ground_point, project_onto_polyline, tangent_at_arclength, world_to_ego, CameraModel, Pose2D, Vec2};
use crate::instruction::{render_visual_prompt, Command, Instruction, InstructionState};
use crate::policy::{trajectory_to_action, PolicyInput, TrackingGains, TrajectoryDistribution};
use crate::shared_control::{
    judge, shared_control_metrics, Planner, SimQuery, ComplianceConfig, Decision, InterventionLog, JudgmentOutcome,
    SharedControlMetrics,
};
use crate::world::{
    generate_world, render_front_view, render_impassable_mask, render_raster, Action, Controller, EpisodeConfig,
    EpisodeHeader, EpisodeLog, FrameRecord, Obstacle, PredictionRecord, Raster, RasterConfig, RobotLimits, RobotState,
    step_in_world, World, WorldConfig, WorldKind, EPISODE_FORMAT, EPISODE_VERSION,
};
use protocol::{
    encode_labels, FrameBroadcast, FrontPayloadKind, FrontView, MaskRuns, ModeOverlay, SessionMode, SessionSummary,
};

pub use protocol::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
pub use server::{serve, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub world: WorldKind,
    pub frame_rate: f64,
    pub substeps: usize,
    pub goal_lookahead: f64,
    /// Session length cap; `None` runs until the route ends or the client stops.
    pub max_frames: Option<usize>,
    pub t_star: f64,
    pub front_payload: FrontPayloadKind,
    /// Downscale of the broadcast front view.
    pub front_downscale: u32,
    pub mask_downscale: u32,
    pub broadcast_every: usize,
    /// Safe-stop deceleration (m/s²).
    pub decel: f64,
    pub compliance: ComplianceConfig,
    pub tracking: TrackingGains,
    pub limits: RobotLimits,
    pub camera: CameraModel,
    pub raster: RasterConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let ep = EpisodeConfig::default();
        Self {
            seed: 0,
            world: WorldKind::Corridor,
            frame_rate: ep.frame_rate,
            substeps: ep.substeps,
            goal_lookahead: ep.goal_lookahead,
            max_frames: None,
            t_star: InstructionState::default().t_star,
            front_payload: FrontPayloadKind::Raster,
            front_downscale: 4,
            mask_downscale: 4,
            broadcast_every: 1,
            decel: 1.0,
            compliance: ComplianceConfig::default(),
            tracking: TrackingGains::default(),
            limits: RobotLimits::default(),
            camera: ep.camera,
            raster: ep.raster,
        }
    }
}

impl SessionConfig {
    pub fn from_json(s: &str) -> Result<Self, ServiceError> {
        let c: Self = serde_json::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Config(m.into()));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive");
        }
        if self.substeps == 0 || self.broadcast_every == 0 {
            return bad("substeps and broadcast_every must be positive");
        }
        if !(self.decel > 0.0) || !(self.t_star > 0.0) {
            return bad("decel and t_star must be positive");
        }
        if self.front_downscale == 0 || self.mask_downscale == 0 {
            return bad("downscales must be positive");
        }
        self.camera.validate().map_err(|e| ServiceError::Config(e.to_string()))
    }
}

pub struct Session {
    pub id: u64,
    pub config: SessionConfig,
    pub world: World,
    pub state: RobotState,
    pub mode: SessionMode,
    pub instructions: InstructionState,
    pub takeover_requested: bool,
    planner: Arc<dyn Planner + Send + Sync>,
    frame: usize,
    human_action: Action,
    history: VecDeque<Raster>,
    pending_events: Vec<String>,
    recording: Vec<FrameRecord>,
    header: EpisodeHeader,
    finished: bool,
}

fn noise_seed(seed: u64, id: u64, frame: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (id << 40) ^ frame as u64
}

fn normalized_points(cam: &CameraModel, pts: impl IntoIterator<Item = Vec2>) -> Vec<[f64; 2]> {
    pts.into_iter().filter_map(|p| project_ground_point(cam, p).ok()).map(|px| cam.to_normalized(px)).collect()
}

/// Left and right footprint edges along `path` from the robot.
fn footprint_edges(path: &[Vec2], half_width: f64) -> [Vec<Vec2>; 2] {
    let pts: Vec<Vec2> = std::iter::once(Vec2::default()).chain(path.iter().copied()).collect();
    let mut left = Vec::with_capacity(pts.len());
    let mut right = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let a = pts[i.saturating_sub(1)];
        let b = pts[(i + 1).min(pts.len() - 1)];
        let d = b - a;
        let n = if d.norm() > 1e-9 { d.normalized().perp() } else { Vec2::new(0.0, 1.0) };
        left.push(pts[i] + n * half_width);
        right.push(pts[i] - n * half_width);
    }
    [left, right]
}

fn obstacle_outline(o: &Obstacle) -> Vec<Vec2> {
    match *o {
        Obstacle::Circle { center, radius } => (0..=16)
            .map(|k| {
                let a = k as f64 / 16.0 * std::f64::consts::TAU;
                center + Vec2::new(a.cos(), a.sin()) * radius
            })
            .collect(),
        Obstacle::Rect { min, max } => {
            vec![min, Vec2::new(max.x, min.y), max, Vec2::new(min.x, max.y), min]
        }
    }
}

impl Session {
    pub fn new(id: u64, config: SessionConfig, planner: Arc<dyn Planner + Send + Sync>) -> Result<Self, ServiceError> {
        config.validate()?;
        let world_config = WorldConfig::for_kind(config.world);
        let world = generate_world(config.seed, &world_config).map_err(|e| ServiceError::Config(e.to_string()))?;
        let tan = tangent_at_arclength(&world.centerline, 0.0);
        let start = world.centerline[0];
        let state = RobotState { pose: Pose2D::new(start.x, start.y, tan.y.atan2(tan.x)), speed: 0.0, yaw_rate: 0.0 };
        let header = EpisodeHeader {
            format: EPISODE_FORMAT.into(),
            version: EPISODE_VERSION,
            seed: config.seed,
            world_seed: config.seed,
            expert_seed: 0,
            world_config,
            world: world.clone(),
            camera: config.camera,
            frame_rate: config.frame_rate,
            substeps: config.substeps,
            raster: config.raster,
            goal_lookahead: config.goal_lookahead,
            limits: config.limits,
        };
        Ok(Self {
            id,
            instructions: InstructionState { active: None, t_star: config.t_star },
            config,
            world,
            state,
            mode: SessionMode::Autopilot,
            takeover_requested: false,
            planner,
            frame: 0,
            human_action: Action::STOP,
            history: VecDeque::new(),
            pending_events: Vec::new(),
            recording: Vec::new(),
            header,
            finished: false,
        })
    }

    pub fn now(&self) -> f64 {
        self.frame as f64 / self.config.frame_rate
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn recording(&self) -> &[FrameRecord] {
        &self.recording
    }

    fn log_event(&mut self, e: String) {
        log::info!("session {} t={:.1}: {e}", self.id, self.now());
        self.pending_events.push(e);
    }

    /// Applies one operator message. Errors leave the session unchanged.
    pub fn handle(&mut self, msg: &ClientMessage) -> Result<(), String> {
        let now = self.now();
        match msg {
            ClientMessage::SetTexting { phrase } => {
                let c = Command::parse(phrase).map_err(|e| e.to_string())?;
                self.instructions.set(Instruction::texting(c, now));
                self.log_event(format!("instruction texting {:?}", c.phrase()));
            }
            ClientMessage::SetDrafting { points } => {
                let ins = Instruction::drafting(points.clone(), now).map_err(|e| e.to_string())?;
                self.instructions.set(ins);
                self.log_event(format!("instruction drafting {} points", points.len()));
            }
            ClientMessage::SetArrowing { v, theta } => {
                let ins = Instruction::arrowing(*v, *theta, now);
                ins.validate().map_err(|e| e.to_string())?;
                self.instructions.set(ins);
                self.log_event(format!("instruction arrowing v={v} theta={theta}"));
            }
            ClientMessage::ClearInstruction => {
                self.instructions.clear();
                self.log_event("instruction cleared".into());
            }
            ClientMessage::ManualTakeover { v, omega } => {
                if !(v.is_finite() && omega.is_finite()) {
                    return Err("non-finite action".into());
                }
                self.human_action = Action::new(*v, *omega).clamped(&self.config.limits);
                if self.mode != SessionMode::Takeover {
                    self.mode = SessionMode::Takeover;
                    self.takeover_requested = false;
                    self.log_event("mode takeover".into());
                }
            }
            ClientMessage::Resume => {
                self.human_action = Action::STOP;
                if self.mode != SessionMode::Autopilot {
                    self.mode = SessionMode::Autopilot;
                    self.log_event("mode autopilot".into());
                }
            }
            ClientMessage::Configure { t_star, front_payload, broadcast_every } => {
                if t_star.is_some_and(|t| !(t > 0.0)) || broadcast_every == &Some(0) {
                    return Err("t_star and broadcast_every must be positive".into());
                }
                if let Some(t) = t_star {
                    self.instructions.t_star = *t;
                    self.config.t_star = *t;
                }
                if let Some(p) = front_payload {
                    self.config.front_payload = *p;
                }
                if let Some(b) = broadcast_every {
                    self.config.broadcast_every = *b;
                }
            }
            ClientMessage::Stop => self.finished = true,
        }
        Ok(())
    }

    fn predict(&self, input: &PolicyInput, noise_seed: u64) -> Result<TrajectoryDistribution, String> {
        let name = format!("session-{:04}", self.id);
        self.planner.plan(&SimQuery { episode: &name, frame: self.frame, input, noise_seed })
    }

    /// Replaces the generated world, e.g. with a hand-built scene.
    pub fn set_world(&mut self, world: World) {
        self.header.world = world.clone();
        self.world = world;
    }

    fn safe_stop(&self) -> Action {
        let dv = self.config.decel / self.config.frame_rate;
        let v = self.state.speed;
        Action::new(v.signum() * (v.abs() - dv).max(0.0), 0.0)
    }

    fn policy_input(&self, goal: Option<Vec2>, instruction: Option<Instruction>, t: f64) -> PolicyInput {
        let cam = self.config.camera.downscaled(self.planner.policy_config().front_downscale);
        PolicyInput {
            rasters: self.history.iter().cloned().collect(),
            goal,
            front_view: Some(render_front_view(&self.world, &self.state.pose, t, &cam)),
            instruction,
        }
    }

    /// One control step. Predict, judge, act, record and describe the frame.
    pub fn tick(&mut self) -> FrameBroadcast {
        let t = self.now();
        if self.instructions.clear_expired(t) {
            self.log_event("instruction expired".into());
        }
        let raster = render_raster(&self.world, &self.state.pose, t, &self.config.raster);
        if self.history.is_empty() {
            self.history.extend(std::iter::repeat_n(raster.clone(), self.planner.policy_config().history));
        } else {
            self.history.pop_front();
            self.history.push_back(raster.clone());
        }
        let goal = world_to_ego(&self.state.pose, self.world.route_lookahead(self.state.pose.position(), self.config.goal_lookahead));
        let active = self.instructions.active.clone();
        let seed = noise_seed(self.config.seed, self.id, self.frame);
        let mask_cam = self.config.camera.downscaled(self.config.mask_downscale);
        let m_f = render_impassable_mask(&self.world, &self.state.pose, t, &mask_cam);
        let radius = self.world.robot_radius;
        let compliance = self.config.compliance;
        let judge_it = |d: &TrajectoryDistribution| judge(d.selected(), active.as_ref(), &m_f, &mask_cam, radius, true, &compliance);
        let predicted = self.predict(&self.policy_input(Some(goal), active.clone(), t), seed);
        // Waypoint spacing: the tracker reaches the first waypoint in one spacing.
        let dt = self.planner.policy_config().dt;
        let (action, controller, shown, judgment): (Action, Controller, Option<TrajectoryDistribution>, Option<JudgmentOutcome>);
        if self.mode == SessionMode::Takeover {
            action = self.human_action;
            controller = Controller::Human;
            judgment = predicted.as_ref().ok().map(judge_it);
            shown = predicted.ok();
        } else {
            controller = Controller::Policy;
            match predicted {
                Err(e) => {
                    self.log_event(format!("policy error: {e}"));
                    self.log_event("takeover request".into());
                    self.takeover_requested = true;
                    action = self.safe_stop();
                    shown = None;
                    judgment = None;
                }
                Ok(d) => {
                    let j = judge_it(&d);
                    match j.decision {
                        Decision::Execute => {
                            self.takeover_requested = false;
                            action = trajectory_to_action(d.selected(), &self.state, dt, &self.config.tracking, &self.config.limits);
                            shown = Some(d);
                            judgment = Some(j);
                        }
                        Decision::InjectInstruction => {
                            // Re-predict once with the instruction as the only context.
                            self.log_event("inject instruction".into());
                            let retry = self.predict(&self.policy_input(None, active.clone(), t), seed).ok();
                            let ok = retry.as_ref().map(judge_it).filter(|r| r.decision == Decision::Execute);
                            match (retry, ok) {
                                (Some(r), Some(_)) => {
                                    self.takeover_requested = false;
                                    action = trajectory_to_action(r.selected(), &self.state, dt, &self.config.tracking, &self.config.limits);
                                    shown = Some(r);
                                    judgment = Some(j);
                                }
                                _ => {
                                    self.log_event("takeover request".into());
                                    self.takeover_requested = true;
                                    action = self.safe_stop();
                                    shown = Some(d);
                                    judgment = Some(JudgmentOutcome { decision: Decision::Takeover, ..j });
                                }
                            }
                        }
                        Decision::Takeover => {
                            if !self.takeover_requested {
                                self.log_event("takeover request".into());
                            }
                            self.takeover_requested = true;
                            action = self.safe_stop();
                            shown = Some(d);
                            judgment = Some(j);
                        }
                    }
                }
            }
        }
        let events = std::mem::take(&mut self.pending_events);
        let prediction = shown.as_ref().map(|d| PredictionRecord {
            noise_seed: seed,
            selected: d.selected().clone(),
            confidence: d.confidences[d.selected_index()],
            decision: judgment.map_or("none".into(), |j| format!("{:?}", j.decision).to_lowercase()),
            collision_overlap: judgment.map_or(0.0, |j| j.collision_overlap),
        });
        let record = FrameRecord {
            index: self.frame,
            timestamp: t,
            state: self.state,
            action,
            goal: Some(goal),
            instruction: active.clone(),
            intervention: controller == Controller::Human,
            controller,
            raster: raster.to_rle(),
            prediction,
            events: events.clone(),
        };
        let broadcast = self.describe(&record, shown.as_ref(), judgment);
        self.recording.push(record);
        self.advance(action, t);
        broadcast
    }

    fn advance(&mut self, action: Action, t: f64) {
        let dt = 1.0 / (self.config.frame_rate * self.config.substeps as f64);
        for j in 0..self.config.substeps {
            let (next, hit) = step_in_world(&self.world, &self.state, action, t + j as f64 * dt, dt, &self.config.limits);
            if hit {
                self.log_event("collision".into());
                self.state.speed = 0.0;
                self.state.yaw_rate = 0.0;
                break;
            }
            self.state = next;
        }
        self.frame += 1;
        let (s, _) = project_onto_polyline(self.state.pose.position(), &self.world.centerline);
        if s >= self.world.route_length() - 0.5 || self.config.max_frames.is_some_and(|m| self.frame >= m) {
            self.finished = true;
        }
    }

    fn describe(&self, rec: &FrameRecord, dist: Option<&TrajectoryDistribution>, judgment: Option<JudgmentOutcome>) -> FrameBroadcast {
        let cam = self.config.camera.downscaled(self.config.front_downscale);
        let view = render_front_view(&self.world, &self.state.pose, rec.timestamp, &cam);
        let front_view = match self.config.front_payload {
            FrontPayloadKind::Raster => encode_labels(&view),
            FrontPayloadKind::Vector => {
                let ego = |pts: &[Vec2]| pts.iter().map(|p| world_to_ego(&self.state.pose, *p)).collect::<Vec<_>>();
                let hw = self.world.half_width;
                let edges = self
                    .world
                    .corridors()
                    .flat_map(|c| corridor_edges(&ego(c), hw).map(|e| normalized_points(&cam, e)))
                    .collect();
                let obstacles = self.world.obstacles.iter().map(|o| normalized_points(&cam, ego(&obstacle_outline(o)))).collect();
                FrontView::Vector { edges, obstacles }
            }
        };
        let overlay = rec.instruction.as_ref().map(|i| MaskRuns::encode(&render_visual_prompt(&view, Some(i)).overlay));
        let modes = dist.map_or_else(Vec::new, |d| {
            let sel = d.selected_index();
            d.modes
                .iter()
                .zip(&d.confidences)
                .enumerate()
                .map(|(i, (m, c))| ModeOverlay {
                    points: normalized_points(&cam, std::iter::once(Vec2::default()).chain(m.iter().copied())),
                    confidence: *c,
                    selected: i == sel,
                })
                .collect()
        });
        let edges = dist.map_or([vec![], vec![]], |d| {
            footprint_edges(d.selected(), self.world.robot_radius).map(|e| normalized_points(&cam, e))
        });
        FrameBroadcast {
            session: self.id,
            frame: rec.index,
            timestamp: rec.timestamp,
            mode: self.mode,
            controller: rec.controller,
            front_view,
            instruction: rec.instruction.clone(),
            instruction_overlay: overlay,
            modes,
            footprint_edges: edges,
            judgment,
            takeover_requested: self.takeover_requested,
            metrics: self.metrics_with(Some(rec)).1,
            events: rec.events.clone(),
        }
    }

    fn metrics_with(&self, extra: Option<&FrameRecord>) -> (f64, SharedControlMetrics) {
        let flags: Vec<bool> = self.recording.iter().chain(extra).map(|f| f.intervention).collect();
        measured_metrics(&flags, self.config.frame_rate)
    }

    /// Measured takeover length and the metrics over the actual intervals.
    pub fn metrics(&self) -> (f64, SharedControlMetrics) {
        self.metrics_with(None)
    }

    pub fn episode(&self) -> EpisodeLog {
        EpisodeLog { header: self.header.clone(), frames: self.recording.clone() }
    }

    /// Writes `session-<id>.jsonl` and its summary next to it.
    pub fn persist(&self, dir: &Path) -> Result<SessionSummary, ServiceError> {
        std::fs::create_dir_all(dir)?;
        let path: PathBuf = dir.join(format!("session-{:04}.jsonl", self.id));
        self.episode().save(&path).map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?;
        let summary = self.summary(Some(path.display().to_string()));
        std::fs::write(dir.join(format!("session-{:04}.summary.json", self.id)), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
        Ok(summary)
    }

    pub fn summary(&self, episode_path: Option<String>) -> SessionSummary {
        let (d, metrics) = self.metrics();
        SessionSummary { session: self.id, frames: self.recording.len(), episode_path, takeover_duration: d, metrics }
    }
}

fn corridor_edges(line: &[Vec2], hw: f64) -> [Vec<Vec2>; 2] {
    let mut left = Vec::with_capacity(line.len());
    let mut right = Vec::with_capacity(line.len());
    for i in 0..line.len() {
        let d = line[(i + 1).min(line.len() - 1)] - line[i.saturating_sub(1)];
        let n = d.normalized().perp();
        left.push(line[i] + n * hw);
        right.push(line[i] - n * hw);
    }
    [left, right]
}

/// Intervals are the actual runs of human-controlled frames, so `D` is
/// their mean length rather than a fixed duration.
pub fn measured_metrics(flags: &[bool], frame_rate: f64) -> (f64, SharedControlMetrics) {
    let mut intervals = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                intervals.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push((s, flags.len() - 1));
    }
    let covered: usize = intervals.iter().map(|(a, b)| b - a + 1).sum();
    let d = if intervals.is_empty() { 0.0 } else { covered as f64 / intervals.len() as f64 / frame_rate };
    let log = InterventionLog { flags: flags.to_vec(), intervals, takeover_duration: d, frame_rate };
    (d, shared_control_metrics(&log, flags.len()))
}

/// Re-runs the policy on a persisted frame with the logged seed.
pub fn replay_prediction(model: &dyn Planner, ep: &EpisodeLog, frame: usize) -> Option<Result<TrajectoryDistribution, String>> {
    let f = ep.frames.get(frame)?;
    let p = f.prediction.as_ref()?;
    let pcfg = model.policy_config();
    let rasters = ep.history(frame, pcfg.history).into_iter().map(|i| ep.frames[i].raster.decode()).collect::<Result<Vec<_>, _>>();
    let rasters = match rasters {
        Ok(r) => r,
        Err(e) => return Some(Err(e)),
    };
    // A successful injection logs the re-prediction, which had no goal.
    let retried = p.decision == "injectinstruction";
    let cam = ep.header.camera.downscaled(pcfg.front_downscale);
    let input = PolicyInput {
        rasters,
        goal: if retried { None } else { f.goal },
        front_view: Some(render_front_view(ep.world(), &f.state.pose, f.timestamp, &cam)),
        instruction: f.instruction.clone(),
    };
    let name = format!("replay-{frame}");
    Some(model.plan(&SimQuery { episode: &name, frame, input: &input, noise_seed: p.noise_seed }))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::autolabel::{annotate_episode, AutolabelConfig};
    use crate::geometry::point_at_arclength;
    use crate::policy::model::tests::tiny_model;
    use crate::policy::{PolicyConfig, Trajectory};
    use crate::shared_control::collision_risk;
    use protocol::{decode_message, encode_message, read_frame, write_frame};
    use std::net::{TcpListener, TcpStream};
    use std::time::Instant;

    /// Always drives straight ahead at `speed`.
    struct Straight {
        cfg: PolicyConfig,
        speed: f64,
    }

    impl Planner for Straight {
        fn policy_config(&self) -> &PolicyConfig {
            &self.cfg
        }

        fn plan(&self, _: &SimQuery) -> Result<TrajectoryDistribution, String> {
            let t: Trajectory = (1..=self.cfg.horizon).map(|k| Vec2::new(self.speed * self.cfg.dt * k as f64, 0.0)).collect();
            Ok(TrajectoryDistribution::from_logits(vec![t], vec![0.0]))
        }
    }

    fn straight(speed: f64) -> Arc<dyn Planner + Send + Sync> {
        Arc::new(Straight { cfg: PolicyConfig::toy(), speed })
    }

    fn session(kind: WorldKind, seed: u64, planner: Arc<dyn Planner + Send + Sync>) -> Session {
        Session::new(1, SessionConfig { world: kind, seed, front_downscale: 8, ..SessionConfig::default() }, planner).unwrap()
    }

    fn eight_points() -> Vec<[f64; 2]> {
        (0..8).map(|i| [0.5, 0.95 - 0.05 * i as f64]).collect()
    }

    #[test]
    fn sessions_start_in_autopilot_and_are_independent() {
        let a = session(WorldKind::Corridor, 1, straight(1.0));
        let b = Session::new(2, SessionConfig { seed: 2, ..SessionConfig::default() }, straight(1.0)).unwrap();
        assert_eq!(a.mode, SessionMode::Autopilot);
        assert_ne!(a.id, b.id);
        assert_ne!(a.world, b.world);
        assert!(SessionConfig::from_json(r#"{"seed": "seven"}"#).is_err());
        assert!(SessionConfig::from_json(r#"{"seed": 7, "frame_rate": 0}"#).is_err());
        assert!(SessionConfig::from_json(r#"{"seeds": 7}"#).is_err());
        assert_eq!(SessionConfig::from_json(r#"{"seed": 7}"#).unwrap().seed, 7);
    }

    #[test]
    fn messages_update_state_or_are_rejected() {
        let mut s = session(WorldKind::Straight, 0, straight(1.0));
        s.handle(&ClientMessage::SetDrafting { points: eight_points() }).unwrap();
        let active = s.instructions.active.clone().unwrap();
        assert_eq!(active.payload, crate::instruction::InstructionPayload::Drafting(eight_points()));
        let mut bad = eight_points();
        bad[3] = [1.2, 0.5];
        assert!(s.handle(&ClientMessage::SetDrafting { points: bad }).is_err());
        assert_eq!(s.instructions.active.as_ref(), Some(&active));
        assert!(s.handle(&ClientMessage::SetTexting { phrase: "fly away".into() }).is_err());
        assert!(s.handle(&ClientMessage::SetArrowing { v: f64::NAN, theta: 0.0 }).is_err());
        s.handle(&ClientMessage::Resume).unwrap();
        s.handle(&ClientMessage::Resume).unwrap();
        assert_eq!(s.mode, SessionMode::Autopilot);
        assert!(s.pending_events.iter().all(|e| e != "mode autopilot"));
    }

    #[test]
    fn free_corridor_executes_every_tick() {
        let mut s = session(WorldKind::Straight, 3, straight(1.0));
        for _ in 0..30 {
            let b = s.tick();
            assert_eq!(b.judgment.unwrap().decision, Decision::Execute, "frame {}", b.frame);
            assert_eq!(b.modes.len(), 1);
            assert!(b.modes[0].selected && !b.footprint_edges[0].is_empty());
        }
        assert!(s.state.pose.position().dist(s.world.centerline[0]) > 5.0);
        assert_eq!(s.metrics().1.ho, 0.0);
    }

    #[test]
    fn wall_ahead_requests_takeover_exactly_when_overlap_exceeds_threshold() {
        let mut s = session(WorldKind::Straight, 4, straight(1.0));
        let mut w = s.world.clone();
        w.obstacles = vec![Obstacle::Circle { center: point_at_arclength(&w.centerline, 7.0), radius: 1.6 }];
        s.set_world(w);
        let mask_cam = s.config.camera.downscaled(s.config.mask_downscale);
        let mut requested = 0;
        for _ in 0..40 {
            let b = s.tick();
            let rec = s.recording().last().unwrap().clone();
            let m_f = render_impassable_mask(&s.world, &rec.state.pose, rec.timestamp, &mask_cam);
            let pred = &rec.prediction.as_ref().unwrap().selected;
            let oracle = collision_risk(pred, s.world.robot_radius, &m_f, &mask_cam);
            let j = b.judgment.unwrap();
            assert_eq!(j.decision == Decision::Takeover, oracle.overlap > 0.10, "frame {}", b.frame);
            // A collision flag is never executed.
            assert!(!(oracle.flag && j.decision == Decision::Execute));
            requested += usize::from(b.takeover_requested);
        }
        assert!(requested > 10);
        assert!(s.recording().iter().all(|f| !f.events.iter().any(|e| e == "collision")));
        assert!(s.state.speed.abs() < 1e-9);
    }

    #[test]
    fn takeover_metrics_match_hand_count_and_persist() {
        let mut s = session(WorldKind::Straight, 5, straight(1.0));
        for k in 0..40 {
            match k {
                3 | 12 => s.handle(&ClientMessage::ManualTakeover { v: 0.5, omega: 0.0 }).unwrap(),
                6 | 14 => s.handle(&ClientMessage::Resume).unwrap(),
                _ => {}
            }
            s.tick();
        }
        // Human frames 3-5 and 12-13: 5 of 40, two takeovers.
        let (d, m) = s.metrics();
        assert_eq!((m.covered_frames, m.events, m.total_frames), (5, 2, 40));
        assert!((m.ho - 12.5).abs() < 1e-12 && (d - 0.5).abs() < 1e-12);
        assert!((m.tf - 0.25).abs() < 1e-12 && (m.of - 0.625).abs() < 1e-12);
        let rec = s.recording();
        assert!(rec.iter().all(|f| (f.controller == Controller::Human) == f.intervention));
        assert_eq!(rec[3].events, vec!["mode takeover".to_string()]);
        assert_eq!(rec[6].events, vec!["mode autopilot".to_string()]);
        let dir = tempfile::tempdir().unwrap();
        let summary = s.persist(dir.path()).unwrap();
        assert_eq!(summary.metrics, m);
        let ep = EpisodeLog::load(summary.episode_path.unwrap()).unwrap();
        assert_eq!(ep.frames, s.recording());
        let (records, _) = annotate_episode("session-0001", &ep, &AutolabelConfig::default(), None);
        assert!(!records.is_empty());
        assert_eq!(measured_metrics(&[false; 7], 5.0).1.ho, 0.0);
    }

    #[test]
    fn persisted_predictions_replay_bit_exactly() {
        let model: Arc<dyn Planner + Send + Sync> = Arc::new(tiny_model());
        let mut s = Session::new(9, SessionConfig { world: WorldKind::Corridor, seed: 2, front_downscale: 8, ..SessionConfig::default() }, model.clone()).unwrap();
        for k in 0..12 {
            if k == 4 {
                s.handle(&ClientMessage::SetArrowing { v: 1.0, theta: 0.1 }).unwrap();
            }
            s.tick();
        }
        let ep = EpisodeLog::read_jsonl(s.episode().to_jsonl_string().as_bytes()).unwrap();
        let mut checked = 0;
        for f in 0..ep.frames.len() {
            let Some(r) = replay_prediction(model.as_ref(), &ep, f) else { continue };
            assert_eq!(&r.unwrap().selected().clone(), &ep.frames[f].prediction.as_ref().unwrap().selected, "frame {f}");
            checked += 1;
        }
        assert!(checked >= 10);
    }

    fn recv(stream: &mut TcpStream) -> ServerMessage {
        decode_message(&read_frame(stream).unwrap().expect("server closed")).unwrap()
    }

    fn send(stream: &mut TcpStream, body: &[u8]) {
        write_frame(stream, body).unwrap();
    }

    #[test]
    fn tcp_session_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = ServerConfig {
            session: SessionConfig { world: WorldKind::Straight, front_downscale: 8, ..SessionConfig::default() },
            record_dir: Some(dir.path().to_path_buf()),
            realtime: true,
            max_sessions: Some(1),
        };
        let server = std::thread::spawn(move || serve(listener, straight(1.0), cfg).unwrap());
        let mut c = TcpStream::connect(addr).unwrap();
        assert!(matches!(recv(&mut c), ServerMessage::Hello { session: 1, .. }));
        let mut arrivals = Vec::new();
        let mut frames = Vec::new();
        let mut acks = Vec::new();
        let mut errors = 0;
        let script: Vec<(usize, Vec<u8>)> = vec![
            (2, encode_message(&ClientMessage::SetDrafting { points: eight_points() })),
            (3, br#"{"version":1,"type":"teleport"}"#.to_vec()),
            (6, encode_message(&ClientMessage::ManualTakeover { v: 0.3, omega: 0.0 })),
            (9, encode_message(&ClientMessage::Resume)),
            (12, encode_message(&ClientMessage::Stop)),
        ];
        let mut next = 0;
        let summary = loop {
            match recv(&mut c) {
                ServerMessage::Frame(b) => {
                    arrivals.push(Instant::now());
                    let n = b.frame;
                    frames.push(*b);
                    while next < script.len() && script[next].0 == n {
                        send(&mut c, &script[next].1);
                        next += 1;
                    }
                }
                ServerMessage::Ack { of } => acks.push(of),
                ServerMessage::Error { .. } => errors += 1,
                ServerMessage::Summary(s) => break s,
                ServerMessage::Hello { .. } => panic!("second hello"),
            }
        };
        server.join().unwrap();
        assert_eq!(acks, vec!["set_drafting", "manual_takeover", "resume", "stop"]);
        assert_eq!(errors, 1);
        let drafted = frames.iter().find(|f| f.instruction.is_some()).unwrap();
        match &drafted.instruction.as_ref().unwrap().payload {
            crate::instruction::InstructionPayload::Drafting(p) => {
                for (a, b) in p.iter().zip(eight_points()) {
                    assert!((a[0] - b[0]).abs() < 1e-3 && (a[1] - b[1]).abs() < 1e-3);
                }
            }
            other => panic!("{other:?}"),
        }
        assert!(drafted.instruction_overlay.as_ref().unwrap().decode().unwrap().count() > 0);
        let modes: Vec<SessionMode> = frames.iter().map(|f| f.mode).collect();
        let first_manual = modes.iter().position(|m| *m == SessionMode::Takeover).unwrap();
        let back = modes[first_manual..].iter().position(|m| *m == SessionMode::Autopilot).unwrap() + first_manual;
        assert!(first_manual < back && modes[back..].iter().all(|m| *m == SessionMode::Autopilot));
        // Cadence: broadcast spacing around the 0.2 s period.
        let gaps: Vec<f64> = arrivals.windows(2).map(|w| (w[1] - w[0]).as_secs_f64()).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 0.2).abs() < 0.05, "mean gap {mean}");
        let ep = EpisodeLog::load(summary.episode_path.as_ref().unwrap()).unwrap();
        assert_eq!(ep.frames.len(), summary.frames);
        assert_eq!(summary.metrics.events, 1);
        let events: Vec<&String> = ep.frames.iter().flat_map(|f| &f.events).filter(|e| e.starts_with("mode")).collect();
        assert_eq!(events, vec!["mode takeover", "mode autopilot"]);
    }
}
