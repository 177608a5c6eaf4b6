//! Judgment module (collision risk, instruction compliance, decision),
//! takeover absorption and the open-loop and shared-control metrics.

pub mod sim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autolabel::arrowing_from_waypoints;
use crate::geometry::{backproject_pixel, normalize_angle, point_polyline_distance, CameraModel, PixelPoint, Vec2};
use crate::instruction::{Command, Instruction, InstructionPayload};
use crate::policy::{Trajectory, TrajectoryDistribution};
use crate::world::Mask;

pub use sim::{
    pseudo_sim_run, straight_benchmark, yjunction_benchmark, EpisodeEval, EvalReport, Planner, SimConfig,
    SimMode, SimQuery,
};

/// Overlap ratio above which a prediction is a collision risk.
pub const OVERLAP_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Execute,
    InjectInstruction,
    Takeover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionRisk {
    pub overlap: f64,
    pub flag: bool,
    /// `M_p` was empty because the trajectory is not visible.
    pub empty_footprint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgmentOutcome {
    pub collision_overlap: f64,
    pub compliance_ok: bool,
    pub decision: Decision,
}

/// Image pixels whose ground point lies within `half_width` of the path
/// from the robot through the waypoints, i.e. the swept footprint.
pub fn footprint_mask(pred: &[Vec2], half_width: f64, cam: &CameraModel) -> Mask {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut mask = Mask::new(w, h);
    let path: Vec<Vec2> = std::iter::once(Vec2::default()).chain(pred.iter().copied()).collect();
    let (lo, hi) = path.iter().fold((Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)), |(lo, hi), p| {
        (Vec2::new(lo.x.min(p.x), lo.y.min(p.y)), Vec2::new(hi.x.max(p.x), hi.y.max(p.y)))
    });
    for v in 0..h {
        for u in 0..w {
            let Ok(g) = backproject_pixel(cam, PixelPoint::new(u as f64 + 0.5, v as f64 + 0.5)) else {
                continue;
            };
            if g.x < lo.x - half_width || g.x > hi.x + half_width || g.y < lo.y - half_width || g.y > hi.y + half_width {
                continue;
            }
            if point_polyline_distance(g, &path) <= half_width {
                mask.set(u, v, true);
            }
        }
    }
    mask
}

/// `|M_p ∩ M_f| / |M_p|` and the strict threshold test.
pub fn overlap_risk(m_p: &Mask, m_f: &Mask) -> CollisionRisk {
    let n = m_p.count();
    if n == 0 {
        return CollisionRisk { overlap: 0.0, flag: false, empty_footprint: true };
    }
    let overlap = m_p.intersection_count(m_f) as f64 / n as f64;
    CollisionRisk { overlap, flag: overlap > OVERLAP_THRESHOLD, empty_footprint: false }
}

pub fn collision_risk(pred: &[Vec2], half_width: f64, m_f: &Mask, cam: &CameraModel) -> CollisionRisk {
    let r = overlap_risk(&footprint_mask(pred, half_width, cam), m_f);
    if r.empty_footprint {
        log::warn!("predicted footprint is not visible; no collision judgment");
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComplianceConfig {
    /// Mean distance to the drafted path (m).
    pub draft_distance: f64,
    /// Heading tolerance for arrowing (rad).
    pub heading_tolerance: f64,
    /// Predicted speed that counts as moving (m/s).
    pub speed_floor: f64,
    /// Instructed speed above which the robot must move (m/s).
    pub moving_speed: f64,
    /// Waypoint spacing of predictions (s).
    pub dt: f64,
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        Self { draft_distance: 0.5, heading_tolerance: 30f64.to_radians(), speed_floor: 0.1, moving_speed: 0.3, dt: 0.5 }
    }
}

/// Ground path of drafted image points; points above the horizon are dropped.
pub fn drafted_ground_path(points: &[[f64; 2]], cam: &CameraModel) -> Vec<Vec2> {
    points.iter().filter_map(|p| backproject_pixel(cam, cam.from_normalized(*p)).ok()).collect()
}

/// Signed speed and heading of the predicted mean velocity over the first second.
pub fn predicted_velocity(pred: &[Vec2], dt: f64) -> (f64, f64) {
    let n = ((1.0 / dt).round() as usize).clamp(1, pred.len());
    let pts: Vec<Vec2> = std::iter::once(Vec2::default()).chain(pred[..n].iter().copied()).collect();
    arrowing_from_waypoints(&pts, 1.0 / dt)
}

fn travel_direction(v: f64, theta: f64) -> f64 {
    if v < 0.0 {
        normalize_angle(theta + std::f64::consts::PI)
    } else {
        theta
    }
}

pub fn arrowing_compliant(pred: &[Vec2], v: f64, theta: f64, cfg: &ComplianceConfig) -> bool {
    let (pv, pth) = predicted_velocity(pred, cfg.dt);
    if v.abs() <= cfg.speed_floor {
        return pv.abs() <= cfg.moving_speed;
    }
    if pv.abs() <= cfg.speed_floor {
        // Standing still is only acceptable for slow instructions.
        return v.abs() <= cfg.moving_speed;
    }
    let err = normalize_angle(travel_direction(pv, pth) - travel_direction(v, theta)).abs();
    pv.signum() == v.signum() && err < cfg.heading_tolerance
}

pub fn drafting_compliant(pred: &[Vec2], ground_path: &[Vec2], cfg: &ComplianceConfig) -> bool {
    if ground_path.len() < 2 || pred.is_empty() {
        return false;
    }
    let mean = pred.iter().map(|p| point_polyline_distance(*p, ground_path)).sum::<f64>() / pred.len() as f64;
    mean < cfg.draft_distance
}

/// Geometric predicate per command on the predicted trajectory.
pub fn texting_compliant(pred: &[Vec2], c: Command, cfg: &ComplianceConfig) -> bool {
    let n = pred.len();
    if n < 2 {
        return false;
    }
    let dt = cfg.dt;
    let first = pred[0].norm() / dt;
    let last_seg = pred[n - 1] - pred[n - 2];
    let last = last_seg.norm() / dt;
    let end = pred[n - 1];
    // Direction of travel at the end; a stationary ending keeps the chord.
    let heading = if last_seg.norm() > 1e-3 { last_seg.y.atan2(last_seg.x) } else { end.y.atan2(end.x) };
    let reach = pred.iter().map(|p| p.norm()).fold(0.0, f64::max);
    match c {
        Command::GoStraight | Command::FollowTheSidewalk => end.x > 0.5 && heading.abs() < 0.35,
        Command::TurnLeft => heading > 0.2,
        Command::TurnRight => heading < -0.2,
        Command::KeepLeft | Command::VeerLeft | Command::GoAroundLeft => end.y > 0.2,
        Command::KeepRight | Command::VeerRight | Command::GoAroundRight => end.y < -0.2,
        Command::SlowDown => last < first - cfg.speed_floor,
        Command::SpeedUp => last > first + cfg.speed_floor,
        Command::Stop => last < 2.0 * cfg.speed_floor,
        Command::Wait => reach < 0.5,
        Command::MoveBackward => end.x < -0.2,
        // Judged by the collision check alone.
        Command::AvoidObstacle => true,
    }
}

pub fn compliance_check(pred: &[Vec2], ins: &Instruction, cam: &CameraModel, cfg: &ComplianceConfig) -> bool {
    match &ins.payload {
        InstructionPayload::Drafting(points) => drafting_compliant(pred, &drafted_ground_path(points, cam), cfg),
        InstructionPayload::Arrowing { v, theta } => arrowing_compliant(pred, *v, *theta, cfg),
        InstructionPayload::Texting(_) => ins.command().is_some_and(|c| texting_compliant(pred, c, cfg)),
    }
}

pub fn decide(collision: bool, compliant: bool, channel: bool) -> Decision {
    if collision {
        Decision::Takeover
    } else if !compliant {
        if channel {
            Decision::InjectInstruction
        } else {
            Decision::Takeover
        }
    } else {
        Decision::Execute
    }
}

/// Compliance is only judged while an instruction is active.
pub fn judge(
    pred: &[Vec2],
    ins: Option<&Instruction>,
    m_f: &Mask,
    mask_cam: &CameraModel,
    half_width: f64,
    channel: bool,
    cfg: &ComplianceConfig,
) -> JudgmentOutcome {
    let risk = collision_risk(pred, half_width, m_f, mask_cam);
    let compliance_ok = ins.is_none_or(|i| compliance_check(pred, i, mask_cam, cfg));
    JudgmentOutcome {
        collision_overlap: risk.overlap,
        compliance_ok,
        decision: decide(risk.flag, compliance_ok, channel),
    }
}

/// A point at a uniform angle in [−90°, 90°] off the heading and a
/// uniform distance in [0, 10] m, in the ego frame.
pub fn corrupt_goal(_goal: Vec2, rng: &mut impl Rng) -> Vec2 {
    let a = rng.gen_range(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2);
    let d = rng.gen_range(0.0..=10.0);
    Vec2::new(d * a.cos(), d * a.sin())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionLog {
    pub flags: Vec<bool>,
    /// Inclusive frame ranges under human control.
    pub intervals: Vec<(usize, usize)>,
    pub takeover_duration: f64,
    pub frame_rate: f64,
}

impl InterventionLog {
    pub fn covered_frames(&self) -> usize {
        self.intervals.iter().map(|(a, b)| b - a + 1).sum()
    }

    pub fn interval_frames(&self) -> usize {
        (self.takeover_duration * self.frame_rate).round() as usize
    }

    pub fn truncated(&self) -> bool {
        self.intervals.iter().any(|(a, b)| b - a + 1 < self.interval_frames())
    }
}

/// Each flag outside an open interval opens one of `round(D·rate)` frames;
/// flags inside are absorbed.
pub fn absorb_takeovers(flags: &[bool], duration: f64, frame_rate: f64) -> InterventionLog {
    let len = (duration * frame_rate).round() as usize;
    assert!(len >= 1, "takeover duration below one frame");
    let mut intervals = Vec::new();
    let mut open_until: Option<usize> = None;
    for (i, &f) in flags.iter().enumerate() {
        if open_until.is_some_and(|e| i <= e) {
            continue;
        }
        if f {
            let end = (i + len - 1).min(flags.len() - 1);
            intervals.push((i, end));
            open_until = Some(end);
        }
    }
    InterventionLog { flags: flags.to_vec(), intervals, takeover_duration: duration, frame_rate }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedControlMetrics {
    /// Percentage of frames under human control.
    pub ho: f64,
    /// Takeover events per second.
    pub tf: f64,
    /// Human-operated frames per second.
    pub of: f64,
    pub events: usize,
    pub covered_frames: usize,
    pub total_frames: usize,
}

pub fn shared_control_metrics(log: &InterventionLog, total_frames: usize) -> SharedControlMetrics {
    let covered = log.covered_frames();
    let events = log.intervals.len();
    if total_frames == 0 {
        return SharedControlMetrics { ho: 0.0, tf: 0.0, of: 0.0, events, covered_frames: covered, total_frames };
    }
    let seconds = total_frames as f64 / log.frame_rate;
    SharedControlMetrics {
        ho: covered as f64 / total_frames as f64 * 100.0,
        tf: events as f64 / seconds,
        of: covered as f64 / seconds,
        events,
        covered_frames: covered,
        total_frames,
    }
}

/// Pools logs of several episodes into one set of rates.
pub fn pooled_metrics(logs: &[InterventionLog]) -> SharedControlMetrics {
    let total: usize = logs.iter().map(|l| l.flags.len()).sum();
    let covered: usize = logs.iter().map(InterventionLog::covered_frames).sum();
    let events: usize = logs.iter().map(|l| l.intervals.len()).sum();
    let rate = logs.first().map_or(5.0, |l| l.frame_rate);
    if total == 0 {
        return SharedControlMetrics { ho: 0.0, tf: 0.0, of: 0.0, events, covered_frames: covered, total_frames: 0 };
    }
    let seconds = total as f64 / rate;
    SharedControlMetrics {
        ho: covered as f64 / total as f64 * 100.0,
        tf: events as f64 / seconds,
        of: covered as f64 / seconds,
        events,
        covered_frames: covered,
        total_frames: total,
    }
}

/// Waypoint index at time `h` for spacing `dt` (waypoint 0 is at `dt`).
fn horizon_index(h: f64, dt: f64) -> usize {
    ((h / dt).round() as usize).max(1) - 1
}

pub fn ade_upto(a: &[Vec2], b: &[Vec2], k: usize) -> f64 {
    a[..=k].iter().zip(&b[..=k]).map(|(p, q)| p.dist(*q)).sum::<f64>() / (k + 1) as f64
}

pub fn min_ade(dist: &TrajectoryDistribution, gt: &[Vec2], k: usize) -> f64 {
    dist.modes.iter().map(|m| ade_upto(m, gt, k)).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(dist: &TrajectoryDistribution, gt: &[Vec2], k: usize) -> f64 {
    dist.modes.iter().map(|m| m[k].dist(gt[k])).fold(f64::INFINITY, f64::min)
}

/// Selected-mode displacement at waypoint `k`.
pub fn l2_at(dist: &TrajectoryDistribution, gt: &[Vec2], k: usize) -> f64 {
    dist.selected()[k].dist(gt[k])
}

/// Precision at the first true positive of the confidence ranking; with a
/// single ground truth per sample this is the sample's average precision.
pub fn sample_average_precision(dist: &TrajectoryDistribution, gt: &[Vec2], threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..dist.modes.len()).collect();
    order.sort_by(|&a, &b| dist.confidences[b].total_cmp(&dist.confidences[a]).then(a.cmp(&b)));
    let last = gt.len() - 1;
    for (rank, &i) in order.iter().enumerate() {
        if dist.modes[i][last].dist(gt[last]) < threshold {
            return 1.0 / (rank + 1) as f64;
        }
    }
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMetrics {
    pub horizons: Vec<f64>,
    pub min_ade: Vec<f64>,
    pub min_fde: Vec<f64>,
    pub l2: Vec<f64>,
    pub map: f64,
    pub samples: usize,
}

pub fn open_loop_metrics(
    dists: &[TrajectoryDistribution],
    gts: &[Trajectory],
    horizons: &[f64],
    dt: f64,
    map_threshold: f64,
) -> OpenLoopMetrics {
    assert_eq!(dists.len(), gts.len());
    let n = dists.len().max(1) as f64;
    let mut out = OpenLoopMetrics {
        horizons: horizons.to_vec(),
        min_ade: vec![0.0; horizons.len()],
        min_fde: vec![0.0; horizons.len()],
        l2: vec![0.0; horizons.len()],
        map: 0.0,
        samples: dists.len(),
    };
    for (d, g) in dists.iter().zip(gts) {
        for (j, &h) in horizons.iter().enumerate() {
            let k = horizon_index(h, dt);
            assert!(k < g.len(), "horizon {h} s beyond the trajectory");
            out.min_ade[j] += min_ade(d, g, k) / n;
            out.min_fde[j] += min_fde(d, g, k) / n;
            out.l2[j] += l2_at(d, g, k) / n;
        }
        out.map += sample_average_precision(d, g, map_threshold) / n;
    }
    out
}
