//! Automatic instruction labeling of expert episodes: motion saliency,
//! interestingness priors, keyframe selection and the three annotation
//! modalities.

pub mod client;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, project_trajectory, resample_uniform, world_to_ego, CameraModel, Vec2};
use crate::instruction::{Command, Instruction};
use crate::policy::Trajectory;
use crate::world::{EpisodeLog, RobotState, WorldKind};
use client::encode_frames;
pub use client::{CaptionRequest, CaptionResponse, Captioner, ClientConfig, ClientError, HttpCaptioner};

pub const DATASET_FORMAT: &str = "sharenav-dataset";

#[derive(Debug, thiserror::Error)]
pub enum AutolabelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyWeights {
    /// Mean, max and variance weights for acceleration.
    pub accel: [f64; 3],
    /// Mean, max and variance weights for turning rate.
    pub turn: [f64; 3],
    pub w_int: f64,
    pub w_bor: f64,
}

impl Default for SaliencyWeights {
    fn default() -> Self {
        Self { accel: [1.0, 0.5, 0.25], turn: [1.0, 0.5, 0.25], w_int: 2.0, w_bor: 0.5 }
    }
}

impl SaliencyWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.accel.iter().chain(&self.turn).any(|w| !(*w >= 0.0)) {
            return Err("saliency weights must be nonnegative".into());
        }
        if !(self.w_int > 1.0 && 1.0 > self.w_bor && self.w_bor > 0.0) {
            return Err("need w_int > 1 > w_bor > 0".into());
        }
        Ok(())
    }
}

/// `w1·mean + w2·max + w3·variance` of magnitudes.
pub fn weighted_stats(values: &[f64], w: [f64; 3]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().cloned().fold(0.0, f64::max);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    w[0] * mean + w[1] * max + w[2] * var
}

/// `(S_accel, S_turn)` over a window of logged states.
pub fn motion_saliency(window: &[RobotState], fps: f64, w: &SaliencyWeights) -> (f64, f64) {
    assert!(window.len() >= 2, "saliency needs two states");
    let accel: Vec<f64> = window.windows(2).map(|p| ((p[1].speed - p[0].speed) * fps).abs()).collect();
    let turn: Vec<f64> = window
        .windows(2)
        .map(|p| (normalize_angle(p[1].pose.heading - p[0].pose.heading) * fps).abs())
        .collect();
    (weighted_stats(&accel, w.accel), weighted_stats(&turn, w.turn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interestingness {
    Interesting,
    Boring,
    Unlabeled,
}

impl Interestingness {
    pub fn weight(self, w: &SaliencyWeights) -> f64 {
        match self {
            Interestingness::Interesting => w.w_int,
            Interestingness::Boring => w.w_bor,
            Interestingness::Unlabeled => 1.0,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "interesting" => Some(Interestingness::Interesting),
            "boring" => Some(Interestingness::Boring),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSummary {
    /// Smallest distance from the path to an obstacle surface (m).
    pub obstacle_distance: f64,
    pub max_turn_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterestConfig {
    pub obstacle_radius: f64,
    pub turn_threshold: f64,
}

impl Default for InterestConfig {
    fn default() -> Self {
        Self { obstacle_radius: 3.0, turn_threshold: 0.3 }
    }
}

pub fn heuristic_interestingness(s: &ClipSummary, cfg: &InterestConfig) -> Interestingness {
    if s.obstacle_distance <= cfg.obstacle_radius || s.max_turn_rate > cfg.turn_threshold {
        Interestingness::Interesting
    } else {
        Interestingness::Boring
    }
}

/// Uses the captioner when given and falls back to the heuristic with a
/// warning when it fails or answers something unusable.
pub fn classify_interestingness(
    summary: &ClipSummary,
    request: Option<&CaptionRequest>,
    client: Option<&dyn Captioner>,
    cfg: &InterestConfig,
) -> (Interestingness, Option<String>) {
    if let (Some(c), Some(req)) = (client, request) {
        match c.query(req) {
            Ok(resp) => match resp.label.as_deref().or(resp.text.as_deref()).and_then(Interestingness::parse) {
                Some(l) => return (l, None),
                None => {
                    let w = format!("captioner gave unusable interestingness {resp:?}");
                    return (heuristic_interestingness(summary, cfg), Some(w));
                }
            },
            Err(e) => return (heuristic_interestingness(summary, cfg), Some(format!("captioner failed: {e}"))),
        }
    }
    (heuristic_interestingness(summary, cfg), None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: usize,
    pub end: usize,
    pub s_accel: f64,
    pub s_turn: f64,
    pub label: Interestingness,
    /// `w_p · max(S_accel, S_turn)`.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Greedy descending-score selection with temporal suppression. Ties go to
/// the earlier frame; the result is sorted by frame.
pub fn select_keyframes(scores: &[(usize, f64)], k: usize, min_gap: usize) -> Vec<usize> {
    assert!(k >= 1, "k must be positive");
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = Vec::new();
    for (f, _) in order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&c| c.abs_diff(f) >= min_gap) {
            chosen.push(f);
        }
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftingLabel {
    pub image_ref: String,
    /// Normalized image points, near to far.
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrowingLabel {
    pub v: f64,
    pub theta: f64,
    pub image_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextingLabel {
    pub command: Command,
    pub description: String,
}

/// Future ego-frame positions of frames `frame+1 ..= frame+n`.
fn future_ego(ep: &EpisodeLog, frame: usize, n: usize) -> Option<Vec<Vec2>> {
    if frame + n >= ep.frames.len() {
        return None;
    }
    let pose = ep.frames[frame].state.pose;
    Some((1..=n).map(|i| world_to_ego(&pose, ep.frames[frame + i].state.pose.position())).collect())
}

fn horizon_frames(ep: &EpisodeLog, seconds: f64) -> usize {
    (seconds * ep.frame_rate()).round() as usize
}

/// Projects the logged future path and samples `k` arc-length-uniform image
/// points. Errors carry a skip reason.
pub fn annotate_drafting(
    ep: &EpisodeLog,
    frame: usize,
    cam: &CameraModel,
    k: usize,
    horizon_s: f64,
    image_ref: String,
) -> Result<DraftingLabel, String> {
    let n = horizon_frames(ep, horizon_s);
    let path = future_ego(ep, frame, n).ok_or("not enough future frames")?;
    let px = project_trajectory(cam, &path);
    if px.len() < 2 {
        return Err(format!("{} visible projected points", px.len()));
    }
    let line: Vec<Vec2> = px.iter().map(|p| Vec2::new(p.u, p.v)).collect();
    let pts = resample_uniform(&line, k).ok_or("degenerate stroke")?;
    let points = pts
        .iter()
        .map(|p| {
            let [u, v] = cam.to_normalized(crate::geometry::PixelPoint::new(p.x, p.y));
            [u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)]
        })
        .collect();
    Ok(DraftingLabel { image_ref, points })
}

/// Average velocity of ego waypoints `p_0 .. p_{N-1}` sampled at `fps`.
/// Backward motion gives a negative speed with `theta` the direction the
/// robot faces; a stationary robot gives `(0, 0)`.
pub fn arrowing_from_waypoints(pts: &[Vec2], fps: f64) -> (f64, f64) {
    assert!(pts.len() >= 2, "arrowing needs two waypoints");
    let n = pts.len();
    let mut sum = Vec2::default();
    for w in pts.windows(2) {
        sum = sum + (w[1] - w[0]) * fps;
    }
    let v_avg = sum * (1.0 / (n - 1) as f64);
    let speed = v_avg.norm();
    if speed < 1e-9 {
        return (0.0, 0.0);
    }
    if v_avg.x < 0.0 {
        (-speed, (-v_avg.y).atan2(-v_avg.x))
    } else {
        (speed, v_avg.y.atan2(v_avg.x))
    }
}

/// `n` waypoints including the current position, so the span is `n − 1` frames.
pub fn annotate_arrowing(ep: &EpisodeLog, frame: usize, n: usize, fps: f64, image_ref: String) -> Result<ArrowingLabel, String> {
    if n < 2 {
        return Err("arrowing needs N ≥ 2".into());
    }
    let fut = future_ego(ep, frame, n - 1).ok_or("not enough future frames")?;
    let pts: Vec<Vec2> = std::iter::once(Vec2::default()).chain(fut).collect();
    let (v, theta) = arrowing_from_waypoints(&pts, fps);
    Ok(ArrowingLabel { v, theta, image_ref })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextingThresholds {
    /// Mean turning rate for a turn command (rad/s).
    pub turn_rate: f64,
    /// Mean acceleration for speed changes (m/s²).
    pub accel: f64,
    /// Terminal speed counted as stopped (m/s).
    pub stop_speed: f64,
    /// Obstacle clearance along the path that counts as avoiding (m).
    pub obstacle_clearance: f64,
}

impl Default for TextingThresholds {
    fn default() -> Self {
        Self { turn_rate: 0.1, accel: 0.1, stop_speed: 0.1, obstacle_clearance: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FutureStats {
    pub mean_turn_rate: f64,
    pub mean_accel: f64,
    pub start_speed: f64,
    pub end_speed: f64,
    pub forward_progress: f64,
    pub min_clearance: f64,
}

pub fn future_stats(ep: &EpisodeLog, frame: usize, horizon_s: f64) -> Option<FutureStats> {
    let n = horizon_frames(ep, horizon_s);
    if frame + n >= ep.frames.len() {
        return None;
    }
    let a = &ep.frames[frame];
    let b = &ep.frames[frame + n];
    let mut turn = 0.0;
    let mut min_clearance = f64::INFINITY;
    let w = ep.world();
    for i in frame..frame + n {
        let (p, q) = (&ep.frames[i].state.pose, &ep.frames[i + 1].state.pose);
        turn += normalize_angle(q.heading - p.heading);
        min_clearance = min_clearance.min(w.obstacle_clearance(q.position(), ep.frames[i + 1].timestamp));
    }
    Some(FutureStats {
        mean_turn_rate: turn / horizon_s,
        mean_accel: (b.state.speed - a.state.speed) / horizon_s,
        start_speed: a.state.speed,
        end_speed: b.state.speed,
        forward_progress: world_to_ego(&a.state.pose, b.state.pose.position()).x,
        min_clearance,
    })
}

pub fn texting_command(s: &FutureStats, th: &TextingThresholds) -> Command {
    if s.start_speed < th.stop_speed && s.end_speed < th.stop_speed {
        Command::Wait
    } else if s.end_speed < th.stop_speed {
        Command::Stop
    } else if s.forward_progress < 0.0 {
        Command::MoveBackward
    } else if s.min_clearance < th.obstacle_clearance {
        Command::AvoidObstacle
    } else if s.mean_turn_rate > th.turn_rate {
        Command::TurnLeft
    } else if s.mean_turn_rate < -th.turn_rate {
        Command::TurnRight
    } else if s.mean_accel > th.accel {
        Command::SpeedUp
    } else if s.mean_accel < -th.accel {
        Command::SlowDown
    } else {
        Command::GoStraight
    }
}

pub fn describe(c: Command, s: &FutureStats) -> String {
    let deg = (s.mean_turn_rate * 4.0).to_degrees();
    format!(
        "{}: the robot moves from {:.1} m/s to {:.1} m/s, turning {:+.0} degrees, with {:.1} m of clearance",
        c.phrase(),
        s.start_speed,
        s.end_speed,
        deg,
        s.min_clearance.min(99.0)
    )
}

pub fn annotate_texting(ep: &EpisodeLog, frame: usize, horizon_s: f64, th: &TextingThresholds) -> Result<TextingLabel, String> {
    let s = future_stats(ep, frame, horizon_s).ok_or("not enough future frames")?;
    let command = texting_command(&s, th);
    Ok(TextingLabel { command, description: describe(command, &s) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub episode: String,
    pub frame: usize,
    pub timestamp: f64,
    pub kind: WorldKind,
    pub drafting: DraftingLabel,
    pub arrowing: ArrowingLabel,
    pub texting: TextingLabel,
    /// Future waypoints at the policy spacing.
    pub gt: Trajectory,
    pub interest: Interestingness,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AnnotationRecord {
    pub fn drafting_instruction(&self) -> Instruction {
        Instruction::drafting(self.drafting.points.clone(), self.timestamp).expect("validated at annotation")
    }

    pub fn arrowing_instruction(&self) -> Instruction {
        Instruction::arrowing(self.arrowing.v, self.arrowing.theta, self.timestamp)
    }

    pub fn texting_instruction(&self) -> Instruction {
        Instruction::texting(self.texting.command, self.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub episode: String,
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutolabelConfig {
    pub weights: SaliencyWeights,
    pub interest: InterestConfig,
    pub texting: TextingThresholds,
    pub keyframes: usize,
    pub min_gap: usize,
    pub horizon_s: f64,
    pub k_points: usize,
    /// Arrowing waypoints including the current one; `None` spans one second.
    pub arrow_points: Option<usize>,
    pub gt_horizon: usize,
    pub gt_dt: f64,
    pub camera: CameraModel,
    pub captioner: ClientConfig,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        Self {
            weights: SaliencyWeights::default(),
            interest: InterestConfig::default(),
            texting: TextingThresholds::default(),
            keyframes: 6,
            min_gap: 5,
            horizon_s: 4.0,
            k_points: 8,
            arrow_points: None,
            gt_horizon: 8,
            gt_dt: 0.5,
            camera: CameraModel::default(),
            captioner: ClientConfig::default(),
        }
    }
}

/// Scores every frame that has a full future window.
pub fn window_scores(name: &str, ep: &EpisodeLog, cfg: &AutolabelConfig, client: Option<&dyn Captioner>) -> Vec<WindowScore> {
    let n = horizon_frames(ep, cfg.horizon_s);
    let fps = ep.frame_rate();
    let w = ep.world();
    let mut out = Vec::new();
    if ep.frames.len() <= n {
        return out;
    }
    for start in 0..ep.frames.len() - n {
        let end = start + n;
        let states: Vec<RobotState> = ep.frames[start..=end].iter().map(|f| f.state).collect();
        let (s_accel, s_turn) = motion_saliency(&states, fps, &cfg.weights);
        let max_turn_rate = states
            .windows(2)
            .map(|p| (normalize_angle(p[1].pose.heading - p[0].pose.heading) * fps).abs())
            .fold(0.0, f64::max);
        let obstacle_distance = ep.frames[start..=end]
            .iter()
            .map(|f| w.obstacle_clearance(f.state.pose.position(), f.timestamp) + w.robot_radius)
            .fold(f64::INFINITY, f64::min);
        let summary = ClipSummary { obstacle_distance, max_turn_rate };
        let req = client.map(|_| CaptionRequest {
            frames: encode_frames(&[ep.frames[start].raster.clone()]),
            prompt_id: format!("interestingness:{name}:{start}"),
        });
        let (label, warning) = classify_interestingness(&summary, req.as_ref(), client, &cfg.interest);
        let score = label.weight(&cfg.weights) * s_accel.max(s_turn);
        out.push(WindowScore { start, end, s_accel, s_turn, label, score, warning });
    }
    out
}

/// Selects keyframes and annotates each with all three modalities. Frames
/// where any modality fails are skipped with a reason.
pub fn annotate_episode(
    name: &str,
    ep: &EpisodeLog,
    cfg: &AutolabelConfig,
    client: Option<&dyn Captioner>,
) -> (Vec<AnnotationRecord>, Vec<Skip>) {
    let scores = window_scores(name, ep, cfg, client);
    let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.start, s.score)).collect();
    let mut records = Vec::new();
    let mut skips = Vec::new();
    if pairs.is_empty() {
        skips.push(Skip { episode: name.into(), frame: 0, reason: "episode shorter than the label horizon".into() });
        return (records, skips);
    }
    let fps = ep.frame_rate();
    let arrow_n = cfg.arrow_points.unwrap_or(fps.round() as usize + 1);
    for f in select_keyframes(&pairs, cfg.keyframes, cfg.min_gap) {
        let ws = &scores[f];
        let skip = |reason: String| Skip { episode: name.into(), frame: f, reason };
        let drafting = match annotate_drafting(ep, f, &cfg.camera, cfg.k_points, cfg.horizon_s, format!("{name}#{f}/drafting")) {
            Ok(d) => d,
            Err(r) => {
                skips.push(skip(format!("drafting: {r}")));
                continue;
            }
        };
        let arrowing = match annotate_arrowing(ep, f, arrow_n, fps, format!("{name}#{f}/arrowing")) {
            Ok(a) => a,
            Err(r) => {
                skips.push(skip(format!("arrowing: {r}")));
                continue;
            }
        };
        let mut warnings: Vec<String> = ws.warning.iter().cloned().collect();
        let mut texting = match annotate_texting(ep, f, cfg.horizon_s, &cfg.texting) {
            Ok(t) => t,
            Err(r) => {
                skips.push(skip(format!("texting: {r}")));
                continue;
            }
        };
        if let Some(c) = client {
            let req = CaptionRequest {
                frames: encode_frames(&[ep.frames[f].raster.clone()]),
                prompt_id: format!("texting:{name}:{f}"),
            };
            match c.query(&req) {
                Ok(resp) => match resp.text.as_deref().or(resp.label.as_deref()).map(Command::parse) {
                    Some(Ok(cmd)) => texting.command = cmd,
                    _ => warnings.push(format!("captioner text not in lexicon: {resp:?}")),
                },
                Err(e) => warnings.push(format!("captioner failed: {e}")),
            }
        }
        let Some(gt) = ep.future_trajectory(f, cfg.gt_horizon, cfg.gt_dt) else {
            skips.push(skip("ground truth beyond episode end".into()));
            continue;
        };
        records.push(AnnotationRecord {
            episode: name.into(),
            frame: f,
            timestamp: ep.frames[f].timestamp,
            kind: ep.kind(),
            drafting,
            arrowing,
            texting,
            gt,
            interest: ws.label,
            score: ws.score,
            warnings,
        });
    }
    (records, skips)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub episodes: Vec<String>,
    pub records: usize,
    pub per_command: BTreeMap<String, usize>,
    pub per_modality: BTreeMap<String, usize>,
    pub skips: Vec<Skip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Records grouped by episode, in episode order.
    pub records: Vec<(String, Vec<AnnotationRecord>)>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn all_records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().flat_map(|(_, r)| r.iter())
    }

    pub fn write(&self, dir: &Path) -> Result<(), AutolabelError> {
        std::fs::create_dir_all(dir)?;
        for (name, recs) in &self.records {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.labels.jsonl")))?);
            for r in recs {
                serde_json::to_writer(&mut f, r)?;
                f.write_all(b"\n")?;
            }
            f.flush()?;
        }
        let mut m = serde_json::to_string_pretty(&self.manifest)?;
        m.push('\n');
        std::fs::write(dir.join("manifest.json"), m)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, AutolabelError> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(AutolabelError::Invalid(format!("format {}", manifest.format)));
        }
        let mut records = Vec::new();
        let mut count = 0;
        for name in &manifest.episodes {
            let text = std::fs::read_to_string(dir.join(format!("{name}.labels.jsonl")))?;
            let recs: Vec<AnnotationRecord> =
                text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
            count += recs.len();
            records.push((name.clone(), recs));
        }
        if count != manifest.records {
            return Err(AutolabelError::Invalid(format!("{count} records, manifest says {}", manifest.records)));
        }
        Ok(Dataset { records, manifest })
    }
}

pub fn build_dataset(episodes: &[(String, EpisodeLog)], cfg: &AutolabelConfig, client: Option<&dyn Captioner>) -> Dataset {
    let mut records = Vec::new();
    let mut skips = Vec::new();
    for (name, ep) in episodes {
        let (r, s) = annotate_episode(name, ep, cfg, client);
        for sk in &s {
            log::info!("skip {}#{}: {}", sk.episode, sk.frame, sk.reason);
        }
        records.push((name.clone(), r));
        skips.extend(s);
    }
    let mut per_command = BTreeMap::new();
    let mut n = 0;
    for (_, rs) in &records {
        for r in rs {
            *per_command.entry(r.texting.command.phrase().to_string()).or_insert(0) += 1;
            n += 1;
        }
    }
    let per_modality =
        ["drafting", "arrowing", "texting"].iter().map(|m| (m.to_string(), n)).collect::<BTreeMap<_, _>>();
    Dataset {
        manifest: Manifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            episodes: episodes.iter().map(|(n, _)| n.clone()).collect(),
            records: n,
            per_command,
            per_modality,
            skips,
        },
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backproject_pixel, point_polyline_distance, PixelPoint, Pose2D};
    use crate::world::{defaults_for_kind, generate_episode, WorldConfig};

    fn episode(kind: WorldKind, seed: u64) -> EpisodeLog {
        let (ex, cfg) = defaults_for_kind(kind);
        generate_episode(seed, &WorldConfig::for_kind(kind), &ex, &cfg).unwrap()
    }

    fn st(speed: f64, heading: f64) -> RobotState {
        RobotState { pose: Pose2D::new(0.0, 0.0, heading), speed, yaw_rate: 0.0 }
    }

    #[test]
    fn saliency_examples() {
        let w = SaliencyWeights::default();
        let flat = vec![st(1.0, 0.0); 6];
        assert_eq!(motion_saliency(&flat, 5.0, &w), (0.0, 0.0));
        assert!((weighted_stats(&[0.5, 1.0], [1.0, 0.0, 0.0]) - 0.75).abs() < 1e-15);
        assert!((weighted_stats(&[0.5, 1.0], [0.0, 1.0, 0.0]) - 1.0).abs() < 1e-15);
        // From states: speeds 0, 0.1, 0.3 at 5 Hz give accelerations 0.5 and 1.0.
        let ramp = [st(0.0, 0.0), st(0.1, 0.0), st(0.3, 0.0)];
        let w1 = SaliencyWeights { accel: [1.0, 0.0, 0.0], ..w };
        assert!((motion_saliency(&ramp, 5.0, &w1).0 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn keyframe_examples() {
        assert_eq!(select_keyframes(&[(10, 5.0), (12, 4.0), (40, 3.0)], 2, 5), vec![10, 40]);
        let zeros: Vec<(usize, f64)> = (0..30).map(|f| (f, 0.0)).collect();
        assert_eq!(select_keyframes(&zeros, 3, 5), vec![0, 5, 10]);
        assert_eq!(select_keyframes(&[(1, 1.0), (2, 3.0), (3, 2.0)], 2, 0), vec![2, 3]);
        assert_eq!(select_keyframes(&[(1, 1.0)], 4, 2), vec![1]);
    }

    #[test]
    fn raising_priority_never_lowers_rank() {
        let w = SaliencyWeights::default();
        let raw = [(0usize, 1.0), (10, 1.5), (20, 0.9)];
        let boring: Vec<(usize, f64)> = raw.iter().map(|&(f, s)| (f, s * Interestingness::Boring.weight(&w))).collect();
        let mut promoted = boring.clone();
        promoted[2].1 = raw[2].1 * Interestingness::Interesting.weight(&w);
        let rank = |v: &[(usize, f64)], f: usize| {
            let mut o = v.to_vec();
            o.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            o.iter().position(|x| x.0 == f).unwrap()
        };
        assert!(rank(&promoted, 20) <= rank(&boring, 20));
    }

    #[test]
    fn interestingness_heuristic() {
        let cfg = InterestConfig::default();
        let empty = ClipSummary { obstacle_distance: f64::INFINITY, max_turn_rate: 0.0 };
        assert_eq!(heuristic_interestingness(&empty, &cfg), Interestingness::Boring);
        let near = ClipSummary { obstacle_distance: 1.0, max_turn_rate: 0.0 };
        assert_eq!(heuristic_interestingness(&near, &cfg), Interestingness::Interesting);
    }

    struct Broken;
    impl Captioner for Broken {
        fn query(&self, _: &CaptionRequest) -> Result<client::CaptionResponse, client::ClientError> {
            Ok(client::CaptionResponse { label: Some("maybe?".into()), text: None })
        }
    }

    #[test]
    fn malformed_captioner_falls_back_with_warning() {
        let s = ClipSummary { obstacle_distance: 1.0, max_turn_rate: 0.0 };
        let req = CaptionRequest { frames: vec![], prompt_id: "x".into() };
        let (l, w) = classify_interestingness(&s, Some(&req), Some(&Broken), &InterestConfig::default());
        assert_eq!(l, Interestingness::Interesting);
        assert!(w.is_some());
    }

    #[test]
    fn straight_drafting_is_on_the_center_column_and_round_trips() {
        let ep = episode(WorldKind::Straight, 3);
        let cam = CameraModel::default();
        let d = annotate_drafting(&ep, 10, &cam, 8, 4.0, "x".into()).unwrap();
        assert_eq!(d.points.len(), 8);
        for p in &d.points {
            assert!((p[0] - cam.cx / cam.width as f64).abs() < 1e-9, "{p:?}");
        }
        assert!(d.points.windows(2).all(|w| w[1][1] < w[0][1]));
        let path = future_ego(&ep, 10, 20).unwrap();
        let mut sq = 0.0;
        for p in &d.points {
            let g = backproject_pixel(&cam, cam.from_normalized(*p)).unwrap();
            sq += point_polyline_distance(g, &path).powi(2);
        }
        assert!((sq / 8.0).sqrt() < 0.02);
        let _ = PixelPoint::new(0.0, 0.0);
    }

    #[test]
    fn arrowing_examples() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(0.2, 0.0), Vec2::new(0.4, 0.0)];
        let (v, th) = arrowing_from_waypoints(&pts, 5.0);
        assert!((v - 1.0).abs() < 1e-12 && th == 0.0);
        let back = [Vec2::new(0.0, 0.0), Vec2::new(-0.2, 0.0)];
        let (v, th) = arrowing_from_waypoints(&back, 5.0);
        assert!((v + 1.0).abs() < 1e-12);
        assert!(th.abs() < 1e-12);
        assert_eq!(arrowing_from_waypoints(&[Vec2::default(); 3], 5.0), (0.0, 0.0));
    }

    #[test]
    fn arrowing_matches_logged_speed_on_straight_runs() {
        let ep = episode(WorldKind::Straight, 4);
        for f in [0, 20, 40] {
            let a = annotate_arrowing(&ep, f, 6, 5.0, String::new()).unwrap();
            let logged: f64 = ep.frames[f..f + 5].iter().map(|x| x.action.v).sum::<f64>() / 5.0;
            assert!((a.v - logged).abs() < 1e-3, "{} vs {logged}", a.v);
        }
    }

    #[test]
    fn texting_rules() {
        let th = TextingThresholds::default();
        let base = FutureStats {
            mean_turn_rate: 0.0,
            mean_accel: 0.0,
            start_speed: 1.0,
            end_speed: 1.0,
            forward_progress: 4.0,
            min_clearance: 5.0,
        };
        assert_eq!(texting_command(&base, &th), Command::GoStraight);
        assert_eq!(texting_command(&FutureStats { mean_turn_rate: 0.2, ..base }, &th), Command::TurnLeft);
        assert_eq!(texting_command(&FutureStats { end_speed: 0.0, mean_accel: -0.25, ..base }, &th), Command::Stop);
    }

    #[test]
    fn dataset_is_complete_and_deterministic() {
        let eps: Vec<(String, EpisodeLog)> =
            (0..4).map(|s| (format!("ep{s:03}"), episode(WorldKind::Corridor, s))).collect();
        let cfg = AutolabelConfig { keyframes: 5, ..Default::default() };
        let a = build_dataset(&eps, &cfg, None);
        assert!(a.manifest.records <= 20);
        assert_eq!(a.manifest.per_command.values().sum::<usize>(), a.manifest.records);
        assert_eq!(a.manifest.records + a.manifest.skips.len(), 20);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let b = build_dataset(&eps, &cfg, None);
        let dir2 = tempfile::tempdir().unwrap();
        b.write(dir2.path()).unwrap();
        for name in ["manifest.json", "ep000.labels.jsonl"] {
            assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(dir2.path().join(name)).unwrap());
        }
        assert_eq!(Dataset::load(dir.path()).unwrap(), a);
    }
}
