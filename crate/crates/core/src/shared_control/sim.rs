//! Pseudo-simulation over logged episodes and the open-loop benchmark sets.
//!
//! Predictions never alter the episode: every frame is judged against the
//! logged observation and the reference derived from the logged future.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    absorb_takeovers, collision_risk, compliance_check, corrupt_goal, decide, l2_at, min_ade, open_loop_metrics, pooled_metrics, ComplianceConfig, Decision, InterventionLog, OpenLoopMetrics,
    SharedControlMetrics,
};
use crate::autolabel::{annotate_arrowing, annotate_drafting, annotate_texting, AutolabelConfig};
use crate::geometry::{project_onto_polyline, world_to_ego, Vec2};
use crate::instruction::Instruction;
use crate::policy::{PolicyConfig, PolicyInput, PolicyModel, Trajectory, TrajectoryDistribution};
use crate::training::{scene_at, Scene};
use crate::world::{render_impassable_mask, route_point, EpisodeLog, WorldKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Point,
    Texting,
    Drafting,
    Arrowing,
}

impl SimMode {
    pub const ALL: [SimMode; 4] = [SimMode::Point, SimMode::Texting, SimMode::Drafting, SimMode::Arrowing];

    pub fn name(self) -> &'static str {
        match self {
            SimMode::Point => "point",
            SimMode::Texting => "texting",
            SimMode::Drafting => "drafting",
            SimMode::Arrowing => "arrowing",
        }
    }
}

impl FromStr for SimMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SimMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected point, texting, drafting or arrowing"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub takeover_duration: f64,
    /// Durations reported in the HO/TF/OF table.
    pub durations: Vec<f64>,
    pub compliance: ComplianceConfig,
    /// Downscale of the logged camera for the impassable mask.
    pub mask_downscale: u32,
    pub horizons: Vec<f64>,
    pub map_threshold: f64,
    /// Instruction synthesis, shared with the labeler.
    pub labels: AutolabelConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            takeover_duration: 1.0,
            durations: vec![0.2, 1.0, 2.0, 3.0],
            compliance: ComplianceConfig::default(),
            mask_downscale: 4,
            horizons: vec![1.0, 2.0],
            map_threshold: 2.0,
            labels: AutolabelConfig::default(),
        }
    }
}

/// What a planner sees at one evaluated frame.
pub struct SimQuery<'a> {
    pub episode: &'a str,
    pub frame: usize,
    pub input: &'a PolicyInput,
    pub noise_seed: u64,
}

pub trait Planner {
    fn policy_config(&self) -> &PolicyConfig;
    fn plan(&self, q: &SimQuery) -> Result<TrajectoryDistribution, String>;
}

impl Planner for PolicyModel {
    fn policy_config(&self) -> &PolicyConfig {
        &self.config
    }

    fn plan(&self, q: &SimQuery) -> Result<TrajectoryDistribution, String> {
        self.predict(q.input, q.noise_seed).map_err(|e| e.to_string())
    }
}

fn input_of(scene: &Scene, goal: Option<Vec2>, instruction: Option<Instruction>) -> PolicyInput {
    PolicyInput { rasters: scene.rasters.clone(), goal, front_view: Some(scene.front_view.clone()), instruction }
}

fn arrow_points(ep: &EpisodeLog, labels: &AutolabelConfig) -> usize {
    labels.arrow_points.unwrap_or(ep.frame_rate().round() as usize + 1)
}

fn instruction_for(mode: SimMode, ep: &EpisodeLog, frame: usize, draft: &Instruction, cfg: &SimConfig) -> Result<Instruction, String> {
    let t = ep.frames[frame].timestamp;
    Ok(match mode {
        SimMode::Point => unreachable!("point mode has no instruction"),
        SimMode::Drafting => draft.clone(),
        SimMode::Arrowing => {
            let a = annotate_arrowing(ep, frame, arrow_points(ep, &cfg.labels), ep.frame_rate(), String::new())?;
            Instruction::arrowing(a.v, a.theta, t)
        }
        SimMode::Texting => Instruction::texting(annotate_texting(ep, frame, cfg.labels.horizon_s, &cfg.labels.texting)?.command, t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: String,
    /// Evaluated frame indices; flags and the log are over these.
    pub frames: Vec<usize>,
    pub collisions: usize,
    pub non_compliant: usize,
    pub model_errors: usize,
    pub log: InterventionLog,
}

impl EpisodeEval {
    pub fn flagged(&self) -> usize {
        self.log.flags.iter().filter(|f| **f).count()
    }
}

struct FrameEval {
    flag: bool,
    collision: bool,
    compliant: bool,
    error: bool,
    dist: Option<TrajectoryDistribution>,
    gt: Trajectory,
}

fn eval_episode(
    planner: &dyn Planner,
    name: &str,
    ep_index: usize,
    ep: &EpisodeLog,
    mode: SimMode,
    cfg: &SimConfig,
) -> (EpisodeEval, Vec<(TrajectoryDistribution, Trajectory)>) {
    let pcfg = planner.policy_config();
    let mask_cam = ep.header.camera.downscaled(cfg.mask_downscale);
    let label_cam = &cfg.labels.camera;
    let half_width = ep.world().robot_radius;
    // One stream per (seed, episode, mode) so modes see independent noise
    // but identical frames.
    let mix = cfg.seed ^ (ep_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((mode as u64) << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut frames = Vec::new();
    let mut evals = Vec::new();
    for frame in 0..ep.frames.len() {
        let Some(scene) = scene_at(name, ep, frame, pcfg) else { continue };
        // Frames where the intended path cannot be drawn are skipped in every mode.
        let Ok(draft) = annotate_drafting(ep, frame, label_cam, cfg.labels.k_points, cfg.labels.horizon_s, String::new()) else {
            continue;
        };
        let Ok(draft) = Instruction::drafting(draft.points, ep.frames[frame].timestamp) else { continue };
        let noise_seed: u64 = rng.gen();
        let (input, reference) = if mode == SimMode::Point {
            let goal = corrupt_goal(scene.goal.unwrap_or_default(), &mut rng);
            (input_of(&scene, Some(goal), None), draft.clone())
        } else {
            match instruction_for(mode, ep, frame, &draft, cfg) {
                Ok(ins) => (input_of(&scene, None, Some(ins.clone())), ins),
                Err(e) => {
                    log::warn!("{name}#{frame}: no {} instruction: {e}", mode.name());
                    continue;
                }
            }
        };
        frames.push(frame);
        let q = SimQuery { episode: name, frame, input: &input, noise_seed };
        let e = match planner.plan(&q) {
            Ok(dist) => {
                let pred = dist.selected();
                let f = &ep.frames[frame];
                let m_f = render_impassable_mask(ep.world(), &f.state.pose, f.timestamp, &mask_cam);
                let risk = collision_risk(pred, half_width, &m_f, &mask_cam);
                let compliant = compliance_check(pred, &reference, label_cam, &cfg.compliance);
                // Offline there is nobody to inject an instruction.
                let decision = decide(risk.flag, compliant, false);
                FrameEval { flag: decision != Decision::Execute, collision: risk.flag, compliant, error: false, gt: scene.gt.clone(), dist: Some(dist) }
            }
            Err(err) => {
                log::warn!("{name}#{frame}: model failure: {err}");
                FrameEval { flag: true, collision: false, compliant: false, error: true, dist: None, gt: scene.gt.clone() }
            }
        };
        evals.push(e);
    }
    let flags: Vec<bool> = evals.iter().map(|e| e.flag).collect();
    let log = absorb_takeovers(&flags, cfg.takeover_duration, ep.frame_rate());
    let out = EpisodeEval {
        episode: name.to_string(),
        frames,
        collisions: evals.iter().filter(|e| e.collision).count(),
        non_compliant: evals.iter().filter(|e| !e.error && !e.compliant).count(),
        model_errors: evals.iter().filter(|e| e.error).count(),
        log,
    };
    let pairs = evals.into_iter().filter_map(|e| e.dist.map(|d| (d, e.gt))).collect();
    (out, pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationRow {
    pub duration: f64,
    pub metrics: SharedControlMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: SimMode,
    pub seed: u64,
    pub takeover_duration: f64,
    pub episodes: Vec<EpisodeEval>,
    pub evaluated_frames: usize,
    pub flagged_frames: usize,
    /// Flagged frames over evaluated frames, before absorption.
    pub flag_rate: f64,
    pub metrics: SharedControlMetrics,
    pub per_duration: Vec<DurationRow>,
    pub open_loop: OpenLoopMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// HO/TF/OF per takeover duration.
    pub fn shared_control_csv(&self) -> String {
        let mut s = String::from("mode,duration_s,ho_percent,tf_per_s,of_per_s,events,covered_frames,total_frames\n");
        for r in &self.per_duration {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{},{}",
                self.mode.name(),
                r.duration,
                m.ho,
                m.tf,
                m.of,
                m.events,
                m.covered_frames,
                m.total_frames
            );
        }
        s
    }

    /// Open-loop columns: minADE, minFDE and L2 per horizon, then mAP.
    pub fn open_loop_csv(&self) -> String {
        let o = &self.open_loop;
        let mut head = vec!["mode".to_string()];
        let mut row = vec![self.mode.name().to_string()];
        for (name, vals) in [("minADE", &o.min_ade), ("minFDE", &o.min_fde), ("L2", &o.l2)] {
            for (h, v) in o.horizons.iter().zip(vals.iter()) {
                head.push(format!("{name}_{h}s"));
                row.push(format!("{v:.6}"));
            }
        }
        head.push("mAP".into());
        row.push(format!("{:.6}", o.map));
        head.push("samples".into());
        row.push(o.samples.to_string());
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

/// Runs one mode over the episodes and assembles the report.
pub fn pseudo_sim_run(planner: &dyn Planner, episodes: &[(String, EpisodeLog)], mode: SimMode, cfg: &SimConfig) -> EvalReport {
    let mut evals = Vec::new();
    let mut pairs = Vec::new();
    for (i, (name, ep)) in episodes.iter().enumerate() {
        let (e, p) = eval_episode(planner, name, i, ep, mode, cfg);
        evals.push(e);
        pairs.extend(p);
    }
    let evaluated: usize = evals.iter().map(|e| e.frames.len()).sum();
    let flagged: usize = evals.iter().map(EpisodeEval::flagged).sum();
    let logs: Vec<InterventionLog> = evals.iter().map(|e| e.log.clone()).collect();
    let per_duration = cfg
        .durations
        .iter()
        .map(|&d| {
            let relogged: Vec<InterventionLog> = logs.iter().map(|l| absorb_takeovers(&l.flags, d, l.frame_rate)).collect();
            DurationRow { duration: d, metrics: pooled_metrics(&relogged) }
        })
        .collect();
    let (dists, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let dt = planner.policy_config().dt;
    EvalReport {
        mode,
        seed: cfg.seed,
        takeover_duration: cfg.takeover_duration,
        evaluated_frames: evaluated,
        flagged_frames: flagged,
        flag_rate: if evaluated == 0 { 0.0 } else { flagged as f64 / evaluated as f64 },
        metrics: pooled_metrics(&logs),
        per_duration,
        open_loop: open_loop_metrics(&dists, &gts, &cfg.horizons, dt, cfg.map_threshold),
        episodes: evals,
    }
}

/// Ego-frame goal halfway between the lookahead points on both branches.
pub fn ambiguous_goal(ep: &EpisodeLog, frame: usize) -> Option<Vec2> {
    let w = ep.world();
    let fork = w.fork_s?;
    let other = w.branches.first()?;
    let pose = ep.frames[frame].state.pose;
    let (s, _) = project_onto_polyline(pose.position(), &w.centerline);
    let la = ep.header.goal_lookahead;
    let route = route_point(&w.centerline, s + la);
    // The stored branch starts at the fork; past it, arc length continues from there.
    let along = s + la - fork;
    let off = if along <= 0.0 { route } else { route_point(other, along) };
    Some(world_to_ego(&pose, (route + off) * 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionScene {
    pub episode: String,
    pub frame: usize,
    pub guided_l2: f64,
    pub unguided_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionReport {
    pub horizon: f64,
    pub scenes: Vec<JunctionScene>,
    /// Fraction of scenes where the drafted run is strictly closer.
    pub guided_better: f64,
    pub mean_guided: f64,
    pub mean_unguided: f64,
}

/// Frames around the fork of held-out junction episodes, predicted once with
/// an ambiguous goal and once with the drafted intended path and no goal.
pub fn yjunction_benchmark(
    planner: &dyn Planner,
    episodes: &[(String, EpisodeLog)],
    window: (f64, f64),
    horizon: f64,
    cfg: &SimConfig,
) -> JunctionReport {
    let pcfg = planner.policy_config();
    let k = ((horizon / pcfg.dt).round() as usize).max(1) - 1;
    let mut scenes = Vec::new();
    for (i, (name, ep)) in episodes.iter().enumerate() {
        let w = ep.world();
        let (Some(fork), WorldKind::YJunction) = (w.fork_s, w.kind) else { continue };
        for frame in 0..ep.frames.len() {
            let (s, _) = project_onto_polyline(ep.frames[frame].state.pose.position(), &w.centerline);
            if s < fork + window.0 || s > fork + window.1 {
                continue;
            }
            let Some(scene) = scene_at(name, ep, frame, pcfg) else { continue };
            let Ok(d) = annotate_drafting(ep, frame, &cfg.labels.camera, cfg.labels.k_points, cfg.labels.horizon_s, String::new()) else {
                continue;
            };
            let Ok(draft) = Instruction::drafting(d.points, ep.frames[frame].timestamp) else { continue };
            let Some(goal) = ambiguous_goal(ep, frame) else { continue };
            let seed = cfg.seed ^ ((i as u64) << 20) ^ frame as u64;
            let unguided = input_of(&scene, Some(goal), None);
            let guided = input_of(&scene, None, Some(draft));
            let run = |inp: &PolicyInput| {
                planner.plan(&SimQuery { episode: name, frame, input: inp, noise_seed: seed }).map(|d| l2_at(&d, &scene.gt, k))
            };
            match (run(&guided), run(&unguided)) {
                (Ok(g), Ok(u)) => scenes.push(JunctionScene { episode: name.clone(), frame, guided_l2: g, unguided_l2: u }),
                (a, b) => log::warn!("{name}#{frame}: junction prediction failed: {:?} {:?}", a.err(), b.err()),
            }
        }
    }
    let n = scenes.len().max(1) as f64;
    JunctionReport {
        horizon,
        guided_better: scenes.iter().filter(|s| s.guided_l2 < s.unguided_l2).count() as f64 / n,
        mean_guided: scenes.iter().map(|s| s.guided_l2).sum::<f64>() / n,
        mean_unguided: scenes.iter().map(|s| s.unguided_l2).sum::<f64>() / n,
        scenes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StraightReport {
    pub samples: usize,
    pub min_ade: f64,
}

/// Goal-conditioned minADE over the full horizon on straight-corridor episodes.
pub fn straight_benchmark(planner: &dyn Planner, episodes: &[(String, EpisodeLog)], stride: usize, seed: u64) -> StraightReport {
    let pcfg = planner.policy_config();
    let mut total = 0.0;
    let mut n = 0;
    for (i, (name, ep)) in episodes.iter().enumerate() {
        if ep.kind() != WorldKind::Straight {
            continue;
        }
        for frame in (0..ep.frames.len()).step_by(stride.max(1)) {
            let Some(scene) = scene_at(name, ep, frame, pcfg) else { continue };
            let inp = input_of(&scene, scene.goal, None);
            let q = SimQuery { episode: name, frame, input: &inp, noise_seed: seed ^ ((i as u64) << 20) ^ frame as u64 };
            match planner.plan(&q) {
                Ok(d) => {
                    total += min_ade(&d, &scene.gt, scene.gt.len() - 1);
                    n += 1;
                }
                Err(e) => log::warn!("{name}#{frame}: {e}"),
            }
        }
    }
    StraightReport { samples: n, min_ade: if n == 0 { f64::NAN } else { total / n as f64 } }
}
