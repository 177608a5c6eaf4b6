//! Staged optimization: a visual pretraining pass, instruction-encoder
//! adaptation (stage 1) and decoder training on frozen features (stage 2).

pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autolabel::{AnnotationRecord, Dataset};
use crate::geometry::Vec2;
use crate::instruction::{Command, Instruction};
use crate::nn::gradcheck::{gradient_check, GradCheckReport};
use crate::nn::{AdamConfig, AdamW, Mat, ParamId, ParamStore, Tape, Var};
use crate::policy::model::trajectories_to_mat;
use crate::policy::{
    argmax, cluster_anchors, AnchorSet, DiffusionSchedule, FrozenFeatures, PolicyConfig, PolicyError, PolicyModel,
    Trajectory,
};
use crate::world::{
    defaults_for_kind, generate_episode, render_front_view, EpisodeLog, Raster, SemanticImage, WorldConfig, WorldError,
    WorldKind,
};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointError};

/// Regression targets are divided by this (m).
const TARGET_SCALE: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{phase} diverged at epoch {epoch}, batch {batch}")]
    Divergence { phase: String, epoch: usize, batch: usize },
    #[error("{phase} changed frozen parameters under {prefix}")]
    FreezeViolated { phase: String, prefix: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl PhaseConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self { epochs: 4, lr: 1e-3, batch: 8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Probability of dropping the goal when an instruction is present.
    pub goal_dropout: f64,
    /// Regress every mode instead of only the winner.
    pub all_modes_reg: bool,
    /// Use one fixed noise draw at `t_trunc` instead of sampling per step.
    pub fixed_noise: bool,
    /// Final learning rate of the per-epoch cosine decay, as a fraction of `lr`.
    pub lr_floor: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 16,
            lr: 1e-3,
            batch: 8,
            weight_decay: 0.0,
            goal_dropout: 0.3,
            all_modes_reg: false,
            fixed_noise: false,
            lr_floor: 0.05,
        }
    }
}

impl Stage2Config {
    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        let c = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / (self.epochs - 1) as f64).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub t_trunc: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 10, t_trunc: 5, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule, TrainError> {
        if !(self.steps >= 1 && (1..=self.steps).contains(&self.t_trunc)) {
            return Err(TrainError::Config(format!("t_trunc {} outside 1..={}", self.t_trunc, self.steps)));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(TrainError::Config("need 0 < beta_start < beta_end < 1".into()));
        }
        Ok(DiffusionSchedule::linear(self.steps, self.t_trunc, self.beta_start, self.beta_end))
    }
}

/// Episode counts per world kind. Episode `i` of a kind uses seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub corridor: usize,
    pub straight: usize,
    pub yjunction: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { corridor: 200, straight: 100, yjunction: 200, seed: 0 }
    }
}

pub fn kind_name(kind: WorldKind) -> &'static str {
    match kind {
        WorldKind::Corridor => "corridor",
        WorldKind::Straight => "straight",
        WorldKind::YJunction => "yjunction",
    }
}

pub fn episode_name(kind: WorldKind, seed: u64) -> String {
    format!("{}-{seed:05}", kind_name(kind))
}

impl CorpusConfig {
    pub fn total(&self) -> usize {
        self.corridor + self.straight + self.yjunction
    }

    pub fn generate(&self) -> Result<Vec<(String, EpisodeLog)>, TrainError> {
        let mut out = Vec::with_capacity(self.total());
        for (kind, n) in [
            (WorldKind::Corridor, self.corridor),
            (WorldKind::Straight, self.straight),
            (WorldKind::YJunction, self.yjunction),
        ] {
            let (ex, ep) = defaults_for_kind(kind);
            let wc = WorldConfig::for_kind(kind);
            for i in 0..n as u64 {
                let seed = self.seed + i;
                out.push((episode_name(kind, seed), generate_episode(seed, &wc, &ex, &ep)?));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub policy: PolicyConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PhaseConfig,
    pub stage1: PhaseConfig,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            policy: PolicyConfig::toy(),
            schedule: ScheduleConfig::default(),
            pretrain: PhaseConfig { epochs: 3, ..PhaseConfig::default() },
            stage1: PhaseConfig { epochs: 4, ..PhaseConfig::default() },
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self, TrainError> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.policy.validate().map_err(TrainError::Config)?;
        self.schedule.build()?;
        if [self.pretrain.batch, self.stage1.batch, self.stage2.batch].contains(&0) {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stage2.goal_dropout) {
            return Err(TrainError::Config("goal_dropout outside [0, 1]".into()));
        }
        if !(self.stage2.lr_floor > 0.0 && self.stage2.lr_floor <= 1.0) {
            return Err(TrainError::Config("lr_floor outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// What the policy sees at one logged frame, plus the expert future.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub episode: String,
    pub frame: usize,
    pub kind: WorldKind,
    pub rasters: Vec<Raster>,
    pub goal: Option<Vec2>,
    pub front_view: SemanticImage,
    pub gt: Trajectory,
}

/// `None` when the episode ends before the horizon.
pub fn scene_at(name: &str, ep: &EpisodeLog, frame: usize, cfg: &PolicyConfig) -> Option<Scene> {
    let gt = ep.future_trajectory(frame, cfg.horizon, cfg.dt)?;
    let rasters = ep
        .history(frame, cfg.history)
        .into_iter()
        .map(|i| ep.frames[i].raster.decode().expect("logged raster decodes"))
        .collect();
    let f = &ep.frames[frame];
    let cam = ep.header.camera.downscaled(cfg.front_downscale);
    Some(Scene {
        episode: name.to_string(),
        frame,
        kind: ep.kind(),
        rasters,
        goal: f.goal,
        front_view: render_front_view(ep.world(), &f.state.pose, f.timestamp, &cam),
        gt,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub scene: Scene,
    pub record: AnnotationRecord,
}

pub fn build_scenes(
    dataset: &Dataset,
    episodes: &[(String, EpisodeLog)],
    cfg: &PolicyConfig,
) -> Result<Vec<TrainScene>, TrainError> {
    let by_name: BTreeMap<&str, &EpisodeLog> = episodes.iter().map(|(n, e)| (n.as_str(), e)).collect();
    let mut out = Vec::new();
    for r in dataset.all_records() {
        let ep = by_name.get(r.episode.as_str()).ok_or_else(|| TrainError::Data(format!("no episode {}", r.episode)))?;
        if r.gt.len() != cfg.horizon {
            return Err(TrainError::Data(format!("{}#{}: gt has {} waypoints", r.episode, r.frame, r.gt.len())));
        }
        let scene = scene_at(&r.episode, ep, r.frame, cfg)
            .ok_or_else(|| TrainError::Data(format!("{}#{} beyond episode end", r.episode, r.frame)))?;
        out.push(TrainScene { scene, record: r.clone() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Goal,
    Texting,
    Drafting,
    Arrowing,
}

impl Conditioning {
    pub const ALL: [Conditioning; 4] = [Conditioning::Goal, Conditioning::Texting, Conditioning::Drafting, Conditioning::Arrowing];
    pub const INSTRUCTIONS: [Conditioning; 3] = [Conditioning::Texting, Conditioning::Drafting, Conditioning::Arrowing];
}

/// One supervised example: observation, conditioning and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<'a> {
    pub scene: &'a Scene,
    pub goal: Option<Vec2>,
    pub instruction: Option<Instruction>,
    pub command_label: Option<Command>,
}

impl TrainScene {
    pub fn instruction(&self, c: Conditioning) -> Option<Instruction> {
        match c {
            Conditioning::Goal => None,
            Conditioning::Texting => Some(self.record.texting_instruction()),
            Conditioning::Drafting => Some(self.record.drafting_instruction()),
            Conditioning::Arrowing => Some(self.record.arrowing_instruction()),
        }
    }

    pub fn sample(&self, c: Conditioning, keep_goal: bool) -> TrainSample<'_> {
        let instruction = self.instruction(c);
        let goal = if instruction.is_none() || keep_goal { self.scene.goal } else { None };
        TrainSample { scene: &self.scene, goal, instruction, command_label: Some(self.record.texting.command) }
    }
}

impl TrainSample<'_> {
    pub fn gt(&self) -> &Trajectory {
        &self.scene.gt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub winner: usize,
}

/// Mean Euclidean waypoint distance.
pub fn average_l2(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.dist(*q)).sum::<f64>() / a.len() as f64
}

pub fn mean_squared_distance(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (*p - *q).dot(*p - *q)).sum::<f64>() / a.len() as f64
}

/// Mode closest to the ground truth by average L2; ties go low.
pub fn winner_mode(modes: &[Trajectory], gt: &[Vec2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, m) in modes.iter().enumerate() {
        let d = average_l2(m, gt);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Winner-take-all classification plus regression of the winner, or of
/// every mode with `all_modes`.
pub fn compute_loss(logits: &[f64], modes: &[Trajectory], gt: &[Vec2], all_modes: bool) -> LossReport {
    assert_eq!(logits.len(), modes.len(), "one logit per mode");
    let winner = winner_mode(modes, gt);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let l_cls = lse - logits[winner];
    let l_reg = if all_modes {
        modes.iter().map(|m| mean_squared_distance(m, gt)).sum::<f64>() / modes.len() as f64
    } else {
        mean_squared_distance(&modes[winner], gt)
    };
    LossReport { total: l_cls + l_reg, l_cls, l_reg, winner }
}

/// Tape version of [`compute_loss`] on decoder outputs.
pub fn loss_on_tape(t: &mut Tape, clean: Var, logits: Var, gt: &[Vec2], all_modes: bool) -> (Var, LossReport) {
    let h = gt.len();
    let cm = t.value(clean).clone();
    let m = cm.rows / h;
    let modes = crate::policy::model::mat_to_trajectories(&cm, h);
    let winner = winner_mode(&modes, gt);
    let l_cls = t.cross_entropy(logits, &[winner]);
    let l_reg = if all_modes {
        let g = trajectories_to_mat(&vec![gt.to_vec(); m]);
        let g = t.constant(g);
        let d = t.sub(clean, g);
        let sq = t.mul(d, d);
        let s = t.sum(sq);
        t.scale(s, 1.0 / (m * h) as f64)
    } else {
        let w = t.slice_rows(clean, winner * h, h);
        let g = t.constant(trajectories_to_mat(&[gt.to_vec()]));
        let d = t.sub(w, g);
        let sq = t.mul(d, d);
        let s = t.sum(sq);
        t.scale(s, 1.0 / h as f64)
    };
    let total = t.add(l_cls, l_reg);
    let report = LossReport {
        total: t.value(total).data[0],
        l_cls: t.value(l_cls).data[0],
        l_reg: t.value(l_reg).data[0],
        winner,
    };
    (total, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    /// Command accuracy in stage 1, winner accuracy in stage 2.
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "phase,epoch,loss,l_cls,l_reg,accuracy";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.phase, self.epoch, self.loss, self.l_cls, self.l_reg, self.accuracy)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Digest of every tensor under `prefix`, used to prove freezing.
pub fn prefix_digest(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for id in store.ids_with_prefix(prefix) {
        h.update(store.name(id).as_bytes());
        for x in &store.get(id).data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Sums per-sample gradients of the trainable set over a batch.
struct Accumulator {
    trainable: BTreeSet<ParamId>,
    sums: BTreeMap<ParamId, Mat>,
    n: usize,
}

impl Accumulator {
    fn new(opt: &AdamW) -> Self {
        Self { trainable: opt.trainable().iter().copied().collect(), sums: BTreeMap::new(), n: 0 }
    }

    fn add(&mut self, tape: &Tape, loss: Var) {
        let g = tape.backward(loss);
        for (id, m) in g.params(tape) {
            if !self.trainable.contains(&id) {
                continue;
            }
            match self.sums.get_mut(&id) {
                Some(s) => s.add_assign(&m),
                None => {
                    self.sums.insert(id, m);
                }
            }
        }
        self.n += 1;
    }

    fn apply(&mut self, opt: &mut AdamW, store: &mut ParamStore) {
        if self.n == 0 {
            return;
        }
        let inv = 1.0 / self.n as f64;
        let grads: Vec<(ParamId, Mat)> = std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(id, mut m)| {
                m.scale_assign(inv);
                (id, m)
            })
            .collect();
        self.n = 0;
        opt.step(store, &grads);
    }
}

fn check_frozen(store: &ParamStore, before: &[(String, String)], phase: &str) -> Result<(), TrainError> {
    for (prefix, digest) in before {
        if &prefix_digest(store, prefix) != digest {
            return Err(TrainError::FreezeViolated { phase: phase.into(), prefix: prefix.clone() });
        }
    }
    Ok(())
}

fn digests(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, String)> {
    prefixes.iter().map(|p| (p.to_string(), prefix_digest(store, p))).collect()
}

fn gt_row(gt: &[Vec2]) -> Mat {
    Mat::row_vector(gt.iter().flat_map(|p| [p.x / TARGET_SCALE, p.y / TARGET_SCALE]).collect())
}

fn mse(t: &mut Tape, pred: Var, target: Mat) -> Var {
    let n = target.len() as f64;
    let c = t.constant(target);
    let d = t.sub(pred, c);
    let sq = t.mul(d, d);
    let s = t.sum(sq);
    t.scale(s, 1.0 / n)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    idx.shuffle(&mut rng);
    idx
}

/// Fits the visual encoders through their two trajectory heads.
pub fn pretrain_visual(model: &mut PolicyModel, scenes: &[TrainScene], cfg: &PhaseConfig, seed: u64) -> Result<Vec<EpochMetrics>, TrainError> {
    let frozen = digests(&model.store, &["sie.", "goal.", "dec."]);
    let mut opt = AdamW::for_prefixes(cfg.adam(), &model.store, &["vis."]);
    let mut acc = Accumulator::new(&opt);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, chunk) in shuffled(scenes.len(), seed, epoch).chunks(cfg.batch).enumerate() {
            for &i in chunk {
                let s = &scenes[i].scene;
                let mut t = Tape::new();
                let r = model.raster_tokens(&mut t, &model.store, &s.rasters)?;
                let pr = model.raster_head(&mut t, &model.store, r, s.goal);
                let f = model.front_tokens(&mut t, &model.store, &s.front_view, None)?;
                let pf = model.front_head(&mut t, &model.store, f);
                let a = mse(&mut t, pr, gt_row(&s.gt));
                let c = mse(&mut t, pf, gt_row(&s.gt));
                let loss = t.add(a, c);
                let v = t.value(loss).data[0];
                if !v.is_finite() {
                    return Err(TrainError::Divergence { phase: "pretrain".into(), epoch, batch: b });
                }
                total += v;
                acc.add(&t, loss);
            }
            acc.apply(&mut opt, &mut model.store);
        }
        let loss = total / scenes.len().max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.5}");
        out.push(EpochMetrics { phase: "pretrain".into(), epoch, loss, l_cls: 0.0, l_reg: loss, accuracy: 0.0 });
    }
    check_frozen(&model.store, &frozen, "pretrain")?;
    Ok(out)
}

/// Front-view tokens with the instruction overlay, computed once since the
/// visual encoder is frozen after pretraining.
fn overlay_tokens(model: &PolicyModel, view: &SemanticImage, ins: &Instruction) -> Result<Mat, TrainError> {
    let mut t = Tape::new();
    let v = model.front_tokens(&mut t, &model.store, view, Some(ins))?;
    Ok(t.value(v).clone())
}

fn stage1_targets(gt: &[Vec2]) -> Mat {
    let mid = gt[gt.len() / 2 - 1];
    let end = gt[gt.len() - 1];
    Mat::row_vector(vec![mid.x / TARGET_SCALE, mid.y / TARGET_SCALE, end.x / TARGET_SCALE, end.y / TARGET_SCALE])
}

/// Command classification plus midpoint/endpoint regression from fused
/// instruction tokens. Trains only the instruction encoder.
pub fn train_stage1(model: &mut PolicyModel, scenes: &[TrainScene], cfg: &PhaseConfig, seed: u64) -> Result<Vec<EpochMetrics>, TrainError> {
    let frozen = digests(&model.store, &["vis.", "goal.", "dec."]);
    let mut inputs = Vec::with_capacity(scenes.len() * 3);
    for (i, s) in scenes.iter().enumerate() {
        for c in Conditioning::INSTRUCTIONS {
            let ins = s.instruction(c).expect("instruction variant");
            let vc = overlay_tokens(model, &s.scene.front_view, &ins)?;
            inputs.push((i, ins, vc));
        }
    }
    let mut opt = AdamW::for_prefixes(cfg.adam(), &model.store, &["sie."]);
    let mut acc = Accumulator::new(&opt);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let (mut lc, mut lr, mut correct) = (0.0, 0.0, 0usize);
        for (b, chunk) in shuffled(inputs.len(), seed.wrapping_add(1), epoch).chunks(cfg.batch).enumerate() {
            for &k in chunk {
                let (i, ins, vc) = &inputs[k];
                let s = &scenes[*i];
                let mut t = Tape::new();
                let v = t.constant(vc.clone());
                let tok = model.sie.encode(&mut t, &model.store, ins, v).map_err(PolicyError::from)?;
                let (logits, reg) = model.instruction_heads(&mut t, &model.store, tok);
                let label = s.record.texting.command.index();
                let ce = t.cross_entropy(logits, &[label]);
                let re = mse(&mut t, reg, stage1_targets(&s.scene.gt));
                let loss = t.add(ce, re);
                let (a, r) = (t.value(ce).data[0], t.value(re).data[0]);
                if !(a + r).is_finite() {
                    return Err(TrainError::Divergence { phase: "stage1".into(), epoch, batch: b });
                }
                lc += a;
                lr += r;
                correct += usize::from(argmax(&t.value(logits).data) == label);
                acc.add(&t, loss);
            }
            acc.apply(&mut opt, &mut model.store);
        }
        let n = inputs.len().max(1) as f64;
        let m = EpochMetrics { phase: "stage1".into(), epoch, loss: (lc + lr) / n, l_cls: lc / n, l_reg: lr / n, accuracy: correct as f64 / n };
        log::info!("stage1 epoch {epoch}: loss {:.5} acc {:.3}", m.loss, m.accuracy);
        out.push(m);
    }
    check_frozen(&model.store, &frozen, "stage1")?;
    Ok(out)
}

/// Frozen features of one scene under every conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub raster: Mat,
    pub instructions: BTreeMap<Conditioning, Mat>,
}

impl SceneFeatures {
    pub fn frozen(&self, c: Conditioning) -> FrozenFeatures {
        FrozenFeatures { raster_tokens: self.raster.clone(), instruction_tokens: self.instructions.get(&c).cloned() }
    }
}

pub fn scene_features(model: &PolicyModel, s: &TrainScene) -> Result<SceneFeatures, TrainError> {
    let mut t = Tape::new();
    let r = model.raster_tokens(&mut t, &model.store, &s.scene.rasters)?;
    let raster = t.value(r).clone();
    let mut instructions = BTreeMap::new();
    for c in Conditioning::INSTRUCTIONS {
        let ins = s.instruction(c).expect("instruction variant");
        let tok = model.instruction_tokens(&mut t, &model.store, &s.scene.front_view, &ins)?;
        instructions.insert(c, t.value(tok).clone());
    }
    Ok(SceneFeatures { raster, instructions })
}

/// Loss of one denoising pass from anchors noised to `t_d`.
pub fn stage2_loss(
    model: &PolicyModel,
    store: &ParamStore,
    t: &mut Tape,
    f: &FrozenFeatures,
    goal: Option<Vec2>,
    gt: &[Vec2],
    t_d: usize,
    noise: &[f64],
    all_modes: bool,
) -> (Var, LossReport, Vec<f64>) {
    let (ctx, g) = model.context(t, store, f, goal);
    let x = t.constant(model.noised_anchors(t_d, noise));
    let (clean, logits) = model.denoise(t, store, x, ctx, g, t_d);
    let lg = t.value(logits).data.clone();
    let (loss, rep) = loss_on_tape(t, clean, logits, gt, all_modes);
    (loss, rep, lg)
}

/// Trains the goal encoder and decoder on precomputed frozen features.
pub fn train_stage2(model: &mut PolicyModel, scenes: &[TrainScene], cfg: &Stage2Config, seed: u64) -> Result<Vec<EpochMetrics>, TrainError> {
    let frozen = digests(&model.store, &["vis.", "sie."]);
    let feats: Vec<SceneFeatures> = scenes.iter().map(|s| scene_features(model, s)).collect::<Result<_, _>>()?;
    let mut opt = AdamW::for_prefixes(cfg.adam(), &model.store, &["goal.", "dec."]);
    let mut acc = Accumulator::new(&opt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let n_noise = model.config.modes * model.config.horizon * 2;
    let fixed = model.noise(seed);
    let t_trunc = model.schedule.t_trunc;
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.config.lr = cfg.lr_at(epoch);
        let (mut lc, mut lr, mut correct) = (0.0, 0.0, 0usize);
        for (b, chunk) in shuffled(scenes.len(), seed.wrapping_add(3), epoch).chunks(cfg.batch).enumerate() {
            for &i in chunk {
                let c = Conditioning::ALL[rng.gen_range(0..4)];
                let keep_goal = c == Conditioning::Goal || rng.gen::<f64>() >= cfg.goal_dropout;
                let sample = scenes[i].sample(c, keep_goal);
                let (t_d, noise) = if cfg.fixed_noise {
                    (t_trunc, fixed.clone())
                } else {
                    (rng.gen_range(1..=t_trunc), (0..n_noise).map(|_| StandardNormal.sample(&mut rng)).collect())
                };
                let mut t = Tape::new();
                let f = feats[i].frozen(c);
                let (loss, rep, logits) =
                    stage2_loss(model, &model.store, &mut t, &f, sample.goal, sample.gt(), t_d, &noise, cfg.all_modes_reg);
                if !rep.total.is_finite() {
                    return Err(TrainError::Divergence { phase: "stage2".into(), epoch, batch: b });
                }
                lc += rep.l_cls;
                lr += rep.l_reg;
                correct += usize::from(argmax(&logits) == rep.winner);
                acc.add(&t, loss);
            }
            acc.apply(&mut opt, &mut model.store);
        }
        let n = scenes.len().max(1) as f64;
        let m = EpochMetrics { phase: "stage2".into(), epoch, loss: (lc + lr) / n, l_cls: lc / n, l_reg: lr / n, accuracy: correct as f64 / n };
        log::info!("stage2 epoch {epoch}: loss {:.5} (cls {:.4}, reg {:.4}) acc {:.3}", m.loss, m.l_cls, m.l_reg, m.accuracy);
        out.push(m);
    }
    check_frozen(&model.store, &frozen, "stage2")?;
    Ok(out)
}

pub fn fit_anchors(scenes: &[TrainScene], cfg: &PolicyConfig) -> Result<AnchorSet, TrainError> {
    let trajs: Vec<Trajectory> = scenes.iter().map(|s| s.scene.gt.clone()).collect();
    Ok(cluster_anchors(&trajs, cfg.modes, cfg.seed)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Anchors, then the three phases in order.
pub fn train(cfg: &TrainConfig, scenes: &[TrainScene]) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::Data("no training scenes".into()));
    }
    let anchors = fit_anchors(scenes, &cfg.policy)?;
    let mut model = PolicyModel::new(cfg.policy.clone(), anchors, cfg.schedule.build()?)?;
    let mut metrics = pretrain_visual(&mut model, scenes, &cfg.pretrain, cfg.seed)?;
    metrics.extend(train_stage1(&mut model, scenes, &cfg.stage1, cfg.seed)?);
    metrics.extend(train_stage2(&mut model, scenes, &cfg.stage2, cfg.seed)?);
    Ok(TrainOutcome { model, metrics })
}

/// Texting command accuracy of the stage-1 classifier.
pub fn command_accuracy(model: &PolicyModel, scenes: &[TrainScene]) -> Result<f64, TrainError> {
    let mut correct = 0;
    for s in scenes {
        let ins = s.record.texting_instruction();
        let mut t = Tape::new();
        let tok = model.instruction_tokens(&mut t, &model.store, &s.scene.front_view, &ins)?;
        let (logits, _) = model.instruction_heads(&mut t, &model.store, tok);
        correct += usize::from(argmax(&t.value(logits).data) == s.record.texting.command.index());
    }
    Ok(correct as f64 / scenes.len().max(1) as f64)
}

/// Parameters checked by the full-stack gradient check: visual front
/// encoder, instruction encoder, goal encoder and decoder. Key biases are
/// skipped because softmax is invariant to them, so their true gradient
/// is zero and finite differences only see rounding. The Fourier basis is
/// a fixed constant.
pub fn gradcheck_params(store: &ParamStore) -> Vec<ParamId> {
    ["vis.front", "sie.", "goal.", "dec."]
        .iter()
        .flat_map(|p| store.ids_with_prefix(p).collect::<Vec<_>>())
        .filter(|&id| {
            let n = store.name(id);
            !n.ends_with(".k.b") && n != "sie.fourier"
        })
        .collect()
}

/// Finite-difference check of the instruction encoder, goal encoder and
/// decoder on one drafting sample. Parameters are jittered first so that
/// zero-initialized layers carry gradient.
pub fn full_stack_gradient_check(
    model: &PolicyModel,
    scene: &TrainScene,
    eps: f64,
    min_coords: usize,
    seed: u64,
    fault: Option<(&str, f64)>,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = model.store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        for x in &mut store.get_mut(id).data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += 0.05 * z;
        }
    }
    let ins = scene.instruction(Conditioning::Drafting).expect("drafting");
    let raster = {
        let mut t = Tape::new();
        let r = model.raster_tokens(&mut t, &store, &scene.scene.rasters)?;
        t.value(r).clone()
    };
    let noise = model.noise(seed);
    let t_d = model.schedule.t_trunc;
    let params = gradcheck_params(&store);
    let fault = match fault {
        Some((name, s)) => Some((store.id(name).ok_or_else(|| TrainError::Config(format!("no parameter {name}")))?, s)),
        None => None,
    };
    let loss = |s: &ParamStore, t: &mut Tape| {
        let vc = model.front_tokens(t, s, &scene.scene.front_view, Some(&ins)).expect("front view");
        let tok = model.sie.encode(t, s, &ins, vc).expect("instruction");
        let r = t.constant(raster.clone());
        let g = model.goal_token(t, s, scene.scene.goal);
        let ctx = t.concat_rows(&[r, g, tok]);
        let x = t.constant(model.noised_anchors(t_d, &noise));
        let (clean, logits) = model.denoise(t, s, x, ctx, g, t_d);
        loss_on_tape(t, clean, logits, &scene.scene.gt, false).0
    };
    Ok(gradient_check(&mut store, &params, loss, eps, min_coords, &mut rng, fault))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autolabel::{build_dataset, AutolabelConfig};

    pub(crate) fn small_scenes(n: usize, cfg: &PolicyConfig) -> Vec<TrainScene> {
        let corpus = CorpusConfig { corridor: n, straight: 1, yjunction: 1, seed: 100 };
        let eps = corpus.generate().unwrap();
        let ds = build_dataset(&eps, &AutolabelConfig { keyframes: 3, ..Default::default() }, None);
        build_scenes(&ds, &eps, cfg).unwrap()
    }

    fn line(dy: f64) -> Trajectory {
        (1..=8).map(|i| Vec2::new(0.5 * i as f64, dy * i as f64)).collect()
    }

    #[test]
    fn loss_examples() {
        let gt = line(0.0);
        let r = compute_loss(&[0.0, -1e9], &[gt.clone(), line(0.1)], &gt, false);
        assert_eq!((r.winner, r.l_reg), (0, 0.0));
        assert!(r.l_cls.abs() < 1e-12);
        let near: Trajectory = gt.iter().map(|p| *p + Vec2::new(0.0, 1.0)).collect();
        let far: Trajectory = gt.iter().map(|p| *p + Vec2::new(0.0, 2.0)).collect();
        assert_eq!(compute_loss(&[0.0, 0.0], &[near, far], &gt, false).winner, 0);
        let u = compute_loss(&[0.3; 4], &[line(0.1), line(0.2), line(0.3), line(0.4)], &gt, false);
        assert!((u.l_cls - 4f64.ln()).abs() < 1e-12);
        assert_eq!(u.total, u.l_cls + u.l_reg);
    }

    #[test]
    fn tape_loss_matches_numeric_loss() {
        let modes = vec![line(0.05), line(-0.1), line(0.2)];
        let gt = line(0.0);
        let logits = vec![0.2, -0.4, 1.0];
        for all in [false, true] {
            let mut t = Tape::new();
            let c = t.constant(trajectories_to_mat(&modes));
            let l = t.constant(Mat::row_vector(logits.clone()));
            let (_, rep) = loss_on_tape(&mut t, c, l, &gt, all);
            let num = compute_loss(&logits, &modes, &gt, all);
            assert_eq!(rep.winner, num.winner);
            assert!((rep.total - num.total).abs() < 1e-12, "{rep:?} vs {num:?}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("[stage2]\ngoal_dropout = 2.0\n").is_err());
        assert_eq!(TrainConfig::from_toml("seed = 3\n").unwrap().seed, 3);
    }

    #[test]
    fn stages_respect_freezing_and_memorize_one_sample() {
        let cfg = PolicyConfig { modes: 4, d_model: 16, heads: 2, layers: 1, ..PolicyConfig::toy() };
        let scenes = small_scenes(3, &cfg);
        let anchors = fit_anchors(&scenes, &cfg).unwrap();
        let mut model = PolicyModel::new(cfg, anchors, DiffusionSchedule::default()).unwrap();
        let p = PhaseConfig { epochs: 1, ..Default::default() };
        let vis = prefix_digest(&model.store, "vis.");
        pretrain_visual(&mut model, &scenes, &p, 0).unwrap();
        assert_ne!(prefix_digest(&model.store, "vis."), vis);
        let vis = prefix_digest(&model.store, "vis.");
        let sie = prefix_digest(&model.store, "sie.");
        train_stage1(&mut model, &scenes, &p, 0).unwrap();
        assert_eq!(prefix_digest(&model.store, "vis."), vis);
        let sie2 = prefix_digest(&model.store, "sie.");
        assert_ne!(sie2, sie);
        let one = &scenes[..1];
        let s2 = Stage2Config { epochs: 600, lr: 3e-3, batch: 1, goal_dropout: 0.0, fixed_noise: true, lr_floor: 1.0, ..Default::default() };
        let mut single = model.clone();
        let only_goal: Vec<TrainScene> = one.to_vec();
        let m = train_stage2_conditioned(&mut single, &only_goal, &s2, Conditioning::Goal);
        assert_eq!(prefix_digest(&single.store, "sie."), sie2);
        assert!(m < 1e-3, "memorization loss {m}");
    }

    /// Stage 2 restricted to one conditioning, returning the final loss.
    fn train_stage2_conditioned(model: &mut PolicyModel, scenes: &[TrainScene], cfg: &Stage2Config, c: Conditioning) -> f64 {
        let feats = scene_features(model, &scenes[0]).unwrap().frozen(c);
        let mut opt = AdamW::for_prefixes(cfg.adam(), &model.store, &["goal.", "dec."]);
        let noise = model.noise(0);
        let mut last = f64::INFINITY;
        for _ in 0..cfg.epochs {
            let mut t = Tape::new();
            let (loss, rep, _) = stage2_loss(model, &model.store, &mut t, &feats, scenes[0].scene.goal, &scenes[0].scene.gt, model.schedule.t_trunc, &noise, false);
            last = rep.total;
            let g = t.backward(loss).params(&t);
            opt.step(&mut model.store, &g);
        }
        last
    }
}
