//! Network definition and inference.
//!
//! Parameter prefixes: `vis.raster` and `vis.front` are the visual encoders,
//! `vis.head` their pretraining heads, `sie` the instruction encoder with its
//! stage-1 heads under `sie.head`, `goal` the goal encoder and `dec` the
//! diffusion decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AnchorSet, DiffusionSchedule, PolicyConfig, PolicyError, Trajectory, TrajectoryDistribution};
use crate::geometry::Vec2;
use crate::instruction::{render_visual_prompt, Command, Instruction, InstructionEncoder};
use crate::nn::{LayerNorm, Linear, Mat, Mlp, MultiHeadAttention, ParamId, ParamStore, Tape, Var};
use crate::world::{Cell, Pixel, Raster, SemanticImage};

/// Goals are divided by this before encoding (m).
const GOAL_SCALE: f64 = 5.0;

/// One policy query. Rasters are oldest first; the front view is rendered
/// with the downscaled policy camera and is required with an instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub rasters: Vec<Raster>,
    pub goal: Option<Vec2>,
    pub front_view: Option<SemanticImage>,
    pub instruction: Option<Instruction>,
}

/// Outputs of the frozen encoders for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFeatures {
    pub raster_tokens: Mat,
    pub instruction_tokens: Option<Mat>,
}

/// Patch embedding followed by one residual MLP.
#[derive(Debug, Clone)]
struct PatchEncoder {
    embed: Linear,
    pos: ParamId,
    norm: LayerNorm,
    mlp: Mlp,
}

impl PatchEncoder {
    fn new(store: &mut ParamStore, name: &str, tokens: usize, in_dim: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), in_dim, d, rng),
            pos: store.add_normal(format!("{name}.pos"), tokens, d, 0.1, rng),
            norm: LayerNorm::new(store, &format!("{name}.ln"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 2 * d, d, rng),
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, patches: Mat) -> Var {
        let x = t.constant(patches);
        let x = self.embed.forward(t, s, x);
        let pos = t.param(s, self.pos);
        let x = t.add(x, pos);
        let h = self.norm.forward(t, s, x);
        let h = self.mlp.forward(t, s, h);
        t.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    shift: Linear,
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: Mlp,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            shift: Linear::new(store, &format!("{name}.shift"), d, 3 * d, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng),
        }
    }

    /// `x`: `(m·H) × d` waypoint tokens, `cond`: `1 × d`, `ctx`: context tokens.
    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, cond: Var, ctx: Var, group: usize) -> Var {
        let d = t.shape(x).1;
        let c = t.silu(cond);
        let shifts = self.shift.forward(t, s, c);
        let s1 = t.slice_cols(shifts, 0, d);
        let s2 = t.slice_cols(shifts, d, d);
        let s3 = t.slice_cols(shifts, 2 * d, d);

        let h = self.ln1.forward(t, s, x);
        let h = t.add_row(h, s1);
        let a = self.self_attn.forward(t, s, h, h, Some(group));
        let x = t.add(x, a);

        let h = self.ln2.forward(t, s, x);
        let h = t.add_row(h, s2);
        let a = self.cross_attn.forward(t, s, h, ctx, None);
        let x = t.add(x, a);

        let h = self.ln3.forward(t, s, x);
        let h = t.add_row(h, s3);
        let f = self.ffn.forward(t, s, h);
        t.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub anchors: AnchorSet,
    pub schedule: DiffusionSchedule,
    raster_enc: PatchEncoder,
    front_enc: PatchEncoder,
    raster_head: Mlp,
    front_head: Mlp,
    pub sie: InstructionEncoder,
    cls_head: Linear,
    reg_head: Linear,
    goal_enc: Mlp,
    no_goal: ParamId,
    time_mlp: Mlp,
    wp_embed: Linear,
    wp_pos: ParamId,
    blocks: Vec<DecoderBlock>,
    out_norm: LayerNorm,
    out_head: Linear,
    score_head: Linear,
}

/// Sinusoidal embedding of a diffusion step.
fn timestep_features(t_d: usize, d: usize) -> Mat {
    let half = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * (1000f64).ln()).exp();
        let a = t_d as f64 * freq;
        v[i] = a.sin();
        v[half + i] = a.cos();
    }
    Mat::row_vector(v)
}

impl PolicyModel {
    /// A freshly initialized model. Construction order is fixed, so equal
    /// configs produce equal parameter layouts.
    pub fn new(config: PolicyConfig, anchors: AnchorSet, schedule: DiffusionSchedule) -> Result<Self, PolicyError> {
        config.validate().map_err(PolicyError::Shape)?;
        schedule.validate().map_err(PolicyError::Shape)?;
        if anchors.len() != config.modes || anchors.horizon() != config.horizon {
            return Err(PolicyError::Shape(format!(
                "{} anchors of horizon {} for {} modes of horizon {}",
                anchors.len(),
                anchors.horizon(),
                config.modes,
                config.horizon
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let h2 = 2 * config.horizon;
        let rp = config.raster_patch;
        let raster_in = config.history * 2 * rp * rp;
        let fp = config.front_patch;
        let front_width = (448 / config.front_downscale) as usize;
        let raster_enc = PatchEncoder::new(&mut store, "vis.raster", config.raster_tokens(), raster_in, d, rng);
        let front_enc =
            PatchEncoder::new(&mut store, "vis.front", config.front_tokens(front_width), 4 * fp * fp, d, rng);
        let raster_head = Mlp::new(&mut store, "vis.head.raster", d + 2, d, h2, rng);
        let front_head = Mlp::new(&mut store, "vis.head.front", d, d, h2, rng);
        let sie = InstructionEncoder::new(&mut store, "sie", config.sie(), rng);
        let cls_head = Linear::new(&mut store, "sie.head.cls", d, Command::COUNT, rng);
        let reg_head = Linear::new(&mut store, "sie.head.reg", d, 4, rng);
        let goal_enc = Mlp::new(&mut store, "goal.mlp", 2, d, d, rng);
        let no_goal = store.add_normal("goal.none", 1, d, 0.1, rng);
        let time_mlp = Mlp::new(&mut store, "dec.time", d, d, d, rng);
        let wp_embed = Linear::new(&mut store, "dec.wp", 2, d, rng);
        let wp_pos = store.add_normal("dec.wp_pos", config.horizon, d, 0.1, rng);
        let blocks = (0..config.layers)
            .map(|i| DecoderBlock::new(&mut store, &format!("dec.block{i}"), d, config.heads, rng))
            .collect();
        let out_norm = LayerNorm::new(&mut store, "dec.out_ln", d);
        let out_head = Linear::zeroed(&mut store, "dec.out", d, 2);
        let score_head = Linear::new(&mut store, "dec.score", d, 1, rng);
        Ok(Self {
            config,
            store,
            anchors,
            schedule,
            raster_enc,
            front_enc,
            raster_head,
            front_head,
            sie,
            cls_head,
            reg_head,
            goal_enc,
            no_goal,
            time_mlp,
            wp_embed,
            wp_pos,
            blocks,
            out_norm,
            out_head,
            score_head,
        })
    }

    /// The policy camera's image width for the default full camera.
    pub fn front_width(&self) -> usize {
        (448 / self.config.front_downscale) as usize
    }

    /// Number of context tokens for a query with or without an instruction.
    pub fn context_len(&self, with_instruction: bool) -> usize {
        self.config.raster_tokens() + 1 + if with_instruction { self.config.front_tokens(self.front_width()) } else { 0 }
    }

    /// Patch features of the raster history: obstacle and off-walk channels.
    pub fn raster_patches(&self, rasters: &[Raster]) -> Result<Mat, PolicyError> {
        let c = &self.config;
        if rasters.len() != c.history {
            return Err(PolicyError::Shape(format!("{} rasters, expected {}", rasters.len(), c.history)));
        }
        if rasters.iter().any(|r| r.size != c.raster_size) {
            return Err(PolicyError::Shape("raster size".into()));
        }
        let p = c.raster_patch;
        let per = c.raster_size / p;
        let width = c.history * 2 * p * p;
        let mut m = Mat::zeros(per * per, width);
        for pr in 0..per {
            for pc in 0..per {
                let row = m.row_mut(pr * per + pc);
                let mut k = 0;
                for r in rasters {
                    for dr in 0..p {
                        for dc in 0..p {
                            let cell = r.get(pr * p + dr, pc * p + dc);
                            row[k] = f64::from(u8::from(cell == Cell::Obstacle));
                            row[k + 1] = f64::from(u8::from(cell == Cell::OffSidewalk));
                            k += 2;
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    /// Patch features of a front view with an optional overlay: free,
    /// obstacle, off-walk and overlay channels.
    pub fn front_patches(&self, view: &SemanticImage, ins: Option<&Instruction>) -> Result<Mat, PolicyError> {
        let w = self.front_width();
        if view.width != w || view.height != w {
            return Err(PolicyError::Shape(format!("front view {}x{}, expected {w}x{w}", view.width, view.height)));
        }
        let prompt = render_visual_prompt(view, ins);
        let p = self.config.front_patch;
        let per = w / p;
        let mut m = Mat::zeros(per * per, 4 * p * p);
        for pr in 0..per {
            for pc in 0..per {
                let row = m.row_mut(pr * per + pc);
                let mut k = 0;
                for dv in 0..p {
                    for du in 0..p {
                        let (u, v) = (pc * p + du, pr * p + dv);
                        let l = view.get(u, v);
                        row[k] = f64::from(u8::from(l == Pixel::Free));
                        row[k + 1] = f64::from(u8::from(l == Pixel::Obstacle));
                        row[k + 2] = f64::from(u8::from(l == Pixel::OffSidewalk));
                        row[k + 3] = f64::from(u8::from(prompt.overlay.get(u, v)));
                        k += 4;
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn raster_tokens(&self, t: &mut Tape, s: &ParamStore, rasters: &[Raster]) -> Result<Var, PolicyError> {
        let p = self.raster_patches(rasters)?;
        Ok(self.raster_enc.forward(t, s, p))
    }

    pub fn front_tokens(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        view: &SemanticImage,
        ins: Option<&Instruction>,
    ) -> Result<Var, PolicyError> {
        let p = self.front_patches(view, ins)?;
        Ok(self.front_enc.forward(t, s, p))
    }

    /// Instruction-conditioned front-view tokens `V′_c`.
    pub fn instruction_tokens(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        view: &SemanticImage,
        ins: &Instruction,
    ) -> Result<Var, PolicyError> {
        ins.validate()?;
        let vc = self.front_tokens(t, s, view, Some(ins))?;
        Ok(self.sie.encode(t, s, ins, vc)?)
    }

    /// Pretraining prediction from raster tokens and goal (`1 × 2H`).
    pub fn raster_head(&self, t: &mut Tape, s: &ParamStore, tokens: Var, goal: Option<Vec2>) -> Var {
        let pooled = t.mean_rows(tokens);
        let g = goal.unwrap_or_default() * (1.0 / GOAL_SCALE);
        let g = t.constant(Mat::row_vector(vec![g.x, g.y]));
        let x = t.concat_cols(&[pooled, g]);
        self.raster_head.forward(t, s, x)
    }

    /// Pretraining prediction from front-view tokens (`1 × 2H`).
    pub fn front_head(&self, t: &mut Tape, s: &ParamStore, tokens: Var) -> Var {
        let pooled = t.mean_rows(tokens);
        self.front_head.forward(t, s, pooled)
    }

    /// Stage-1 heads on pooled `V′_c`: command logits (`1 × 16`) and the
    /// midpoint and endpoint of the future path (`1 × 4`).
    pub fn instruction_heads(&self, t: &mut Tape, s: &ParamStore, tokens: Var) -> (Var, Var) {
        let pooled = t.mean_rows(tokens);
        (self.cls_head.forward(t, s, pooled), self.reg_head.forward(t, s, pooled))
    }

    /// Runs the frozen encoders on their own tape.
    pub fn frozen_features(&self, input: &PolicyInput) -> Result<FrozenFeatures, PolicyError> {
        if input.goal.is_none() && input.instruction.is_none() {
            return Err(PolicyError::NoConditioning);
        }
        let s = &self.store;
        let mut t = Tape::new();
        let r = self.raster_tokens(&mut t, s, &input.rasters)?;
        let raster_tokens = t.value(r).clone();
        let instruction_tokens = match &input.instruction {
            None => None,
            Some(ins) => {
                let view = input.front_view.as_ref().ok_or(PolicyError::MissingFrontView)?;
                let v = self.instruction_tokens(&mut t, s, view, ins)?;
                Some(t.value(v).clone())
            }
        };
        if !raster_tokens.all_finite() || instruction_tokens.as_ref().is_some_and(|m| !m.all_finite()) {
            return Err(PolicyError::NonFinite("encoder features".into()));
        }
        Ok(FrozenFeatures { raster_tokens, instruction_tokens })
    }

    pub fn goal_token(&self, t: &mut Tape, s: &ParamStore, goal: Option<Vec2>) -> Var {
        match goal {
            Some(g) => {
                let g = g * (1.0 / GOAL_SCALE);
                let x = t.constant(Mat::row_vector(vec![g.x, g.y]));
                self.goal_enc.forward(t, s, x)
            }
            None => t.param(s, self.no_goal),
        }
    }

    /// Context tokens `h_t` (raster, goal, then instruction tokens) and the
    /// goal token.
    pub fn context(&self, t: &mut Tape, s: &ParamStore, f: &FrozenFeatures, goal: Option<Vec2>) -> (Var, Var) {
        let r = t.constant(f.raster_tokens.clone());
        let g = self.goal_token(t, s, goal);
        let ctx = match &f.instruction_tokens {
            Some(m) => {
                let i = t.constant(m.clone());
                t.concat_rows(&[r, g, i])
            }
            None => t.concat_rows(&[r, g]),
        };
        (ctx, g)
    }

    /// One decoder pass: `modes` is `(m·H) × 2` in metres; returns the
    /// predicted clean modes with the same shape and `1 × m` logits.
    pub fn denoise(&self, t: &mut Tape, s: &ParamStore, modes: Var, ctx: Var, goal_token: Var, t_d: usize) -> (Var, Var) {
        let h = self.config.horizon;
        let (rows, _) = t.shape(modes);
        let m = rows / h;
        let tf = t.constant(timestep_features(t_d, self.config.d_model));
        let temb = self.time_mlp.forward(t, s, tf);
        let cond = t.add(temb, goal_token);
        let x = self.wp_embed.forward(t, s, modes);
        let pos = t.param(s, self.wp_pos);
        let pos = t.tile_rows(pos, m);
        let mut x = t.add(x, pos);
        for b in &self.blocks {
            x = b.forward(t, s, x, cond, ctx, h);
        }
        let x = self.out_norm.forward(t, s, x);
        let delta = self.out_head.forward(t, s, x);
        let clean = t.add(modes, delta);
        let pooled = t.group_mean_rows(x, h);
        let scores = self.score_head.forward(t, s, pooled);
        let logits = t.reshape(scores, 1, m);
        (clean, logits)
    }

    /// Anchors as an `(m·H) × 2` matrix.
    pub fn anchor_matrix(&self) -> Mat {
        trajectories_to_mat(&self.anchors.anchors)
    }

    /// Anchors noised to step `t_d` with the given Gaussian draws.
    pub fn noised_anchors(&self, t_d: usize, noise: &[f64]) -> Mat {
        let ab = self.schedule.alpha_bar(t_d);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut m = self.anchor_matrix();
        for (x, e) in m.data.iter_mut().zip(noise) {
            *x = a * *x + b * e;
        }
        m
    }

    pub fn noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.modes * self.config.horizon * 2;
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Truncated DDIM sampling from noised anchors using precomputed features.
    pub fn predict_with_features(
        &self,
        f: &FrozenFeatures,
        goal: Option<Vec2>,
        noise_seed: u64,
    ) -> Result<TrajectoryDistribution, PolicyError> {
        if goal.is_none() && f.instruction_tokens.is_none() {
            return Err(PolicyError::NoConditioning);
        }
        let s = &self.store;
        let sched = &self.schedule;
        let mut x = self.noised_anchors(sched.t_trunc, &self.noise(noise_seed));
        let mut logits = Vec::new();
        for step in (1..=sched.t_trunc).rev() {
            let mut t = Tape::new();
            let (ctx, g) = self.context(&mut t, s, f, goal);
            let xv = t.constant(x.clone());
            let (clean, lg) = self.denoise(&mut t, s, xv, ctx, g, step);
            let x0 = t.value(clean).clone();
            logits = t.value(lg).data.clone();
            if !x0.all_finite() || logits.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFinite(format!("decoder output at step {step}")));
            }
            if step == 1 {
                x = x0;
            } else {
                let ab = sched.alpha_bar(step);
                let ab_prev = sched.alpha_bar(step - 1);
                for (xi, x0i) in x.data.iter_mut().zip(&x0.data) {
                    let eps = (*xi - ab.sqrt() * x0i) / (1.0 - ab).sqrt();
                    *xi = ab_prev.sqrt() * x0i + (1.0 - ab_prev).sqrt() * eps;
                }
            }
        }
        Ok(TrajectoryDistribution::from_logits(mat_to_trajectories(&x, self.config.horizon), logits))
    }

    pub fn predict(&self, input: &PolicyInput, noise_seed: u64) -> Result<TrajectoryDistribution, PolicyError> {
        let f = self.frozen_features(input)?;
        self.predict_with_features(&f, input.goal, noise_seed)
    }
}

pub fn trajectories_to_mat(trajs: &[Trajectory]) -> Mat {
    let h = trajs.first().map_or(0, |t| t.len());
    let mut data = Vec::with_capacity(trajs.len() * h * 2);
    for t in trajs {
        for p in t {
            data.push(p.x);
            data.push(p.y);
        }
    }
    Mat::from_vec(trajs.len() * h, 2, data)
}

pub fn mat_to_trajectories(m: &Mat, horizon: usize) -> Vec<Trajectory> {
    (0..m.rows / horizon)
        .map(|k| (0..horizon).map(|j| Vec2::new(m.at(k * horizon + j, 0), m.at(k * horizon + j, 1))).collect())
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{CameraModel, Pose2D};
    use crate::policy::cluster_anchors;
    use crate::world::{generate_world, render_front_view, render_raster, RasterConfig, WorldConfig, WorldKind};

    pub(crate) fn tiny_model() -> PolicyModel {
        let cfg = PolicyConfig { modes: 4, d_model: 16, heads: 2, layers: 1, ..PolicyConfig::toy() };
        let trajs: Vec<Trajectory> = (0..4)
            .map(|k| (1..=8).map(|i| Vec2::new(0.5 * i as f64, 0.1 * (k as f64 - 1.5) * i as f64)).collect())
            .collect();
        let anchors = cluster_anchors(&trajs, 4, 0).unwrap();
        PolicyModel::new(cfg, anchors, DiffusionSchedule::default()).unwrap()
    }

    fn input(model: &PolicyModel, ins: Option<Instruction>) -> PolicyInput {
        let w = generate_world(4, &WorldConfig::for_kind(WorldKind::Corridor)).unwrap();
        let pose = Pose2D::new(3.0, 0.0, 0.0);
        let r = render_raster(&w, &pose, 0.0, &RasterConfig::default());
        let cam = CameraModel::default().downscaled(model.config.front_downscale);
        PolicyInput {
            rasters: vec![r.clone(), r.clone(), r],
            goal: Some(Vec2::new(5.0, 0.0)),
            front_view: Some(render_front_view(&w, &pose, 0.0, &cam)),
            instruction: ins,
        }
    }

    #[test]
    fn token_layout_and_shapes() {
        let m = tiny_model();
        let inp = input(&m, Some(Instruction::arrowing(1.0, 0.0, 0.0)));
        let f = m.frozen_features(&inp).unwrap();
        assert_eq!(f.raster_tokens.shape(), (16, 16));
        assert_eq!(f.instruction_tokens.as_ref().unwrap().shape(), (16, 16));
        let mut t = Tape::new();
        let (ctx, _) = m.context(&mut t, &m.store, &f, inp.goal);
        assert_eq!(t.shape(ctx).0, 33);
        assert_eq!(m.context_len(true), 33);
        assert_eq!(m.context_len(false), 17);
    }

    #[test]
    fn zero_head_returns_its_input() {
        let m = tiny_model();
        let inp = input(&m, None);
        let f = m.frozen_features(&inp).unwrap();
        let mut t = Tape::new();
        let (ctx, g) = m.context(&mut t, &m.store, &f, inp.goal);
        let x = m.noised_anchors(3, &m.noise(1));
        let xv = t.constant(x.clone());
        let (clean, logits) = m.denoise(&mut t, &m.store, xv, ctx, g, 3);
        assert_eq!(t.value(clean), &x);
        assert_eq!(t.shape(logits), (1, 4));
    }

    #[test]
    fn prediction_is_normalized_and_seeded() {
        let m = tiny_model();
        let inp = input(&m, Some(Instruction::drafting(vec![[0.5, 0.9], [0.5, 0.6]], 0.0).unwrap()));
        let a = m.predict(&inp, 5).unwrap();
        let b = m.predict(&inp, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.modes.len(), 4);
        assert!((a.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_ne!(m.predict(&inp, 6).unwrap().modes, a.modes);
    }

    #[test]
    fn missing_conditioning_is_rejected() {
        let m = tiny_model();
        let mut inp = input(&m, None);
        inp.goal = None;
        assert!(matches!(m.predict(&inp, 0), Err(PolicyError::NoConditioning)));
        let mut inp = input(&m, Some(Instruction::arrowing(1.0, 0.0, 0.0)));
        inp.front_view = None;
        assert!(matches!(m.predict(&inp, 0), Err(PolicyError::MissingFrontView)));
    }

    #[test]
    fn seed_spread_shrinks_with_truncation() {
        let mut m = tiny_model();
        let inp = input(&m, None);
        let spread = |m: &PolicyModel| {
            let a = m.predict(&inp, 1).unwrap();
            let b = m.predict(&inp, 2).unwrap();
            a.modes.iter().flatten().zip(b.modes.iter().flatten()).map(|(p, q)| p.dist(*q)).fold(0.0, f64::max)
        };
        let mut last = f64::INFINITY;
        for tt in [8, 5, 2, 1] {
            m.schedule.t_trunc = tt;
            let s = spread(&m);
            assert!(s < last, "t_trunc {tt}: {s} vs {last}");
            last = s;
        }
    }

    #[test]
    fn goal_rotation_leaves_raster_tokens_unchanged() {
        let m = tiny_model();
        let base = generate_world(11, &WorldConfig { obstacle_density: 0.0, pedestrian_count: 0, ..WorldConfig::for_kind(WorldKind::Corridor) }).unwrap();
        let w = base.clone();
        let rot = base.transformed(0.7, Vec2::new(3.0, -2.0));
        let pose = Pose2D::new(4.0, 0.5, 0.2);
        let p2 = crate::geometry::ego_to_world(&Pose2D::new(3.0, -2.0, 0.7), pose.position());
        let pose2 = Pose2D::new(p2.x, p2.y, pose.heading + 0.7);
        let r1 = render_raster(&w, &pose, 0.0, &RasterConfig::default());
        let r2 = render_raster(&rot, &pose2, 0.0, &RasterConfig::default());
        let mk = |r: Raster, g: Vec2| PolicyInput { rasters: vec![r.clone(), r.clone(), r], goal: Some(g), front_view: None, instruction: None };
        let f1 = m.frozen_features(&mk(r1, Vec2::new(5.0, 0.0))).unwrap();
        let f2 = m.frozen_features(&mk(r2, Vec2::new(5.0, 1.0))).unwrap();
        assert_eq!(f1.raster_tokens, f2.raster_tokens);
        let mut t = Tape::new();
        let g1 = m.goal_token(&mut t, &m.store, Some(Vec2::new(5.0, 0.0)));
        let g2 = m.goal_token(&mut t, &m.store, Some(Vec2::new(5.0, 1.0)));
        assert_ne!(t.value(g1), t.value(g2));
    }
}
