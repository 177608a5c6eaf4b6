//! Spatial-aware instruction encoder. Each modality is embedded into a single
//! vector `E`, which then conditions the front-view tokens through
//! cross-attention, self-attention and an MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Command, Instruction, InstructionError, InstructionPayload};
use crate::geometry::{resample_uniform, Vec2};
use crate::nn::{LayerNorm, Mat, Mlp, MultiHeadAttention, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SieConfig {
    pub d_model: usize,
    /// Fourier feature count per sin/cos half.
    pub d_p: usize,
    /// Drafting strokes are resampled to this many points.
    pub k_points: usize,
    pub heads: usize,
    /// Standard deviation of the Gaussian Fourier basis.
    pub fourier_std: f64,
    /// Start the instruction cross-attention with a zero output projection.
    pub zero_init_cross: bool,
}

impl Default for SieConfig {
    fn default() -> Self {
        Self { d_model: 128, d_p: 32, k_points: 8, heads: 4, fourier_std: 6.0, zero_init_cross: true }
    }
}

/// `[sin(Wᵀp), cos(Wᵀp)]` with `p` clamped to the unit square.
pub fn fourier_pe(w: &Mat, p: [f64; 2]) -> Vec<f64> {
    let (u, v) = (p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0));
    let d = w.cols;
    let proj: Vec<f64> = (0..d).map(|j| u * w.at(0, j) + v * w.at(1, j)).collect();
    proj.iter().map(|x| x.sin()).chain(proj.iter().map(|x| x.cos())).collect()
}

/// Heading-flipped arrowing features `[cos θ′, sin θ′, ln(1 + |v|)]` where a
/// negative speed turns the heading around.
pub fn arrowing_features(v: f64, theta: f64) -> [f64; 3] {
    let th = if v < 0.0 { theta + std::f64::consts::PI } else { theta };
    [th.cos(), th.sin(), v.abs().ln_1p()]
}

#[derive(Debug, Clone)]
pub struct InstructionEncoder {
    pub config: SieConfig,
    fourier: ParamId,
    point_index: ParamId,
    draft_mlp: Mlp,
    draft_norm: LayerNorm,
    draft_attn: MultiHeadAttention,
    arrow_mlp: Mlp,
    arrow_norm: LayerNorm,
    arrow_attn: MultiHeadAttention,
    text_table: ParamId,
    cross: MultiHeadAttention,
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    mlp_norm: LayerNorm,
    mlp: Mlp,
}

impl InstructionEncoder {
    /// Registers parameters under `prefix` (conventionally `"sie"`). The
    /// Fourier basis is stored with the parameters but never trained.
    pub fn new(store: &mut ParamStore, prefix: &str, config: SieConfig, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        let dp2 = 2 * config.d_p;
        let h = config.heads;
        let n = |s: &str| format!("{prefix}.{s}");
        let fourier = store.add_normal(n("fourier"), 2, config.d_p, config.fourier_std, rng);
        let point_index = store.add_normal(n("draft.index"), config.k_points, dp2, 0.1, rng);
        let draft_mlp = Mlp::new(store, &n("draft.mlp"), dp2, d, d, rng);
        let draft_norm = LayerNorm::new(store, &n("draft.ln"), d);
        let draft_attn = MultiHeadAttention::new(store, &n("draft.attn"), d, h, rng);
        let arrow_mlp = Mlp::new(store, &n("arrow.mlp"), 3, d, d, rng);
        let arrow_norm = LayerNorm::new(store, &n("arrow.ln"), d);
        let arrow_attn = MultiHeadAttention::new(store, &n("arrow.attn"), d, h, rng);
        let text_table = store.add_normal(n("text.table"), Command::COUNT, d, 1.0, rng);
        let cross = if config.zero_init_cross {
            MultiHeadAttention::zero_out(store, &n("fuse.cross"), d, h, rng)
        } else {
            MultiHeadAttention::new(store, &n("fuse.cross"), d, h, rng)
        };
        let self_norm = LayerNorm::new(store, &n("fuse.ln1"), d);
        let self_attn = MultiHeadAttention::new(store, &n("fuse.self"), d, h, rng);
        let mlp_norm = LayerNorm::new(store, &n("fuse.ln2"), d);
        let mlp = Mlp::new(store, &n("fuse.mlp"), d, 2 * d, d, rng);
        Self {
            config,
            fourier,
            point_index,
            draft_mlp,
            draft_norm,
            draft_attn,
            arrow_mlp,
            arrow_norm,
            arrow_attn,
            text_table,
            cross,
            self_norm,
            self_attn,
            mlp_norm,
            mlp,
        }
    }

    pub fn fourier_basis<'a>(&self, store: &'a ParamStore) -> &'a Mat {
        store.get(self.fourier)
    }

    /// Drafted points resampled to `k_points` along the stroke.
    pub fn resample_points(&self, pts: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, InstructionError> {
        if pts.len() < 2 {
            return Err(InstructionError::TooFewPoints(pts.len()));
        }
        if pts.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(InstructionError::NonFinite);
        }
        if pts.len() == self.config.k_points {
            return Ok(pts.to_vec());
        }
        let line: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p[0], p[1])).collect();
        match resample_uniform(&line, self.config.k_points) {
            Some(r) => Ok(r.iter().map(|p| [p.x, p.y]).collect()),
            // Zero-length stroke: every point is the same.
            None => Ok(vec![pts[0]; self.config.k_points]),
        }
    }

    fn refine(&self, t: &mut Tape, s: &ParamStore, x: Var, norm: &LayerNorm, attn: &MultiHeadAttention) -> Var {
        let h = norm.forward(t, s, x);
        let a = attn.forward(t, s, h, h, None);
        t.add(x, a)
    }

    pub fn embed_drafting(&self, t: &mut Tape, s: &ParamStore, pts: &[[f64; 2]]) -> Result<Var, InstructionError> {
        let pts = self.resample_points(pts)?;
        let w = s.get(self.fourier);
        let k = pts.len();
        let mut data = Vec::with_capacity(k * 2 * self.config.d_p);
        for p in &pts {
            data.extend(fourier_pe(w, *p));
        }
        let pe = t.constant(Mat::from_vec(k, 2 * self.config.d_p, data));
        let idx = t.param(s, self.point_index);
        let x = t.add(pe, idx);
        let x = self.draft_mlp.forward(t, s, x);
        let x = self.refine(t, s, x, &self.draft_norm, &self.draft_attn);
        Ok(t.mean_rows(x))
    }

    pub fn embed_arrowing(&self, t: &mut Tape, s: &ParamStore, v: f64, theta: f64) -> Var {
        let f = t.constant(Mat::row_vector(arrowing_features(v, theta).to_vec()));
        let x = self.arrow_mlp.forward(t, s, f);
        self.refine(t, s, x, &self.arrow_norm, &self.arrow_attn)
    }

    pub fn embed_texting(&self, t: &mut Tape, s: &ParamStore, command: Command) -> Var {
        let table = t.param(s, self.text_table);
        t.gather_rows(table, &[command.index()])
    }

    /// The modality embedding `E` as a `1 × d` row.
    pub fn embed(&self, t: &mut Tape, s: &ParamStore, ins: &Instruction) -> Result<Var, InstructionError> {
        match &ins.payload {
            InstructionPayload::Texting(p) => Ok(self.embed_texting(t, s, Command::parse(p)?)),
            InstructionPayload::Drafting(pts) => self.embed_drafting(t, s, pts),
            InstructionPayload::Arrowing { v, theta } => {
                if !(v.is_finite() && theta.is_finite()) {
                    return Err(InstructionError::NonFinite);
                }
                Ok(self.embed_arrowing(t, s, *v, *theta))
            }
        }
    }

    /// Conditions visual tokens `v_c` (`n × d`) on an embedding `e` (`1 × d`).
    pub fn fuse(&self, t: &mut Tape, s: &ParamStore, v_c: Var, e: Var) -> Var {
        let c = self.cross.forward(t, s, v_c, e, None);
        let x = t.add(v_c, c);
        let h = self.self_norm.forward(t, s, x);
        let a = self.self_attn.forward(t, s, h, h, None);
        let x = t.add(x, a);
        let h = self.mlp_norm.forward(t, s, x);
        let m = self.mlp.forward(t, s, h);
        t.add(x, m)
    }

    /// Instruction-conditioned visual tokens `V′_c`.
    pub fn encode(&self, t: &mut Tape, s: &ParamStore, ins: &Instruction, v_c: Var) -> Result<Var, InstructionError> {
        let e = self.embed(t, s, ins)?;
        Ok(self.fuse(t, s, v_c, e))
    }
}
