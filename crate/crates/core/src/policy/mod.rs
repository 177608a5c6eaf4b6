//! Trajectory policy: anchor library, context encoder and the
//! anchor-initialized diffusion decoder.

pub mod anchors;
pub mod model;

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, Vec2};
use crate::instruction::{InstructionError, SieConfig};
use crate::world::{Action, RobotLimits, RobotState};

pub use anchors::{cluster_anchors, AnchorSet};
pub use model::{FrozenFeatures, PolicyInput, PolicyModel};

/// Ego-frame waypoints at fixed spacing; waypoint 0 is the first future step.
pub type Trajectory = Vec<Vec2>;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy needs a goal or an instruction")]
    NoConditioning,
    #[error("instruction needs a front view")]
    MissingFrontView,
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("clustering failed: {0}")]
    Clustering(String),
}

/// Linear-β noise schedule. Steps are numbered `1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub t_trunc: usize,
    pub betas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, t_trunc: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 1 && (1..=steps).contains(&t_trunc), "t_trunc {t_trunc} outside 1..={steps}");
        assert!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0);
        let betas = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        Self { steps, t_trunc, betas }
    }

    /// `ᾱ_t = Π_{i ≤ t} (1 − β_i)`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.betas[..t].iter().map(|b| 1.0 - b).product()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.betas.len() != self.steps || !(1..=self.steps).contains(&self.t_trunc) {
            return Err(format!("schedule with {} betas, T={}, t_trunc={}", self.betas.len(), self.steps, self.t_trunc));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) || self.betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err("betas must increase strictly inside (0, 1)".into());
        }
        Ok(())
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(10, 5, 1e-4, 0.02)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub horizon: usize,
    /// Waypoint spacing (s).
    pub dt: f64,
    pub modes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub history: usize,
    pub raster_size: usize,
    pub raster_patch: usize,
    /// Front-view downscale relative to the full camera.
    pub front_downscale: u32,
    pub front_patch: usize,
    pub d_p: usize,
    pub k_points: usize,
    pub fourier_std: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            dt: 0.5,
            modes: 64,
            d_model: 128,
            heads: 4,
            layers: 2,
            history: 3,
            raster_size: 64,
            raster_patch: 16,
            front_downscale: 14,
            front_patch: 8,
            d_p: 32,
            k_points: 8,
            fourier_std: 6.0,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// Small model used by the default training run and the tests.
    pub fn toy() -> Self {
        Self { modes: 16, d_model: 32, ..Self::default() }
    }

    pub fn sie(&self) -> SieConfig {
        SieConfig {
            d_model: self.d_model,
            d_p: self.d_p,
            k_points: self.k_points,
            heads: self.heads,
            fourier_std: self.fourier_std,
            zero_init_cross: true,
        }
    }

    pub fn raster_tokens(&self) -> usize {
        (self.raster_size / self.raster_patch).pow(2)
    }

    pub fn front_tokens(&self, front_width: usize) -> usize {
        (front_width / self.front_patch).pow(2)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.horizon < 2 || self.modes < 2 || self.layers == 0 || self.history == 0 {
            return Err("horizon, modes, layers and history must be positive (horizon, modes ≥ 2)".into());
        }
        if self.d_model % self.heads != 0 || self.raster_size % self.raster_patch != 0 {
            return Err("d_model must divide by heads and raster size by patch".into());
        }
        if !(self.dt > 0.0) {
            return Err("dt must be positive".into());
        }
        Ok(())
    }
}

/// `m` modes with softmax confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub modes: Vec<Trajectory>,
    pub logits: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl TrajectoryDistribution {
    pub fn from_logits(modes: Vec<Trajectory>, logits: Vec<f64>) -> Self {
        let confidences = softmax(&logits);
        Self { modes, logits, confidences }
    }

    pub fn selected_index(&self) -> usize {
        argmax(&self.confidences)
    }

    pub fn selected(&self) -> &Trajectory {
        &self.modes[self.selected_index()]
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn select_mode(dist: &TrajectoryDistribution) -> &Trajectory {
    dist.selected()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingGains {
    /// Gain on the arc rate that reaches the first waypoint in one step.
    pub kp: f64,
    /// Damping on the difference between that rate and the current yaw rate.
    pub kd: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self { kp: 1.0, kd: 0.0 }
    }
}

/// PD tracking of the first waypoint segment. Backward waypoints give a
/// negative speed with the heading error measured against the rear.
pub fn trajectory_to_action(
    traj: &[Vec2],
    state: &RobotState,
    dt: f64,
    gains: &TrackingGains,
    limits: &RobotLimits,
) -> Action {
    let Some(&w0) = traj.first() else {
        return Action::STOP;
    };
    let len = w0.norm();
    if len < 1e-9 {
        return Action::STOP;
    }
    let backward = w0.x < 0.0;
    let v = if backward { -len / dt } else { len / dt };
    let dir = if backward { -w0 } else { w0 };
    let alpha = normalize_angle(dir.y.atan2(dir.x));
    // Following the circular arc through w0 turns by 2α over one step.
    let rate = 2.0 * alpha / dt * if backward { -1.0 } else { 1.0 };
    let omega = gains.kp * rate + gains.kd * (rate - state.yaw_rate);
    Action::new(v, omega).clamped(limits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2D;
    use proptest::prelude::*;

    fn state() -> RobotState {
        RobotState { pose: Pose2D::new(0.0, 0.0, 0.0), speed: 1.0, yaw_rate: 0.0 }
    }

    #[test]
    fn straight_left_and_stop_tracking() {
        let lim = RobotLimits::default();
        let g = TrackingGains::default();
        let straight: Vec<Vec2> = (1..=8).map(|i| Vec2::new(0.5 * i as f64, 0.0)).collect();
        let a = trajectory_to_action(&straight, &state(), 0.5, &g, &lim);
        assert!((a.v - 1.0).abs() < 1e-12 && a.omega.abs() < 1e-12);
        let left = vec![Vec2::new(0.0, 0.5), Vec2::new(0.0, 1.0)];
        assert!(trajectory_to_action(&left, &state(), 0.5, &g, &lim).omega > 0.0);
        let stop = vec![Vec2::new(0.0, 0.0); 8];
        assert_eq!(trajectory_to_action(&stop, &state(), 0.5, &g, &lim).v, 0.0);
    }

    #[test]
    fn mode_selection_rules() {
        let modes = vec![vec![Vec2::new(0.0, 0.0)]; 3];
        let d = TrajectoryDistribution { modes: modes.clone(), logits: vec![], confidences: vec![0.1, 0.7, 0.2] };
        assert_eq!(d.selected_index(), 1);
        let u = TrajectoryDistribution { modes, logits: vec![], confidences: vec![1.0 / 3.0; 3] };
        assert_eq!(u.selected_index(), 0);
    }

    #[test]
    fn schedule_shape() {
        let s = DiffusionSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.betas[9] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(5) < s.alpha_bar(4));
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_argmax_is_shift_invariant(
            xs in proptest::collection::vec(-20.0f64..20.0, 2..20),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&xs);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            prop_assert_eq!(argmax(&softmax(&xs)), argmax(&softmax(&shifted)));
        }
    }
}
