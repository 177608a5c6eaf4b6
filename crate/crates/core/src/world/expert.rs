//! Pure-pursuit expert with lateral-offset lane selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{route_normal, route_point, Action, RobotLimits, RobotState, World};
use crate::geometry::{project_onto_polyline, world_to_ego};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    /// Pure-pursuit lookahead distance (m).
    pub lookahead: f64,
    /// How far ahead a candidate lane is checked (m).
    pub plan_horizon: f64,
    /// Distance over which the robot blends into a new lane (m).
    pub transition: f64,
    /// Required gap between the robot disc and obstacles (m).
    pub clearance: f64,
    pub offset_step: f64,
    pub max_offset: f64,
    /// Half-range of the per-episode preferred lateral offset.
    pub preferred_offset_spread: f64,
    pub accel_limit: f64,
    /// Randomized stops and speed changes.
    pub speed_events: bool,
    pub limits: RobotLimits,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 1.0,
            lookahead: 2.0,
            plan_horizon: 6.0,
            transition: 2.0,
            clearance: 0.15,
            offset_step: 0.1,
            max_offset: 1.0,
            preferred_offset_spread: 0.0,
            accel_limit: 0.8,
            speed_events: false,
            limits: RobotLimits::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedEvent {
    pub start: f64,
    pub end: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub config: ExpertConfig,
    pub preferred_offset: f64,
    pub target_offset: f64,
    pub speed_events: Vec<SpeedEvent>,
}

impl Expert {
    pub fn new(config: ExpertConfig, rng: &mut impl Rng) -> Self {
        let spread = config.preferred_offset_spread;
        let preferred_offset = if spread > 0.0 { rng.gen_range(-spread..=spread) } else { 0.0 };
        let mut speed_events = Vec::new();
        if config.speed_events {
            if rng.gen_bool(0.35) {
                let start = rng.gen_range(3.0..9.0);
                speed_events.push(SpeedEvent { start, end: start + 2.0, speed: 0.0 });
            } else if rng.gen_bool(0.5) {
                let start = rng.gen_range(2.0..8.0);
                let speed = if rng.gen_bool(0.5) { 0.6 } else { 1.4 } * config.cruise_speed;
                speed_events.push(SpeedEvent { start, end: start + 5.0, speed });
            }
        }
        Self { config, preferred_offset, target_offset: preferred_offset, speed_events }
    }

    pub fn target_speed(&self, t: f64) -> f64 {
        self.speed_events
            .iter()
            .find(|e| t >= e.start && t < e.end)
            .map_or(self.config.cruise_speed, |e| e.speed)
    }

    /// Signed lateral offset of the robot from the route and its arc length.
    pub fn route_coordinates(world: &World, state: &RobotState) -> (f64, f64) {
        let p = state.pose.position();
        let (s, _) = project_onto_polyline(p, &world.centerline);
        let d = (p - route_point(&world.centerline, s)).dot(route_normal(&world.centerline, s));
        (s, d)
    }

    /// Minimum clearance along the lane that blends from `d_cur` into `d`,
    /// or `None` if the lane leaves the sidewalk. Time advances with `speed`.
    pub fn lane_clearance(&self, world: &World, s0: f64, d_cur: f64, d: f64, t: f64, speed: f64) -> Option<f64> {
        let c = &self.config;
        let end = (s0 + c.plan_horizon).min(world.route_length());
        let v = speed.max(0.3);
        let edge = world.half_width - world.robot_radius - 0.05;
        let mut s = s0;
        let mut min_clear = f64::INFINITY;
        while s <= end + 1e-9 {
            let blend = ((s - s0) / c.transition).min(1.0);
            let di = d_cur + (d - d_cur) * blend;
            let p = route_point(&world.centerline, s) + route_normal(&world.centerline, s) * di;
            if world.spine_distance(p) > edge {
                return None;
            }
            min_clear = min_clear.min(world.obstacle_clearance(p, t + (s - s0) / v));
            s += 0.1;
        }
        Some(min_clear)
    }

    /// Candidate offsets ordered by preference.
    fn candidates(&self) -> Vec<f64> {
        let c = &self.config;
        let n = (c.max_offset / c.offset_step).round() as i64;
        let mut ds: Vec<f64> = (-n..=n).map(|i| i as f64 * c.offset_step).collect();
        let cost = |d: f64| (d - self.preferred_offset).abs() + 0.5 * (d - self.target_offset).abs();
        ds.sort_by(|a, b| cost(*a).total_cmp(&cost(*b)).then(a.total_cmp(b)));
        ds
    }

    /// Most preferred offset whose lane is clear, if any.
    pub fn plan_offset(&self, world: &World, state: &RobotState, t: f64) -> Option<f64> {
        let (s0, d_cur) = Self::route_coordinates(world, state);
        let speed = self.target_speed(t);
        self.candidates().into_iter().find(|&d| {
            self.lane_clearance(world, s0, d_cur, d, t, speed)
                .is_some_and(|cl| cl >= self.config.clearance)
        })
    }

    /// Control for the next `dt` seconds.
    pub fn act(&mut self, world: &World, state: &RobotState, t: f64, dt: f64) -> Action {
        let c = self.config.clone();
        let (s0, d_cur) = Self::route_coordinates(world, state);
        let planned = self.plan_offset(world, state, t);
        let mut v_des = self.target_speed(t);
        match planned {
            Some(d) => {
                self.target_offset = d;
                let near = self
                    .lane_clearance(world, s0, d_cur, d, t, v_des)
                    .unwrap_or(0.0)
                    .max(0.0);
                // Slow down when the chosen lane passes close to something.
                v_des *= (0.6 + 0.4 * near / 0.6).clamp(0.6, 1.0);
            }
            None => v_des = 0.0,
        }
        let max_dv = c.accel_limit * dt;
        let v = state.speed + (v_des - state.speed).clamp(-max_dv, max_dv);
        let s_look = s0 + c.lookahead;
        let target = route_point(&world.centerline, s_look)
            + route_normal(&world.centerline, s_look) * self.target_offset;
        let e = world_to_ego(&state.pose, target);
        let alpha = e.y.atan2(e.x);
        let kappa = 2.0 * alpha.sin() / c.lookahead;
        Action::new(v, v.max(0.0) * kappa).clamped(&c.limits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose2D, Vec2};
    use crate::world::{generate_world, Obstacle, WorldConfig, WorldKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn straight() -> World {
        generate_world(0, &WorldConfig::for_kind(WorldKind::Straight)).unwrap()
    }

    fn expert() -> Expert {
        Expert::new(ExpertConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn free_corridor_cruises_straight() {
        let w = straight();
        let st = RobotState { pose: Pose2D::new(3.0, 0.0, 0.0), speed: 1.0, yaw_rate: 0.0 };
        let a = expert().act(&w, &st, 0.0, 0.2);
        assert!(a.omega.abs() < 1e-12);
        assert!((a.v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn left_offset_steers_right() {
        let w = straight();
        let st = RobotState { pose: Pose2D::new(3.0, 0.5, 0.0), speed: 1.0, yaw_rate: 0.0 };
        assert!(expert().act(&w, &st, 0.0, 0.2).omega < 0.0);
    }

    #[test]
    fn blocked_centerline_picks_a_clear_lane() {
        let mut w = straight();
        w.obstacles.push(Obstacle::Circle { center: Vec2::new(6.0, 0.0), radius: 0.5 });
        let st = RobotState { pose: Pose2D::new(2.0, 0.0, 0.0), speed: 1.0, yaw_rate: 0.0 };
        let ex = expert();
        let d = ex.plan_offset(&w, &st, 0.0).expect("a lane exists");
        assert!(d.abs() > 0.5);
        // Exhaustive oracle: densely sample the blended lane against the disc.
        let mut s: f64 = 2.0;
        while s <= 8.0 {
            let blend: f64 = ((s - 2.0_f64) / 2.0).min(1.0);
            let p = Vec2::new(s, d * blend);
            assert!(p.dist(Vec2::new(6.0, 0.0)) - 0.5 - w.robot_radius > 0.0, "s {s}");
            s += 0.01;
        }
    }
}
