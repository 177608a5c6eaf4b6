//! Procedural sidewalks, unicycle dynamics, rendering and the scripted expert.

pub mod episode;
pub mod expert;
pub mod render;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    normalize_angle, point_at_arclength, point_polyline_distance, polyline_length, project_onto_polyline,
    tangent_at_arclength, Pose2D, Vec2,
};

pub use episode::{
    defaults_for_kind, generate_episode, load_episode_dir, rollout_episode, save_episode_dir, Controller, EpisodeConfig, EpisodeError, EpisodeHeader, EpisodeLog,
    FrameRecord, PredictionRecord, EPISODE_FORMAT, EPISODE_VERSION,
};
pub use expert::{Expert, ExpertConfig};
pub use render::{
    render_front_view, render_impassable_mask, render_observation, render_raster, mask_from_view, Cell, Mask, Observation, Raster, RasterConfig,
    RleRaster, SemanticImage, Pixel,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("could not place obstacles after {0} attempts")]
    PlacementFailed(usize),
    #[error("expert rollout failed after {attempts} attempts: {reason}")]
    RolloutFailed { attempts: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    /// Gently curving sidewalk with obstacles and pedestrians.
    Corridor,
    /// Straight, empty sidewalk.
    Straight,
    /// A trunk that forks into a left and a right branch.
    YJunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub kind: WorldKind,
    pub length: f64,
    pub half_width: f64,
    pub robot_radius: f64,
    /// Bound on |curvature| of the corridor spine (1/m).
    pub max_curvature: f64,
    /// Expected obstacles per meter of corridor.
    pub obstacle_density: f64,
    pub pedestrian_count: usize,
    pub trunk_length: f64,
    /// Branch angle magnitude relative to the trunk (rad).
    pub branch_angle: f64,
    /// Narrowest free gap a generated obstacle may leave (m).
    pub min_gap: f64,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            kind: WorldKind::Corridor,
            length: 30.0,
            half_width: 1.5,
            robot_radius: 0.3,
            max_curvature: 0.04,
            obstacle_density: 0.12,
            pedestrian_count: 1,
            trunk_length: 8.0,
            branch_angle: 0.7,
            min_gap: 1.2,
            max_retries: 32,
        }
    }
}

impl WorldConfig {
    /// Defaults for a kind: obstacles and pedestrians only in `Corridor`.
    pub fn for_kind(kind: WorldKind) -> Self {
        let base = Self { kind, ..Self::default() };
        match kind {
            WorldKind::Corridor => base,
            WorldKind::Straight | WorldKind::YJunction => {
                Self { obstacle_density: 0.0, pedestrian_count: 0, ..base }
            }
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if !(self.half_width > self.robot_radius) || !(self.robot_radius > 0.0) {
            return bad("half_width must exceed a positive robot_radius");
        }
        if !(self.length >= 2.0) {
            return bad("length must be at least 2 m");
        }
        if !(self.obstacle_density >= 0.0) || !(self.max_curvature >= 0.0) {
            return bad("density and curvature must be nonnegative");
        }
        if self.kind == WorldKind::YJunction && !(self.trunk_length > 0.0 && self.trunk_length < self.length) {
            return bad("trunk_length must lie inside the corridor");
        }
        if !(self.min_gap >= 2.0 * self.robot_radius) {
            return bad("min_gap must fit the robot");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    /// Axis-aligned in the world frame.
    Rect { min: Vec2, max: Vec2 },
}

impl Obstacle {
    pub fn contains(&self, p: Vec2) -> bool {
        match *self {
            Obstacle::Circle { center, radius } => p.dist(center) <= radius,
            Obstacle::Rect { min, max } => p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y,
        }
    }

    /// Distance from `p` to the obstacle boundary (0 inside).
    pub fn distance(&self, p: Vec2) -> f64 {
        match *self {
            Obstacle::Circle { center, radius } => (p.dist(center) - radius).max(0.0),
            Obstacle::Rect { min, max } => {
                let dx = (min.x - p.x).max(0.0).max(p.x - max.x);
                let dy = (min.y - p.y).max(0.0).max(p.y - max.y);
                (dx * dx + dy * dy).sqrt()
            }
        }
    }

    pub fn center(&self) -> Vec2 {
        match *self {
            Obstacle::Circle { center, .. } => center,
            Obstacle::Rect { min, max } => (min + max) * 0.5,
        }
    }

    /// Radius of a disc centred at [`center`](Self::center) containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Obstacle::Circle { radius, .. } => radius,
            Obstacle::Rect { min, max } => (max - min).norm() * 0.5,
        }
    }

    /// Grows the obstacle by `d` meters.
    pub fn inflated(&self, d: f64) -> Obstacle {
        match *self {
            Obstacle::Circle { center, radius } => Obstacle::Circle { center, radius: radius + d },
            Obstacle::Rect { min, max } => Obstacle::Rect {
                min: min - Vec2::new(d, d),
                max: max + Vec2::new(d, d),
            },
        }
    }

    /// Rigid motion: rotate about the origin by `angle`, then translate.
    /// Rectangles stay axis-aligned, so only quarter turns are exact for them.
    pub fn transformed(&self, angle: f64, shift: Vec2) -> Obstacle {
        match *self {
            Obstacle::Circle { center, radius } => Obstacle::Circle { center: center.rotate(angle) + shift, radius },
            Obstacle::Rect { min, max } => {
                let a = min.rotate(angle) + shift;
                let b = max.rotate(angle) + shift;
                Obstacle::Rect {
                    min: Vec2::new(a.x.min(b.x), a.y.min(b.y)),
                    max: Vec2::new(a.x.max(b.x), a.y.max(b.y)),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub start: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

impl Pedestrian {
    pub fn position(&self, t: f64) -> Vec2 {
        self.start + self.velocity * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub kind: WorldKind,
    /// The route the expert follows.
    pub centerline: Vec<Vec2>,
    /// Other walkable corridors (the unused branch of a junction).
    pub branches: Vec<Vec<Vec2>>,
    pub half_width: f64,
    pub robot_radius: f64,
    pub obstacles: Vec<Obstacle>,
    pub pedestrians: Vec<Pedestrian>,
    /// Arc length of the fork along the centerline, for junction worlds.
    pub fork_s: Option<f64>,
    /// Whether the route takes the left branch, for junction worlds.
    pub route_left: Option<bool>,
}

impl World {
    pub fn corridors(&self) -> impl Iterator<Item = &Vec<Vec2>> {
        std::iter::once(&self.centerline).chain(self.branches.iter())
    }

    /// Distance to the nearest corridor spine.
    pub fn spine_distance(&self, p: Vec2) -> f64 {
        self.corridors().map(|c| point_polyline_distance(p, c)).fold(f64::INFINITY, f64::min)
    }

    pub fn on_sidewalk(&self, p: Vec2) -> bool {
        self.spine_distance(p) <= self.half_width
    }

    pub fn in_obstacle(&self, p: Vec2, t: f64) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
            || self.pedestrians.iter().any(|q| q.position(t).dist(p) <= q.radius)
    }

    /// Ground points the robot may not occupy (obstacle or off the sidewalk).
    pub fn is_impassable(&self, p: Vec2, t: f64) -> bool {
        self.in_obstacle(p, t) || !self.on_sidewalk(p)
    }

    /// Clearance between the robot disc at `p` and the nearest obstacle or pedestrian.
    pub fn obstacle_clearance(&self, p: Vec2, t: f64) -> f64 {
        let s = self.obstacles.iter().map(|o| o.distance(p)).fold(f64::INFINITY, f64::min);
        let d = self
            .pedestrians
            .iter()
            .map(|q| (q.position(t).dist(p) - q.radius).max(0.0))
            .fold(f64::INFINITY, f64::min);
        s.min(d) - self.robot_radius
    }

    /// Whether the robot disc at `p` touches an obstacle, a pedestrian or an edge.
    pub fn collides(&self, p: Vec2, t: f64) -> bool {
        self.obstacle_clearance(p, t) < 0.0 || self.spine_distance(p) > self.half_width - self.robot_radius
    }

    pub fn route_length(&self) -> f64 {
        polyline_length(&self.centerline)
    }

    /// Route point `lookahead` meters of arc length beyond the projection of `p`.
    pub fn route_lookahead(&self, p: Vec2, lookahead: f64) -> Vec2 {
        let (s, _) = project_onto_polyline(p, &self.centerline);
        route_point(&self.centerline, s + lookahead)
    }

    /// Applies the same rigid motion to every world element.
    pub fn transformed(&self, angle: f64, shift: Vec2) -> World {
        let tp = |p: &Vec2| p.rotate(angle) + shift;
        World {
            centerline: self.centerline.iter().map(tp).collect(),
            branches: self.branches.iter().map(|b| b.iter().map(tp).collect()).collect(),
            obstacles: self.obstacles.iter().map(|o| o.transformed(angle, shift)).collect(),
            pedestrians: self
                .pedestrians
                .iter()
                .map(|q| Pedestrian { start: tp(&q.start), velocity: q.velocity.rotate(angle), radius: q.radius })
                .collect(),
            ..self.clone()
        }
    }
}

/// Point at arc length `s`, extrapolating along the final tangent past the end.
pub fn route_point(line: &[Vec2], s: f64) -> Vec2 {
    let total = polyline_length(line);
    if s <= total {
        point_at_arclength(line, s)
    } else {
        *line.last().expect("non-empty route") + tangent_at_arclength(line, total) * (s - total)
    }
}

/// Left normal of the route at arc length `s`.
pub fn route_normal(line: &[Vec2], s: f64) -> Vec2 {
    tangent_at_arclength(line, s.min(polyline_length(line))).perp()
}

fn polyline_from_headings(start: Vec2, headings: &[f64]) -> Vec<Vec2> {
    let mut pts = vec![start];
    let mut p = start;
    for &h in headings {
        p = p + Vec2::new(h.cos(), h.sin());
        pts.push(p);
    }
    pts
}

/// Builds a world deterministically from `seed`.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<World, WorldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.length.ceil() as usize;
    let (centerline, branches, fork_s, route_left) = match config.kind {
        WorldKind::Straight => (polyline_from_headings(Vec2::ZERO, &vec![0.0; n]), vec![], None, None),
        WorldKind::Corridor => {
            let mut headings = Vec::with_capacity(n);
            let mut h = 0.0;
            let mut kappa = 0.0;
            for i in 0..n {
                if i % 6 == 0 {
                    kappa = rng.gen_range(-config.max_curvature..=config.max_curvature);
                }
                // The first meters stay straight so episodes start aligned.
                if i >= 3 {
                    h = normalize_angle(h + kappa);
                }
                headings.push(h);
            }
            (polyline_from_headings(Vec2::ZERO, &headings), vec![], None, None)
        }
        WorldKind::YJunction => {
            let trunk = config.trunk_length.round() as usize;
            let left = rng.gen_bool(0.5);
            let branch = |sign: f64| {
                let mut hs = vec![0.0; trunk];
                hs.extend(std::iter::repeat(sign * config.branch_angle).take(n - trunk));
                polyline_from_headings(Vec2::ZERO, &hs)
            };
            let (route, other) = if left { (branch(1.0), branch(-1.0)) } else { (branch(-1.0), branch(1.0)) };
            // The unused branch is stored from the fork onwards.
            (route, vec![other[trunk..].to_vec()], Some(trunk as f64), Some(left))
        }
    };

    let mut world = World {
        seed,
        kind: config.kind,
        centerline,
        branches,
        half_width: config.half_width,
        robot_radius: config.robot_radius,
        obstacles: vec![],
        pedestrians: vec![],
        fork_s,
        route_left,
    };
    place_obstacles(&mut world, config, &mut rng)?;
    place_pedestrians(&mut world, config, &mut rng);
    Ok(world)
}

fn place_obstacles(world: &mut World, config: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
    let start = 5.0;
    let end = world.route_length() - 3.0;
    if config.obstacle_density <= 0.0 || end <= start {
        return Ok(());
    }
    let count = ((end - start) * config.obstacle_density).round() as usize;
    let spacing = 5.0;
    for attempt in 0..config.max_retries {
        let mut obstacles = Vec::with_capacity(count);
        let mut s = start;
        let mut ok = true;
        for _ in 0..count {
            let room = end - s - spacing * (count - obstacles.len()) as f64 + spacing;
            if room < 0.0 {
                ok = false;
                break;
            }
            s += rng.gen_range(0.0..=room.min(6.0));
            let center_s = s;
            let normal = route_normal(&world.centerline, center_s);
            let base = point_at_arclength(&world.centerline, center_s);
            let lateral = rng.gen_range(-1.1..1.1);
            let center = base + normal * lateral;
            let ob = if rng.gen_bool(0.5) {
                Obstacle::Circle { center, radius: rng.gen_range(0.25..0.5) }
            } else {
                let hx = rng.gen_range(0.2..0.45);
                let hy = rng.gen_range(0.2..0.45);
                Obstacle::Rect { min: center - Vec2::new(hx, hy), max: center + Vec2::new(hx, hy) }
            };
            let r = ob.bounding_radius();
            let left_gap = world.half_width - (lateral + r);
            let right_gap = (lateral - r) + world.half_width;
            if left_gap.max(right_gap) < config.min_gap {
                ok = false;
                break;
            }
            obstacles.push(ob);
            s += spacing;
        }
        if ok {
            log::debug!("placed {} obstacles on attempt {attempt}", obstacles.len());
            world.obstacles = obstacles;
            return Ok(());
        }
    }
    Err(WorldError::PlacementFailed(config.max_retries))
}

fn place_pedestrians(world: &mut World, config: &WorldConfig, rng: &mut ChaCha8Rng) {
    let len = world.route_length();
    for _ in 0..config.pedestrian_count {
        let s = rng.gen_range(0.4 * len..0.8 * len);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.gen_range(0.7..1.1);
        let normal = route_normal(&world.centerline, s);
        let start = point_at_arclength(&world.centerline, s) + normal * lateral;
        let speed = rng.gen_range(0.3..0.7);
        let dir = tangent_at_arclength(&world.centerline, s);
        world.pedestrians.push(Pedestrian { start, velocity: dir * -speed, radius: 0.3 });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RobotLimits {
    fn default() -> Self {
        Self { v_max: 2.0, omega_max: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub omega: f64,
}

impl Action {
    pub const STOP: Action = Action { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn clamped(self, lim: &RobotLimits) -> Action {
        Action {
            v: self.v.clamp(-lim.v_max, lim.v_max),
            omega: self.omega.clamp(-lim.omega_max, lim.omega_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2D,
    pub speed: f64,
    pub yaw_rate: f64,
}

/// One explicit Euler step of the unicycle with the action clamped to the limits.
pub fn step(state: &RobotState, action: Action, dt: f64, limits: &RobotLimits) -> RobotState {
    assert!(dt > 0.0, "dt must be positive");
    let a = action.clamped(limits);
    let h = state.pose.heading;
    RobotState {
        pose: Pose2D::new(
            state.pose.x + a.v * h.cos() * dt,
            state.pose.y + a.v * h.sin() * dt,
            h + a.omega * dt,
        ),
        speed: a.v,
        yaw_rate: a.omega,
    }
}

/// [`step`] followed by a collision test at the new position and time.
pub fn step_in_world(
    world: &World,
    state: &RobotState,
    action: Action,
    t: f64,
    dt: f64,
    limits: &RobotLimits,
) -> (RobotState, bool) {
    let next = step(state, action, dt, limits);
    let hit = world.collides(next.pose.position(), t + dt);
    (next, hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn step_examples() {
        let lim = RobotLimits::default();
        let s0 = RobotState::default();
        let s = step(&s0, Action::new(1.0, 0.0), 0.2, &lim);
        assert!((s.pose.x - 0.2).abs() < 1e-15 && s.pose.y == 0.0);
        let s = step(&s0, Action::new(0.0, 1.0), PI, &lim);
        assert!((s.pose.heading - PI).abs() < 1e-12);
        assert_eq!(s.pose.position(), Vec2::ZERO);
        let s = step(&s0, Action::new(5.0, -9.0), 0.1, &lim);
        assert_eq!((s.speed, s.yaw_rate), (2.0, -1.5));
    }

    #[test]
    fn circle_closes() {
        let lim = RobotLimits::default();
        let n = 20_000;
        let dt = 2.0 * PI / n as f64;
        let mut s = RobotState::default();
        for _ in 0..n {
            s = step(&s, Action::new(1.0, 1.0), dt, &lim);
        }
        // Explicit Euler drifts outward by O(dt) over one revolution.
        let err = s.pose.position().norm();
        assert!(err < 2.0 * PI * dt, "closure error {err}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_world(7, &cfg).unwrap(), generate_world(7, &cfg).unwrap());
        assert_ne!(generate_world(7, &cfg).unwrap(), generate_world(8, &cfg).unwrap());
    }

    #[test]
    fn empty_world_is_free_corridor() {
        let cfg = WorldConfig { obstacle_density: 0.0, pedestrian_count: 0, ..Default::default() };
        let w = generate_world(0, &cfg).unwrap();
        assert!(w.obstacles.is_empty());
        assert!(w.centerline.len() >= 2);
        for p in &w.centerline {
            assert!(!w.collides(*p, 0.0));
        }
    }

    #[test]
    fn generated_obstacles_leave_a_gap() {
        let cfg = WorldConfig::default();
        for seed in 0..50 {
            let w = generate_world(seed, &cfg).unwrap();
            for o in &w.obstacles {
                let (s, _) = project_onto_polyline(o.center(), &w.centerline);
                let n = route_normal(&w.centerline, s);
                let base = point_at_arclength(&w.centerline, s);
                let free = (-30..=30)
                    .map(|i| base + n * (i as f64 * 0.05))
                    .filter(|p| o.distance(*p) > w.robot_radius)
                    .count();
                assert!(free > 0, "seed {seed} blocked");
            }
        }
    }

    #[test]
    fn junction_has_two_branches() {
        let w = generate_world(3, &WorldConfig::for_kind(WorldKind::YJunction)).unwrap();
        assert_eq!(w.branches.len(), 1);
        let end_route = *w.centerline.last().unwrap();
        let end_other = *w.branches[0].last().unwrap();
        assert!(end_route.y * end_other.y < 0.0);
        assert_eq!(w.route_left, Some(end_route.y > 0.0));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = WorldConfig { half_width: 0.2, ..Default::default() };
        assert!(generate_world(0, &cfg).is_err());
        let dense = WorldConfig { obstacle_density: 5.0, max_retries: 3, ..Default::default() };
        assert!(matches!(generate_world(0, &dense), Err(WorldError::PlacementFailed(3))));
    }
}
