//! Planar frames, the ground-plane pinhole camera and polyline helpers.
//!
//! Ego frame: x forward, y left. Camera frame: x right, y down, z along the
//! optical axis. The camera sits `mount_height` above the robot origin and
//! is pitched down by `mount_pitch` (0 = level).

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A 2D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-pointing unit normal of a direction.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Robot pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::new(self.heading.cos(), self.heading.sin())
    }
}

/// World point expressed in the robot's ego frame.
pub fn world_to_ego(pose: &Pose2D, point: Vec2) -> Vec2 {
    (point - pose.position()).rotate(-pose.heading)
}

/// Ego point expressed in the world frame.
pub fn ego_to_world(pose: &Pose2D, point: Vec2) -> Vec2 {
    point.rotate(pose.heading) + pose.position()
}

/// Image-space point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum CameraError {
    #[error("focal lengths must be positive")]
    BadFocalLength,
    #[error("principal point outside the image")]
    BadPrincipalPoint,
    #[error("mount height must be positive")]
    BadMountHeight,
}

/// Pinhole camera mounted on the robot looking forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub mount_height: f64,
    pub mount_pitch: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 224.0,
            cy: 224.0,
            width: 448,
            height: 448,
            mount_height: 0.5,
            mount_pitch: 0.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::BadFocalLength);
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(CameraError::BadPrincipalPoint);
        }
        if !(self.mount_height > 0.0) {
            return Err(CameraError::BadMountHeight);
        }
        Ok(())
    }

    /// The same camera rendering a `width/factor` image. Pixel coordinates are
    /// continuous with pixel `i` covering `[i, i + 1)`, so scaling is uniform.
    pub fn downscaled(&self, factor: u32) -> CameraModel {
        let f = factor as f64;
        CameraModel {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            ..*self
        }
    }

    /// Ego ground point (z = 0) in camera coordinates.
    fn ego_to_camera(&self, p: Vec2) -> [f64; 3] {
        // Level camera: x_c = -y, y_c = h - z, z_c = x. Pitch rotates about x_c.
        let xl = -p.y;
        let yl = self.mount_height;
        let zl = p.x;
        let (s, c) = self.mount_pitch.sin_cos();
        [xl, c * yl - s * zl, s * yl + c * zl]
    }

    pub fn to_normalized(&self, px: PixelPoint) -> [f64; 2] {
        [px.u / self.width as f64, px.v / self.height as f64]
    }

    pub fn from_normalized(&self, p: [f64; 2]) -> PixelPoint {
        PixelPoint::new(p[0] * self.width as f64, p[1] * self.height as f64)
    }

    pub fn in_bounds(&self, px: PixelPoint) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u <= self.width as f64 && px.v <= self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ProjectionError {
    #[error("point is at or behind the camera plane")]
    NotVisible,
    #[error("pixel ray does not meet the ground ahead")]
    AboveHorizon,
}

/// Projects an ego ground point into the camera. No bounds clipping.
pub fn project_ground_point(cam: &CameraModel, p: Vec2) -> Result<PixelPoint, ProjectionError> {
    let [xc, yc, zc] = cam.ego_to_camera(p);
    if zc <= 0.0 {
        return Err(ProjectionError::NotVisible);
    }
    Ok(PixelPoint::new(
        cam.fx * xc / zc + cam.cx,
        cam.fy * yc / zc + cam.cy,
    ))
}

/// Intersects the viewing ray of a pixel with the ground plane.
pub fn backproject_pixel(cam: &CameraModel, px: PixelPoint) -> Result<Vec2, ProjectionError> {
    let dx = (px.u - cam.cx) / cam.fx;
    let dy = (px.v - cam.cy) / cam.fy;
    // Ray direction (dx, dy, 1) in camera coordinates, rotated back to the level frame.
    let (s, c) = cam.mount_pitch.sin_cos();
    let yl = c * dy + s;
    let zl = -s * dy + c;
    let xl = dx;
    // Level frame y points down; the ground is at y = mount_height.
    if yl <= 1e-12 {
        return Err(ProjectionError::AboveHorizon);
    }
    let t = cam.mount_height / yl;
    let forward = t * zl;
    if forward <= 0.0 {
        return Err(ProjectionError::AboveHorizon);
    }
    Ok(Vec2::new(forward, -t * xl))
}

/// Projects an ego-frame trajectory, dropping invisible waypoints and clipping
/// every segment to the image rectangle. Waypoint order is preserved.
pub fn project_trajectory(cam: &CameraModel, traj: &[Vec2]) -> Vec<PixelPoint> {
    let projected: Vec<Option<PixelPoint>> = traj
        .iter()
        .map(|&p| project_ground_point(cam, p).ok())
        .collect();
    let visible: Vec<PixelPoint> = projected.iter().flatten().copied().collect();
    let w = cam.width as f64;
    let h = cam.height as f64;
    let mut out: Vec<PixelPoint> = Vec::new();
    let push = |out: &mut Vec<PixelPoint>, p: PixelPoint| {
        if out.last().map_or(true, |q: &PixelPoint| (q.u - p.u).abs() > 1e-9 || (q.v - p.v).abs() > 1e-9) {
            out.push(p);
        }
    };
    if visible.len() == 1 {
        if cam.in_bounds(visible[0]) {
            out.push(visible[0]);
        }
        return out;
    }
    for pair in visible.windows(2) {
        if let Some((a, b)) = clip_segment(pair[0], pair[1], w, h) {
            push(&mut out, a);
            push(&mut out, b);
        }
    }
    out
}

/// Liang-Barsky clipping of a segment to [0,w]×[0,h].
fn clip_segment(a: PixelPoint, b: PixelPoint, w: f64, h: f64) -> Option<(PixelPoint, PixelPoint)> {
    let du = b.u - a.u;
    let dv = b.v - a.v;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [(-du, a.u), (du, w - a.u), (-dv, a.v), (dv, h - a.v)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        PixelPoint::new(a.u + t0 * du, a.v + t0 * dv),
        PixelPoint::new(a.u + t1 * du, a.v + t1 * dv),
    ))
}

/// Distance from `p` to segment `ab`, with the segment parameter of the foot.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((a + ab * t).dist(p), t)
}

/// Distance from a point to a polyline (∞ for an empty polyline).
pub fn point_polyline_distance(p: Vec2, line: &[Vec2]) -> f64 {
    match line.len() {
        0 => f64::INFINITY,
        1 => p.dist(line[0]),
        _ => line
            .windows(2)
            .map(|s| point_segment_distance(p, s[0], s[1]).0)
            .fold(f64::INFINITY, f64::min),
    }
}

pub fn polyline_length(line: &[Vec2]) -> f64 {
    line.windows(2).map(|s| s[0].dist(s[1])).sum()
}

/// Point at arc length `s` along a polyline, clamped to its ends.
pub fn point_at_arclength(line: &[Vec2], s: f64) -> Vec2 {
    if line.is_empty() {
        return Vec2::ZERO;
    }
    if s <= 0.0 {
        return line[0];
    }
    let mut acc = 0.0;
    for seg in line.windows(2) {
        let l = seg[0].dist(seg[1]);
        if acc + l >= s && l > 0.0 {
            return seg[0].lerp(seg[1], (s - acc) / l);
        }
        acc += l;
    }
    *line.last().unwrap()
}

/// `k` points spaced uniformly in arc length, including both ends.
/// Returns `None` when the polyline has zero length or `k < 2`.
pub fn resample_uniform(line: &[Vec2], k: usize) -> Option<Vec<Vec2>> {
    let total = polyline_length(line);
    if k < 2 || !(total > 1e-9) {
        return None;
    }
    Some(
        (0..k)
            .map(|i| point_at_arclength(line, total * i as f64 / (k - 1) as f64))
            .collect(),
    )
}

pub fn pixels_to_vec2(px: &[PixelPoint]) -> Vec<Vec2> {
    px.iter().map(|p| Vec2::new(p.u, p.v)).collect()
}

/// Arc length of the closest point on a polyline and the distance to it.
/// Ties go to the earliest segment.
pub fn project_onto_polyline(p: Vec2, line: &[Vec2]) -> (f64, f64) {
    if line.len() < 2 {
        return (0.0, line.first().map_or(f64::INFINITY, |q| q.dist(p)));
    }
    let mut best = (0.0, f64::INFINITY);
    let mut acc = 0.0;
    for seg in line.windows(2) {
        let (d, t) = point_segment_distance(p, seg[0], seg[1]);
        let l = seg[0].dist(seg[1]);
        if d < best.1 {
            best = (acc + t * l, d);
        }
        acc += l;
    }
    best
}

/// Unit tangent of the polyline segment containing arc length `s`.
pub fn tangent_at_arclength(line: &[Vec2], s: f64) -> Vec2 {
    let mut acc = 0.0;
    let mut last = Vec2::new(1.0, 0.0);
    for seg in line.windows(2) {
        let l = seg[0].dist(seg[1]);
        if l > 0.0 {
            last = (seg[1] - seg[0]) * (1.0 / l);
            if acc + l >= s {
                return last;
            }
        }
        acc += l;
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Vec2, b: Vec2, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn world_to_ego_examples() {
        let p = world_to_ego(&Pose2D::new(0.0, 0.0, 0.0), Vec2::new(3.0, 1.0));
        assert!(close(p, Vec2::new(3.0, 1.0), 1e-12));
        let p = world_to_ego(&Pose2D::new(1.0, 0.0, PI / 2.0), Vec2::new(1.0, 2.0));
        assert!(close(p, Vec2::new(2.0, 0.0), 1e-12));
        let p = world_to_ego(&Pose2D::new(0.0, 0.0, PI), Vec2::new(1.0, 0.0));
        assert!(close(p, Vec2::new(-1.0, 0.0), 1e-12));
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::default();
        let px = project_ground_point(&cam, Vec2::new(2.0, 0.0)).unwrap();
        assert_eq!(px, PixelPoint::new(224.0, 274.0));
        let px = project_ground_point(&cam, Vec2::new(2.0, 1.0)).unwrap();
        assert_eq!(px, PixelPoint::new(124.0, 274.0));
        assert_eq!(
            project_ground_point(&cam, Vec2::new(-1.0, 0.0)),
            Err(ProjectionError::NotVisible)
        );
    }

    #[test]
    fn backprojection_examples() {
        let cam = CameraModel::default();
        let p = backproject_pixel(&cam, PixelPoint::new(224.0, 274.0)).unwrap();
        assert!(close(p, Vec2::new(2.0, 0.0), 1e-12));
        assert_eq!(
            backproject_pixel(&cam, PixelPoint::new(224.0, 224.0)),
            Err(ProjectionError::AboveHorizon)
        );
        assert_eq!(
            backproject_pixel(&cam, PixelPoint::new(224.0, 100.0)),
            Err(ProjectionError::AboveHorizon)
        );
    }

    #[test]
    fn pitched_camera_round_trip() {
        let cam = CameraModel {
            mount_pitch: 0.2,
            ..CameraModel::default()
        };
        for &(x, y) in &[(0.8, 0.0), (3.0, -1.0), (10.0, 2.0)] {
            let p = Vec2::new(x, y);
            let q = backproject_pixel(&cam, project_ground_point(&cam, p).unwrap()).unwrap();
            assert!(close(p, q, 1e-9));
        }
    }

    #[test]
    fn straight_trajectory_rises_toward_horizon() {
        let cam = CameraModel::default();
        let traj: Vec<Vec2> = (1..=8).map(|i| Vec2::new(0.5 * i as f64, 0.0)).collect();
        let line = project_trajectory(&cam, &traj);
        assert!(line.len() >= 2);
        for w in line.windows(2) {
            assert!(w[1].v < w[0].v);
        }
    }

    #[test]
    fn trajectory_behind_is_empty_and_single_point_kept() {
        let cam = CameraModel::default();
        let behind: Vec<Vec2> = (1..=4).map(|i| Vec2::new(-(i as f64), 0.0)).collect();
        assert!(project_trajectory(&cam, &behind).is_empty());
        let single = project_trajectory(&cam, &[Vec2::new(2.0, 0.0)]);
        assert_eq!(single, vec![PixelPoint::new(224.0, 274.0)]);
    }

    #[test]
    fn clipping_keeps_points_in_bounds() {
        let cam = CameraModel::default();
        // Sweeps across the left image edge.
        let traj = vec![Vec2::new(1.0, 0.0), Vec2::new(2.0, 3.0), Vec2::new(3.0, 6.0)];
        let line = project_trajectory(&cam, &traj);
        assert!(!line.is_empty());
        for p in &line {
            assert!(cam.in_bounds(*p), "{p:?}");
        }
    }

    #[test]
    fn downscaled_camera_matches_block_centers() {
        let cam = CameraModel::default();
        let small = cam.downscaled(14);
        assert_eq!(small.width, 32);
        // The center of small pixel (i, j) is the center of the big block.
        let big = backproject_pixel(&cam, PixelPoint::new(14.0 * 20.0 + 7.0, 14.0 * 25.0 + 7.0)).unwrap();
        let sm = backproject_pixel(&small, PixelPoint::new(20.5, 25.5)).unwrap();
        assert!(close(big, sm, 1e-9));
    }

    #[test]
    fn resample_is_arclength_uniform() {
        let line = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(1.0, 3.0)];
        let pts = resample_uniform(&line, 5).unwrap();
        for w in pts.windows(2) {
            // Consecutive samples are 1 m apart along the path.
            let along = polyline_length(&[w[0], w[1]]);
            assert!(along <= 1.0 + 1e-12);
        }
        assert!(close(pts[4], Vec2::new(1.0, 3.0), 1e-12));
        assert!(resample_uniform(&[Vec2::ZERO, Vec2::ZERO], 4).is_none());
    }

    proptest! {
        #[test]
        fn frame_inverse(x in -50.0..50.0f64, y in -50.0..50.0f64, h in -10.0..10.0f64,
                         px in -20.0..20.0f64, py in -20.0..20.0f64) {
            let pose = Pose2D::new(x, y, h);
            let p = Vec2::new(px, py);
            let q = world_to_ego(&pose, ego_to_world(&pose, p));
            prop_assert!(close(p, q, 1e-9));
        }

        #[test]
        fn heading_wrap_invariance(h in -3.0..3.0f64, px in -20.0..20.0f64, py in -20.0..20.0f64) {
            let a = world_to_ego(&Pose2D::new(1.0, 2.0, h), Vec2::new(px, py));
            let b = world_to_ego(&Pose2D::new(1.0, 2.0, h + 2.0 * PI), Vec2::new(px, py));
            prop_assert!(close(a, b, 1e-9));
        }

        #[test]
        fn round_trip(x in 0.5..20.0f64, y in -10.0..10.0f64) {
            let cam = CameraModel::default();
            let p = Vec2::new(x, y);
            let q = backproject_pixel(&cam, project_ground_point(&cam, p).unwrap()).unwrap();
            prop_assert!(close(p, q, 1e-6));
        }

        #[test]
        fn perspective_ordering(a in 0.5..20.0f64, d in 0.01..5.0f64) {
            let cam = CameraModel::default();
            let near = project_ground_point(&cam, Vec2::new(a, 0.0)).unwrap();
            let far = project_ground_point(&cam, Vec2::new(a + d, 0.0)).unwrap();
            prop_assert!(far.v < near.v);
        }
    }
}
