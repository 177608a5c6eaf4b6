//! Egocentric occupancy rasters, semantic front views and impassable masks.

use serde::{Deserialize, Serialize};

use super::{Obstacle, World};
use crate::geometry::{backproject_pixel, ego_to_world, world_to_ego, CameraModel, PixelPoint, Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Cells per side; the raster is square.
    pub size: usize,
    /// Meters per cell.
    pub resolution: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { size: 64, resolution: 0.125 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Cell {
    Free = 0,
    Obstacle = 1,
    OffSidewalk = 2,
}

impl Cell {
    pub const CHANNELS: usize = 3;

    fn from_u8(x: u8) -> Cell {
        match x {
            0 => Cell::Free,
            1 => Cell::Obstacle,
            _ => Cell::OffSidewalk,
        }
    }
}

/// Egocentric grid with the robot at the bottom-center facing up (row 0 is
/// farthest ahead, column 0 is leftmost).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub size: usize,
    pub resolution: f64,
    pub cells: Vec<Cell>,
}

impl Raster {
    pub fn get(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.size + col]
    }

    /// Ego coordinates of the center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        cell_center(self.size, self.resolution, row, col)
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let n = self.size as f64;
        let r = n - p.x / self.resolution;
        let c = n / 2.0 - p.y / self.resolution;
        if r < 0.0 || c < 0.0 || r >= n || c >= n {
            return None;
        }
        Some((r.floor() as usize, c.floor() as usize))
    }

    /// Value of one-hot channel `ch` at a cell: 1 iff the cell has that class.
    pub fn channel(&self, ch: usize, row: usize, col: usize) -> u8 {
        u8::from(self.get(row, col) as usize == ch)
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|&&c| c == cell).count()
    }

    pub fn to_rle(&self) -> RleRaster {
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &c in &self.cells {
            match runs.last_mut() {
                Some(last) if last[0] == c as u32 => last[1] += 1,
                _ => runs.push([c as u32, 1]),
            }
        }
        RleRaster { size: self.size, resolution: self.resolution, runs }
    }
}

fn cell_center(size: usize, res: f64, row: usize, col: usize) -> Vec2 {
    Vec2::new(
        (size as f64 - row as f64 - 0.5) * res,
        (size as f64 / 2.0 - col as f64 - 0.5) * res,
    )
}

/// Run-length encoded raster: `[class, count]` pairs in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleRaster {
    pub size: usize,
    pub resolution: f64,
    pub runs: Vec<[u32; 2]>,
}

impl RleRaster {
    pub fn decode(&self) -> Result<Raster, String> {
        let mut cells = Vec::with_capacity(self.size * self.size);
        for &[c, n] in &self.runs {
            if c > 2 {
                return Err(format!("unknown cell class {c}"));
            }
            cells.extend(std::iter::repeat(Cell::from_u8(c as u8)).take(n as usize));
        }
        if cells.len() != self.size * self.size {
            return Err(format!("run lengths sum to {} for a {}² raster", cells.len(), self.size));
        }
        Ok(Raster { size: self.size, resolution: self.resolution, cells })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Pixel {
    /// Ray misses the ground ahead.
    Sky = 0,
    Free = 1,
    Obstacle = 2,
    OffSidewalk = 3,
}

/// Per-pixel semantic labels of the synthetic front camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Pixel>,
}

impl SemanticImage {
    pub fn get(&self, u: usize, v: usize) -> Pixel {
        self.labels[v * self.width + u]
    }
}

/// Binary image-space mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, x: bool) {
        self.bits[v * self.width + u] = x;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert_eq!((self.width, self.height), (other.width, other.height), "mask size mismatch");
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame_index: usize,
    pub raster: Raster,
    pub front_view: Option<SemanticImage>,
}

/// Corridor segments that may lie within `radius + half_width` of `center`.
fn nearby_segments(world: &World, center: Vec2, radius: f64) -> Vec<(Vec2, Vec2)> {
    let reach = radius + world.half_width;
    let mut out = Vec::new();
    for c in world.corridors() {
        for s in c.windows(2) {
            let (d, _) = crate::geometry::point_segment_distance(center, s[0], s[1]);
            if d <= reach {
                out.push((s[0], s[1]));
            }
        }
    }
    out
}

fn on_walk(p: Vec2, segs: &[(Vec2, Vec2)], hw: f64) -> bool {
    segs.iter().any(|&(a, b)| {
        if p.x < a.x.min(b.x) - hw || p.x > a.x.max(b.x) + hw || p.y < a.y.min(b.y) - hw || p.y > a.y.max(b.y) + hw {
            return false;
        }
        crate::geometry::point_segment_distance(p, a, b).0 <= hw
    })
}

/// Separating-axis test between two convex quadrilaterals.
fn quads_intersect(a: &[Vec2; 4], b: &[Vec2; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let axis = (poly[(i + 1) % 4] - poly[i]).perp();
            let proj = |q: &[Vec2; 4]| {
                q.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let d = p.dot(axis);
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// Marks every raster cell that an ego-frame shape touches.
fn mark_obstacle(cells: &mut [Cell], size: usize, res: f64, pose: &Pose2D, ob: &Obstacle) {
    let n = size as f64;
    let c_ego = world_to_ego(pose, ob.center());
    let r = ob.bounding_radius();
    let row_lo = ((n - (c_ego.x + r) / res).floor().max(0.0)) as usize;
    let row_hi = (n - (c_ego.x - r) / res).ceil().min(n);
    let col_lo = ((n / 2.0 - (c_ego.y + r) / res).floor().max(0.0)) as usize;
    let col_hi = (n / 2.0 - (c_ego.y - r) / res).ceil().min(n);
    if row_hi <= 0.0 || col_hi <= 0.0 {
        return;
    }
    let (row_hi, col_hi) = (row_hi as usize, col_hi as usize);
    let rect_quad = match *ob {
        Obstacle::Rect { min, max } => Some(
            [min, Vec2::new(max.x, min.y), max, Vec2::new(min.x, max.y)].map(|p| world_to_ego(pose, p)),
        ),
        Obstacle::Circle { .. } => None,
    };
    for row in row_lo..row_hi {
        for col in col_lo..col_hi {
            let x0 = (n - row as f64 - 1.0) * res;
            let y0 = (n / 2.0 - col as f64 - 1.0) * res;
            let (x1, y1) = (x0 + res, y0 + res);
            let hit = match (*ob, rect_quad) {
                (Obstacle::Circle { radius, .. }, _) => {
                    let qx = c_ego.x.clamp(x0, x1);
                    let qy = c_ego.y.clamp(y0, y1);
                    Vec2::new(qx, qy).dist(c_ego) <= radius
                }
                (_, Some(q)) => {
                    let cell = [Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)];
                    quads_intersect(&cell, &q)
                }
                _ => unreachable!(),
            };
            if hit {
                cells[row * size + col] = Cell::Obstacle;
            }
        }
    }
}

/// Obstacles plus pedestrians frozen at time `t`.
fn obstacles_at(world: &World, t: f64) -> Vec<Obstacle> {
    world
        .obstacles
        .iter()
        .copied()
        .chain(world.pedestrians.iter().map(|q| Obstacle::Circle { center: q.position(t), radius: q.radius }))
        .collect()
}

pub fn render_raster(world: &World, pose: &Pose2D, t: f64, cfg: &RasterConfig) -> Raster {
    let size = cfg.size;
    let res = cfg.resolution;
    let extent = size as f64 * res;
    let center = ego_to_world(pose, Vec2::new(extent / 2.0, 0.0));
    let segs = nearby_segments(world, center, extent * std::f64::consts::FRAC_1_SQRT_2);
    let mut cells = vec![Cell::Free; size * size];
    for row in 0..size {
        for col in 0..size {
            let p = ego_to_world(pose, cell_center(size, res, row, col));
            if !on_walk(p, &segs, world.half_width) {
                cells[row * size + col] = Cell::OffSidewalk;
            }
        }
    }
    for ob in obstacles_at(world, t) {
        mark_obstacle(&mut cells, size, res, pose, &ob);
    }
    Raster { size, resolution: res, cells }
}

pub fn render_observation(
    world: &World,
    pose: &Pose2D,
    t: f64,
    frame_index: usize,
    cfg: &RasterConfig,
    front_cam: Option<&CameraModel>,
) -> Observation {
    Observation {
        frame_index,
        raster: render_raster(world, pose, t, cfg),
        front_view: front_cam.map(|c| render_front_view(world, pose, t, c)),
    }
}

/// Labels each pixel by the ground point its center ray hits.
pub fn render_front_view(world: &World, pose: &Pose2D, t: f64, cam: &CameraModel) -> SemanticImage {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let obstacles = obstacles_at(world, t);
    let segs: Vec<(Vec2, Vec2)> = world.corridors().flat_map(|c| c.windows(2).map(|s| (s[0], s[1]))).collect();
    let mut labels = vec![Pixel::Sky; w * h];
    for v in 0..h {
        for u in 0..w {
            let Ok(ego) = backproject_pixel(cam, PixelPoint::new(u as f64 + 0.5, v as f64 + 0.5)) else {
                continue;
            };
            let p = ego_to_world(pose, ego);
            labels[v * w + u] = if obstacles.iter().any(|o| o.contains(p)) {
                Pixel::Obstacle
            } else if !on_walk(p, &segs, world.half_width) {
                Pixel::OffSidewalk
            } else {
                Pixel::Free
            };
        }
    }
    SemanticImage { width: w, height: h, labels }
}

/// Pixels whose ground point is inside an obstacle or off the sidewalk.
pub fn render_impassable_mask(world: &World, pose: &Pose2D, t: f64, cam: &CameraModel) -> Mask {
    mask_from_view(&render_front_view(world, pose, t, cam))
}

pub fn mask_from_view(view: &SemanticImage) -> Mask {
    Mask {
        width: view.width,
        height: view.height,
        bits: view.labels.iter().map(|&l| matches!(l, Pixel::Obstacle | Pixel::OffSidewalk)).collect(),
    }
}
