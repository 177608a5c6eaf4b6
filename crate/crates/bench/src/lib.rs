//! Fixtures shared by the benches: a world, an untrained toy policy and
//! one policy input.

use sharenav_core::geometry::{CameraModel, Pose2D, Vec2};
use sharenav_core::instruction::Instruction;
use sharenav_core::policy::{cluster_anchors, DiffusionSchedule, PolicyConfig, PolicyInput, PolicyModel, Trajectory};
use sharenav_core::world::{generate_world, render_front_view, render_raster, RasterConfig, World, WorldConfig, WorldKind};

pub fn corridor() -> World {
    generate_world(7, &WorldConfig::for_kind(WorldKind::Corridor)).expect("world")
}

/// Fan of straight and curved lines, enough to seed `cfg.modes` anchors.
pub fn fan(cfg: &PolicyConfig) -> Vec<Trajectory> {
    (0..cfg.modes * 4)
        .map(|i| {
            let k = -0.3 + 0.6 * i as f64 / (cfg.modes * 4 - 1) as f64;
            (1..=cfg.horizon).map(|j| Vec2::new(0.5 * j as f64, k * (0.5 * j as f64).powi(2) * 0.2)).collect()
        })
        .collect()
}

pub fn toy_model() -> PolicyModel {
    let cfg = PolicyConfig::toy();
    let anchors = cluster_anchors(&fan(&cfg), cfg.modes, 0).expect("anchors");
    PolicyModel::new(cfg, anchors, DiffusionSchedule::default()).expect("model")
}

pub fn input(model: &PolicyModel, world: &World, instruction: Option<Instruction>) -> PolicyInput {
    let pose = Pose2D::new(6.0, 0.1, 0.05);
    let r = render_raster(world, &pose, 0.0, &RasterConfig::default());
    let cam = CameraModel::default().downscaled(model.config.front_downscale);
    PolicyInput {
        rasters: vec![r; model.config.history],
        goal: Some(Vec2::new(5.0, 0.2)),
        front_view: Some(render_front_view(world, &pose, 0.0, &cam)),
        instruction,
    }
}
