#![allow(dead_code)]

use pnp_active::geometry::OrientedBox;
use pnp_active::harness::{Pools, RunConfig};
use pnp_active::model::TrainConfig;
use pnp_active::scenegen::{generate_pool, Actor, Behavior, FeatureRaster, GenConfig, Scene, SceneConditions};

/// Hand-built scene with unit boxes at `centers` and blank rasters.
pub fn toy_scene(id: u64, centers: &[[f64; 2]]) -> Scene {
    Scene {
        id,
        extent: [100.0, 100.0],
        sdv_position: [50.0, 50.0],
        conditions: SceneConditions {
            road_heading: 0.0,
            sensor_gain: 1.0,
            clutter_scale: 1.0,
            intersections: vec![],
        },
        actors: centers
            .iter()
            .enumerate()
            .map(|(i, c)| Actor {
                id: i as u32,
                bbox: OrientedBox::new(c[0], c[1], 1.0, 1.0, 0.0),
                trajectory: vec![*c; 10],
                behavior: Behavior::Parked,
                speed: 0.0,
                point_count: 5,
                signal: 0,
            })
            .collect(),
        features: FeatureRaster::zeros(40, 40, 2.5, 1),
        map: FeatureRaster::zeros(40, 40, 2.5, 1),
    }
}

pub fn gen(n: usize, first_id: u64, seed: u64) -> Vec<Scene> {
    generate_pool(&GenConfig {
        n_scenes: n,
        first_scene_id: first_id,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

/// Small pools for loop tests.
pub fn small_pools(n_train: usize, n_eval: usize) -> Pools {
    Pools::new(gen(n_train, 0, 11), gen(n_eval, 100_000, 12), GenConfig::default().dt).unwrap()
}

/// Cheap loop settings: few epochs, small budgets.
pub fn quick_config() -> RunConfig {
    RunConfig {
        iterations: 3,
        budget: 60,
        initial_budget: 60,
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}
