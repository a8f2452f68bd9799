//! Synthetic scene pools.
//!
//! Each scene is a square patch of road network seen from an ego vehicle
//! (the SDV) at its center. Scenes carry a grid orientation, a handful of
//! intersections, and actors whose five-second futures follow one of a few
//! behaviors. Sensor evidence is rendered into a coarse raster whose
//! strength and reliability decay with distance to the SDV, standing in for
//! LiDAR returns; a second raster carries the static map.
//!
//! Generation is a pure function of [`GenConfig`]: every scene draws from its
//! own counter-based stream keyed by `(seed, scene id)`.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, OrientedBox, Point};
use crate::rng::{stream, Domain};

/// Sensor channels of [`Scene::features`].
pub mod channel {
    pub const OCCUPANCY: usize = 0;
    pub const VEL_X: usize = 1;
    pub const VEL_Y: usize = 2;
    pub const HEADING_COS: usize = 3;
    pub const HEADING_SIN: usize = 4;
    pub const TURN_SIGNAL: usize = 5;
    /// Noisy vote for the offset from the cell center to the center of the
    /// actor producing the returns, in cell units.
    pub const CENTER_X: usize = 6;
    pub const CENTER_Y: usize = 7;
    pub const COUNT: usize = 8;
}

/// Map channels of [`Scene::map`].
pub mod map_channel {
    pub const PROXIMITY: usize = 0;
    pub const TO_INTERSECTION_X: usize = 1;
    pub const TO_INTERSECTION_Y: usize = 2;
    pub const COUNT: usize = 3;
}

/// Points per unit of occupancy evidence.
const POINTS_PER_UNIT: f64 = 40.0;
/// Gaussian falloff of evidence outside a box, meters.
const FALLOFF_M: f64 = 0.5;
const VELOCITY_SCALE: f64 = 10.0;
const MIN_COVERAGE: f64 = 0.25;
/// Center-vote noise at a single return, meters.
const CENTER_NOISE_M: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Parked,
    Straight,
    LeftTurn,
    RightTurn,
    UTurn,
}

impl Behavior {
    pub const ALL: [Behavior; 5] = [
        Behavior::Parked,
        Behavior::Straight,
        Behavior::LeftTurn,
        Behavior::RightTurn,
        Behavior::UTurn,
    ];
}

/// High-level action of a trajectory, as reported per bucket in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Straight,
    Left,
    Right,
    Stationary,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Straight, Action::Left, Action::Right, Action::Stationary];

    pub fn name(self) -> &'static str {
        match self {
            Action::Straight => "straight",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stationary => "stationary",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const STATIONARY_DISPLACEMENT_M: f64 = 1.0;
pub const TURN_THRESHOLD_DEG: f64 = 15.0;
/// Radius of the annotation jitter on parked waypoints, meters.
pub const PARKED_JITTER: f64 = 0.04;

/// Buckets a future trajectory into a high-level action.
///
/// Stationary when the first and last waypoints are less than 1 m apart,
/// otherwise by the signed angle between the first and last velocity
/// directions (counter-clockwise positive).
pub fn classify_action(trajectory: &[Point], _dt: f64) -> Result<Action> {
    if trajectory.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "trajectory needs at least 2 waypoints, got {}",
            trajectory.len()
        )));
    }
    let first = trajectory[0];
    let last = trajectory[trajectory.len() - 1];
    if (last[0] - first[0]).hypot(last[1] - first[1]) < STATIONARY_DISPLACEMENT_M {
        return Ok(Action::Stationary);
    }
    let n = trajectory.len();
    let v0 = [trajectory[1][0] - first[0], trajectory[1][1] - first[1]];
    let v1 = [last[0] - trajectory[n - 2][0], last[1] - trajectory[n - 2][1]];
    let cross = v0[0] * v1[1] - v0[1] * v1[0];
    let dot = v0[0] * v1[0] + v0[1] * v1[1];
    let dtheta = cross.atan2(dot).to_degrees();
    Ok(if dtheta >= TURN_THRESHOLD_DEG {
        Action::Left
    } else if dtheta <= -TURN_THRESHOLD_DEG {
        Action::Right
    } else {
        Action::Straight
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    /// Future waypoints at `dt, 2dt, …, T·dt`.
    pub trajectory: Vec<Point>,
    pub behavior: Behavior,
    pub speed: f64,
    pub point_count: u32,
    /// Turn indicator shown to the sensor: -1 right, 0 none, +1 left.
    pub signal: i8,
}

/// Dense per-cell raster, row-major over `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRaster {
    pub cells_x: usize,
    pub cells_y: usize,
    pub cell_size: f64,
    pub channels: usize,
    #[serde(with = "crate::persist::f32_base64")]
    pub data: Vec<f32>,
}

impl FeatureRaster {
    pub fn zeros(cells_x: usize, cells_y: usize, cell_size: f64, channels: usize) -> Self {
        Self {
            cells_x,
            cells_y,
            cell_size,
            channels,
            data: vec![0.0; cells_x * cells_y * channels],
        }
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, c: usize) -> usize {
        (iy * self.cells_x + ix) * self.channels + c
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, c: usize) -> f32 {
        self.data[self.index(ix, iy, c)]
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[f32] {
        let i = self.index(ix, iy, 0);
        &self.data[i..i + self.channels]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point {
        [(ix as f64 + 0.5) * self.cell_size, (iy as f64 + 0.5) * self.cell_size]
    }

    /// Sum of one channel over the raster.
    pub fn channel_sum(&self, c: usize) -> f64 {
        self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).sum()
    }
}

/// Scene-level latent conditions shared by all actors of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConditions {
    /// Orientation of the road grid, radians.
    pub road_heading: f64,
    /// Multiplier on the expected point rate.
    pub sensor_gain: f64,
    /// Multiplier on the clutter noise level.
    pub clutter_scale: f64,
    pub intersections: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub extent: [f64; 2],
    pub sdv_position: Point,
    pub conditions: SceneConditions,
    pub actors: Vec<Actor>,
    pub features: FeatureRaster,
    pub map: FeatureRaster,
}

impl Scene {
    pub fn actor(&self, id: u32) -> Option<&Actor> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn num_anchors(&self) -> usize {
        self.features.cells_x * self.features.cells_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMix {
    pub parked: f64,
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub u_turn: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self {
            parked: 0.40,
            straight: 0.36,
            left_turn: 0.10,
            right_turn: 0.10,
            u_turn: 0.04,
        }
    }
}

impl BehaviorMix {
    pub fn proportion(&self, b: Behavior) -> f64 {
        match b {
            Behavior::Parked => self.parked,
            Behavior::Straight => self.straight,
            Behavior::LeftTurn => self.left_turn,
            Behavior::RightTurn => self.right_turn,
            Behavior::UTurn => self.u_turn,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Behavior {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for b in Behavior::ALL {
            acc += self.proportion(b);
            if u < acc {
                return b;
            }
        }
        Behavior::UTurn
    }
}

/// Expected sensor returns for an actor at distance `d` from the SDV:
/// `peak · exp(-d / decay_m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRate {
    pub peak: f64,
    pub decay_m: f64,
}

impl Default for PointRate {
    fn default() -> Self {
        Self {
            peak: 120.0,
            decay_m: 30.0,
        }
    }
}

impl PointRate {
    pub fn rate(&self, distance: f64) -> f64 {
        self.peak * (-distance / self.decay_m).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub schema_version: u32,
    pub n_scenes: usize,
    /// Id of the first generated scene; keeps training and evaluation pools disjoint.
    pub first_scene_id: u64,
    pub extent: [f64; 2],
    pub cell_size: f64,
    pub actors_min: usize,
    pub actors_max: usize,
    pub behavior_mix: BehaviorMix,
    pub clutter_sigma: f64,
    pub point_rate: PointRate,
    /// Velocity noise at one return, m/s; shrinks as `1/sqrt(points + 1)`.
    pub velocity_noise: f64,
    /// Probability that a turning actor shows its indicator.
    pub signal_rate: f64,
    /// Probability that a straight actor shows a spurious indicator.
    pub false_signal_rate: f64,
    /// Annotation noise on future waypoints, meters. Parked actors get
    /// bounded jitter of at most `PARKED_JITTER` instead.
    pub waypoint_noise: f64,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            schema_version: crate::persist::SCHEMA_VERSION,
            n_scenes: 2000,
            first_scene_id: 0,
            extent: [100.0, 100.0],
            cell_size: 2.5,
            actors_min: 8,
            actors_max: 32,
            behavior_mix: BehaviorMix::default(),
            clutter_sigma: 0.05,
            point_rate: PointRate::default(),
            velocity_noise: 2.0,
            signal_rate: 0.5,
            false_signal_rate: 0.05,
            waypoint_noise: 0.1,
            horizon: 10,
            dt: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != crate::persist::SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {}, found {}", crate::persist::SCHEMA_VERSION, self.schema_version),
            ));
        }
        let mix = &self.behavior_mix;
        let parts = [
            ("behavior_mix.parked", mix.parked),
            ("behavior_mix.straight", mix.straight),
            ("behavior_mix.left_turn", mix.left_turn),
            ("behavior_mix.right_turn", mix.right_turn),
            ("behavior_mix.u_turn", mix.u_turn),
        ];
        for (field, p) in parts {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("proportion {p} outside [0, 1]")));
            }
        }
        let total: f64 = parts.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("behavior_mix", format!("proportions sum to {total}, expected 1")));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon", "T must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "timestep must be positive"));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::config("cell_size", "must be positive"));
        }
        for (i, e) in self.extent.iter().enumerate() {
            if !(*e > 0.0) {
                return Err(Error::config("extent", "must be positive"));
            }
            let cells = e / self.cell_size;
            if (cells - cells.round()).abs() > 1e-9 {
                return Err(Error::config(
                    "cell_size",
                    format!("extent[{i}] = {e} is not a multiple of the cell size"),
                ));
            }
        }
        if self.actors_min > self.actors_max {
            return Err(Error::config("actors_min", "exceeds actors_max"));
        }
        if self.clutter_sigma < 0.0 {
            return Err(Error::config("clutter_sigma", "must be nonnegative"));
        }
        if !(self.point_rate.peak >= 0.0) || !(self.point_rate.decay_m > 0.0) {
            return Err(Error::config("point_rate", "peak must be >= 0 and decay_m > 0"));
        }
        if self.velocity_noise < 0.0 {
            return Err(Error::config("velocity_noise", "must be nonnegative"));
        }
        if self.waypoint_noise < 0.0 {
            return Err(Error::config("waypoint_noise", "must be nonnegative"));
        }
        for (field, p) in [("signal_rate", self.signal_rate), ("false_signal_rate", self.false_signal_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "probability outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> (usize, usize) {
        (
            (self.extent[0] / self.cell_size).round() as usize,
            (self.extent[1] / self.cell_size).round() as usize,
        )
    }
}

/// Generates `cfg.n_scenes` scenes with ids `first_scene_id..`.
pub fn generate_pool(cfg: &GenConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..cfg.n_scenes as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, cfg.first_scene_id + i))
        .collect())
}

/// Generates a single scene; identical to the corresponding element of
/// [`generate_pool`].
pub fn generate_scene(cfg: &GenConfig, scene_id: u64) -> Scene {
    let mut rng = stream(cfg.seed, Domain::SceneActors, scene_id);
    let [w, h] = cfg.extent;
    let sdv = [0.5 * w, 0.5 * h];
    let n_intersections = rng.gen_range(1..=3);
    let conditions = SceneConditions {
        road_heading: rng.gen_range(0.0..FRAC_PI_2),
        sensor_gain: rng.gen_range(0.6..1.4),
        clutter_scale: rng.gen_range(0.5..1.5),
        intersections: (0..n_intersections)
            .map(|_| [rng.gen_range(0.0..w), rng.gen_range(0.0..h)])
            .collect(),
    };
    let speed_regime: f64 = rng.gen_range(4.0..12.0);
    let n_actors = rng.gen_range(cfg.actors_min..=cfg.actors_max);

    let mut actors: Vec<Actor> = Vec::with_capacity(n_actors);
    for id in 0..n_actors as u32 {
        let behavior = cfg.behavior_mix.sample(&mut rng);
        let actor = place_actor(cfg, &conditions, speed_regime, sdv, id, behavior, &actors, &mut rng);
        actors.push(actor);
    }

    let (cx, cy) = cfg.cells();
    let mut scene = Scene {
        id: scene_id,
        extent: cfg.extent,
        sdv_position: sdv,
        conditions,
        actors,
        features: FeatureRaster::zeros(cx, cy, cfg.cell_size, channel::COUNT),
        map: FeatureRaster::zeros(cx, cy, cfg.cell_size, map_channel::COUNT),
    };
    let mut feature_rng = stream(cfg.seed, Domain::SceneFeatures, scene_id);
    scene.features = synthesize_features(&scene, cfg, &mut feature_rng);
    scene.map = render_map(&scene);
    scene
}

/// Kinematics of a single actor: straight at constant speed, optionally with
/// a constant-rate turn of `turn_angle` radians over `[turn_start, turn_start + turn_duration]`.
#[derive(Debug, Clone, Copy)]
struct Motion {
    origin: Point,
    heading: f64,
    speed: f64,
    turn_start: f64,
    turn_duration: f64,
    turn_angle: f64,
}

impl Motion {
    fn position(&self, t: f64) -> Point {
        let v = self.speed;
        let (s0, c0) = self.heading.sin_cos();
        if self.turn_angle == 0.0 || t <= self.turn_start {
            return [self.origin[0] + v * t * c0, self.origin[1] + v * t * s0];
        }
        let p0 = [
            self.origin[0] + v * self.turn_start * c0,
            self.origin[1] + v * self.turn_start * s0,
        ];
        let omega = self.turn_angle / self.turn_duration;
        let tau = (t - self.turn_start).min(self.turn_duration);
        let h1 = self.heading + omega * tau;
        // arc: integral of v·(cos h, sin h) dt with h linear in time
        let arc = [
            v / omega * (h1.sin() - self.heading.sin()),
            -v / omega * (h1.cos() - self.heading.cos()),
        ];
        let p1 = [p0[0] + arc[0], p0[1] + arc[1]];
        let rest = (t - self.turn_start - self.turn_duration).max(0.0);
        let (s1, c1) = h1.sin_cos();
        [p1[0] + v * rest * c1, p1[1] + v * rest * s1]
    }
}

#[allow(clippy::too_many_arguments)]
fn place_actor(
    cfg: &GenConfig,
    conditions: &SceneConditions,
    speed_regime: f64,
    sdv: Point,
    id: u32,
    behavior: Behavior,
    placed: &[Actor],
    rng: &mut ChaCha8Rng,
) -> Actor {
    let [w, h] = cfg.extent;
    let length = rng.gen_range(3.8..5.4);
    let width = rng.gen_range(1.7..2.2);
    let heading_noise = Normal::new(0.0, 0.04).unwrap();

    let mut candidate = None;
    for _attempt in 0..50 {
        let dir = conditions.road_heading + FRAC_PI_2 * rng.gen_range(0..4) as f64;
        let motion = match behavior {
            Behavior::Parked => Motion {
                origin: [rng.gen_range(1.0..w - 1.0), rng.gen_range(1.0..h - 1.0)],
                heading: dir + heading_noise.sample(rng),
                speed: 0.0,
                turn_start: 0.0,
                turn_duration: 1.0,
                turn_angle: 0.0,
            },
            _ => {
                let speed = speed_regime * rng.gen_range(0.75..1.25);
                let approach = behavior != Behavior::Straight || rng.gen_bool(0.5);
                let (turn_angle, turn_duration) = match behavior {
                    Behavior::LeftTurn => (FRAC_PI_2, 1.5),
                    Behavior::RightTurn => (-FRAC_PI_2, 1.5),
                    Behavior::UTurn => (rng.gen_range(160.0f64..175.0).to_radians(), 2.0),
                    _ => (0.0, 1.5),
                };
                let turn_start = rng.gen_range(0.5..2.5);
                let origin = if approach {
                    let ic = conditions.intersections[rng.gen_range(0..conditions.intersections.len())];
                    let lane = rng.gen_range(1.0..3.5);
                    let (s, c) = dir.sin_cos();
                    let back = speed * turn_start;
                    // keep right: lane offset to the right of the travel direction
                    [ic[0] - back * c + lane * s, ic[1] - back * s - lane * c]
                } else {
                    [rng.gen_range(1.0..w - 1.0), rng.gen_range(1.0..h - 1.0)]
                };
                Motion {
                    origin,
                    heading: dir,
                    speed,
                    turn_start,
                    turn_duration,
                    turn_angle,
                }
            }
        };
        let bbox = OrientedBox::new(motion.origin[0], motion.origin[1], length, width, motion.heading);
        let inside = motion.origin[0] >= 0.0
            && motion.origin[0] <= w
            && motion.origin[1] >= 0.0
            && motion.origin[1] <= h;
        if !inside {
            continue;
        }
        let overlaps = placed.iter().any(|a| iou(&a.bbox, &bbox) > 0.0);
        candidate = Some((motion, bbox));
        if !overlaps {
            break;
        }
    }
    // fall back to a parked-style placement anywhere in the scene
    let (motion, bbox) = candidate.unwrap_or_else(|| {
        let origin = [rng.gen_range(1.0..w - 1.0), rng.gen_range(1.0..h - 1.0)];
        let m = Motion {
            origin,
            heading: conditions.road_heading,
            speed: if behavior == Behavior::Parked { 0.0 } else { speed_regime },
            turn_start: 1.0,
            turn_duration: 1.5,
            turn_angle: 0.0,
        };
        (m, OrientedBox::new(origin[0], origin[1], length, width, m.heading))
    });

    let trajectory = (1..=cfg.horizon)
        .map(|k| {
            let p = motion.position(k as f64 * cfg.dt);
            if behavior == Behavior::Parked && cfg.waypoint_noise > 0.0 {
                // uniform in a small disc so a parked actor never drifts
                let r = PARKED_JITTER.min(cfg.waypoint_noise) * rng.gen::<f64>().sqrt();
                let t = rng.gen::<f64>() * std::f64::consts::TAU;
                [p[0] + r * t.cos(), p[1] + r * t.sin()]
            } else if cfg.waypoint_noise > 0.0 {
                let n = Normal::new(0.0, cfg.waypoint_noise).unwrap();
                [p[0] + n.sample(rng), p[1] + n.sample(rng)]
            } else {
                p
            }
        })
        .collect();

    let distance = (bbox.cx - sdv[0]).hypot(bbox.cy - sdv[1]);
    let rate = cfg.point_rate.rate(distance) * conditions.sensor_gain;
    let point_count = if rate > 0.0 {
        Poisson::new(rate).unwrap().sample(rng) as u32
    } else {
        0
    };
    let signal = match behavior {
        Behavior::LeftTurn | Behavior::UTurn if rng.gen_bool(cfg.signal_rate) => 1,
        Behavior::RightTurn if rng.gen_bool(cfg.signal_rate) => -1,
        Behavior::Straight if rng.gen_bool(cfg.false_signal_rate) => {
            if rng.gen_bool(0.5) {
                1
            } else {
                -1
            }
        }
        _ => 0,
    };

    Actor {
        id,
        bbox,
        trajectory,
        behavior,
        speed: motion.speed,
        point_count,
        signal,
    }
}

/// Renders sensor evidence for a scene with finalized actors.
///
/// Each visible actor spreads `point_count / 40` units of occupancy over the
/// cells it covers (Gaussian falloff of 0.5 m outside the box). Velocity,
/// heading, indicator and center-vote channels hold coverage-weighted averages of noisy
/// per-actor readings whose noise shrinks with the number of returns; cells
/// covered by less than `MIN_COVERAGE` are attenuated proportionally. Clutter
/// noise hits every channel of empty cells and the occupancy of covered ones.
pub fn synthesize_features(scene: &Scene, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> FeatureRaster {
    let (cells_x, cells_y) = cfg.cells();
    let cs = cfg.cell_size;
    let mut raster = FeatureRaster::zeros(cells_x, cells_y, cs, channel::COUNT);
    let mut coverage = vec![0.0f64; cells_x * cells_y];
    let mut sums = vec![0.0f64; cells_x * cells_y * channel::COUNT];
    let unit = Normal::new(0.0, 1.0).unwrap();
    const SUB: usize = 4;

    for actor in &scene.actors {
        if actor.point_count == 0 {
            continue;
        }
        let n = actor.point_count as f64;
        let reliability = 1.0 / (n + 1.0).sqrt();
        let b = &actor.bbox;
        let (s, c) = b.heading.sin_cos();
        let vx = actor.speed * c + cfg.velocity_noise * reliability * unit.sample(rng);
        let vy = actor.speed * s + cfg.velocity_noise * reliability * unit.sample(rng);
        let h = b.heading + reliability * unit.sample(rng);
        let (hs, hc) = h.sin_cos();
        let occupancy = n / POINTS_PER_UNIT;
        let vote = [
            b.cx + CENTER_NOISE_M * reliability * unit.sample(rng),
            b.cy + CENTER_NOISE_M * reliability * unit.sample(rng),
        ];

        let bb = b.aabb();
        let pad = 3.0 * FALLOFF_M;
        let ix0 = ((bb.x0 - pad) / cs).floor().max(0.0) as usize;
        let iy0 = ((bb.y0 - pad) / cs).floor().max(0.0) as usize;
        let ix1 = (((bb.x1 + pad) / cs).ceil() as isize).clamp(0, cells_x as isize) as usize;
        let iy1 = (((bb.y1 + pad) / cs).ceil() as isize).clamp(0, cells_y as isize) as usize;
        for iy in iy0..iy1 {
            for ix in ix0..ix1 {
                let mut weight = 0.0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let p = [
                            (ix as f64 + (sx as f64 + 0.5) / SUB as f64) * cs,
                            (iy as f64 + (sy as f64 + 0.5) / SUB as f64) * cs,
                        ];
                        let d = b.distance_to(p);
                        weight += (-d * d / (2.0 * FALLOFF_M * FALLOFF_M)).exp();
                    }
                }
                weight /= (SUB * SUB) as f64;
                if weight < 1e-4 {
                    continue;
                }
                let base = raster.index(ix, iy, 0);
                coverage[iy * cells_x + ix] += weight;
                let cell = &mut sums[base..base + channel::COUNT];
                cell[channel::OCCUPANCY] += occupancy * weight;
                cell[channel::VEL_X] += weight * vx / VELOCITY_SCALE;
                cell[channel::VEL_Y] += weight * vy / VELOCITY_SCALE;
                cell[channel::HEADING_COS] += weight * hc;
                cell[channel::HEADING_SIN] += weight * hs;
                cell[channel::TURN_SIGNAL] += weight * actor.signal as f64;
                let center = raster.cell_center(ix, iy);
                cell[channel::CENTER_X] += weight * (vote[0] - center[0]) / cs;
                cell[channel::CENTER_Y] += weight * (vote[1] - center[1]) / cs;
            }
        }
    }
    for (i, &w) in coverage.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let norm = w.max(MIN_COVERAGE);
        let base = i * channel::COUNT;
        raster.data[base + channel::OCCUPANCY] = sums[base + channel::OCCUPANCY] as f32;
        for c in channel::VEL_X..channel::COUNT {
            raster.data[base + c] = (sums[base + c] / norm) as f32;
        }
    }

    // clutter: spurious readings in empty cells, occupancy jitter elsewhere
    let sigma = cfg.clutter_sigma * scene.conditions.clutter_scale;
    if sigma > 0.0 {
        for (i, &w) in coverage.iter().enumerate() {
            let base = i * channel::COUNT;
            for c in 0..channel::COUNT {
                let noise = (sigma * unit.sample(rng)) as f32;
                if w <= 0.0 || c == channel::OCCUPANCY {
                    raster.data[base + c] += noise;
                }
            }
        }
    }
    raster
}

/// Static map raster: proximity to and offset toward the nearest intersection.
pub fn render_map(scene: &Scene) -> FeatureRaster {
    let f = &scene.features;
    let mut raster = FeatureRaster::zeros(f.cells_x, f.cells_y, f.cell_size, map_channel::COUNT);
    if scene.conditions.intersections.is_empty() {
        return raster;
    }
    for iy in 0..f.cells_y {
        for ix in 0..f.cells_x {
            let c = raster.cell_center(ix, iy);
            let nearest = scene
                .conditions
                .intersections
                .iter()
                .map(|p| (p, (p[0] - c[0]).hypot(p[1] - c[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let (p, d) = nearest;
            let base = raster.index(ix, iy, 0);
            raster.data[base + map_channel::PROXIMITY] = (-d / 15.0).exp() as f32;
            raster.data[base + map_channel::TO_INTERSECTION_X] = ((p[0] - c[0]) / 30.0).clamp(-1.0, 1.0) as f32;
            raster.data[base + map_channel::TO_INTERSECTION_Y] = ((p[1] - c[1]) / 30.0).clamp(-1.0, 1.0) as f32;
        }
    }
    raster
}

/// Total displacement of a trajectory, first to last waypoint.
pub fn displacement(trajectory: &[Point]) -> f64 {
    match (trajectory.first(), trajectory.last()) {
        (Some(a), Some(b)) => (b[0] - a[0]).hypot(b[1] - a[1]),
        _ => 0.0,
    }
}

/// Heading wrapped into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}
