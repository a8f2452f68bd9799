//! Region scoring: detection entropy, prediction entropy, a detection-count
//! cost proxy, and Core-Set k-center selection over scene embeddings.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{anchor_center, detect, predict_trajectories, sigmoid, DetectConfig, Detection, ModelParams};
use crate::oracle::{Grid, PoolState, SceneLabelState};
use crate::scenegen::Scene;

/// Acquisition criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    PredEntropy,
    DetEntropy,
    Coreset,
    Random,
}

impl Criterion {
    /// Whether the criterion needs per-region scores from a model.
    pub fn is_entropy(self) -> bool {
        matches!(self, Criterion::PredEntropy | Criterion::DetEntropy)
    }
}

/// Binary entropy in nats with `0 · ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Sum of per-anchor binary entropies.
pub fn detection_entropy(probs: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
        }
        s += binary_entropy(p);
    }
    Ok(s)
}

/// Shannon entropy of a categorical distribution, in nats.
pub fn prediction_entropy(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidInput("empty mixture".into()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("weights not on the simplex (sum {sum})")));
    }
    Ok(weights.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum())
}

/// Number of detections whose box center falls in cell `(h, w)`.
pub fn estimated_cost(detections: &[Detection], grid: &Grid, h: usize, w: usize) -> u64 {
    detections
        .iter()
        .filter(|d| grid.locate(d.bbox.center()) == (h, w))
        .count() as u64
}

/// Value of a region: score per unit of estimated cost, `S / max(Ĉ, 1)`.
pub fn region_value(score: f64, est_cost: u64) -> f64 {
    score / est_cost.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub h: usize,
    pub w: usize,
    pub score: f64,
    pub est_cost: u64,
    pub value: f64,
}

/// Per-region scores for one scene, row-major, plus its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub scene_id: u64,
    pub regions: Vec<RegionScore>,
    pub embedding: Vec<f64>,
}

impl SceneScores {
    pub fn get(&self, grid: &Grid, h: usize, w: usize) -> &RegionScore {
        &self.regions[grid.index(h, w)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub detect: DetectConfig,
    /// Divide scores by estimated cost. When false, `value == score`.
    pub cost_aware: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig::default(),
            cost_aware: true,
        }
    }
}

/// Scores every cell of `scene`. Labeled cells score zero.
pub fn score_regions(
    params: &ModelParams,
    scene: &Scene,
    grid: &Grid,
    state: &SceneLabelState,
    criterion: Criterion,
    cfg: &ScoreConfig,
) -> Result<SceneScores> {
    let (trunk, dets) = detect(params, scene, &cfg.detect)?;
    let mut raw = vec![0.0; grid.len()];
    let mut cost = vec![0u64; grid.len()];
    for d in &dets {
        cost[grid.locate_index(d.bbox.center())] += 1;
    }
    match criterion {
        Criterion::PredEntropy => {
            let preds = predict_trajectories(params, &trunk, &dets);
            for (d, p) in dets.iter().zip(&preds) {
                raw[grid.locate_index(d.bbox.center())] += prediction_entropy(&p.weights)?;
            }
        }
        Criterion::DetEntropy => {
            for (a, &z) in trunk.logits.iter().enumerate() {
                raw[grid.locate_index(anchor_center(scene, a))] += binary_entropy(sigmoid(z));
            }
        }
        Criterion::Coreset | Criterion::Random => {}
    }
    let regions = (0..grid.len())
        .map(|i| {
            let (h, w) = grid.cell_of_index(i);
            let score = if state.is_labeled(h, w) { 0.0 } else { raw[i] };
            let value = if cfg.cost_aware {
                region_value(score, cost[i])
            } else {
                score
            };
            RegionScore {
                h,
                w,
                score,
                est_cost: cost[i],
                value,
            }
        })
        .collect();
    Ok(SceneScores {
        scene_id: scene.id,
        regions,
        embedding: trunk.mean_hidden(),
    })
}

/// Scores every scene of the pool in parallel; output follows `scenes`.
pub fn score_pool(
    params: &ModelParams,
    scenes: &[Scene],
    pool: &PoolState,
    criterion: Criterion,
    cfg: &ScoreConfig,
) -> Result<Vec<SceneScores>> {
    scenes
        .par_iter()
        .map(|s| score_regions(params, s, &pool.grid, pool.state(s.id), criterion, cfg))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy k-center over scene embeddings. Picks the unlabeled scene farthest
/// from the current centers until the summed cost of picks reaches `budget`.
/// With no labeled scenes the first pick is the largest-norm scene. Ties
/// resolve to the smaller scene id.
pub fn coreset_select(
    points: &[(u64, Vec<f64>)],
    labeled: &BTreeSet<u64>,
    budget: u64,
    mut cost: impl FnMut(u64) -> u64,
) -> Vec<u64> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| points[i].0);
    let mut min_d: Vec<f64> = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut any_center = false;
    for &i in &order {
        if labeled.contains(&points[i].0) {
            taken[i] = true;
            any_center = true;
            for &j in &order {
                min_d[j] = min_d[j].min(sq_dist(&points[i].1, &points[j].1));
            }
        }
    }
    let mut picks = Vec::new();
    let mut spent = 0u64;
    while spent < budget {
        let mut best: Option<(usize, f64)> = None;
        for &j in &order {
            if taken[j] {
                continue;
            }
            let key = if any_center {
                min_d[j]
            } else {
                points[j].1.iter().map(|v| v * v).sum()
            };
            if best.map_or(true, |(_, kb)| key > kb) {
                best = Some((j, key));
            }
        }
        let Some((b, _)) = best else { break };
        if !any_center {
            log::info!("coreset: no labeled scenes, seeding from largest-norm scene {}", points[b].0);
        }
        taken[b] = true;
        any_center = true;
        picks.push(points[b].0);
        spent += cost(points[b].0);
        for &j in &order {
            min_d[j] = min_d[j].min(sq_dist(&points[b].1, &points[j].1));
        }
    }
    picks
}
