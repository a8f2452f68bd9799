//! Budgeted selection: cost-aware greedy region selection with a per-scene
//! sparsity floor, plus random-scene and random-region baselines.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{label_region, CostModel, Grid, PoolState, Region};
use crate::scenegen::Scene;
use crate::scoring::SceneScores;

/// Cuts `extent` into an `h × w` grid of regions for `scene_id`, row-major.
pub fn make_regions(scene_id: u64, extent: [f64; 2], h: usize, w: usize) -> Result<Vec<Region>> {
    Ok(Grid::new(extent, h, w)?.regions(scene_id))
}

/// One oracle call as recorded in a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub iteration: usize,
    pub scene_id: u64,
    pub h: usize,
    pub w: usize,
    pub score: f64,
    pub est_cost: u64,
    pub cost: u64,
    /// Pool spend after this query.
    pub cumulative: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub queries: Vec<Query>,
    /// Spend of this plan alone.
    pub spent: u64,
    /// Actors newly labeled per scene.
    pub new_actors: BTreeMap<u64, u64>,
    /// The pool ran out of unlabeled regions before the budget was met.
    pub exhausted: bool,
    /// Scene whose query loop was cut short by the budget.
    pub truncated_scene: Option<u64>,
}

impl QueryPlan {
    pub fn scene_ids(&self) -> BTreeSet<u64> {
        self.queries.iter().map(|q| q.scene_id).collect()
    }

    fn record(&mut self, iteration: usize, pool: &PoolState, region: &Region, score: f64, est_cost: u64, cost: u64) {
        self.spent += cost;
        *self.new_actors.entry(region.scene_id).or_default() += cost;
        self.queries.push(Query {
            iteration,
            scene_id: region.scene_id,
            h: region.h,
            w: region.w,
            score,
            est_cost,
            cost,
            cumulative: pool.spent,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Stop once spend reaches the budget; the last region may overshoot.
    Default,
    /// Never exceed the budget; regions that would are skipped.
    Strict,
}

/// How a scene's priority is derived from its unlabeled region values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneRank {
    Max,
    Sum,
}

/// Greedy selection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    pub budget: u64,
    /// Minimum new actors per selected scene (M).
    pub min_actors: usize,
    pub mode: BudgetMode,
    pub scene_rank: SceneRank,
    pub cost: CostModel,
}

fn index_scenes(scenes: &[Scene]) -> BTreeMap<u64, &Scene> {
    scenes.iter().map(|s| (s.id, s)).collect()
}

/// Unlabeled actors of a scene.
fn available_actors(pool: &PoolState, scene: &Scene) -> usize {
    let st = pool.state(scene.id);
    scene
        .actors
        .iter()
        .filter(|a| !st.labeled_actor_ids.contains(&a.id))
        .count()
}

/// Unlabeled regions of a scene by descending value, then score, then
/// row-major position.
fn ranked_regions(pool: &PoolState, scores: &SceneScores) -> Vec<usize> {
    let st = pool.state(scores.scene_id);
    let mut idx: Vec<usize> = (0..scores.regions.len())
        .filter(|&i| {
            let r = &scores.regions[i];
            !st.is_labeled(r.h, r.w)
        })
        .collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&scores.regions[a], &scores.regions[b]);
        rb.value
            .total_cmp(&ra.value)
            .then(rb.score.total_cmp(&ra.score))
            .then(a.cmp(&b))
    });
    idx
}

/// Cost-aware greedy selection.
///
/// Scenes are visited by their best unlabeled region value (ties: score,
/// then smaller scene id). Within a scene, regions are queried by value
/// until at least `min(M, unlabeled actors)` new actors are labeled, and at
/// least one region per visit. A scene is visited once per call when
/// `M > 0`; with `M = 0` it stays eligible, which turns the loop into a
/// global ranking of regions.
///
/// In default mode the budget is checked before each query. In strict mode a
/// region whose cost would exceed the budget is skipped, and a scene that
/// cannot reach its floor within the budget is rolled back.
pub fn greedy_select(
    pool: &mut PoolState,
    scenes: &[Scene],
    scores: &[SceneScores],
    cfg: &GreedyConfig,
    iteration: usize,
) -> Result<QueryPlan> {
    let by_id = index_scenes(scenes);
    let grid = pool.grid;
    for s in scores {
        if !by_id.contains_key(&s.scene_id) || !pool.states.contains_key(&s.scene_id) {
            return Err(Error::InvalidInput(format!("scores for unknown scene {}", s.scene_id)));
        }
        if s.regions.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "scene {} has {} region scores, grid has {}",
                s.scene_id,
                s.regions.len(),
                grid.len()
            )));
        }
    }
    let mut plan = QueryPlan::default();
    let start = pool.spent;
    let mut done: BTreeSet<u64> = BTreeSet::new();
    let scene_key = |s: &SceneScores, ranked: &[usize]| -> Option<(f64, f64)> {
        let &top = ranked.first()?;
        Some(match cfg.scene_rank {
            SceneRank::Max => (s.regions[top].value, s.regions[top].score),
            SceneRank::Sum => ranked.iter().fold((0.0, 0.0), |(v, sc), &i| {
                (v + s.regions[i].value, sc + s.regions[i].score)
            }),
        })
    };
    // ranked unlabeled regions and priority per scene, refreshed after each visit
    let mut cache: Vec<(Vec<usize>, Option<(f64, f64)>)> = scores
        .iter()
        .map(|s| {
            let ranked = ranked_regions(pool, s);
            let key = scene_key(s, &ranked);
            (ranked, key)
        })
        .collect();

    loop {
        let spent = pool.spent - start;
        if spent >= cfg.budget {
            break;
        }
        let mut best: Option<(usize, (f64, f64))> = None;
        for (j, s) in scores.iter().enumerate() {
            let Some(key) = cache[j].1 else { continue };
            if done.contains(&s.scene_id) {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, kb)) => key
                    .0
                    .total_cmp(&kb.0)
                    .then(key.1.total_cmp(&kb.1))
                    .then(scores[b].scene_id.cmp(&s.scene_id))
                    .is_gt(),
            };
            if better {
                best = Some((j, key));
            }
        }
        let Some((j, _)) = best else {
            plan.exhausted = true;
            break;
        };
        let s = &scores[j];
        let ranked = std::mem::take(&mut cache[j].0);
        let scene = by_id[&s.scene_id];
        let floor = cfg.min_actors.min(available_actors(pool, scene)) as u64;
        if cfg.min_actors > 0 {
            done.insert(s.scene_id);
        }

        match cfg.mode {
            BudgetMode::Default => {
                let mut new = 0u64;
                let mut queried = 0usize;
                for &i in &ranked {
                    if queried > 0 && new >= floor {
                        break;
                    }
                    if pool.spent - start >= cfg.budget {
                        plan.truncated_scene = Some(s.scene_id);
                        break;
                    }
                    let r = &s.regions[i];
                    let region = grid.region(s.scene_id, r.h, r.w);
                    let c = pool.query(scene, &region, &cfg.cost)?;
                    new += c;
                    queried += 1;
                    plan.record(iteration, pool, &region, r.score, r.est_cost, c);
                }
            }
            BudgetMode::Strict => {
                let snapshot = pool.states[&s.scene_id].clone();
                let spent_before = pool.spent;
                let n_before = plan.queries.len();
                let mut new = 0u64;
                let mut queried = 0usize;
                for &i in &ranked {
                    if queried > 0 && new >= floor {
                        break;
                    }
                    let r = &s.regions[i];
                    let region = grid.region(s.scene_id, r.h, r.w);
                    let labels = label_region(scene, &region)?;
                    let c = cfg.cost.cost(&labels, pool.state(s.scene_id));
                    if pool.spent - start + c > cfg.budget {
                        continue;
                    }
                    pool.query(scene, &region, &cfg.cost)?;
                    new += c;
                    queried += 1;
                    plan.record(iteration, pool, &region, r.score, r.est_cost, c);
                }
                if queried == 0 || new < floor {
                    // roll back a scene that cannot meet its floor
                    pool.states.insert(s.scene_id, snapshot);
                    pool.spent = spent_before;
                    for q in plan.queries.drain(n_before..) {
                        plan.spent -= q.cost;
                        *plan.new_actors.get_mut(&q.scene_id).unwrap() -= q.cost;
                    }
                    if plan.new_actors.get(&s.scene_id) == Some(&0) {
                        plan.new_actors.remove(&s.scene_id);
                    }
                    done.insert(s.scene_id);
                }
            }
        }
        let ranked = ranked_regions(pool, s);
        let key = scene_key(s, &ranked);
        cache[j] = (ranked, key);
        if plan.truncated_scene.is_some() {
            break;
        }
    }
    Ok(plan)
}

/// Queries every region of each listed scene, in order, checking the budget
/// before each scene. Scenes already fully labeled are skipped.
pub fn query_whole_scenes(
    pool: &mut PoolState,
    scenes: &[Scene],
    order: &[u64],
    budget: u64,
    cost: &CostModel,
    iteration: usize,
) -> Result<QueryPlan> {
    let by_id = index_scenes(scenes);
    let mut plan = QueryPlan::default();
    let start = pool.spent;
    let grid = pool.grid;
    for id in order {
        if pool.spent - start >= budget {
            return Ok(plan);
        }
        let scene = by_id
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scene {id}")))?;
        for region in grid.regions(*id) {
            if pool.state(*id).is_labeled(region.h, region.w) {
                continue;
            }
            let c = pool.query(scene, &region, cost)?;
            plan.record(iteration, pool, &region, 0.0, 0, c);
        }
    }
    plan.exhausted = pool.spent - start < budget;
    Ok(plan)
}

/// Uniformly random untouched scenes, each labeled in full.
pub fn random_scenes<R: Rng>(
    pool: &mut PoolState,
    scenes: &[Scene],
    budget: u64,
    cost: &CostModel,
    rng: &mut R,
    iteration: usize,
) -> Result<QueryPlan> {
    let mut ids: Vec<u64> = pool
        .states
        .values()
        .filter(|s| !s.any_labeled())
        .map(|s| s.scene_id)
        .collect();
    ids.shuffle(rng);
    query_whole_scenes(pool, scenes, &ids, budget, cost, iteration)
}

/// Number of regions sampled per scene at density `r`.
pub fn regions_per_scene(density: f64, grid: &Grid) -> usize {
    ((density * grid.len() as f64).ceil() as usize).clamp(1, grid.len())
}

/// Uniformly random untouched scenes, each with `⌈r · H · W⌉` regions drawn
/// without replacement.
pub fn random_regions<R: Rng>(
    pool: &mut PoolState,
    scenes: &[Scene],
    budget: u64,
    density: f64,
    cost: &CostModel,
    rng: &mut R,
    iteration: usize,
) -> Result<QueryPlan> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::config("density", "must lie in (0, 1]"));
    }
    let by_id = index_scenes(scenes);
    let grid = pool.grid;
    let per_scene = regions_per_scene(density, &grid);
    let mut ids: Vec<u64> = pool
        .states
        .values()
        .filter(|s| !s.any_labeled())
        .map(|s| s.scene_id)
        .collect();
    ids.shuffle(rng);
    let mut plan = QueryPlan::default();
    let start = pool.spent;
    for id in ids {
        if pool.spent - start >= budget {
            return Ok(plan);
        }
        let scene = by_id
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown scene {id}")))?;
        let mut cells: Vec<usize> = rand::seq::index::sample(rng, grid.len(), per_scene).into_vec();
        cells.sort_unstable();
        for i in cells {
            let (h, w) = grid.cell_of_index(i);
            let region = grid.region(id, h, w);
            let c = pool.query(scene, &region, cost)?;
            plan.record(iteration, pool, &region, 0.0, 0, c);
        }
    }
    plan.exhausted = pool.spent - start < budget;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox;
    use crate::rng::{stream, Domain};
    use crate::scenegen::{generate_pool, Actor, Behavior, FeatureRaster, GenConfig, SceneConditions};
    use crate::scoring::RegionScore;

    pub(crate) fn toy_scene(id: u64, centers: &[[f64; 2]]) -> Scene {
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

    fn one_region_scores(id: u64, score: f64, est: u64) -> SceneScores {
        SceneScores {
            scene_id: id,
            regions: vec![RegionScore {
                h: 1,
                w: 1,
                score,
                est_cost: est,
                value: crate::scoring::region_value(score, est),
            }],
            embedding: vec![],
        }
    }

    #[test]
    fn make_regions_tiles_the_extent() {
        let rs = make_regions(4, [100.0, 60.0], 3, 7).unwrap();
        assert_eq!(rs.len(), 21);
        let area: f64 = rs.iter().map(|r| r.rect.area()).sum();
        assert!((area - 6000.0).abs() < 1e-9);
        assert!(make_regions(4, [100.0, 60.0], 0, 7).is_err());
    }

    #[test]
    fn greedy_two_scene_example() {
        let a = toy_scene(0, &[[10.0, 10.0], [80.0, 80.0]]);
        let b = toy_scene(1, &[[50.0, 50.0]]);
        let scenes = vec![a, b];
        let grid = Grid::new([100.0, 100.0], 1, 1).unwrap();
        let mut pool = PoolState::new(&scenes, grid);
        let scores = vec![one_region_scores(0, 4.0, 2), one_region_scores(1, 3.0, 1)];
        let cfg = GreedyConfig {
            budget: 3,
            min_actors: 0,
            mode: BudgetMode::Default,
            scene_rank: SceneRank::Max,
            cost: CostModel::default(),
        };
        let plan = greedy_select(&mut pool, &scenes, &scores, &cfg, 1).unwrap();
        // B has the higher value (3 > 2) and goes first
        let order: Vec<u64> = plan.queries.iter().map(|q| q.scene_id).collect();
        assert_eq!(order, vec![1, 0]);
        assert_eq!(plan.spent, 3);
    }

    #[test]
    fn small_scene_is_fully_queried_under_floor() {
        let s = toy_scene(0, &[[12.0, 12.0], [87.0, 87.0]]);
        let scenes = vec![s];
        let grid = Grid::new([100.0, 100.0], 4, 4).unwrap();
        let mut pool = PoolState::new(&scenes, grid);
        let mut regions = Vec::new();
        for i in 0..16 {
            let (h, w) = grid.cell_of_index(i);
            regions.push(RegionScore {
                h,
                w,
                score: 0.0,
                est_cost: 0,
                value: 0.0,
            });
        }
        let scores = vec![SceneScores {
            scene_id: 0,
            regions,
            embedding: vec![],
        }];
        let cfg = GreedyConfig {
            budget: 100,
            min_actors: 5,
            mode: BudgetMode::Default,
            scene_rank: SceneRank::Max,
            cost: CostModel::default(),
        };
        let plan = greedy_select(&mut pool, &scenes, &scores, &cfg, 1).unwrap();
        assert_eq!(pool.state(0).labeled_actor_ids.len(), 2);
        assert_eq!(plan.spent, 2);
        assert_eq!(plan.new_actors[&0], 2);
    }

    #[test]
    fn random_scenes_edges() {
        let cfg = GenConfig {
            n_scenes: 20,
            ..GenConfig::default()
        };
        let scenes = generate_pool(&cfg).unwrap();
        let grid = Grid::new(cfg.extent, 10, 10).unwrap();
        let mut pool = PoolState::new(&scenes, grid);
        let mut rng = stream(1, Domain::Selection, 0);
        let plan = random_scenes(&mut pool, &scenes, 1, &CostModel::default(), &mut rng, 1).unwrap();
        assert_eq!(plan.scene_ids().len(), 1);
        assert!(!plan.exhausted);

        let mut empty = PoolState::new(&[], grid);
        let plan = random_scenes(&mut empty, &[], 10, &CostModel::default(), &mut rng, 1).unwrap();
        assert!(plan.exhausted && plan.queries.is_empty());
    }

    #[test]
    fn random_regions_density() {
        let cfg = GenConfig {
            n_scenes: 5,
            ..GenConfig::default()
        };
        let scenes = generate_pool(&cfg).unwrap();
        let grid = Grid::new(cfg.extent, 20, 20).unwrap();
        assert_eq!(regions_per_scene(0.25, &grid), 100);
        let mut pool = PoolState::new(&scenes, grid);
        let mut rng = stream(2, Domain::Selection, 0);
        let plan = random_regions(&mut pool, &scenes, 1, 0.25, &CostModel::default(), &mut rng, 1).unwrap();
        assert_eq!(plan.queries.len(), 100);
        assert!(random_regions(&mut pool, &scenes, 1, 0.0, &CostModel::default(), &mut rng, 1).is_err());
    }

    #[test]
    fn full_density_random_regions_matches_random_scenes() {
        let cfg = GenConfig {
            n_scenes: 30,
            ..GenConfig::default()
        };
        let scenes = generate_pool(&cfg).unwrap();
        let grid = Grid::new(cfg.extent, 5, 5).unwrap();
        let mut p1 = PoolState::new(&scenes, grid);
        let mut p2 = PoolState::new(&scenes, grid);
        let c = CostModel::default();
        let a = random_scenes(&mut p1, &scenes, 200, &c, &mut stream(3, Domain::Selection, 1), 1).unwrap();
        let b = random_regions(&mut p2, &scenes, 200, 1.0, &c, &mut stream(3, Domain::Selection, 1), 1).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(p1, p2);
    }
}
