//! Region-level labeling oracle.
//!
//! A scene is divided into an `H × W` grid of non-overlapping cells. Querying
//! a cell returns every ground-truth actor whose box touches it, in full,
//! even if most of the box lies elsewhere. Cost is one unit per actor, billed
//! once per scene no matter how many queried cells the actor touches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_intersects_rect, Point, Rect};
use crate::scenegen::{Actor, Scene};

/// Uniform `rows × cols` partition of a scene extent. Cells are addressed
/// 1-based as `(h, w)`, `h` along y and `w` along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub extent: [f64; 2],
}

impl Grid {
    pub fn new(extent: [f64; 2], rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::config("grid.h", "H must be at least 1"));
        }
        if cols == 0 {
            return Err(Error::config("grid.w", "W must be at least 1"));
        }
        if !(extent[0] > 0.0 && extent[1] > 0.0) {
            return Err(Error::config("extent", "must be positive"));
        }
        Ok(Self { rows, cols, extent })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat index of 1-based cell `(h, w)`.
    pub fn index(&self, h: usize, w: usize) -> usize {
        (h - 1) * self.cols + (w - 1)
    }

    pub fn cell_of_index(&self, i: usize) -> (usize, usize) {
        (i / self.cols + 1, i % self.cols + 1)
    }

    pub fn rect(&self, h: usize, w: usize) -> Rect {
        let cw = self.extent[0] / self.cols as f64;
        let ch = self.extent[1] / self.rows as f64;
        Rect::new(
            (w - 1) as f64 * cw,
            (h - 1) as f64 * ch,
            if w == self.cols { self.extent[0] } else { w as f64 * cw },
            if h == self.rows { self.extent[1] } else { h as f64 * ch },
        )
    }

    /// Cell containing `p` under half-open cell bounds. Points outside the
    /// extent are clamped to the nearest border cell, so every point maps to
    /// exactly one cell.
    pub fn locate(&self, p: Point) -> (usize, usize) {
        let fx = p[0] / self.extent[0] * self.cols as f64;
        let fy = p[1] / self.extent[1] * self.rows as f64;
        let w = (fx.floor() as isize).clamp(0, self.cols as isize - 1) as usize + 1;
        let h = (fy.floor() as isize).clamp(0, self.rows as isize - 1) as usize + 1;
        (h, w)
    }

    pub fn locate_index(&self, p: Point) -> usize {
        let (h, w) = self.locate(p);
        self.index(h, w)
    }

    pub fn region(&self, scene_id: u64, h: usize, w: usize) -> Region {
        Region {
            scene_id,
            h,
            w,
            rect: self.rect(h, w),
        }
    }

    /// All cells of a scene, row-major.
    pub fn regions(&self, scene_id: u64) -> Vec<Region> {
        (1..=self.rows)
            .flat_map(|h| (1..=self.cols).map(move |w| (h, w)))
            .map(|(h, w)| self.region(scene_id, h, w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub scene_id: u64,
    pub h: usize,
    pub w: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub region: Region,
    pub actors: Vec<Actor>,
}

impl LabelSet {
    pub fn actor_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.actors.iter().map(|a| a.id)
    }
}

/// Masks serialize as strings of `0`/`1`, row-major.
mod mask_string {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&mask.iter().map(|&m| if m { '1' } else { '0' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        String::deserialize(d)?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(D::Error::custom(format!("bad mask character {other:?}"))),
            })
            .collect()
    }
}

/// Labels received so far for one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLabelState {
    pub scene_id: u64,
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "mask_string")]
    pub labeled_mask: Vec<bool>,
    pub labeled_actor_ids: BTreeSet<u32>,
}

impl SceneLabelState {
    pub fn new(scene_id: u64, grid: &Grid) -> Self {
        Self {
            scene_id,
            rows: grid.rows,
            cols: grid.cols,
            labeled_mask: vec![false; grid.len()],
            labeled_actor_ids: BTreeSet::new(),
        }
    }

    pub fn is_labeled(&self, h: usize, w: usize) -> bool {
        self.labeled_mask[(h - 1) * self.cols + (w - 1)]
    }

    pub fn any_labeled(&self) -> bool {
        self.labeled_mask.iter().any(|&m| m)
    }

    pub fn all_labeled(&self) -> bool {
        self.labeled_mask.iter().all(|&m| m)
    }

    pub fn labeled_regions(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    /// In-place union with the result of a query.
    pub fn apply(&mut self, label_set: &LabelSet) {
        let r = &label_set.region;
        self.labeled_mask[(r.h - 1) * self.cols + (r.w - 1)] = true;
        self.labeled_actor_ids.extend(label_set.actor_ids());
    }
}

/// Returns the actors whose oriented box touches `region.rect`.
pub fn label_region(scene: &Scene, region: &Region) -> Result<LabelSet> {
    if region.scene_id != scene.id {
        return Err(Error::InvalidQuery {
            scene: scene.id,
            region_scene: region.scene_id,
        });
    }
    let r = &region.rect;
    let eps = 1e-9;
    if r.x0 < -eps || r.y0 < -eps || r.x1 > scene.extent[0] + eps || r.y1 > scene.extent[1] + eps {
        return Err(Error::InvalidQuery {
            scene: scene.id,
            region_scene: region.scene_id,
        });
    }
    let actors = scene
        .actors
        .iter()
        .filter(|a| box_intersects_rect(&a.bbox, r))
        .cloned()
        .collect();
    Ok(LabelSet {
        region: *region,
        actors,
    })
}

/// Number of actors in `label_set` not yet labeled in `state`.
pub fn true_cost(label_set: &LabelSet, state: &SceneLabelState) -> u64 {
    label_set
        .actor_ids()
        .filter(|id| !state.labeled_actor_ids.contains(id))
        .count() as u64
}

/// Functional form of [`SceneLabelState::apply`].
pub fn apply_query(state: &SceneLabelState, label_set: &LabelSet) -> SceneLabelState {
    let mut next = state.clone();
    next.apply(label_set);
    next
}

/// Linear labeling cost: `per_actor · new actors + per_region`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub per_actor: u64,
    pub per_region: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_actor: 1,
            per_region: 0,
        }
    }
}

impl CostModel {
    pub fn cost(&self, label_set: &LabelSet, state: &SceneLabelState) -> u64 {
        self.per_actor * true_cost(label_set, state) + self.per_region
    }
}

/// Label bookkeeping for a whole pool: per-scene states and total spend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub grid: Grid,
    pub states: BTreeMap<u64, SceneLabelState>,
    pub spent: u64,
}

impl PoolState {
    pub fn new(scenes: &[Scene], grid: Grid) -> Self {
        let states = scenes
            .iter()
            .map(|s| (s.id, SceneLabelState::new(s.id, &grid)))
            .collect();
        Self {
            grid,
            states,
            spent: 0,
        }
    }

    pub fn state(&self, scene_id: u64) -> &SceneLabelState {
        &self.states[&scene_id]
    }

    /// Queries the oracle for `region`, bills the new actors, and records the labels.
    pub fn query(&mut self, scene: &Scene, region: &Region, cost: &CostModel) -> Result<u64> {
        let labels = label_region(scene, region)?;
        let state = self
            .states
            .get_mut(&scene.id)
            .ok_or(Error::InvalidQuery {
                scene: scene.id,
                region_scene: region.scene_id,
            })?;
        let c = cost.cost(&labels, state);
        state.apply(&labels);
        self.spent += c;
        Ok(c)
    }

    pub fn labeled_actor_count(&self) -> usize {
        self.states.values().map(|s| s.labeled_actor_ids.len()).sum()
    }

    pub fn labeled_scene_ids(&self) -> Vec<u64> {
        self.states
            .values()
            .filter(|s| s.any_labeled())
            .map(|s| s.scene_id)
            .collect()
    }
}
