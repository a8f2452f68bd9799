//! Detection AP, trajectory meanADE with a per-action breakdown, and
//! histograms describing which actors were labeled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, OrientedBox, Point};
use crate::model::{detect, predict_trajectories, DetectConfig, Detection, GmmPrediction, ModelParams};
use crate::scenegen::{classify_action, Action, Actor, Scene};

pub const AP_IOU: f64 = 0.7;
pub const MATCH_IOU: f64 = 0.5;

/// Greedy confidence-descending assignment. Returns, for each detection in
/// sorted order, its original index and the matched ground-truth index.
/// Ties on confidence keep the input order.
pub fn greedy_match(dets: &[Detection], gts: &[OrientedBox], threshold: f64) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&dets[d].bbox, gt);
                if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d, best.map(|(g, _)| g))
        })
        .collect()
}

/// All-point interpolated AP from `(confidence, is_true_positive)` pairs
/// already in ranking order. `None` when there is no ground truth.
pub fn ap_from_ranked(ranked: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..ranked.len() {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    Some(ap)
}

/// AP of one scene's detections against its ground-truth boxes.
pub fn average_precision(dets: &[Detection], gts: &[OrientedBox], iou_threshold: f64) -> Option<f64> {
    let matched = greedy_match(dets, gts, iou_threshold);
    let ranked: Vec<bool> = matched.iter().map(|(_, g)| g.is_some()).collect();
    ap_from_ranked(&ranked, gts.len())
}

/// A matched (detection, ground truth) pair with its displacement errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedAde {
    pub ade: f64,
    /// Minimum over modes, reported as an alternate metric.
    pub min_ade: f64,
    pub action: Action,
}

/// Time-averaged displacement of mode `k` from `trajectory`.
pub fn mode_ade(pred: &GmmPrediction, k: usize, trajectory: &[Point]) -> f64 {
    let t = trajectory.len().min(pred.means[k].len());
    if t == 0 {
        return 0.0;
    }
    (0..t)
        .map(|s| {
            let m = pred.means[k][s];
            let y = trajectory[s];
            (m[0] - y[0]).hypot(m[1] - y[1])
        })
        .sum::<f64>()
        / t as f64
}

/// Matches detections to actors at `match_iou` and computes per-pair ADE
/// with the most likely mode.
pub fn match_ade(
    dets: &[Detection],
    preds: &[GmmPrediction],
    actors: &[Actor],
    match_iou: f64,
    dt: f64,
) -> Result<Vec<MatchedAde>> {
    if preds.len() != dets.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} detections",
            preds.len(),
            dets.len()
        )));
    }
    let gts: Vec<OrientedBox> = actors.iter().map(|a| a.bbox).collect();
    let mut out = Vec::new();
    for (d, g) in greedy_match(dets, &gts, match_iou) {
        let Some(g) = g else { continue };
        let pred = &preds[d];
        let traj = &actors[g].trajectory;
        let ade = mode_ade(pred, pred.best_mode(), traj);
        let min_ade = (0..pred.modes())
            .map(|k| mode_ade(pred, k, traj))
            .fold(f64::INFINITY, f64::min);
        out.push(MatchedAde {
            ade,
            min_ade,
            action: classify_action(traj, dt)?,
        });
    }
    Ok(out)
}

/// Mean of `ade` over matches; `None` when empty.
pub fn mean_ade(matches: &[MatchedAde]) -> Option<f64> {
    if matches.is_empty() {
        None
    } else {
        Some(matches.iter().map(|m| m.ade).sum::<f64>() / matches.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionBucket {
    pub count: usize,
    pub mean_ade: Option<f64>,
}

/// Per-action meanADE, indexed by [`Action::index`].
pub fn per_action(matches: &[MatchedAde]) -> [ActionBucket; 4] {
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for m in matches {
        sums[m.action.index()] += m.ade;
        counts[m.action.index()] += 1;
    }
    let mut out = [ActionBucket::default(); 4];
    for i in 0..4 {
        out[i] = ActionBucket {
            count: counts[i],
            mean_ade: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub detect: DetectConfig,
    pub ap_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig {
                conf_threshold: 0.1,
                nms_iou: 0.2,
            },
            ap_iou: AP_IOU,
            match_iou: MATCH_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at `ap_iou` pooled over all evaluation scenes.
    pub map: Option<f64>,
    pub mean_ade: Option<f64>,
    pub min_ade: Option<f64>,
    /// Straight, left, right, stationary.
    pub per_action: [ActionBucket; 4],
    /// Fraction of ground-truth actors matched at `match_iou`.
    pub recall: Option<f64>,
    pub n_gt: usize,
    pub n_detections: usize,
    pub n_matched: usize,
}

/// Per-scene evaluation pieces, combined in scene order.
struct SceneEval {
    ranked: Vec<(f64, bool)>,
    matches: Vec<MatchedAde>,
    n_gt: usize,
}

/// Evaluates detection and prediction over fully labeled scenes.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], dt: f64, cfg: &EvalConfig) -> Result<EvalReport> {
    let per_scene: Vec<SceneEval> = scenes
        .par_iter()
        .map(|scene| -> Result<SceneEval> {
            let (trunk, dets) = detect(params, scene, &cfg.detect)?;
            let gts: Vec<OrientedBox> = scene.actors.iter().map(|a| a.bbox).collect();
            let ranked = greedy_match(&dets, &gts, cfg.ap_iou)
                .into_iter()
                .map(|(d, g)| (dets[d].confidence, g.is_some()))
                .collect();
            let preds = predict_trajectories(params, &trunk, &dets);
            let matches = match_ade(&dets, &preds, &scene.actors, cfg.match_iou, dt)?;
            Ok(SceneEval {
                ranked,
                matches,
                n_gt: gts.len(),
            })
        })
        .collect::<Result<_>>()?;

    let mut ranked: Vec<(f64, bool)> = per_scene.iter().flat_map(|s| s.ranked.iter().copied()).collect();
    // stable: equal confidences keep scene order
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    let n_gt: usize = per_scene.iter().map(|s| s.n_gt).sum();
    let matches: Vec<MatchedAde> = per_scene.into_iter().flat_map(|s| s.matches).collect();
    let min_ade = (!matches.is_empty()).then(|| matches.iter().map(|m| m.min_ade).sum::<f64>() / matches.len() as f64);
    Ok(EvalReport {
        map: ap_from_ranked(&hits, n_gt),
        mean_ade: mean_ade(&matches),
        min_ade,
        per_action: per_action(&matches),
        recall: (n_gt > 0).then(|| matches.len() as f64 / n_gt as f64),
        n_gt,
        n_detections: hits.len(),
        n_matched: matches.len(),
    })
}

/// Counts over bins `[e_i, e_{i+1})`; values below the first edge go to the
/// first bin and values at or above the last edge to the last bin, so the
/// total mass equals the number of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("stats.edges", "need at least two strictly increasing edges"));
        }
        let n = edges.len() - 1;
        Ok(Self {
            edges,
            counts: vec![0; n],
        })
    }

    pub fn bin(&self, v: f64) -> usize {
        let n = self.counts.len();
        self.edges[1..n].iter().take_while(|&&e| v >= e).count()
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub speed_edges: Vec<f64>,
    pub distance_edges: Vec<f64>,
    pub point_edges: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            speed_edges: vec![0.0, 1.0, 3.0, 6.0, 9.0, 12.0, 15.0],
            distance_edges: vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 75.0],
            point_edges: vec![0.0, 5.0, 10.0, 25.0, 50.0, 100.0, 200.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub n_actors: u64,
    /// Straight, left, right, stationary.
    pub actions: [u64; 4],
    pub speed: Histogram,
    pub distance: Histogram,
    pub points: Histogram,
    pub mean_speed: Option<f64>,
    pub mean_distance: Option<f64>,
}

impl SelectionStats {
    pub fn nonstationary_fraction(&self) -> Option<f64> {
        (self.n_actors > 0).then(|| 1.0 - self.actions[Action::Stationary.index()] as f64 / self.n_actors as f64)
    }
}

/// Histograms over `(scene, actor)` pairs.
pub fn selection_stats<'a>(
    labeled: impl IntoIterator<Item = (&'a Scene, &'a Actor)>,
    dt: f64,
    cfg: &StatsConfig,
) -> Result<SelectionStats> {
    let mut s = SelectionStats {
        n_actors: 0,
        actions: [0; 4],
        speed: Histogram::new(cfg.speed_edges.clone())?,
        distance: Histogram::new(cfg.distance_edges.clone())?,
        points: Histogram::new(cfg.point_edges.clone())?,
        mean_speed: None,
        mean_distance: None,
    };
    let mut speed_sum = 0.0;
    let mut dist_sum = 0.0;
    for (scene, actor) in labeled {
        let d = (actor.bbox.cx - scene.sdv_position[0]).hypot(actor.bbox.cy - scene.sdv_position[1]);
        s.n_actors += 1;
        s.actions[classify_action(&actor.trajectory, dt)?.index()] += 1;
        s.speed.add(actor.speed);
        s.distance.add(d);
        s.points.add(actor.point_count as f64);
        speed_sum += actor.speed;
        dist_sum += d;
    }
    if s.n_actors > 0 {
        s.mean_speed = Some(speed_sum / s.n_actors as f64);
        s.mean_distance = Some(dist_sum / s.n_actors as f64);
    }
    Ok(s)
}
