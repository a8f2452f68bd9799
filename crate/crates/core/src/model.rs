//! Per-anchor joint detector and trajectory predictor.
//!
//! Every raster cell is an anchor. A small MLP maps the `k × k` patch of
//! sensor and map channels around the anchor to a hidden vector, from which
//! three heads read out: a detection logit, a box regression and a `K`-mode
//! Gaussian mixture over the actor's future waypoints (diagonal covariance,
//! timesteps independent given the mode).
//!
//! Training applies the loss only where labels were received: positive
//! anchors inside labeled boxes, and hard-mined negatives among anchors that
//! lie in labeled regions but inside no labeled box. All terms are summed,
//! never averaged, so sparsely labeled scenes are not up-weighted.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, OrientedBox, Point};
use crate::oracle::{Grid, SceneLabelState};
use crate::rng::{stream, Domain};
use crate::scenegen::{channel, map_channel, Actor, Scene};

/// Box priors used by the regression parametrization.
pub const PRIOR_LENGTH: f64 = 4.5;
pub const PRIOR_WIDTH: f64 = 2.0;
/// Meters per unit of per-step displacement output.
pub const STEP_SCALE: f64 = 5.0;
/// Variance floor, m².
pub const VARIANCE_FLOOR: f64 = 1e-4;

const BOX_OUTPUTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Patch side length `k` (odd).
    pub patch: usize,
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    /// Heads also read the raw patch (linear skip connection).
    pub skip: bool,
    pub modes: usize,
    pub horizon: usize,
    pub cell_size: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            patch: 3,
            in_channels: channel::COUNT + map_channel::COUNT,
            hidden: vec![32],
            skip: true,
            modes: 3,
            horizon: 10,
            cell_size: 2.5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::config("model.patch", "patch size must be odd"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one nonempty hidden layer"));
        }
        if self.modes == 0 {
            return Err(Error::config("model.modes", "K must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("model.horizon", "T must be at least 1"));
        }
        if self.in_channels != channel::COUNT + map_channel::COUNT {
            return Err(Error::config("model.in_channels", "must equal sensor + map channels"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn output_dim(&self) -> usize {
        1 + BOX_OUTPUTS + self.modes + self.modes * self.horizon * 4
    }

    /// `(inputs, outputs)` of every dense layer, first to last.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        let mut layers: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
        layers.push((self.head_dim(), self.output_dim()));
        layers
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers()
            .iter()
            .map(|(i, o)| {
                let start = off;
                off += i * o + o;
                start
            })
            .collect()
    }

    fn last_hidden(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    /// Width of the head input: last hidden layer, plus the patch with `skip`.
    pub fn head_dim(&self) -> usize {
        self.last_hidden() + if self.skip { self.input_dim() } else { 0 }
    }
}

/// Output index helpers.
pub mod out {
    pub const LOGIT: usize = 0;
    pub const BOX: usize = 1;

    pub fn mode_logit(k: usize) -> usize {
        7 + k
    }

    /// Index of component `j` (0, 1: step displacement; 2, 3: log σx, log σy) of mode `k`, step `t`.
    pub fn traj(modes: usize, horizon: usize, k: usize, t: usize, j: usize) -> usize {
        7 + modes + (k * horizon + t) * 4 + j
    }
}

/// Flat parameter vector with its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    #[serde(with = "crate::persist::f64_base64")]
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Self {
            arch,
            weights: vec![0.0; n],
        })
    }

    /// He-uniform hidden layers, small output layer, detection prior of ~5%.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = stream(seed, Domain::ModelInit, 0);
        let layers = p.arch.layers();
        let offsets = p.arch.layer_offsets();
        let n_layers = layers.len();
        for (l, (&(n_in, n_out), &off)) in layers.iter().zip(&offsets).enumerate() {
            let bound = if l + 1 == n_layers {
                0.5 * (6.0 / (n_in + n_out) as f64).sqrt()
            } else {
                (6.0 / n_in as f64).sqrt()
            };
            for w in &mut p.weights[off..off + n_in * n_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        let (n_in, n_out) = layers[n_layers - 1];
        let bias = offsets[n_layers - 1] + n_in * n_out;
        p.weights[bias + out::LOGIT] = -3.0;
        let (m, t) = (p.arch.modes, p.arch.horizon);
        for k in 0..m {
            for s in 0..t {
                p.weights[bias + out::traj(m, t, k, s, 2)] = 0.7;
                p.weights[bias + out::traj(m, t, k, s, 3)] = 0.7;
            }
        }
        debug_assert_eq!(bias + n_out, p.weights.len());
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Anchor center of raster cell `a`.
pub fn anchor_center(scene: &Scene, a: usize) -> Point {
    let f = &scene.features;
    f.cell_center(a % f.cells_x, a / f.cells_x)
}

fn check_shape(arch: &Architecture, scene: &Scene) -> Result<()> {
    let f = &scene.features;
    if f.channels != channel::COUNT || scene.map.channels != map_channel::COUNT {
        return Err(Error::config("features.channels", "raster channel count does not match the model"));
    }
    if (f.cell_size - arch.cell_size).abs() > 1e-12 {
        return Err(Error::config(
            "model.cell_size",
            format!("model expects {} m cells, raster has {}", arch.cell_size, f.cell_size),
        ));
    }
    if scene.map.cells_x != f.cells_x || scene.map.cells_y != f.cells_y {
        return Err(Error::config("map", "map raster shape differs from the sensor raster"));
    }
    Ok(())
}

/// Dense-layer evaluator with reusable buffers.
struct Mlp<'a> {
    arch: &'a Architecture,
    weights: &'a [f64],
    layers: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    input: Vec<f64>,
    /// Post-activation outputs of each hidden layer.
    acts: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    output: Vec<f64>,
}

impl<'a> Mlp<'a> {
    fn new(params: &'a ModelParams) -> Self {
        let arch = &params.arch;
        Self {
            arch,
            weights: &params.weights,
            layers: arch.layers(),
            offsets: arch.layer_offsets(),
            input: vec![0.0; arch.input_dim()],
            acts: arch.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            head_in: vec![0.0; arch.head_dim()],
            output: vec![0.0; arch.output_dim()],
        }
    }

    fn gather(&mut self, scene: &Scene, a: usize) {
        let f = &scene.features;
        let m = &scene.map;
        let r = (self.arch.patch / 2) as isize;
        let ix = (a % f.cells_x) as isize;
        let iy = (a / f.cells_x) as isize;
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let x = ix + dx;
                let y = iy + dy;
                if x < 0 || y < 0 || x >= f.cells_x as isize || y >= f.cells_y as isize {
                    for v in &mut self.input[k..k + self.arch.in_channels] {
                        *v = 0.0;
                    }
                } else {
                    for &v in f.cell(x as usize, y as usize) {
                        self.input[k] = v as f64;
                        k += 1;
                    }
                    for &v in m.cell(x as usize, y as usize) {
                        self.input[k] = v as f64;
                        k += 1;
                    }
                    continue;
                }
                k += self.arch.in_channels;
            }
        }
    }

    /// Hidden layers only; fills `self.acts` and `self.head_in`.
    fn trunk(&mut self, scene: &Scene, a: usize) {
        self.gather(scene, a);
        for l in 0..self.acts.len() {
            let (n_in, n_out) = self.layers[l];
            let off = self.offsets[l];
            let w = &self.weights[off..off + n_in * n_out];
            let b = &self.weights[off + n_in * n_out..off + n_in * n_out + n_out];
            let (prev, rest) = self.acts.split_at_mut(l);
            let x: &[f64] = if l == 0 { &self.input } else { &prev[l - 1] };
            let y = &mut rest[0];
            for o in 0..n_out {
                let z = dot(&w[o * n_in..(o + 1) * n_in], x) + b[o];
                y[o] = z.max(0.0);
            }
        }
        let h = self.acts.last().unwrap();
        self.head_in[..h.len()].copy_from_slice(h);
        if self.arch.skip {
            self.head_in[h.len()..].copy_from_slice(&self.input);
        }
    }

    fn head_range(&self) -> (usize, usize, usize) {
        let l = self.layers.len() - 1;
        let (n_in, n_out) = self.layers[l];
        (self.offsets[l], n_in, n_out)
    }

    /// Detection logit from the current head input.
    fn logit_from_trunk(&self) -> f64 {
        let (off, n_in, n_out) = self.head_range();
        dot(&self.weights[off..off + n_in], &self.head_in) + self.weights[off + n_in * n_out + out::LOGIT]
    }

    /// All outputs from a head-input row.
    fn head_from(&mut self, h: &[f64]) {
        let (off, n_in, n_out) = self.head_range();
        let w = &self.weights[off..off + n_in * n_out];
        let b = &self.weights[off + n_in * n_out..off + n_in * n_out + n_out];
        for o in 0..n_out {
            self.output[o] = dot(&w[o * n_in..(o + 1) * n_in], h) + b[o];
        }
    }

    fn full(&mut self, scene: &Scene, a: usize) {
        self.trunk(scene, a);
        let h = std::mem::take(&mut self.head_in);
        self.head_from(&h);
        self.head_in = h;
    }

    /// Accumulates parameter gradients for `d_out` (gradient w.r.t. the
    /// outputs) after a `trunk`/`full` call on the same anchor.
    fn backward(&self, d_out: &[f64], grads: &mut [f64]) {
        let n_layers = self.layers.len();
        let mut delta: Vec<f64> = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = self.layers[l];
            let off = self.offsets[l];
            let x: &[f64] = if l + 1 == n_layers {
                &self.head_in
            } else if l == 0 {
                &self.input
            } else {
                &self.acts[l - 1]
            };
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[off..off + n_in * n_out];
            let act = &self.acts[l - 1];
            // skip inputs lead to no parameters, so only the hidden part propagates
            let mut next = vec![0.0; act.len()];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, &wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *n += d * wi;
                }
            }
            for (n, &a) in next.iter_mut().zip(act) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            s[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut t = (s[0] + s[1]) + (s[2] + s[3]);
    for i in 4 * chunks..a.len() {
        t += a[i] * b[i];
    }
    t
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Raw outputs for every anchor of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub n_out: usize,
    pub data: Vec<f64>,
}

impl RawOutputs {
    pub fn anchor(&self, a: usize) -> &[f64] {
        &self.data[a * self.n_out..(a + 1) * self.n_out]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_out
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Full forward pass over all anchors. The input is never masked.
pub fn forward(params: &ModelParams, scene: &Scene) -> Result<RawOutputs> {
    check_shape(&params.arch, scene)?;
    let n_out = params.arch.output_dim();
    let mut mlp = Mlp::new(params);
    let mut data = Vec::with_capacity(scene.num_anchors() * n_out);
    for a in 0..scene.num_anchors() {
        mlp.full(scene, a);
        data.extend_from_slice(&mlp.output);
    }
    Ok(RawOutputs { n_out, data })
}

/// Cheap pass: head inputs and detection logits for every anchor.
#[derive(Debug, Clone)]
pub struct TrunkOutputs {
    /// Width of the last hidden layer, the leading part of each row.
    pub hidden_dim: usize,
    pub row_dim: usize,
    /// Head-input rows, one per anchor.
    pub rows: Vec<f64>,
    pub logits: Vec<f64>,
}

impl TrunkOutputs {
    pub fn row(&self, a: usize) -> &[f64] {
        &self.rows[a * self.row_dim..(a + 1) * self.row_dim]
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Mean last-hidden-layer activation over anchors.
    pub fn mean_hidden(&self) -> Vec<f64> {
        let n = self.logits.len().max(1) as f64;
        let mut m = vec![0.0; self.hidden_dim];
        for row in self.rows.chunks_exact(self.row_dim) {
            for (acc, v) in m.iter_mut().zip(&row[..self.hidden_dim]) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

pub fn forward_trunk(params: &ModelParams, scene: &Scene) -> Result<TrunkOutputs> {
    check_shape(&params.arch, scene)?;
    let mut mlp = Mlp::new(params);
    let row_dim = params.arch.head_dim();
    let n = scene.num_anchors();
    let mut rows = Vec::with_capacity(n * row_dim);
    let mut logits = Vec::with_capacity(n);
    for a in 0..n {
        mlp.trunk(scene, a);
        logits.push(mlp.logit_from_trunk());
        rows.extend_from_slice(&mlp.head_in);
    }
    Ok(TrunkOutputs {
        hidden_dim: params.arch.last_hidden(),
        row_dim,
        rows,
        logits,
    })
}

/// Full outputs of one anchor from its cached head-input row.
pub fn head_outputs(params: &ModelParams, row: &[f64]) -> Vec<f64> {
    let mut mlp = Mlp::new(params);
    mlp.head_from(row);
    mlp.output
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub anchor: usize,
    pub bbox: OrientedBox,
    pub confidence: f64,
}

fn decode_box(arch: &Architecture, anchor: Point, o: &[f64]) -> OrientedBox {
    let b = &o[out::BOX..out::BOX + BOX_OUTPUTS];
    OrientedBox::new(
        anchor[0] + arch.cell_size * b[0],
        anchor[1] + arch.cell_size * b[1],
        PRIOR_LENGTH * b[2].clamp(-3.0, 3.0).exp(),
        PRIOR_WIDTH * b[3].clamp(-3.0, 3.0).exp(),
        b[4].atan2(b[5]),
    )
}

/// Keeps anchors with `sigmoid(logit) >= conf_threshold` and decodes their boxes.
pub fn decode_detections(
    params: &ModelParams,
    scene: &Scene,
    outputs: &RawOutputs,
    conf_threshold: f64,
) -> Vec<Detection> {
    (0..outputs.len())
        .filter_map(|a| {
            let o = outputs.anchor(a);
            let p = sigmoid(o[out::LOGIT]);
            (p >= conf_threshold).then(|| Detection {
                anchor: a,
                bbox: decode_box(&params.arch, anchor_center(scene, a), o),
                confidence: p,
            })
        })
        .collect()
}

/// Greedy non-maximum suppression: descending confidence, ties by anchor
/// index; a detection is dropped when its IoU with a kept one exceeds the
/// threshold.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.anchor.cmp(&b.anchor)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Detection and prediction settings shared by scoring and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.5,
            nms_iou: 0.2,
        }
    }
}

/// Trunk pass, thresholding and NMS without a full per-anchor head pass.
pub fn detect(params: &ModelParams, scene: &Scene, cfg: &DetectConfig) -> Result<(TrunkOutputs, Vec<Detection>)> {
    let trunk = forward_trunk(params, scene)?;
    let mut mlp = Mlp::new(params);
    let mut raw = Vec::new();
    for (a, &z) in trunk.logits.iter().enumerate() {
        let p = sigmoid(z);
        if p >= cfg.conf_threshold {
            mlp.head_from(trunk.row(a));
            raw.push(Detection {
                anchor: a,
                bbox: decode_box(&params.arch, anchor_center(scene, a), &mlp.output),
                confidence: p,
            });
        }
    }
    let dets = nms(&raw, cfg.nms_iou);
    Ok((trunk, dets))
}

/// Mixture over future waypoints for one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrediction {
    pub weights: Vec<f64>,
    /// `means[k][t]`, scene meters.
    pub means: Vec<Vec<Point>>,
    /// `variances[k][t]` = (σx², σy²).
    pub variances: Vec<Vec<[f64; 2]>>,
}

impl GmmPrediction {
    pub fn modes(&self) -> usize {
        self.weights.len()
    }

    /// Most likely mode; ties resolve to the lowest index.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for k in 1..self.weights.len() {
            if self.weights[k] > self.weights[best] {
                best = k;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("mixture weights not on the simplex (sum {sum})")));
        }
        if self.means.len() != self.weights.len() || self.variances.len() != self.weights.len() {
            return Err(Error::InvalidInput("mode count mismatch".into()));
        }
        if self
            .variances
            .iter()
            .flatten()
            .any(|v| !(v[0] > 0.0) || !(v[1] > 0.0))
        {
            return Err(Error::InvalidInput("nonpositive variance".into()));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Waypoint means of mode `k`: `origin` plus the running sum of per-step
/// displacements.
fn mode_means(arch: &Architecture, origin: Point, o: &[f64], k: usize) -> Vec<Point> {
    let (m, t) = (arch.modes, arch.horizon);
    let mut p = origin;
    (0..t)
        .map(|s| {
            p[0] += STEP_SCALE * o[out::traj(m, t, k, s, 0)];
            p[1] += STEP_SCALE * o[out::traj(m, t, k, s, 1)];
            p
        })
        .collect()
}

/// Mixture decoded from one anchor's raw outputs. Means are offsets from
/// `origin`, the center of the box the mixture belongs to.
pub fn gmm_from_outputs(arch: &Architecture, origin: Point, o: &[f64]) -> GmmPrediction {
    let (m, t) = (arch.modes, arch.horizon);
    let logits: Vec<f64> = (0..m).map(|k| o[out::mode_logit(k)]).collect();
    let weights = softmax(&logits);
    let mut means = Vec::with_capacity(m);
    let mut variances = Vec::with_capacity(m);
    for k in 0..m {
        means.push(mode_means(arch, origin, o, k));
        variances.push(
            (0..t)
                .map(|s| {
                    let i = |j| o[out::traj(m, t, k, s, j)];
                    [(2.0 * i(2)).exp() + VARIANCE_FLOOR, (2.0 * i(3)).exp() + VARIANCE_FLOOR]
                })
                .collect(),
        );
    }
    GmmPrediction {
        weights,
        means,
        variances,
    }
}

/// One mixture per detection, read from that detection's anchor.
pub fn predict_trajectories(
    params: &ModelParams,
    trunk: &TrunkOutputs,
    detections: &[Detection],
) -> Vec<GmmPrediction> {
    let mut mlp = Mlp::new(params);
    detections
        .iter()
        .map(|d| {
            mlp.head_from(trunk.row(d.anchor));
            gmm_from_outputs(&params.arch, d.bbox.center(), &mlp.output)
        })
        .collect()
}

fn gaussian_log_density(y: Point, mean: Point, var: [f64; 2]) -> f64 {
    let rx = y[0] - mean[0];
    let ry = y[1] - mean[1];
    -(2.0 * PI).ln() - 0.5 * (var[0].ln() + var[1].ln()) - 0.5 * (rx * rx / var[0] + ry * ry / var[1])
}

/// Negative log-likelihood of a trajectory under the mixture, computed with
/// log-sum-exp over modes of summed per-timestep log-densities.
pub fn gmm_nll(pred: &GmmPrediction, trajectory: &[Point]) -> Result<f64> {
    pred.validate()?;
    for k in 0..pred.modes() {
        if pred.means[k].len() != trajectory.len() || pred.variances[k].len() != trajectory.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory has {} steps, mixture mode {k} has {}",
                trajectory.len(),
                pred.means[k].len()
            )));
        }
    }
    let terms: Vec<f64> = (0..pred.modes())
        .map(|k| {
            let ll: f64 = trajectory
                .iter()
                .zip(&pred.means[k])
                .zip(&pred.variances[k])
                .map(|((&y, &mu), &var)| gaussian_log_density(y, mu, var))
                .sum();
            pred.weights[k].ln() + ll
        })
        .collect();
    Ok(-log_sum_exp(&terms))
}

/// Loss weights and mining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub box_weight: f64,
    pub nll_weight: f64,
    /// Hard negatives per positive.
    pub negative_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            box_weight: 1.0,
            nll_weight: 0.1,
            negative_ratio: 3,
        }
    }
}

/// Anchors that receive a loss for one scene under a label state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Supervision {
    /// `(anchor, index into scene.actors)`.
    pub positives: Vec<(usize, usize)>,
    /// Anchors in labeled regions and inside no labeled box.
    pub negative_candidates: Vec<usize>,
}

impl Supervision {
    /// Positives: anchors whose center lies inside a labeled box, plus the
    /// anchor whose cell holds the box center. Overlapping boxes resolve to
    /// the nearest center.
    pub fn from_labels(scene: &Scene, labeled: &[usize], region_mask: impl Fn(Point) -> bool) -> Self {
        let f = &scene.features;
        let n = scene.num_anchors();
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; n];
        let mut inside_labeled = vec![false; n];
        for &ai in labeled {
            let actor = &scene.actors[ai];
            let b = &actor.bbox;
            let bb = b.aabb();
            let cs = f.cell_size;
            let ix0 = ((bb.x0 / cs - 0.5).floor().max(0.0)) as usize;
            let iy0 = ((bb.y0 / cs - 0.5).floor().max(0.0)) as usize;
            let ix1 = ((bb.x1 / cs - 0.5).ceil().max(-1.0) as isize + 1).clamp(0, f.cells_x as isize) as usize;
            let iy1 = ((bb.y1 / cs - 0.5).ceil().max(-1.0) as isize + 1).clamp(0, f.cells_y as isize) as usize;
            let mut claim = |a: usize| {
                let c = anchor_center(scene, a);
                let d = (c[0] - b.cx).hypot(c[1] - b.cy);
                match owner[a] {
                    Some((_, d0)) if d0 <= d => {}
                    _ => owner[a] = Some((ai, d)),
                }
            };
            for iy in iy0..iy1 {
                for ix in ix0..ix1 {
                    let a = iy * f.cells_x + ix;
                    if b.contains(anchor_center(scene, a)) {
                        inside_labeled[a] = true;
                        claim(a);
                    }
                }
            }
            let cx = (b.cx / cs).floor();
            let cy = (b.cy / cs).floor();
            if cx >= 0.0 && cy >= 0.0 && (cx as usize) < f.cells_x && (cy as usize) < f.cells_y {
                let a = cy as usize * f.cells_x + cx as usize;
                inside_labeled[a] = true;
                claim(a);
            }
        }
        let positives = owner
            .iter()
            .enumerate()
            .filter_map(|(a, o)| o.map(|(ai, _)| (a, ai)))
            .collect();
        let negative_candidates = (0..n)
            .filter(|&a| !inside_labeled[a] && region_mask(anchor_center(scene, a)))
            .collect();
        Self {
            positives,
            negative_candidates,
        }
    }

    /// Supervision from the labels received so far for a scene.
    pub fn partial(scene: &Scene, state: &SceneLabelState, grid: &Grid) -> Self {
        let labeled: Vec<usize> = scene
            .actors
            .iter()
            .enumerate()
            .filter(|(_, a)| state.labeled_actor_ids.contains(&a.id))
            .map(|(i, _)| i)
            .collect();
        Self::from_labels(scene, &labeled, |p| {
            let (h, w) = grid.locate(p);
            state.is_labeled(h, w)
        })
    }

    /// Standard full supervision: every actor labeled, every anchor eligible.
    pub fn full(scene: &Scene) -> Self {
        let all: Vec<usize> = (0..scene.actors.len()).collect();
        Self::from_labels(scene, &all, |_| true)
    }
}

/// Loss breakdown for one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub cls_pos: f64,
    pub cls_neg: f64,
    pub box_reg: f64,
    pub nll: f64,
    pub total: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.cls_pos += o.cls_pos;
        self.cls_neg += o.cls_neg;
        self.box_reg += o.box_reg;
        self.nll += o.nll;
        self.total += o.total;
        self.positives += o.positives;
        self.negatives += o.negatives;
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Box regression targets of `actor` for an anchor at `anchor`.
fn box_targets(arch: &Architecture, anchor: Point, actor: &Actor) -> [f64; BOX_OUTPUTS] {
    let b = &actor.bbox;
    [
        (b.cx - anchor[0]) / arch.cell_size,
        (b.cy - anchor[1]) / arch.cell_size,
        (b.length / PRIOR_LENGTH).ln(),
        (b.width / PRIOR_WIDTH).ln(),
        b.heading.sin(),
        b.heading.cos(),
    ]
}

/// Positive-anchor loss and its gradient w.r.t. the raw outputs.
fn positive_loss(arch: &Architecture, cfg: &LossConfig, anchor: Point, actor: &Actor, o: &[f64], d: &mut [f64]) -> LossTerms {
    let (m, t) = (arch.modes, arch.horizon);
    let z = o[out::LOGIT];
    let cls = softplus(-z);
    d[out::LOGIT] = cfg.cls_weight * (sigmoid(z) - 1.0);

    let targets = box_targets(arch, anchor, actor);
    let mut box_loss = 0.0;
    for (j, &tj) in targets.iter().enumerate() {
        let (l, g) = smooth_l1(o[out::BOX + j] - tj);
        box_loss += l;
        d[out::BOX + j] = cfg.box_weight * g;
    }

    // mixture NLL, means relative to the labeled box center
    let origin = actor.bbox.center();
    let logits: Vec<f64> = (0..m).map(|k| o[out::mode_logit(k)]).collect();
    let pi = softmax(&logits);
    let log_pi_base = {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        logits.iter().map(|&v| v - lse).collect::<Vec<_>>()
    };
    let means: Vec<Vec<Point>> = (0..m).map(|k| mode_means(arch, origin, o, k)).collect();
    let mut mode_ll = vec![0.0; m];
    for k in 0..m {
        let mut ll = 0.0;
        for s in 0..t {
            let y = actor.trajectory[s];
            let mu = means[k][s];
            let var = [
                (2.0 * o[out::traj(m, t, k, s, 2)]).exp() + VARIANCE_FLOOR,
                (2.0 * o[out::traj(m, t, k, s, 3)]).exp() + VARIANCE_FLOOR,
            ];
            ll += gaussian_log_density(y, mu, var);
        }
        mode_ll[k] = ll;
    }
    let joint: Vec<f64> = (0..m).map(|k| log_pi_base[k] + mode_ll[k]).collect();
    let lse = log_sum_exp(&joint);
    let nll = -lse;
    let gamma: Vec<f64> = joint.iter().map(|&j| (j - lse).exp()).collect();
    let w = cfg.nll_weight;
    for k in 0..m {
        d[out::mode_logit(k)] = w * (pi[k] - gamma[k]);
        // step s moves every later waypoint, so its gradient is a suffix sum
        let mut suffix = [0.0; 2];
        for s in (0..t).rev() {
            let y = actor.trajectory[s];
            for axis in 0..2 {
                let e2 = (2.0 * o[out::traj(m, t, k, s, 2 + axis)]).exp();
                let var = e2 + VARIANCE_FLOOR;
                let r = y[axis] - means[k][s][axis];
                suffix[axis] += -w * gamma[k] * r / var;
                d[out::traj(m, t, k, s, axis)] = STEP_SCALE * suffix[axis];
                d[out::traj(m, t, k, s, 2 + axis)] = w * gamma[k] * (e2 / var) * (1.0 - r * r / var);
            }
        }
    }

    let total = cfg.cls_weight * cls + cfg.box_weight * box_loss + cfg.nll_weight * nll;
    LossTerms {
        cls_pos: cls,
        box_reg: box_loss,
        nll,
        total,
        positives: 1,
        ..Default::default()
    }
}

/// Sum-reduced loss of one scene under `sup`; gradients are accumulated into
/// `grads` when given.
pub fn supervised_loss(
    params: &ModelParams,
    scene: &Scene,
    sup: &Supervision,
    cfg: &LossConfig,
    mut grads: Option<&mut [f64]>,
) -> Result<LossTerms> {
    check_shape(&params.arch, scene)?;
    let arch = &params.arch;
    let mut mlp = Mlp::new(params);
    let mut terms = LossTerms::default();
    if sup.positives.is_empty() && sup.negative_candidates.is_empty() {
        return Ok(terms);
    }
    let mut d = vec![0.0; arch.output_dim()];

    for &(a, ai) in &sup.positives {
        mlp.full(scene, a);
        d.iter_mut().for_each(|v| *v = 0.0);
        let t = positive_loss(arch, cfg, anchor_center(scene, a), &scene.actors[ai], &mlp.output, &mut d);
        terms += t;
        if let Some(g) = grads.as_deref_mut() {
            mlp.backward(&d, g);
        }
    }

    // hard negatives: highest background loss first, ties by anchor index
    let mut scored: Vec<(f64, usize)> = sup
        .negative_candidates
        .iter()
        .map(|&a| {
            mlp.trunk(scene, a);
            (mlp.logit_from_trunk(), a)
        })
        .collect();
    let n_neg = (cfg.negative_ratio * sup.positives.len()).max(1).min(scored.len());
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    d.iter_mut().for_each(|v| *v = 0.0);
    for &(z, a) in &scored[..n_neg] {
        let l = softplus(z);
        terms.cls_neg += l;
        terms.total += cfg.cls_weight * l;
        terms.negatives += 1;
        if let Some(g) = grads.as_deref_mut() {
            mlp.trunk(scene, a);
            d[out::LOGIT] = cfg.cls_weight * sigmoid(z);
            mlp.backward(&d, g);
        }
    }
    Ok(terms)
}

/// Region-masked loss: positives inside labeled boxes plus hard negatives
/// drawn only from labeled regions. A scene without labeled regions
/// contributes nothing.
pub fn partial_loss(
    params: &ModelParams,
    scene: &Scene,
    state: &SceneLabelState,
    grid: &Grid,
    cfg: &LossConfig,
    grads: Option<&mut [f64]>,
) -> Result<LossTerms> {
    if !state.any_labeled() {
        log::debug!("scene {} has no labeled regions; zero loss", scene.id);
        return Ok(LossTerms::default());
    }
    let sup = Supervision::partial(scene, state, grid);
    supervised_loss(params, scene, &sup, cfg, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per minibatch.
    pub batch_scenes: usize,
    /// When set, a minibatch instead takes scenes until it holds at least
    /// this many supervised actors, so step counts do not depend on how
    /// densely scenes are labeled.
    pub batch_actors: Option<usize>,
    pub learning_rate: f64,
    /// Learning rate decays linearly to `learning_rate · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip, per step.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_scenes: 2,
            batch_actors: Some(40),
            learning_rate: 1e-2,
            final_lr_fraction: 0.0,
            optimizer: Optimizer::Adam,
            clip_norm: Some(100.0),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_scenes == 0 {
            return Err(Error::config("train.batch_scenes", "must be positive"));
        }
        if self.batch_actors == Some(0) {
            return Err(Error::config("train.batch_actors", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("train.final_lr_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One labeled training scene.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub scene: &'a Scene,
    pub state: &'a SceneLabelState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Summed loss over the dataset at the start of each epoch's passes.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
///
/// Minibatches are drawn from a per-epoch shuffle; per-scene losses are
/// summed in dataset order, so the result depends only on the seed and the
/// dataset.
pub fn train(arch: &Architecture, dataset: &[TrainExample], grid: &Grid, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    train_from(ModelParams::init(arch.clone(), cfg.seed)?, dataset, grid, cfg)
}

/// Like [`train`], starting from `params` instead of a fresh initialization.
pub fn train_from(
    mut params: ModelParams,
    dataset: &[TrainExample],
    grid: &Grid,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let sups: Vec<Supervision> = dataset
        .iter()
        .map(|ex| Supervision::partial(ex.scene, ex.state, grid))
        .collect();
    let n_params = params.weights.len();
    let mut grads = vec![0.0; n_params];
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, Domain::Minibatch, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches = make_batches(&order, &sups, cfg);
        for (b, batch) in batches.iter().enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch.iter() {
                let t = supervised_loss(&params, dataset[i].scene, &sups[i], &cfg.loss, Some(&mut grads))?;
                batch_loss += t.total;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training { step, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            if let Some(c) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    grads.iter_mut().for_each(|g| *g *= s);
                }
            }
            let frac = (epoch as f64 + b as f64 / batches.len() as f64) / cfg.epochs as f64;
            let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    for ((w, g), v) in params.weights.iter_mut().zip(&grads).zip(m1.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                    let t = (step + 1) as i32;
                    let c1 = 1.0 - f64::powi(b1, t);
                    let c2 = 1.0 - f64::powi(b2, t);
                    for (((w, g), a), b) in params.weights.iter_mut().zip(&grads).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                        *a = b1 * *a + (1.0 - b1) * g;
                        *b = b2 * *b + (1.0 - b2) * g * g;
                        *w -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                    }
                }
            }
            step += 1;
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.3}");
        log.epoch_loss.push(epoch_loss);
    }
    log.steps = step;
    if !params.is_finite() {
        return Err(Error::Training { step, loss: f64::NAN });
    }
    Ok((params, log))
}

fn make_batches(order: &[usize], sups: &[Supervision], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let Some(k) = cfg.batch_actors else {
        return order.chunks(cfg.batch_scenes).map(|c| c.to_vec()).collect();
    };
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut actors = BTreeSet::new();
    let mut count = 0;
    for &i in order {
        cur.push(i);
        actors.clear();
        actors.extend(sups[i].positives.iter().map(|p| p.1));
        count += actors.len();
        if count >= k {
            batches.push(std::mem::take(&mut cur));
            count = 0;
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Summed loss of `params` over a dataset.
pub fn dataset_loss(params: &ModelParams, dataset: &[TrainExample], grid: &Grid, cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for ex in dataset {
        total += partial_loss(params, ex.scene, ex.state, grid, cfg, None)?.total;
    }
    Ok(total)
}
