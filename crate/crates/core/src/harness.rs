//! The active learning loop: initial labeling, then per iteration
//! score → select → label → retrain → evaluate, with checkpoints, resumable
//! runs, multi-method comparisons and the density sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, selection_stats, EvalConfig, EvalReport, SelectionStats, StatsConfig};
use crate::model::{forward_trunk, train, train_from, Architecture, ModelParams, TrainConfig, TrainExample};
use crate::oracle::{CostModel, Grid, PoolState};
use crate::persist::{read_json, read_pool, write_atomic, write_json};
use crate::rng::{stream, Domain};
use crate::scenegen::{Action, Scene};
use crate::scoring::{coreset_select, score_pool, Criterion, SceneScores, ScoreConfig};
use crate::selection::{
    greedy_select, query_whole_scenes, random_regions, random_scenes, BudgetMode, GreedyConfig, QueryPlan, SceneRank,
};

pub const RUN_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const STATS_CSV: &str = "stats.csv";
pub const STATS_JSON: &str = "stats.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SCORES_DIR: &str = "scores";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FineGrained,
    CoarseGrained,
    RandomScenes,
    RandomRegions,
    Coreset,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FineGrained,
        Method::CoarseGrained,
        Method::RandomScenes,
        Method::RandomRegions,
        Method::Coreset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FineGrained => "fine_grained",
            Method::CoarseGrained => "coarse_grained",
            Method::RandomScenes => "random_scenes",
            Method::RandomRegions => "random_regions",
            Method::Coreset => "coreset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }

    /// Methods that start from partially labeled scenes.
    pub fn partial_initial(self) -> bool {
        matches!(self, Method::FineGrained | Method::RandomRegions)
    }

    pub fn needs_model_for_selection(self) -> bool {
        matches!(self, Method::FineGrained | Method::CoarseGrained | Method::Coreset)
    }

    fn default_criterion(self) -> Criterion {
        match self {
            Method::FineGrained | Method::CoarseGrained => Criterion::PredEntropy,
            Method::RandomScenes | Method::RandomRegions => Criterion::Random,
            Method::Coreset => Criterion::Coreset,
        }
    }

    fn accepts(self, c: Criterion) -> bool {
        match self {
            Method::FineGrained | Method::CoarseGrained => c.is_entropy(),
            Method::RandomScenes | Method::RandomRegions => c == Criterion::Random,
            Method::Coreset => c == Criterion::Coreset,
        }
    }
}

/// Everything that defines a run. Output location is not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub pool: PathBuf,
    pub eval_pool: PathBuf,
    pub method: Method,
    /// Defaults per method when absent.
    pub criterion: Option<Criterion>,
    pub iterations: usize,
    pub budget: u64,
    pub initial_budget: u64,
    /// Density of the initial random-region labels for partial-label methods.
    pub initial_density: f64,
    /// Region grid `[H, W]`. Coarse-grained runs always use `[1, 1]`.
    pub grid: [usize; 2],
    /// Sparsity floor M.
    pub min_actors: usize,
    /// Density of the random-regions baseline.
    pub density: f64,
    pub budget_mode: BudgetMode,
    pub scene_rank: SceneRank,
    pub cost_aware: bool,
    pub cost: CostModel,
    pub model: Architecture,
    /// `train.seed` is replaced by the run seed.
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub stats: StatsConfig,
    pub dump_scores: bool,
    /// Continue from the previous iteration's weights instead of retraining.
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            pool: PathBuf::from("pool"),
            eval_pool: PathBuf::from("eval_pool"),
            method: Method::FineGrained,
            criterion: None,
            iterations: 5,
            budget: 400,
            initial_budget: 800,
            initial_density: 0.25,
            grid: [10, 10],
            min_actors: 5,
            density: 0.25,
            budget_mode: BudgetMode::Default,
            scene_rank: SceneRank::Max,
            cost_aware: true,
            cost: CostModel::default(),
            model: Architecture::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            eval: EvalConfig::default(),
            stats: StatsConfig::default(),
            dump_scores: false,
            fine_tune: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn criterion(&self) -> Criterion {
        self.criterion.unwrap_or(self.method.default_criterion())
    }

    /// Copy of `self` for another method; an incompatible criterion resets
    /// to that method's default.
    pub fn with_method(&self, method: Method) -> Self {
        let criterion = self.criterion.filter(|&c| method.accepts(c));
        Self {
            method,
            criterion,
            ..self.clone()
        }
    }

    pub fn selection_grid(&self, extent: [f64; 2]) -> Result<Grid> {
        match self.method {
            Method::CoarseGrained => Grid::new(extent, 1, 1),
            _ => Grid::new(extent, self.grid[0], self.grid[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {RUN_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "N must be at least 1"));
        }
        if self.budget == 0 {
            return Err(Error::config("budget", "B must be at least 1"));
        }
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return Err(Error::config("grid", "H and W must be at least 1"));
        }
        for (field, r) in [("initial_density", self.initial_density), ("density", self.density)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(field, "must lie in (0, 1]"));
            }
        }
        if let Some(c) = self.criterion {
            if !self.method.accepts(c) {
                return Err(Error::config(
                    "criterion",
                    format!("{c:?} is not usable with method {}", self.method.name()),
                ));
            }
        }
        self.model.validate()?;
        self.train.validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// Training and evaluation scenes held in memory.
#[derive(Debug, Clone)]
pub struct Pools {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
    /// Waypoint spacing, seconds.
    pub dt: f64,
}

impl Pools {
    pub fn new(train: Vec<Scene>, eval: Vec<Scene>, dt: f64) -> Result<Self> {
        let ids: BTreeSet<u64> = train.iter().map(|s| s.id).collect();
        if ids.len() != train.len() {
            return Err(Error::config("pool", "duplicate scene ids"));
        }
        if let Some(s) = eval.iter().find(|s| ids.contains(&s.id)) {
            return Err(Error::config(
                "eval_pool",
                format!("scene id {} appears in both the pool and the evaluation pool", s.id),
            ));
        }
        let Some(first) = train.first() else {
            return Err(Error::config("pool", "pool is empty"));
        };
        if train.iter().chain(&eval).any(|s| s.extent != first.extent) {
            return Err(Error::config("pool", "scenes must share one extent"));
        }
        Ok(Self { train, eval, dt })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (m, train) = read_pool(&cfg.pool)?;
        let (me, eval) = read_pool(&cfg.eval_pool)?;
        if (m.config.dt - me.config.dt).abs() > 1e-12 {
            return Err(Error::config("eval_pool", "dt differs from the training pool"));
        }
        Self::new(train, eval, m.config.dt)
    }

    fn extent(&self) -> [f64; 2] {
        self.train[0].extent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cumulative spend, initial labels included.
    pub spent: u64,
    pub labeled_actors: usize,
    pub labeled_scenes: usize,
    /// Scenes touched for the first time in this iteration.
    pub new_scenes: usize,
    pub final_train_loss: Option<f64>,
    pub report: EvalReport,
    /// Statistics of the cumulative labeled set.
    pub stats: SelectionStats,
}

/// Loop state after a completed iteration (0 = initial labeling).
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub iteration: usize,
    pub pool: PoolState,
    /// Index 0 holds the initial labeling.
    pub plans: Vec<QueryPlan>,
    pub records: Vec<IterationRecord>,
    pub params: Option<ModelParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    iteration: usize,
    pool: PoolState,
    plans: Vec<QueryPlan>,
    records: Vec<IterationRecord>,
    has_model: bool,
}

/// Header stored next to the raw weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    arch: Architecture,
    n_weights: usize,
    encoding: String,
}

fn labeled_dataset<'a>(pools: &'a Pools, pool: &'a PoolState) -> Vec<TrainExample<'a>> {
    pools
        .train
        .iter()
        .filter_map(|s| {
            let st = pool.state(s.id);
            st.any_labeled().then_some(TrainExample { scene: s, state: st })
        })
        .collect()
}

fn retrain(cfg: &RunConfig, pools: &Pools, pool: &PoolState, prev: Option<&ModelParams>) -> Result<(ModelParams, Option<f64>)> {
    let data = labeled_dataset(pools, pool);
    let tc = cfg.train_config();
    let (params, log) = match prev {
        Some(p) if cfg.fine_tune => train_from(p.clone(), &data, &pool.grid, &tc)?,
        _ => train(&cfg.model, &data, &pool.grid, &tc)?,
    };
    Ok((params, log.epoch_loss.last().copied()))
}

fn cumulative_stats(cfg: &RunConfig, pools: &Pools, pool: &PoolState) -> Result<SelectionStats> {
    let pairs = pools.train.iter().flat_map(|s| {
        let st = pool.state(s.id);
        s.actors
            .iter()
            .filter(move |a| st.labeled_actor_ids.contains(&a.id))
            .map(move |a| (s, a))
    });
    selection_stats(pairs, pools.dt, &cfg.stats)
}

fn initial_state(cfg: &RunConfig, pools: &Pools) -> Result<RunState> {
    cfg.validate()?;
    let grid = cfg.selection_grid(pools.extent())?;
    let mut pool = PoolState::new(&pools.train, grid);
    let mut rng = stream(cfg.seed, Domain::InitialLabels, 0);
    let plan = if cfg.method.partial_initial() {
        random_regions(&mut pool, &pools.train, cfg.initial_budget, cfg.initial_density, &cfg.cost, &mut rng, 0)?
    } else {
        random_scenes(&mut pool, &pools.train, cfg.initial_budget, &cfg.cost, &mut rng, 0)?
    };
    let params = if cfg.method.needs_model_for_selection() && pool.labeled_actor_count() > 0 {
        Some(retrain(cfg, pools, &pool, None)?.0)
    } else {
        None
    };
    Ok(RunState {
        config: cfg.clone(),
        iteration: 0,
        pool,
        plans: vec![plan],
        records: Vec::new(),
        params,
    })
}

fn select(state: &mut RunState, pools: &Pools, iteration: usize) -> Result<(QueryPlan, Option<Vec<SceneScores>>)> {
    let cfg = &state.config;
    let mut rng = stream(cfg.seed, Domain::Selection, iteration as u64);
    let need_model = || {
        state
            .params
            .clone()
            .ok_or_else(|| Error::InvalidInput("selection needs a trained model".into()))
    };
    match cfg.method {
        Method::FineGrained | Method::CoarseGrained => {
            let params = need_model()?;
            let score_cfg = ScoreConfig {
                cost_aware: cfg.cost_aware,
                ..cfg.score
            };
            let scores = score_pool(&params, &pools.train, &state.pool, cfg.criterion(), &score_cfg)?;
            let gcfg = GreedyConfig {
                budget: cfg.budget,
                min_actors: if cfg.method == Method::CoarseGrained { 0 } else { cfg.min_actors },
                mode: cfg.budget_mode,
                scene_rank: cfg.scene_rank,
                cost: cfg.cost,
            };
            let plan = greedy_select(&mut state.pool, &pools.train, &scores, &gcfg, iteration)?;
            Ok((plan, Some(scores)))
        }
        Method::RandomScenes => Ok((
            random_scenes(&mut state.pool, &pools.train, cfg.budget, &cfg.cost, &mut rng, iteration)?,
            None,
        )),
        Method::RandomRegions => Ok((
            random_regions(&mut state.pool, &pools.train, cfg.budget, cfg.density, &cfg.cost, &mut rng, iteration)?,
            None,
        )),
        Method::Coreset => {
            let params = need_model()?;
            let points: Vec<(u64, Vec<f64>)> = pools
                .train
                .par_iter()
                .map(|s| Ok((s.id, forward_trunk(&params, s)?.mean_hidden())))
                .collect::<Result<_>>()?;
            let labeled: BTreeSet<u64> = state.pool.labeled_scene_ids().into_iter().collect();
            let by_id: BTreeMap<u64, &Scene> = pools.train.iter().map(|s| (s.id, s)).collect();
            let pool = &state.pool;
            let order = coreset_select(&points, &labeled, cfg.budget, |id| {
                let st = pool.state(id);
                let n = by_id[&id]
                    .actors
                    .iter()
                    .filter(|a| !st.labeled_actor_ids.contains(&a.id))
                    .count() as u64;
                cfg.cost.per_actor * n + cfg.cost.per_region * pool.grid.len() as u64
            });
            Ok((
                query_whole_scenes(&mut state.pool, &pools.train, &order, cfg.budget, &cfg.cost, iteration)?,
                None,
            ))
        }
    }
}

fn step(state: &mut RunState, pools: &Pools, out: Option<&Path>) -> Result<()> {
    let i = state.iteration + 1;
    let before: BTreeSet<u64> = state.pool.labeled_scene_ids().into_iter().collect();
    let (plan, scores) = select(state, pools, i)?;
    if plan.exhausted {
        log::warn!("iteration {i}: pool exhausted after spending {}", plan.spent);
    }
    if let (Some(dir), Some(scores), true) = (out, &scores, state.config.dump_scores) {
        write_score_dump(&dir.join(SCORES_DIR).join(format!("iter_{i:03}.csv")), scores)?;
    }
    let (params, loss) = retrain(&state.config, pools, &state.pool, state.params.as_ref())?;
    let report = evaluate(&params, &pools.eval, pools.dt, &state.config.eval)?;
    let stats = cumulative_stats(&state.config, pools, &state.pool)?;
    let after = state.pool.labeled_scene_ids();
    let record = IterationRecord {
        iteration: i,
        spent: state.pool.spent,
        labeled_actors: state.pool.labeled_actor_count(),
        labeled_scenes: after.len(),
        new_scenes: after.iter().filter(|id| !before.contains(id)).count(),
        final_train_loss: loss,
        report,
        stats,
    };
    log::info!(
        "{} seed {} iteration {i}: spent {} actors {} scenes {} mAP {:?} meanADE {:?}",
        state.config.method.name(),
        state.config.seed,
        record.spent,
        record.labeled_actors,
        record.labeled_scenes,
        record.report.map,
        record.report.mean_ade
    );
    state.plans.push(plan);
    state.records.push(record);
    state.params = Some(params);
    state.iteration = i;
    Ok(())
}

/// Runs (or continues) the loop until iteration `cfg.iterations`, or until
/// `stop_after` when given. Artifacts go to `out` when given.
pub fn run_with(
    cfg: &RunConfig,
    pools: &Pools,
    out: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<RunState> {
    let mut state = initial_state(cfg, pools)?;
    if let Some(dir) = out {
        write_json(&dir.join(CONFIG_FILE), cfg)?;
        write_outputs(dir, &state)?;
        write_checkpoint(dir, &state)?;
    }
    continue_run(&mut state, pools, out, stop_after)?;
    Ok(state)
}

fn continue_run(state: &mut RunState, pools: &Pools, out: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let last = stop_after.map_or(state.config.iterations, |s| s.min(state.config.iterations));
    while state.iteration < last {
        step(state, pools, out)?;
        if let Some(dir) = out {
            write_outputs(dir, state)?;
            write_checkpoint(dir, state)?;
        }
    }
    Ok(())
}

/// Loads pools from the configured paths and runs into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunState> {
    let pools = Pools::load(cfg)?;
    run_with(cfg, &pools, Some(out), None)
}

/// Continues a run directory from its latest checkpoint.
pub fn resume(out: &Path) -> Result<RunState> {
    let cfg: RunConfig = read_json(&out.join(CONFIG_FILE))?;
    let pools = Pools::load(&cfg)?;
    resume_with(out, &pools, None)
}

pub fn resume_with(out: &Path, pools: &Pools, stop_after: Option<usize>) -> Result<RunState> {
    let cfg: RunConfig = read_json(&out.join(CONFIG_FILE))?;
    cfg.validate()?;
    let mut state = load_checkpoint(out, &cfg)?;
    continue_run(&mut state, pools, Some(out), stop_after)?;
    Ok(state)
}

fn checkpoint_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("iter_{iteration:03}"))
}

fn write_checkpoint(out: &Path, state: &RunState) -> Result<()> {
    let dir = checkpoint_dir(out, state.iteration);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(p) = &state.params {
        write_model(&dir, p)?;
    }
    let ck = Checkpoint {
        iteration: state.iteration,
        pool: state.pool.clone(),
        plans: state.plans.clone(),
        records: state.records.clone(),
        has_model: state.params.is_some(),
    };
    // state.json goes last and marks the checkpoint complete
    write_atomic(&dir.join("state.json"), &serde_json::to_vec(&ck)?)
}

/// Writes `model.json` (architecture header) and `model.bin` (little-endian f64).
pub fn write_model(dir: &Path, params: &ModelParams) -> Result<()> {
    let header = ModelHeader {
        arch: params.arch.clone(),
        n_weights: params.weights.len(),
        encoding: "f64-le".into(),
    };
    let bytes: Vec<u8> = params.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    write_atomic(&dir.join("model.bin"), &bytes)?;
    write_json(&dir.join("model.json"), &header)
}

pub fn read_model(dir: &Path) -> Result<ModelParams> {
    let header: ModelHeader = read_json(&dir.join("model.json"))?;
    if header.encoding != "f64-le" {
        return Err(Error::Corrupt(format!("unknown weight encoding {:?}", header.encoding)));
    }
    let path = dir.join("model.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != header.n_weights * 8 || header.n_weights != header.arch.num_params() {
        return Err(Error::Corrupt(format!("{} does not match its header", path.display())));
    }
    let weights = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ModelParams {
        arch: header.arch,
        weights,
    })
}

/// Latest complete checkpoint iteration in a run directory.
pub fn latest_checkpoint(out: &Path) -> Result<Option<usize>> {
    let dir = out.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("iter_").and_then(|n| n.parse::<usize>().ok()) {
            if entry.path().join("state.json").exists() {
                best = best.max(Some(n));
            }
        }
    }
    Ok(best)
}

fn load_checkpoint(out: &Path, cfg: &RunConfig) -> Result<RunState> {
    let i = latest_checkpoint(out)?
        .ok_or_else(|| Error::Corrupt(format!("no checkpoint under {}", out.display())))?;
    let dir = checkpoint_dir(out, i);
    let ck: Checkpoint = read_json(&dir.join("state.json"))?;
    let params = if ck.has_model { Some(read_model(&dir)?) } else { None };
    Ok(RunState {
        config: cfg.clone(),
        iteration: ck.iteration,
        pool: ck.pool,
        plans: ck.plans,
        records: ck.records,
        params,
    })
}

/// Model of the latest checkpoint of a run directory.
pub fn latest_model(out: &Path) -> Result<ModelParams> {
    let i = latest_checkpoint(out)?
        .ok_or_else(|| Error::Corrupt(format!("no checkpoint under {}", out.display())))?;
    read_model(&checkpoint_dir(out, i))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn queries_jsonl(plans: &[QueryPlan]) -> Result<String> {
    let mut s = String::new();
    for q in plans.iter().flat_map(|p| &p.queries) {
        s.push_str(&serde_json::to_string(q)?);
        s.push('\n');
    }
    Ok(s)
}

fn eval_header() -> String {
    let mut s = String::from("map,mean_ade,min_ade,recall,n_gt,n_detections,n_matched");
    for a in Action::ALL {
        let _ = write!(s, ",ade_{0},n_{0}", a.name());
    }
    s
}

fn eval_cells(e: &EvalReport) -> String {
    let mut s = format!(
        "{},{},{},{},{},{},{}",
        opt(e.map),
        opt(e.mean_ade),
        opt(e.min_ade),
        opt(e.recall),
        e.n_gt,
        e.n_detections,
        e.n_matched
    );
    for b in &e.per_action {
        let _ = write!(s, ",{},{}", opt(b.mean_ade), b.count);
    }
    s
}

/// Evaluation report as a one-row CSV.
pub fn eval_report_csv(report: &EvalReport) -> String {
    format!("{}\n{}\n", eval_header(), eval_cells(report))
}

pub fn metrics_csv(records: &[IterationRecord]) -> String {
    let mut s = format!(
        "iteration,spent,labeled_actors,labeled_scenes,new_scenes,{},final_train_loss\n",
        eval_header()
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.spent,
            r.labeled_actors,
            r.labeled_scenes,
            r.new_scenes,
            eval_cells(&r.report),
            opt(r.final_train_loss)
        );
    }
    s
}

fn bin_labels(prefix: &str, edges: &[f64]) -> Vec<String> {
    edges
        .windows(2)
        .map(|w| format!("{prefix}[{},{})", w[0], w[1]))
        .collect()
}

/// One row per iteration; histogram columns are named by their bin edges.
pub fn stats_csv(records: &[IterationRecord], cfg: &StatsConfig) -> String {
    let mut cols: Vec<String> = [
        "iteration",
        "n_actors",
        "nonstationary_fraction",
        "mean_speed",
        "mean_distance",
    ]
    .iter()
    .map(|c| c.to_string())
    .collect();
    cols.extend(Action::ALL.iter().map(|a| format!("n_{}", a.name())));
    cols.extend(bin_labels("speed", &cfg.speed_edges));
    cols.extend(bin_labels("distance", &cfg.distance_edges));
    cols.extend(bin_labels("points", &cfg.point_edges));
    let mut s = cols.join(",");
    s.push('\n');
    for r in records {
        let st = &r.stats;
        let mut row = vec![
            r.iteration.to_string(),
            st.n_actors.to_string(),
            opt(st.nonstationary_fraction()),
            opt(st.mean_speed),
            opt(st.mean_distance),
        ];
        row.extend(st.actions.iter().map(|c| c.to_string()));
        for h in [&st.speed, &st.distance, &st.points] {
            row.extend(h.counts.iter().map(|c| c.to_string()));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn score_dump_csv(scores: &[SceneScores]) -> String {
    let mut s = String::from("scene_id,h,w,S,C_hat,V\n");
    for sc in scores {
        for r in &sc.regions {
            let _ = writeln!(s, "{},{},{},{},{},{}", sc.scene_id, r.h, r.w, r.score, r.est_cost, r.value);
        }
    }
    s
}

fn write_score_dump(path: &Path, scores: &[SceneScores]) -> Result<()> {
    write_atomic(path, score_dump_csv(scores).as_bytes())
}

#[derive(Serialize)]
struct StatsEntry<'a> {
    iteration: usize,
    stats: &'a SelectionStats,
}

fn write_outputs(dir: &Path, state: &RunState) -> Result<()> {
    write_atomic(&dir.join(QUERIES_FILE), queries_jsonl(&state.plans)?.as_bytes())?;
    write_atomic(&dir.join(METRICS_CSV), metrics_csv(&state.records).as_bytes())?;
    write_atomic(&dir.join(STATS_CSV), stats_csv(&state.records, &state.config.stats).as_bytes())?;
    write_json(&dir.join(METRICS_JSON), &state.records)?;
    let stats: Vec<StatsEntry> = state
        .records
        .iter()
        .map(|r| StatsEntry {
            iteration: r.iteration,
            stats: &r.stats,
        })
        .collect();
    write_json(&dir.join(STATS_JSON), &stats)
}

/// Mean and standard error over runs that report a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    let n = v.len();
    if n == 0 {
        return Summary {
            n,
            mean: None,
            stderr: None,
        };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let stderr = (n > 1).then(|| {
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Summary {
        n,
        mean: Some(mean),
        stderr,
    }
}

/// Per-iteration records of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub iteration: usize,
    pub spent: Summary,
    pub labeled_actors: Summary,
    pub labeled_scenes: Summary,
    pub map: Summary,
    pub mean_ade: Summary,
    pub min_ade: Summary,
    /// Straight, left, right, stationary.
    pub ade_by_action: [Summary; 4],
    pub nonstationary_fraction: Summary,
    pub mean_distance: Summary,
}

/// Mean ± stderr per (method, iteration). Input order does not matter.
pub fn aggregate(runs: &[RunSummary]) -> Vec<AggregateRow> {
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by_key(|r| (r.method, r.seed));
    let mut groups: BTreeMap<(Method, usize), Vec<&IterationRecord>> = BTreeMap::new();
    for r in sorted {
        for rec in &r.records {
            groups.entry((r.method, rec.iteration)).or_default().push(rec);
        }
    }
    groups
        .into_iter()
        .map(|((method, iteration), recs)| {
            let f = |g: &dyn Fn(&IterationRecord) -> Option<f64>| summarize(&recs.iter().map(|r| g(r)).collect::<Vec<_>>());
            AggregateRow {
                method,
                iteration,
                spent: f(&|r| Some(r.spent as f64)),
                labeled_actors: f(&|r| Some(r.labeled_actors as f64)),
                labeled_scenes: f(&|r| Some(r.labeled_scenes as f64)),
                map: f(&|r| r.report.map),
                mean_ade: f(&|r| r.report.mean_ade),
                min_ade: f(&|r| r.report.min_ade),
                ade_by_action: std::array::from_fn(|k| f(&|r| r.report.per_action[k].mean_ade)),
                nonstationary_fraction: f(&|r| r.stats.nonstationary_fraction()),
                mean_distance: f(&|r| r.stats.mean_distance),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<AggregateRow>,
}

impl Comparison {
    pub fn row(&self, method: Method, iteration: usize) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.method == method && r.iteration == iteration)
    }
}

/// Runs every (method, seed) pair from `base` on shared pools.
pub fn compare_methods(base: &RunConfig, methods: &[Method], seeds: &[u64], pools: &Pools) -> Result<Comparison> {
    let mut jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    jobs.sort();
    jobs.dedup();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            let cfg = RunConfig {
                seed,
                ..base.with_method(method)
            };
            let state = run_with(&cfg, pools, None, None)?;
            Ok(RunSummary {
                method,
                seed,
                records: state.records,
            })
        })
        .collect::<Result<_>>()?;
    let rows = aggregate(&runs);
    Ok(Comparison { runs, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub density: f64,
    pub seed: u64,
    pub spent: u64,
    pub labeled_actors: usize,
    pub labeled_scenes: usize,
    pub report: EvalReport,
}

/// Random-region datasets at a fixed budget for each density and seed,
/// each trained from scratch and evaluated.
pub fn density_experiment(
    base: &RunConfig,
    densities: &[f64],
    seeds: &[u64],
    budget: u64,
    pools: &Pools,
) -> Result<Vec<DensityRow>> {
    base.model.validate()?;
    if densities.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::config("densities", "must lie in (0, 1]"));
    }
    let grid = Grid::new(pools.extent(), base.grid[0], base.grid[1])?;
    let jobs: Vec<(f64, u64)> = densities
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    jobs.par_iter()
        .map(|&(density, seed)| {
            let cfg = RunConfig {
                seed,
                ..base.clone()
            };
            let mut pool = PoolState::new(&pools.train, grid);
            let mut rng = stream(seed, Domain::InitialLabels, 0);
            random_regions(&mut pool, &pools.train, budget, density, &cfg.cost, &mut rng, 0)?;
            let (params, _) = retrain(&cfg, pools, &pool, None)?;
            let report = evaluate(&params, &pools.eval, pools.dt, &cfg.eval)?;
            log::info!(
                "density {density} seed {seed}: actors {} mAP {:?} meanADE {:?}",
                pool.labeled_actor_count(),
                report.map,
                report.mean_ade
            );
            Ok(DensityRow {
                density,
                seed,
                spent: pool.spent,
                labeled_actors: pool.labeled_actor_count(),
                labeled_scenes: pool.labeled_scene_ids().len(),
                report,
            })
        })
        .collect()
}

/// Seed-mean mAP and meanADE per density, ascending density.
pub fn density_summary(rows: &[DensityRow]) -> Vec<(f64, Summary, Summary)> {
    let mut ds: Vec<f64> = rows.iter().map(|r| r.density).collect();
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    ds.into_iter()
        .map(|d| {
            let mut sel: Vec<&DensityRow> = rows.iter().filter(|r| r.density == d).collect();
            sel.sort_by_key(|r| r.seed);
            let map: Vec<_> = sel.iter().map(|r| r.report.map).collect();
            let ade: Vec<_> = sel.iter().map(|r| r.report.mean_ade).collect();
            (d, summarize(&map), summarize(&ade))
        })
        .collect()
}

/// Reads the summary of a finished (or partial) run directory.
pub fn load_run_summary(dir: &Path) -> Result<RunSummary> {
    let cfg: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    let records: Vec<IterationRecord> = read_json(&dir.join(METRICS_JSON))?;
    Ok(RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        records,
    })
}

fn summary_cells(s: &Summary) -> String {
    format!("{},{}", opt(s.mean), opt(s.stderr))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("method,iteration,n_runs,spent_mean,spent_stderr,labeled_actors_mean,labeled_actors_stderr,labeled_scenes_mean,labeled_scenes_stderr,map_mean,map_stderr,mean_ade_mean,mean_ade_stderr,min_ade_mean,min_ade_stderr");
    for a in Action::ALL {
        let _ = write!(s, ",ade_{0}_mean,ade_{0}_stderr", a.name());
    }
    s.push_str(",nonstationary_fraction_mean,nonstationary_fraction_stderr,mean_distance_mean,mean_distance_stderr\n");
    for r in rows {
        let mut cells = vec![
            r.method.name().to_string(),
            r.iteration.to_string(),
            r.spent.n.to_string(),
        ];
        for x in [&r.spent, &r.labeled_actors, &r.labeled_scenes, &r.map, &r.mean_ade, &r.min_ade] {
            cells.push(summary_cells(x));
        }
        for x in &r.ade_by_action {
            cells.push(summary_cells(x));
        }
        cells.push(summary_cells(&r.nonstationary_fraction));
        cells.push(summary_cells(&r.mean_distance));
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Gnuplot data for one metric: a block per method, separated by two blank
/// lines, columns `labeled_actors_mean value_mean value_stderr iteration`.
pub fn plot_data(rows: &[AggregateRow], metric: &str, get: impl Fn(&AggregateRow) -> &Summary) -> String {
    let mut s = format!("# {metric} vs labeled actors\n# columns: labeled_actors mean stderr iteration\n");
    let methods: BTreeSet<Method> = rows.iter().map(|r| r.method).collect();
    for (k, m) in methods.iter().enumerate() {
        if k > 0 {
            s.push_str("\n\n");
        }
        let _ = writeln!(s, "# index {k}: {}", m.name());
        for r in rows.iter().filter(|r| r.method == *m) {
            let v = get(r);
            let _ = writeln!(
                s,
                "{} {} {} {}",
                opt(r.labeled_actors.mean),
                v.mean.map_or("nan".into(), |x| x.to_string()),
                v.stderr.map_or("nan".into(), |x| x.to_string()),
                r.iteration
            );
        }
    }
    s
}

/// Writes `summary.csv`, `summary.json` and one `.dat` per metric.
pub fn write_report(out: &Path, rows: &[AggregateRow]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("summary.csv"), aggregate_csv(rows).as_bytes())?;
    write_json(&out.join("summary.json"), &rows)?;
    let metrics: Vec<(String, Box<dyn Fn(&AggregateRow) -> &Summary>)> = vec![
        ("map".into(), Box::new(|r| &r.map)),
        ("mean_ade".into(), Box::new(|r| &r.mean_ade)),
        ("min_ade".into(), Box::new(|r| &r.min_ade)),
        ("labeled_scenes".into(), Box::new(|r| &r.labeled_scenes)),
        ("nonstationary_fraction".into(), Box::new(|r| &r.nonstationary_fraction)),
        ("mean_distance".into(), Box::new(|r| &r.mean_distance)),
    ];
    for (name, get) in &metrics {
        write_atomic(&out.join(format!("{name}.dat")), plot_data(rows, name, get).as_bytes())?;
    }
    for (k, a) in Action::ALL.iter().enumerate() {
        let name = format!("ade_{}", a.name());
        let data = plot_data(rows, &name, |r| &r.ade_by_action[k]);
        write_atomic(&out.join(format!("{name}.dat")), data.as_bytes())?;
    }
    Ok(())
}
