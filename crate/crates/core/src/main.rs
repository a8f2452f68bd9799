use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pnp_active::harness::{
    aggregate, eval_report_csv, latest_model, load_run_summary, resume, run, write_report, Method, Pools, RunConfig,
    CONFIG_FILE,
};
use pnp_active::metrics::evaluate;
use pnp_active::persist::{read_json, read_pool, write_atomic, write_json, write_pool};
use pnp_active::scenegen::{generate_pool, GenConfig};
use pnp_active::{Error, Result};

/// Worker threads for scoring and evaluation. Unset means one per core.
const WORKERS_ENV: &str = "PNP_WORKERS";

#[derive(Parser)]
#[command(name = "pnp-active", version, about = "Cost-aware active learning simulator for perception and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene pool.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the active learning loop.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in `out`.
        #[arg(long)]
        resume: bool,
        /// Override the configured method.
        #[arg(long)]
        method: Option<String>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-iteration score dumps under `out/scores/`.
        #[arg(long)]
        dump_scores: bool,
    },
    /// Evaluate the latest checkpoint of a run on its evaluation pool.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Evaluate on another pool instead.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Aggregate runs into CSV tables and plot data.
    Report {
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(WORKERS_ENV, format!("expected a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(WORKERS_ENV, e.to_string()))
}

fn cmd_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg: GenConfig = read_json(config)?;
    let scenes = generate_pool(&cfg)?;
    let m = write_pool(out, &cfg, &scenes)?;
    println!("wrote {} scenes to {} (sha256 {})", m.n_scenes, out.display(), m.content_hash);
    Ok(())
}

fn cmd_run(
    config: Option<&Path>,
    out: &Path,
    resume_run: bool,
    method: Option<&str>,
    seed: Option<u64>,
    dump_scores: bool,
) -> Result<()> {
    let state = if resume_run {
        if config.is_some() || method.is_some() || seed.is_some() {
            return Err(Error::config("resume", "a resumed run uses its stored config.json"));
        }
        resume(out)?
    } else {
        let path = config.ok_or_else(|| Error::config("config", "required unless --resume"))?;
        let mut cfg: RunConfig = read_json(path)?;
        if let Some(m) = method {
            cfg = cfg.with_method(Method::parse(m)?);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.dump_scores |= dump_scores;
        if out.join(CONFIG_FILE).exists() {
            return Err(Error::config("out", format!("{} already holds a run; use --resume", out.display())));
        }
        run(&cfg, out)?
    };
    if let Some(r) = state.records.last() {
        println!(
            "iteration {}: spent {} actors {} mAP {} meanADE {}",
            r.iteration,
            r.spent,
            r.labeled_actors,
            r.report.map.map_or("-".into(), |v| format!("{v:.4}")),
            r.report.mean_ade.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn cmd_eval(run_dir: &Path, pool: Option<&Path>) -> Result<()> {
    let cfg: RunConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    let params = latest_model(run_dir)?;
    let (manifest, scenes) = read_pool(pool.unwrap_or(&cfg.eval_pool))?;
    if pool.is_some() {
        // held-out discipline still applies to ad-hoc pools
        let (_, train) = read_pool(&cfg.pool)?;
        Pools::new(train, scenes.clone(), manifest.config.dt)?;
    }
    let report = evaluate(&params, &scenes, manifest.config.dt, &cfg.eval)?;
    write_json(&run_dir.join("eval.json"), &report)?;
    let csv = eval_report_csv(&report);
    write_atomic(&run_dir.join("eval.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut summaries = Vec::new();
    for dir in runs {
        if dir.join(CONFIG_FILE).exists() {
            summaries.push(load_run_summary(dir)?);
        } else {
            log::warn!("skipping {}: not a run directory", dir.display());
        }
    }
    if summaries.is_empty() {
        return Err(Error::config("runs", "no run directories found"));
    }
    let rows = aggregate(&summaries);
    write_report(out, &rows)?;
    println!("aggregated {} runs into {}", summaries.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_workers().and_then(|()| match &cli.command {
        Command::Gen { config, out } => cmd_gen(config, out),
        Command::Run {
            config,
            out,
            resume,
            method,
            seed,
            dump_scores,
        } => cmd_run(config.as_deref(), out, *resume, method.as_deref(), *seed, *dump_scores),
        Command::Eval { run, pool } => cmd_eval(run, pool.as_deref()),
        Command::Report { runs, out } => cmd_report(runs, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
