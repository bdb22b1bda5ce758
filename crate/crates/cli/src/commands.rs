use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use trcdag::datagen::{generate as simulate, load_external, Dataset, ModelTag};
use trcdag::graph::{graph_metrics, AdjacencyMatrix, EdgeList, GraphMetrics};
use trcdag::pipeline::{
    evaluate_periodic, periodic_csv, prune_output, run_procedure, RunPaths, RunRecord,
    TrainingSetup,
};
use trcdag::rlopt::Algorithm;
use trcdag::scoring::{BicVariant, Regressor, Scorer};
use trcdag::Error;

use crate::config::RunConfig;
use crate::{
    AlgoArg, ConfigArgs, EvalArgs, GenerateArgs, GridArgs, ModelArg, RegressorArg, RunArgs,
    TrainArgs,
};

/// An error with the process exit code it maps to.
pub struct CmdError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CmdResult<T = ()> = std::result::Result<T, CmdError>;

fn usage(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: 2,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: 1,
        error: e.into(),
    }
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn json<T: Serialize>(value: &T) -> CmdResult<String> {
    serde_json::to_string_pretty(value).map_err(runtime)
}

pub fn generate(args: &GenerateArgs) -> CmdResult {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref()).map_err(usage)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    let g = &mut cfg.generate;
    g.n = args.n;
    g.model = match args.model {
        ModelArg::LinearGaussian => ModelTag::LinearGaussian,
        ModelArg::Lingam => ModelTag::Lingam,
        ModelArg::Quadratic => ModelTag::Quadratic,
        ModelArg::Gp => ModelTag::Gp,
    };
    if let Some(m) = args.samples {
        g.samples = m;
    }
    g.validate().map_err(usage)?;
    let generated = simulate(g).map_err(runtime)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(runtime)?;
    let data = args.out.join("data.csv");
    let sidecar = generated.save(g, &data).map_err(runtime)?;
    let truth = args.out.join("truth.json");
    if let Some(t) = generated.dataset.truth() {
        t.save(&truth).map_err(runtime)?;
    }
    println!(
        "{}",
        serde_json::json!({ "data": data, "sidecar": sidecar, "truth": truth })
    );
    Ok(())
}

/// Applies command-line overrides to a loaded configuration.
fn configure(args: &RunArgs) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref()).map_err(usage)?;
    if let Some(s) = args.seed {
        cfg.set_seed(s);
    }
    if let Some(p) = &args.data {
        cfg.paths.data = Some(p.clone());
    }
    if let Some(p) = &args.truth {
        cfg.paths.truth = Some(p.clone());
    }
    if let Some(p) = &args.out {
        cfg.paths.out_dir = Some(p.clone());
    }
    if let Some(a) = args.algo {
        cfg.procedure.algorithm = match a {
            AlgoArg::Reinforce => Algorithm::Reinforce,
            AlgoArg::Psr => Algorithm::Psr,
            AlgoArg::Trc => Algorithm::Trc,
            AlgoArg::Ppo => Algorithm::Ppo,
        };
    }
    if let Some(b) = args.bic {
        cfg.score.bic = if b == 1 {
            BicVariant::Bic1
        } else {
            BicVariant::Bic2
        };
    }
    if let Some(r) = args.regressor {
        cfg.score.regressor = regressor(r);
    }
    if let Some(t) = args.iters {
        cfg.procedure.iterations = t;
    }
    if let Some(b) = args.batch_size {
        cfg.procedure.batch_size = b;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn regressor(r: RegressorArg) -> Regressor {
    match r {
        RegressorArg::Linear => Regressor::Linear,
        RegressorArg::Quadratic => Regressor::Quadratic,
        RegressorArg::Gp => Regressor::Gp,
    }
}

/// Truth graph stored in the `<data>.json` sidecar written by `generate`, if any.
fn sidecar_truth(data: &Path) -> CmdResult<Option<AdjacencyMatrix>> {
    let side = data.with_extension("json");
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(usage)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(usage)?;
    match value.get("truth") {
        Some(t) if !t.is_null() => {
            let list: EdgeList = serde_json::from_value(t.clone()).map_err(usage)?;
            Ok(Some(list.to_matrix().map_err(usage)?))
        }
        _ => Ok(None),
    }
}

fn load_dataset(cfg: &RunConfig) -> CmdResult<Dataset> {
    let data = cfg.paths.data.as_deref().ok_or_else(|| {
        usage(anyhow!(
            "no dataset given (--data, TRCDAG_DATA or paths.data)"
        ))
    })?;
    let ds = load_external(data, cfg.paths.truth.as_deref(), cfg.standardize)
        .with_context(|| format!("loading {}", data.display()))
        .map_err(usage)?;
    if ds.truth().is_some() {
        return Ok(ds);
    }
    match sidecar_truth(data)? {
        Some(t) => ds.with_truth(t).map_err(usage),
        None => Ok(ds),
    }
}

fn out_dir(cfg: &RunConfig) -> CmdResult<PathBuf> {
    let dir = cfg
        .paths
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    Ok(dir)
}

#[derive(Serialize)]
struct Diagnostic {
    status: &'static str,
    iteration: Option<u64>,
    error: String,
    checkpoint: Option<PathBuf>,
}

/// Runs one training run; failures write `abort.json` into `dir`.
fn run_once(
    ds: &Dataset,
    setup: &TrainingSetup,
    paths: &RunPaths,
    dir: &Path,
) -> CmdResult<RunRecord> {
    run_procedure(ds, setup, paths).map_err(|e| {
        let diag = match &e {
            Error::Aborted {
                iteration,
                checkpoint,
                ..
            } => Diagnostic {
                status: "aborted",
                iteration: Some(*iteration),
                error: e.to_string(),
                checkpoint: checkpoint.clone(),
            },
            _ => Diagnostic {
                status: "failed",
                iteration: None,
                error: e.to_string(),
                checkpoint: None,
            },
        };
        if let Ok(text) = serde_json::to_string_pretty(&diag) {
            // The run error is what gets reported; a failed diagnostic write is secondary.
            let _ = fs::write(dir.join("abort.json"), &text);
            eprintln!("{text}");
        }
        runtime(e)
    })
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = configure(&args.run)?;
    let ds = load_dataset(&cfg)?;
    let dir = out_dir(&cfg)?;
    let setup = cfg.setup();
    let paths = RunPaths {
        log: Some(dir.join("log.jsonl")),
        checkpoint_dir: Some(dir.join("checkpoints")),
    };
    let rec = run_once(&ds, &setup, &paths, &dir)?;
    let report = rec.report(&setup);
    write(&dir.join("report.json"), &json(&report)?)?;
    if let Some(g) = &rec.output {
        g.save(&dir.join("graph.json")).map_err(runtime)?;
    }
    if let Some(truth) = ds.truth() {
        let series = evaluate_periodic(&rec, truth, setup.procedure.eval_every).map_err(runtime)?;
        write(
            &dir.join("periodic.csv"),
            &periodic_csv(&series).map_err(runtime)?,
        )?;
    }
    println!(
        "{}",
        serde_json::json!({
            "report": dir.join("report.json"),
            "iterations": report.iterations,
            "shd": report.metrics_post_prune.map(|m: GraphMetrics| m.shd),
        })
    );
    Ok(())
}

/// Mean and spread of batch rewards over the last tenth of a run.
fn tail_rewards(rec: &RunRecord) -> (f64, f64) {
    let k = (rec.log.len() / 10).max(1).min(rec.log.len());
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let tail = &rec.log[rec.log.len() - k..];
    let mean = tail.iter().map(|l| l.mean_reward).sum::<f64>() / k as f64;
    let std = tail.iter().map(|l| l.reward_std).sum::<f64>() / k as f64;
    (mean, std)
}

fn sorted_unique(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

#[derive(Debug, Serialize)]
struct Cell {
    epsilon: f64,
    delta: f64,
    runs: u64,
    failures: u64,
    mean_reward: f64,
    reward_std: f64,
    mean_shd: f64,
    errors: String,
}

pub fn gridsearch(args: &GridArgs) -> CmdResult {
    let mut cfg = configure(&args.run)?;
    if let Some(e) = &args.epsilons {
        cfg.grid.epsilons = e.clone();
    }
    if let Some(d) = &args.deltas {
        cfg.grid.deltas = d.clone();
    }
    if let Some(s) = args.seeds {
        cfg.grid.seeds = s;
    }
    cfg.validate().map_err(usage)?;
    let ds = load_dataset(&cfg)?;
    let dir = out_dir(&cfg)?;
    let (epsilons, deltas) = (
        sorted_unique(&cfg.grid.epsilons),
        sorted_unique(&cfg.grid.deltas),
    );
    let base_seed = cfg.procedure.seed;
    let mut cells = Vec::new();
    for &eps in &epsilons {
        for &delta in &deltas {
            let cell_dir = dir.join(format!("eps{eps}_delta{delta}"));
            fs::create_dir_all(&cell_dir).map_err(runtime)?;
            let (mut rewards, mut stds, mut shds, mut errors) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for k in 0..cfg.grid.seeds {
                let mut setup = cfg.setup();
                setup.trc.epsilon = eps;
                setup.trc.sigma = delta;
                setup.procedure.seed = base_seed + k;
                let validated = setup.trc.validate().map_err(runtime);
                let result =
                    validated.and_then(|()| run_once(&ds, &setup, &RunPaths::default(), &cell_dir));
                match result {
                    Ok(rec) => {
                        let (m, s) = tail_rewards(&rec);
                        rewards.push(m);
                        stds.push(s);
                        if let Some(mt) = rec.metrics_post_prune {
                            shds.push(mt.shd as f64);
                        }
                    }
                    Err(e) => errors.push(format!("seed {}: {:#}", base_seed + k, e.error)),
                }
            }
            let avg = |v: &[f64]| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            cells.push(Cell {
                epsilon: eps,
                delta,
                runs: cfg.grid.seeds,
                failures: errors.len() as u64,
                mean_reward: avg(&rewards),
                reward_std: avg(&stds),
                mean_shd: avg(&shds),
                errors: errors.join("; "),
            });
        }
    }

    let mut long = csv::Writer::from_writer(Vec::new());
    for c in &cells {
        long.serialize(c).map_err(runtime)?;
    }
    write(
        &dir.join("grid_cells.csv"),
        &String::from_utf8(long.into_inner().map_err(runtime)?).map_err(runtime)?,
    )?;

    let mut table = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["delta".to_string()];
    for eps in &epsilons {
        for col in ["mean", "std", "shd"] {
            header.push(format!("eps={eps} {col}"));
        }
    }
    table.write_record(&header).map_err(runtime)?;
    for (j, delta) in deltas.iter().enumerate() {
        let mut row = vec![delta.to_string()];
        for i in 0..epsilons.len() {
            let c = &cells[i * deltas.len() + j];
            row.extend([c.mean_reward, c.reward_std, c.mean_shd].map(|v| format!("{v:.4}")));
        }
        table.write_record(&row).map_err(runtime)?;
    }
    let text = String::from_utf8(table.into_inner().map_err(runtime)?).map_err(runtime)?;
    write(&dir.join("grid_table.csv"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let estimate = AdjacencyMatrix::load(&args.estimate).map_err(usage)?;
    let truth = AdjacencyMatrix::load(&args.truth).map_err(usage)?;
    if estimate.n() != truth.n() {
        return Err(usage(anyhow!(
            "estimate has {} nodes but the truth has {}",
            estimate.n(),
            truth.n()
        )));
    }
    let mut graph = estimate;
    if args.prune {
        let mut cfg = RunConfig::load_or_default(args.config.as_deref()).map_err(usage)?;
        if let Some(b) = args.bic {
            cfg.score.bic = if b == 1 {
                BicVariant::Bic1
            } else {
                BicVariant::Bic2
            };
        }
        if let Some(r) = args.regressor {
            cfg.score.regressor = regressor(r);
        }
        if let Some(t) = args.threshold {
            cfg.procedure.prune.threshold = Some(t);
        }
        cfg.paths.data = args.data.clone();
        let ds = load_dataset(&cfg)?;
        if ds.n() != graph.n() {
            return Err(usage(anyhow!(
                "data has {} variables but the graph has {} nodes",
                ds.n(),
                graph.n()
            )));
        }
        let mut scorer = Scorer::new(ds, cfg.score.clone()).map_err(runtime)?;
        graph = prune_output(&graph, &mut scorer, &cfg.procedure.prune).map_err(usage)?;
    }
    let metrics = graph_metrics(&graph, &truth).map_err(usage)?;
    println!(
        "{}",
        json(&serde_json::json!({
            "metrics": metrics,
            "correct": metrics.correct_edges,
            "predicted": metrics.predicted_edges,
            "shd": metrics.shd,
            "pruned": args.prune,
            "graph": graph.to_edge_list(),
        }))?
    );
    Ok(())
}

pub fn show_config(args: &ConfigArgs) -> CmdResult {
    let cfg = RunConfig::load_or_default(args.config.as_deref()).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    print!("{}", cfg.to_toml().map_err(runtime)?);
    Ok(())
}
