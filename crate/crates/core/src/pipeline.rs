//! The training procedure: sampling, scoring, optimizer steps, the penalty
//! schedule, best-graph bookkeeping, pruning and reporting.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::SdgatConfig;
use crate::critic::CriticConfig;
use crate::datagen::{draw_state_batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{graph_metrics, AdjacencyMatrix, EdgeList, Fingerprint, GraphMetrics};
use crate::rlopt::{
    train_step, Agent, Algorithm, ClipStats, LogRecord, MovingAverage, ReplayBuffer, Transition,
    TrcConfig,
};
use crate::scoring::{
    fit_predict, Anchors, Regressor, ScoreCache, ScoreConfig, ScoredGraph, Scorer,
};

/// Post-processing applied to the selected DAG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub greedy: bool,
    /// Largest raw-score increase accepted when deleting an edge.
    pub greedy_tolerance: f64,
    /// Coefficient threshold for linear and quadratic regressors; ignored for GP.
    pub threshold: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            greedy: true,
            greedy_tolerance: 0.0,
            threshold: Some(0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcedureConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    /// Iterations between penalty updates.
    pub t_u: u64,
    pub lambda1_init: f64,
    /// Additive increment of λ1.
    pub delta1: f64,
    pub lambda1_cap: f64,
    pub lambda2_init: f64,
    /// Multiplicative factor of λ2.
    pub delta2: f64,
    /// Fixed cap for λ2; when absent the cap is the running upper score bound.
    pub lambda2_cap: Option<f64>,
    pub prune: PruneConfig,
    pub seed: u64,
    /// Stop as soon as the pruned best DAG is within this SHD of the truth.
    pub target_shd: Option<usize>,
    /// Iterations between checkpoints; none are written when absent.
    pub checkpoint_every: Option<u64>,
    /// Interval of the periodic metric series.
    pub eval_every: u64,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        ProcedureConfig {
            iterations: 10_000,
            batch_size: 64,
            algorithm: Algorithm::Trc,
            t_u: 1000,
            lambda1_init: 0.0,
            delta1: 1.0,
            lambda1_cap: 10.0,
            lambda2_init: 1.0,
            delta2: 10.0,
            lambda2_cap: None,
            prune: PruneConfig::default(),
            seed: 0,
            target_shd: None,
            checkpoint_every: None,
            eval_every: 2000,
        }
    }
}

impl ProcedureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_u == 0 {
            return Err(Error::contract("t_u must be at least 1"));
        }
        if !(self.delta1 >= 0.0) {
            return Err(Error::contract("delta1 must be non-negative"));
        }
        if !(self.delta2 > 1.0) {
            return Err(Error::contract("delta2 must exceed 1"));
        }
        if !(self.lambda1_init >= 0.0 && self.lambda1_init <= self.lambda1_cap) {
            return Err(Error::contract("lambda1_init must lie in [0, lambda1_cap]"));
        }
        if !(self.lambda2_init > 0.0) {
            return Err(Error::contract("lambda2_init must be positive"));
        }
        if self.lambda2_cap.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("lambda2_cap must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if self.checkpoint_every == Some(0) || self.eval_every == 0 {
            return Err(Error::contract(
                "checkpoint_every and eval_every must be at least 1",
            ));
        }
        if !(self.prune.greedy_tolerance >= 0.0)
            || self.prune.threshold.is_some_and(|t| !(t >= 0.0))
        {
            return Err(Error::contract(
                "prune tolerance and threshold must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Every configuration a training run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSetup {
    pub score: ScoreConfig,
    pub encoder: SdgatConfig,
    pub critic: CriticConfig,
    pub trc: TrcConfig,
    pub procedure: ProcedureConfig,
}

/// Optional output locations of a run.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    /// JSON-lines training log.
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// One penalty update: λ1 grows additively to its cap, λ2 multiplicatively
/// toward `cap2`. Neither ever decreases.
pub fn update_lambdas(lambda1: f64, lambda2: f64, cfg: &ProcedureConfig, cap2: f64) -> (f64, f64) {
    let l1 = (lambda1 + cfg.delta1).min(cfg.lambda1_cap).max(lambda1);
    let l2 = (lambda2 * cfg.delta2).min(cap2).max(lambda2);
    (l1, l2)
}

/// Best graph in `cache` under `(λ1, λ2)`; ties go to the graph seen first.
pub fn rerank(
    cache: &ScoreCache,
    scorer: &Scorer,
    lambda1: f64,
    lambda2: f64,
) -> Result<Option<ScoredGraph>> {
    let mut best: Option<(f64, &Fingerprint)> = None;
    for (fp, raw) in cache.iter() {
        let r = -(scorer.normalize(raw.bic_raw)
            + lambda1 * raw.cl
            + lambda2 * f64::from(u8::from(raw.ind)));
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, fp));
        }
    }
    best.map(|(_, fp)| {
        let raw = *cache.get(fp).expect("fingerprint taken from the cache");
        Ok(scorer.scored(AdjacencyMatrix::from_fingerprint(fp)?, raw))
    })
    .transpose()
}

/// Everything recorded during one run.
#[derive(Debug)]
pub struct RunRecord {
    /// Best graph under the current penalties, cyclic or not.
    pub best: Option<ScoredGraph>,
    /// Lowest-scoring DAG seen; its reward does not depend on the penalties.
    pub best_dag: Option<ScoredGraph>,
    /// Normalized score of `best_dag`.
    pub bic_min: Option<f64>,
    /// Running upper score bound in normalized units; starts at `BIC_0`.
    pub bic_u: f64,
    pub anchors: Anchors,
    pub lambda1: f64,
    pub lambda2: f64,
    pub log: Vec<LogRecord>,
    /// Every distinct generated graph with its raw score.
    pub cache: ScoreCache,
    /// `(iteration, graph)` each time `best_dag` changed; iterations count completed steps.
    pub best_history: Vec<(u64, AdjacencyMatrix)>,
    pub iterations_run: u64,
    /// First completed iteration at which the pruned best DAG met `target_shd`.
    pub target_reached_at: Option<u64>,
    pub clip: ClipStats,
    /// Pruned output DAG.
    pub output: Option<AdjacencyMatrix>,
    pub metrics_pre_prune: Option<GraphMetrics>,
    pub metrics_post_prune: Option<GraphMetrics>,
    pub wall_clock_secs: f64,
}

/// Sub-seeds of the run seed, one stream per subsystem.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Greedy deletion then optional coefficient thresholding of `graph`.
pub fn prune_output(
    graph: &AdjacencyMatrix,
    scorer: &mut Scorer,
    prune: &PruneConfig,
) -> Result<AdjacencyMatrix> {
    let mut g = graph.clone();
    if prune.greedy {
        g = prune_greedy(&g, scorer, prune.greedy_tolerance)?;
    }
    if let Some(t) = prune.threshold {
        if scorer.config().regressor != Regressor::Gp {
            g = prune_threshold(&g, scorer.dataset(), scorer.config(), t)?;
        }
    }
    Ok(g)
}

fn write_checkpoint(
    dir: &Path,
    agent: &Agent,
    ma: &MovingAverage,
    iteration: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("checkpoint-{iteration:08}.json"));
    fs::write(
        &path,
        serde_json::to_string(&agent.checkpoint(ma, iteration))?,
    )?;
    Ok(path)
}

/// Runs the full procedure on `ds`.
pub fn run_procedure(ds: &Dataset, setup: &TrainingSetup, paths: &RunPaths) -> Result<RunRecord> {
    let start = Instant::now();
    let pc = &setup.procedure;
    pc.validate()?;
    setup.trc.validate()?;
    let mut scorer = Scorer::new(ds.clone(), setup.score.clone())?;
    let bic0 = setup.score.bic0;
    let mut init_rng = stream(pc.seed, 0);
    let mut data_rng = stream(pc.seed, 1);
    let mut act_rng = stream(pc.seed, 2);
    let mut replay_rng = stream(pc.seed, 3);
    let mut agent = Agent::new(
        setup.encoder.clone(),
        setup.critic.clone(),
        &setup.trc,
        &mut init_rng,
    )?;
    let mut buffer = ReplayBuffer::new(10 * pc.batch_size)?;
    let mut ma = MovingAverage::new(setup.trc.alpha_m);
    let mut log_file = match &paths.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut rec = RunRecord {
        best: None,
        best_dag: None,
        bic_min: None,
        bic_u: bic0,
        anchors: scorer.anchors(),
        lambda1: pc.lambda1_init,
        lambda2: pc.lambda2_init,
        log: Vec::new(),
        cache: ScoreCache::new(),
        best_history: Vec::new(),
        iterations_run: 0,
        target_reached_at: None,
        clip: ClipStats::default(),
        output: None,
        metrics_pre_prune: None,
        metrics_post_prune: None,
        wall_clock_secs: 0.0,
    };
    let truth = ds.truth().cloned();

    for t in 0..pc.iterations {
        let states = draw_state_batch(ds, pc.batch_size, setup.encoder.input_depth, &mut data_rng)?;
        let acted = agent.act_batch(&states, &mut act_rng)?;
        let mut online = Vec::with_capacity(states.len());
        let mut dag_changed = false;
        for (s, a) in states.into_iter().zip(acted) {
            let scored = scorer.score(&a.sample.adjacency, &mut rec.cache)?;
            if !(0.0..=bic0).contains(&scored.bic_normalized) {
                return Err(Error::contract(format!(
                    "normalized score {} outside [0, {bic0}]",
                    scored.bic_normalized
                )));
            }
            let reward = scored.reward(rec.lambda1, rec.lambda2);
            if rec
                .best
                .as_ref()
                .is_none_or(|b| reward > b.reward(rec.lambda1, rec.lambda2))
            {
                rec.best = Some(scored.clone());
            }
            if scored.is_dag() && rec.bic_min.is_none_or(|m| scored.bic_normalized < m) {
                rec.bic_min = Some(scored.bic_normalized);
                rec.best_dag = Some(scored.clone());
                dag_changed = true;
            }
            online.push(Transition::new(s, a.sample, a.value, reward, Some(scored)));
        }

        let report = match train_step(
            pc.algorithm,
            &mut agent,
            online,
            &mut buffer,
            &mut ma,
            &setup.trc,
            &mut replay_rng,
        ) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let checkpoint = match &paths.checkpoint_dir {
                    Some(dir) => Some(write_checkpoint(dir, &agent, &ma, t)?),
                    None => None,
                };
                return Err(Error::Aborted {
                    iteration: t,
                    cause: Box::new(e),
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        let done = t + 1;
        rec.iterations_run = done;
        if let Some(c) = report.clip {
            rec.clip.merge(c);
        }
        let line = LogRecord {
            iteration: done,
            mean_reward: report.mean_reward,
            reward_std: report.reward_std,
            actor_loss: report.actor_loss,
            critic_loss: report.critic_loss,
            r_m: report.r_m,
            lambda1: rec.lambda1,
            lambda2: rec.lambda2,
            clip_rate_trc: report.clip.map(|c| c.trc_rate()),
            clip_rate_ppo: report.clip.map(|c| c.ppo_rate()),
            buffer_size: buffer.len(),
        };
        if let Some(f) = &mut log_file {
            serde_json::to_writer(&mut *f, &line)?;
            f.write_all(b"\n")?;
        }
        rec.log.push(line);

        if dag_changed {
            let g = rec
                .best_dag
                .as_ref()
                .expect("set when changed")
                .adjacency
                .clone();
            if let (Some(target), Some(truth), None) =
                (pc.target_shd, &truth, rec.target_reached_at)
            {
                let pruned = prune_output(&g, &mut scorer, &pc.prune)?;
                if graph_metrics(&pruned, truth)?.shd <= target {
                    rec.target_reached_at = Some(done);
                }
            }
            rec.best_history.push((done, g));
        }

        if done % pc.t_u == 0 {
            if let (Some(best), Some(m)) = (&rec.best, rec.bic_min) {
                if best.is_dag() && best.bic_normalized == m {
                    rec.bic_u = rec.bic_u.min(m);
                }
            }
            let cap2 = pc.lambda2_cap.unwrap_or(rec.bic_u);
            let (l1, l2) = update_lambdas(rec.lambda1, rec.lambda2, pc, cap2);
            if (l1, l2) != (rec.lambda1, rec.lambda2) {
                rec.lambda1 = l1;
                rec.lambda2 = l2;
                rec.best = rerank(&rec.cache, &scorer, l1, l2)?;
                buffer.refresh_rewards(l1, l2);
            }
        }
        if let (Some(dir), Some(k)) = (&paths.checkpoint_dir, pc.checkpoint_every) {
            if done % k == 0 {
                write_checkpoint(dir, &agent, &ma, done)?;
            }
        }
        if rec.target_reached_at.is_some() {
            break;
        }
    }
    if let Some(f) = &mut log_file {
        f.flush()?;
    }

    if let Some(best) = &rec.best_dag {
        let out = prune_output(&best.adjacency, &mut scorer, &pc.prune)?;
        if let Some(truth) = &truth {
            rec.metrics_pre_prune = Some(graph_metrics(&best.adjacency, truth)?);
            rec.metrics_post_prune = Some(graph_metrics(&out, truth)?);
        }
        rec.output = Some(out);
    }
    rec.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Refits each node on its parents and drops parents whose largest
/// coefficient magnitude is below `threshold`. GP fits have no coefficients
/// and leave the graph unchanged.
pub fn prune_threshold(
    graph: &AdjacencyMatrix,
    ds: &Dataset,
    cfg: &ScoreConfig,
    threshold: f64,
) -> Result<AdjacencyMatrix> {
    if !graph.is_dag() {
        return Err(Error::contract("pruning needs a DAG"));
    }
    let mut out = graph.clone();
    for j in 0..graph.n() {
        let parents = graph.parents(j);
        if parents.is_empty() {
            continue;
        }
        let Some(strength) = fit_predict(cfg, ds, j, &parents)?.edge_strength else {
            continue;
        };
        for (&p, s) in parents.iter().zip(strength) {
            if s < threshold {
                out.set_edge(p, j, false);
            }
        }
    }
    Ok(out)
}

/// Deletes edges one at a time while the raw score worsens by at most
/// `tolerance`, sweeping until no deletion is accepted.
pub fn prune_greedy(
    graph: &AdjacencyMatrix,
    scorer: &mut Scorer,
    tolerance: f64,
) -> Result<AdjacencyMatrix> {
    if !graph.is_dag() {
        return Err(Error::contract("pruning needs a DAG"));
    }
    let mut g = graph.clone();
    let mut current = scorer.raw_bic(&g)?;
    loop {
        let mut changed = false;
        for (i, j) in g.edges() {
            let mut trial = g.clone();
            trial.set_edge(i, j, false);
            let s = scorer.raw_bic(&trial)?;
            if s <= current + tolerance {
                g = trial;
                current = s;
                changed = true;
            }
        }
        if !changed {
            return Ok(g);
        }
    }
}

/// Metrics of the best DAG at one evaluation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicMetric {
    pub iteration: u64,
    pub shd: usize,
    pub tpr: f64,
    pub fdr: f64,
    pub correct: usize,
    pub predicted: usize,
}

/// Metrics of the best DAG after iterations `k, 2k, …`, ending with the last
/// completed iteration: `⌈T/k⌉` points. Before any DAG is seen the estimate
/// is the empty graph.
pub fn evaluate_periodic(
    record: &RunRecord,
    truth: &AdjacencyMatrix,
    every: u64,
) -> Result<Vec<PeriodicMetric>> {
    if every == 0 {
        return Err(Error::contract("evaluation interval must be at least 1"));
    }
    let total = record.iterations_run;
    let empty = AdjacencyMatrix::empty(truth.n());
    let mut out = Vec::new();
    let mut at = every;
    while at < total + every {
        let point = at.min(total);
        let g = record
            .best_history
            .iter()
            .take_while(|(it, _)| *it <= point)
            .last()
            .map_or(&empty, |(_, g)| g);
        let m = graph_metrics(g, truth)?;
        out.push(PeriodicMetric {
            iteration: point,
            shd: m.shd,
            tpr: m.tpr,
            fdr: m.fdr,
            correct: m.correct_edges,
            predicted: m.predicted_edges,
        });
        at += every;
    }
    Ok(out)
}

pub fn periodic_csv(series: &[PeriodicMetric]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in series {
        w.serialize(row)
            .map_err(|e| Error::contract(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Machine-readable summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setup: TrainingSetup,
    pub seed: u64,
    pub anchors: Anchors,
    pub lambda1: f64,
    pub lambda2: f64,
    pub bic_u: f64,
    pub bic_min: Option<f64>,
    pub iterations: u64,
    pub distinct_graphs: usize,
    /// Best DAG before pruning.
    pub best_graph: Option<EdgeList>,
    pub best_raw_score: Option<f64>,
    pub output_graph: Option<EdgeList>,
    pub metrics_pre_prune: Option<GraphMetrics>,
    pub metrics_post_prune: Option<GraphMetrics>,
    pub target_reached_at: Option<u64>,
    pub clip_rate_trc: Option<f64>,
    pub clip_rate_ppo: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn report(&self, setup: &TrainingSetup) -> RunReport {
        let clipped = setup.procedure.algorithm.uses_replay() && self.clip.entries > 0;
        RunReport {
            setup: setup.clone(),
            seed: setup.procedure.seed,
            anchors: self.anchors,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            bic_u: self.bic_u,
            bic_min: self.bic_min,
            iterations: self.iterations_run,
            distinct_graphs: self.cache.len(),
            best_graph: self.best_dag.as_ref().map(|g| g.adjacency.to_edge_list()),
            best_raw_score: self.best_dag.as_ref().map(|g| g.bic_raw),
            output_graph: self.output.as_ref().map(AdjacencyMatrix::to_edge_list),
            metrics_pre_prune: self.metrics_pre_prune,
            metrics_post_prune: self.metrics_post_prune,
            target_reached_at: self.target_reached_at,
            clip_rate_trc: clipped.then(|| self.clip.trc_rate()),
            clip_rate_ppo: clipped.then(|| self.clip.ppo_rate()),
            wall_clock_secs: self.wall_clock_secs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig, ModelTag};

    fn tiny_setup(iterations: u64) -> TrainingSetup {
        TrainingSetup {
            encoder: SdgatConfig {
                n_s: 1,
                n_gat: 2,
                n_sd: 2,
                d_k: 4,
                d_v: 8,
                m_out: 8,
                input_depth: 16,
                decoder_hidden: 4,
                ..SdgatConfig::default()
            },
            critic: CriticConfig { hidden: 8 },
            procedure: ProcedureConfig {
                iterations,
                batch_size: 8,
                t_u: 5,
                ..ProcedureConfig::default()
            },
            ..TrainingSetup::default()
        }
    }

    fn data(n: usize, samples: usize, seed: u64) -> Dataset {
        generate(&GenConfig {
            n,
            samples,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn zero_iterations_give_an_empty_record() {
        let rec = run_procedure(&data(4, 100, 0), &tiny_setup(0), &RunPaths::default()).unwrap();
        assert!(rec.log.is_empty());
        assert!(rec.best.is_none() && rec.best_dag.is_none() && rec.output.is_none());
        assert_eq!(rec.iterations_run, 0);
    }

    #[test]
    fn lambda_schedule_arithmetic() {
        let cfg = ProcedureConfig {
            lambda1_cap: 10.0,
            ..ProcedureConfig::default()
        };
        let (mut l1, mut l2) = (0.0, 1.0);
        for _ in 0..3 {
            (l1, l2) = update_lambdas(l1, l2, &cfg, 50.0);
        }
        assert_eq!((l1, l2), (3.0, 50.0));
        for _ in 0..20 {
            (l1, l2) = update_lambdas(l1, l2, &cfg, 50.0);
        }
        assert_eq!((l1, l2), (10.0, 50.0));
    }

    #[test]
    fn lambdas_never_decrease_when_the_cap_drops() {
        let cfg = ProcedureConfig::default();
        let (l1, l2) = update_lambdas(2.0, 5.0, &cfg, 3.0);
        assert_eq!((l1, l2), (3.0, 5.0));
    }

    #[test]
    fn config_invariants() {
        assert!(ProcedureConfig::default().validate().is_ok());
        for bad in [
            ProcedureConfig {
                t_u: 0,
                ..Default::default()
            },
            ProcedureConfig {
                delta1: -1.0,
                ..Default::default()
            },
            ProcedureConfig {
                delta2: 1.0,
                ..Default::default()
            },
            ProcedureConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn run_invariants_hold() {
        let ds = data(4, 200, 1);
        let setup = tiny_setup(23);
        let rec = run_procedure(&ds, &setup, &RunPaths::default()).unwrap();
        assert_eq!(rec.log.len(), 23);
        let mut prev = (0.0, 0.0);
        for l in &rec.log {
            assert!(l.lambda1 >= prev.0 && l.lambda2 >= prev.1);
            assert!(l.lambda1 <= setup.procedure.lambda1_cap);
            prev = (l.lambda1, l.lambda2);
        }
        // Four updates at t_u = 5.
        assert_eq!(rec.lambda1, 4.0);
        let scorer = Scorer::new(ds.clone(), setup.score.clone()).unwrap();
        assert_eq!(scorer.normalize(rec.anchors.lower), 0.0);
        assert_eq!(scorer.normalize(rec.anchors.upper), 10.0);
        for (_, raw) in rec.cache.iter() {
            assert!((0.0..=10.0).contains(&scorer.normalize(raw.bic_raw)));
        }
        let again = rerank(&rec.cache, &scorer, rec.lambda1, rec.lambda2).unwrap();
        assert_eq!(
            again.map(|g| g.adjacency),
            rec.best.as_ref().map(|g| g.adjacency.clone())
        );
        assert!(rec.output.as_ref().unwrap().is_dag());
        assert!(rec.metrics_post_prune.is_some());
        let first = rec.best_history.first().unwrap().0;
        assert!(first >= 1 && rec.best_history.windows(2).all(|w| w[0].0 <= w[1].0));
    }

    #[test]
    fn identical_seeds_reproduce_runs() {
        let ds = data(4, 200, 2);
        let setup = tiny_setup(6);
        let a = run_procedure(&ds, &setup, &RunPaths::default()).unwrap();
        let b = run_procedure(&ds, &setup, &RunPaths::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn log_and_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut setup = tiny_setup(4);
        setup.procedure.checkpoint_every = Some(2);
        let paths = RunPaths {
            log: Some(dir.path().join("log.jsonl")),
            checkpoint_dir: Some(dir.path().join("ck")),
        };
        run_procedure(&data(3, 100, 3), &setup, &paths).unwrap();
        let text = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let lines: Vec<LogRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3].iteration, 4);
        assert!(dir.path().join("ck/checkpoint-00000002.json").exists());
        assert!(dir.path().join("ck/checkpoint-00000004.json").exists());
    }

    #[test]
    fn threshold_pruning() {
        let g = generate(&GenConfig {
            n: 5,
            samples: 2000,
            seed: 4,
            noise_variance: 0.01,
            ..GenConfig::default()
        })
        .unwrap();
        let ds = g.dataset;
        let truth = ds.truth().unwrap().clone();
        let cfg = ScoreConfig::default();
        assert_eq!(prune_threshold(&truth, &ds, &cfg, 0.3).unwrap(), truth);
        assert_eq!(prune_threshold(&truth, &ds, &cfg, 0.0).unwrap(), truth);
        // A redundant edge consistent with a topological order.
        let order = truth.topological_order().unwrap();
        let (i, j) = (0..5)
            .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
            .map(|(a, b)| (order[a], order[b]))
            .find(|&(a, b)| !truth.has_edge(a, b))
            .unwrap();
        let mut extra = truth.clone();
        extra.set_edge(i, j, true);
        assert_eq!(prune_threshold(&extra, &ds, &cfg, 0.3).unwrap(), truth);
    }

    #[test]
    fn greedy_pruning() {
        let ds = data(5, 2000, 5);
        let truth = ds.truth().unwrap().clone();
        let mut scorer = Scorer::new(ds.clone(), ScoreConfig::default()).unwrap();
        let empty = AdjacencyMatrix::empty(5);
        assert_eq!(prune_greedy(&empty, &mut scorer, 0.0).unwrap(), empty);
        assert_eq!(
            prune_greedy(&truth, &mut scorer, f64::INFINITY).unwrap(),
            empty
        );
        let order = truth.topological_order().unwrap();
        let (i, j) = (0..5)
            .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
            .map(|(a, b)| (order[a], order[b]))
            .find(|&(a, b)| !truth.has_edge(a, b))
            .unwrap();
        let mut extra = truth.clone();
        extra.set_edge(i, j, true);
        assert_eq!(prune_greedy(&extra, &mut scorer, 0.0).unwrap(), truth);
        let cyclic = AdjacencyMatrix::complete(3);
        let mut s3 = Scorer::new(data(3, 100, 0), ScoreConfig::default()).unwrap();
        assert!(prune_greedy(&cyclic, &mut s3, 0.0).is_err());
    }

    fn record_with_history(total: u64, history: Vec<(u64, AdjacencyMatrix)>) -> RunRecord {
        RunRecord {
            best: None,
            best_dag: None,
            bic_min: None,
            bic_u: 10.0,
            anchors: Anchors {
                lower: 0.0,
                upper: 1.0,
            },
            lambda1: 0.0,
            lambda2: 1.0,
            log: Vec::new(),
            cache: ScoreCache::new(),
            best_history: history,
            iterations_run: total,
            target_reached_at: None,
            clip: ClipStats::default(),
            output: None,
            metrics_pre_prune: None,
            metrics_post_prune: None,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn periodic_series_points_and_values() {
        let truth = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let rec = record_with_history(5000, vec![(1, truth.clone())]);
        let s = evaluate_periodic(&rec, &truth, 2000).unwrap();
        assert_eq!(
            s.iter().map(|p| p.iteration).collect::<Vec<_>>(),
            vec![2000, 4000, 5000]
        );
        assert!(s.iter().all(|p| p.shd == 0 && p.correct == 2));
        for (t, k, pts) in [(4000, 2000, 2), (1, 2000, 1), (0, 10, 0), (10, 3, 4)] {
            assert_eq!(
                evaluate_periodic(&record_with_history(t, vec![]), &truth, k)
                    .unwrap()
                    .len(),
                pts
            );
        }
        let later = record_with_history(30, vec![(15, truth.clone())]);
        let s = evaluate_periodic(&later, &truth, 10).unwrap();
        assert_eq!(s.iter().map(|p| p.shd).collect::<Vec<_>>(), vec![2, 0, 0]);
        let csv = periodic_csv(&s).unwrap();
        assert!(csv.starts_with("iteration,shd,tpr,fdr,correct,predicted\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn target_stops_the_run() {
        let ds = generate(&GenConfig {
            n: 3,
            samples: 300,
            model: ModelTag::LinearGaussian,
            seed: 6,
            ..GenConfig::default()
        })
        .unwrap()
        .dataset;
        let mut setup = tiny_setup(50);
        setup.procedure.target_shd = Some(3);
        let rec = run_procedure(&ds, &setup, &RunPaths::default()).unwrap();
        // Any 3-node DAG is within SHD 3 of the truth.
        assert_eq!(rec.target_reached_at, Some(1));
        assert_eq!(rec.iterations_run, 1);
    }

    #[test]
    fn report_serializes() {
        let ds = data(3, 100, 7);
        let mut setup = tiny_setup(3);
        setup.procedure.algorithm = Algorithm::Ppo;
        let rec = run_procedure(&ds, &setup, &RunPaths::default()).unwrap();
        let rep = rec.report(&setup);
        assert!(rep.clip_rate_ppo.is_some() && rep.clip_rate_trc.is_some());
        let text = serde_json::to_string(&rep).unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
    }
}
