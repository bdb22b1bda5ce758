//! Regression-based BIC scores, anchor normalization, the penalized reward
//! and a fingerprint-keyed score cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyMatrix, Fingerprint};
use crate::linalg::{cholesky_with_jitter, lstsq, median, psd_solve, JITTER_START};

/// Residual sums of squares are floored here before taking logarithms.
pub const RSS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BicVariant {
    /// Per-node noise variances.
    Bic1,
    /// One pooled noise variance.
    Bic2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regressor {
    Linear,
    Quadratic,
    Gp,
}

/// Raw scores of the complete graph (`lower`) and the empty graph (`upper`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchors {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub bic: BicVariant,
    pub regressor: Regressor,
    /// Training rows for kernel ridge regression.
    pub gp_subsample: usize,
    pub gp_ridge: f64,
    /// Upper end of the normalized score interval.
    pub bic0: f64,
    /// Fixed anchors; computed from the data when absent.
    pub anchors: Option<Anchors>,
    /// Seed for the kernel-ridge row subsample.
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            bic: BicVariant::Bic2,
            regressor: Regressor::Linear,
            gp_subsample: 512,
            gp_ridge: 0.1,
            bic0: 10.0,
            anchors: None,
            seed: 0,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gp_subsample < 2 {
            return Err(Error::contract("gp_subsample must be at least 2"));
        }
        if !(self.gp_ridge > 0.0) {
            return Err(Error::contract("gp_ridge must be positive"));
        }
        if !(self.bic0 > 0.0 && self.bic0.is_finite()) {
            return Err(Error::contract("bic0 must be positive"));
        }
        if let Some(a) = self.anchors {
            if !(a.upper > a.lower) {
                return Err(Error::contract("anchors require upper > lower"));
            }
        }
        Ok(())
    }
}

/// Result of regressing one variable on a parent set.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub predictions: Vec<f64>,
    /// Per parent, the largest coefficient magnitude over terms involving it.
    /// `None` for the kernel regressor, which has no coefficients.
    pub edge_strength: Option<Vec<f64>>,
}

impl Fit {
    pub fn rss(&self, target: &[f64]) -> f64 {
        target
            .iter()
            .zip(&self.predictions)
            .map(|(y, p)| (y - p).powi(2))
            .sum()
    }
}

/// Feature columns (linear terms, then `x_a x_b` for `a ≤ b`) with, for each, the parents it involves.
fn features(ds: &Dataset, parents: &[usize], quadratic: bool) -> (Vec<Vec<f64>>, Vec<[usize; 2]>) {
    let mut cols: Vec<Vec<f64>> = parents.iter().map(|&p| ds.variable(p).to_vec()).collect();
    let mut owners: Vec<[usize; 2]> = (0..parents.len()).map(|x| [x, x]).collect();
    if quadratic {
        for x in 0..parents.len() {
            for y in x..parents.len() {
                let (a, b) = (ds.variable(parents[x]), ds.variable(parents[y]));
                cols.push(a.iter().zip(b).map(|(u, v)| u * v).collect());
                owners.push([x, y]);
            }
        }
    }
    (cols, owners)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn least_squares_fit(ds: &Dataset, child: usize, parents: &[usize], quadratic: bool) -> Fit {
    let y = ds.variable(child);
    let m = y.len();
    let ybar = mean(y);
    let (cols, owners) = features(ds, parents, quadratic);
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let x = DMatrix::from_fn(m, cols.len(), |r, c| cols[c][r] - means[c]);
    let yc = DVector::from_iterator(m, y.iter().map(|v| v - ybar));
    let beta = lstsq(&x, &yc);
    let fitted = &x * &beta;
    let mut strength = vec![0.0f64; parents.len()];
    for (b, own) in beta.iter().zip(&owners) {
        for &o in own {
            strength[o] = strength[o].max(b.abs());
        }
    }
    Fit {
        predictions: fitted.iter().map(|f| f + ybar).collect(),
        edge_strength: Some(strength),
    }
}

/// Rows used to fit the kernel regressor: a seeded uniform subsample of size `min(M_gp, M)`.
fn gp_rows(samples: usize, cfg: &ScoreConfig) -> Vec<usize> {
    if samples <= cfg.gp_subsample {
        return (0..samples).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = sample_indices(&mut rng, samples, cfg.gp_subsample).into_vec();
    rows.sort_unstable();
    rows
}

fn gp_fit(
    ds: &Dataset,
    child: usize,
    parents: &[usize],
    cfg: &ScoreConfig,
    rows: &[usize],
) -> Result<Fit> {
    let y = ds.variable(child);
    let point = |k: usize| -> Vec<f64> { parents.iter().map(|&p| ds.variable(p)[k]).collect() };
    let train: Vec<Vec<f64>> = rows.iter().map(|&k| point(k)).collect();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let q = train.len();
    let mut dists = Vec::with_capacity(q * (q - 1) / 2);
    for a in 0..q {
        for b in a + 1..q {
            dists.push(d2(&train[a], &train[b]).sqrt());
        }
    }
    let mut h = median(&mut dists);
    if !(h > 0.0) {
        h = 1.0;
    }
    let inv = 1.0 / (2.0 * h * h);
    let ys: Vec<f64> = rows.iter().map(|&k| y[k]).collect();
    let ybar = mean(&ys);
    let mut k = DMatrix::from_fn(q, q, |a, b| (-d2(&train[a], &train[b]) * inv).exp());
    for i in 0..q {
        k[(i, i)] += cfg.gp_ridge;
    }
    let (chol, _) = cholesky_with_jitter(&k, JITTER_START)?;
    let alpha = chol.solve(&DVector::from_iterator(q, ys.iter().map(|v| v - ybar)));
    let predictions = (0..ds.samples())
        .map(|r| {
            let u = point(r);
            ybar + train
                .iter()
                .zip(alpha.iter())
                .map(|(t, a)| a * (-d2(&u, t) * inv).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(Fit {
        predictions,
        edge_strength: None,
    })
}

fn check_parents(ds: &Dataset, child: usize, parents: &[usize]) -> Result<()> {
    if child >= ds.n() || parents.iter().any(|&p| p >= ds.n()) {
        return Err(Error::contract("variable index out of range"));
    }
    if parents.contains(&child) {
        return Err(Error::contract(format!(
            "node {child} listed among its own parents"
        )));
    }
    Ok(())
}

/// Regresses variable `child` on `parents` with the configured regressor.
/// An empty parent set predicts the column mean.
pub fn fit_predict(
    cfg: &ScoreConfig,
    ds: &Dataset,
    child: usize,
    parents: &[usize],
) -> Result<Fit> {
    check_parents(ds, child, parents)?;
    if parents.is_empty() {
        let mu = mean(ds.variable(child));
        return Ok(Fit {
            predictions: vec![mu; ds.samples()],
            edge_strength: Some(Vec::new()),
        });
    }
    match cfg.regressor {
        Regressor::Linear => Ok(least_squares_fit(ds, child, parents, false)),
        Regressor::Quadratic => Ok(least_squares_fit(ds, child, parents, true)),
        Regressor::Gp => gp_fit(ds, child, parents, cfg, &gp_rows(ds.samples(), cfg)),
    }
}

/// `Σ_i M ln(RSS_i/M) + n_e ln M`.
pub fn bic1_from_rss(rss: &[f64], samples: usize, edges: usize) -> f64 {
    let m = samples as f64;
    rss.iter()
        .map(|r| m * (r.max(RSS_FLOOR) / m).ln())
        .sum::<f64>()
        + edges as f64 * m.ln()
}

/// `Mn ln(Σ_i RSS_i/(Mn)) + n_e ln M`.
pub fn bic2_from_rss(rss: &[f64], samples: usize, edges: usize) -> f64 {
    let m = samples as f64;
    let mn = m * rss.len() as f64;
    let total: f64 = rss.iter().map(|r| r.max(RSS_FLOOR)).sum();
    mn * (total / mn).ln() + edges as f64 * m.ln()
}

fn edge_rss(cfg: &ScoreConfig, a: &AdjacencyMatrix, ds: &Dataset) -> Result<Vec<f64>> {
    if a.n() != ds.n() {
        return Err(Error::contract(format!(
            "graph has {} nodes, dataset {}",
            a.n(),
            ds.n()
        )));
    }
    (0..a.n())
        .map(|i| Ok(fit_predict(cfg, ds, i, &a.parents(i))?.rss(ds.variable(i))))
        .collect()
}

/// BIC with per-node variances, refitting every node (no caching).
pub fn bic1(cfg: &ScoreConfig, a: &AdjacencyMatrix, ds: &Dataset) -> Result<f64> {
    Ok(bic1_from_rss(
        &edge_rss(cfg, a, ds)?,
        ds.samples(),
        a.edge_count(),
    ))
}

/// BIC with a pooled variance, refitting every node (no caching).
pub fn bic2(cfg: &ScoreConfig, a: &AdjacencyMatrix, ds: &Dataset) -> Result<f64> {
    Ok(bic2_from_rss(
        &edge_rss(cfg, a, ds)?,
        ds.samples(),
        a.edge_count(),
    ))
}

pub fn bic(cfg: &ScoreConfig, a: &AdjacencyMatrix, ds: &Dataset) -> Result<f64> {
    match cfg.bic {
        BicVariant::Bic1 => bic1(cfg, a, ds),
        BicVariant::Bic2 => bic2(cfg, a, ds),
    }
}

/// Scores of the complete directed graph and the empty graph.
pub fn compute_anchors(ds: &Dataset, cfg: &ScoreConfig) -> Result<Anchors> {
    let lower = bic(cfg, &AdjacencyMatrix::complete(ds.n()), ds)?;
    let upper = bic(cfg, &AdjacencyMatrix::empty(ds.n()), ds)?;
    if !(upper > lower) {
        return Err(Error::Degenerate(format!(
            "empty-graph score {upper} does not exceed complete-graph score {lower}"
        )));
    }
    Ok(Anchors { lower, upper })
}

/// Raw, λ-independent components of a graph's score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub bic_raw: f64,
    pub cl: f64,
    pub ind: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredGraph {
    pub adjacency: AdjacencyMatrix,
    pub bic_raw: f64,
    /// `BIC_0 (raw − l)/(u − l)` clamped to `[0, BIC_0]`.
    pub bic_normalized: f64,
    pub cl: f64,
    /// True when the graph is cyclic.
    pub ind: bool,
}

impl ScoredGraph {
    /// `−(normalized + λ1·CL + λ2·Ind)`.
    pub fn reward(&self, lambda1: f64, lambda2: f64) -> f64 {
        -(self.bic_normalized + lambda1 * self.cl + lambda2 * f64::from(u8::from(self.ind)))
    }

    pub fn is_dag(&self) -> bool {
        !self.ind
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    fingerprint: String,
    bic_raw: f64,
    cl: f64,
    ind: u8,
}

/// Insertion-ordered map from adjacency fingerprints to raw scores,
/// optionally mirrored to an append-only JSON-lines file.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: Vec<(Fingerprint, RawScore)>,
    index: HashMap<Fingerprint, usize>,
    hits: u64,
    misses: u64,
    log: Option<BufWriter<File>>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads any existing entries from `path`, then appends new ones to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut cache = Self::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (k, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let l: CacheLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    row: k + 1,
                    column: e.column(),
                    message: e.to_string(),
                })?;
                cache.put(
                    Fingerprint::from_hex(&l.fingerprint)?,
                    RawScore {
                        bic_raw: l.bic_raw,
                        cl: l.cl,
                        ind: l.ind != 0,
                    },
                );
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        cache.log = Some(BufWriter::new(file));
        Ok(cache)
    }

    fn put(&mut self, fp: Fingerprint, score: RawScore) {
        if !self.index.contains_key(&fp) {
            self.index.insert(fp.clone(), self.entries.len());
            self.entries.push((fp, score));
        }
    }

    pub fn insert(&mut self, fp: Fingerprint, score: RawScore) -> Result<()> {
        if self.index.contains_key(&fp) {
            return Ok(());
        }
        if let Some(log) = &mut self.log {
            let line = CacheLine {
                fingerprint: fp.to_hex(),
                bic_raw: score.bic_raw,
                cl: score.cl,
                ind: u8::from(score.ind),
            };
            serde_json::to_writer(&mut *log, &line)?;
            log.write_all(b"\n")?;
        }
        self.put(fp, score);
        Ok(())
    }

    /// Looks up a fingerprint, counting the hit or miss.
    pub fn lookup(&mut self, fp: &Fingerprint) -> Option<RawScore> {
        match self.index.get(fp) {
            Some(&k) => {
                self.hits += 1;
                Some(self.entries[k].1)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<&RawScore> {
        self.index.get(fp).map(|&k| &self.entries[k].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    /// Entries in first-insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&Fingerprint, &RawScore)> {
        self.entries.iter().map(|(f, s)| (f, s))
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(())
    }
}

/// Centered cross-products of all candidate regression features.
#[derive(Debug)]
struct Gram {
    /// Feature index of `x_a x_b` (`a ≤ b`) when quadratic terms are present.
    pair_index: Option<Vec<usize>>,
    g: DMatrix<f64>,
}

impl Gram {
    fn build(ds: &Dataset, quadratic: bool) -> Self {
        let n = ds.n();
        let m = ds.samples();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|i| ds.variable(i).to_vec()).collect();
        let pair_index = quadratic.then(|| {
            let mut idx = vec![usize::MAX; n * n];
            for a in 0..n {
                for b in a..n {
                    idx[a * n + b] = cols.len();
                    let (u, v) = (ds.variable(a), ds.variable(b));
                    cols.push(u.iter().zip(v).map(|(x, y)| x * y).collect());
                }
            }
            idx
        });
        for c in &mut cols {
            let mu = mean(c);
            c.iter_mut().for_each(|v| *v -= mu);
        }
        let f = cols.len();
        let mut g = DMatrix::zeros(f, f);
        for a in 0..f {
            for b in a..f {
                let s: f64 = (0..m).map(|k| cols[a][k] * cols[b][k]).sum();
                g[(a, b)] = s;
                g[(b, a)] = s;
            }
        }
        Gram { pair_index, g }
    }

    fn feature_set(&self, n: usize, parents: &[usize]) -> Vec<usize> {
        let mut f: Vec<usize> = parents.to_vec();
        if let Some(idx) = &self.pair_index {
            for (x, &a) in parents.iter().enumerate() {
                for &b in &parents[x..] {
                    f.push(idx[a.min(b) * n + a.max(b)]);
                }
            }
        }
        f
    }

    /// RSS of regressing feature `child` on the given feature set, computed on a
    /// unit-diagonal rescaling for conditioning.
    fn rss(&self, child: usize, feats: &[usize]) -> f64 {
        let gyy = self.g[(child, child)];
        let k = feats.len();
        let scale: Vec<f64> = feats
            .iter()
            .map(|&f| {
                let d = self.g[(f, f)];
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let c = DMatrix::from_fn(k, k, |a, b| {
            self.g[(feats[a], feats[b])] * scale[a] * scale[b]
        });
        let v = DVector::from_iterator(k, (0..k).map(|a| self.g[(feats[a], child)] * scale[a]));
        let beta = psd_solve(&c, &v);
        (gyy - v.dot(&beta)).max(0.0)
    }
}

/// Largest feature count for which the Gram shortcut is precomputed.
const GRAM_MAX_FEATURES: usize = 400;

/// Scores graphs against one dataset, memoizing per-node residuals by parent set.
#[derive(Debug)]
pub struct Scorer {
    cfg: ScoreConfig,
    ds: Dataset,
    anchors: Anchors,
    gram: Option<Gram>,
    gp_rows: Vec<usize>,
    local: HashMap<(usize, Vec<usize>), f64>,
    regressions: u64,
}

impl Scorer {
    /// Computes anchors from the data unless `cfg.anchors` fixes them.
    pub fn new(ds: Dataset, cfg: ScoreConfig) -> Result<Self> {
        cfg.validate()?;
        let n = ds.n();
        let gram = match cfg.regressor {
            Regressor::Linear => Some(Gram::build(&ds, false)),
            Regressor::Quadratic if n + n * (n + 1) / 2 <= GRAM_MAX_FEATURES => {
                Some(Gram::build(&ds, true))
            }
            _ => None,
        };
        let gp_rows = gp_rows(ds.samples(), &cfg);
        let mut s = Scorer {
            cfg,
            ds,
            anchors: Anchors {
                lower: 0.0,
                upper: 1.0,
            },
            gram,
            gp_rows,
            local: HashMap::new(),
            regressions: 0,
        };
        s.anchors = match s.cfg.anchors {
            Some(a) => a,
            None => {
                let lower = s.raw_bic(&AdjacencyMatrix::complete(n))?;
                let upper = s.raw_bic(&AdjacencyMatrix::empty(n))?;
                if !(upper > lower) {
                    return Err(Error::Degenerate(format!(
                        "empty-graph score {upper} does not exceed complete-graph score {lower}"
                    )));
                }
                Anchors { lower, upper }
            }
        };
        Ok(s)
    }

    pub fn config(&self) -> &ScoreConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn anchors(&self) -> Anchors {
        self.anchors
    }

    /// Number of regressions actually run (per-node cache misses).
    pub fn regressions(&self) -> u64 {
        self.regressions
    }

    fn node_rss(&mut self, child: usize, parents: Vec<usize>) -> Result<f64> {
        if let Some(&r) = self.local.get(&(child, parents.clone())) {
            return Ok(r);
        }
        self.regressions += 1;
        let y = self.ds.variable(child);
        let rss = match (&self.gram, parents.is_empty()) {
            (Some(g), false) => {
                let r = g.rss(child, &g.feature_set(self.ds.n(), &parents));
                // Near-interpolating fits lose precision to cancellation; refit directly.
                if r < 1e-9 * g.g[(child, child)] {
                    fit_predict(&self.cfg, &self.ds, child, &parents)?.rss(y)
                } else {
                    r
                }
            }
            (_, true) => {
                let mu = mean(y);
                y.iter().map(|v| (v - mu).powi(2)).sum()
            }
            (None, false) => match self.cfg.regressor {
                Regressor::Gp => {
                    gp_fit(&self.ds, child, &parents, &self.cfg, &self.gp_rows)?.rss(y)
                }
                _ => fit_predict(&self.cfg, &self.ds, child, &parents)?.rss(y),
            },
        };
        self.local.insert((child, parents), rss);
        Ok(rss)
    }

    /// Unnormalized BIC of `a` under the configured variant and regressor.
    pub fn raw_bic(&mut self, a: &AdjacencyMatrix) -> Result<f64> {
        if a.n() != self.ds.n() {
            return Err(Error::contract(format!(
                "graph has {} nodes, dataset {}",
                a.n(),
                self.ds.n()
            )));
        }
        let rss = (0..a.n())
            .map(|i| self.node_rss(i, a.parents(i)))
            .collect::<Result<Vec<_>>>()?;
        let (m, e) = (self.ds.samples(), a.edge_count());
        Ok(match self.cfg.bic {
            BicVariant::Bic1 => bic1_from_rss(&rss, m, e),
            BicVariant::Bic2 => bic2_from_rss(&rss, m, e),
        })
    }

    pub fn normalize(&self, bic_raw: f64) -> f64 {
        let Anchors { lower, upper } = self.anchors;
        let b0 = self.cfg.bic0;
        (b0 * ((bic_raw - lower) / (upper - lower))).clamp(0.0, b0)
    }

    pub fn scored(&self, adjacency: AdjacencyMatrix, raw: RawScore) -> ScoredGraph {
        ScoredGraph {
            adjacency,
            bic_raw: raw.bic_raw,
            bic_normalized: self.normalize(raw.bic_raw),
            cl: raw.cl,
            ind: raw.ind,
        }
    }

    /// Scores `a`, consulting and filling `cache`.
    pub fn score(&mut self, a: &AdjacencyMatrix, cache: &mut ScoreCache) -> Result<ScoredGraph> {
        let fp = a.fingerprint();
        if let Some(raw) = cache.lookup(&fp) {
            return Ok(self.scored(a.clone(), raw));
        }
        let raw = RawScore {
            bic_raw: self.raw_bic(a)?,
            cl: a.acyclicity_penalty(),
            ind: !a.is_dag(),
        };
        cache.insert(fp, raw)?;
        Ok(self.scored(a.clone(), raw))
    }
}

/// Free-function form of [`Scorer::score`].
pub fn score_graph(
    a: &AdjacencyMatrix,
    scorer: &mut Scorer,
    cache: &mut ScoreCache,
) -> Result<ScoredGraph> {
    scorer.score(a, cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig, ModelTag};
    use rand::Rng;

    fn linear_data(n: usize, samples: usize, seed: u64) -> Dataset {
        generate(&GenConfig {
            n,
            samples,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn cfg(bic: BicVariant, regressor: Regressor) -> ScoreConfig {
        ScoreConfig {
            bic,
            regressor,
            ..ScoreConfig::default()
        }
    }

    fn random_dag<R: Rng>(n: usize, rng: &mut R) -> AdjacencyMatrix {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut a = AdjacencyMatrix::empty(n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    a.set_edge(perm[i], perm[j], true);
                }
            }
        }
        a
    }

    #[test]
    fn exact_linear_child_interpolates() {
        let x: Vec<f64> = (0..50).map(|k| (k as f64 * 0.3).cos()).collect();
        let mut data = x.clone();
        data.extend(x.iter().map(|v| 3.0 * v - 1.0));
        let ds = Dataset::new(2, 50, data, ModelTag::External).unwrap();
        let c = cfg(BicVariant::Bic1, Regressor::Linear);
        let fit = fit_predict(&c, &ds, 1, &[0]).unwrap();
        assert!(fit.rss(ds.variable(1)) < 1e-16 * 50.0);
        assert!((fit.edge_strength.unwrap()[0] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn empty_parents_leave_sample_variance() {
        let ds = linear_data(3, 200, 1);
        for regressor in [Regressor::Linear, Regressor::Quadratic, Regressor::Gp] {
            let fit = fit_predict(&cfg(BicVariant::Bic1, regressor), &ds, 2, &[]).unwrap();
            let y = ds.variable(2);
            let mu = mean(y);
            let var: f64 = y.iter().map(|v| (v - mu).powi(2)).sum();
            assert!((fit.rss(y) - var).abs() < 1e-9 * var);
        }
        assert!(fit_predict(&ScoreConfig::default(), &ds, 1, &[1]).is_err());
    }

    /// Coefficients from the normal equations solved by LU, independent of the SVD path.
    #[test]
    fn linear_fit_recovers_generating_weights() {
        let g = generate(&GenConfig {
            n: 4,
            samples: 5000,
            seed: 21,
            ..GenConfig::default()
        })
        .unwrap();
        let ds = &g.dataset;
        let w = g.weights.unwrap();
        let truth = ds.truth().unwrap().clone();
        let c = ScoreConfig::default();
        for i in 0..4 {
            let pa = truth.parents(i);
            if pa.is_empty() {
                continue;
            }
            let fit = fit_predict(&c, ds, i, &pa).unwrap();
            let k = pa.len();
            let mut design = DMatrix::from_element(5000, k + 1, 1.0);
            for (x, &p) in pa.iter().enumerate() {
                for r in 0..5000 {
                    design[(r, x + 1)] = ds.variable(p)[r];
                }
            }
            let y = DVector::from_column_slice(ds.variable(i));
            let normal = (design.transpose() * &design)
                .lu()
                .solve(&(design.transpose() * y))
                .unwrap();
            for (x, &p) in pa.iter().enumerate() {
                assert!((normal[x + 1] - w.get(p, i)).abs() < 0.1);
                assert!(
                    (fit.edge_strength.as_ref().unwrap()[x] - normal[x + 1].abs()).abs() < 1e-8
                );
            }
        }
    }

    #[test]
    fn gp_fit_tracks_a_smooth_function() {
        let x: Vec<f64> = (0..300).map(|k| -2.0 + 4.0 * k as f64 / 300.0).collect();
        let mut data = x.clone();
        data.extend(x.iter().map(|v| v.sin()));
        let ds = Dataset::new(2, 300, data, ModelTag::External).unwrap();
        let c = ScoreConfig {
            regressor: Regressor::Gp,
            gp_subsample: 100,
            gp_ridge: 1e-3,
            ..ScoreConfig::default()
        };
        let fit = fit_predict(&c, &ds, 1, &[0]).unwrap();
        assert!(fit.rss(ds.variable(1)) / 300.0 < 1e-3);
        assert!(fit.edge_strength.is_none());
    }

    #[test]
    fn bic_definitions_on_empty_graph() {
        let ds = linear_data(3, 400, 2).standardized();
        let c = ScoreConfig::default();
        let empty = AdjacencyMatrix::empty(3);
        let m = 400.0;
        // Standardized columns have RSS exactly M, so ln(RSS/M) vanishes.
        assert!(bic1(&c, &empty, &ds).unwrap().abs() < 1e-9);
        let pooled: f64 = (0..3)
            .map(|i| ds.variable(i).iter().map(|v| v * v).sum::<f64>())
            .sum();
        let want = m * 3.0 * (pooled / (m * 3.0)).ln();
        assert!((bic2(&c, &empty, &ds).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn bic1_equals_bic2_when_residual_variances_match() {
        let rss = [7.5, 7.5, 7.5, 7.5];
        assert!((bic1_from_rss(&rss, 100, 3) - bic2_from_rss(&rss, 100, 3)).abs() < 1e-9);
        let uneven = [2.0, 9.0, 7.5, 1.0];
        assert!(bic1_from_rss(&uneven, 100, 3) < bic2_from_rss(&uneven, 100, 3));
    }

    #[test]
    fn zero_residual_is_floored() {
        let v = bic1_from_rss(&[0.0], 10, 0);
        assert!(v.is_finite());
        assert_eq!(v, 10.0 * (RSS_FLOOR / 10.0).ln());
    }

    #[test]
    fn true_graph_beats_empty_and_redundant_edge_pays_penalty() {
        let ds = linear_data(4, 2000, 3);
        let truth = ds.truth().unwrap().clone();
        for variant in [BicVariant::Bic1, BicVariant::Bic2] {
            let c = cfg(variant, Regressor::Linear);
            let t = bic(&c, &truth, &ds).unwrap();
            assert!(t < bic(&c, &AdjacencyMatrix::empty(4), &ds).unwrap());
            // Add a redundant edge that keeps the graph acyclic.
            let (i, j) = (0..4)
                .flat_map(|i| (i + 1..4).map(move |j| (i, j)))
                .find(|&(i, j)| !truth.has_edge(i, j))
                .expect("a missing forward edge");
            let mut extra = truth.clone();
            extra.set_edge(i, j, true);
            // The fit gain of a null coefficient is a χ²(1)-sized fluctuation.
            let delta = bic(&c, &extra, &ds).unwrap() - t;
            assert!(delta >= (2000f64).ln() - 4.0, "{variant:?}: {delta}");
        }
    }

    #[test]
    fn bic1_decomposes_over_nodes() {
        let ds = linear_data(5, 500, 4);
        let c = cfg(BicVariant::Bic1, Regressor::Linear);
        let full = ds.truth().unwrap().clone();
        let Some(&(i, j)) = full.edges().first() else {
            return;
        };
        let mut less = full.clone();
        less.set_edge(i, j, false);
        let node = |a: &AdjacencyMatrix, k: usize| {
            500.0
                * (fit_predict(&c, &ds, k, &a.parents(k))
                    .unwrap()
                    .rss(ds.variable(k))
                    / 500.0)
                    .ln()
        };
        let predicted = node(&less, j) - node(&full, j) - (500f64).ln();
        let actual = bic1(&c, &less, &ds).unwrap() - bic1(&c, &full, &ds).unwrap();
        assert!((predicted - actual).abs() < 1e-8);
    }

    fn all_dags(n: usize) -> Vec<AdjacencyMatrix> {
        let pos: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        (0u32..1 << pos.len())
            .map(|mask| {
                let edges: Vec<_> = pos
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| mask >> b & 1 == 1)
                    .map(|(_, &e)| e)
                    .collect();
                AdjacencyMatrix::from_edges(n, &edges).unwrap()
            })
            .filter(AdjacencyMatrix::is_dag)
            .collect()
    }

    #[test]
    fn bic2_argmin_over_three_node_dags_is_usually_the_truth() {
        // A null edge beats the ln M penalty with χ²(1) probability ≈ 1% per pair,
        // so a few datasets in twenty may legitimately prefer a superset.
        let dags = all_dags(3);
        assert_eq!(dags.len(), 25);
        let c = cfg(BicVariant::Bic2, Regressor::Linear);
        let hits = (0..20)
            .filter(|seed| {
                let ds = linear_data(3, 1000, 100 + seed);
                let best = dags
                    .iter()
                    .map(|a| (bic2(&c, a, &ds).unwrap(), a))
                    .min_by(|x, y| x.0.total_cmp(&y.0))
                    .unwrap()
                    .1;
                best == ds.truth().unwrap()
            })
            .count();
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn scorer_matches_direct_refits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (regressor, model) in [
            (Regressor::Linear, ModelTag::LinearGaussian),
            (Regressor::Quadratic, ModelTag::Quadratic),
        ] {
            let g = generate(&GenConfig {
                n: 6,
                samples: 300,
                model,
                seed: 8,
                ..GenConfig::default()
            })
            .unwrap();
            for variant in [BicVariant::Bic1, BicVariant::Bic2] {
                let c = cfg(variant, regressor);
                let mut s = Scorer::new(g.dataset.clone(), c.clone()).unwrap();
                for _ in 0..20 {
                    let a = random_dag(6, &mut rng);
                    let fast = s.raw_bic(&a).unwrap();
                    let direct = bic(&c, &a, &g.dataset).unwrap();
                    assert!(
                        (fast - direct).abs() < 1e-7 * direct.abs().max(1.0),
                        "{fast} vs {direct}"
                    );
                }
            }
        }
    }

    #[test]
    fn cache_hits_run_no_regressions() {
        let ds = linear_data(4, 200, 5);
        let mut s = Scorer::new(ds, ScoreConfig::default()).unwrap();
        let mut cache = ScoreCache::new();
        let a = AdjacencyMatrix::from_edges(4, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        let first = s.score(&a, &mut cache).unwrap();
        let before = s.regressions();
        let second = s.score(&a, &mut cache).unwrap();
        assert_eq!(s.regressions(), before);
        assert_eq!(first.bic_raw.to_bits(), second.bic_raw.to_bits());
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        assert!(first.ind && first.cl > 0.0);
    }

    #[test]
    fn anchors_map_to_interval_endpoints() {
        let ds = linear_data(4, 300, 6);
        let c = ScoreConfig::default();
        let anchors = compute_anchors(&ds, &c).unwrap();
        assert!(anchors.upper > anchors.lower);
        let mut s = Scorer::new(ds.clone(), c).unwrap();
        assert!((s.anchors().lower - anchors.lower).abs() < 1e-7 * anchors.lower.abs());
        let mut cache = ScoreCache::new();
        let complete = s.score(&AdjacencyMatrix::complete(4), &mut cache).unwrap();
        let empty = s.score(&AdjacencyMatrix::empty(4), &mut cache).unwrap();
        assert_eq!(complete.bic_normalized, 0.0);
        assert_eq!(empty.bic_normalized, 10.0);
        assert_eq!(empty.reward(3.0, 7.0), -10.0);
        assert_eq!(s.normalize(anchors.lower - 100.0), 0.0);
        assert_eq!(s.normalize(anchors.upper + 100.0), 10.0);
    }

    #[test]
    fn upper_anchor_maps_exactly_to_bic0() {
        let ds = linear_data(3, 50, 1);
        let anchors = Anchors {
            lower: -4156.115088177275,
            upper: 9980.26879667272,
        };
        let s = Scorer::new(
            ds,
            ScoreConfig {
                anchors: Some(anchors),
                ..ScoreConfig::default()
            },
        )
        .unwrap();
        assert_eq!(s.normalize(anchors.upper), 10.0);
        assert_eq!(s.normalize(anchors.lower), 0.0);
    }

    #[test]
    fn constant_columns_are_degenerate() {
        let ds = Dataset::new(2, 5, vec![1.0; 10], ModelTag::External).unwrap();
        assert!(matches!(
            compute_anchors(&ds, &ScoreConfig::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            Scorer::new(ds, ScoreConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn anchors_ignore_observation_order() {
        let ds = linear_data(4, 300, 7);
        let mut rows: Vec<usize> = (0..300).collect();
        rows.reverse();
        rows.swap(3, 99);
        let data: Vec<f64> = (0..4)
            .flat_map(|i| rows.iter().map(move |&k| (i, k)))
            .map(|(i, k)| ds.variable(i)[k])
            .collect();
        let shuffled = Dataset::new(4, 300, data, ModelTag::External).unwrap();
        let c = ScoreConfig::default();
        let (a, b) = (
            compute_anchors(&ds, &c).unwrap(),
            compute_anchors(&shuffled, &c).unwrap(),
        );
        assert!((a.lower - b.lower).abs() < 1e-8 * a.lower.abs());
        assert!((a.upper - b.upper).abs() < 1e-8 * a.upper.abs());
    }

    #[test]
    fn reward_monotone_in_penalty_weights() {
        let ds = linear_data(3, 200, 8);
        let mut s = Scorer::new(ds, ScoreConfig::default()).unwrap();
        let mut cache = ScoreCache::new();
        let cyc = s
            .score(
                &AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 0)]).unwrap(),
                &mut cache,
            )
            .unwrap();
        let dag = s
            .score(
                &AdjacencyMatrix::from_edges(3, &[(0, 1)]).unwrap(),
                &mut cache,
            )
            .unwrap();
        assert!(cyc.reward(1.0, 1.0) > cyc.reward(2.0, 1.0));
        assert!(cyc.reward(1.0, 1.0) > cyc.reward(1.0, 2.0));
        assert_eq!(dag.reward(5.0, 5.0), -dag.bic_normalized);
    }

    #[test]
    fn cache_persists_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let ds = linear_data(3, 100, 9);
        let mut s = Scorer::new(ds, ScoreConfig::default()).unwrap();
        let a = AdjacencyMatrix::from_edges(3, &[(0, 2)]).unwrap();
        let raw = {
            let mut cache = ScoreCache::open(&path).unwrap();
            let r = s.score(&a, &mut cache).unwrap().bic_raw;
            cache.flush().unwrap();
            r
        };
        let mut reopened = ScoreCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(
            reopened.lookup(&a.fingerprint()).unwrap().bic_raw.to_bits(),
            raw.to_bits()
        );
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"fingerprint\""));
    }
}
