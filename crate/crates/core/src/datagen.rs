//! Synthetic structural causal models, external dataset ingestion and
//! minibatch sampling of observation windows.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{AdjacencyMatrix, EdgeList};
use crate::linalg::{cholesky_with_jitter, JITTER_START};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    LinearGaussian,
    Lingam,
    Quadratic,
    Gp,
    External,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelTag::LinearGaussian => "linear-gaussian",
            ModelTag::Lingam => "lingam",
            ModelTag::Quadratic => "quadratic",
            ModelTag::Gp => "gp",
            ModelTag::External => "external",
        };
        f.write_str(s)
    }
}

/// An `n × M` observation matrix, stored one variable per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    samples: usize,
    data: Vec<f64>,
    names: Vec<String>,
    truth: Option<AdjacencyMatrix>,
    model: ModelTag,
}

impl Dataset {
    /// `data` is variable-major: `data[i * samples + k]` is variable `i` in observation `k`.
    pub fn new(n: usize, samples: usize, data: Vec<f64>, model: ModelTag) -> Result<Self> {
        if data.len() != n * samples {
            return Err(Error::dim(
                "Dataset::new",
                format!(
                    "{} values for {n} variables × {samples} observations",
                    data.len()
                ),
            ));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "dataset entry for variable {} observation {}",
                k / samples.max(1),
                k % samples.max(1)
            )));
        }
        Ok(Dataset {
            n,
            samples,
            data,
            names: (1..=n).map(|i| format!("x{i}")).collect(),
            truth: None,
            model,
        })
    }

    pub fn with_truth(mut self, truth: AdjacencyMatrix) -> Result<Self> {
        if truth.n() != self.n {
            return Err(Error::contract(format!(
                "truth graph has {} nodes, dataset has {} variables",
                truth.n(),
                self.n
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n {
            return Err(Error::contract("one name per variable required"));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of observations `M`.
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn variable(&self, i: usize) -> &[f64] {
        &self.data[i * self.samples..(i + 1) * self.samples]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn truth(&self) -> Option<&AdjacencyMatrix> {
        self.truth.as_ref()
    }

    pub fn model(&self) -> ModelTag {
        self.model
    }

    /// Per-variable z-scoring. Constant variables are only centered.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        let m = self.samples as f64;
        for row in out.data.chunks_mut(self.samples.max(1)) {
            let mean = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let sd = var.sqrt();
            for v in row.iter_mut() {
                *v -= mean;
                if sd > 1e-12 {
                    *v /= sd;
                }
            }
        }
        out
    }

    /// CSV with a header row and one observation per line.
    pub fn to_csv(&self) -> String {
        let mut s = self.names.join(",");
        s.push('\n');
        for k in 0..self.samples {
            let row: Vec<String> = (0..self.n)
                .map(|i| format!("{}", self.data[i * self.samples + k]))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Generation parameters. Weight and coefficient ranges are magnitudes; signs are symmetric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n: usize,
    pub samples: usize,
    pub model: ModelTag,
    pub edge_prob: f64,
    /// Edge weights are drawn from `[-hi, -lo] ∪ [lo, hi]`.
    pub weight_range: [f64; 2],
    pub noise_variance: f64,
    pub seed: u64,
    /// Exponent intervals of the power non-linearity for non-Gaussian noise.
    pub power_ranges: [[f64; 2]; 2],
    pub quad_coef_range: [f64; 2],
    pub quad_zero_prob: f64,
    /// Generated quadratic values are clipped to `[-clip_bound, clip_bound]`.
    pub clip_bound: f64,
    pub gp_noise_range: [f64; 2],
    pub gp_bandwidth: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 12,
            samples: 5000,
            model: ModelTag::LinearGaussian,
            edge_prob: 0.5,
            weight_range: [0.5, 2.0],
            noise_variance: 1.0,
            seed: 0,
            power_ranges: [[0.5, 0.8], [1.2, 2.0]],
            quad_coef_range: [0.5, 1.0],
            quad_zero_prob: 0.5,
            clip_bound: 1e4,
            gp_noise_range: [0.4, 0.8],
            gp_bandwidth: 1.0,
        }
    }
}

fn valid_interval(r: [f64; 2], strictly_positive: bool) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && (!strictly_positive || r[0] > 0.0)
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("generator config: {m}")));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.samples == 0 {
            return bad("samples must be positive");
        }
        if !(self.edge_prob > 0.0 && self.edge_prob < 1.0) {
            return bad("edge_prob must lie in (0, 1)");
        }
        if !valid_interval(self.weight_range, true) {
            return bad("weight_range must be 0 < lo ≤ hi so the signed ranges are disjoint");
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad("noise_variance must be non-negative");
        }
        if !self.power_ranges.iter().all(|&r| valid_interval(r, true)) {
            return bad("power_ranges must be positive intervals");
        }
        if !valid_interval(self.quad_coef_range, true) {
            return bad("quad_coef_range must be 0 < lo ≤ hi");
        }
        if !(0.0..1.0).contains(&self.quad_zero_prob) {
            return bad("quad_zero_prob must lie in [0, 1)");
        }
        if !(self.clip_bound > 0.0) {
            return bad("clip_bound must be positive");
        }
        if !valid_interval(self.gp_noise_range, false) || self.gp_noise_range[0] < 0.0 {
            return bad("gp_noise_range must be a non-negative interval");
        }
        if !(self.gp_bandwidth > 0.0) {
            return bad("gp_bandwidth must be positive");
        }
        Ok(())
    }
}

/// Dense `n × n` edge weights; entry `(j, i)` is the weight of `j → i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl WeightMatrix {
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.values[from * self.n + to]
    }
}

fn signed_uniform<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    let mag = if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    };
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Strictly upper-triangular DAG with Bernoulli(edge_prob) entries and signed uniform weights.
pub fn sample_true_dag<R: Rng + ?Sized>(
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<(AdjacencyMatrix, WeightMatrix)> {
    cfg.validate()?;
    let n = cfg.n;
    let mut a = AdjacencyMatrix::empty(n);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(cfg.edge_prob) {
                a.set_edge(i, j, true);
                w[i * n + j] = signed_uniform(cfg.weight_range, rng);
            }
        }
    }
    Ok((a, WeightMatrix { n, values: w }))
}

fn topo(dag: &AdjacencyMatrix) -> Result<Vec<usize>> {
    dag.topological_order()
        .ok_or_else(|| Error::contract("generator requires an acyclic graph"))
}

fn draw_exponent<R: Rng + ?Sized>(ranges: &[[f64; 2]; 2], rng: &mut R) -> f64 {
    let len0 = ranges[0][1] - ranges[0][0];
    let total = len0 + ranges[1][1] - ranges[1][0];
    if total == 0.0 {
        return ranges[0][0];
    }
    let u = rng.random_range(0.0..total);
    if u < len0 {
        ranges[0][0] + u
    } else {
        ranges[1][0] + (u - len0)
    }
}

/// `sign(z)|z|^p` for standard normal `z`, rescaled to sample variance `variance`.
pub fn power_noise<R: Rng + ?Sized>(
    p: f64,
    samples: usize,
    variance: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut v: Vec<f64> = (0..samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z.signum() * z.abs().powf(p)
        })
        .collect();
    let m = samples as f64;
    let mean = v.iter().sum::<f64>() / m;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
    let scale = if sd > 0.0 { variance.sqrt() / sd } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * scale);
    v
}

fn gaussian_noise<R: Rng + ?Sized>(samples: usize, variance: f64, rng: &mut R) -> Vec<f64> {
    let sd = variance.sqrt();
    (0..samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn node_noise<R: Rng + ?Sized>(cfg: &GenConfig, gaussian: bool, rng: &mut R) -> Vec<f64> {
    if gaussian {
        gaussian_noise(cfg.samples, cfg.noise_variance, rng)
    } else {
        let p = draw_exponent(&cfg.power_ranges, rng);
        power_noise(p, cfg.samples, cfg.noise_variance, rng)
    }
}

/// `x_i = Σ_j w_ji x_j + N_i` in topological order. Gaussian noise for
/// `linear-gaussian`, power-transformed noise for `lingam`.
pub fn generate_linear<R: Rng + ?Sized>(
    cfg: &GenConfig,
    dag: &AdjacencyMatrix,
    weights: &WeightMatrix,
    rng: &mut R,
) -> Result<Dataset> {
    let gaussian = match cfg.model {
        ModelTag::LinearGaussian => true,
        ModelTag::Lingam => false,
        other => {
            return Err(Error::contract(format!(
                "generate_linear called for model {other}"
            )))
        }
    };
    let noise: Vec<Vec<f64>> = (0..dag.n())
        .map(|_| node_noise(cfg, gaussian, rng))
        .collect();
    let data = propagate_linear(dag, weights, &noise)?;
    Dataset::new(dag.n(), cfg.samples, data, cfg.model)?.with_truth(dag.clone())
}

/// Evaluates `x_i = Σ_j w_ji x_j + noise_i` in topological order; returns variable-major data.
pub fn propagate_linear(
    dag: &AdjacencyMatrix,
    weights: &WeightMatrix,
    noise: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let order = topo(dag)?;
    let n = dag.n();
    if noise.len() != n || weights.n != n {
        return Err(Error::contract(
            "one noise column and weight row per node required",
        ));
    }
    let m = noise.first().map_or(0, Vec::len);
    let mut data = vec![0.0; n * m];
    for &i in &order {
        let mut col = noise[i].clone();
        for j in dag.parents(i) {
            let w = weights.get(j, i);
            for k in 0..m {
                col[k] += w * data[j * m + k];
            }
        }
        data[i * m..(i + 1) * m].copy_from_slice(&col);
    }
    Ok(data)
}

/// Coefficients of one node's quadratic mechanism.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTerms {
    /// `(parent, coefficient)` for first-order terms.
    pub linear: Vec<(usize, f64)>,
    /// `(a, b, coefficient)` with `a ≤ b` for `x_a x_b`; `a = b` is a square.
    pub second: Vec<(usize, usize, f64)>,
}

impl QuadraticTerms {
    fn eval(&self, data: &[f64], m: usize, k: usize) -> f64 {
        let x = |j: usize| data[j * m + k];
        self.linear.iter().map(|&(j, c)| c * x(j)).sum::<f64>()
            + self
                .second
                .iter()
                .map(|&(a, b, c)| c * x(a) * x(b))
                .sum::<f64>()
    }
}

/// Coefficients for all first- and second-order parent terms, each zero with
/// probability `quad_zero_prob`. A parent whose terms all vanish gets a nonzero
/// linear coefficient so every true edge has an effect.
pub fn sample_quadratic_terms<R: Rng + ?Sized>(
    cfg: &GenConfig,
    dag: &AdjacencyMatrix,
    rng: &mut R,
) -> Vec<QuadraticTerms> {
    let coef = |rng: &mut R| {
        if rng.random_bool(cfg.quad_zero_prob) {
            0.0
        } else {
            signed_uniform(cfg.quad_coef_range, rng)
        }
    };
    (0..dag.n())
        .map(|i| {
            let pa = dag.parents(i);
            let mut t = QuadraticTerms {
                linear: pa.iter().map(|&j| (j, coef(rng))).collect(),
                second: Vec::new(),
            };
            for (x, &a) in pa.iter().enumerate() {
                for &b in &pa[x..] {
                    t.second.push((a, b, coef(rng)));
                }
            }
            for (slot, &j) in pa.iter().enumerate() {
                let involved = t.linear[slot].1 != 0.0
                    || t.second
                        .iter()
                        .any(|&(a, b, c)| (a == j || b == j) && c != 0.0);
                if !involved {
                    t.linear[slot].1 = signed_uniform(cfg.quad_coef_range, rng);
                }
            }
            t
        })
        .collect()
}

/// Quadratic mechanisms with power-transformed noise, clipped to `±clip_bound`.
pub fn generate_quadratic<R: Rng + ?Sized>(
    cfg: &GenConfig,
    dag: &AdjacencyMatrix,
    terms: &[QuadraticTerms],
    rng: &mut R,
) -> Result<Dataset> {
    if terms.len() != dag.n() {
        return Err(Error::contract(
            "one set of quadratic terms per node required",
        ));
    }
    let order = topo(dag)?;
    let (n, m) = (dag.n(), cfg.samples);
    let mut data = vec![0.0; n * m];
    for &i in &order {
        let used = terms[i].linear.iter().map(|t| t.0);
        for j in used.chain(terms[i].second.iter().flat_map(|t| [t.0, t.1])) {
            if !dag.has_edge(j, i) {
                return Err(Error::contract(format!(
                    "term of node {i} uses non-parent {j}"
                )));
            }
        }
        let noise = node_noise(cfg, false, rng);
        for k in 0..m {
            let v = terms[i].eval(&data, m, k) + noise[k];
            data[i * m + k] = v.clamp(-cfg.clip_bound, cfg.clip_bound);
        }
    }
    Dataset::new(n, m, data, ModelTag::Quadratic)?.with_truth(dag.clone())
}

/// One joint draw of a zero-mean GP with kernel `exp(-‖u-v‖²/(2h²))` at the
/// given input rows. Identical inputs receive identical outputs.
pub fn gp_function_draw<R: Rng + ?Sized>(
    inputs: &[Vec<f64>],
    bandwidth: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut unique: Vec<&[f64]> = Vec::new();
    let mut slot: HashMap<Vec<u64>, usize> = HashMap::new();
    let map: Vec<usize> = inputs
        .iter()
        .map(|u| {
            let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
            *slot.entry(key).or_insert_with(|| {
                unique.push(u);
                unique.len() - 1
            })
        })
        .collect();
    let q = unique.len();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = DMatrix::from_fn(q, q, |a, b| {
        let d2: f64 = unique[a]
            .iter()
            .zip(unique[b])
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        (-d2 * inv).exp()
    });
    let (chol, _) = cholesky_with_jitter(&k, JITTER_START)?;
    let z = nalgebra::DVector::from_iterator(q, (0..q).map(|_| StandardNormal.sample(rng)));
    let f = chol.l() * z;
    Ok(map.into_iter().map(|u| f[u]).collect())
}

/// GP mechanisms with Gaussian noise of per-node variance drawn from `gp_noise_range`.
pub fn generate_gp<R: Rng + ?Sized>(
    cfg: &GenConfig,
    dag: &AdjacencyMatrix,
    rng: &mut R,
) -> Result<Dataset> {
    let order = topo(dag)?;
    let (n, m) = (dag.n(), cfg.samples);
    let mut data = vec![0.0; n * m];
    for &i in &order {
        let pa = dag.parents(i);
        let mut col = vec![0.0; m];
        if !pa.is_empty() {
            let inputs: Vec<Vec<f64>> = (0..m)
                .map(|k| pa.iter().map(|&j| data[j * m + k]).collect())
                .collect();
            col = gp_function_draw(&inputs, cfg.gp_bandwidth, rng)?;
        }
        let [lo, hi] = cfg.gp_noise_range;
        let var = if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        };
        for (c, e) in col.iter_mut().zip(gaussian_noise(m, var, rng)) {
            *c += e;
        }
        data[i * m..(i + 1) * m].copy_from_slice(&col);
    }
    Dataset::new(n, m, data, ModelTag::Gp)?.with_truth(dag.clone())
}

/// Everything needed to reproduce a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub dataset: Dataset,
    pub weights: Option<WeightMatrix>,
    pub quadratic_terms: Option<Vec<QuadraticTerms>>,
}

/// Samples a DAG and a dataset from `cfg`, deterministically in `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dag, weights) = sample_true_dag(cfg, &mut rng)?;
    Ok(match cfg.model {
        ModelTag::LinearGaussian | ModelTag::Lingam => Generated {
            dataset: generate_linear(cfg, &dag, &weights, &mut rng)?,
            weights: Some(weights),
            quadratic_terms: None,
        },
        ModelTag::Quadratic => {
            let terms = sample_quadratic_terms(cfg, &dag, &mut rng);
            Generated {
                dataset: generate_quadratic(cfg, &dag, &terms, &mut rng)?,
                weights: None,
                quadratic_terms: Some(terms),
            }
        }
        ModelTag::Gp => Generated {
            dataset: generate_gp(cfg, &dag, &mut rng)?,
            weights: None,
            quadratic_terms: None,
        },
        ModelTag::External => {
            return Err(Error::contract(
                "external datasets are loaded, not generated",
            ))
        }
    })
}

/// Sidecar metadata written next to a generated dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: GenConfig,
    pub seed: u64,
    pub n: usize,
    pub samples: usize,
    pub model: ModelTag,
    pub truth: Option<EdgeList>,
    pub weights: Option<WeightMatrix>,
}

impl Generated {
    /// Writes `<path>` (CSV) and `<path>` with extension `json` (sidecar). Returns the sidecar path.
    pub fn save(&self, cfg: &GenConfig, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, self.dataset.to_csv())?;
        let sidecar = Sidecar {
            config: cfg.clone(),
            seed: cfg.seed,
            n: self.dataset.n,
            samples: self.dataset.samples,
            model: self.dataset.model,
            truth: self
                .dataset
                .truth
                .as_ref()
                .map(AdjacencyMatrix::to_edge_list),
            weights: self.weights.clone(),
        };
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(side)
    }
}

// Datasets serialize through their CSV-equivalent fields so `Generated` can be embedded in reports.
impl Serialize for Dataset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Dataset", 6)?;
        st.serialize_field("n", &self.n)?;
        st.serialize_field("samples", &self.samples)?;
        st.serialize_field("names", &self.names)?;
        st.serialize_field("model", &self.model)?;
        st.serialize_field(
            "truth",
            &self.truth.as_ref().map(AdjacencyMatrix::to_edge_list),
        )?;
        st.serialize_field("data", &self.data)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Dataset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            n: usize,
            samples: usize,
            names: Vec<String>,
            model: ModelTag,
            truth: Option<EdgeList>,
            data: Vec<f64>,
        }
        let r = Raw::deserialize(d)?;
        let mut ds = Dataset::new(r.n, r.samples, r.data, r.model)
            .and_then(|ds| ds.with_names(r.names))
            .map_err(serde::de::Error::custom)?;
        if let Some(t) = r.truth {
            ds = t
                .to_matrix()
                .and_then(|t| ds.with_truth(t))
                .map_err(serde::de::Error::custom)?;
        }
        Ok(ds)
    }
}

/// Parses a header + observation-rows CSV into a dataset tagged `external`.
pub fn parse_external_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: 1,
            message: e.to_string(),
        })?
        .clone();
    let n = header.len();
    if n == 0 || header.iter().all(str::is_empty) {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "missing header row".into(),
        });
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (r, record) in reader.records().enumerate() {
        let row = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 1,
            message: e.to_string(),
        })?;
        if record.len() != n {
            return Err(Error::Parse {
                row,
                column: record.len().min(n) + 1,
                message: format!("expected {n} cells, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            columns[c].push(v);
        }
    }
    let samples = columns[0].len();
    if samples == 0 {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no observations".into(),
        });
    }
    let names = header.iter().map(str::to_string).collect();
    Dataset::new(n, samples, columns.concat(), ModelTag::External)?.with_names(names)
}

/// Loads an external dataset and, optionally, its truth graph (CSV matrix or edge-list JSON).
pub fn load_external(path: &Path, truth_path: Option<&Path>, zscore: bool) -> Result<Dataset> {
    let mut ds = parse_external_csv(&std::fs::read_to_string(path)?)?;
    if let Some(tp) = truth_path {
        ds = ds.with_truth(AdjacencyMatrix::load(tp)?)?;
    }
    Ok(if zscore { ds.standardized() } else { ds })
}

/// `batch` windows of `depth` observations, each drawn uniformly without replacement.
/// Each tensor is `n × depth`, one variable per row.
pub fn draw_state_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    batch: usize,
    depth: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if depth > ds.samples || depth == 0 {
        return Err(Error::contract(format!(
            "sample depth {depth} must lie in 1..={}",
            ds.samples
        )));
    }
    (0..batch)
        .map(|_| {
            let idx = sample_indices(rng, ds.samples, depth);
            let mut data = Vec::with_capacity(ds.n * depth);
            for i in 0..ds.n {
                let var = ds.variable(i);
                data.extend(idx.iter().map(|k| var[k]));
            }
            Tensor::new(vec![ds.n, depth], data)
        })
        .collect()
}
