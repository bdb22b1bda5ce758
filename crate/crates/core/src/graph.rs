//! Directed graphs as binary adjacency matrices, the trace-exponential
//! acyclicity penalty, and structural comparison metrics.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n × n` binary matrix; entry `(i, j) = 1` is the edge `i → j`. The diagonal is always 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<u8>,
}

/// Exact bitstring key of an adjacency matrix (row-major, one bit per entry).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint {
    n: usize,
    words: Box<[u64]>,
}

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        let mut s = format!("{}:", self.n);
        for w in self.words.iter() {
            let _ = write!(s, "{w:016x}");
        }
        s
    }

    pub fn from_hex(text: &str) -> Result<Self> {
        let bad = || Error::contract(format!("malformed fingerprint {text:?}"));
        let (n, hex) = text.split_once(':').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let expected = (n * n).div_ceil(64);
        if hex.len() != expected * 16 {
            return Err(bad());
        }
        let words = (0..expected)
            .map(|k| u64::from_str_radix(&hex[k * 16..(k + 1) * 16], 16).map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fingerprint {
            n,
            words: words.into(),
        })
    }
}

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        AdjacencyMatrix {
            n,
            entries: vec![0; n * n],
        }
    }

    /// Every ordered pair `i ≠ j` connected; cyclic for `n ≥ 2`.
    pub fn complete(n: usize) -> Self {
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a.entries[i * n + j] = 1;
                }
            }
        }
        a
    }

    /// Builds from row-major entries; rejects non-binary values and self-loops.
    pub fn from_entries(n: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::dim(
                "AdjacencyMatrix::from_entries",
                format!("{} entries for n = {n}", entries.len()),
            ));
        }
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::contract("adjacency entries must be 0 or 1"));
        }
        if (0..n).any(|i| entries[i * n + i] != 0) {
            return Err(Error::contract("adjacency diagonal must be zero"));
        }
        Ok(AdjacencyMatrix { n, entries })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::contract(format!(
                    "edge ({i}, {j}) out of range for n = {n}"
                )));
            }
            if i == j {
                return Err(Error::contract(format!("self-loop on node {i}")));
            }
            a.entries[i * n + j] = 1;
        }
        Ok(a)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] == 1
    }

    /// Sets or clears `i → j`. Setting a diagonal entry is ignored.
    pub fn set_edge(&mut self, i: usize, j: usize, present: bool) {
        if i != j {
            self.entries[i * self.n + j] = u8::from(present);
        }
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().map(|&e| e as usize).sum()
    }

    /// Edges as `(from, to)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n;
        (0..n * n)
            .filter(|&k| self.entries[k] == 1)
            .map(|k| (k / n, k % n))
            .collect()
    }

    /// Parents of `j` (the nonzero rows of column `j`), ascending.
    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut words = vec![0u64; (self.n * self.n).div_ceil(64)];
        for (k, &e) in self.entries.iter().enumerate() {
            if e == 1 {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        Fingerprint {
            n: self.n,
            words: words.into(),
        }
    }

    pub fn from_fingerprint(fp: &Fingerprint) -> Result<Self> {
        let n = fp.n;
        let entries = (0..n * n)
            .map(|k| ((fp.words[k / 64] >> (k % 64)) & 1) as u8)
            .collect();
        Self::from_entries(n, entries)
    }

    /// Relabels node `i` as `perm[i]`, i.e. computes `P A Pᵀ`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract("not a permutation of the node set"));
        }
        let mut out = Self::empty(n);
        for (i, j) in self.edges() {
            out.entries[perm[i] * n + perm[j]] = 1;
        }
        Ok(out)
    }

    /// True iff a topological order exists (repeated removal of in-degree-zero nodes).
    pub fn is_dag(&self) -> bool {
        self.topological_order().is_some()
    }

    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n;
        let mut indeg: Vec<usize> = (0..n).map(|j| self.parents(j).len()).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&j| indeg[j] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for j in 0..n {
                if self.has_edge(i, j) {
                    indeg[j] -= 1;
                    if indeg[j] == 0 {
                        queue.push_back(j);
                    }
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// `tr(exp(A)) − n`: zero exactly on DAGs, positive on every cyclic graph.
    pub fn acyclicity_penalty(&self) -> f64 {
        let a: Vec<f64> = self.entries.iter().map(|&e| e as f64).collect();
        let e = expm(&a, self.n);
        (0..self.n).map(|i| e[i * self.n + i]).sum::<f64>() - self.n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.entries.chunks(self.n.max(1)).take(self.n) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (r, line) in rows.iter().enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != n {
                return Err(Error::Parse {
                    row: r + 1,
                    column: cells.len().min(n) + 1,
                    message: format!("expected {n} cells, found {}", cells.len()),
                });
            }
            for (c, cell) in cells.iter().enumerate() {
                let v = match *cell {
                    "0" | "0.0" => 0,
                    "1" | "1.0" => 1,
                    other => {
                        return Err(Error::Parse {
                            row: r + 1,
                            column: c + 1,
                            message: format!("expected 0 or 1, found {other:?}"),
                        })
                    }
                };
                entries.push(v);
            }
        }
        Self::from_entries(n, entries)
    }

    pub fn to_edge_list(&self) -> EdgeList {
        EdgeList {
            n: self.n,
            edges: self.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_edge_list()).expect("edge lists always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let list: EdgeList = serde_json::from_str(text)?;
        list.to_matrix()
    }

    /// Reads `.json` edge lists or CSV matrices, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            Self::from_json(&text)
        } else {
            Self::from_csv(&text)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            self.to_json()
        } else {
            self.to_csv()
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// `{"n": …, "edges": [[i, j], …]}` serialization of a graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeList {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl EdgeList {
    pub fn to_matrix(&self) -> Result<AdjacencyMatrix> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        AdjacencyMatrix::from_edges(self.n, &edges)
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The matrix is scaled by `2^-s` until its 1-norm is at most 1/2; 18 Taylor
/// terms then leave a remainder below `e^{1/2} (1/2)^19 / 19! < 1e-22`.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let scale = f64::powi(2.0, -s);
    let b: Vec<f64> = a.iter().map(|x| x * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=18 {
        term = mat_mul(&term, &b, n);
        let inv = 1.0 / k as f64;
        term.iter_mut().for_each(|x| *x *= inv);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..s {
        result = mat_mul(&result, &result, n);
    }
    result
}

/// Structural comparison of an estimated graph against the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMetrics {
    /// Minimum number of edge additions, deletions and reversals.
    pub shd: usize,
    /// (predicted − correctly oriented) / max(1, predicted).
    pub fdr: f64,
    /// correctly oriented / true edges (1 when the truth has no edges).
    pub tpr: f64,
    /// Predicted edges that are present with the same orientation in the truth.
    pub correct_edges: usize,
    pub predicted_edges: usize,
    pub true_edges: usize,
    /// Predicted edges that are present in the truth with opposite orientation.
    pub reversed_edges: usize,
}

/// Edit cost between two states `(i→j, j→i)` of one node pair.
fn pair_cost(a: (bool, bool), b: (bool, bool)) -> usize {
    if a == b {
        0
    } else if a.0 != b.0 && a.1 != b.1 && a.0 == a.1 {
        // (0,0) ↔ (1,1): two additions or two deletions.
        2
    } else {
        1
    }
}

pub fn graph_metrics(estimated: &AdjacencyMatrix, truth: &AdjacencyMatrix) -> Result<GraphMetrics> {
    let n = truth.n();
    if estimated.n() != n {
        return Err(Error::contract(format!(
            "graph sizes differ: estimated {} vs truth {n}",
            estimated.n()
        )));
    }
    let mut shd = 0;
    for i in 0..n {
        for j in i + 1..n {
            shd += pair_cost(
                (estimated.has_edge(i, j), estimated.has_edge(j, i)),
                (truth.has_edge(i, j), truth.has_edge(j, i)),
            );
        }
    }
    let mut correct = 0;
    let mut reversed = 0;
    for (i, j) in estimated.edges() {
        if truth.has_edge(i, j) {
            correct += 1;
        } else if truth.has_edge(j, i) {
            reversed += 1;
        }
    }
    let predicted = estimated.edge_count();
    let true_edges = truth.edge_count();
    Ok(GraphMetrics {
        shd,
        fdr: (predicted - correct) as f64 / predicted.max(1) as f64,
        tpr: if true_edges == 0 {
            1.0
        } else {
            correct as f64 / true_edges as f64
        },
        correct_edges: correct,
        predicted_edges: predicted,
        true_edges,
        reversed_edges: reversed,
    })
}
