//! The graph-generating policy: an attention encoder over variables, a
//! pairwise decoder producing edge probabilities, Bernoulli sampling of
//! adjacency matrices and the matching log-probability and entropy terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;

/// Decoder probabilities are kept inside `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Additive attention bias for forbidden pairs.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Two-level multi-head scaled dot-product graph attention.
    Sdgat,
    /// Additive (GAT-style) attention.
    Gat,
    /// Transformer encoder layers with residuals, layer norm and a feed-forward block.
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdgatConfig {
    pub encoder: EncoderKind,
    /// Number of stacked layers.
    pub n_s: usize,
    /// First-level heads.
    pub n_gat: usize,
    /// Second-level heads within each first-level head.
    pub n_sd: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Encoder output width m′.
    pub m_out: usize,
    /// Input feature depth m (observations per state).
    pub input_depth: usize,
    /// Decoder hidden width.
    pub decoder_hidden: usize,
    /// Adds the layer input to its output whenever widths agree.
    pub residual: bool,
}

impl Default for SdgatConfig {
    fn default() -> Self {
        SdgatConfig {
            encoder: EncoderKind::Sdgat,
            n_s: 6,
            n_gat: 4,
            n_sd: 4,
            d_k: 16,
            d_v: 64,
            m_out: 64,
            input_depth: 64,
            decoder_hidden: 16,
            residual: false,
        }
    }
}

impl SdgatConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("encoder config: {m}")));
        let sizes = [
            self.n_s,
            self.n_gat,
            self.n_sd,
            self.d_k,
            self.d_v,
            self.m_out,
            self.input_depth,
            self.decoder_hidden,
        ];
        if sizes.contains(&0) {
            return bad("all sizes must be positive".into());
        }
        if self.d_v % self.n_gat != 0 || self.m_out % self.n_gat != 0 {
            return bad(format!("n_gat = {} must divide d_v and m_out", self.n_gat));
        }
        if self.d_v % (self.n_gat * self.n_sd) != 0 {
            return bad(format!(
                "n_gat·n_sd = {} must divide d_v",
                self.n_gat * self.n_sd
            ));
        }
        Ok(())
    }

    fn heads(&self) -> usize {
        self.n_gat * self.n_sd
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Sdgat {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        /// One output projection per first-level head.
        wo: Vec<ParamId>,
    },
    Gat {
        w: ParamId,
        a_src: ParamId,
        a_dst: ParamId,
    },
    Transformer {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        ff1: ParamId,
        ff1_b: ParamId,
        ff2: ParamId,
        ff2_b: ParamId,
    },
}

/// Parameter handles of the policy network; values live in a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Actor {
    cfg: SdgatConfig,
    input_proj: Option<ParamId>,
    layers: Vec<Layer>,
    w1: ParamId,
    w2: ParamId,
    q: ParamId,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ActorForward {
    pub n: usize,
    /// Number of stacked states; blocks of `n` rows belong to one state.
    pub batch: usize,
    /// `(batch·n) × m′` encodings.
    pub enc: Var,
    /// `(batch·n) × n` clamped probabilities; diagonal entries are meaningless and masked downstream.
    pub probs: Var,
}

/// Optional `n × n` binary attention mask; entry 0 forbids node `i` attending to `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_adjacency(a: &AdjacencyMatrix, include_self: bool) -> Self {
        let n = a.n();
        let allowed = (0..n * n)
            .map(|k| a.entries()[k] == 1 || (include_self && k / n == k % n))
            .collect();
        AttentionMask { n, allowed }
    }

    fn bias(&self) -> Vec<f64> {
        self.allowed
            .iter()
            .map(|&ok| if ok { 0.0 } else { MASK_BIAS })
            .collect()
    }
}

impl Actor {
    /// Registers all parameters under `actor.` in `store`.
    pub fn new<R: Rng + ?Sized>(
        cfg: SdgatConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mo = cfg.m_out;
        let mut layers = Vec::with_capacity(cfg.n_s);
        let mut input_proj = None;
        match cfg.encoder {
            EncoderKind::Sdgat => {
                let h = cfg.heads();
                let dvh = cfg.d_v / h;
                let cat = cfg.n_sd * dvh;
                for l in 0..cfg.n_s {
                    let din = if l == 0 { cfg.input_depth } else { mo };
                    let p = |s: &str| format!("actor.enc.{l}.{s}");
                    layers.push(Layer::Sdgat {
                        wq: store.add_uniform(p("wq"), din, h * cfg.d_k, din, rng),
                        wk: store.add_uniform(p("wk"), din, h * cfg.d_k, din, rng),
                        wv: store.add_uniform(p("wv"), din, h * dvh, din, rng),
                        wo: (0..cfg.n_gat)
                            .map(|g| {
                                store.add_uniform(
                                    p(&format!("wo{g}")),
                                    cat,
                                    mo / cfg.n_gat,
                                    cat,
                                    rng,
                                )
                            })
                            .collect(),
                    });
                }
            }
            EncoderKind::Gat => {
                let dh = mo / cfg.n_gat;
                for l in 0..cfg.n_s {
                    let din = if l == 0 { cfg.input_depth } else { mo };
                    let p = |s: &str| format!("actor.enc.{l}.{s}");
                    layers.push(Layer::Gat {
                        w: store.add_uniform(p("w"), din, mo, din, rng),
                        a_src: store.add_uniform(p("a_src"), dh, cfg.n_gat, dh, rng),
                        a_dst: store.add_uniform(p("a_dst"), dh, cfg.n_gat, dh, rng),
                    });
                }
            }
            EncoderKind::Transformer => {
                input_proj = Some(store.add_uniform(
                    "actor.enc.input",
                    cfg.input_depth,
                    mo,
                    cfg.input_depth,
                    rng,
                ));
                for l in 0..cfg.n_s {
                    let p = |s: &str| format!("actor.enc.{l}.{s}");
                    layers.push(Layer::Transformer {
                        wq: store.add_uniform(p("wq"), mo, cfg.n_gat * cfg.d_k, mo, rng),
                        wk: store.add_uniform(p("wk"), mo, cfg.n_gat * cfg.d_k, mo, rng),
                        wv: store.add_uniform(p("wv"), mo, mo, mo, rng),
                        wo: store.add_uniform(p("wo"), mo, mo, mo, rng),
                        ff1: store.add_uniform(p("ff1"), mo, mo, mo, rng),
                        ff1_b: store.add(p("ff1_b"), Tensor::zeros(&[1, mo])),
                        ff2: store.add_uniform(p("ff2"), mo, mo, mo, rng),
                        ff2_b: store.add(p("ff2_b"), Tensor::zeros(&[1, mo])),
                    });
                }
            }
        }
        let dh = cfg.decoder_hidden;
        Ok(Actor {
            w1: store.add_uniform("actor.dec.w1", mo, dh, mo, rng),
            w2: store.add_uniform("actor.dec.w2", mo, dh, mo, rng),
            q: store.add_uniform("actor.dec.q", dh, 1, dh, rng),
            cfg,
            input_proj,
            layers,
        })
    }

    pub fn config(&self) -> &SdgatConfig {
        &self.cfg
    }

    /// Decoder output weight, exposed for tests of the decoder contract.
    pub fn decoder_q(&self) -> ParamId {
        self.q
    }

    fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: &Layer,
        h: Var,
        n: usize,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let rows = tape.shape(h)[0];
        let groups = rows / n;
        match layer {
            Layer::Sdgat { wq, wk, wv, wo } => {
                let (wq, wk, wv) = (
                    tape.param(store, *wq)?,
                    tape.param(store, *wk)?,
                    tape.param(store, *wv)?,
                );
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                // Heads are ordered (p, q): first-level head p owns n_sd consecutive blocks.
                let att = tape.attention_grouped(q, k, v, cfg.heads(), n, mask)?;
                let block = cfg.d_v / cfg.n_gat;
                let mut outs = Vec::with_capacity(cfg.n_gat);
                for (p, w) in wo.iter().enumerate() {
                    let part = tape.slice_cols(att, p * block, block)?;
                    let w = tape.param(store, *w)?;
                    outs.push(tape.matmul(part, w)?);
                }
                tape.concat(&outs, 1)
            }
            Layer::Gat { w, a_src, a_dst } => {
                let dh = cfg.m_out / cfg.n_gat;
                let w = tape.param(store, *w)?;
                let wh = tape.matmul(h, w)?;
                let (a_src, a_dst) = (tape.param(store, *a_src)?, tape.param(store, *a_dst)?);
                let mut outs = Vec::with_capacity(cfg.n_gat);
                for g in 0..cfg.n_gat {
                    let part = tape.slice_cols(wh, g * dh, dh)?;
                    let asrc = tape.slice_cols(a_src, g, 1)?;
                    let adst = tape.slice_cols(a_dst, g, 1)?;
                    let s1 = tape.matmul(part, asrc)?;
                    let s2 = tape.matmul(part, adst)?;
                    let e = tape.pairwise_add_grouped(s1, s2, groups)?;
                    let e = tape.reshape(e, &[rows, n])?;
                    let mut e = tape.leaky_relu(e, 0.2)?;
                    if let Some(m) = mask {
                        let bias = tape.constant(&[rows, n], m.repeat(groups))?;
                        e = tape.add(e, bias)?;
                    }
                    let alpha = tape.softmax(e, 1)?;
                    outs.push(tape.block_matmul(alpha, part, n)?);
                }
                tape.concat(&outs, 1)
            }
            Layer::Transformer {
                wq,
                wk,
                wv,
                wo,
                ff1,
                ff1_b,
                ff2,
                ff2_b,
            } => {
                let p = |tape: &mut Tape, id: &ParamId| tape.param(store, *id);
                let q = {
                    let w = p(tape, wq)?;
                    tape.matmul(h, w)?
                };
                let k = {
                    let w = p(tape, wk)?;
                    tape.matmul(h, w)?
                };
                let v = {
                    let w = p(tape, wv)?;
                    tape.matmul(h, w)?
                };
                let att = tape.attention_grouped(q, k, v, cfg.n_gat, n, mask)?;
                let wo = p(tape, wo)?;
                let att = tape.matmul(att, wo)?;
                let x = tape.add(h, att)?;
                let x = tape.layer_norm(x, 1e-5)?;
                let (f1, b1, f2, b2) = (
                    p(tape, ff1)?,
                    p(tape, ff1_b)?,
                    p(tape, ff2)?,
                    p(tape, ff2_b)?,
                );
                let y = tape.matmul(x, f1)?;
                let y = tape.add_row(y, b1)?;
                let y = tape.relu(y)?;
                let y = tape.matmul(y, f2)?;
                let y = tape.add_row(y, b2)?;
                let x = tape.add(x, y)?;
                tape.layer_norm(x, 1e-5)
            }
        }
    }

    /// Encodes an `n × m` state into `n × m′` node encodings.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let n = tape.shape(state).first().copied().unwrap_or(0);
        self.encode_grouped(tape, store, state, n, mask)
    }

    /// Encodes stacked states: rows `[g·n, (g+1)·n)` form one graph and never
    /// attend outside their block.
    pub fn encode_grouped(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: Var,
        n: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let shape = tape.shape(state).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_depth || n == 0 || shape[0] % n != 0 {
            return Err(Error::dim(
                "Actor::encode",
                format!(
                    "state {shape:?}, expected blocks of {n} rows × {}",
                    self.cfg.input_depth
                ),
            ));
        }
        let bias = match mask {
            Some(m) if m.n != n => {
                return Err(Error::dim(
                    "Actor::encode",
                    "mask size differs from node count",
                ))
            }
            Some(m) => Some(m.bias()),
            None => None,
        };
        let mut h = state;
        if let Some(w) = self.input_proj {
            let w = tape.param(store, w)?;
            h = tape.matmul(h, w)?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let out = self
                .layer(tape, store, layer, h, n, bias.as_deref())
                .map_err(|e| e.within(format!("encoder layer {}", l + 1)))?;
            let mut out = if self.cfg.residual && tape.shape(out) == tape.shape(h) {
                tape.add(out, h)?
            } else {
                out
            };
            if self.cfg.encoder == EncoderKind::Gat && l + 1 < self.layers.len() {
                out = tape.elu(out)?;
            }
            h = out;
        }
        Ok(h)
    }

    /// `σ(qᵀ tanh(W1 enc_i + W2 enc_j))`, clamped, as an `n × n` tape value.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, enc: Var) -> Result<Var> {
        let n = tape.shape(enc)[0];
        self.decode_grouped(tape, store, enc, n)
    }

    /// Decodes stacked encodings into a `(batch·n) × n` probability block.
    pub fn decode_grouped(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        n: usize,
    ) -> Result<Var> {
        let rows = tape.shape(enc)[0];
        if n == 0 || rows % n != 0 {
            return Err(Error::dim(
                "Actor::decode",
                format!("{rows} rows in blocks of {n}"),
            ));
        }
        let (w1, w2, q) = (
            tape.param(store, self.w1)?,
            tape.param(store, self.w2)?,
            tape.param(store, self.q)?,
        );
        let u = tape.matmul(enc, w1)?;
        let v = tape.matmul(enc, w2)?;
        let pair = tape.pairwise_add_grouped(u, v, rows / n)?;
        let t = tape.tanh(pair)?;
        let logits = tape.matmul(t, q)?;
        let logits = tape.reshape(logits, &[rows, n])?;
        let p = tape.sigmoid(logits)?;
        tape.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
            .map_err(|e| e.within("decoder"))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<ActorForward> {
        self.forward_batch(tape, store, std::slice::from_ref(state), mask)
    }

    /// One forward pass over several states with the same node count.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &[Tensor],
        mask: Option<&AttentionMask>,
    ) -> Result<ActorForward> {
        let first = states
            .first()
            .ok_or_else(|| Error::contract("forward over an empty batch"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("Actor::forward", format!("state {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(states.len() * n * m);
        for s in states {
            if s.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "Actor::forward",
                    format!("state {:?} vs {shape:?}", s.shape()),
                ));
            }
            data.extend_from_slice(s.data());
        }
        let stacked = tape.constant(&[states.len() * n, m], data)?;
        let enc = self.encode_grouped(tape, store, stacked, n, mask)?;
        let probs = self.decode_grouped(tape, store, enc, n)?;
        Ok(ActorForward {
            n,
            batch: states.len(),
            enc,
            probs,
        })
    }

    /// Policy matrix for `state` without recording gradients.
    pub fn policy(&self, store: &ParamStore, state: &Tensor) -> Result<PolicyMatrix> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, state, None)?;
        Ok(PolicyMatrix::from_clamped(f.n, tape.value(f.probs)))
    }

    /// Policy matrices for several states from one forward pass.
    pub fn policies(&self, store: &ParamStore, states: &[Tensor]) -> Result<Vec<PolicyMatrix>> {
        let mut tape = Tape::new();
        let f = self.forward_batch(&mut tape, store, states, None)?;
        Ok(split_policies(&f, tape.value(f.probs)))
    }
}

/// Splits a `(batch·n) × n` block of values into per-state policy matrices.
pub(crate) fn split_policies(f: &ActorForward, values: &[f64]) -> Vec<PolicyMatrix> {
    values
        .chunks(f.n * f.n)
        .map(|c| PolicyMatrix::from_clamped(f.n, c))
        .collect()
}

/// Edge probabilities with an exactly zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMatrix {
    n: usize,
    probs: Vec<f64>,
}

impl PolicyMatrix {
    /// Builds from `n × n` values; off-diagonal entries must lie in `[0, 1]`.
    pub fn new(n: usize, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * n {
            return Err(Error::dim(
                "PolicyMatrix::new",
                format!("{} values for n = {n}", probs.len()),
            ));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("probabilities must lie in [0, 1]"));
        }
        for i in 0..n {
            probs[i * n + i] = 0.0;
        }
        Ok(PolicyMatrix { n, probs })
    }

    fn from_clamped(n: usize, values: &[f64]) -> Self {
        let mut probs = values.to_vec();
        for i in 0..n {
            probs[i * n + i] = 0.0;
        }
        PolicyMatrix { n, probs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.n + j]
    }

    /// Expected number of edges of a sampled graph.
    pub fn expected_edges(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// A sampled adjacency matrix with its log-probability and, per entry, the
/// probability of the value that was drawn (1 on the diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    pub adjacency: AdjacencyMatrix,
    pub log_prob: f64,
    pub chosen_probs: Vec<f64>,
}

pub fn sample_action<R: Rng + ?Sized>(pm: &PolicyMatrix, rng: &mut R) -> SampledAction {
    let n = pm.n;
    let mut a = AdjacencyMatrix::empty(n);
    let mut chosen = vec![1.0; n * n];
    let mut log_prob = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = pm.get(i, j);
            let edge = rng.random::<f64>() < p;
            a.set_edge(i, j, edge);
            let c = if edge { p } else { 1.0 - p };
            chosen[i * n + j] = c;
            log_prob += c.ln();
        }
    }
    SampledAction {
        adjacency: a,
        log_prob,
        chosen_probs: chosen,
    }
}

/// `−(1/n²) Σ_{i≠j} π ln π`, plus `−(1−π) ln(1−π)` per entry when `full` is set.
pub fn entropy(pm: &PolicyMatrix, full: bool) -> f64 {
    let n = pm.n;
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let mut h = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let p = pm.get(i, j);
                h -= xlnx(p);
                if full {
                    h -= xlnx(1.0 - p);
                }
            }
        }
    }
    h / (n * n) as f64
}

fn off_diagonal(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
        .collect()
}

/// Tape value of `Σ_{i≠j} ln π(a_ij)` for a fixed action.
pub fn log_prob_var(tape: &mut Tape, f: &ActorForward, a: &AdjacencyMatrix) -> Result<Var> {
    let rows = log_prob_rows(tape, f, &[a])?;
    tape.sum(rows)
}

/// Per-state log-probabilities of `actions` as a `batch × 1` tape value.
pub fn log_prob_rows(
    tape: &mut Tape,
    f: &ActorForward,
    actions: &[&AdjacencyMatrix],
) -> Result<Var> {
    let chosen = chosen_prob_rows(tape, f, actions)?;
    let logs = tape.log(chosen)?;
    per_state_sum(tape, f, logs)
}

/// Sums each state's `n × n` block into a `batch × 1` value.
pub(crate) fn per_state_sum(tape: &mut Tape, f: &ActorForward, x: Var) -> Result<Var> {
    let flat = tape.reshape(x, &[f.batch, f.n * f.n])?;
    tape.sum_axis(flat, 1)
}

/// Tape value of the per-entry probability of the chosen value; the diagonal is exactly 1.
pub fn chosen_prob_var(tape: &mut Tape, f: &ActorForward, a: &AdjacencyMatrix) -> Result<Var> {
    chosen_prob_rows(tape, f, &[a])
}

/// [`chosen_prob_var`] for one action per stacked state.
pub fn chosen_prob_rows(
    tape: &mut Tape,
    f: &ActorForward,
    actions: &[&AdjacencyMatrix],
) -> Result<Var> {
    let n = f.n;
    if actions.len() != f.batch || actions.iter().any(|a| a.n() != n) {
        return Err(Error::dim(
            "chosen_prob_var",
            "actions do not match the policy batch",
        ));
    }
    let off = off_diagonal(n);
    let total = f.batch * n * n;
    let mut ones = Vec::with_capacity(total);
    let mut zeros = Vec::with_capacity(total);
    let mut diag = Vec::with_capacity(total);
    for a in actions {
        for (k, &e) in a.entries().iter().enumerate() {
            ones.push(e as f64);
            zeros.push(off[k] * (1.0 - e as f64));
            diag.push(1.0 - off[k]);
        }
    }
    let shape = [f.batch * n, n];
    let c1 = tape.constant(&shape, ones)?;
    let c0 = tape.constant(&shape, zeros)?;
    let cd = tape.constant(&shape, diag)?;
    let pos = tape.mul(f.probs, c1)?;
    let neg = tape.neg(f.probs)?;
    let neg = tape.add_scalar(neg, 1.0)?;
    let neg = tape.mul(neg, c0)?;
    let sum = tape.add(pos, neg)?;
    tape.add(sum, cd)
}

/// Tape value of [`entropy`].
pub fn entropy_var(tape: &mut Tape, f: &ActorForward, full: bool) -> Result<Var> {
    let rows = entropy_rows(tape, f, full)?;
    tape.sum(rows)
}

/// Per-state [`entropy`] as a `batch × 1` tape value.
pub fn entropy_rows(tape: &mut Tape, f: &ActorForward, full: bool) -> Result<Var> {
    let n = f.n;
    let off = tape.constant(&[f.batch * n, n], off_diagonal(n).repeat(f.batch))?;
    let lp = tape.log(f.probs)?;
    let t = tape.mul(f.probs, lp)?;
    let mut t = tape.mul(t, off)?;
    if full {
        let q = tape.neg(f.probs)?;
        let q = tape.add_scalar(q, 1.0)?;
        let lq = tape.log(q)?;
        let u = tape.mul(q, lq)?;
        let u = tape.mul(u, off)?;
        t = tape.add(t, u)?;
    }
    let s = per_state_sum(tape, f, t)?;
    tape.scale(s, -1.0 / (n * n) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(encoder: EncoderKind) -> SdgatConfig {
        SdgatConfig {
            encoder,
            n_s: 2,
            n_gat: 2,
            n_sd: 2,
            d_k: 4,
            d_v: 8,
            m_out: 8,
            input_depth: 5,
            decoder_hidden: 6,
            residual: false,
        }
    }

    fn random_state(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![n, m],
            (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn encode_values(actor: &Actor, store: &ParamStore, s: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let f = actor.forward(&mut tape, store, s, None).unwrap();
        tape.value(f.enc).to_vec()
    }

    #[test]
    fn stacked_forward_matches_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for encoder in [
            EncoderKind::Sdgat,
            EncoderKind::Gat,
            EncoderKind::Transformer,
        ] {
            let mut store = ParamStore::new();
            let actor = Actor::new(small_cfg(encoder), &mut store, &mut rng).unwrap();
            let states: Vec<Tensor> = (0..3).map(|_| random_state(4, 5, &mut rng)).collect();
            let mut g = AdjacencyMatrix::empty(4);
            g.set_edge(0, 1, true);
            g.set_edge(2, 3, true);
            for mask in [None, Some(AttentionMask::from_adjacency(&g, true))] {
                let mut tape = Tape::new();
                let f = actor
                    .forward_batch(&mut tape, &store, &states, mask.as_ref())
                    .unwrap();
                assert_eq!(tape.shape(f.probs), &[12, 4]);
                let (probs, enc) = (tape.value(f.probs).to_vec(), tape.value(f.enc).to_vec());
                for (k, s) in states.iter().enumerate() {
                    let mut t1 = Tape::new();
                    let f1 = actor.forward(&mut t1, &store, s, mask.as_ref()).unwrap();
                    let (p1, e1) = (t1.value(f1.probs), t1.value(f1.enc));
                    let close =
                        |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
                    assert!(close(&probs[k * 16..(k + 1) * 16], p1), "{encoder:?}");
                    assert!(
                        close(&enc[k * e1.len()..(k + 1) * e1.len()], e1),
                        "{encoder:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn divisibility_is_checked() {
        let bad = SdgatConfig {
            d_v: 60,
            ..SdgatConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SdgatConfig {
            n_sd: 3,
            ..SdgatConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SdgatConfig::default().validate().is_ok());
    }

    #[test]
    fn default_layer_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Actor::new(SdgatConfig::default(), &mut store, &mut rng).unwrap();
        let shape = |name: &str| store.get(store.find(name).unwrap()).shape().to_vec();
        assert_eq!(shape("actor.enc.0.wq"), vec![64, 16 * 16]);
        assert_eq!(shape("actor.enc.0.wv"), vec![64, 64]);
        assert_eq!(shape("actor.enc.5.wo3"), vec![16, 16]);
        assert_eq!(shape("actor.dec.w1"), vec![64, 16]);
        assert_eq!(shape("actor.dec.q"), vec![16, 1]);
    }

    #[test]
    fn single_node_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SdgatConfig {
            n_s: 1,
            ..small_cfg(EncoderKind::Sdgat)
        };
        let actor = Actor::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let s = random_state(1, 5, &mut rng);
        let enc = encode_values(&actor, &store, &s);
        // With one node the attention weight is 1, so each first-level output is (x Wv_p) Wo_p.
        let Layer::Sdgat { wv, wo, .. } = &actor.layers[0] else {
            unreachable!()
        };
        let wv = store.get(*wv);
        let mut expected = Vec::new();
        for (p, w) in wo.iter().enumerate() {
            let w = store.get(*w);
            let block: Vec<f64> = (0..4)
                .map(|c| (0..5).map(|r| s.data()[r] * wv.at(r, p * 4 + c)).sum())
                .collect();
            expected.extend((0..4).map(|c| (0..4).map(|r| block[r] * w.at(r, c)).sum::<f64>()));
        }
        for (a, b) in enc.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoders_are_permutation_equivariant() {
        for kind in [
            EncoderKind::Sdgat,
            EncoderKind::Gat,
            EncoderKind::Transformer,
        ] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let actor = Actor::new(small_cfg(kind), &mut store, &mut rng).unwrap();
            let s = random_state(5, 5, &mut rng);
            let perm = [3, 0, 4, 1, 2];
            let mut ps = vec![0.0; 25];
            for (i, &p) in perm.iter().enumerate() {
                ps[p * 5..p * 5 + 5].copy_from_slice(&s.data()[i * 5..i * 5 + 5]);
            }
            let ps = Tensor::new(vec![5, 5], ps).unwrap();
            let (e, pe) = (
                encode_values(&actor, &store, &s),
                encode_values(&actor, &store, &ps),
            );
            for (i, &p) in perm.iter().enumerate() {
                for c in 0..8 {
                    assert!((e[i * 8 + c] - pe[p * 8 + c]).abs() < 1e-10, "{kind:?}");
                }
            }
            let pm = actor.policy(&store, &s).unwrap();
            let ppm = actor.policy(&store, &ps).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert!((pm.get(i, j) - ppm.get(perm[i], perm[j])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn identical_rows_give_identical_encodings() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = Actor::new(small_cfg(EncoderKind::Sdgat), &mut store, &mut rng).unwrap();
        let row: Vec<f64> = (0..5).map(|k| k as f64 * 0.3 - 0.5).collect();
        let s = Tensor::new(vec![3, 5], row.repeat(3)).unwrap();
        let e = encode_values(&actor, &store, &s);
        for i in 1..3 {
            for c in 0..8 {
                assert_eq!(e[c], e[i * 8 + c]);
            }
        }
    }

    #[test]
    fn mask_blocks_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SdgatConfig {
            n_s: 1,
            ..small_cfg(EncoderKind::Sdgat)
        };
        let actor = Actor::new(cfg, &mut store, &mut rng).unwrap();
        let s = random_state(3, 5, &mut rng);
        // Node 0 may only attend to itself, so its encoding ignores the other rows.
        let mut a = AdjacencyMatrix::empty(3);
        a.set_edge(1, 2, true);
        a.set_edge(2, 1, true);
        let mask = AttentionMask::from_adjacency(&a, true);
        let run = |state: &Tensor| {
            let mut tape = Tape::new();
            let f = actor
                .forward(&mut tape, &store, state, Some(&mask))
                .unwrap();
            tape.value(f.enc)[..8].to_vec()
        };
        let mut other = s.clone();
        other.data_mut()[7] += 1.0;
        assert_eq!(run(&s), run(&other));
    }

    #[test]
    fn decoder_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = Actor::new(small_cfg(EncoderKind::Sdgat), &mut store, &mut rng).unwrap();
        let s = random_state(4, 5, &mut rng);
        let pm = actor.policy(&store, &s).unwrap();
        let mut asym = 0.0f64;
        for i in 0..4 {
            assert_eq!(pm.get(i, i), 0.0);
            for j in 0..4 {
                if i != j {
                    assert!(pm.get(i, j) > 0.0 && pm.get(i, j) < 1.0);
                    asym = asym.max((pm.get(i, j) - pm.get(j, i)).abs());
                }
            }
        }
        assert!(asym > 1e-6);
        store.get_mut(actor.decoder_q()).data_mut().fill(0.0);
        let half = actor.policy(&store, &s).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(half.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
    }

    #[test]
    fn sampling_frequencies_and_log_prob() {
        let pm = PolicyMatrix::new(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            let s = sample_action(&pm, &mut rng);
            let k = usize::from(s.adjacency.has_edge(0, 1)) * 2
                + usize::from(s.adjacency.has_edge(1, 0));
            counts[k] += 1;
            assert!((s.log_prob - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01);
        }

        let eps = 1e-7;
        let near = PolicyMatrix::new(3, (0..9).map(|_| 1.0 - eps).collect()).unwrap();
        let s = sample_action(&near, &mut rng);
        assert_eq!(s.adjacency, AdjacencyMatrix::complete(3));
        assert!((s.log_prob - 6.0 * (1.0 - eps).ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_log_prob_matches_bernoulli_pmf() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actor = Actor::new(small_cfg(EncoderKind::Sdgat), &mut store, &mut rng).unwrap();
        let s = random_state(4, 5, &mut rng);
        let mut tape = Tape::new();
        let f = actor.forward(&mut tape, &store, &s, None).unwrap();
        let pm = PolicyMatrix::from_clamped(4, tape.value(f.probs));
        let sampled = sample_action(&pm, &mut rng);
        let lp = log_prob_var(&mut tape, &f, &sampled.adjacency).unwrap();
        let mut manual = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let p = pm.get(i, j);
                    manual += if sampled.adjacency.has_edge(i, j) {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    };
                }
            }
        }
        assert!((tape.scalar(lp) - manual).abs() < 1e-12);
        assert!((sampled.log_prob - manual).abs() < 1e-12);
        let h = entropy_var(&mut tape, &f, false).unwrap();
        assert!((tape.scalar(h) - entropy(&pm, false)).abs() < 1e-12);
        let hf = entropy_var(&mut tape, &f, true).unwrap();
        assert!((tape.scalar(hf) - entropy(&pm, true)).abs() < 1e-12);
    }

    #[test]
    fn expected_edge_count_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probs: Vec<f64> = (0..36).map(|_| rng.random_range(0.05..0.95)).collect();
        let pm = PolicyMatrix::new(6, probs).unwrap();
        let draws = 20_000;
        let total: usize = (0..draws)
            .map(|_| sample_action(&pm, &mut rng).adjacency.edge_count())
            .sum();
        let var: f64 = pm.probs().iter().map(|p| p * (1.0 - p)).sum();
        let sd = (var / draws as f64).sqrt();
        assert!((total as f64 / draws as f64 - pm.expected_edges()).abs() < 3.0 * sd);
    }

    #[test]
    fn entropy_values() {
        let zero = PolicyMatrix::new(3, vec![0.0; 9]).unwrap();
        assert_eq!(entropy(&zero, false), 0.0);
        let half = PolicyMatrix::new(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        assert!((entropy(&half, false) - 0.1733).abs() < 1e-4);
        let single = |p: f64| {
            entropy(
                &PolicyMatrix::new(2, vec![0.0, p, 0.0, 0.0]).unwrap(),
                false,
            )
        };
        let top = single(1.0 / std::f64::consts::E);
        assert!(top > single(0.36) && top > single(0.38));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [
            EncoderKind::Sdgat,
            EncoderKind::Gat,
            EncoderKind::Transformer,
        ] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let cfg = SdgatConfig {
                n_s: 1,
                input_depth: 4,
                residual: kind == EncoderKind::Transformer,
                ..small_cfg(kind)
            };
            let actor = Actor::new(cfg, &mut store, &mut rng).unwrap();
            let s = random_state(3, 4, &mut rng);
            let mut a = AdjacencyMatrix::empty(3);
            a.set_edge(0, 1, true);
            a.set_edge(2, 0, true);
            let objective = |store: &ParamStore| {
                let mut tape = Tape::new();
                let f = actor.forward(&mut tape, store, &s, None).unwrap();
                let lp = log_prob_var(&mut tape, &f, &a).unwrap();
                let h = entropy_var(&mut tape, &f, false).unwrap();
                let loss = tape.add(lp, h).unwrap();
                (tape.scalar(loss), tape, loss)
            };
            let (_, tape, loss) = objective(&store);
            let grads = tape.backward(loss).unwrap();
            let analytic: Vec<f64> = store
                .ids()
                .flat_map(|id| {
                    grads
                        .param(id)
                        .map(<[f64]>::to_vec)
                        .unwrap_or(vec![0.0; store.get(id).numel()])
                })
                .collect();
            let base = store.flat_values();
            let h = 1e-6;
            for k in 0..base.len() {
                let mut plus = base.clone();
                plus[k] += h;
                let mut minus = base.clone();
                minus[k] -= h;
                store.set_flat_values(&plus).unwrap();
                let fp = objective(&store).0;
                store.set_flat_values(&minus).unwrap();
                let fm = objective(&store).0;
                let numeric = (fp - fm) / (2.0 * h);
                let tol = 1e-5 * (1.0 + numeric.abs());
                assert!(
                    (numeric - analytic[k]).abs() < tol,
                    "{kind:?} param {k}: {numeric} vs {}",
                    analytic[k]
                );
            }
            store.set_flat_values(&base).unwrap();
        }
    }
}
