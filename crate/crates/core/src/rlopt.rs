//! Training algorithms for the actor and critic: REINFORCE with a moving
//! average baseline, prioritized replay (PSR), trust-region-navigated
//! clipping (TRC) and clipped PPO as a comparison arm.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{self, Actor, ActorForward, PolicyMatrix, SampledAction, SdgatConfig};
use crate::critic::{Critic, CriticConfig};
use crate::diff::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::scoring::ScoredGraph;

pub const CHECKPOINT_SCHEMA: &str = "trcdag-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrcConfig {
    /// Clip radius ε.
    pub epsilon: f64,
    /// Per-entry KL threshold σ of the trust region.
    pub sigma: f64,
    /// Entropy weight λ_e.
    pub lambda_e: f64,
    /// Adds the `(1−π) ln(1−π)` half of the Bernoulli entropy.
    pub full_entropy: bool,
    /// Rank-priority exponent β of the replay buffer.
    pub beta: f64,
    /// Moving average rate α_m.
    pub alpha_m: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl Default for TrcConfig {
    fn default() -> Self {
        TrcConfig {
            epsilon: 0.1,
            sigma: 0.035,
            lambda_e: 0.001,
            full_entropy: false,
            beta: 0.6,
            alpha_m: 0.99,
            actor_lr: 0.001,
            critic_lr: 0.001,
        }
    }
}

impl TrcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::contract(format!(
                "epsilon = {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::contract(format!(
                "sigma = {} must be positive",
                self.sigma
            )));
        }
        if !(self.beta >= 0.0) || !(self.lambda_e >= 0.0) {
            return Err(Error::contract("beta and lambda_e must be non-negative"));
        }
        if !(self.alpha_m > 0.0 && self.alpha_m < 1.0) {
            return Err(Error::contract(format!(
                "alpha_m = {} must lie in (0, 1)",
                self.alpha_m
            )));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::contract("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    Psr,
    Trc,
    Ppo,
}

impl Algorithm {
    pub fn uses_replay(self) -> bool {
        self != Algorithm::Reinforce
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Reinforce => "reinforce",
            Algorithm::Psr => "psr",
            Algorithm::Trc => "trc",
            Algorithm::Ppo => "ppo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(Algorithm::Reinforce),
            "psr" => Ok(Algorithm::Psr),
            "trc" => Ok(Algorithm::Trc),
            "ppo" => Ok(Algorithm::Ppo),
            other => Err(Error::contract(format!(
                "unknown algorithm {other:?}; expected reinforce, psr, trc or ppo"
            ))),
        }
    }
}

/// One-step experience `(S, A, R, b(A|S), Â)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Tensor,
    pub action: AdjacencyMatrix,
    pub reward: f64,
    /// Score components, kept so the reward can be recomputed when λ changes.
    pub score: Option<ScoredGraph>,
    /// Probability of the chosen value per entry under the behaviour policy; diagonal 1.
    pub b_probs: Vec<f64>,
    /// Critic value when the transition was generated.
    pub value: f64,
    pub advantage: f64,
    pub index: u64,
}

impl Transition {
    pub fn new(
        state: Tensor,
        sample: SampledAction,
        value: f64,
        reward: f64,
        score: Option<ScoredGraph>,
    ) -> Self {
        Transition {
            state,
            action: sample.adjacency,
            reward,
            score,
            b_probs: sample.chosen_probs,
            value,
            advantage: 0.0,
            index: 0,
        }
    }

    pub fn refresh_reward(&mut self, lambda1: f64, lambda2: f64) {
        if let Some(s) = &self.score {
            self.reward = s.reward(lambda1, lambda2);
        }
    }
}

/// Bounded FIFO of transitions with rank-based prioritized sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    next_index: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
            next_index: 0,
        })
    }

    /// Evicts the oldest item when full and stamps the insertion index.
    pub fn push(&mut self, mut t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        t.index = self.next_index;
        self.next_index += 1;
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, pos: usize) -> &Transition {
        &self.items[pos]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn refresh_rewards(&mut self, lambda1: f64, lambda2: f64) {
        for t in &mut self.items {
            t.refresh_reward(lambda1, lambda2);
        }
    }

    /// Draws `count` positions with replacement from [`priority_distribution`].
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let p = priority_distribution(self, beta)?;
        let dist =
            WeightedIndex::new(&p).map_err(|e| Error::contract(format!("replay weights: {e}")))?;
        Ok((0..count).map(|_| dist.sample(rng)).collect())
    }
}

/// `P(i) ∝ rank(i)^−β`, ranks by descending `|Â|` with older items first on ties.
/// Returned in buffer order (oldest first).
pub fn priority_distribution(buffer: &ReplayBuffer, beta: f64) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::contract("priority distribution of an empty buffer"));
    }
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (buffer.get(a), buffer.get(b));
        tb.advantage
            .abs()
            .total_cmp(&ta.advantage.abs())
            .then(ta.index.cmp(&tb.index))
    });
    let mut p = vec![0.0; buffer.len()];
    for (rank, &pos) in order.iter().enumerate() {
        p[pos] = ((rank + 1) as f64).powf(-beta);
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Exponentially smoothed reward baseline; the first update adopts the batch mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingAverage {
    value: Option<f64>,
    rate: f64,
}

impl MovingAverage {
    pub fn new(rate: f64) -> Self {
        MovingAverage { value: None, rate }
    }

    pub fn with_value(rate: f64, value: f64) -> Self {
        MovingAverage {
            value: Some(value),
            rate,
        }
    }

    pub fn get(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn is_initialized(&self) -> bool {
        self.value.is_some()
    }

    pub fn update(&mut self, batch_mean: f64) -> f64 {
        let v = match self.value {
            None => batch_mean,
            Some(r) => (1.0 - self.rate) * batch_mean + self.rate * r,
        };
        self.value = Some(v);
        v
    }
}

/// Output of one no-gradient policy evaluation.
#[derive(Clone, Debug)]
pub struct Acted {
    pub policy: PolicyMatrix,
    pub sample: SampledAction,
    pub value: f64,
}

/// Actor and critic sharing one parameter store, each with its own Adam.
#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: Actor,
    pub critic: Critic,
    pub store: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub encoder: SdgatConfig,
    pub critic_config: CriticConfig,
    pub actor: BTreeMap<String, Tensor>,
    pub critic: BTreeMap<String, Tensor>,
    pub moving_average: Option<f64>,
    pub iteration: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        encoder: SdgatConfig,
        critic_cfg: CriticConfig,
        cfg: &TrcConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let m_out = encoder.m_out;
        let actor = Actor::new(encoder, &mut store, rng)?;
        let critic = Critic::new(critic_cfg, m_out, &mut store, rng)?;
        Ok(Agent {
            actor_opt: Adam::for_prefix(AdamConfig::with_lr(cfg.actor_lr), &store, "actor."),
            critic_opt: Adam::for_prefix(AdamConfig::with_lr(cfg.critic_lr), &store, "critic."),
            actor,
            critic,
            store,
        })
    }

    /// Samples an action for `state` and records the critic's value.
    pub fn act<R: Rng + ?Sized>(&self, state: &Tensor, rng: &mut R) -> Result<Acted> {
        let mut acted = self.act_batch(std::slice::from_ref(state), rng)?;
        Ok(acted.remove(0))
    }

    /// [`Agent::act`] for several states from one forward pass; samples are
    /// drawn in state order so results match repeated single calls.
    pub fn act_batch<R: Rng + ?Sized>(&self, states: &[Tensor], rng: &mut R) -> Result<Vec<Acted>> {
        let mut tape = Tape::new();
        let f = self
            .actor
            .forward_batch(&mut tape, &self.store, states, None)?;
        let v = self.critic.value_rows(&mut tape, &self.store, f.enc, f.n)?;
        let values = tape.value(v).to_vec();
        let policies = actor::split_policies(&f, tape.value(f.probs));
        Ok(policies
            .into_iter()
            .zip(values)
            .map(|(policy, value)| {
                let sample = actor::sample_action(&policy, rng);
                Acted {
                    policy,
                    sample,
                    value,
                }
            })
            .collect())
    }

    pub fn checkpoint(&self, ma: &MovingAverage, iteration: u64) -> Checkpoint {
        let (mut a, mut c) = (BTreeMap::new(), BTreeMap::new());
        for (name, t) in self.store.to_named() {
            if name.starts_with("critic.") {
                c.insert(name, t);
            } else {
                a.insert(name, t);
            }
        }
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            encoder: self.actor.config().clone(),
            critic_config: self.critic.config().clone(),
            actor: a,
            critic: c,
            moving_average: ma.value,
            iteration,
        }
    }

    /// Loads weights from a checkpoint taken from an identically configured agent.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::contract(format!(
                "unsupported checkpoint schema {:?}",
                ck.schema
            )));
        }
        if &ck.encoder != self.actor.config() || &ck.critic_config != self.critic.config() {
            return Err(Error::contract("checkpoint network configuration differs"));
        }
        let mut named = ck.actor.clone();
        named.extend(ck.critic.clone());
        self.store.load_named(&named)
    }

    fn apply(&mut self) -> Result<()> {
        self.actor_opt.step(&mut self.store)?;
        self.critic_opt.step(&mut self.store)
    }
}

/// Which policy surrogate a step minimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surrogate {
    /// `Â · (1/n²) Σ ln π(A_ij)`.
    ScoreFunction,
    /// `Â · Π ratio_ij`, ratios clipped where the entry leaves the trust region.
    TrustRegion,
    /// `Â · Π ratio_ij`, with per-entry pessimistic ε-clipping.
    Ppo,
}

/// Per-entry clip counts over off-diagonal entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipStats {
    pub entries: u64,
    /// Entries with `KL ≥ σ` and the ratio outside `[1−ε, 1+ε]`.
    pub trc_clipped: u64,
    /// Entries with the ratio outside `[1−ε, 1+ε]`.
    pub ppo_clipped: u64,
}

impl ClipStats {
    pub fn merge(&mut self, other: ClipStats) {
        self.entries += other.entries;
        self.trc_clipped += other.trc_clipped;
        self.ppo_clipped += other.ppo_clipped;
    }

    pub fn trc_rate(&self) -> f64 {
        self.trc_clipped as f64 / self.entries.max(1) as f64
    }

    pub fn ppo_rate(&self) -> f64 {
        self.ppo_clipped as f64 / self.entries.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub r_m: f64,
    /// Mean and standard deviation of the online batch reward.
    pub mean_reward: f64,
    pub reward_std: f64,
    pub clip: Option<ClipStats>,
}

/// Per-iteration training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub r_m: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_rate_trc: Option<f64>,
    pub clip_rate_ppo: Option<f64>,
    pub buffer_size: usize,
}

/// Losses of an accumulated surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurrogateOutcome {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip: ClipStats,
}

/// Bernoulli KL divergence `D(b ‖ π)`.
pub fn kl_bernoulli(b: f64, p: f64) -> f64 {
    let term = |x: f64, y: f64| if x > 0.0 { x * (x / y).ln() } else { 0.0 };
    term(b, p) + term(1.0 - b, 1.0 - p)
}

/// Per-entry KL between the behaviour policy and `pm`. `b_probs` holds the
/// behaviour probability of the value chosen in `action`; the divergence is
/// the same whichever value is labelled 1.
pub fn kl_map(b_probs: &[f64], pm: &PolicyMatrix, action: &AdjacencyMatrix) -> Result<Vec<f64>> {
    let n = pm.n();
    if b_probs.len() != n * n || action.n() != n {
        return Err(Error::dim(
            "kl_map",
            "behaviour probabilities, policy and action sizes differ",
        ));
    }
    Ok((0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                return 0.0;
            }
            let p = pm.get(i, j);
            let chosen = if action.has_edge(i, j) { p } else { 1.0 - p };
            kl_bernoulli(b_probs[k], chosen)
        })
        .collect())
}

/// Clips ratios to `[1−ε, 1+ε]` where `KL ≥ σ`. The mask marks entries whose value changed.
pub fn trc_clip(
    ratio: &[f64],
    kl: &[f64],
    epsilon: f64,
    sigma: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if ratio.len() != kl.len() {
        return Err(Error::dim("trc_clip", "ratio and KL maps differ in size"));
    }
    let mut mask = vec![false; ratio.len()];
    let out = ratio
        .iter()
        .zip(kl)
        .zip(&mut mask)
        .map(|((&r, &d), m)| {
            if d >= sigma {
                let c = r.clamp(1.0 - epsilon, 1.0 + epsilon);
                *m = c != r;
                c
            } else {
                r
            }
        })
        .collect();
    Ok((out, mask))
}

/// Entries where the pessimistic PPO choice `min(r·Â, clip(r)·Â)` picks the clipped value.
fn ppo_mask(ratio: &[f64], advantage: f64, epsilon: f64) -> Vec<bool> {
    ratio
        .iter()
        .map(|&r| (advantage > 0.0 && r > 1.0 + epsilon) || (advantage < 0.0 && r < 1.0 - epsilon))
        .collect()
}

/// Admissible ratio interval of the trust region at behaviour probability `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub low: f64,
    pub high: f64,
    /// The threshold exceeds the attainable divergence on a side; that side is the open limit.
    pub saturated: bool,
}

/// Solves `D(b ‖ π) = δ` on both sides of `b` by bisection and returns `(π_low/b, π_high/b)`.
pub fn kl_ratio_bounds(b: f64, delta: f64) -> Result<RatioBounds> {
    if !(b > 0.0 && b < 1.0) || !(delta > 0.0) {
        return Err(Error::contract(format!(
            "kl_ratio_bounds needs b in (0,1) and δ > 0, got b = {b}, δ = {delta}"
        )));
    }
    let f = |p: f64| kl_bernoulli(b, p) - delta;
    let solve = |mut lo: f64, mut hi: f64, rising: bool| {
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (f(mid) > 0.0) == rising {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (p_min, p_max) = (f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    let mut saturated = false;
    let low = if f(p_min) <= 0.0 {
        saturated = true;
        0.0
    } else {
        solve(p_min, b, false)
    };
    let high = if f(p_max) <= 0.0 {
        saturated = true;
        1.0
    } else {
        solve(b, p_max, true)
    };
    Ok(RatioBounds {
        low: low / b,
        high: high / b,
        saturated,
    })
}

fn off_diagonal(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
        .collect()
}

/// Per-state `Π ratio` on the tape as `batch × 1`, with ratios clipped where `clip_mask` is set.
fn ratio_product(
    tape: &mut Tape,
    f: &ActorForward,
    items: &[&Transition],
    clip_mask: &[bool],
    epsilon: f64,
) -> Result<Var> {
    let n = f.n;
    let shape = [f.batch * n, n];
    let actions: Vec<&AdjacencyMatrix> = items.iter().map(|t| &t.action).collect();
    let chosen = actor::chosen_prob_rows(tape, f, &actions)?;
    let inv_b: Vec<f64> = items
        .iter()
        .flat_map(|t| t.b_probs.iter().map(|b| 1.0 / b))
        .collect();
    let inv_b = tape.constant(&shape, inv_b)?;
    let ratio = tape.mul(chosen, inv_b)?;
    let ratio = if clip_mask.iter().any(|&m| m) {
        let clipped = tape.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
        let m: Vec<f64> = clip_mask.iter().map(|&c| f64::from(u8::from(c))).collect();
        let keep: Vec<f64> = m.iter().map(|x| 1.0 - x).collect();
        let m = tape.constant(&shape, m)?;
        let keep = tape.constant(&shape, keep)?;
        let a = tape.mul(ratio, keep)?;
        let b = tape.mul(clipped, m)?;
        tape.add(a, b)?
    } else {
        ratio
    };
    let logs = tape.log(ratio)?;
    let off = tape.constant(&shape, off_diagonal(n).repeat(f.batch))?;
    let logs = tape.mul(logs, off)?;
    let s = actor::per_state_sum(tape, f, logs)?;
    tape.exp(s).map_err(|e| e.within("ratio product"))
}

/// Accumulates actor and critic gradients of the chosen surrogate over `items`
/// into the agent's store without stepping the optimizers.
///
/// The critic sees detached encodings and the advantage is a constant, so
/// actor and critic gradients stay separate even on a shared tape.
pub fn accumulate_surrogate(
    agent: &mut Agent,
    items: &[&Transition],
    r_m: f64,
    cfg: &TrcConfig,
    surrogate: Surrogate,
) -> Result<SurrogateOutcome> {
    let result = accumulate_inner(agent, items, r_m, cfg, surrogate);
    if result.is_err() {
        agent.store.zero_grad();
    }
    result
}

fn accumulate_inner(
    agent: &mut Agent,
    items: &[&Transition],
    r_m: f64,
    cfg: &TrcConfig,
    surrogate: Surrogate,
) -> Result<SurrogateOutcome> {
    if items.is_empty() {
        return Err(Error::contract("optimizer step on an empty batch"));
    }
    let batch = items.len();
    let states: Vec<Tensor> = items.iter().map(|t| t.state.clone()).collect();
    let mut tape = Tape::new();
    let f = agent
        .actor
        .forward_batch(&mut tape, &agent.store, &states, None)?;
    let n = f.n;
    let enc = tape.detach(f.enc)?;
    let v = agent.critic.value_rows(&mut tape, &agent.store, enc, n)?;
    let adv: Vec<f64> = items
        .iter()
        .zip(tape.value(v))
        .map(|(t, v)| t.reward - r_m - v)
        .collect();
    let h = actor::entropy_rows(&mut tape, &f, cfg.full_entropy)?;
    let mut out = SurrogateOutcome::default();
    let weighted = match surrogate {
        Surrogate::ScoreFunction => {
            let actions: Vec<&AdjacencyMatrix> = items.iter().map(|t| &t.action).collect();
            let lp = actor::log_prob_rows(&mut tape, &f, &actions)?;
            let w: Vec<f64> = adv.iter().map(|a| a / (n * n) as f64).collect();
            let w = tape.constant(&[batch, 1], w)?;
            tape.mul(lp, w)?
        }
        Surrogate::TrustRegion | Surrogate::Ppo => {
            let policies = actor::split_policies(&f, tape.value(f.probs));
            let mut mask = Vec::with_capacity(batch * n * n);
            for ((t, pm), &a) in items.iter().zip(&policies).zip(&adv) {
                let kl = kl_map(&t.b_probs, pm, &t.action)?;
                let ratio = chosen_ratio(pm, t);
                let (_, trc_mask) = trc_clip(&ratio, &kl, cfg.epsilon, cfg.sigma)?;
                for k in 0..n * n {
                    if k / n != k % n {
                        out.clip.entries += 1;
                        out.clip.trc_clipped += u64::from(trc_mask[k]);
                        out.clip.ppo_clipped += u64::from((ratio[k] - 1.0).abs() > cfg.epsilon);
                    }
                }
                match surrogate {
                    Surrogate::TrustRegion => mask.extend(trc_mask),
                    _ => mask.extend(ppo_mask(&ratio, a, cfg.epsilon)),
                }
            }
            let prod = ratio_product(&mut tape, &f, items, &mask, cfg.epsilon)?;
            let w = tape.constant(&[batch, 1], adv.clone())?;
            tape.mul(prod, w)?
        }
    };
    let he = tape.scale(h, cfg.lambda_e)?;
    let gain = tape.add(weighted, he)?;
    let gain = tape.sum(gain)?;
    let actor_loss = tape.scale(gain, -1.0 / batch as f64)?;
    let targets: Vec<f64> = items.iter().map(|t| t.reward - r_m).collect();
    let targets = tape.constant(&[batch, 1], targets)?;
    let d = tape.sub(v, targets)?;
    let sq = tape.mul(d, d)?;
    let sq = tape.sum(sq)?;
    let critic_loss = tape.scale(sq, 1.0 / batch as f64)?;
    out.actor_loss = tape.scalar(actor_loss);
    out.critic_loss = tape.scalar(critic_loss);
    if !out.actor_loss.is_finite() || !out.critic_loss.is_finite() {
        return Err(Error::NonFinite("surrogate loss".into()));
    }
    let loss = tape.add(actor_loss, critic_loss)?;
    tape.backward_into(loss, &mut agent.store)
        .map_err(|e| e.within("surrogate loss"))?;
    Ok(out)
}

fn chosen_ratio(pm: &PolicyMatrix, t: &Transition) -> Vec<f64> {
    let n = pm.n();
    (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                return 1.0;
            }
            let p = pm.get(i, j);
            let chosen = if t.action.has_edge(i, j) { p } else { 1.0 - p };
            chosen / t.b_probs[k]
        })
        .collect()
}

fn reward_moments(batch: &[Transition]) -> (f64, f64) {
    let n = batch.len().max(1) as f64;
    let mean = batch.iter().map(|t| t.reward).sum::<f64>() / n;
    let var = batch.iter().map(|t| (t.reward - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// REINFORCE with the moving average baseline on a fresh online batch.
pub fn reinforce_step(
    agent: &mut Agent,
    batch: &[Transition],
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("optimizer step on an empty batch"));
    }
    let (mean, std) = reward_moments(batch);
    let r_m = ma.update(mean);
    let items: Vec<&Transition> = batch.iter().collect();
    let out = accumulate_surrogate(agent, &items, r_m, cfg, Surrogate::ScoreFunction)?;
    agent.apply()?;
    Ok(StepReport {
        actor_loss: out.actor_loss,
        critic_loss: out.critic_loss,
        r_m,
        mean_reward: mean,
        reward_std: std,
        clip: None,
    })
}

/// Stores the online batch, then trains on a prioritized replay sample of the same size.
pub fn replay_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    online: Vec<Transition>,
    buffer: &mut ReplayBuffer,
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
    surrogate: Surrogate,
    rng: &mut R,
) -> Result<StepReport> {
    if online.is_empty() {
        return Err(Error::contract("optimizer step on an empty batch"));
    }
    let (mean, std) = reward_moments(&online);
    let count = online.len();
    let r_m0 = ma.get();
    for mut t in online {
        t.advantage = t.reward - r_m0 - t.value;
        buffer.push(t);
    }
    let picks = buffer.sample(count, cfg.beta, rng)?;
    let items: Vec<&Transition> = picks.iter().map(|&p| buffer.get(p)).collect();
    let sampled_mean = items.iter().map(|t| t.reward).sum::<f64>() / count as f64;
    let r_m = ma.update(sampled_mean);
    let out = accumulate_surrogate(agent, &items, r_m, cfg, surrogate)?;
    agent.apply()?;
    Ok(StepReport {
        actor_loss: out.actor_loss,
        critic_loss: out.critic_loss,
        r_m,
        mean_reward: mean,
        reward_std: std,
        clip: (surrogate != Surrogate::ScoreFunction).then_some(out.clip),
    })
}

pub fn psr_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    online: Vec<Transition>,
    buffer: &mut ReplayBuffer,
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
    rng: &mut R,
) -> Result<StepReport> {
    replay_step(
        agent,
        online,
        buffer,
        ma,
        cfg,
        Surrogate::ScoreFunction,
        rng,
    )
}

pub fn trc_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    online: Vec<Transition>,
    buffer: &mut ReplayBuffer,
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
    rng: &mut R,
) -> Result<StepReport> {
    replay_step(agent, online, buffer, ma, cfg, Surrogate::TrustRegion, rng)
}

pub fn ppo_step<R: Rng + ?Sized>(
    agent: &mut Agent,
    online: Vec<Transition>,
    buffer: &mut ReplayBuffer,
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
    rng: &mut R,
) -> Result<StepReport> {
    replay_step(agent, online, buffer, ma, cfg, Surrogate::Ppo, rng)
}

/// Dispatches one step of `algorithm`; the buffer is ignored by REINFORCE.
pub fn train_step<R: Rng + ?Sized>(
    algorithm: Algorithm,
    agent: &mut Agent,
    online: Vec<Transition>,
    buffer: &mut ReplayBuffer,
    ma: &mut MovingAverage,
    cfg: &TrcConfig,
    rng: &mut R,
) -> Result<StepReport> {
    match algorithm {
        Algorithm::Reinforce => reinforce_step(agent, &online, ma, cfg),
        Algorithm::Psr => psr_step(agent, online, buffer, ma, cfg, rng),
        Algorithm::Trc => trc_step(agent, online, buffer, ma, cfg, rng),
        Algorithm::Ppo => ppo_step(agent, online, buffer, ma, cfg, rng),
    }
}

/// The four actions of a two-node problem, indexed by `2·a01 + a10`.
pub fn two_node_actions() -> [AdjacencyMatrix; 4] {
    std::array::from_fn(|k| {
        let mut a = AdjacencyMatrix::empty(2);
        a.set_edge(0, 1, k & 2 != 0);
        a.set_edge(1, 0, k & 1 != 0);
        a
    })
}

/// Exact expected actor gradient `Σ_A P(A)·w(A)·∇ln P(A)` over the four two-node actions.
pub fn expected_gradient(
    actor: &Actor,
    store: &ParamStore,
    state: &Tensor,
    weights: &[f64; 4],
) -> Result<Vec<f64>> {
    if state.shape().first() != Some(&2) {
        return Err(Error::contract("exact expectation needs a two-node state"));
    }
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with("actor."))
        .collect();
    let mut total = vec![0.0; ids.iter().map(|&id| store.get(id).numel()).sum()];
    for (a, w) in two_node_actions().iter().zip(weights) {
        let mut tape = Tape::new();
        let f = actor.forward(&mut tape, store, state, None)?;
        let lp = actor::log_prob_var(&mut tape, &f, a)?;
        let p = tape.scalar(lp).exp();
        let grads = tape.backward(lp)?;
        let mut off = 0;
        for &id in &ids {
            let len = store.get(id).numel();
            if let Some(g) = grads.param(id) {
                for (t, gi) in total[off..off + len].iter_mut().zip(g) {
                    *t += p * w * gi;
                }
            }
            off += len;
        }
    }
    Ok(total)
}

/// Largest componentwise gap between the exact expected gradient with the
/// baseline `R_m + V` subtracted and without it.
pub fn baseline_unbiasedness_check(
    actor: &Actor,
    store: &ParamStore,
    state: &Tensor,
    rewards: &[f64; 4],
    r_m: f64,
    v: f64,
) -> Result<f64> {
    let shifted = rewards.map(|r| r - r_m - v);
    let with = expected_gradient(actor, store, state, &shifted)?;
    let without = expected_gradient(actor, store, state, rewards)?;
    Ok(with
        .iter()
        .zip(&without)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}
