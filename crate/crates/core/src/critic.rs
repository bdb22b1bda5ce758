//! State-value estimate from node encodings: mean pooling over nodes followed
//! by a two-layer ReLU network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { hidden: 64 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::contract("critic hidden width must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    cfg: CriticConfig,
    input: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Critic {
    /// Registers parameters under `critic.` for encodings of width `input`.
    pub fn new<R: Rng + ?Sized>(
        cfg: CriticConfig,
        input: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if input == 0 {
            return Err(Error::contract("critic input width must be positive"));
        }
        let h = cfg.hidden;
        Ok(Critic {
            w1: store.add_uniform("critic.w1", input, h, input, rng),
            b1: store.add("critic.b1", Tensor::zeros(&[1, h])),
            w2: store.add_uniform("critic.w2", h, 1, h, rng),
            b2: store.add("critic.b2", Tensor::zeros(&[1, 1])),
            cfg,
            input,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    /// Scalar tape value `V(enc)`. Callers pass a detached encoding so the
    /// critic never sends gradient into the encoder.
    pub fn value_var(&self, tape: &mut Tape, store: &ParamStore, enc: Var) -> Result<Var> {
        let n = tape.shape(enc).first().copied().unwrap_or(0);
        let v = self.value_rows(tape, store, enc, n)?;
        tape.sum(v)
    }

    /// Values of stacked encodings, one per block of `n` rows, as `batch × 1`.
    pub fn value_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Var,
        n: usize,
    ) -> Result<Var> {
        let shape = tape.shape(enc);
        if shape.len() != 2 || shape[1] != self.input || n == 0 || shape[0] % n != 0 {
            return Err(Error::dim(
                "Critic::value",
                format!(
                    "enc {shape:?}, expected blocks of {n} rows × {}",
                    self.input
                ),
            ));
        }
        let rows = shape[0];
        let batch = rows / n;
        let pooled = if batch == 1 {
            let p = tape.mean_axis(enc, 0)?;
            tape.reshape(p, &[1, self.input])?
        } else {
            let mut pool = vec![0.0; batch * rows];
            for g in 0..batch {
                pool[g * rows + g * n..g * rows + (g + 1) * n].fill(1.0 / n as f64);
            }
            let pool = tape.constant(&[batch, rows], pool)?;
            tape.matmul(pool, enc)?
        };
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1)?,
            tape.param(store, self.b1)?,
            tape.param(store, self.w2)?,
            tape.param(store, self.b2)?,
        );
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let v = tape.matmul(h, w2)?;
        tape.add_row(v, b2).map_err(|e| e.within("critic"))
    }

    pub fn value(&self, store: &ParamStore, enc: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let e = tape.leaf(enc)?;
        let v = self.value_var(&mut tape, store, e)?;
        Ok(tape.scalar(v))
    }
}

/// `mean((R − R_m − V)²)` over a batch.
pub fn critic_loss(values: &[f64], rewards: &[f64], r_m: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("critic loss of an empty batch"));
    }
    if values.len() != rewards.len() {
        return Err(Error::dim(
            "critic_loss",
            format!("{} values vs {} rewards", values.len(), rewards.len()),
        ));
    }
    let sum: f64 = values
        .iter()
        .zip(rewards)
        .map(|(v, r)| (r - r_m - v).powi(2))
        .sum();
    Ok(sum / values.len() as f64)
}

/// One term `(R − R_m − V)² / batch` of the critic loss on the tape.
#[cfg(test)]
pub(crate) fn critic_term(tape: &mut Tape, value: Var, target: f64, batch: usize) -> Result<Var> {
    let d = tape.add_scalar(value, -target)?;
    let sq = tape.mul(d, d)?;
    tape.scale(sq, 1.0 / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Adam, AdamConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Critic, ParamStore, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Critic::new(CriticConfig { hidden: 7 }, 5, &mut store, &mut rng).unwrap();
        (c, store, rng)
    }

    fn enc(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![n, 5],
            (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_value() {
        let (c, mut store, mut rng) = setup(0);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(c.value(&store, &enc(4, &mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn value_ignores_node_order() {
        let (c, store, mut rng) = setup(1);
        let e = enc(4, &mut rng);
        let mut rows: Vec<Vec<f64>> = e.data().chunks(5).map(<[f64]>::to_vec).collect();
        rows.reverse();
        rows.swap(0, 2);
        let p = Tensor::from_rows(&rows).unwrap();
        assert!((c.value(&store, &e).unwrap() - c.value(&store, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let (c, mut store, mut rng) = setup(2);
        // Shift biases so that some hidden units sit well inside the active region.
        store
            .get_mut(store.find("critic.b1").unwrap())
            .data_mut()
            .fill(0.3);
        let e = enc(3, &mut rng);
        let mut tape = Tape::new();
        let ev = tape.leaf(&e).unwrap();
        let v = c.value_var(&mut tape, &store, ev).unwrap();
        let grads = tape.backward(v).unwrap();
        let analytic: Vec<f64> = store
            .ids()
            .flat_map(|id| grads.param(id).unwrap().to_vec())
            .collect();
        let base = store.flat_values();
        let h = 1e-6;
        for k in 0..base.len() {
            let mut x = base.clone();
            x[k] += h;
            store.set_flat_values(&x).unwrap();
            let fp = c.value(&store, &e).unwrap();
            x[k] -= 2.0 * h;
            store.set_flat_values(&x).unwrap();
            let fm = c.value(&store, &e).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() <= 1e-4 * numeric.abs().max(1e-3),
                "{k}"
            );
        }
    }

    #[test]
    fn stacked_values_match_single_values() {
        let (c, store, mut rng) = setup(4);
        let encs: Vec<Tensor> = (0..3).map(|_| enc(4, &mut rng)).collect();
        let data: Vec<f64> = encs.iter().flat_map(|e| e.data().to_vec()).collect();
        let mut tape = Tape::new();
        let stacked = tape.leaf(&Tensor::new(vec![12, 5], data).unwrap()).unwrap();
        let v = c.value_rows(&mut tape, &store, stacked, 4).unwrap();
        assert_eq!(tape.shape(v), &[3, 1]);
        for (e, got) in encs.iter().zip(tape.value(v)) {
            assert!((c.value(&store, e).unwrap() - got).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_edge_cases() {
        assert!(matches!(
            critic_loss(&[], &[], 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            critic_loss(&[1.0], &[1.0, 2.0], 0.0),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(critic_loss(&[0.5, -1.0], &[1.5, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(critic_loss(&[0.0; 3], &[2.5; 3], 0.0).unwrap(), 6.25);
    }

    #[test]
    fn adam_fits_a_fixed_batch() {
        let (c, mut store, mut rng) = setup(3);
        let encs: Vec<Tensor> = (0..8).map(|_| enc(4, &mut rng)).collect();
        let rewards: Vec<f64> = (0..8).map(|k| -1.0 - 0.2 * k as f64).collect();
        let r_m = -0.5;
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &store);
        let loss = |store: &ParamStore| {
            let values: Vec<f64> = encs.iter().map(|e| c.value(store, e).unwrap()).collect();
            critic_loss(&values, &rewards, r_m).unwrap()
        };
        let initial = loss(&store);
        for _ in 0..500 {
            for (e, r) in encs.iter().zip(&rewards) {
                let mut tape = Tape::new();
                let ev = tape.leaf(e).unwrap();
                let v = c.value_var(&mut tape, &store, ev).unwrap();
                let l = critic_term(&mut tape, v, r - r_m, encs.len()).unwrap();
                tape.backward_into(l, &mut store).unwrap();
            }
            opt.step(&mut store).unwrap();
        }
        assert!(
            loss(&store) < 0.1 * initial,
            "{} vs {initial}",
            loss(&store)
        );
    }
}
