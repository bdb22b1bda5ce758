//! Dense `f64` tensors with reverse-mode differentiation and an Adam updater.
//!
//! Networks register their weights in a [`ParamStore`]. A forward pass copies
//! them onto a fresh [`Tape`], evaluates eagerly, and [`Tape::backward`] hands
//! back [`Gradients`] that the store accumulates. One tape serves one forward
//! pass; independent passes (one per batch element) use independent tapes and
//! their gradients simply add.
//!
//! ```
//! use trcdag::diff::{Tape, Tensor};
//!
//! let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
//! let mut tape = Tape::new();
//! let wv = tape.leaf(&w).unwrap();
//! let sq = tape.mul(wv, wv).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(wv).unwrap(), &[2.0, 4.0]);
//! ```

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
