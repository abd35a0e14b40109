//! Dense arrays, reverse-mode differentiation, named parameter sets and
//! the two optimizers used by the trainer.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};
pub use params::{clone_params, ParamSet};
pub use tape::{forward, forward_and_grad, Bound, Gradients, Tape, Var};

use rand::Rng;

/// Uniform in `±sqrt(1 / fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> DenseArray {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    DenseArray::new(shape.to_vec(), data).expect("shape from caller")
}
