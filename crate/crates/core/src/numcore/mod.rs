//! Dense matrix arithmetic, seeded randomness, reverse-mode gradients and Adam.
//!
//! All training math is `f64`. Graphs in this domain have at most a few
//! hundred nodes, so dense kernels are sufficient.

mod adam;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{analytic_gradients, compare_gradients, gradcheck, relative_error, DEFAULT_STEP, RELATIVE_FLOOR};
pub use rng::{derive_seed, fnv1a64, splitmix64, SeededRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;
