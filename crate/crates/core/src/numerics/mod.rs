//! Dense `f64` tensors, a reverse-mode tape, AdamW and the warm-up/poly
//! learning-rate schedule.

mod gradcheck;
mod graph;
mod optim;
mod schedule;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

pub(crate) use graph::{box_iou_scalar, sigmoid_scalar, softmax_in_place};
pub(crate) use tensor::gemm;

/// SplitMix64 finalizer; the counter-based mixer behind every derived seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}
