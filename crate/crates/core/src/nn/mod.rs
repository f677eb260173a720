//! Minimal neural-network layer kit on flat `f64` parameter buffers.
//!
//! Every layer stores its weights as [`Slot`] offsets into one shared
//! `Vec<f64>`, which keeps optimizer steps, gradient clipping, and
//! checkpointing trivial (one contiguous buffer each). Layers follow a
//! shared calling pattern:
//!
//! * `forward(&self, params, x)` — pure inference, reentrant.
//! * `forward_cached(&self, params, x)` — inference plus whatever the
//!   backward pass needs.
//! * `backward(&self, params, cache, gy, grads)` — returns the input
//!   gradient; accumulates parameter gradients into `grads` when given
//!   `Some`, and skips that work entirely when given `None` (used when
//!   only input gradients are wanted, e.g. guidance).

pub mod act;
pub mod adam;
pub mod conv;
#[cfg(test)]
mod gradcheck;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod store;

pub use act::{log_softmax, sigmoid, silu, silu2, silu2_backward, silu_backward};
pub use adam::{clip_grad_norm, Adam};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;
pub use pool::{
    global_avg_pool, global_avg_pool_backward, upsample_nearest2x, upsample_nearest2x_backward,
    AttnPool,
};
pub use store::{Slot, StoreBuilder};
