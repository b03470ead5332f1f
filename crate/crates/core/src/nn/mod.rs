//! Minimal float64 neural-network machinery: tensors flow through a tree of
//! layers with hand-written backward passes.

mod graph;
mod kernels;
pub mod loss;
pub mod optim;
mod params;
pub mod pool;

pub use graph::{apply_stat_updates, back, init_all, run, ForwardCtx, Layer, Mode, Tape};
pub use optim::SgdMomentum;
pub use params::{Grads, ParamStore};
pub use pool::{pool_with_indices, unpool_with_indices, PoolingRecord};
